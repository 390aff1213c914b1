#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "mssar/commands.hpp"

using namespace mssar;

namespace {

std::size_t error_line(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.line();
  }
  ADD_FAILURE() << "config parsed without error:\n" << text;
  return 0;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mssar_cli_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

const char* kData = "data.train = a.bin\ndata.test = b.bin\n";

}  // namespace

TEST(Config, MinimalDefaults) {
  const auto cfg = parse_config(std::string("network.preset = resnet20\n") + kData);
  EXPECT_EQ(cfg.optim.momentum, 0.9);
  EXPECT_EQ(cfg.optim.weight_decay, 1e-4);
  EXPECT_EQ(cfg.optim.lr, 0.1);
  EXPECT_EQ(cfg.optim.lr_drops, (std::vector<std::size_t>{80, 120}));
  EXPECT_EQ(cfg.run.epochs, 160u);
  EXPECT_EQ(cfg.run.batch_size, 128u);
  EXPECT_EQ(cfg.run.precision, 64);
  EXPECT_EQ(cfg.network, presets::resnet_cifar(3));
  EXPECT_EQ(cfg.data.train, (std::vector<std::string>{"a.bin"}));

  const auto dn = parse_config(std::string("network.preset = densenet100\n") + kData);
  EXPECT_EQ(dn.optim.lr_drops, (std::vector<std::size_t>{150, 225}));
}

TEST(Config, ScalesAndComments) {
  const auto cfg = parse_config(std::string("# header\nnetwork.preset = resnet20\n\nmsar.enabled = true\n"
                                            "msar.scales = 1,2,4   # trailing\nmsar.strategy = sliding\n") +
                                kData);
  EXPECT_TRUE(cfg.network.msar.enabled);
  EXPECT_EQ(cfg.network.msar.config.scales, (std::vector<std::size_t>{1, 2, 4}));
  EXPECT_EQ(cfg.network.msar.config.strategy, Strategy::sliding);
  EXPECT_EQ(error_line(std::string("msar.scales = 0\n") + kData), 1u);
  EXPECT_EQ(error_line(std::string("network.preset = resnet20\nmsar.enabled = true\nmsar.scales = 2,1\n") + kData), 3u);
}

TEST(Config, ErrorsCarryLineNumbers) {
  EXPECT_EQ(error_line(std::string("network.preset = resnet20\nnetwork.depth = 3\n") + kData), 2u);
  EXPECT_EQ(error_line(std::string("run.epochs = ten\n") + kData), 1u);
  EXPECT_EQ(error_line(std::string("run.seed = -3\n") + kData), 1u);
  EXPECT_EQ(error_line(std::string("msar.enabled = maybe\n") + kData), 1u);
  EXPECT_EQ(error_line("network.preset = resnet20\ndata.train = a.bin\n"), 3u);
  EXPECT_EQ(error_line(std::string(kData) + "run.seed = 1\nrun.seed = 2\n"), 4u);
  EXPECT_EQ(error_line(std::string("just words\n") + kData), 1u);
  EXPECT_EQ(error_line(std::string("network.preset = resnet21\n") + kData), 1u);
  EXPECT_EQ(error_line(std::string("\n\nrun.precision = 16\n") + kData), 3u);
  // validation failures point at the key that caused them
  EXPECT_EQ(error_line(std::string("network.preset = toy\nmsar.enabled = true\nmsar.scales = 1,64\n") + kData), 3u);
  try {
    parse_config(std::string("run.batch_size = x\n") + kData);
  } catch (const ConfigError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("config line 1: ", 0), 0u) << e.what();
  }
}

TEST(Config, RoundTrip) {
  const std::string text = std::string(
                               "network.preset = densenet100\nmsar.enabled = true\nmsar.stage_mode = single\n"
                               "optim.lr = 0.05\nrun.seed = 7\nrun.out = runs/x\ndata.classes = 3,5\n"
                               "data.per_class = 10\ndata.format = cifar100_fine\ndata.augment = false\n") +
                           kData;
  const auto a = parse_config(text);
  const auto s = serialize_config(a);
  const auto b = parse_config(s);
  EXPECT_EQ(a, b);
  EXPECT_EQ(serialize_config(b), s);
  EXPECT_EQ(b.network.msar.mode, StageMode::single);
  EXPECT_EQ(b.data.classes, (std::vector<int>{3, 5}));

  auto custom = parse_config(std::string("network.kind = bottleneck\nnetwork.stages = 32:16:1:8:2, 16:32:1:16:4\n"
                                         "network.compression = 0.3333333333333333\n") +
                             kData);
  EXPECT_EQ(custom.network.stages[1].groups, 4u);
  EXPECT_EQ(parse_config(serialize_config(custom)), custom);
}

TEST(Cli, AnalyzeIsByteIdenticalAndMatchesGolden) {
  const auto cfg = parse_config(std::string("network.preset = resnet20\n") + kData);
  std::ostringstream a, b, err;
  EXPECT_EQ(cmd_analyze(cfg, false, a, err), 0);
  EXPECT_EQ(cmd_analyze(cfg, false, b, err), 0);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_NE(a.str().find("40.813M"), std::string::npos);
  EXPECT_NE(a.str().find("272.5K"), std::string::npos);
  std::ostringstream csv;
  EXPECT_EQ(cmd_analyze(cfg, true, csv, err), 0);
  EXPECT_EQ(csv.str(), render_csv(report(cfg.network)));
  EXPECT_TRUE(err.str().empty());
}

TEST(Cli, EvalWithMismatchedWeightsFails) {
  const auto dir = temp_dir("eval");
  cmd_synth(dir.string(), 2, 2, 2, 1, std::cout, std::cerr);
  auto cfg = parse_config("network.preset = toy\nmsar.enabled = true\ndata.train = " + (dir / "train.bin").string() +
                          "\ndata.test = " + (dir / "test.bin").string() + "\n");
  Rng rng(1);
  Network<double> with(cfg.network, rng);
  save_weights((dir / "w.bin").string(), with.parameters());

  auto plain = cfg;
  plain.network.msar.enabled = false;
  std::ostringstream out, err;
  EXPECT_NE(cmd_eval(plain, (dir / "w.bin").string(), out, err), 0);
  EXPECT_NE(err.str().find("error: "), std::string::npos);
  EXPECT_NE(err.str().find("'stage2.block1.conv1.conv'"), std::string::npos) << err.str();
  const std::string msg = err.str();
  EXPECT_EQ(std::count(msg.begin(), msg.end(), '\n'), 1);

  std::ostringstream ok_out, ok_err;
  EXPECT_EQ(cmd_eval(cfg, (dir / "w.bin").string(), ok_out, ok_err), 0) << ok_err.str();
  EXPECT_EQ(ok_out.str().rfind("test_loss=", 0), 0u);
  EXPECT_NE(cmd_eval(cfg, (dir / "nope.bin").string(), ok_out, ok_err), 0);
}

TEST(Cli, FailedTrainWritesNoCurve) {
  const auto dir = temp_dir("train_fail");
  auto cfg = parse_config(std::string("network.preset = toy\nrun.epochs = 1\nrun.out = ") + (dir / "run").string() +
                          "\ndata.train = " + (dir / "missing.bin").string() + "\ndata.test = " +
                          (dir / "missing.bin").string() + "\n");
  std::ostringstream out, err;
  EXPECT_NE(cmd_train(cfg, out, err), 0);
  EXPECT_NE(err.str().find("missing.bin"), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists(dir / "run" / "curve.csv"));
  EXPECT_FALSE(std::filesystem::exists(dir / "run" / "curve.csv.partial"));

  // diverging run: huge learning rate blows up the loss
  cmd_synth(dir.string(), 2, 4, 2, 3, out, err);
  auto bad = parse_config(std::string("network.preset = toy\nrun.epochs = 3\nrun.batch_size = 4\noptim.lr = 1e200\n"
                                      "run.out = ") +
                          (dir / "run2").string() + "\ndata.train = " + (dir / "train.bin").string() +
                          "\ndata.test = " + (dir / "test.bin").string() + "\n");
  std::ostringstream o2, e2;
  EXPECT_NE(cmd_train(bad, o2, e2), 0);
  EXPECT_FALSE(std::filesystem::exists(dir / "run2" / "curve.csv"));
}

TEST(Cli, TrainWritesArtifacts) {
  const auto dir = temp_dir("train_ok");
  std::ostringstream out, err;
  ASSERT_EQ(cmd_synth(dir.string(), 2, 4, 2, 3, out, err), 0);
  auto cfg = parse_config(std::string("network.preset = toy\nrun.epochs = 1\nrun.batch_size = 4\nrun.out = ") +
                          (dir / "run").string() + "\ndata.train = " + (dir / "train.bin").string() +
                          "\ndata.test = " + (dir / "test.bin").string() + "\n");
  ASSERT_EQ(cmd_train(cfg, out, err), 0) << err.str();
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "curve.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "weights.bin"));
  EXPECT_EQ(load_config((dir / "run" / "config.txt").string()), cfg);
  std::ostringstream eo;
  EXPECT_EQ(cmd_eval(cfg, (dir / "run" / "weights.bin").string(), eo, err), 0);

  Overrides ov;
  ov.precision = 32;
  ov.out = (dir / "run32").string();
  ov.apply(cfg);
  ASSERT_EQ(cmd_train(cfg, out, err), 0) << err.str();
  EXPECT_TRUE(std::filesystem::exists(dir / "run32" / "curve.csv"));
  ov.precision = 16;
  EXPECT_THROW(ov.apply(cfg), std::invalid_argument);
}

TEST(Cli, GradcheckOnToyMsarConfig) {
  const auto cfg = parse_config(std::string("network.preset = toy\nmsar.enabled = true\n") + kData);
  std::ostringstream out, err;
  EXPECT_EQ(cmd_gradcheck(cfg, out, err), 0) << out.str() << err.str();
  EXPECT_NE(out.str().find("config msar block (regional)"), std::string::npos);
  EXPECT_EQ(out.str().find("FAIL"), std::string::npos);
}
