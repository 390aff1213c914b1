#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mssar/mssar.hpp"

namespace {

mssar::ExperimentConfig load(const std::string& path, const mssar::Overrides& ov) {
  auto cfg = mssar::load_config(path);
  ov.apply(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale spatially-asymmetric recalibration toolkit"};
  app.require_subcommand(1);

  mssar::Overrides ov;
  std::uint64_t seed = 0;
  std::string out_dir;
  int precision = 64;
  auto add_overrides = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "override run.seed");
    sub->add_option("--out", out_dir, "override run.out");
    sub->add_option("--precision", precision, "override run.precision (32|64)")->check(CLI::IsMember({32, 64}));
  };
  auto collect = [&](CLI::App* sub) {
    if (sub->count("--seed")) ov.seed = seed;
    if (sub->count("--out")) ov.out = out_dir;
    if (sub->count("--precision")) ov.precision = precision;
  };

  std::string config, weights;

  auto* train = app.add_subcommand("train", "train a network and write curve.csv + weights.bin");
  train->add_option("config", config, "experiment config")->required();
  add_overrides(train);

  auto* eval = app.add_subcommand("eval", "evaluate saved weights on the test split");
  eval->add_option("config", config, "experiment config")->required();
  eval->add_option("weights", weights, "weights file written by train")->required();
  add_overrides(eval);

  bool csv = false;
  bool transition_flops = false;
  auto* analyze = app.add_subcommand("analyze", "print the parameter/FLOP breakdown");
  analyze->add_option("config", config, "experiment config")->required();
  analyze->add_flag("--csv", csv, "emit CSV (layer,params,flops,is_recal)");
  analyze->add_flag("--transition-flops", transition_flops, "count dense transition convolutions");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every operator");
  gradcheck->add_option("config", config, "experiment config")->required();
  add_overrides(gradcheck);

  std::string synth_dir;
  std::size_t classes = 2, per_class = 250, test_per_class = 100;
  std::uint64_t synth_seed = 1;
  auto* synth = app.add_subcommand("synth", "write a seeded synthetic dataset in CIFAR-10 format");
  synth->add_option("dir", synth_dir, "output directory")->required();
  synth->add_option("--classes", classes, "class count")->check(CLI::Range(1, 255));
  synth->add_option("--per-class", per_class, "training images per class");
  synth->add_option("--test-per-class", test_per_class, "test images per class");
  synth->add_option("--seed", synth_seed, "generator seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      collect(train);
      return mssar::cmd_train(load(config, ov), std::cout, std::cerr);
    }
    if (*eval) {
      collect(eval);
      return mssar::cmd_eval(load(config, ov), weights, std::cout, std::cerr);
    }
    if (*analyze) {
      mssar::CostOptions opt;
      opt.count_transition_flops = transition_flops;
      return mssar::cmd_analyze(load(config, ov), csv, std::cout, std::cerr, opt);
    }
    if (*gradcheck) {
      collect(gradcheck);
      return mssar::cmd_gradcheck(load(config, ov), std::cout, std::cerr);
    }
    if (*synth) return mssar::cmd_synth(synth_dir, classes, per_class, test_per_class, synth_seed, std::cout, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
