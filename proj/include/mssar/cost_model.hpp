#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "mssar/network_spec.hpp"
#include "mssar/recalibration.hpp"

namespace mssar {

/// Parameter and FLOP counts. One multiply-accumulate counts as one FLOP.
struct Cost {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;

  Cost& operator+=(const Cost& o) {
    params += o.params;
    flops += o.flops;
    return *this;
  }
  friend bool operator==(const Cost&, const Cost&) = default;
};

/// Bias-free convolution producing an h_out x w_out map.
inline Cost conv_cost(std::uint64_t d_in, std::uint64_t d_out, std::uint64_t k, std::uint64_t h_out,
                      std::uint64_t w_out, std::uint64_t groups = 1) {
  if (d_in == 0 || d_out == 0 || k == 0 || h_out == 0 || w_out == 0)
    throw std::invalid_argument("conv_cost: dimensions must be positive");
  if (groups == 0 || d_in % groups != 0 || d_out % groups != 0) {
    throw std::invalid_argument("conv_cost: groups " + std::to_string(groups) +
                                " must divide channels " + std::to_string(d_in) + " -> " +
                                std::to_string(d_out));
  }
  const std::uint64_t params = k * k * d_in * d_out / groups;
  return {params, params * h_out * w_out};
}

/// Coordinate-set pooling of `channels` maps at every scale: one addition
/// per input entry per scale.
inline std::uint64_t msar_pooling_flops(std::uint64_t channels, std::size_t num_scales,
                                        std::uint64_t h, std::uint64_t w) {
  return static_cast<std::uint64_t>(num_scales) * h * w * channels;
}

/// Fully-connected part of one recalibration unit, without pooling.
inline Cost msar_fc_cost(std::uint64_t source, std::uint64_t target, std::uint64_t bottleneck,
                         const MultiScaleConfig& cfg, std::uint64_t h, std::uint64_t w) {
  Cost c;
  const std::uint64_t per_vector = bottleneck * (source + target);
  for (std::size_t k : cfg.scales) {
    c.params += per_vector;
    const std::uint64_t vectors =
        cfg.strategy == Strategy::regional ? static_cast<std::uint64_t>(k) * k : h * w;
    c.flops += per_vector * vectors;
  }
  return c;
}

/// Extra parameters and FLOPs of one recalibration unit with `source`
/// input channels and `target` reweighted channels.
inline Cost msar_cost(std::uint64_t source, std::uint64_t target, std::uint64_t bottleneck,
                      const MultiScaleConfig& cfg, std::uint64_t h, std::uint64_t w) {
  Cost c = msar_fc_cost(source, target, bottleneck, cfg, h, w);
  c.flops += msar_pooling_flops(source, cfg.scales.size(), h, w);
  return c;
}

/// Same-width unit: params 2 L D D', FLOPs sum_l [WHD + 2 D D' n_l].
inline Cost msar_cost(std::uint64_t d, std::uint64_t bottleneck, const MultiScaleConfig& cfg,
                      std::uint64_t h, std::uint64_t w) {
  return msar_cost(d, d, bottleneck, cfg, h, w);
}

struct CostRow {
  std::string layer;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  bool is_recal = false;
};

struct CostOptions {
  /// Dense transition 1x1 convolutions contribute parameters always and
  /// FLOPs only when set.
  bool count_transition_flops = false;
  /// Count the affine parameters of the batch norms inside the
  /// recalibration branch.
  bool count_recal_norm_params = false;
};

struct CostReport {
  std::string network;
  std::vector<CostRow> rows;
  std::uint64_t baseline_params = 0;
  std::uint64_t baseline_flops = 0;
  std::uint64_t extra_params = 0;
  std::uint64_t extra_flops = 0;

  std::uint64_t total_params() const { return baseline_params + extra_params; }
  std::uint64_t total_flops() const { return baseline_flops + extra_flops; }
  /// 100 * extra / baseline, evaluated from the exact integer ratio.
  double extra_params_percent() const { return percent(extra_params, baseline_params); }
  double extra_flops_percent() const { return percent(extra_flops, baseline_flops); }

  static double percent(std::uint64_t num, std::uint64_t den) {
    if (den == 0) return 0.0;
    return static_cast<double>(static_cast<long double>(num) * 100.0L / static_cast<long double>(den));
  }
};

namespace detail {

class CostBuilder {
 public:
  CostBuilder(const NetworkSpec& spec, const CostOptions& opt) : spec_(spec), opt_(opt) {
    report_.network = spec.name;
  }

  void base(std::string layer, Cost c) { push(std::move(layer), c, false); }
  void recal(std::string layer, Cost c) { push(std::move(layer), c, true); }

  void conv_bn(const std::string& layer, std::uint64_t in, std::uint64_t out, std::uint64_t k,
               std::uint64_t side, std::uint64_t groups = 1) {
    base(layer + ".conv", conv_cost(in, out, k, side, side, groups));
    bn(layer + ".bn", out);
  }

  void bn(const std::string& layer, std::uint64_t channels) { base(layer, {2 * channels, 0}); }

  void msar_unit(const std::string& layer, std::uint64_t source, std::uint64_t target,
                 std::uint64_t side, bool pool) {
    const auto& cfg = spec_.msar.config;
    const std::uint64_t d = bottleneck_width(source, cfg.scales.size(), cfg.reduction);
    Cost c = pool ? msar_cost(source, target, d, cfg, side, side)
                  : msar_fc_cost(source, target, d, cfg, side, side);
    if (opt_.count_recal_norm_params) c.params += cfg.scales.size() * 2 * (d + target);
    recal(layer, c);
  }

  CostReport finish() { return std::move(report_); }

 private:
  void push(std::string layer, Cost c, bool is_recal) {
    if (is_recal) {
      report_.extra_params += c.params;
      report_.extra_flops += c.flops;
    } else {
      report_.baseline_params += c.params;
      report_.baseline_flops += c.flops;
    }
    report_.rows.push_back({std::move(layer), c.params, c.flops, is_recal});
  }

  const NetworkSpec& spec_;
  const CostOptions& opt_;
  CostReport report_;
};

}  // namespace detail

/// Per-layer parameter/FLOP breakdown of `spec`. Batch-norm, activation and
/// pooling layers cost no FLOPs; batch norms carry 2 parameters per channel.
inline CostReport report(const NetworkSpec& spec, const CostOptions& opt = {}) {
  spec.validate();
  detail::CostBuilder b(spec, opt);
  const bool msar = spec.msar.enabled;
  std::uint64_t c = spec.input_channels;
  std::uint64_t side = spec.input_size;

  if (spec.stem != StemKind::none) {
    const bool ilsvrc = spec.stem == StemKind::ilsvrc;
    const std::uint64_t out_side = ilsvrc ? side / 2 : side;
    b.base("stem.conv", conv_cost(c, spec.stem_width, ilsvrc ? 7 : 3, out_side, out_side));
    if (spec.kind != BlockKind::dense) b.bn("stem.bn", spec.stem_width);
    c = spec.stem_width;
    side = spec.stem_output_size();
  }

  for (std::size_t si = 0; si < spec.stages.size(); ++si) {
    const StageSpec& st = spec.stages[si];
    const std::string stage = "stage" + std::to_string(si + 1);
    const std::uint64_t s = st.spatial;
    switch (spec.kind) {
      case BlockKind::plain:
        for (std::size_t i = 0; i < st.blocks; ++i) {
          const std::string blk = stage + ".block" + std::to_string(i + 1);
          b.conv_bn(blk + ".conv1", c, st.width, 3, s);
          if (msar) b.msar_unit(blk + ".recal", st.width, st.width, s, true);
          c = st.width;
        }
        break;
      case BlockKind::residual:
        for (std::size_t i = 0; i < st.blocks; ++i) {
          const std::string blk = stage + ".block" + std::to_string(i + 1);
          const bool stride = i == 0 && side != s;
          b.conv_bn(blk + ".conv1", c, st.width, 3, s);
          b.conv_bn(blk + ".conv2", st.width, st.width, 3, s);
          if (c != st.width || stride) b.conv_bn(blk + ".shortcut", c, st.width, 1, s);
          if (msar) b.msar_unit(blk + ".recal", st.width, st.width, s, true);
          c = st.width;
        }
        break;
      case BlockKind::bottleneck:
        for (std::size_t i = 0; i < st.blocks; ++i) {
          const std::string blk = stage + ".block" + std::to_string(i + 1);
          const bool stride = i == 0 && side != s;
          b.conv_bn(blk + ".conv1", c, st.mid, 1, stride ? side : s);
          b.conv_bn(blk + ".conv2", st.mid, st.mid, 3, s, st.groups);
          b.conv_bn(blk + ".conv3", st.mid, st.width, 1, s);
          if (c != st.width || stride) b.conv_bn(blk + ".shortcut", c, st.width, 1, s);
          if (msar) b.msar_unit(blk + ".recal", st.width, st.width, s, true);
          c = st.width;
        }
        break;
      case BlockKind::dense: {
        const std::uint64_t g = spec.growth;
        const std::uint64_t mid = spec.bottleneck_factor * g;
        const bool multi = spec.msar.mode == StageMode::multi;
        const std::size_t L = spec.msar.config.scales.size();
        if (msar && multi) b.recal(stage + ".recal.pool", {0, msar_pooling_flops(c, L, s, s)});
        for (std::size_t i = 0; i < st.blocks; ++i) {
          const std::string step = stage + ".step" + std::to_string(i + 1);
          b.bn(step + ".bn1", c);
          if (mid > 0) {
            b.base(step + ".conv1", conv_cost(c, mid, 1, s, s));
            b.bn(step + ".bn2", mid);
            b.base(step + ".conv2", conv_cost(mid, g, 3, s, s));
          } else {
            b.bn(step + ".bn2", c);
            b.base(step + ".conv2", conv_cost(c, g, 3, s, s));
          }
          if (msar) {
            if (multi) {
              b.msar_unit(step + ".recal", c, g, s, false);
              if (i + 1 < st.blocks)
                b.recal(step + ".recal.pool", {0, msar_pooling_flops(g, L, s, s)});
            } else {
              b.msar_unit(step + ".recal", g, g, s, true);
            }
          }
          c += g;
        }
        if (si + 1 < spec.stages.size()) {
          const std::string tr = "transition" + std::to_string(si + 1);
          b.bn(tr + ".bn", c);
          const auto out = static_cast<std::uint64_t>(spec.compression * static_cast<double>(c));
          Cost tc = conv_cost(c, out, 1, s, s);
          if (!opt.count_transition_flops) tc.flops = 0;
          b.base(tr + ".conv", tc);
          c = out;
        }
        break;
      }
    }
    side = s;
  }
  if (spec.kind == BlockKind::dense) b.bn("head.bn", c);
  b.base("classifier", {c * spec.classes + spec.classes, c * spec.classes});
  return b.finish();
}

/// Human-readable count: 40.81M, 1.81G, 272.5K.
inline std::string human_count(std::uint64_t v) {
  char buf[32];
  if (v >= 1000000000ULL) std::snprintf(buf, sizeof buf, "%.3fG", static_cast<double>(v) / 1e9);
  else if (v >= 1000000ULL) std::snprintf(buf, sizeof buf, "%.3fM", static_cast<double>(v) / 1e6);
  else if (v >= 1000ULL) std::snprintf(buf, sizeof buf, "%.1fK", static_cast<double>(v) / 1e3);
  else std::snprintf(buf, sizeof buf, "%llu", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string render_text(const CostReport& r) {
  std::size_t width = 5;
  for (const auto& row : r.rows) width = std::max(width, row.layer.size());
  std::string out;
  char line[512];
  std::snprintf(line, sizeof line, "%-*s %14s %16s  %s\n", static_cast<int>(width), "layer", "params",
                "flops", "recal");
  out += line;
  for (const auto& row : r.rows) {
    std::snprintf(line, sizeof line, "%-*s %14llu %16llu  %s\n", static_cast<int>(width),
                  row.layer.c_str(), static_cast<unsigned long long>(row.params),
                  static_cast<unsigned long long>(row.flops), row.is_recal ? "yes" : "");
    out += line;
  }
  auto total = [&](const char* label, std::uint64_t p, std::uint64_t f) {
    std::snprintf(line, sizeof line, "%-9s params %12llu (%s)  flops %14llu (%s)\n", label,
                  static_cast<unsigned long long>(p), human_count(p).c_str(),
                  static_cast<unsigned long long>(f), human_count(f).c_str());
    out += line;
  };
  out += "\nnetwork: " + r.network + "\n";
  total("baseline", r.baseline_params, r.baseline_flops);
  total("recal", r.extra_params, r.extra_flops);
  total("total", r.total_params(), r.total_flops());
  std::snprintf(line, sizeof line, "overhead  params %.3f%%  flops %.3f%%\n", r.extra_params_percent(),
                r.extra_flops_percent());
  out += line;
  return out;
}

inline std::string render_csv(const CostReport& r) {
  std::string out = "layer,params,flops,is_recal\n";
  for (const auto& row : r.rows) {
    out += row.layer + "," + std::to_string(row.params) + "," + std::to_string(row.flops) + "," +
           (row.is_recal ? "1" : "0") + "\n";
  }
  return out;
}

}  // namespace mssar
