#pragma once

// Whole-network assembly: a conv stem, five stages mixing inverted-residual
// conv blocks with token-block bridges, a 1x1 conv head, global average
// pooling, and a linear classifier. The default spec is the full-size
// network; reduced_spec() is a two-stage miniature of the same shape used
// for training demos and end-to-end gradient checks.

#include "xformer/blocks.hpp"

#include <map>
#include <string>
#include <vector>

namespace xf {

struct StageSpec {
  int index = 0;
  std::vector<Mv3Config> mv3;
  int xf_repeat = 0;  // 0: pure conv stage, no bridge
  int d_emb = 0;
  int d_qkv = 0;
  int mlp_ratio = 0;
};

struct ModelSpec {
  int resolution = 224;
  int num_classes = 1000;
  int stem_channels = 16;
  int head_width = 640;
  int patch = 2;
  AttentionKind attention = AttentionKind::xfa;
  int num_heads = 4;  // mhsa variant
  std::vector<StageSpec> stages;

  static ModelSpec default_spec() {
    ModelSpec s;
    s.stages = {
        {1, {{16, 32, 1}}, 0, 0, 0, 0},
        {2, {{32, 64, 2}, {64, 64, 1}, {64, 64, 1}}, 0, 0, 0, 0},
        {3, {{64, 96, 2}}, 2, 144, 96, 2},
        {4, {{96, 128, 2}}, 3, 192, 96, 2},
        {5, {{128, 160, 2}}, 4, 240, 96, 3},
    };
    return s;
  }

  // Two-stage miniature for 64x64 two-class runs: same stem/stage/bridge/
  // head structure, a fraction of the width and depth.
  static ModelSpec reduced_spec() {
    ModelSpec s;
    s.resolution = 64;
    s.num_classes = 2;
    s.stem_channels = 8;
    s.head_width = 64;
    s.stages = {
        {1, {{8, 16, 2}}, 0, 0, 0, 0},
        {2, {{16, 24, 2}}, 1, 32, 16, 2},
    };
    return s;
  }

  void validate() const {
    check(resolution >= 2 && num_classes >= 2 && stem_channels > 0 &&
              head_width > 0 && patch > 0,
          "model spec: sizes must be positive");
    check(!stages.empty(), "model spec: no stages");
    int c = stem_channels;
    for (const auto& st : stages) {
      check(!st.mv3.empty(), "model spec: stage " + std::to_string(st.index) +
                                 " has no conv blocks");
      for (const auto& m : st.mv3) {
        m.validate();
        check(m.c_in == c, "model spec: stage " + std::to_string(st.index) +
                               " expects c_in " + std::to_string(c) +
                               ", got " + std::to_string(m.c_in));
        c = m.c_out;
      }
      if (st.xf_repeat > 0)
        check(st.d_emb > 0 && st.d_qkv > 0 && st.mlp_ratio > 0,
              "model spec: stage " + std::to_string(st.index) +
                  " token-block dims must be positive");
    }
    if (attention == AttentionKind::mhsa)
      check(num_heads > 0, "model spec: num_heads must be positive");
  }
};

inline int stride2_extent(int h) { return (h - 1) / 2 + 1; }  // 3x3 pad-1 conv

// Spatial side length after the stem and after each stage
// (default spec at 224: 112, 112, 56, 28, 14, 7).
inline std::vector<int> spatial_trace(const ModelSpec& spec) {
  std::vector<int> trace;
  int h = stride2_extent(spec.resolution);
  trace.push_back(h);
  for (const auto& st : spec.stages) {
    for (const auto& m : st.mv3)
      if (m.stride == 2) h = stride2_extent(h);
    trace.push_back(h);
  }
  return trace;
}

// Token count a bridge at stage `index` sees at the spec's own resolution.
inline int tokens_at_stage(const ModelSpec& spec, int stage_index) {
  int h = stride2_extent(spec.resolution);
  for (const auto& st : spec.stages) {
    for (const auto& m : st.mv3)
      if (m.stride == 2) h = stride2_extent(h);
    if (st.index == stage_index) {
      const int g = (h + spec.patch - 1) / spec.patch;
      return g * g;
    }
  }
  throw ShapeError("tokens_at_stage: no stage " + std::to_string(stage_index));
}

// --- structural description -------------------------------------------------

struct DescribeRow {
  std::string input_size;  // e.g. "224^2x3"
  std::string layer;       // e.g. "MV3 s2"
  int out_channels = 0;
  int repeat = 1;
  std::string stride;      // "1", "2", or "-"
  std::string stage;       // "stem-in", "1".."5", "stem-out", "pool", "head"
};

inline std::string size_label(int h, int c) {
  return std::to_string(h) + "^2x" + std::to_string(c);
}

inline std::vector<DescribeRow> describe_rows(const ModelSpec& spec) {
  spec.validate();
  std::vector<DescribeRow> rows;
  int h = spec.resolution, c = 3;
  rows.push_back({size_label(h, c), "Conv2d (3x3) s2", spec.stem_channels, 1,
                  "2", "stem-in"});
  h = stride2_extent(h);
  c = spec.stem_channels;
  for (const auto& st : spec.stages) {
    const std::string stage = std::to_string(st.index);
    for (const auto& m : st.mv3) {
      const std::string label = m.stride == 2 ? "MV3 s2" : "MV3";
      DescribeRow row{size_label(h, c), label, m.c_out, 1,
                      std::to_string(m.stride), stage};
      if (!rows.empty()) {
        DescribeRow& last = rows.back();
        if (last.layer == row.layer && last.out_channels == row.out_channels &&
            last.stride == row.stride && last.input_size == row.input_size &&
            last.stage == row.stage) {
          ++last.repeat;
          if (m.stride == 2) h = stride2_extent(h);
          c = m.c_out;
          continue;
        }
      }
      rows.push_back(row);
      if (m.stride == 2) h = stride2_extent(h);
      c = m.c_out;
    }
    if (st.xf_repeat > 0)
      rows.push_back(
          {size_label(h, c), "XF Block", c, st.xf_repeat, "-", stage});
  }
  rows.push_back(
      {size_label(h, c), "Conv2d (1x1)", spec.head_width, 1, "1", "stem-out"});
  rows.push_back({size_label(h, spec.head_width),
                  "AvgPool (" + std::to_string(h) + "x" + std::to_string(h) +
                      ")",
                  spec.head_width, 1, "-", "pool"});
  rows.push_back({size_label(1, spec.head_width), "Linear", spec.num_classes,
                  1, "-", "head"});
  return rows;
}

// --- the network ---------------------------------------------------------------

template <typename Scalar>
struct XFormerModel {
  struct Stage {
    int index = 0;
    std::vector<Mv3Block<Scalar>> mv3;
    bool has_bridge = false;
    StageBridge<Scalar> bridge;
  };

  ModelSpec spec;
  Conv2dLayer<Scalar> stem;
  Norm2d<Scalar> stem_bn;
  std::vector<Stage> stages;
  Conv2dLayer<Scalar> head;
  Norm2d<Scalar> head_bn;
  LinearLayer<Scalar> classifier;

  Tensor<Scalar> forward(const Tensor<Scalar>& image, bool training) {
    check(image.rank() == 3 && image.dim(0) == 3,
          "model forward: expected a {3,H,W} image, got " +
              shape_str(image.shape()));
    Tensor<Scalar> x = silu(stem_bn.forward(stem.forward(image), training));
    for (auto& st : stages) {
      for (auto& b : st.mv3) x = b.forward(x, training);
      if (st.has_bridge) x = st.bridge.forward(x);
    }
    x = silu(head_bn.forward(head.forward(x), training));
    Tensor<Scalar> pooled = reshape(global_avg_pool(x), {1, spec.head_width});
    return reshape(classifier.forward(pooled), {spec.num_classes});
  }

  ParamRegistry<Scalar> registry() const {
    ParamRegistry<Scalar> reg;
    stem.collect("stem.conv", reg);
    stem_bn.collect("stem.bn", reg);
    for (const auto& st : stages) {
      const std::string sp = "s" + std::to_string(st.index);
      for (std::size_t i = 0; i < st.mv3.size(); ++i)
        st.mv3[i].collect(sp + ".b" + std::to_string(i), reg);
      if (st.has_bridge) st.bridge.collect(sp, reg);
    }
    head.collect("head.conv", reg);
    head_bn.collect("head.bn", reg);
    classifier.collect("classifier", reg);
    return reg;
  }
};

template <typename Scalar>
XFormerModel<Scalar> build_xformer(const ModelSpec& spec,
                                   std::uint64_t seed = 1234) {
  spec.validate();
  Rng rng(seed);
  XFormerModel<Scalar> m;
  m.spec = spec;
  m.stem = Conv2dLayer<Scalar>::init(3, spec.stem_channels, 3, 2, 1, false,
                                     rng);
  m.stem_bn = Norm2d<Scalar>::init(spec.stem_channels);
  int c = spec.stem_channels;
  for (const auto& st : spec.stages) {
    typename XFormerModel<Scalar>::Stage stage;
    stage.index = st.index;
    for (const auto& cfg : st.mv3) {
      stage.mv3.push_back(Mv3Block<Scalar>::init(cfg, rng));
      c = cfg.c_out;
    }
    if (st.xf_repeat > 0) {
      XfBlockConfig xcfg;
      xcfg.d_emb = st.d_emb;
      xcfg.d_qkv = st.d_qkv;
      xcfg.mlp_ratio = st.mlp_ratio;
      xcfg.n_train = tokens_at_stage(spec, st.index);
      xcfg.kind = spec.attention;
      xcfg.num_heads = spec.num_heads;
      stage.has_bridge = true;
      stage.bridge =
          StageBridge<Scalar>::init(c, spec.patch, xcfg, st.xf_repeat, rng);
    }
    m.stages.push_back(std::move(stage));
  }
  m.head = Conv2dLayer<Scalar>::init(c, spec.head_width, 1, 1, 0, false, rng);
  m.head_bn = Norm2d<Scalar>::init(spec.head_width);
  m.classifier =
      LinearLayer<Scalar>::init(spec.head_width, spec.num_classes, true, rng);
  return m;
}

// --- parameter audit -------------------------------------------------------------

struct AuditRow {
  std::string scope;
  std::int64_t params = 0;
};

struct ParamAudit {
  std::vector<AuditRow> rows;  // grouped by top-level scope, in registry order
  std::int64_t total = 0;
};

template <typename Scalar>
ParamAudit count_params(const XFormerModel<Scalar>& model) {
  ParamAudit audit;
  for (const auto& [name, t] : model.registry().params) {
    const std::string scope = name.substr(0, name.find('.'));
    if (audit.rows.empty() || audit.rows.back().scope != scope)
      audit.rows.push_back({scope, 0});
    audit.rows.back().params += t.numel();
    audit.total += t.numel();
  }
  return audit;
}

}  // namespace xf
