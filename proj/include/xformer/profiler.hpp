#pragma once

// Analytic cost models: per-layer FLOP counts and retained-activation
// estimates for the network under either attention variant, plus a
// resolution sweep and optional wall-clock timing of the attention path.
//
// Counting conventions (pinned so every derived number is reproducible):
//   - 1 multiply-add = 2 FLOPs; conv = 2*k^2*C_in*C_out*H'*W' (depthwise
//     2*k^2*C*H'*W'), linear = 2*in*out per row; softmax = 5 FLOPs/element.
//   - Norms, activations and pooling count 0 FLOPs (they are dominated by
//     the conv/linear/attention terms this model tracks).
//   - Memory is retained activation elements over one forward pass: each
//     layer output held once (conv/norm/act fused), attention interior
//     buffers enumerated individually since those are where the two
//     mechanisms differ. Weights and allocator overhead are not modeled.

#include "xformer/attention.hpp"
#include "xformer/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <new>
#include <sstream>
#include <string>
#include <vector>

namespace xf {

struct AttnFlops {
  std::int64_t core = 0;         // the mixing mechanism itself
  std::int64_t projections = 0;  // shared q/k/v/out linear maps
  std::int64_t total() const { return core + projections; }
};

// Closed-form attention FLOPs.
//   mhsa core: 2*N^2*Dq (QK^T) + 2*N^2*Dq (AV) + 5*N^2 (softmax)
//   xfa  core: 6*N*Dq (normalize) + 4*N*Dq (scores) + 2*N*Dq (Q^T k_f)
//              + 2*Dq^2 (outer product) + 2*N*Dq^2 (V * core)
//   projections (both): 8*N*D_emb*Dq
inline AttnFlops flops_attention(AttentionKind kind, std::int64_t n,
                                 std::int64_t d_emb, std::int64_t d_qkv) {
  check(n > 0 && d_emb > 0 && d_qkv > 0, "flops_attention: dims must be > 0");
  AttnFlops f;
  if (kind == AttentionKind::mhsa)
    f.core = 4 * n * n * d_qkv + 5 * n * n;
  else
    f.core = 12 * n * d_qkv + 2 * d_qkv * d_qkv + 2 * n * d_qkv * d_qkv;
  f.projections = 8 * n * d_emb * d_qkv;
  return f;
}

// Element count of the mixing map one attention layer materializes:
// the NxN token-affinity matrix (per head) vs. the DqxDq feature map.
inline std::int64_t attention_matrix_elems(AttentionKind kind, std::int64_t n,
                                           std::int64_t d_qkv) {
  return kind == AttentionKind::mhsa ? n * n : d_qkv * d_qkv;
}

// Interior buffers one attention layer keeps live across the forward pass
// (everything between the q/k/v projections and the output projection).
inline std::int64_t attention_core_retained(AttentionKind kind,
                                            std::int64_t n, std::int64_t d_qkv,
                                            int heads) {
  if (kind == AttentionKind::mhsa) {
    // per head: scores, scaled, probs (NxN each) + head output; then concat
    return heads * (3 * n * n + n * (d_qkv / heads)) + n * d_qkv;
  }
  // q_hat,k_hat + resized context kernel + k_c,k_f + Q^T k_f + two DxD maps
  // + the mixed V
  return 2 * n * d_qkv + n + d_qkv + n + d_qkv + 2 * d_qkv * d_qkv +
         n * d_qkv;
}

struct FlopEntry {
  std::string name;
  std::int64_t flops = 0;
  std::int64_t retained = 0;  // activation elements
};

struct FlopReport {
  std::vector<FlopEntry> entries;
  std::int64_t total_flops = 0;
  std::int64_t total_retained = 0;
  std::string dominant;  // entry with the largest FLOP share
  double gflops() const { return static_cast<double>(total_flops) / 1e9; }
};

// Walks the spec's layer graph at the given runtime resolution and tallies
// both counters per named layer. Every layer appears exactly once.
inline FlopReport profile_model(const ModelSpec& spec, int resolution,
                                AttentionKind kind) {
  spec.validate();
  check(resolution >= 2, "profile_model: resolution must be >= 2");
  FlopReport rep;
  auto emit = [&rep](std::string name, std::int64_t flops,
                     std::int64_t retained) {
    rep.entries.push_back({std::move(name), flops, retained});
    rep.total_flops += flops;
    rep.total_retained += retained;
  };

  std::int64_t h = stride2_extent(resolution);
  std::int64_t c = spec.stem_channels;
  emit("stem.conv", 2 * 9 * 3 * c * h * h, c * h * h);

  for (const auto& st : spec.stages) {
    const std::string sp = "s" + std::to_string(st.index);
    for (std::size_t j = 0; j < st.mv3.size(); ++j) {
      const auto& m = st.mv3[j];
      const std::string bp = sp + ".b" + std::to_string(j);
      const std::int64_t e = static_cast<std::int64_t>(m.expansion) * m.c_in;
      const std::int64_t hin = h;
      const std::int64_t hout = m.stride == 2 ? stride2_extent(h) : h;
      const std::int64_t r = e / m.se_reduction;
      emit(bp + ".expand", 2 * m.c_in * e * hin * hin, e * hin * hin);
      emit(bp + ".dw", 2 * m.kernel * m.kernel * e * hout * hout,
           e * hout * hout);
      emit(bp + ".se.fc1", 2 * e * r, e + r);
      emit(bp + ".se.fc2", 2 * r * e, e + e * hout * hout);
      const bool residual = m.stride == 1 && m.c_in == m.c_out;
      emit(bp + ".project", 2 * e * m.c_out * hout * hout,
           (residual ? 2 : 1) * static_cast<std::int64_t>(m.c_out) * hout *
               hout);
      h = hout;
      c = m.c_out;
    }
    if (st.xf_repeat > 0) {
      const std::int64_t g = (h + spec.patch - 1) / spec.patch;
      const std::int64_t n = g * g;
      const std::int64_t pc =
          static_cast<std::int64_t>(spec.patch) * spec.patch * c;
      const std::int64_t d = st.d_emb, dq = st.d_qkv;
      emit(sp + ".bridge_in", 2 * n * pc * d, n * pc + n * d);
      for (int j = 0; j < st.xf_repeat; ++j) {
        const std::string xp = sp + ".xf" + std::to_string(j);
        const AttnFlops af = flops_attention(kind, n, d, dq);
        emit(xp + ".ln1", 0, n * d);
        emit(xp + ".attn.proj", af.projections, 3 * n * dq + n * d);
        emit(xp + ".attn.core", af.core,
             attention_core_retained(kind, n, dq, spec.num_heads));
        emit(xp + ".add1", 0, n * d);
        emit(xp + ".ln2", 0, n * d);
        emit(xp + ".mlp1", 2 * n * d * (st.mlp_ratio * d),
             n * st.mlp_ratio * d);
        emit(xp + ".mlp2", 2 * n * (st.mlp_ratio * d) * d, 2 * n * d);
      }
      emit(sp + ".bridge_out", 2 * n * d * pc, n * pc + c * h * h);
    }
  }
  emit("head.conv", 2 * c * spec.head_width * h * h,
       static_cast<std::int64_t>(spec.head_width) * h * h);
  emit("head.pool", 0, spec.head_width);
  emit("classifier",
       2 * static_cast<std::int64_t>(spec.head_width) * spec.num_classes,
       spec.num_classes);

  const auto top =
      std::max_element(rep.entries.begin(), rep.entries.end(),
                       [](const FlopEntry& a, const FlopEntry& b) {
                         return a.flops < b.flops;
                       });
  rep.dominant = top->name;
  return rep;
}

inline FlopReport flops_model(const ModelSpec& spec, int resolution) {
  return profile_model(spec, resolution, spec.attention);
}

inline std::int64_t memory_estimate(const ModelSpec& spec, int resolution,
                                    AttentionKind kind) {
  return profile_model(spec, resolution, kind).total_retained;
}

// --- resolution sweep -------------------------------------------------------

struct SweepPoint {
  int resolution = 0;
  std::int64_t n_tokens = 0;  // token count at the first bridge stage
  std::int64_t core_mhsa = 0, core_xfa = 0;    // attention-core FLOPs, summed
  std::int64_t flops_mhsa = 0, flops_xfa = 0;  // whole model
  std::int64_t mem_mhsa = 0, mem_xfa = 0;      // retained elements
  double wall_mhsa_ms = -1.0, wall_xfa_ms = -1.0;  // <0: not measured
  bool oom_mhsa = false, oom_xfa = false;
};

namespace detail {

// Median-of-k wall time for one attention layer at the first bridge stage's
// geometry; negative on allocation failure (reported, not fatal).
inline double time_attention_ms(AttentionKind kind, int n, int d_emb,
                                int d_qkv, int heads) {
  using clock = std::chrono::steady_clock;
  try {
    Rng rng(7);
    Tensor<float> x({n, d_emb});
    rng.fill_normal(x, 0.0, 1.0);
    MhsaParams<float> mp;
    XfaParams<float> xp;
    if (kind == AttentionKind::mhsa)
      mp = MhsaParams<float>::init(d_emb, d_qkv, heads, rng);
    else
      xp = XfaParams<float>::init(d_emb, d_qkv, n, rng);
    auto run = [&] {
      return kind == AttentionKind::mhsa ? mhsa_forward(mp, x)
                                         : xfa_forward(xp, x);
    };
    for (int i = 0; i < 3; ++i) (void)run();
    std::vector<double> ms;
    for (int i = 0; i < 11; ++i) {
      const auto t0 = clock::now();
      (void)run();
      const auto t1 = clock::now();
      ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::nth_element(ms.begin(), ms.begin() + ms.size() / 2, ms.end());
    return ms[ms.size() / 2];
  } catch (const std::bad_alloc&) {
    return -2.0;
  }
}

}  // namespace detail

inline std::vector<SweepPoint> complexity_sweep(
    const ModelSpec& spec, const std::vector<int>& resolutions,
    bool wall_clock) {
  check(!resolutions.empty(), "complexity_sweep: no resolutions");
  for (std::size_t i = 1; i < resolutions.size(); ++i)
    check(resolutions[i] > resolutions[i - 1],
          "complexity_sweep: resolutions must ascend");
  int bridge_stage = -1, d_emb = 0, d_qkv = 0;
  for (const auto& st : spec.stages)
    if (st.xf_repeat > 0 && bridge_stage < 0) {
      bridge_stage = st.index;
      d_emb = st.d_emb;
      d_qkv = st.d_qkv;
    }
  check(bridge_stage > 0, "complexity_sweep: spec has no token stage");

  std::vector<SweepPoint> points;
  for (int res : resolutions) {
    ModelSpec at_res = spec;
    at_res.resolution = res;
    SweepPoint p;
    p.resolution = res;
    p.n_tokens = tokens_at_stage(at_res, bridge_stage);
    for (AttentionKind kind : {AttentionKind::mhsa, AttentionKind::xfa}) {
      const FlopReport rep = profile_model(spec, res, kind);
      std::int64_t core = 0;
      for (const auto& e : rep.entries)
        if (e.name.size() >= 10 &&
            e.name.rfind(".attn.core") == e.name.size() - 10)
          core += e.flops;
      double wall = -1.0;
      if (wall_clock)
        wall = detail::time_attention_ms(kind, static_cast<int>(p.n_tokens),
                                         d_emb, d_qkv, spec.num_heads);
      if (kind == AttentionKind::mhsa) {
        p.core_mhsa = core;
        p.flops_mhsa = rep.total_flops;
        p.mem_mhsa = rep.total_retained;
        p.wall_mhsa_ms = wall;
        p.oom_mhsa = wall == -2.0;
      } else {
        p.core_xfa = core;
        p.flops_xfa = rep.total_flops;
        p.mem_xfa = rep.total_retained;
        p.wall_xfa_ms = wall;
        p.oom_xfa = wall == -2.0;
      }
    }
    points.push_back(p);
  }
  return points;
}

// CSV: one row per (resolution, variant). wall_ms is blank when timing is
// off, "oom" when the timing allocation failed.
inline constexpr const char* sweep_csv_header =
    "resolution,kind,n_tokens,core_flops,total_flops,retained_elements,"
    "wall_ms";

inline void write_sweep_csv(const std::vector<SweepPoint>& points,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "write_sweep_csv: cannot open " + path);
  out << sweep_csv_header << "\n";
  auto wall_str = [](double ms, bool oom) -> std::string {
    if (oom) return "oom";
    if (ms < 0) return "";
    std::ostringstream os;
    os << ms;
    return os.str();
  };
  for (const auto& p : points) {
    out << p.resolution << ",mhsa," << p.n_tokens << "," << p.core_mhsa << ","
        << p.flops_mhsa << "," << p.mem_mhsa << ","
        << wall_str(p.wall_mhsa_ms, p.oom_mhsa) << "\n";
    out << p.resolution << ",xfa," << p.n_tokens << "," << p.core_xfa << ","
        << p.flops_xfa << "," << p.mem_xfa << ","
        << wall_str(p.wall_xfa_ms, p.oom_xfa) << "\n";
  }
  check(out.good(), "write_sweep_csv: write failed for " + path);
}

// Plot data: blank-line-separated two-column series, each introduced by
// "# series: <name>", x = token count.
inline void write_sweep_plot(const std::vector<SweepPoint>& points,
                             const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "write_sweep_plot: cannot open " + path);
  auto series = [&](const std::string& name, auto getter) {
    out << "# series: " << name << "\n";
    for (const auto& p : points) out << p.n_tokens << " " << getter(p) << "\n";
    out << "\n";
  };
  series("mhsa_core_flops", [](const SweepPoint& p) { return p.core_mhsa; });
  series("xfa_core_flops", [](const SweepPoint& p) { return p.core_xfa; });
  series("mhsa_retained_elements",
         [](const SweepPoint& p) { return p.mem_mhsa; });
  series("xfa_retained_elements",
         [](const SweepPoint& p) { return p.mem_xfa; });
  check(out.good(), "write_sweep_plot: write failed for " + path);
}

}  // namespace xf
