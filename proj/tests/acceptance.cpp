// Release gates. Each gate prints exactly one line:
//   acceptance N: PASS - <label>: <measurements> (t of budget)
// and the process exits 0 only if every requested gate passes, including its
// wall-clock budget. Run with no arguments for all gates, or with a single
// argument 1..10 to run one.

#include "oracles.hpp"
#include "xformer/archive.hpp"
#include "xformer/profiler.hpp"
#include "xformer/train.hpp"

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

using namespace xf;
using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

namespace {

struct GateResult {
  bool pass = false;
  std::string detail;
};

struct Gate {
  int id = 0;
  const char* label = "";
  double budget_s = 0;
  std::function<GateResult()> run;
};

TensorD randn(Rng& rng, Shape shape) {
  TensorD t(std::move(shape));
  rng.fill_normal(t, 0.0, 1.0);
  return t;
}

template <typename Scalar>
bool bitwise_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(),
                     sizeof(Scalar) * static_cast<std::size_t>(a.numel())) == 0;
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

// --- gate 1: layer table and parameter bracket -------------------------------

GateResult gate_structure() {
  struct Want {
    const char* input_size;
    const char* layer;
    int out_channels;
    int repeat;
    const char* stride;
    const char* stage;
  };
  static const Want want[] = {
      {"224^2x3", "Conv2d (3x3) s2", 16, 1, "2", "stem-in"},
      {"112^2x16", "MV3", 32, 1, "1", "1"},
      {"112^2x32", "MV3 s2", 64, 1, "2", "2"},
      {"56^2x64", "MV3", 64, 2, "1", "2"},
      {"56^2x64", "MV3 s2", 96, 1, "2", "3"},
      {"28^2x96", "XF Block", 96, 2, "-", "3"},
      {"28^2x96", "MV3 s2", 128, 1, "2", "4"},
      {"14^2x128", "XF Block", 128, 3, "-", "4"},
      {"14^2x128", "MV3 s2", 160, 1, "2", "5"},
      {"7^2x160", "XF Block", 160, 4, "-", "5"},
      {"7^2x160", "Conv2d (1x1)", 640, 1, "1", "stem-out"},
      {"7^2x640", "AvgPool (7x7)", 640, 1, "-", "pool"},
      {"1^2x640", "Linear", 1000, 1, "-", "head"},
  };
  const ModelSpec spec = ModelSpec::default_spec();
  const std::vector<DescribeRow> rows = describe_rows(spec);

  bool table_ok = rows.size() == std::size(want);
  std::string table_note =
      table_ok ? "layer table matches (13 rows)"
               : "layer table has " + std::to_string(rows.size()) +
                     " rows, want " + std::to_string(std::size(want));
  if (table_ok)
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      const auto& w = want[i];
      if (r.input_size != w.input_size || r.layer != w.layer ||
          r.out_channels != w.out_channels || r.repeat != w.repeat ||
          r.stride != w.stride || r.stage != w.stage) {
        table_ok = false;
        table_note = "layer table mismatch at row " + std::to_string(i) +
                     " (" + r.input_size + " " + r.layer + ")";
        break;
      }
    }

  const auto model = build_xformer<float>(spec, 1);
  const ParamAudit audit = count_params(model);
  const std::int64_t target = 5'500'000;
  const std::int64_t lo = target - target / 10, hi = target + target / 10;
  const bool params_ok = audit.total >= lo && audit.total <= hi;

  GateResult r;
  r.pass = table_ok && params_ok;
  std::ostringstream os;
  os << table_note << "; parameters " << audit.total << ", bracket [" << lo
     << ", " << hi << "]";
  if (!params_ok) {
    os << " MISSED (" << fmt(100.0 * audit.total / target, 1)
       << "% of target); per-scope:";
    for (const auto& row : audit.rows) os << " " << row.scope << "="
                                          << row.params;
  }
  r.detail = os.str();
  return r;
}

// --- gate 2: attention-core flop scaling in the token count ------------------

GateResult gate_core_scaling() {
  const std::int64_t dq = 96, d_emb = 144;
  const std::int64_t ns[] = {1024, 2048, 4096};
  double xfa[3], mhsa[3];
  for (int i = 0; i < 3; ++i) {
    xfa[i] = static_cast<double>(
        flops_attention(AttentionKind::xfa, ns[i], d_emb, dq).core);
    mhsa[i] = static_cast<double>(
        flops_attention(AttentionKind::mhsa, ns[i], d_emb, dq).core);
  }
  bool ok = true;
  std::ostringstream os;
  os << "core flops at D=96, N=1024/2048/4096: doubling ratios";
  for (int i = 1; i < 3; ++i) {
    const double rx = xfa[i] / xfa[i - 1];
    const double rm = mhsa[i] / mhsa[i - 1];
    ok = ok && rx >= 1.9 && rx <= 2.1 && rm >= 3.8 && rm <= 4.2;
    os << " [xfa x" << fmt(rx) << ", mhsa x" << fmt(rm) << "]";
  }
  // least-squares line through the three xfa points: the core cost must be
  // linear in N, so every residual stays within 1% of the value
  double sn = 0, sy = 0, snn = 0, sny = 0;
  for (int i = 0; i < 3; ++i) {
    const double n = static_cast<double>(ns[i]);
    sn += n;
    sy += xfa[i];
    snn += n * n;
    sny += n * xfa[i];
  }
  const double slope = (3 * sny - sn * sy) / (3 * snn - sn * sn);
  const double icept = (sy - slope * sn) / 3;
  double worst = 0;
  for (int i = 0; i < 3; ++i) {
    const double fit = slope * static_cast<double>(ns[i]) + icept;
    worst = std::max(worst, std::abs(xfa[i] - fit) / xfa[i]);
  }
  ok = ok && worst <= 0.01;
  os << "; xfa linear-fit residual " << fmt(100 * worst, 4) << "% (<=1%)";
  return {ok, os.str()};
}

// --- gate 3: retained-memory advantage grows with resolution -----------------

GateResult gate_memory_ratio() {
  const ModelSpec spec = ModelSpec::default_spec();
  const int res[] = {256, 512, 768, 1024, 1280};
  double ratio[5];
  bool increasing = true;
  std::ostringstream os;
  os << "retained-element ratio baseline/xfa:";
  for (int i = 0; i < 5; ++i) {
    const auto m = memory_estimate(spec, res[i], AttentionKind::mhsa);
    const auto x = memory_estimate(spec, res[i], AttentionKind::xfa);
    ratio[i] = static_cast<double>(m) / static_cast<double>(x);
    if (i > 0 && ratio[i] <= ratio[i - 1]) increasing = false;
    os << " " << res[i] << "->" << fmt(ratio[i], 2);
  }
  const bool ok = increasing && ratio[3] > 2.0;
  os << (increasing ? "; strictly increasing" : "; NOT increasing")
     << "; at 1024: " << fmt(ratio[3], 2) << " (>2 required)";
  return {ok, os.str()};
}

// --- gate 4: oracle equivalence ----------------------------------------------

GateResult gate_oracles() {
  int done = 0;
  double worst = 0;
  Rng master(6001);
  for (int t = 0; t < 12; ++t) {
    const int heads = master.uniform_int(1, 4);
    const int d_qkv = heads * master.uniform_int(1, 8);
    const int d_emb = master.uniform_int(2, 32);
    const int n = master.uniform_int(1, 64);
    Rng rng(Rng::mix(6001, static_cast<std::uint64_t>(t)));
    auto p = MhsaParams<double>::init(d_emb, d_qkv, heads, rng);
    TensorD x = randn(rng, {n, d_emb});
    worst = std::max(
        worst, oracle::max_abs_diff(mhsa_forward(p, x), oracle::naive_mhsa(p, x)));
    ++done;
  }
  for (int t = 0; t < 12; ++t) {
    const int d_emb = master.uniform_int(2, 32);
    const int d_qkv = master.uniform_int(1, 32);
    const int n_train = master.uniform_int(1, 64);
    const int n = master.uniform_int(1, 64);
    Rng rng(Rng::mix(6002, static_cast<std::uint64_t>(t)));
    auto p = XfaParams<double>::init(d_emb, d_qkv, n_train, rng);
    TensorD x = randn(rng, {n, d_emb});
    worst = std::max(
        worst, oracle::max_abs_diff(xfa_forward(p, x), oracle::naive_xfa(p, x)));
    ++done;
  }
  std::ostringstream os;
  os << done << " random instances (both variants, N<=64), worst |diff| "
     << std::scientific << std::setprecision(2) << worst << " (<=1e-10)";
  return {done >= 20 && worst <= 1e-10, os.str()};
}

// --- gate 5: full gradient check through the cli ------------------------------

GateResult gate_gradcheck_cli() {
  const char* bin = std::getenv("XFORMER_CLI");
  if (!bin || !*bin)
    return {false, "XFORMER_CLI is not set; cannot locate the cli binary"};
  const std::string log = "acceptance_gradcheck.log";
  const std::string cmd =
      std::string("\"") + bin + "\" --f64 gradcheck > " + log + " 2>&1";
  const int raw = std::system(cmd.c_str());
  const int code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  int checked = 0;
  {
    std::ifstream in(log);
    std::string line;
    while (std::getline(in, line))
      if (line.find("max rel err") != std::string::npos) ++checked;
  }
  std::ostringstream os;
  os << "`xformer --f64 gradcheck` exit code " << code << ", " << checked
     << " checks reported (log: " << log << ")";
  return {code == 0 && checked > 0, os.str()};
}

// --- gate 6: structural identities -------------------------------------------

GateResult gate_identities() {
  Rng rng(6100);
  int passed = 0, total = 0;
  std::ostringstream bad;

  auto expect = [&](bool ok, const char* what) {
    ++total;
    if (ok)
      ++passed;
    else
      bad << " [" << what << "]";
  };

  // patch fold undoes unfold, both when the extent divides evenly and when
  // the grid needs padding
  {
    TensorD x = randn(rng, {3, 8, 8});
    expect(bitwise_equal(fold_patches(unfold_patches(x, 2), 3, 8, 8, 2), x),
           "fold(unfold) 8x8");
    TensorD y = randn(rng, {5, 7, 7});
    expect(bitwise_equal(fold_patches(unfold_patches(y, 2), 5, 7, 7, 2), y),
           "fold(unfold) 7x7 padded");
  }
  // an inverted-residual block with a zeroed projection is the identity
  {
    auto b = Mv3Block<double>::init({8, 8, 1}, rng);
    for (std::int64_t i = 0; i < b.project.w.numel(); ++i) b.project.w[i] = 0.0;
    TensorD x = randn(rng, {8, 6, 6});
    expect(bitwise_equal(b.forward(x, true), x), "mv3 zero-project, training");
    expect(bitwise_equal(b.forward(x, false), x), "mv3 zero-project, eval");
  }
  // a token block with zero attention gain and a zeroed second mlp layer is
  // the identity
  {
    XfBlockConfig cfg;
    cfg.d_emb = 12;
    cfg.d_qkv = 8;
    cfg.mlp_ratio = 2;
    cfg.n_train = 4;
    auto blk = XfBlock<double>::init(cfg, rng);
    blk.xfa.lambda[0] = 0.0;
    for (std::int64_t i = 0; i < blk.mlp2.w.numel(); ++i) blk.mlp2.w[i] = 0.0;
    for (std::int64_t i = 0; i < blk.mlp2.b.numel(); ++i) blk.mlp2.b[i] = 0.0;
    TensorD x = randn(rng, {4, 12});
    expect(bitwise_equal(blk.forward(x), x), "token block residual identity");
  }
  // the attention map itself vanishes when the gain is zero
  {
    auto p = XfaParams<double>::init(8, 6, 5, rng);
    p.lambda[0] = 0.0;
    TensorD out = xfa_forward(p, randn(rng, {5, 8}));
    bool zero = true;
    for (std::int64_t i = 0; i < out.numel(); ++i) zero &= out[i] == 0.0;
    expect(zero, "zero-gain output");
  }
  std::ostringstream os;
  os << passed << "/" << total << " identities hold bitwise";
  if (passed != total) os << "; failed:" << bad.str();
  return {passed == total, os.str()};
}

// --- gate 7: no token-square allocation ---------------------------------------

GateResult gate_alloc() {
  const int n = 4096, d = 16;
  Rng rng(6200);
  auto p = XfaParams<float>::init(d, d, 49, rng);
  TensorF x({n, d});
  rng.fill_normal(x, 0.0f, 1.0f);
  std::int64_t biggest = 0;
  bool saw_square = false;
  {
    AllocProbe probe([&](const Shape& s) {
      std::int64_t count = 1;
      for (int dim : s) count *= dim;
      if (s.size() == 2) {
        biggest = std::max(biggest, count);
        if (s[0] >= n && s[1] >= n) saw_square = true;
      }
    });
    (void)xfa_forward(p, x);
  }
  // the probe must be able to see a square when one is made
  auto mp = MhsaParams<float>::init(d, d, 2, rng);
  TensorF xs({512, d});
  rng.fill_normal(xs, 0.0f, 1.0f);
  bool control = false;
  {
    AllocProbe probe([&](const Shape& s) {
      if (s.size() == 2 && s[0] == 512 && s[1] == 512) control = true;
    });
    (void)mhsa_forward(mp, xs);
  }
  std::ostringstream os;
  os << "xfa at N=4096: largest 2-d buffer " << biggest << " elements (cap "
     << static_cast<std::int64_t>(n) * d << "), token-square allocated: "
     << (saw_square ? "YES" : "no") << "; baseline control saw its square: "
     << (control ? "yes" : "NO");
  return {!saw_square && biggest <= static_cast<std::int64_t>(n) * d && control,
          os.str()};
}

// --- gate 8: toy training converges -------------------------------------------

GateResult gate_training() {
  const ModelSpec spec = ModelSpec::reduced_spec();
  const TrainConfig cfg;
  auto model = build_xformer<float>(spec, cfg.seed);
  const auto ds = make_toy_dataset<float>(spec.resolution, cfg.dataset_size,
                                          cfg.seed);
  const std::vector<float> losses = toy_train(model, ds, cfg);
  const double first = losses.front(), last = losses.back();
  const double acc =
      evaluate_accuracy(model, spec.resolution, 100, cfg.seed);
  const bool ok = last <= 0.5 * first && acc >= 0.90;
  std::ostringstream os;
  os << cfg.steps << " steps: loss " << fmt(first, 4) << " -> " << fmt(last, 4)
     << " (need <= " << fmt(0.5 * first, 4) << "); held-out accuracy "
     << fmt(acc, 2) << " (need >= 0.90)";
  return {ok, os.str()};
}

// --- gate 9: whole-model flop bracket -----------------------------------------

GateResult gate_flop_bracket() {
  const FlopReport rep = flops_model(ModelSpec::default_spec(), 224);
  const bool ok = rep.total_flops >= 1'200'000'000 &&
                  rep.total_flops <= 2'200'000'000;
  std::ostringstream os;
  os << "default model at 224: " << fmt(rep.gflops(), 3)
     << " GFLOPs (bracket [1.2, 2.2]), dominant layer " << rep.dominant;
  return {ok, os.str()};
}

// --- gate 10: archive round trip ----------------------------------------------

GateResult gate_archive() {
  const ModelSpec spec = ModelSpec::default_spec();
  auto a = build_xformer<float>(spec, 1234);
  auto b = build_xformer<float>(spec, 999);  // different init, fully replaced
  const std::string path_a = "acceptance_roundtrip_a.xfw";
  const std::string path_b = "acceptance_roundtrip_b.xfw";
  const std::int64_t count_before = count_params(a).total;
  save_archive(a.registry(), path_a);
  load_archive_into(b.registry(), path_a);

  const auto ra = a.registry(), rb = b.registry();
  std::size_t mismatched = 0;
  std::string first_bad;
  auto compare = [&](const auto& lhs, const auto& rhs) {
    for (std::size_t i = 0; i < lhs.size(); ++i)
      if (!bitwise_equal(lhs[i].second, rhs[i].second)) {
        if (!mismatched) first_bad = lhs[i].first;
        ++mismatched;
      }
  };
  compare(ra.params, rb.params);
  compare(ra.buffers, rb.buffers);

  save_archive(b.registry(), path_b);
  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in),
                       std::istreambuf_iterator<char>());
  };
  const std::string bytes_a = slurp(path_a), bytes_b = slurp(path_b);
  const bool files_equal = !bytes_a.empty() && bytes_a == bytes_b;
  const std::int64_t count_after = count_params(b).total;
  std::remove(path_a.c_str());
  std::remove(path_b.c_str());

  const bool ok = mismatched == 0 && files_equal && count_before == count_after;
  std::ostringstream os;
  os << ra.params.size() << " tensors + " << ra.buffers.size()
     << " statistics buffers restored bitwise";
  if (mismatched)
    os << "; " << mismatched << " MISMATCHED (first: " << first_bad << ")";
  os << "; re-save byte-identical: " << (files_equal ? "yes" : "NO")
     << "; parameter count " << count_before << " -> " << count_after;
  return {ok, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  if (argc > 1) {
    only = std::atoi(argv[1]);
    if (argc > 2 || only < 1 || only > 10) {
      std::cerr << "usage: acceptance [1..10]\n";
      return 2;
    }
  }
  const std::vector<Gate> gates = {
      {1, "layer table and parameter bracket", 5.0, gate_structure},
      {2, "attention-core flop scaling", 1.0, gate_core_scaling},
      {3, "memory advantage grows with resolution", 5.0, gate_memory_ratio},
      {4, "oracle equivalence", 10.0, gate_oracles},
      {5, "full gradient check via cli", 120.0, gate_gradcheck_cli},
      {6, "structural identities", 10.0, gate_identities},
      {7, "no token-square allocation", 10.0, gate_alloc},
      {8, "toy training converges", 300.0, gate_training},
      {9, "whole-model flop bracket", 5.0, gate_flop_bracket},
      {10, "archive round trip", 10.0, gate_archive},
  };
  bool all_pass = true;
  for (const auto& g : gates) {
    if (only && g.id != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    GateResult r;
    try {
      r = g.run();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    const bool in_budget = secs <= g.budget_s;
    const bool ok = r.pass && in_budget;
    std::cout << "acceptance " << g.id << ": " << (ok ? "PASS" : "FAIL")
              << " - " << g.label << ": " << r.detail << " (" << fmt(secs, 2)
              << "s of " << fmt(g.budget_s, 0) << "s budget"
              << (in_budget ? "" : " EXCEEDED") << ")\n";
    all_pass = all_pass && ok;
  }
  return all_pass ? 0 : 1;
}
