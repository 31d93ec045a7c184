#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "xformer/blocks.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

using namespace xf;

namespace {

TensorD randn(Rng& rng, Shape shape, double sd = 1.0) {
  TensorD t(std::move(shape));
  rng.fill_normal(t, 0.0, sd);
  return t;
}

bool bitwise_equal(const TensorD& a, const TensorD& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

std::vector<std::string> param_names(const ParamRegistry<double>& reg) {
  std::vector<std::string> names;
  for (const auto& [n, t] : reg.params) names.push_back(n);
  return names;
}

}  // namespace

TEST_CASE("inverted residual block: parameter census") {
  Rng rng(1);
  auto b = Mv3Block<double>::init({16, 32, 1}, rng);
  ParamRegistry<double> reg;
  b.collect("b", reg);
  // pointwise 16->64, depthwise 3x3 on 64, gate 64->16->64 with biases,
  // pointwise 64->32, plus three affine norms (128+128+64)
  CHECK(reg.total() == 6096);
  std::int64_t norm_affine = 0;
  for (const auto& [name, t] : reg.params)
    if (name.find(".bn") != std::string::npos) norm_affine += t.numel();
  CHECK(norm_affine == 320);
  CHECK(reg.buffers.size() == 6);  // run_mean/run_var for each norm
  CHECK(reg.find("b.dw.w")->shape() == Shape{64, 1, 3, 3});
  CHECK(reg.find("b.bn3.run_var") != nullptr);
  CHECK(reg.find("b.nope") == nullptr);
}

TEST_CASE("inverted residual: zero projection reduces to the identity") {
  Rng rng(2);
  Mv3Config cfg{8, 8, 1};
  auto b = Mv3Block<double>::init(cfg, rng);
  CHECK(cfg.has_residual());
  for (std::int64_t i = 0; i < b.project.w.numel(); ++i) b.project.w[i] = 0.0;
  TensorD x = randn(rng, {8, 6, 6});
  CHECK(bitwise_equal(b.forward(x, true), x));   // batch statistics path
  CHECK(bitwise_equal(b.forward(x, false), x));  // running statistics path
}

TEST_CASE("inverted residual: stride and width changes disable the skip") {
  CHECK_FALSE(Mv3Config{8, 16, 1}.has_residual());
  CHECK_FALSE(Mv3Config{8, 8, 2}.has_residual());
  Rng rng(3);
  auto down = Mv3Block<double>::init({4, 6, 2}, rng);
  TensorD x = randn(rng, {4, 6, 6});
  TensorD out = down.forward(x, true);
  CHECK(out.shape() == Shape{6, 3, 3});
  CHECK_THROWS_AS(down.forward(TensorD({3, 6, 6}), true), ShapeError);
  CHECK_THROWS_AS(Mv3Block<double>::init({4, 6, 3}, rng), ShapeError);
}

TEST_CASE("squeeze-excitation gates each channel by a factor in (0,1)") {
  Rng rng(4);
  auto se = SeModule<double>::init(8, 4, rng);
  TensorD x = TensorD::full({8, 3, 3}, 2.0);
  TensorD out = se.forward(x);
  CHECK(out.shape() == x.shape());
  for (int c = 0; c < 8; ++c) {
    const double ratio = out[c * 9] / x[c * 9];
    CHECK(ratio > 0.0);
    CHECK(ratio < 1.0);
    for (int i = 1; i < 9; ++i)  // one gate per channel, uniform over space
      CHECK(out[c * 9 + i] == doctest::Approx(out[c * 9]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(SeModule<double>::init(6, 4, rng), ShapeError);
}

TEST_CASE("token block: zero gain and zero second mlp give the identity") {
  Rng rng(5);
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
  CHECK(bitwise_equal(blk.forward(x), x));
}

TEST_CASE("token block: both attention variants run and register params") {
  Rng rng(6);
  XfBlockConfig cfg;
  cfg.d_emb = 12;
  cfg.d_qkv = 8;
  cfg.n_train = 9;
  TensorD x = randn(rng, {9, 12});

  auto xfa_blk = XfBlock<double>::init(cfg, rng);
  CHECK(xfa_blk.forward(x).shape() == Shape{9, 12});
  ParamRegistry<double> xr;
  xfa_blk.collect("t", xr);
  auto xn = param_names(xr);
  for (const char* want :
       {"t.ln1.gamma", "t.ln1.beta", "t.attn.w_q", "t.attn.w_k", "t.attn.w_v",
        "t.attn.w_o", "t.attn.w_c", "t.attn.w_f", "t.attn.lambda",
        "t.ln2.gamma", "t.ln2.beta", "t.mlp1.w", "t.mlp1.b", "t.mlp2.w",
        "t.mlp2.b"})
    CHECK(std::find(xn.begin(), xn.end(), want) != xn.end());
  CHECK(xr.find("t.attn.w_c")->shape() == Shape{1, 9});
  CHECK(xr.find("t.attn.lambda")->numel() == 1);

  cfg.kind = AttentionKind::mhsa;
  cfg.num_heads = 4;
  auto mhsa_blk = XfBlock<double>::init(cfg, rng);
  CHECK(mhsa_blk.forward(x).shape() == Shape{9, 12});
  ParamRegistry<double> mr;
  mhsa_blk.collect("t", mr);
  auto mn = param_names(mr);
  CHECK(std::find(mn.begin(), mn.end(), "t.attn.w_q") != mn.end());
  CHECK(std::find(mn.begin(), mn.end(), "t.attn.w_c") == mn.end());
  CHECK(std::find(mn.begin(), mn.end(), "t.attn.lambda") == mn.end());
  CHECK(mr.total() < xr.total());  // the context kernel and gain are extra
}

TEST_CASE("patch round-trip is exact, padding and cropping included") {
  Rng rng(7);
  struct Case {
    Shape shape;
    int patch;
  };
  for (const Case& cs :
       {Case{{3, 8, 8}, 2}, Case{{5, 7, 7}, 2}, Case{{2, 5, 3}, 4}}) {
    TensorD x = randn(rng, cs.shape);
    TensorD tokens = unfold_patches(x, cs.patch);
    const int gh = (cs.shape[1] + cs.patch - 1) / cs.patch;
    const int gw = (cs.shape[2] + cs.patch - 1) / cs.patch;
    CHECK(tokens.shape() ==
          Shape{gh * gw, cs.patch * cs.patch * cs.shape[0]});
    TensorD back =
        fold_patches(tokens, cs.shape[0], cs.shape[1], cs.shape[2], cs.patch);
    CHECK(bitwise_equal(back, x));
  }
}

TEST_CASE("stage bridge preserves the map shape, odd extents included") {
  Rng rng(8);
  XfBlockConfig cfg;
  cfg.d_emb = 16;
  cfg.d_qkv = 8;
  cfg.n_train = 16;
  for (Shape shape : {Shape{3, 8, 8}, Shape{5, 7, 7}}) {
    auto bridge = StageBridge<double>::init(shape[0], 2, cfg, 2, rng);
    TensorD x = randn(rng, shape);
    CHECK(bridge.forward(x).shape() == shape);
  }

  auto bridge = StageBridge<double>::init(3, 2, cfg, 2, rng);
  ParamRegistry<double> reg;
  bridge.collect("s9", reg);
  auto names = param_names(reg);
  CHECK(std::find(names.begin(), names.end(), "s9.bridge_in.w") != names.end());
  CHECK(std::find(names.begin(), names.end(), "s9.xf0.attn.w_q") !=
        names.end());
  CHECK(std::find(names.begin(), names.end(), "s9.xf1.mlp2.b") != names.end());
  CHECK(std::find(names.begin(), names.end(), "s9.bridge_out.w") !=
        names.end());
  CHECK(reg.find("s9.bridge_in.w")->shape() == Shape{12, 16});
  CHECK(reg.find("s9.bridge_out.w")->shape() == Shape{16, 12});
  CHECK_THROWS_AS(bridge.forward(TensorD({4, 8, 8})), ShapeError);
}

TEST_CASE("row normalization layer standardizes token rows") {
  Rng rng(9);
  auto ln = LnLayer<double>::init(10);
  TensorD x = randn(rng, {5, 10}, 3.0);
  TensorD out = ln.forward(x);
  for (int i = 0; i < 5; ++i) {
    double m = 0;
    for (int j = 0; j < 10; ++j) m += out(i, j);
    m /= 10;
    double var = 0;
    for (int j = 0; j < 10; ++j) var += (out(i, j) - m) * (out(i, j) - m);
    var /= 10;
    CHECK(std::abs(m) < 1e-9);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("gradients reach every registered parameter of a token block") {
  Rng rng(10);
  XfBlockConfig cfg;
  cfg.d_emb = 8;
  cfg.d_qkv = 6;
  cfg.n_train = 3;
  auto blk = XfBlock<double>::init(cfg, rng);
  TensorD x = randn(rng, {5, 8});  // resampled kernel path included
  {
    GradTape<double> tape;
    tape.backward(sum(blk.forward(x)));
  }
  ParamRegistry<double> reg;
  blk.collect("t", reg);
  for (const auto& [name, t] : reg.params) {
    INFO(name);
    CHECK(t.has_grad());
    double mag = 0;
    for (const double g : t.grad_buf()) mag += std::abs(g);
    CHECK(mag > 0.0);
  }
}
