#pragma once

// Layer building blocks: linear / conv / norm wrappers with owned parameters,
// the squeeze-excitation gate, the inverted-residual conv block, the
// token-mixing transformer block, and the bridge that carries a feature map
// through a stack of token blocks (unfold -> embed -> mix -> project -> fold).
//
// Every layer registers its parameters (and running-stat buffers) under a
// hierarchical dotted name via collect(); serialization, the optimizer, and
// the parameter audit all walk that registry.

#include "xformer/attention.hpp"
#include "xformer/ops.hpp"

#include <string>
#include <vector>

namespace xf {

template <typename Scalar>
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor<Scalar>>> params;   // learnable
  std::vector<std::pair<std::string, Tensor<Scalar>>> buffers;  // running stats

  void add(const std::string& name, const Tensor<Scalar>& t) {
    params.emplace_back(name, t);
  }
  void add_buffer(const std::string& name, const Tensor<Scalar>& t) {
    buffers.emplace_back(name, t);
  }
  std::int64_t total() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
  }
  const Tensor<Scalar>* find(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return &t;
    for (const auto& [n, t] : buffers)
      if (n == name) return &t;
    return nullptr;
  }
};

// Fully connected layer over token rows: y = x W (+ b). W is {in, out}.
template <typename Scalar>
struct LinearLayer {
  Tensor<Scalar> w;
  Tensor<Scalar> b;  // null handle when bias-free

  static LinearLayer init(int in, int out, bool bias, Rng& rng) {
    LinearLayer l;
    l.w = Tensor<Scalar>({in, out});
    rng.fill_normal(l.w, 0.0, std::sqrt(2.0 / in));
    l.w.set_requires_grad(true);
    if (bias) {
      l.b = Tensor<Scalar>({out});
      l.b.set_requires_grad(true);
    }
    return l;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    Tensor<Scalar> y = matmul(x, w);
    return b.valid() ? add_rowvec(y, b) : y;
  }

  void collect(const std::string& prefix, ParamRegistry<Scalar>& reg) const {
    reg.add(prefix + ".w", w);
    if (b.valid()) reg.add(prefix + ".b", b);
  }
};

// Convolution with owned weight; pointwise (k=1), dense, or depthwise.
template <typename Scalar>
struct Conv2dLayer {
  Tensor<Scalar> w;
  int stride = 1;
  int pad = 0;
  bool depthwise = false;

  static Conv2dLayer init(int c_in, int c_out, int k, int stride, int pad,
                          bool depthwise, Rng& rng) {
    Conv2dLayer c;
    c.stride = stride;
    c.pad = pad;
    c.depthwise = depthwise;
    const int fan_in = depthwise ? k * k : c_in * k * k;
    c.w = depthwise ? Tensor<Scalar>({c_out, 1, k, k})
                    : Tensor<Scalar>({c_out, c_in, k, k});
    rng.fill_normal(c.w, 0.0, std::sqrt(2.0 / fan_in));
    c.w.set_requires_grad(true);
    return c;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    return depthwise ? depthwise_conv2d(x, w, stride, pad)
                     : conv2d(x, w, stride, pad);
  }

  void collect(const std::string& prefix, ParamRegistry<Scalar>& reg) const {
    reg.add(prefix + ".w", w);
  }
};

// Per-channel batch normalization with owned affine params and running stats.
template <typename Scalar>
struct Norm2d {
  Tensor<Scalar> gamma, beta, run_mean, run_var;

  static Norm2d init(int c) {
    Norm2d n;
    n.gamma = Tensor<Scalar>::full({c}, Scalar(1));
    n.gamma.set_requires_grad(true);
    n.beta = Tensor<Scalar>({c});
    n.beta.set_requires_grad(true);
    n.run_mean = Tensor<Scalar>({c});
    n.run_var = Tensor<Scalar>::full({c}, Scalar(1));
    return n;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training) {
    return batch_norm2d(x, gamma, beta, run_mean, run_var, training);
  }

  void collect(const std::string& prefix, ParamRegistry<Scalar>& reg) const {
    reg.add(prefix + ".gamma", gamma);
    reg.add(prefix + ".beta", beta);
    reg.add_buffer(prefix + ".run_mean", run_mean);
    reg.add_buffer(prefix + ".run_var", run_var);
  }
};

// Row-wise layer normalization with owned affine params.
template <typename Scalar>
struct LnLayer {
  Tensor<Scalar> gamma, beta;

  static LnLayer init(int d) {
    LnLayer l;
    l.gamma = Tensor<Scalar>::full({d}, Scalar(1));
    l.gamma.set_requires_grad(true);
    l.beta = Tensor<Scalar>({d});
    l.beta.set_requires_grad(true);
    return l;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    return layer_norm(x, gamma, beta);
  }

  void collect(const std::string& prefix, ParamRegistry<Scalar>& reg) const {
    reg.add(prefix + ".gamma", gamma);
    reg.add(prefix + ".beta", beta);
  }
};

// Squeeze-excitation: pooled channel stats gate the map back per channel.
template <typename Scalar>
struct SeModule {
  LinearLayer<Scalar> fc1, fc2;

  static SeModule init(int c, int reduction, Rng& rng) {
    check(reduction > 0 && c % reduction == 0,
          "se_module: channels " + std::to_string(c) +
              " not divisible by reduction " + std::to_string(reduction));
    SeModule s;
    s.fc1 = LinearLayer<Scalar>::init(c, c / reduction, true, rng);
    s.fc2 = LinearLayer<Scalar>::init(c / reduction, c, true, rng);
    return s;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    const int c = x.dim(0);
    Tensor<Scalar> pooled = reshape(global_avg_pool(x), {1, c});
    Tensor<Scalar> hidden = silu(fc1.forward(pooled));
    Tensor<Scalar> gate = sigmoid(fc2.forward(hidden));
    return scale_channels(x, reshape(gate, {c}));
  }

  void collect(const std::string& prefix, ParamRegistry<Scalar>& reg) const {
    fc1.collect(prefix + ".fc1", reg);
    fc2.collect(prefix + ".fc2", reg);
  }
};

struct Mv3Config {
  int c_in = 0;
  int c_out = 0;
  int stride = 1;
  int expansion = 4;
  int se_reduction = 4;
  int kernel = 3;

  bool has_residual() const { return stride == 1 && c_in == c_out; }
  void validate() const {
    check(c_in > 0 && c_out > 0, "mv3 config: channels must be positive");
    check(stride == 1 || stride == 2, "mv3 config: stride must be 1 or 2");
    check(expansion > 0 && se_reduction > 0 && kernel > 0,
          "mv3 config: factors must be positive");
  }
};

// Inverted residual: pointwise expand -> depthwise (stride) -> SE ->
// pointwise project, skip connection when shape-preserving. Convs are
// bias-free (the norms absorb shifts); expand/depthwise get SiLU, the
// projection stays linear.
template <typename Scalar>
struct Mv3Block {
  Mv3Config cfg;
  Conv2dLayer<Scalar> expand, dw, project;
  Norm2d<Scalar> bn1, bn2, bn3;
  SeModule<Scalar> se;

  static Mv3Block init(const Mv3Config& cfg, Rng& rng) {
    cfg.validate();
    const int e = cfg.expansion * cfg.c_in;
    Mv3Block b;
    b.cfg = cfg;
    b.expand = Conv2dLayer<Scalar>::init(cfg.c_in, e, 1, 1, 0, false, rng);
    b.bn1 = Norm2d<Scalar>::init(e);
    b.dw = Conv2dLayer<Scalar>::init(e, e, cfg.kernel, cfg.stride,
                                     cfg.kernel / 2, true, rng);
    b.bn2 = Norm2d<Scalar>::init(e);
    b.se = SeModule<Scalar>::init(e, cfg.se_reduction, rng);
    b.project = Conv2dLayer<Scalar>::init(e, cfg.c_out, 1, 1, 0, false, rng);
    b.bn3 = Norm2d<Scalar>::init(cfg.c_out);
    return b;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training) {
    check(x.rank() == 3 && x.dim(0) == cfg.c_in,
          "mv3_block: expected " + std::to_string(cfg.c_in) +
              " input channels, got " + shape_str(x.shape()));
    Tensor<Scalar> h = silu(bn1.forward(expand.forward(x), training));
    h = silu(bn2.forward(dw.forward(h), training));
    h = se.forward(h);
    h = bn3.forward(project.forward(h), training);
    return cfg.has_residual() ? add(x, h) : h;
  }

  void collect(const std::string& prefix, ParamRegistry<Scalar>& reg) const {
    expand.collect(prefix + ".expand", reg);
    bn1.collect(prefix + ".bn1", reg);
    dw.collect(prefix + ".dw", reg);
    bn2.collect(prefix + ".bn2", reg);
    se.collect(prefix + ".se", reg);
    project.collect(prefix + ".project", reg);
    bn3.collect(prefix + ".bn3", reg);
  }
};

struct XfBlockConfig {
  int d_emb = 0;
  int d_qkv = 0;
  int mlp_ratio = 2;
  int n_train = 0;  // token count at the spec's training resolution
  AttentionKind kind = AttentionKind::xfa;
  int num_heads = 4;  // mhsa variant only

  AttentionConfig attention() const {
    AttentionConfig a;
    a.kind = kind;
    a.d_emb = d_emb;
    a.d_qkv = d_qkv;
    a.num_heads = num_heads;
    a.n_train = n_train;
    return a;
  }
};

// Pre-norm residual token block: x + attn(LN(x)), then + MLP(LN(.)).
// The MLP is linear -> GELU -> linear with biases.
template <typename Scalar>
struct XfBlock {
  XfBlockConfig cfg;
  LnLayer<Scalar> ln1, ln2;
  XfaParams<Scalar> xfa;    // active iff cfg.kind == xfa
  MhsaParams<Scalar> mhsa;  // active iff cfg.kind == mhsa
  LinearLayer<Scalar> mlp1, mlp2;

  static XfBlock init(const XfBlockConfig& cfg, Rng& rng) {
    cfg.attention().validate();
    XfBlock b;
    b.cfg = cfg;
    b.ln1 = LnLayer<Scalar>::init(cfg.d_emb);
    if (cfg.kind == AttentionKind::xfa)
      b.xfa = XfaParams<Scalar>::init(cfg.d_emb, cfg.d_qkv, cfg.n_train, rng);
    else
      b.mhsa =
          MhsaParams<Scalar>::init(cfg.d_emb, cfg.d_qkv, cfg.num_heads, rng);
    b.ln2 = LnLayer<Scalar>::init(cfg.d_emb);
    b.mlp1 = LinearLayer<Scalar>::init(cfg.d_emb, cfg.mlp_ratio * cfg.d_emb,
                                       true, rng);
    b.mlp2 = LinearLayer<Scalar>::init(cfg.mlp_ratio * cfg.d_emb, cfg.d_emb,
                                       true, rng);
    return b;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    check(x.rank() == 2 && x.cols() == cfg.d_emb,
          "xf_block: token dim " + shape_str(x.shape()) + " != d_emb " +
              std::to_string(cfg.d_emb));
    Tensor<Scalar> normed = ln1.forward(x);
    Tensor<Scalar> attn_out = cfg.kind == AttentionKind::xfa
                                  ? xfa_forward(xfa, normed)
                                  : mhsa_forward(mhsa, normed);
    Tensor<Scalar> mid = add(x, attn_out);
    Tensor<Scalar> h = gelu(mlp1.forward(ln2.forward(mid)));
    return add(mid, mlp2.forward(h));
  }

  void collect(const std::string& prefix, ParamRegistry<Scalar>& reg) const {
    ln1.collect(prefix + ".ln1", reg);
    if (cfg.kind == AttentionKind::xfa) {
      reg.add(prefix + ".attn.w_q", xfa.w_q);
      reg.add(prefix + ".attn.w_k", xfa.w_k);
      reg.add(prefix + ".attn.w_v", xfa.w_v);
      reg.add(prefix + ".attn.w_o", xfa.w_o);
      reg.add(prefix + ".attn.w_c", xfa.w_c);
      reg.add(prefix + ".attn.w_f", xfa.w_f);
      reg.add(prefix + ".attn.lambda", xfa.lambda);
    } else {
      reg.add(prefix + ".attn.w_q", mhsa.w_q);
      reg.add(prefix + ".attn.w_k", mhsa.w_k);
      reg.add(prefix + ".attn.w_v", mhsa.w_v);
      reg.add(prefix + ".attn.w_o", mhsa.w_o);
    }
    ln2.collect(prefix + ".ln2", reg);
    mlp1.collect(prefix + ".mlp1", reg);
    mlp2.collect(prefix + ".mlp2", reg);
  }
};

// Carries a {C,H,W} map through token blocks: unfold into p*p patches,
// bias-free linear p*p*C -> d_emb, run the blocks, project back, fold.
// Spatial shape (including any pad/crop) is preserved exactly.
template <typename Scalar>
struct StageBridge {
  int patch = 2;
  int channels = 0;
  LinearLayer<Scalar> to_emb, from_emb;
  std::vector<XfBlock<Scalar>> blocks;

  static StageBridge init(int channels, int patch, const XfBlockConfig& cfg,
                          int repeat, Rng& rng) {
    StageBridge s;
    s.patch = patch;
    s.channels = channels;
    const int d_patch = patch * patch * channels;
    s.to_emb = LinearLayer<Scalar>::init(d_patch, cfg.d_emb, false, rng);
    for (int i = 0; i < repeat; ++i)
      s.blocks.push_back(XfBlock<Scalar>::init(cfg, rng));
    s.from_emb = LinearLayer<Scalar>::init(cfg.d_emb, d_patch, false, rng);
    return s;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    check(x.rank() == 3 && x.dim(0) == channels,
          "stage bridge: expected " + std::to_string(channels) +
              " channels, got " + shape_str(x.shape()));
    const int h = x.dim(1), w = x.dim(2);
    Tensor<Scalar> tokens = to_emb.forward(unfold_patches(x, patch));
    for (const auto& blk : blocks) tokens = blk.forward(tokens);
    return fold_patches(from_emb.forward(tokens), channels, h, w, patch);
  }

  void collect(const std::string& prefix, ParamRegistry<Scalar>& reg) const {
    to_emb.collect(prefix + ".bridge_in", reg);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".xf" + std::to_string(i), reg);
    from_emb.collect(prefix + ".bridge_out", reg);
  }
};

}  // namespace xf
