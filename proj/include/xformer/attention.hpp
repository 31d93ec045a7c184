#pragma once

// Two token-mixing mechanisms behind one contract: classic multi-head
// softmax attention, and a linear-complexity variant that contracts over the
// feature dimension instead of ever forming the N-by-N token-affinity map.
//
// The linear path: rows of Q and K are L2-normalized, then two learned
// kernels reduce the normalized keys into a context row k_c = W_c*K (1xD)
// and a feature column k_f = K*W_f^T (Nx1). The mixing map is the DxD outer
// product lambda * (Q^T k_f) k_c, applied as (V * map) * W_o. Evaluation
// order is pinned to Q^T*k_f first (Dx1), then the outer product (DxD) —
// nothing N-by-N is ever allocated, which the allocation probe verifies.

#include "xformer/ops.hpp"

#include <utility>

namespace xf {

enum class AttentionKind { mhsa, xfa };

inline const char* attention_kind_name(AttentionKind k) {
  return k == AttentionKind::mhsa ? "mhsa" : "xfa";
}

struct AttentionConfig {
  AttentionKind kind = AttentionKind::xfa;
  int d_emb = 0;
  int d_qkv = 0;
  int num_heads = 0;  // mhsa only
  int n_train = 0;    // xfa only: token count the context kernel was sized for

  void validate() const {
    check(d_emb > 0 && d_qkv > 0, "attention config: dims must be positive");
    if (kind == AttentionKind::mhsa) {
      check(num_heads > 0 && d_qkv % num_heads == 0,
            "attention config: num_heads must divide d_qkv (" +
                std::to_string(d_qkv) + "/" + std::to_string(num_heads) + ")");
    } else {
      check(n_train >= 1, "attention config: n_train must be >= 1");
    }
  }
};

template <typename Scalar>
struct MhsaParams {
  Tensor<Scalar> w_q, w_k, w_v;  // {d_emb, d_qkv}
  Tensor<Scalar> w_o;            // {d_qkv, d_emb}
  int num_heads = 1;

  static MhsaParams init(int d_emb, int d_qkv, int num_heads, Rng& rng) {
    check(num_heads > 0 && d_qkv % num_heads == 0,
          "mhsa: num_heads must divide d_qkv");
    MhsaParams p;
    p.num_heads = num_heads;
    for (auto* t : {&p.w_q, &p.w_k, &p.w_v}) {
      *t = Tensor<Scalar>({d_emb, d_qkv});
      rng.fill_normal(*t, 0.0, 0.02);
      t->set_requires_grad(true);
    }
    p.w_o = Tensor<Scalar>({d_qkv, d_emb});
    rng.fill_normal(p.w_o, 0.0, 0.02);
    p.w_o.set_requires_grad(true);
    return p;
  }
};

template <typename Scalar>
struct XfaParams {
  Tensor<Scalar> w_q, w_k, w_v;  // {d_emb, d_qkv}
  Tensor<Scalar> w_o;            // {d_qkv, d_emb}
  Tensor<Scalar> w_c;            // {1, n_train} token-dimension kernel
  Tensor<Scalar> w_f;            // {1, d_qkv} feature-dimension kernel
  Tensor<Scalar> lambda;         // {1} learned temperature

  static XfaParams init(int d_emb, int d_qkv, int n_train, Rng& rng) {
    check(n_train >= 1, "xfa: n_train must be >= 1");
    XfaParams p;
    for (auto* t : {&p.w_q, &p.w_k, &p.w_v}) *t = Tensor<Scalar>({d_emb, d_qkv});
    p.w_o = Tensor<Scalar>({d_qkv, d_emb});
    p.w_c = Tensor<Scalar>({1, n_train});
    p.w_f = Tensor<Scalar>({1, d_qkv});
    for (auto* t : {&p.w_q, &p.w_k, &p.w_v, &p.w_o, &p.w_c, &p.w_f}) {
      rng.fill_normal(*t, 0.0, 0.02);
      t->set_requires_grad(true);
    }
    p.lambda = Tensor<Scalar>::scalar(Scalar(1));
    p.lambda.set_requires_grad(true);
    return p;
  }
};

// Unit-norm rows for queries and keys (the "hat" step).
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> xfa_normalize(
    const Tensor<Scalar>& q, const Tensor<Scalar>& k) {
  return {l2_normalize_rows(q), l2_normalize_rows(k)};
}

// Context row k_c = W_c * k_hat (1xD) and feature column k_f = k_hat * W_f^T
// (Nx1). W_c must already be sized to the runtime token count.
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> xfa_scores(
    const Tensor<Scalar>& k_hat, const Tensor<Scalar>& w_c,
    const Tensor<Scalar>& w_f) {
  check(w_c.rows() == 1 && w_c.cols() == k_hat.rows(),
        "xfa_scores: context kernel " + shape_str(w_c.shape()) +
            " does not match " + std::to_string(k_hat.rows()) + " tokens");
  check(w_f.rows() == 1 && w_f.cols() == k_hat.cols(),
        "xfa_scores: feature kernel " + shape_str(w_f.shape()) +
            " does not match feature dim " + std::to_string(k_hat.cols()));
  Tensor<Scalar> k_c = matmul(w_c, k_hat);
  Tensor<Scalar> k_f = matmul(k_hat, transpose(w_f));
  return {k_c, k_f};
}

// Resizes the context kernel to the runtime token count by linear
// interpolation; exact identity (bitwise) when lengths already agree.
template <typename Scalar>
Tensor<Scalar> interpolate_wc(const Tensor<Scalar>& w_c, int n_runtime) {
  return interp_row(w_c, n_runtime);
}

template <typename Scalar>
Tensor<Scalar> mhsa_forward(const MhsaParams<Scalar>& p,
                            const Tensor<Scalar>& x) {
  check(x.rank() == 2 && x.cols() == p.w_q.dim(0),
        "mhsa_forward: input " + shape_str(x.shape()) +
            " does not match projection dim " + std::to_string(p.w_q.dim(0)));
  const int d_qkv = p.w_q.dim(1);
  const int heads = p.num_heads;
  const int d_head = d_qkv / heads;
  Tensor<Scalar> q = matmul(x, p.w_q);
  Tensor<Scalar> k = matmul(x, p.w_k);
  Tensor<Scalar> v = matmul(x, p.w_v);
  std::vector<Tensor<Scalar>> per_head;
  per_head.reserve(static_cast<std::size_t>(heads));
  const Scalar inv_sqrt_d =
      Scalar(1) / std::sqrt(static_cast<Scalar>(d_head));
  for (int h = 0; h < heads; ++h) {
    const int c0 = h * d_head, c1 = (h + 1) * d_head;
    Tensor<Scalar> qh = slice_cols(q, c0, c1);
    Tensor<Scalar> kh = slice_cols(k, c0, c1);
    Tensor<Scalar> vh = slice_cols(v, c0, c1);
    Tensor<Scalar> scores = matmul(qh, transpose(kh));      // NxN
    Tensor<Scalar> scaled = mul_scalar(scores, inv_sqrt_d);
    Tensor<Scalar> probs = softmax_rows(scaled);
    per_head.push_back(matmul(probs, vh));
  }
  Tensor<Scalar> merged =
      heads == 1 ? per_head[0] : concat_cols(per_head);
  return matmul(merged, p.w_o);
}

template <typename Scalar>
Tensor<Scalar> xfa_forward(const XfaParams<Scalar>& p,
                           const Tensor<Scalar>& x) {
  check(x.rank() == 2 && x.cols() == p.w_q.dim(0),
        "xfa_forward: input " + shape_str(x.shape()) +
            " does not match projection dim " + std::to_string(p.w_q.dim(0)));
  const int n = x.rows();
  Tensor<Scalar> q = matmul(x, p.w_q);
  Tensor<Scalar> k = matmul(x, p.w_k);
  Tensor<Scalar> v = matmul(x, p.w_v);
  auto [q_hat, k_hat] = xfa_normalize(q, k);
  Tensor<Scalar> w_c_rt = interpolate_wc(p.w_c, n);
  auto [k_c, k_f] = xfa_scores(k_hat, w_c_rt, p.w_f);
  Tensor<Scalar> qf = matmul(transpose(q_hat), k_f);   // {D,1}
  Tensor<Scalar> core = scale_by(p.lambda, matmul(qf, k_c));  // {D,D}
  Tensor<Scalar> mixed = matmul(v, core);
  return matmul(mixed, p.w_o);
}

}  // namespace xf
