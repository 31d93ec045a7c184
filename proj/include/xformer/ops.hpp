#pragma once

// Differentiable dense ops. Every op computes its result eagerly with Eigen
// (or straight loops where a matmul buys nothing), and when a GradTape is
// active and any input is tracked, records a closure that routes the output
// gradient back to the inputs. Gradients always accumulate with +=, so a
// tensor feeding several consumers ends up with the sum of all contributions.
//
// Conventions:
//   token matrices  {N, D}   row-major, one token per row
//   image tensors   {C, H, W}
//   vectors         {D}
//   scalars         {1}

#include "xformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace xf {

namespace detail {

// Fault injection for validating the finite-difference harness: when set,
// matmul's backward deliberately mis-scales one gradient term so a checker
// that cannot catch it is itself broken.
inline thread_local bool corrupt_matmul_backward = false;

template <typename Scalar>
void record(const Tensor<Scalar>& out, bool inputs_tracked,
            std::function<void()> node) {
  auto* tape = GradTape<Scalar>::active();
  if (tape && inputs_tracked) {
    out.mark_tracked();
    tape->record(std::move(node));
  }
}

}  // namespace detail

// --- linear algebra ----------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check(a.cols() == b.rows(), "matmul: " + shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
  Tensor<Scalar> out({a.rows(), b.cols()});
  out.mat().noalias() = a.mat() * b.mat();
  detail::record(out, a.tracked() || b.tracked(), [a, b, out] {
    if (!out.has_grad()) return;
    auto go = out.grad_mat();
    if (a.tracked()) {
      Scalar s = detail::corrupt_matmul_backward ? Scalar(1.001) : Scalar(1);
      a.grad_mat().noalias() += s * (go * b.mat().transpose());
    }
    if (b.tracked()) b.grad_mat().noalias() += a.mat().transpose() * go;
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  check(x.rank() <= 2, "transpose: rank <= 2 required");
  Tensor<Scalar> out({x.cols(), x.rows()});
  out.mat().noalias() = x.mat().transpose();
  detail::record(out, x.tracked(), [x, out] {
    if (!out.has_grad()) return;
    if (x.tracked()) x.grad_mat().noalias() += out.grad_mat().transpose();
  });
  return out;
}

// --- elementwise -------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  Tensor<Scalar> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  detail::record(out, a.tracked() || b.tracked(), [a, b, out] {
    if (!out.has_grad()) return;
    const auto& g = out.grad_buf();
    if (a.tracked()) {
      auto& ga = a.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.tracked()) {
      auto& gb = b.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check(a.shape() == b.shape(), "sub: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  Tensor<Scalar> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a[i] - b[i];
  detail::record(out, a.tracked() || b.tracked(), [a, b, out] {
    if (!out.has_grad()) return;
    const auto& g = out.grad_buf();
    if (a.tracked()) {
      auto& ga = a.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.tracked()) {
      auto& gb = b.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check(a.shape() == b.shape(), "mul: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  Tensor<Scalar> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  detail::record(out, a.tracked() || b.tracked(), [a, b, out] {
    if (!out.has_grad()) return;
    const auto& g = out.grad_buf();
    if (a.tracked()) {
      auto& ga = a.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
    }
    if (b.tracked()) {
      auto& gb = b.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
    }
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> mul_scalar(const Tensor<Scalar>& x, Scalar c) {
  Tensor<Scalar> out(x.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = x[i] * c;
  detail::record(out, x.tracked(), [x, out, c] {
    if (!out.has_grad()) return;
    if (!x.tracked()) return;
    const auto& g = out.grad_buf();
    auto& gx = x.grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> add_const(const Tensor<Scalar>& x, Scalar c) {
  Tensor<Scalar> out(x.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = x[i] + c;
  detail::record(out, x.tracked(), [x, out] {
    if (!out.has_grad()) return;
    if (!x.tracked()) return;
    const auto& g = out.grad_buf();
    auto& gx = x.grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

// y = s * x with a learnable {1}-shaped multiplier s.
template <typename Scalar>
Tensor<Scalar> scale_by(const Tensor<Scalar>& s, const Tensor<Scalar>& x) {
  check(s.numel() == 1, "scale_by: multiplier must be a scalar tensor");
  Tensor<Scalar> out(x.shape());
  const Scalar sv = s[0];
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = sv * x[i];
  detail::record(out, s.tracked() || x.tracked(), [s, x, out] {
    if (!out.has_grad()) return;
    const auto& g = out.grad_buf();
    if (s.tracked()) {
      Scalar acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
      s.grad_buf()[0] += acc;
    }
    if (x.tracked()) {
      auto& gx = x.grad_buf();
      const Scalar sv = s[0];
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
    }
  });
  return out;
}

// x {N,D} + v broadcast over rows; v may be {D} or {1,D}.
template <typename Scalar>
Tensor<Scalar> add_rowvec(const Tensor<Scalar>& x, const Tensor<Scalar>& v) {
  check(v.rows() == 1 && v.cols() == x.cols(),
        "add_rowvec: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
  Tensor<Scalar> out(x.shape());
  const int n = x.rows(), d = x.cols();
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) out(r, c) = x(r, c) + v[c];
  detail::record(out, x.tracked() || v.tracked(), [x, v, out, n, d] {
    if (!out.has_grad()) return;
    auto go = out.grad_view(n, d);
    if (x.tracked()) x.grad_view(n, d).noalias() += go;
    if (v.tracked())
      v.grad_view(1, d).noalias() += go.colwise().sum();
  });
  return out;
}

// --- reductions / reshaping --------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Tensor<Scalar> out({1});
  Scalar acc = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += x[i];
  out[0] = acc;
  detail::record(out, x.tracked(), [x, out] {
    if (!out.has_grad()) return;
    if (!x.tracked()) return;
    const Scalar g = out.grad_buf()[0];
    auto& gx = x.grad_buf();
    for (auto& v : gx) v += g;
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  Tensor<Scalar> out = sum(x);
  return mul_scalar(out, Scalar(1) / static_cast<Scalar>(x.numel()));
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  check(numel(shape) == x.numel(), "reshape: " + shape_str(x.shape()) +
                                       " -> " + shape_str(shape) +
                                       " changes element count");
  Tensor<Scalar> out(std::move(shape));
  out.elems() = x.elems();
  detail::record(out, x.tracked(), [x, out] {
    if (!out.has_grad()) return;
    if (!x.tracked()) return;
    const auto& g = out.grad_buf();
    auto& gx = x.grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& x, int c0, int c1) {
  check(x.rank() == 2 && 0 <= c0 && c0 < c1 && c1 <= x.cols(),
        "slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
            ") of " + shape_str(x.shape()));
  Tensor<Scalar> out({x.rows(), c1 - c0});
  out.mat() = x.mat().middleCols(c0, c1 - c0);
  detail::record(out, x.tracked(), [x, out, c0, c1] {
    if (!out.has_grad()) return;
    if (!x.tracked()) return;
    x.grad_mat().middleCols(c0, c1 - c0) += out.grad_mat();
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat_cols(const std::vector<Tensor<Scalar>>& parts) {
  check(!parts.empty(), "concat_cols: no inputs");
  int rows = parts[0].rows(), cols = 0;
  bool tracked = false;
  for (const auto& p : parts) {
    check(p.rank() == 2 && p.rows() == rows,
          "concat_cols: inconsistent row counts");
    cols += p.cols();
    tracked = tracked || p.tracked();
  }
  Tensor<Scalar> out({rows, cols});
  int at = 0;
  for (const auto& p : parts) {
    out.mat().middleCols(at, p.cols()) = p.mat();
    at += p.cols();
  }
  detail::record(out, tracked, [parts, out] {
    if (!out.has_grad()) return;
    auto go = out.grad_mat();
    int at = 0;
    for (const auto& p : parts) {
      if (p.tracked()) p.grad_mat() += go.middleCols(at, p.cols());
      at += p.cols();
    }
  });
  return out;
}

// --- row-wise normalizations ---------------------------------------------------

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x) {
  check(x.rank() <= 2, "softmax_rows: rank <= 2 required");
  const int n = x.rows(), d = x.cols();
  Tensor<Scalar> out(x.shape());
  for (int r = 0; r < n; ++r) {
    Scalar m = x(r, 0);
    for (int c = 1; c < d; ++c) m = std::max(m, x(r, c));
    Scalar z = 0;
    for (int c = 0; c < d; ++c) {
      Scalar e = std::exp(x(r, c) - m);
      out(r, c) = e;
      z += e;
    }
    for (int c = 0; c < d; ++c) out(r, c) /= z;
  }
  detail::record(out, x.tracked(), [x, out, n, d] {
    if (!out.has_grad()) return;
    if (!x.tracked()) return;
    auto go = out.grad_view(n, d);
    auto gx = x.grad_view(n, d);
    for (int r = 0; r < n; ++r) {
      Scalar dot = 0;
      for (int c = 0; c < d; ++c) dot += go(r, c) * out(r, c);
      for (int c = 0; c < d; ++c)
        gx(r, c) += out(r, c) * (go(r, c) - dot);
    }
  });
  return out;
}

// Rows scaled to unit L2 norm; rows with norm <= eps are divided by eps
// instead, and that branch treats the divisor as a constant in backward.
template <typename Scalar>
Tensor<Scalar> l2_normalize_rows(const Tensor<Scalar>& x,
                                 Scalar eps = Scalar(1e-12)) {
  check(x.rank() <= 2, "l2_normalize_rows: rank <= 2 required");
  const int n = x.rows(), d = x.cols();
  Tensor<Scalar> out(x.shape());
  std::vector<Scalar> norms(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    Scalar ss = 0;
    for (int c = 0; c < d; ++c) ss += x(r, c) * x(r, c);
    Scalar nr = std::sqrt(ss);
    norms[static_cast<std::size_t>(r)] = nr;
    Scalar denom = nr > eps ? nr : eps;
    for (int c = 0; c < d; ++c) out(r, c) = x(r, c) / denom;
  }
  detail::record(out, x.tracked(), [x, out, norms, eps, n, d] {
    if (!out.has_grad()) return;
    if (!x.tracked()) return;
    auto go = out.grad_view(n, d);
    auto gx = x.grad_view(n, d);
    for (int r = 0; r < n; ++r) {
      Scalar nr = norms[static_cast<std::size_t>(r)];
      if (nr > eps) {
        Scalar dot = 0;  // x . dy
        for (int c = 0; c < d; ++c) dot += x(r, c) * go(r, c);
        Scalar inv = Scalar(1) / nr, inv3 = inv * inv * inv;
        for (int c = 0; c < d; ++c)
          gx(r, c) += go(r, c) * inv - x(r, c) * dot * inv3;
      } else {
        for (int c = 0; c < d; ++c) gx(r, c) += go(r, c) / eps;
      }
    }
  });
  return out;
}

// Per-row standardization with learnable affine: biased variance over the
// feature dimension, epsilon inside the square root.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-5)) {
  const int n = x.rows(), d = x.cols();
  check(gamma.numel() == d && beta.numel() == d,
        "layer_norm: affine params must match feature dim " +
            std::to_string(d));
  Tensor<Scalar> out(x.shape());
  Tensor<Scalar> xhat(x.shape());          // kept for backward
  std::vector<Scalar> inv_std(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    Scalar mu = 0;
    for (int c = 0; c < d; ++c) mu += x(r, c);
    mu /= static_cast<Scalar>(d);
    Scalar var = 0;
    for (int c = 0; c < d; ++c) {
      Scalar t = x(r, c) - mu;
      var += t * t;
    }
    var /= static_cast<Scalar>(d);
    Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (int c = 0; c < d; ++c) {
      Scalar xh = (x(r, c) - mu) * is;
      xhat(r, c) = xh;
      out(r, c) = gamma[c] * xh + beta[c];
    }
  }
  detail::record(
      out, x.tracked() || gamma.tracked() || beta.tracked(),
      [x, gamma, beta, out, xhat, inv_std, n, d] {
        if (!out.has_grad()) return;
        auto go = out.grad_view(n, d);
        if (gamma.tracked()) {
          auto& gg = gamma.grad_buf();
          for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c) gg[c] += go(r, c) * xhat(r, c);
        }
        if (beta.tracked()) {
          auto& gb = beta.grad_buf();
          for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c) gb[c] += go(r, c);
        }
        if (x.tracked()) {
          auto gx = x.grad_view(n, d);
          const Scalar dn = static_cast<Scalar>(d);
          for (int r = 0; r < n; ++r) {
            Scalar sum_dxh = 0, sum_dxh_xh = 0;
            for (int c = 0; c < d; ++c) {
              Scalar dxh = go(r, c) * gamma[c];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * xhat(r, c);
            }
            Scalar is = inv_std[static_cast<std::size_t>(r)];
            for (int c = 0; c < d; ++c) {
              Scalar dxh = go(r, c) * gamma[c];
              gx(r, c) += is / dn * (dn * dxh - sum_dxh -
                                     xhat(r, c) * sum_dxh_xh);
            }
          }
        }
      });
  return out;
}

// --- activations --------------------------------------------------------------

enum class Act { relu, sigmoid, silu, gelu };

inline const char* act_name(Act a) {
  switch (a) {
    case Act::relu: return "relu";
    case Act::sigmoid: return "sigmoid";
    case Act::silu: return "silu";
    case Act::gelu: return "gelu";
  }
  return "?";
}

namespace detail {
// tanh form of the Gaussian error linear unit
template <typename Scalar>
inline Scalar gelu_fwd(Scalar x) {
  const Scalar c = Scalar(0.7978845608028654);  // sqrt(2/pi)
  Scalar u = c * (x + Scalar(0.044715) * x * x * x);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(u));
}
template <typename Scalar>
inline Scalar gelu_bwd(Scalar x) {
  const Scalar c = Scalar(0.7978845608028654);
  Scalar u = c * (x + Scalar(0.044715) * x * x * x);
  Scalar t = std::tanh(u);
  Scalar du = c * (Scalar(1) + Scalar(0.134145) * x * x);
  return Scalar(0.5) * (Scalar(1) + t) +
         Scalar(0.5) * x * (Scalar(1) - t * t) * du;
}
template <typename Scalar>
inline Scalar sigmoid_fwd(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}
}  // namespace detail

template <typename Scalar>
Tensor<Scalar> activate(const Tensor<Scalar>& x, Act act) {
  Tensor<Scalar> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    Scalar v = x[i];
    switch (act) {
      case Act::relu: out[i] = v > 0 ? v : Scalar(0); break;
      case Act::sigmoid: out[i] = detail::sigmoid_fwd(v); break;
      case Act::silu: out[i] = v * detail::sigmoid_fwd(v); break;
      case Act::gelu: out[i] = detail::gelu_fwd(v); break;
    }
  }
  detail::record(out, x.tracked(), [x, out, act] {
    if (!out.has_grad()) return;
    if (!x.tracked()) return;
    const auto& g = out.grad_buf();
    auto& gx = x.grad_buf();
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      Scalar v = x[i], d = 0;
      switch (act) {
        case Act::relu: d = v > 0 ? Scalar(1) : Scalar(0); break;
        case Act::sigmoid: {
          Scalar s = detail::sigmoid_fwd(v);
          d = s * (Scalar(1) - s);
          break;
        }
        case Act::silu: {
          Scalar s = detail::sigmoid_fwd(v);
          d = s * (Scalar(1) + v * (Scalar(1) - s));
          break;
        }
        case Act::gelu: d = detail::gelu_bwd(v); break;
      }
      gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * d;
    }
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) { return activate(x, Act::relu); }
template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return activate(x, Act::sigmoid);
}
template <typename Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& x) { return activate(x, Act::silu); }
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) { return activate(x, Act::gelu); }

// --- convolution ---------------------------------------------------------------

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Standard (dense) 2-D convolution, bias-free; w is {C_out, C_in, k, k}.
// Lowered to one matmul over an im2col buffer, except the common 1x1 /
// stride-1 / no-pad case which multiplies the input view directly.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                      int stride = 1, int pad = 0) {
  check(x.rank() == 3 && w.rank() == 4, "conv2d: x {C,H,W}, w {Co,Ci,k,k}");
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), k = w.dim(2);
  check(w.dim(1) == ci && w.dim(3) == k,
        "conv2d: weight " + shape_str(w.shape()) + " does not fit input " +
            shape_str(x.shape()));
  const int ho = conv_out_extent(h, k, stride, pad);
  const int wo = conv_out_extent(wd, k, stride, pad);
  check(ho > 0 && wo > 0, "conv2d: empty output for input " +
                              shape_str(x.shape()));
  Tensor<Scalar> out({co, ho, wo});

  if (k == 1 && stride == 1 && pad == 0) {
    out.mat_view(co, ho * wo).noalias() =
        w.mat_view(co, ci) * x.mat_view(ci, h * wd);
    detail::record(out, x.tracked() || w.tracked(), [x, w, out, ci, co, h, wd] {
      if (!out.has_grad()) return;
      auto go = out.grad_view(co, h * wd);
      if (w.tracked())
        w.grad_view(co, ci).noalias() +=
            go * x.mat_view(ci, h * wd).transpose();
      if (x.tracked())
        x.grad_view(ci, h * wd).noalias() +=
            w.mat_view(co, ci).transpose() * go;
    });
    return out;
  }

  // im2col: row (c*k + ki)*k + kj holds that tap across all output pixels,
  // matching the flattened weight layout.
  const int kk = ci * k * k;
  Tensor<Scalar> col({kk, ho * wo});
  for (int c = 0; c < ci; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const int row = (c * k + ki) * k + kj;
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * stride - pad + kj;
            col(row, oi * wo + oj) =
                (ii >= 0 && ii < h && jj >= 0 && jj < wd)
                    ? x[(static_cast<std::int64_t>(c) * h + ii) * wd + jj]
                    : Scalar(0);
          }
        }
      }
  out.mat_view(co, ho * wo).noalias() = w.mat_view(co, kk) * col.mat();

  detail::record(out, x.tracked() || w.tracked(),
                 [x, w, out, col, ci, co, h, wd, k, kk, ho, wo, stride, pad] {
    if (!out.has_grad()) return;
    auto go = out.grad_view(co, ho * wo);
    if (w.tracked())
      w.grad_view(co, kk).noalias() += go * col.mat().transpose();
    if (x.tracked()) {
      typename Tensor<Scalar>::MatType dcol =
          w.mat_view(co, kk).transpose() * go;
      auto& gx = x.grad_buf();
      for (int c = 0; c < ci; ++c)
        for (int ki = 0; ki < k; ++ki)
          for (int kj = 0; kj < k; ++kj) {
            const int row = (c * k + ki) * k + kj;
            for (int oi = 0; oi < ho; ++oi) {
              const int ii = oi * stride - pad + ki;
              if (ii < 0 || ii >= h) continue;
              for (int oj = 0; oj < wo; ++oj) {
                const int jj = oj * stride - pad + kj;
                if (jj < 0 || jj >= wd) continue;
                gx[(static_cast<std::size_t>(c) * h + ii) * wd + jj] +=
                    dcol(row, oi * wo + oj);
              }
            }
          }
    }
  });
  return out;
}

// Depthwise 3x3-style convolution: one filter per channel, w {C, 1, k, k}.
template <typename Scalar>
Tensor<Scalar> depthwise_conv2d(const Tensor<Scalar>& x,
                                const Tensor<Scalar>& w, int stride = 1,
                                int pad = 0) {
  check(x.rank() == 3 && w.rank() == 4 && w.dim(1) == 1,
        "depthwise_conv2d: x {C,H,W}, w {C,1,k,k}");
  const int ch = x.dim(0), h = x.dim(1), wd = x.dim(2), k = w.dim(2);
  check(w.dim(0) == ch && w.dim(3) == k,
        "depthwise_conv2d: weight " + shape_str(w.shape()) +
            " does not fit input " + shape_str(x.shape()));
  const int ho = conv_out_extent(h, k, stride, pad);
  const int wo = conv_out_extent(wd, k, stride, pad);
  check(ho > 0 && wo > 0, "depthwise_conv2d: empty output");
  Tensor<Scalar> out({ch, ho, wo});
  for (int c = 0; c < ch; ++c)
    for (int oi = 0; oi < ho; ++oi)
      for (int oj = 0; oj < wo; ++oj) {
        Scalar acc = 0;
        for (int ki = 0; ki < k; ++ki) {
          const int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) continue;
          for (int kj = 0; kj < k; ++kj) {
            const int jj = oj * stride - pad + kj;
            if (jj < 0 || jj >= wd) continue;
            acc += x[(static_cast<std::int64_t>(c) * h + ii) * wd + jj] *
                   w[(static_cast<std::int64_t>(c) * k + ki) * k + kj];
          }
        }
        out[(static_cast<std::int64_t>(c) * ho + oi) * wo + oj] = acc;
      }
  detail::record(out, x.tracked() || w.tracked(),
                 [x, w, out, ch, h, wd, k, ho, wo, stride, pad] {
    if (!out.has_grad()) return;
    const auto& g = out.grad_buf();
    if (x.tracked()) x.ensure_grad();
    if (w.tracked()) w.ensure_grad();
    auto& gx = x.grad_buf();
    auto& gw = w.grad_buf();
    for (int c = 0; c < ch; ++c)
      for (int oi = 0; oi < ho; ++oi)
        for (int oj = 0; oj < wo; ++oj) {
          const Scalar go =
              g[(static_cast<std::size_t>(c) * ho + oi) * wo + oj];
          if (go == Scalar(0)) continue;
          for (int ki = 0; ki < k; ++ki) {
            const int ii = oi * stride - pad + ki;
            if (ii < 0 || ii >= h) continue;
            for (int kj = 0; kj < k; ++kj) {
              const int jj = oj * stride - pad + kj;
              if (jj < 0 || jj >= wd) continue;
              const std::size_t xi =
                  (static_cast<std::size_t>(c) * h + ii) * wd + jj;
              const std::size_t wi =
                  (static_cast<std::size_t>(c) * k + ki) * k + kj;
              if (x.tracked()) gx[xi] += go * w[static_cast<std::int64_t>(wi)];
              if (w.tracked()) gw[wi] += go * x[static_cast<std::int64_t>(xi)];
            }
          }
        }
  });
  return out;
}

// --- batch norm (2-D feature maps) ----------------------------------------------
//
// Training mode normalizes with per-channel statistics over H*W (biased
// variance) and folds them into the running buffers in place; eval mode is a
// fixed affine transform from the running statistics. The running buffers are
// deliberately not differentiated through.

template <typename Scalar>
Tensor<Scalar> batch_norm2d(const Tensor<Scalar>& x,
                            const Tensor<Scalar>& gamma,
                            const Tensor<Scalar>& beta,
                            Tensor<Scalar>& run_mean, Tensor<Scalar>& run_var,
                            bool training, Scalar momentum = Scalar(0.1),
                            Scalar eps = Scalar(1e-5)) {
  check(x.rank() == 3, "batch_norm2d: x must be {C,H,W}");
  const int ch = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::int64_t n = static_cast<std::int64_t>(h) * wd;
  check(gamma.numel() == ch && beta.numel() == ch &&
            run_mean.numel() == ch && run_var.numel() == ch,
        "batch_norm2d: per-channel params must have " + std::to_string(ch) +
            " entries");
  Tensor<Scalar> out(x.shape());

  if (!training) {
    std::vector<Scalar> scale(static_cast<std::size_t>(ch)),
        shift(static_cast<std::size_t>(ch));
    for (int c = 0; c < ch; ++c) {
      Scalar is = Scalar(1) / std::sqrt(run_var[c] + eps);
      scale[static_cast<std::size_t>(c)] = gamma[c] * is;
      shift[static_cast<std::size_t>(c)] =
          beta[c] - gamma[c] * run_mean[c] * is;
    }
    for (int c = 0; c < ch; ++c) {
      const Scalar a = scale[static_cast<std::size_t>(c)],
                   b = shift[static_cast<std::size_t>(c)];
      for (std::int64_t i = 0; i < n; ++i)
        out[c * n + i] = a * x[c * n + i] + b;
    }
    detail::record(out, x.tracked() || gamma.tracked() || beta.tracked(),
                   [x, gamma, beta, run_mean, run_var, out, ch, n, eps] {
      if (!out.has_grad()) return;
      const auto& g = out.grad_buf();
      for (int c = 0; c < ch; ++c) {
        Scalar is = Scalar(1) / std::sqrt(run_var[c] + eps);
        if (x.tracked()) {
          auto& gx = x.grad_buf();
          const Scalar a = gamma[c] * is;
          for (std::int64_t i = 0; i < n; ++i)
            gx[static_cast<std::size_t>(c * n + i)] +=
                g[static_cast<std::size_t>(c * n + i)] * a;
        }
        if (gamma.tracked()) {
          Scalar acc = 0;
          for (std::int64_t i = 0; i < n; ++i)
            acc += g[static_cast<std::size_t>(c * n + i)] *
                   (x[c * n + i] - run_mean[c]) * is;
          gamma.grad_buf()[static_cast<std::size_t>(c)] += acc;
        }
        if (beta.tracked()) {
          Scalar acc = 0;
          for (std::int64_t i = 0; i < n; ++i)
            acc += g[static_cast<std::size_t>(c * n + i)];
          beta.grad_buf()[static_cast<std::size_t>(c)] += acc;
        }
      }
    });
    return out;
  }

  Tensor<Scalar> xhat(x.shape());
  std::vector<Scalar> inv_std(static_cast<std::size_t>(ch));
  for (int c = 0; c < ch; ++c) {
    Scalar mu = 0;
    for (std::int64_t i = 0; i < n; ++i) mu += x[c * n + i];
    mu /= static_cast<Scalar>(n);
    Scalar var = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      Scalar t = x[c * n + i] - mu;
      var += t * t;
    }
    var /= static_cast<Scalar>(n);
    Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(c)] = is;
    for (std::int64_t i = 0; i < n; ++i) {
      Scalar xh = (x[c * n + i] - mu) * is;
      xhat[c * n + i] = xh;
      out[c * n + i] = gamma[c] * xh + beta[c];
    }
    run_mean[c] = (Scalar(1) - momentum) * run_mean[c] + momentum * mu;
    run_var[c] = (Scalar(1) - momentum) * run_var[c] + momentum * var;
  }
  detail::record(out, x.tracked() || gamma.tracked() || beta.tracked(),
                 [x, gamma, beta, out, xhat, inv_std, ch, n] {
    if (!out.has_grad()) return;
    const auto& g = out.grad_buf();
    for (int c = 0; c < ch; ++c) {
      Scalar sum_dxh = 0, sum_dxh_xh = 0, sum_g = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        const Scalar gi = g[static_cast<std::size_t>(c * n + i)];
        const Scalar dxh = gi * gamma[c];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xhat[c * n + i];
        sum_g += gi;
      }
      if (gamma.tracked()) {
        Scalar acc = 0;
        for (std::int64_t i = 0; i < n; ++i)
          acc += g[static_cast<std::size_t>(c * n + i)] * xhat[c * n + i];
        gamma.grad_buf()[static_cast<std::size_t>(c)] += acc;
      }
      if (beta.tracked()) beta.grad_buf()[static_cast<std::size_t>(c)] += sum_g;
      if (x.tracked()) {
        auto& gx = x.grad_buf();
        const Scalar is = inv_std[static_cast<std::size_t>(c)];
        const Scalar dn = static_cast<Scalar>(n);
        for (std::int64_t i = 0; i < n; ++i) {
          const Scalar dxh = g[static_cast<std::size_t>(c * n + i)] * gamma[c];
          gx[static_cast<std::size_t>(c * n + i)] +=
              is / dn * (dn * dxh - sum_dxh - xhat[c * n + i] * sum_dxh_xh);
        }
      }
    }
  });
  return out;
}

// --- pooling / channel gating ----------------------------------------------------

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  check(x.rank() == 3, "global_avg_pool: x must be {C,H,W}");
  const int ch = x.dim(0);
  const std::int64_t n = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  Tensor<Scalar> out({ch});
  for (int c = 0; c < ch; ++c) {
    Scalar acc = 0;
    for (std::int64_t i = 0; i < n; ++i) acc += x[c * n + i];
    out[c] = acc / static_cast<Scalar>(n);
  }
  detail::record(out, x.tracked(), [x, out, ch, n] {
    if (!out.has_grad()) return;
    if (!x.tracked()) return;
    const auto& g = out.grad_buf();
    auto& gx = x.grad_buf();
    for (int c = 0; c < ch; ++c) {
      const Scalar gi = g[static_cast<std::size_t>(c)] / static_cast<Scalar>(n);
      for (std::int64_t i = 0; i < n; ++i)
        gx[static_cast<std::size_t>(c * n + i)] += gi;
    }
  });
  return out;
}

// y[c,h,w] = x[c,h,w] * gate[c]
template <typename Scalar>
Tensor<Scalar> scale_channels(const Tensor<Scalar>& x,
                              const Tensor<Scalar>& gate) {
  check(x.rank() == 3 && gate.numel() == x.dim(0),
        "scale_channels: gate must have one entry per channel");
  const int ch = x.dim(0);
  const std::int64_t n = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  Tensor<Scalar> out(x.shape());
  for (int c = 0; c < ch; ++c)
    for (std::int64_t i = 0; i < n; ++i)
      out[c * n + i] = x[c * n + i] * gate[c];
  detail::record(out, x.tracked() || gate.tracked(), [x, gate, out, ch, n] {
    if (!out.has_grad()) return;
    const auto& g = out.grad_buf();
    if (gate.tracked()) {
      auto& gg = gate.grad_buf();
      for (int c = 0; c < ch; ++c) {
        Scalar acc = 0;
        for (std::int64_t i = 0; i < n; ++i)
          acc += g[static_cast<std::size_t>(c * n + i)] * x[c * n + i];
        gg[static_cast<std::size_t>(c)] += acc;
      }
    }
    if (x.tracked()) {
      auto& gx = x.grad_buf();
      for (int c = 0; c < ch; ++c)
        for (std::int64_t i = 0; i < n; ++i)
          gx[static_cast<std::size_t>(c * n + i)] +=
              g[static_cast<std::size_t>(c * n + i)] * gate[c];
    }
  });
  return out;
}

// --- patch <-> token layout -------------------------------------------------------
//
// unfold_patches turns a {C,H,W} map into {N, p*p*C} tokens: the map is
// zero-padded on the bottom/right to multiples of p, each p-by-p patch
// becomes one row, and within a row elements run (patch row, patch col,
// channel). fold_patches is the exact inverse (pad region dropped), so
// fold(unfold(x)) == x.

inline int pad_to_multiple(int v, int p) { return (v + p - 1) / p * p; }

template <typename Scalar>
Tensor<Scalar> unfold_patches(const Tensor<Scalar>& x, int p) {
  check(x.rank() == 3 && p > 0, "unfold_patches: x must be {C,H,W}");
  const int ch = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int hp = pad_to_multiple(h, p), wp = pad_to_multiple(wd, p);
  const int gh = hp / p, gw = wp / p;
  const int n = gh * gw, d = p * p * ch;
  Tensor<Scalar> out({n, d});
  for (int gi = 0; gi < gh; ++gi)
    for (int gj = 0; gj < gw; ++gj) {
      const int row = gi * gw + gj;
      for (int dr = 0; dr < p; ++dr)
        for (int dc = 0; dc < p; ++dc) {
          const int ii = gi * p + dr, jj = gj * p + dc;
          const bool in = ii < h && jj < wd;
          for (int c = 0; c < ch; ++c)
            out(row, (dr * p + dc) * ch + c) =
                in ? x[(static_cast<std::int64_t>(c) * h + ii) * wd + jj]
                   : Scalar(0);
        }
    }
  detail::record(out, x.tracked(), [x, out, ch, h, wd, p, gh, gw] {
    if (!out.has_grad()) return;
    if (!x.tracked()) return;
    const auto& g = out.grad_buf();
    auto& gx = x.grad_buf();
    const int d = p * p * ch;
    for (int gi = 0; gi < gh; ++gi)
      for (int gj = 0; gj < gw; ++gj) {
        const int row = gi * gw + gj;
        for (int dr = 0; dr < p; ++dr)
          for (int dc = 0; dc < p; ++dc) {
            const int ii = gi * p + dr, jj = gj * p + dc;
            if (ii >= h || jj >= wd) continue;
            for (int c = 0; c < ch; ++c)
              gx[(static_cast<std::size_t>(c) * h + ii) * wd + jj] +=
                  g[static_cast<std::size_t>(row) * d + (dr * p + dc) * ch + c];
          }
      }
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> fold_patches(const Tensor<Scalar>& t, int channels, int h,
                            int w, int p) {
  const int hp = pad_to_multiple(h, p), wp = pad_to_multiple(w, p);
  const int gh = hp / p, gw = wp / p;
  check(t.rank() == 2 && t.dim(0) == gh * gw && t.dim(1) == p * p * channels,
        "fold_patches: token grid " + shape_str(t.shape()) +
            " does not match target {" + std::to_string(channels) + "," +
            std::to_string(h) + "," + std::to_string(w) + "} with p=" +
            std::to_string(p));
  const int d = p * p * channels;
  Tensor<Scalar> out({channels, h, w});
  for (int gi = 0; gi < gh; ++gi)
    for (int gj = 0; gj < gw; ++gj) {
      const int row = gi * gw + gj;
      for (int dr = 0; dr < p; ++dr)
        for (int dc = 0; dc < p; ++dc) {
          const int ii = gi * p + dr, jj = gj * p + dc;
          if (ii >= h || jj >= w) continue;
          for (int c = 0; c < channels; ++c)
            out[(static_cast<std::int64_t>(c) * h + ii) * w + jj] =
                t(row, (dr * p + dc) * channels + c);
        }
    }
  detail::record(out, t.tracked(), [t, out, channels, h, w, p, gh, gw, d] {
    if (!out.has_grad()) return;
    if (!t.tracked()) return;
    const auto& g = out.grad_buf();
    auto& gt = t.grad_buf();
    for (int gi = 0; gi < gh; ++gi)
      for (int gj = 0; gj < gw; ++gj) {
        const int row = gi * gw + gj;
        for (int dr = 0; dr < p; ++dr)
          for (int dc = 0; dc < p; ++dc) {
            const int ii = gi * p + dr, jj = gj * p + dc;
            if (ii >= h || jj >= w) continue;
            for (int c = 0; c < channels; ++c)
              gt[static_cast<std::size_t>(row) * d + (dr * p + dc) * channels +
                 c] += g[(static_cast<std::size_t>(c) * h + ii) * w + jj];
          }
      }
  });
  return out;
}

// --- 1-D linear resampling ----------------------------------------------------
//
// Resamples a {1,L} row to {1,n} with endpoint-preserving linear
// interpolation (n == 1 samples the midpoint; n == L is the identity).

template <typename Scalar>
Tensor<Scalar> interp_row(const Tensor<Scalar>& w, int n) {
  check(w.rows() == 1 && n > 0, "interp_row: input must be a single row");
  const int l = w.cols();
  if (n == l) {
    Tensor<Scalar> out({1, n});
    out.elems() = w.elems();
    detail::record(out, w.tracked(), [w, out] {
      if (!out.has_grad()) return;
      if (!w.tracked()) return;
      const auto& g = out.grad_buf();
      auto& gw = w.grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) gw[i] += g[i];
    });
    return out;
  }
  if (l == 1) {  // constant extension of a single stored sample
    Tensor<Scalar> out({1, n});
    for (int i = 0; i < n; ++i) out[i] = w[0];
    detail::record(out, w.tracked(), [w, out] {
      if (!out.has_grad()) return;
      if (!w.tracked()) return;
      const auto& g = out.grad_buf();
      Scalar s = 0;
      for (const Scalar gi : g) s += gi;
      w.grad_buf()[0] += s;
    });
    return out;
  }
  Tensor<Scalar> out({1, n});
  std::vector<int> j0(static_cast<std::size_t>(n));
  std::vector<Scalar> frac(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double pos = n == 1 ? (l - 1) / 2.0
                        : static_cast<double>(i) * (l - 1) / (n - 1);
    int lo = static_cast<int>(pos);
    if (lo > l - 2) lo = l - 2;
    if (lo < 0) lo = 0;
    Scalar t = static_cast<Scalar>(pos - lo);
    j0[static_cast<std::size_t>(i)] = lo;
    frac[static_cast<std::size_t>(i)] = t;
    out[i] = (Scalar(1) - t) * w[lo] + t * w[lo + 1];
  }
  detail::record(out, w.tracked(), [w, out, j0, frac, n] {
    if (!out.has_grad()) return;
    if (!w.tracked()) return;
    const auto& g = out.grad_buf();
    auto& gw = w.grad_buf();
    for (int i = 0; i < n; ++i) {
      const int lo = j0[static_cast<std::size_t>(i)];
      const Scalar t = frac[static_cast<std::size_t>(i)];
      gw[static_cast<std::size_t>(lo)] += g[static_cast<std::size_t>(i)] *
                                          (Scalar(1) - t);
      gw[static_cast<std::size_t>(lo) + 1] +=
          g[static_cast<std::size_t>(i)] * t;
    }
  });
  return out;
}

// --- classification loss --------------------------------------------------------

// Numerically stable softmax cross-entropy for a single example;
// logits {K}, label in [0, K).
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, int label) {
  check(logits.rank() == 1 && 0 <= label && label < logits.dim(0),
        "softmax_cross_entropy: label " + std::to_string(label) +
            " out of range for " + shape_str(logits.shape()));
  const int k = logits.dim(0);
  Scalar m = logits[0];
  for (int i = 1; i < k; ++i) m = std::max(m, logits[i]);
  Scalar z = 0;
  for (int i = 0; i < k; ++i) z += std::exp(logits[i] - m);
  Tensor<Scalar> out({1});
  out[0] = std::log(z) + m - logits[label];
  detail::record(out, logits.tracked(), [logits, out, label, k, m, z] {
    if (!out.has_grad()) return;
    if (!logits.tracked()) return;
    const Scalar g = out.grad_buf()[0];
    auto& gl = logits.grad_buf();
    for (int i = 0; i < k; ++i) {
      Scalar p = std::exp(logits[i] - m) / z;
      gl[static_cast<std::size_t>(i)] +=
          g * (p - (i == label ? Scalar(1) : Scalar(0)));
    }
  });
  return out;
}

template <typename Scalar>
int argmax(const Tensor<Scalar>& x) {
  int best = 0;
  for (std::int64_t i = 1; i < x.numel(); ++i)
    if (x[i] > x[best]) best = static_cast<int>(i);
  return best;
}

}  // namespace xf
