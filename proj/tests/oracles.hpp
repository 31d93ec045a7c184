#pragma once

// Reference implementations used only by tests. Everything here is written
// with explicit scalar loops and materializes every intermediate (including
// the NxN attention matrix), trading speed for obviousness — a deliberately
// independent code path from the Eigen-backed library ops.

#include "xformer/attention.hpp"

#include <cmath>
#include <vector>

namespace oracle {

inline xf::Tensor<double> loop_matmul(const xf::Tensor<double>& a,
                                      const xf::Tensor<double>& b) {
  xf::Tensor<double> c({a.rows(), b.cols()});
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (int k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

inline xf::Tensor<double> loop_normalize_rows(const xf::Tensor<double>& x,
                                              double eps = 1e-12) {
  xf::Tensor<double> out(x.shape());
  for (int i = 0; i < x.rows(); ++i) {
    double ss = 0;
    for (int j = 0; j < x.cols(); ++j) ss += x(i, j) * x(i, j);
    const double norm = std::sqrt(ss);
    const double denom = norm > eps ? norm : eps;
    for (int j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) / denom;
  }
  return out;
}

inline std::vector<double> loop_interp(const std::vector<double>& w, int n) {
  const int l = static_cast<int>(w.size());
  std::vector<double> out(static_cast<std::size_t>(n));
  if (n == l) {
    out = w;
    return out;
  }
  if (l == 1) {
    for (auto& v : out) v = w[0];
    return out;
  }
  for (int i = 0; i < n; ++i) {
    double pos = n == 1 ? (l - 1) / 2.0
                        : static_cast<double>(i) * (l - 1) / (n - 1);
    int lo = static_cast<int>(pos);
    if (lo > l - 2) lo = l - 2;
    if (lo < 0) lo = 0;
    const double t = pos - lo;
    out[static_cast<std::size_t>(i)] =
        (1.0 - t) * w[static_cast<std::size_t>(lo)] +
        t * w[static_cast<std::size_t>(lo) + 1];
  }
  return out;
}

// Dense multi-head attention: every head's NxN score matrix built and
// softmaxed with scalar loops.
inline xf::Tensor<double> naive_mhsa(const xf::MhsaParams<double>& p,
                                     const xf::Tensor<double>& x) {
  const int n = x.rows();
  const int d_qkv = p.w_q.dim(1);
  const int heads = p.num_heads;
  const int dh = d_qkv / heads;
  const xf::Tensor<double> q = loop_matmul(x, p.w_q);
  const xf::Tensor<double> k = loop_matmul(x, p.w_k);
  const xf::Tensor<double> v = loop_matmul(x, p.w_v);
  xf::Tensor<double> merged({n, d_qkv});
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    const int c0 = h * dh;
    for (int i = 0; i < n; ++i) {
      std::vector<double> score(static_cast<std::size_t>(n));
      double mx = -1e300;
      for (int j = 0; j < n; ++j) {
        double s = 0;
        for (int d = 0; d < dh; ++d) s += q(i, c0 + d) * k(j, c0 + d);
        s *= scale;
        score[static_cast<std::size_t>(j)] = s;
        if (s > mx) mx = s;
      }
      double z = 0;
      for (int j = 0; j < n; ++j) {
        score[static_cast<std::size_t>(j)] =
            std::exp(score[static_cast<std::size_t>(j)] - mx);
        z += score[static_cast<std::size_t>(j)];
      }
      for (int d = 0; d < dh; ++d) {
        double acc = 0;
        for (int j = 0; j < n; ++j)
          acc += score[static_cast<std::size_t>(j)] / z * v(j, c0 + d);
        merged(i, c0 + d) = acc;
      }
    }
  }
  return loop_matmul(merged, p.w_o);
}

// Feature-map attention evaluated with every intermediate explicit: row
// normalization, resampled context kernel, both score vectors, the DxD core,
// the mixed values, and the output projection.
inline xf::Tensor<double> naive_xfa(const xf::XfaParams<double>& p,
                                    const xf::Tensor<double>& x) {
  const int n = x.rows();
  const int dq = p.w_q.dim(1);
  const int d_emb = x.cols();
  const xf::Tensor<double> q = loop_matmul(x, p.w_q);
  const xf::Tensor<double> k = loop_matmul(x, p.w_k);
  const xf::Tensor<double> v = loop_matmul(x, p.w_v);
  const xf::Tensor<double> q_hat = loop_normalize_rows(q);
  const xf::Tensor<double> k_hat = loop_normalize_rows(k);

  std::vector<double> wc_train(static_cast<std::size_t>(p.w_c.cols()));
  for (int i = 0; i < p.w_c.cols(); ++i)
    wc_train[static_cast<std::size_t>(i)] = p.w_c(0, i);
  const std::vector<double> wc = loop_interp(wc_train, n);

  std::vector<double> k_c(static_cast<std::size_t>(dq), 0.0);
  for (int e = 0; e < dq; ++e)
    for (int i = 0; i < n; ++i)
      k_c[static_cast<std::size_t>(e)] +=
          wc[static_cast<std::size_t>(i)] * k_hat(i, e);
  std::vector<double> k_f(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int e = 0; e < dq; ++e)
      k_f[static_cast<std::size_t>(i)] += k_hat(i, e) * p.w_f(0, e);

  const double lambda = p.lambda.item();
  std::vector<double> qf(static_cast<std::size_t>(dq), 0.0);
  for (int d = 0; d < dq; ++d)
    for (int i = 0; i < n; ++i)
      qf[static_cast<std::size_t>(d)] +=
          q_hat(i, d) * k_f[static_cast<std::size_t>(i)];

  xf::Tensor<double> core({dq, dq});
  for (int d = 0; d < dq; ++d)
    for (int e = 0; e < dq; ++e)
      core(d, e) = lambda * qf[static_cast<std::size_t>(d)] *
                   k_c[static_cast<std::size_t>(e)];

  xf::Tensor<double> mixed({n, dq});
  for (int i = 0; i < n; ++i)
    for (int e = 0; e < dq; ++e) {
      double s = 0;
      for (int d = 0; d < dq; ++d) s += v(i, d) * core(d, e);
      mixed(i, e) = s;
    }
  (void)d_emb;
  return loop_matmul(mixed, p.w_o);
}

inline double max_abs_diff(const xf::Tensor<double>& a,
                           const xf::Tensor<double>& b) {
  double worst = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace oracle
