#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "convbert/kernels.hpp"

namespace convbert::kernels::serial {

namespace {

inline double a_at(const GemmArgs& g, std::size_t i, std::size_t p) {
  return g.trans_a ? g.a[p * g.lda + i] : g.a[i * g.lda + p];
}

inline double b_at(const GemmArgs& g, std::size_t p, std::size_t j) {
  return g.trans_b ? g.b[j * g.ldb + p] : g.b[p * g.ldb + j];
}

inline bool is_valid(std::span<const std::uint8_t> valid, std::size_t i) { return valid.empty() || valid[i] != 0; }

}  // namespace

void gemm(const GemmArgs& g) {
  for (std::size_t i = 0; i < g.m; ++i) {
    for (std::size_t j = 0; j < g.n; ++j) {
      double acc = g.accumulate ? g.c[i * g.ldc + j] : 0.0;
      for (std::size_t p = 0; p < g.k; ++p) acc += a_at(g, i, p) * b_at(g, p, j);
      g.c[i * g.ldc + j] = acc;
    }
  }
}

void dwconv_forward(std::span<const double> x, std::span<const double> w, std::size_t n, std::size_t d,
                    std::size_t k, std::span<double> out) {
  const auto half = static_cast<long>((k - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const long src = static_cast<long>(i + j) - half;
        if (src < 0 || src >= static_cast<long>(n)) continue;
        acc += w[c * k + j] * x[static_cast<std::size_t>(src) * d + c];
      }
      out[i * d + c] = acc;
    }
  }
}

void dwconv_backward(std::span<const double> x, std::span<const double> w, std::span<const double> dout,
                     std::size_t n, std::size_t d, std::size_t k, std::span<double> dx, std::span<double> dw) {
  const auto half = static_cast<long>((k - 1) / 2);
  const long len = static_cast<long>(n);
  if (!dw.empty()) {
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t j = 0; j < k; ++j) {
        double acc = dw[c * k + j];
        for (std::size_t i = 0; i < n; ++i) {
          const long src = static_cast<long>(i + j) - half;
          if (src < 0 || src >= len) continue;
          acc += dout[i * d + c] * x[static_cast<std::size_t>(src) * d + c];
        }
        dw[c * k + j] = acc;
      }
    }
  }
  if (!dx.empty()) {
    // x[p] feeds out[i] through tap j when p = i + j - half.
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t c = 0; c < d; ++c) {
        double acc = dx[p * d + c];
        for (std::size_t j = 0; j < k; ++j) {
          const long i = static_cast<long>(p) - static_cast<long>(j) + half;
          if (i < 0 || i >= len) continue;
          acc += w[c * k + j] * dout[static_cast<std::size_t>(i) * d + c];
        }
        dx[p * d + c] = acc;
      }
    }
  }
}

void lconv_forward(std::span<const double> v, std::span<const double> kern, std::size_t n, std::size_t d,
                   std::size_t heads, std::size_t k, std::span<double> out) {
  const auto half = static_cast<long>((k - 1) / 2);
  const std::size_t width = d / heads;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      const double* taps = &kern[(i * heads + c / width) * k];
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const long src = static_cast<long>(i + j) - half;
        if (src < 0 || src >= static_cast<long>(n)) continue;
        acc += taps[j] * v[static_cast<std::size_t>(src) * d + c];
      }
      out[i * d + c] = acc;
    }
  }
}

void lconv_backward(std::span<const double> v, std::span<const double> kern, std::span<const double> dout,
                    std::size_t n, std::size_t d, std::size_t heads, std::size_t k, std::span<double> dv,
                    std::span<double> dkern) {
  const auto half = static_cast<long>((k - 1) / 2);
  const long len = static_cast<long>(n);
  const std::size_t width = d / heads;
  if (!dkern.empty()) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t j = 0; j < k; ++j) {
          const long src = static_cast<long>(i + j) - half;
          if (src < 0 || src >= len) continue;
          double acc = dkern[(i * heads + h) * k + j];
          for (std::size_t c = h * width; c < (h + 1) * width; ++c) {
            acc += dout[i * d + c] * v[static_cast<std::size_t>(src) * d + c];
          }
          dkern[(i * heads + h) * k + j] = acc;
        }
      }
    }
  }
  if (!dv.empty()) {
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t c = 0; c < d; ++c) {
        const std::size_t h = c / width;
        double acc = dv[p * d + c];
        for (std::size_t j = 0; j < k; ++j) {
          const long i = static_cast<long>(p) - static_cast<long>(j) + half;
          if (i < 0 || i >= len) continue;
          const auto row = static_cast<std::size_t>(i);
          acc += kern[(row * heads + h) * k + j] * dout[row * d + c];
        }
        dv[p * d + c] = acc;
      }
    }
  }
}

void attention_forward(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                       std::span<const std::uint8_t> valid, const AttentionShape& s, std::span<double> out,
                       std::span<double> weights) {
  const std::size_t width = s.heads * s.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
  for (std::size_t h = 0; h < s.heads; ++h) {
    const std::size_t off = h * s.head_dim;
    for (std::size_t i = 0; i < s.n; ++i) {
      double* w = &weights[(h * s.n + i) * s.n];
      double max_logit = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.n; ++j) {
        if (!is_valid(valid, j)) {
          w[j] = 0.0;
          continue;
        }
        double dot = 0.0;
        for (std::size_t c = 0; c < s.head_dim; ++c) dot += q[i * width + off + c] * k[j * width + off + c];
        w[j] = dot * scale;
        if (w[j] > max_logit) max_logit = w[j];
      }
      double total = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        if (!is_valid(valid, j)) continue;
        w[j] = std::exp(w[j] - max_logit);
        total += w[j];
      }
      if (total > 0.0) {
        for (std::size_t j = 0; j < s.n; ++j) w[j] /= total;
      }
      double* o = &out[i * width + off];
      std::fill(o, o + s.head_dim, 0.0);
      for (std::size_t j = 0; j < s.n; ++j) {
        const double* vj = &v[j * width + off];
        for (std::size_t c = 0; c < s.head_dim; ++c) o[c] += w[j] * vj[c];
      }
    }
  }
}

void attention_backward(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                        std::span<const double> weights, std::span<const double> dout, const AttentionShape& s,
                        std::span<double> dq, std::span<double> dk, std::span<double> dv) {
  const std::size_t width = s.heads * s.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
  // dlogits[h][i][j] = w_ij * (dw_ij - sum_j' w_ij' dw_ij'), dw_ij = dout_i . v_j
  std::vector<double> dlogits(s.heads * s.n * s.n);
  for (std::size_t h = 0; h < s.heads; ++h) {
    const std::size_t off = h * s.head_dim;
    for (std::size_t i = 0; i < s.n; ++i) {
      const double* w = &weights[(h * s.n + i) * s.n];
      double* g = &dlogits[(h * s.n + i) * s.n];
      double inner = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < s.head_dim; ++c) dot += dout[i * width + off + c] * v[j * width + off + c];
        g[j] = dot;
        inner += w[j] * dot;
      }
      for (std::size_t j = 0; j < s.n; ++j) g[j] = w[j] * (g[j] - inner);
      if (!dq.empty()) {
        for (std::size_t c = 0; c < s.head_dim; ++c) {
          double acc = dq[i * width + off + c];
          for (std::size_t j = 0; j < s.n; ++j) acc += scale * g[j] * k[j * width + off + c];
          dq[i * width + off + c] = acc;
        }
      }
    }
  }
  for (std::size_t h = 0; h < s.heads; ++h) {
    const std::size_t off = h * s.head_dim;
    for (std::size_t j = 0; j < s.n; ++j) {
      for (std::size_t c = 0; c < s.head_dim; ++c) {
        double acc_k = dk.empty() ? 0.0 : dk[j * width + off + c];
        double acc_v = dv.empty() ? 0.0 : dv[j * width + off + c];
        for (std::size_t i = 0; i < s.n; ++i) {
          acc_k += scale * dlogits[(h * s.n + i) * s.n + j] * q[i * width + off + c];
          acc_v += weights[(h * s.n + i) * s.n + j] * dout[i * width + off + c];
        }
        if (!dk.empty()) dk[j * width + off + c] = acc_k;
        if (!dv.empty()) dv[j * width + off + c] = acc_v;
      }
    }
  }
}

}  // namespace convbert::kernels::serial
