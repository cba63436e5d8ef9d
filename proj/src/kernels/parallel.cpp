#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "convbert/kernels.hpp"

// Same arithmetic as serial.cpp, with the outer loops split across threads.
// Each output element is still accumulated in ascending reduction order.

namespace convbert::kernels::parallel {

namespace {

inline bool is_valid(std::span<const std::uint8_t> valid, std::size_t i) { return valid.empty() || valid[i] != 0; }

using Index = long;

}  // namespace

int max_threads() { return omp_get_max_threads(); }

void gemm(const GemmArgs& g) {
  const auto m = static_cast<Index>(g.m);
  if (!g.trans_b) {
    // i-p-j order streams rows of B.
#pragma omp parallel for schedule(static)
    for (Index ii = 0; ii < m; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      double* crow = g.c + i * g.ldc;
      if (!g.accumulate) std::fill(crow, crow + g.n, 0.0);
      for (std::size_t p = 0; p < g.k; ++p) {
        const double a = g.trans_a ? g.a[p * g.lda + i] : g.a[i * g.lda + p];
        const double* brow = g.b + p * g.ldb;
        for (std::size_t j = 0; j < g.n; ++j) crow[j] += a * brow[j];
      }
    }
    return;
  }
#pragma omp parallel for schedule(static)
  for (Index ii = 0; ii < m; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    for (std::size_t j = 0; j < g.n; ++j) {
      double acc = g.accumulate ? g.c[i * g.ldc + j] : 0.0;
      for (std::size_t p = 0; p < g.k; ++p) {
        const double a = g.trans_a ? g.a[p * g.lda + i] : g.a[i * g.lda + p];
        acc += a * g.b[j * g.ldb + p];
      }
      g.c[i * g.ldc + j] = acc;
    }
  }
}

void dwconv_forward(std::span<const double> x, std::span<const double> w, std::size_t n, std::size_t d,
                    std::size_t k, std::span<double> out) {
  const auto half = static_cast<Index>((k - 1) / 2);
  const auto len = static_cast<Index>(n);
#pragma omp parallel for schedule(static)
  for (Index ii = 0; ii < len; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const Index src = ii + static_cast<Index>(j) - half;
        if (src < 0 || src >= len) continue;
        acc += w[c * k + j] * x[static_cast<std::size_t>(src) * d + c];
      }
      out[i * d + c] = acc;
    }
  }
}

void dwconv_backward(std::span<const double> x, std::span<const double> w, std::span<const double> dout,
                     std::size_t n, std::size_t d, std::size_t k, std::span<double> dx, std::span<double> dw) {
  const auto half = static_cast<Index>((k - 1) / 2);
  const auto len = static_cast<Index>(n);
  if (!dw.empty()) {
#pragma omp parallel for schedule(static)
    for (Index cc = 0; cc < static_cast<Index>(d); ++cc) {
      const auto c = static_cast<std::size_t>(cc);
      for (std::size_t j = 0; j < k; ++j) {
        double acc = dw[c * k + j];
        for (Index i = 0; i < len; ++i) {
          const Index src = i + static_cast<Index>(j) - half;
          if (src < 0 || src >= len) continue;
          acc += dout[static_cast<std::size_t>(i) * d + c] * x[static_cast<std::size_t>(src) * d + c];
        }
        dw[c * k + j] = acc;
      }
    }
  }
  if (!dx.empty()) {
#pragma omp parallel for schedule(static)
    for (Index pp = 0; pp < len; ++pp) {
      const auto p = static_cast<std::size_t>(pp);
      for (std::size_t c = 0; c < d; ++c) {
        double acc = dx[p * d + c];
        for (std::size_t j = 0; j < k; ++j) {
          const Index i = pp - static_cast<Index>(j) + half;
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
  const auto half = static_cast<Index>((k - 1) / 2);
  const auto len = static_cast<Index>(n);
  const std::size_t width = d / heads;
#pragma omp parallel for schedule(static)
  for (Index ii = 0; ii < len; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    for (std::size_t c = 0; c < d; ++c) {
      const double* taps = &kern[(i * heads + c / width) * k];
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const Index src = ii + static_cast<Index>(j) - half;
        if (src < 0 || src >= len) continue;
        acc += taps[j] * v[static_cast<std::size_t>(src) * d + c];
      }
      out[i * d + c] = acc;
    }
  }
}

void lconv_backward(std::span<const double> v, std::span<const double> kern, std::span<const double> dout,
                    std::size_t n, std::size_t d, std::size_t heads, std::size_t k, std::span<double> dv,
                    std::span<double> dkern) {
  const auto half = static_cast<Index>((k - 1) / 2);
  const auto len = static_cast<Index>(n);
  const std::size_t width = d / heads;
  if (!dkern.empty()) {
#pragma omp parallel for schedule(static)
    for (Index ii = 0; ii < len; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t j = 0; j < k; ++j) {
          const Index src = ii + static_cast<Index>(j) - half;
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
#pragma omp parallel for schedule(static)
    for (Index pp = 0; pp < len; ++pp) {
      const auto p = static_cast<std::size_t>(pp);
      for (std::size_t c = 0; c < d; ++c) {
        const std::size_t h = c / width;
        double acc = dv[p * d + c];
        for (std::size_t j = 0; j < k; ++j) {
          const Index i = pp - static_cast<Index>(j) + half;
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
  const auto rows = static_cast<Index>(s.heads * s.n);
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) {
    const std::size_t h = static_cast<std::size_t>(r) / s.n;
    const std::size_t i = static_cast<std::size_t>(r) % s.n;
    const std::size_t off = h * s.head_dim;
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

void attention_backward(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                        std::span<const double> weights, std::span<const double> dout, const AttentionShape& s,
                        std::span<double> dq, std::span<double> dk, std::span<double> dv) {
  const std::size_t width = s.heads * s.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
  const auto rows = static_cast<Index>(s.heads * s.n);
  std::vector<double> dlogits(s.heads * s.n * s.n);
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) {
    const std::size_t h = static_cast<std::size_t>(r) / s.n;
    const std::size_t i = static_cast<std::size_t>(r) % s.n;
    const std::size_t off = h * s.head_dim;
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
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) {
    const std::size_t h = static_cast<std::size_t>(r) / s.n;
    const std::size_t j = static_cast<std::size_t>(r) % s.n;
    const std::size_t off = h * s.head_dim;
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

}  // namespace convbert::kernels::parallel
