#include "convbert/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "convbert/errors.hpp"
#include "convbert/kernels.hpp"

namespace convbert {

namespace kp = kernels::parallel;

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void accumulate(std::span<double> dst, std::span<const double> src) {
  if (dst.empty()) return;
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " . " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n);
  kp::gemm({.m = m, .n = n, .k = k, .a = a.data().data(), .lda = k, .b = b.data().data(), .ldb = n,
            .c = out.data(), .ldc = n});
  record_madds(m * k * n);
  return Tensor::make_result({m, n}, std::move(out), {a, b}, [a, b, m, n, k](std::span<const double> g) {
    auto da = a.grad_sink();
    auto db = b.grad_sink();
    // dA = dC . B^T, dB = A^T . dC
    if (!da.empty()) {
      kp::gemm({.trans_b = true, .m = m, .n = k, .k = n, .a = g.data(), .lda = n, .b = b.data().data(),
                .ldb = n, .c = da.data(), .ldc = k, .accumulate = true});
    }
    if (!db.empty()) {
      kp::gemm({.trans_a = true, .m = k, .n = n, .k = m, .a = a.data().data(), .lda = k, .b = g.data(),
                .ldb = n, .c = db.data(), .ldc = n, .accumulate = true});
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return Tensor::make_result({c, r}, std::move(out), {a}, [a, r, c](std::span<const double> g) {
    auto da = a.grad_sink();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) da[i * c + j] += g[j * r + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  record_madds(out.size());
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    accumulate(a.grad_sink(), g);
    accumulate(b.grad_sink(), g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  record_madds(out.size());
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    accumulate(a.grad_sink(), g);
    auto db = b.grad_sink();
    for (std::size_t i = 0; i < db.size(); ++i) db[i] -= g[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  record_madds(out.size());
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    auto da = a.grad_sink();
    auto db = b.grad_sink();
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * y[i];
    for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * x[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  record_madds(out.size());
  return Tensor::make_result(a.shape(), std::move(out), {a}, [a, factor](std::span<const double> g) {
    auto da = a.grad_sink();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += factor * g[i];
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (bias.numel() != m) {
    throw DimensionError("add_row_bias: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += b[j];
  record_madds(out.size());
  return Tensor::make_result(x.shape(), std::move(out), {x, bias}, [x, bias, n, m](std::span<const double> g) {
    accumulate(x.grad_sink(), g);
    auto db = bias.grad_sink();
    if (db.empty()) return;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) db[j] += g[i * m + j];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " cannot become " + shape_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {a},
                             [a](std::span<const double> g) { accumulate(a.grad_sink(), g); });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("softmax: axis out of range for " + shape_string(s));
  const std::size_t extent = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < inner; ++r) {
      const std::size_t base = o * extent * inner + r;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < extent; ++e) mx = std::max(mx, in[base + e * inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < extent; ++e) {
        const double v = std::exp(in[base + e * inner] - mx);
        out[base + e * inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= total;
    }
  }
  record_madds(out.size());
  std::vector<double> saved = out;
  return Tensor::make_result(s, std::move(out), {x}, [x, yv = std::move(saved), outer, inner, extent](std::span<const double> g) {
    auto dx = x.grad_sink();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t r = 0; r < inner; ++r) {
        const std::size_t base = o * extent * inner + r;
        double dot = 0.0;
        for (std::size_t e = 0; e < extent; ++e) dot += yv[base + e * inner] * g[base + e * inner];
        for (std::size_t e = 0; e < extent; ++e) {
          const std::size_t idx = base + e * inner;
          dx[idx] += yv[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (gamma.numel() != m || beta.numel() != m) {
    throw DimensionError("layer_norm: gain/bias do not match width of " + shape_string(x.shape()));
  }
  auto in = x.data();
  auto gm = gamma.data(), bt = beta.data();
  std::vector<double> normed(n * m), inv_std(n), out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += in[i * m + j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double c = in[i * m + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      normed[i * m + j] = (in[i * m + j] - mu) * inv_std[i];
      out[i * m + j] = normed[i * m + j] * gm[j] + bt[j];
    }
  }
  record_madds(out.size());
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, m, normed = std::move(normed), inv_std = std::move(inv_std)](std::span<const double> g) {
        auto dx = x.grad_sink();
        auto dg = gamma.grad_sink();
        auto db = beta.grad_sink();
        auto gm = gamma.data();
        for (std::size_t i = 0; i < n; ++i) {
          double mean_dn = 0.0, mean_dn_n = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            const double dn = g[i * m + j] * gm[j];
            mean_dn += dn;
            mean_dn_n += dn * normed[i * m + j];
            if (!dg.empty()) dg[j] += g[i * m + j] * normed[i * m + j];
            if (!db.empty()) db[j] += g[i * m + j];
          }
          mean_dn /= static_cast<double>(m);
          mean_dn_n /= static_cast<double>(m);
          if (dx.empty()) continue;
          for (std::size_t j = 0; j < m; ++j) {
            const double dn = g[i * m + j] * gm[j];
            dx[i * m + j] += inv_std[i] * (dn - mean_dn - normed[i * m + j] * mean_dn_n);
          }
        }
      });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * in[i] * (1.0 + std::erf(in[i] / std::numbers::sqrt2));
  record_madds(out.size());
  return Tensor::make_result(x.shape(), std::move(out), {x}, [x](std::span<const double> g) {
    auto dx = x.grad_sink();
    auto in = x.data();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(in[i] / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * in[i] * in[i]);
      dx[i] += g[i] * (cdf + in[i] * pdf);
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Branch keeps exp() from overflowing for large |x|.
    out[i] = in[i] >= 0 ? 1.0 / (1.0 + std::exp(-in[i])) : std::exp(in[i]) / (1.0 + std::exp(in[i]));
  }
  record_madds(out.size());
  std::vector<double> saved = out;
  return Tensor::make_result(x.shape(), std::move(out), {x}, [x, y = std::move(saved)](std::span<const double> g) {
    auto dx = x.grad_sink();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  if (b.dim(0) != n) {
    throw DimensionError("concat_cols: row counts differ, " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(n * (ca + cb));
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(&x[i * ca], ca, &out[i * (ca + cb)]);
    std::copy_n(&y[i * cb], cb, &out[i * (ca + cb) + ca]);
  }
  return Tensor::make_result({n, ca + cb}, std::move(out), {a, b}, [a, b, n, ca, cb](std::span<const double> g) {
    auto da = a.grad_sink();
    auto db = b.grad_sink();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < da.size() / n; ++j) da[i * ca + j] += g[i * (ca + cb) + j];
      for (std::size_t j = 0; j < db.size() / n; ++j) db[i * cb + j] += g[i * (ca + cb) + ca + j];
    }
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  record_madds(x.numel());
  return Tensor::make_result({1}, {total}, {x}, [x](std::span<const double> g) {
    auto dx = x.grad_sink();
    for (double& v : dx) v += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids) {
  require_rank(table, 2, "gather_rows");
  const std::size_t rows = table.dim(0), m = table.dim(1), n = ids.size();
  if (n == 0) throw ContractError("gather_rows: empty id list");
  std::vector<double> out(n * m);
  auto t = table.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw InputError("id " + std::to_string(ids[i]) + " at index " + std::to_string(i) + " is outside [0, " +
                       std::to_string(rows) + ")");
    }
    std::copy_n(&t[static_cast<std::size_t>(ids[i]) * m], m, &out[i * m]);
  }
  std::vector<std::int64_t> saved(ids.begin(), ids.end());
  return Tensor::make_result({n, m}, std::move(out), {table}, [table, m, saved = std::move(saved)](std::span<const double> g) {
    auto dt = table.grad_sink();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      const auto row = static_cast<std::size_t>(saved[i]);
      for (std::size_t j = 0; j < m; ++j) dt[row * m + j] += g[i * m + j];
    }
  });
}

Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> valid) {
  if (valid.empty()) return x;
  require_rank(x, 2, "mask_rows");
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (valid.size() != n) throw DimensionError("mask_rows: mask length does not match " + shape_string(x.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid[i]) std::fill_n(&out[i * m], m, 0.0);
  }
  record_madds(out.size());
  std::vector<std::uint8_t> saved(valid.begin(), valid.end());
  return Tensor::make_result(x.shape(), std::move(out), {x}, [x, m, saved = std::move(saved)](std::span<const double> g) {
    auto dx = x.grad_sink();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      if (!saved[i]) continue;
      for (std::size_t j = 0; j < m; ++j) dx[i * m + j] += g[i * m + j];
    }
  });
}

Tensor grouped_linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "grouped_linear");
  const std::size_t n = x.dim(0), a = x.dim(1);
  std::size_t groups = 1, ain = 0, bout = 0;
  if (weight.rank() == 2) {
    ain = weight.dim(0);
    bout = weight.dim(1);
  } else if (weight.rank() == 3) {
    groups = weight.dim(0);
    ain = weight.dim(1);
    bout = weight.dim(2);
  } else {
    throw DimensionError("grouped_linear: weight must be rank 2 or 3, got " + shape_string(weight.shape()));
  }
  if (groups * ain != a) {
    throw DimensionError("grouped_linear: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t b = groups * bout;
  if (bias.defined() && bias.numel() != b) {
    throw DimensionError("grouped_linear: bias " + shape_string(bias.shape()) + " does not match output width " +
                         std::to_string(b));
  }
  std::vector<double> out(n * b);
  auto xv = x.data();
  auto wv = weight.data();
  for (std::size_t g = 0; g < groups; ++g) {
    kp::gemm({.m = n, .n = bout, .k = ain, .a = xv.data() + g * ain, .lda = a, .b = wv.data() + g * ain * bout,
              .ldb = bout, .c = out.data() + g * bout, .ldc = b});
  }
  std::uint64_t cost = n * a * bout;
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < b; ++j) out[i * b + j] += bv[j];
    cost += n * b;
  }
  record_madds(cost);
  return Tensor::make_result(
      {n, b}, std::move(out), {x, weight, bias},
      [x, weight, bias, n, a, b, groups, ain, bout](std::span<const double> g) {
        auto dx = x.grad_sink();
        auto dw = weight.grad_sink();
        for (std::size_t gi = 0; gi < groups; ++gi) {
          if (!dx.empty()) {
            kp::gemm({.trans_b = true, .m = n, .n = ain, .k = bout, .a = g.data() + gi * bout, .lda = b,
                      .b = weight.data().data() + gi * ain * bout, .ldb = bout, .c = dx.data() + gi * ain,
                      .ldc = a, .accumulate = true});
          }
          if (!dw.empty()) {
            kp::gemm({.trans_a = true, .m = ain, .n = bout, .k = n, .a = x.data().data() + gi * ain, .lda = a,
                      .b = g.data() + gi * bout, .ldb = b, .c = dw.data() + gi * ain * bout, .ldc = bout,
                      .accumulate = true});
          }
        }
        if (bias.defined()) {
          auto db = bias.grad_sink();
          if (db.empty()) return;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < b; ++j) db[j] += g[i * b + j];
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n) throw DimensionError("cross_entropy: target count does not match logits rows");
  auto z = logits.data();
  std::vector<double> probs(n * v, 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0) continue;
    if (static_cast<std::size_t>(targets[i]) >= v) {
      throw InputError("cross_entropy: target " + std::to_string(targets[i]) + " outside vocabulary");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, z[i * v + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(z[i * v + j] - mx);
      s += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= s;
    total += -(z[i * v + static_cast<std::size_t>(targets[i])] - mx - std::log(s));
    ++count;
  }
  record_madds(logits.numel());
  if (count == 0) return Tensor::scalar(0.0);
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<std::int64_t> saved(targets.begin(), targets.end());
  return Tensor::make_result(
      {1}, {total * inv}, {logits},
      [logits, n, v, inv, probs = std::move(probs), saved = std::move(saved)](std::span<const double> g) {
        auto dz = logits.grad_sink();
        for (std::size_t i = 0; i < n; ++i) {
          if (saved[i] < 0) continue;
          for (std::size_t j = 0; j < v; ++j) dz[i * v + j] += g[0] * inv * probs[i * v + j];
          dz[i * v + static_cast<std::size_t>(saved[i])] -= g[0] * inv;
        }
      });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels, std::span<const double> weights) {
  const std::size_t n = logits.numel();
  if (labels.size() != n || weights.size() != n) {
    throw DimensionError("bce_with_logits: labels/weights must match " + shape_string(logits.shape()));
  }
  auto z = logits.data();
  double total = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    total += weights[i] * (std::max(z[i], 0.0) - z[i] * labels[i] + std::log1p(std::exp(-std::abs(z[i]))));
    wsum += weights[i];
  }
  record_madds(n);
  if (wsum == 0.0) return Tensor::scalar(0.0);
  std::vector<double> lab(labels.begin(), labels.end()), wt(weights.begin(), weights.end());
  return Tensor::make_result({1}, {total / wsum}, {logits},
                             [logits, wsum, lab = std::move(lab), wt = std::move(wt)](std::span<const double> g) {
                               auto dz = logits.grad_sink();
                               auto z = logits.data();
                               for (std::size_t i = 0; i < dz.size(); ++i) {
                                 if (wt[i] == 0.0) continue;
                                 const double p = z[i] >= 0 ? 1.0 / (1.0 + std::exp(-z[i]))
                                                            : std::exp(z[i]) / (1.0 + std::exp(z[i]));
                                 dz[i] += g[0] * wt[i] * (p - lab[i]) / wsum;
                               }
                             });
}

}  // namespace convbert
