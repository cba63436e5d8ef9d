#include "convbert/conv_ops.hpp"

#include <cmath>

#include "convbert/errors.hpp"
#include "convbert/kernels.hpp"
#include "convbert/ops.hpp"

namespace convbert {

namespace kp = kernels::parallel;

KernelSet::KernelSet(Tensor values) : values_(std::move(values)) {
  if (values_.rank() != 3) throw DimensionError("kernel set must be [n x heads x k], got " + shape_string(values_.shape()));
}

double KernelSet::at(std::size_t position, std::size_t head, std::size_t tap) const {
  return values_.data()[(position * heads() + head) * taps() + tap];
}

void require_odd_kernel(std::size_t k) {
  if (k == 0 || k % 2 == 0) throw ConfigError("kernel width must be odd, got " + std::to_string(k));
}

Tensor dwconv(const Tensor& x, const Tensor& w) {
  if (x.rank() != 2 || w.rank() != 2) {
    throw DimensionError("dwconv: expected x [n x d] and w [d x k], got " + shape_string(x.shape()) + " and " +
                         shape_string(w.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(1), k = w.dim(1);
  if (w.dim(0) != d) {
    throw DimensionError("dwconv: channel mismatch, x " + shape_string(x.shape()) + " vs w " +
                         shape_string(w.shape()));
  }
  require_odd_kernel(k);
  std::vector<double> out(n * d);
  kp::dwconv_forward(x.data(), w.data(), n, d, k, out);
  record_madds(n * d * k);
  return Tensor::make_result({n, d}, std::move(out), {x, w}, [x, w, n, d, k](std::span<const double> g) {
    kp::dwconv_backward(x.data(), w.data(), g, n, d, k, x.grad_sink(), w.grad_sink());
  });
}

Tensor lconv(const Tensor& v, const KernelSet& kernels) {
  if (v.rank() != 2) throw DimensionError("lconv: expected v [n x d], got " + shape_string(v.shape()));
  const Tensor& kv = kernels.values();
  const std::size_t n = v.dim(0), d = v.dim(1), heads = kernels.heads(), k = kernels.taps();
  if (kernels.positions() != n) {
    throw DimensionError("lconv: kernels " + shape_string(kv.shape()) + " do not cover " + shape_string(v.shape()));
  }
  if (d % heads != 0) {
    throw ConfigError("lconv: " + std::to_string(heads) + " heads do not divide " + std::to_string(d) + " channels");
  }
  require_odd_kernel(k);
  std::vector<double> out(n * d);
  kp::lconv_forward(v.data(), kv.data(), n, d, heads, k, out);
  record_madds(n * d * k);
  return Tensor::make_result({n, d}, std::move(out), {v, kv}, [v, kv, n, d, heads, k](std::span<const double> g) {
    kp::lconv_backward(v.data(), kv.data(), g, n, d, heads, k, v.grad_sink(), kv.grad_sink());
  });
}

Tensor glu(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("glu: expected [n x 2m], got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), w = x.dim(1);
  if (w % 2 != 0) throw DimensionError("glu: last extent must be even, got " + shape_string(x.shape()));
  const std::size_t m = w / 2;
  auto in = x.data();
  std::vector<double> gate(n * m), out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double z = in[i * w + m + j];
      gate[i * m + j] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      out[i * m + j] = in[i * w + j] * gate[i * m + j];
    }
  }
  record_madds(n * m);
  return Tensor::make_result({n, m}, std::move(out), {x}, [x, n, m, w, gate = std::move(gate)](std::span<const double> g) {
    auto dx = x.grad_sink();
    auto in = x.data();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        const double s = gate[i * m + j];
        dx[i * w + j] += g[i * m + j] * s;
        dx[i * w + m + j] += g[i * m + j] * in[i * w + j] * s * (1.0 - s);
      }
    }
  });
}

namespace {

KernelSet kernels_from_features(const Tensor& features, const KernelGenerator& gen) {
  const std::size_t n = features.dim(0), heads = gen.heads(), k = gen.taps();
  if (features.dim(1) != heads * gen.head_dim()) {
    throw DimensionError("kernel generator expects width " + std::to_string(heads * gen.head_dim()) + ", got " +
                         shape_string(features.shape()));
  }
  require_odd_kernel(k);
  Tensor logits = grouped_linear(features, gen.weight, gen.bias);
  return KernelSet(softmax(reshape(logits, {n, heads, k}), 2));
}

}  // namespace

KernelSet dconv_kernels(const Tensor& x, const KernelGenerator& gen) {
  if (x.rank() != 2) throw DimensionError("dconv: expected x [n x d], got " + shape_string(x.shape()));
  return kernels_from_features(x, gen);
}

Tensor dconv(const Tensor& x, const KernelGenerator& gen) { return lconv(x, dconv_kernels(x, gen)); }

Tensor span_key(const Tensor& x, const Tensor& depthwise, const Tensor& pointwise, const Tensor& bias) {
  if (pointwise.rank() != 2 || pointwise.dim(0) != x.dim(1)) {
    throw DimensionError("span_key: pointwise weights " + shape_string(pointwise.shape()) + " do not match input " +
                         shape_string(x.shape()));
  }
  return grouped_linear(dwconv(x, depthwise), pointwise, bias);
}

KernelSet kernel_gen(const Tensor& q, const Tensor& key_span, const KernelGenerator& gen) {
  if (q.rank() != 2 || q.shape() != key_span.shape()) {
    throw DimensionError("kernel_gen: query " + shape_string(q.shape()) + " and span key " +
                         shape_string(key_span.shape()) + " must share a 2-D shape");
  }
  return kernels_from_features(mul(q, key_span), gen);
}

Tensor sdconv(const Tensor& q, const Tensor& key_span, const Tensor& v, const KernelGenerator& gen) {
  if (v.shape() != q.shape()) {
    throw DimensionError("sdconv: value " + shape_string(v.shape()) + " must match query " + shape_string(q.shape()));
  }
  return lconv(v, kernel_gen(q, key_span, gen));
}

}  // namespace convbert
