#include "convbert/reference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "convbert/model.hpp"

namespace convbert::reference {

namespace {

void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("reference: ") + what);
}

Matrix of(const Tensor& t) {
  check(t.rank() == 2, "expected a rank-2 tensor");
  return Matrix(t.dim(0), t.dim(1), t.data());
}

Matrix linear(const Linear& l, const Matrix& x) {
  return grouped_linear(x, l.weight.data(), 1, l.weight.dim(1), l.bias.data());
}

// Value at row i + offset, or 0 outside [0, n).
double tap(const Matrix& x, long i, long offset, std::size_t c) {
  const long src = i + offset;
  if (src < 0 || src >= static_cast<long>(x.rows)) return 0.0;
  return x(static_cast<std::size_t>(src), c);
}

Matrix mask(Matrix x, std::span<const std::uint8_t> valid) {
  if (valid.empty()) return x;
  for (std::size_t i = 0; i < x.rows; ++i) {
    if (valid[i] == 0) {
      for (std::size_t c = 0; c < x.cols; ++c) x(i, c) = 0.0;
    }
  }
  return x;
}

Matrix add(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.v[i];
  return out;
}

}  // namespace

Matrix::Matrix(std::size_t r, std::size_t c, std::span<const double> values)
    : rows(r), cols(c), v(values.begin(), values.end()) {
  check(v.size() == r * c, "matrix value count");
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  check(a.size() == b.size(), "size mismatch in comparison");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  check(a.cols == b.rows, "matmul inner dimensions");
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols; ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  }
  return c;
}

Matrix add_bias(Matrix x, std::span<const double> bias) {
  if (bias.empty()) return x;
  check(bias.size() == x.cols, "bias width");
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < x.cols; ++j) x(i, j) += bias[j];
  }
  return x;
}

std::vector<double> softmax(std::span<const double> logits) {
  double mx = -INFINITY;
  for (double x : logits) mx = std::max(mx, x);
  std::vector<double> e(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(logits[i] - mx);
    z += e[i];
  }
  for (double& x : e) x /= z;
  return e;
}

Matrix layer_norm(const Matrix& x, std::span<const double> gamma, std::span<const double> beta, double eps) {
  Matrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) mean += x(i, j);
    mean /= static_cast<double>(x.cols);
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<double>(x.cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = (x(i, j) - mean) * inv * gamma[j] + beta[j];
  }
  return out;
}

Matrix gelu(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.v) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  return out;
}

Matrix grouped_linear(const Matrix& x, std::span<const double> weight, std::size_t groups, std::size_t out,
                      std::span<const double> bias) {
  check(groups > 0 && x.cols % groups == 0 && out % groups == 0, "grouped_linear divisibility");
  const std::size_t a = x.cols / groups, b = out / groups;
  check(weight.size() == groups * a * b, "grouped_linear weight size");
  Matrix y(x.rows, out);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t i = 0; i < x.rows; ++i) {
      for (std::size_t j = 0; j < b; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < a; ++p) s += x(i, g * a + p) * weight[g * a * b + p * b + j];
        y(i, g * b + j) = s;
      }
    }
  }
  return add_bias(std::move(y), bias);
}

Matrix dwconv(const Matrix& x, const Matrix& w) {
  check(w.rows == x.cols, "dwconv channels");
  const long half = static_cast<long>(w.cols / 2);
  Matrix out(x.rows, x.cols);
  for (std::size_t c = 0; c < x.cols; ++c) {
    for (std::size_t i = 0; i < x.rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < w.cols; ++j) s += w(c, j) * tap(x, static_cast<long>(i), static_cast<long>(j) - half, c);
      out(i, c) = s;
    }
  }
  return out;
}

Matrix lconv(const Matrix& v, const Kernels& kernels) {
  check(kernels.size() == v.rows, "lconv positions");
  const std::size_t heads = kernels.front().size(), k = kernels.front().front().size();
  check(v.cols % heads == 0, "lconv heads");
  const std::size_t width = v.cols / heads;
  const long half = static_cast<long>(k / 2);
  Matrix out(v.rows, v.cols);
  for (std::size_t i = 0; i < v.rows; ++i) {
    for (std::size_t c = 0; c < v.cols; ++c) {
      const auto& kern = kernels[i][c / width];
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += kern[j] * tap(v, static_cast<long>(i), static_cast<long>(j) - half, c);
      out(i, c) = s;
    }
  }
  return out;
}

Matrix glu(const Matrix& x) {
  check(x.cols % 2 == 0, "glu width");
  const std::size_t m = x.cols / 2;
  Matrix out(x.rows, m);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < m; ++j) out(i, j) = x(i, j) / (1.0 + std::exp(-x(i, m + j)));
  }
  return out;
}

Kernels generate_kernels(const Matrix& features, std::span<const double> wf, std::span<const double> bias,
                         std::size_t heads, std::size_t k) {
  check(features.cols % heads == 0, "kernel generator heads");
  const std::size_t dh = features.cols / heads;
  check(wf.size() == heads * dh * k, "kernel generator weight size");
  Kernels out(features.rows, std::vector<std::vector<double>>(heads));
  for (std::size_t i = 0; i < features.rows; ++i) {
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<double> logits(k, 0.0);
      for (std::size_t j = 0; j < k; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < dh; ++p) s += features(i, h * dh + p) * wf[(h * dh + p) * k + j];
        logits[j] = s + (bias.empty() ? 0.0 : bias[h * k + j]);
      }
      out[i][h] = softmax(logits);
    }
  }
  return out;
}

Kernels dconv_kernels(const Matrix& x, std::span<const double> wf, std::span<const double> bias, std::size_t heads,
                      std::size_t k) {
  return generate_kernels(x, wf, bias, heads, k);
}

Matrix dconv(const Matrix& x, std::span<const double> wf, std::span<const double> bias, std::size_t heads, std::size_t k) {
  return lconv(x, dconv_kernels(x, wf, bias, heads, k));
}

Matrix span_key(const Matrix& x, const Matrix& depthwise, const Matrix& pointwise, std::span<const double> bias) {
  return add_bias(matmul(dwconv(x, depthwise), pointwise), bias);
}

Kernels kernel_gen(const Matrix& q, const Matrix& key_span, std::span<const double> wf, std::span<const double> bias,
                   std::size_t heads, std::size_t k) {
  check(q.rows == key_span.rows && q.cols == key_span.cols, "kernel_gen shapes");
  Matrix prod(q.rows, q.cols);
  for (std::size_t i = 0; i < prod.v.size(); ++i) prod.v[i] = q.v[i] * key_span.v[i];
  return generate_kernels(prod, wf, bias, heads, k);
}

Matrix sdconv(const Matrix& q, const Matrix& key_span, const Matrix& v, std::span<const double> wf,
              std::span<const double> bias, std::size_t heads, std::size_t k) {
  return lconv(v, kernel_gen(q, key_span, wf, bias, heads, k));
}

Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads,
                 std::span<const std::uint8_t> valid, std::vector<Matrix>* weights) {
  check(q.cols % heads == 0, "attention heads");
  const std::size_t n = q.rows, dh = q.cols / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix out(n, q.cols);
  if (weights != nullptr) weights->assign(heads, Matrix(n, n));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits;
      std::vector<std::size_t> keys;
      for (std::size_t j = 0; j < n; ++j) {
        if (!valid.empty() && valid[j] == 0) continue;
        double s = 0.0;
        for (std::size_t p = 0; p < dh; ++p) s += q(i, h * dh + p) * k(j, h * dh + p);
        logits.push_back(s * scale);
        keys.push_back(j);
      }
      if (keys.empty()) continue;
      const std::vector<double> w = softmax(logits);
      for (std::size_t t = 0; t < keys.size(); ++t) {
        if (weights != nullptr) (*weights)[h](i, keys[t]) = w[t];
        for (std::size_t p = 0; p < dh; ++p) out(i, h * dh + p) += w[t] * v(keys[t], h * dh + p);
      }
    }
  }
  return out;
}

Matrix mixed_attention(const MixedAttention& block, const Matrix& x, std::span<const std::uint8_t> valid) {
  const MixedAttentionConfig& cfg = block.config;
  const Matrix q = linear(block.query, x), k = linear(block.key, x), v = linear(block.value, x);
  const Matrix attended = attention(q, k, v, cfg.attention_heads(), valid);
  if (!cfg.use_conv) return linear(block.output, attended);
  const Matrix x_local = mask(x, valid);
  const Matrix ks = span_key(x_local, of(block.span_depthwise), of(block.span_pointwise.weight),
                             block.span_pointwise.bias.data());
  const Matrix cv = mask(linear(block.conv_value, x_local), valid);
  const Matrix conv = sdconv(q, ks, cv, block.kernel_generator.weight.data(), block.kernel_generator.bias.data(),
                             cfg.attention_heads(), cfg.kernel);
  Matrix cat(x.rows, attended.cols + conv.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < attended.cols; ++j) cat(i, j) = attended(i, j);
    for (std::size_t j = 0; j < conv.cols; ++j) cat(i, attended.cols + j) = conv(i, j);
  }
  return linear(block.output, cat);
}

Matrix model_forward(const ConvBertModel& model, std::span<const std::int64_t> ids) {
  const ModelConfig& cfg = model.config();
  const Embeddings& emb = model.embeddings();
  const std::size_t n = ids.size();
  Matrix words(n, cfg.d_emb);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < cfg.d_emb; ++j) words(i, j) = emb.word.at(static_cast<std::size_t>(ids[i]), j);
  }
  if (emb.projected) words = linear(emb.projection, words);
  Matrix h(n, cfg.d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < cfg.d; ++j) h(i, j) = words(i, j) + emb.position.at(i, j) + emb.segment.at(0, j);
  }
  h = layer_norm(h, emb.norm.gamma.data(), emb.norm.beta.data());
  for (const EncoderLayer& layer : model.layers()) {
    h = layer_norm(add(h, mixed_attention(layer.attention, h)), layer.attention_norm.gamma.data(),
                   layer.attention_norm.beta.data());
    const std::size_t g = cfg.groups;
    Matrix inner = gelu(grouped_linear(h, layer.ffn.inner.weight.data(), g, cfg.ffn_inner, layer.ffn.inner.bias.data()));
    Matrix outer = grouped_linear(inner, layer.ffn.outer.weight.data(), g, cfg.d, layer.ffn.outer.bias.data());
    h = layer_norm(add(h, outer), layer.ffn_norm.gamma.data(), layer.ffn_norm.beta.data());
  }
  return h;
}

}  // namespace convbert::reference
