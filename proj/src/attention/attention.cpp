#include "convbert/attention.hpp"

#include "convbert/errors.hpp"
#include "convbert/kernels.hpp"
#include "convbert/ops.hpp"

namespace convbert {

namespace kp = kernels::parallel;

void MixedAttentionConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("attention config: " + msg); };
  if (d == 0 || heads == 0 || reduction == 0 || head_dim == 0) fail("sizes must be positive");
  if (d % heads != 0) fail("hidden size " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  if (heads % reduction != 0) fail("head count " + std::to_string(heads) + " not divisible by reduction " + std::to_string(reduction));
  if (head_dim * heads != d) fail("head_dim * heads must equal d");
  if (bottleneck_width() != attention_heads() * head_dim) fail("bottleneck width must equal (heads/γ) * head_dim");
  if (kernel % 2 == 0) fail("kernel width must be odd, got " + std::to_string(kernel));
  if (use_conv && reduction != 2) {
    fail("mixed attention needs reduction 2 (concatenated width 2d/γ must equal d), got " + std::to_string(reduction));
  }
}

AttentionMask::AttentionMask(std::size_t batch, std::size_t length, std::uint8_t fill)
    : batch_(batch), length_(length), flags_(batch * length, fill) {}

std::span<const std::uint8_t> AttentionMask::row(std::size_t b) const {
  if (b >= batch_) throw ContractError("attention mask row out of range");
  return std::span<const std::uint8_t>(flags_).subspan(b * length_, length_);
}

void AttentionMask::set(std::size_t b, std::size_t i, bool valid) { flags_.at(b * length_ + i) = valid ? 1 : 0; }

Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                      std::span<const std::uint8_t> valid, Tensor* weights) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("self_attention: Q, K, V must share a 2-D shape, got " + shape_string(q.shape()) + ", " +
                         shape_string(k.shape()) + ", " + shape_string(v.shape()));
  }
  const std::size_t n = q.dim(0), width = q.dim(1);
  if (n == 0) throw ContractError("self_attention: empty sequence");
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("self_attention: " + std::to_string(heads) + " heads do not divide width " + std::to_string(width));
  }
  if (!valid.empty() && valid.size() != n) throw DimensionError("self_attention: mask length does not match sequence");
  const kernels::AttentionShape s{n, heads, width / heads};
  std::vector<double> out(n * width), w(heads * n * n);
  kp::attention_forward(q.data(), k.data(), v.data(), valid, s, out, w);
  // scores, softmax, weighted sum
  record_madds(2 * n * n * width + heads * n * n);
  Tensor maps = Tensor::from({heads, n, n}, std::move(w));
  if (weights != nullptr) *weights = maps;
  return Tensor::make_result({n, width}, std::move(out), {q, k, v}, [q, k, v, maps, s](std::span<const double> g) {
    kp::attention_backward(q.data(), k.data(), v.data(), maps.data(), g, s, q.grad_sink(), k.grad_sink(),
                           v.grad_sink());
  });
}

MixedAttention::MixedAttention(const MixedAttentionConfig& cfg, Rng& rng) : config(cfg) {
  config.validate();
  const std::size_t d = config.d, db = config.bottleneck_width();
  query = Linear(d, db, rng);
  key = Linear(d, db, rng);
  value = Linear(d, db, rng);
  if (config.use_conv) {
    span_depthwise = normal_parameter({d, config.kernel}, rng);
    span_pointwise = Linear(d, db, rng);
    kernel_generator.weight = normal_parameter({config.attention_heads(), config.head_dim, config.kernel}, rng);
    kernel_generator.bias = constant_parameter({config.attention_heads() * config.kernel}, 0.0);
    conv_value = Linear(d, db, rng);
    output = Linear(2 * db, d, rng);
  } else {
    output = Linear(db, d, rng);
  }
}

Projections MixedAttention::project(const Tensor& x, std::span<const std::uint8_t> valid) const {
  if (x.rank() != 2 || x.dim(1) != config.d) {
    throw ConfigError("mixed attention expects [n x " + std::to_string(config.d) + "], got " + shape_string(x.shape()));
  }
  Projections p;
  p.query = query(x);
  p.key = key(x);
  p.value = value(x);
  if (config.use_conv) {
    // Padded positions contribute zeros to every convolution window.
    const Tensor x_local = mask_rows(x, valid);
    p.key_span = span_key(x_local, span_depthwise, span_pointwise.weight, span_pointwise.bias);
    p.conv_value = mask_rows(conv_value(x_local), valid);
  }
  return p;
}

Tensor MixedAttention::forward(const Tensor& x, std::span<const std::uint8_t> valid, Tensor* attention_weights) const {
  const Projections p = project(x, valid);
  Tensor attended = self_attention(p.query, p.key, p.value, config.attention_heads(), valid, attention_weights);
  if (!config.use_conv) return output(attended);
  Tensor convolved = sdconv(p.query, p.key_span, p.conv_value, kernel_generator);
  return output(concat_cols(attended, convolved));
}

void MixedAttention::collect(ParameterList& params, const std::string& prefix) const {
  query.collect(params, prefix + ".query");
  key.collect(params, prefix + ".key");
  value.collect(params, prefix + ".value");
  if (config.use_conv) {
    params.add(prefix + ".span_key.depthwise", span_depthwise);
    span_pointwise.collect(params, prefix + ".span_key.pointwise");
    params.add(prefix + ".kernel_generator.weight", kernel_generator.weight);
    params.add(prefix + ".kernel_generator.bias", kernel_generator.bias);
    conv_value.collect(params, prefix + ".conv_value");
  }
  output.collect(params, prefix + ".output");
}

}  // namespace convbert
