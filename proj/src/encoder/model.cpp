#include "convbert/model.hpp"

#include "convbert/errors.hpp"
#include "convbert/ops.hpp"

namespace convbert {

namespace {

std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace

Embeddings::Embeddings(const ModelConfig& cfg, Rng& rng)
    : word(normal_parameter({cfg.vocab_size, cfg.d_emb}, rng)),
      projected(cfg.d_emb != cfg.d),
      position(normal_parameter({cfg.max_positions, cfg.d}, rng)),
      segment(normal_parameter({cfg.type_vocab, cfg.d}, rng)),
      norm(cfg.d) {
  if (projected) projection = Linear(cfg.d_emb, cfg.d, rng);
}

Tensor Embeddings::operator()(std::span<const std::int64_t> ids, std::span<const std::int64_t> segments) const {
  const std::size_t n = ids.size();
  if (n == 0) throw ContractError("embeddings: empty sequence");
  if (n > position.dim(0)) {
    throw InputError("sequence length " + std::to_string(n) + " exceeds max_positions " +
                     std::to_string(position.dim(0)));
  }
  if (!segments.empty() && segments.size() != n) throw DimensionError("embeddings: segment ids length mismatch");
  std::vector<std::int64_t> positions(n), segs(n, 0);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<std::int64_t>(i);
  if (!segments.empty()) segs.assign(segments.begin(), segments.end());
  Tensor w = gather_rows(word, ids);
  if (projected) w = projection(w);
  return norm(add(add(w, gather_rows(position, positions)), gather_rows(segment, segs)));
}

void Embeddings::collect(ParameterList& params, const std::string& prefix) const {
  params.add(prefix + ".word", word);
  if (projected) projection.collect(params, prefix + ".projection");
  params.add(prefix + ".position", position);
  params.add(prefix + ".segment", segment);
  norm.collect(params, prefix + ".norm");
}

FeedForward::FeedForward(const ModelConfig& cfg, Rng& rng)
    : inner(cfg.d, cfg.ffn_inner, cfg.groups, rng), outer(cfg.ffn_inner, cfg.d, cfg.groups, rng) {}

Tensor FeedForward::operator()(const Tensor& x) const { return outer(gelu(inner(x))); }

void FeedForward::collect(ParameterList& params, const std::string& prefix) const {
  inner.collect(params, prefix + ".inner");
  outer.collect(params, prefix + ".outer");
}

EncoderLayer::EncoderLayer(const ModelConfig& cfg, Rng& rng)
    : attention(cfg.attention(), rng), attention_norm(cfg.d), ffn(cfg, rng), ffn_norm(cfg.d) {}

Tensor EncoderLayer::operator()(const Tensor& x, std::span<const std::uint8_t> valid, Tensor* attention_weights) const {
  Tensor h = attention_norm(add(x, attention.forward(x, valid, attention_weights)));
  return ffn_norm(add(h, ffn(h)));
}

void EncoderLayer::collect(ParameterList& params, const std::string& prefix) const {
  attention.collect(params, prefix + ".attention");
  attention_norm.collect(params, prefix + ".attention_norm");
  ffn.collect(params, prefix + ".ffn");
  ffn_norm.collect(params, prefix + ".ffn_norm");
}

ConvBertModel::ConvBertModel(const ModelConfig& cfg, Rng& rng) : config_(cfg) {
  config_.validate();
  embeddings_ = Embeddings(config_, rng);
  layers_.reserve(config_.layers);
  for (std::size_t i = 0; i < config_.layers; ++i) layers_.emplace_back(config_, rng);
}

Tensor ConvBertModel::forward(std::span<const std::int64_t> ids, std::span<const std::uint8_t> valid,
                              std::span<const std::int64_t> segments, std::vector<Tensor>* attention_maps) const {
  if (!valid.empty() && valid.size() != ids.size()) throw DimensionError("model: mask length does not match ids");
  // An explicit all-ones mask keeps the operation count independent of
  // whether the caller supplied one.
  std::vector<std::uint8_t> mask(valid.begin(), valid.end());
  if (mask.empty()) mask.assign(ids.size(), 1);
  if (attention_maps != nullptr) attention_maps->clear();
  Tensor h = embeddings_(ids, segments);
  for (const EncoderLayer& layer : layers_) {
    Tensor maps;
    h = layer(h, mask, attention_maps != nullptr ? &maps : nullptr);
    if (attention_maps != nullptr) attention_maps->push_back(maps);
  }
  return h;
}

ParameterList ConvBertModel::parameters(const std::string& prefix) const {
  ParameterList params;
  embeddings_.collect(params, join(prefix, "embeddings"));
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(params, join(prefix, "layer." + std::to_string(i)));
  return params;
}

std::vector<double> average_attention_map(const ConvBertModel& model, std::span<const std::int64_t> ids) {
  NoGradGuard no_grad;
  std::vector<Tensor> maps;
  model.forward(ids, {}, {}, &maps);
  const std::size_t n = ids.size();
  // Mean as first map plus mean deviation from it, so identical maps
  // average to themselves without rounding.
  const auto first = maps.front().data().subspan(0, n * n);
  std::vector<double> deviation(n * n, 0.0);
  std::size_t count = 0;
  for (const Tensor& m : maps) {
    const std::size_t heads = m.dim(0);
    auto v = m.data();
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n * n; ++i) deviation[i] += v[h * n * n + i] - first[i];
    }
    count += heads;
  }
  std::vector<double> avg(n * n);
  for (std::size_t i = 0; i < n * n; ++i) avg[i] = first[i] + deviation[i] / static_cast<double>(count);
  return avg;
}

}  // namespace convbert
