#include "convbert/pretrain.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>

#include "convbert/errors.hpp"
#include "convbert/ops.hpp"

namespace convbert {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<std::string> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open corpus '" + path + "'");
  std::vector<std::string> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (!tokenize(line).empty()) docs.push_back(line);
  }
  return docs;
}

Vocab::Vocab() {
  for (const char* t : {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"}) add(t);
}

void Vocab::add(const std::string& token) {
  index_.emplace(token, static_cast<std::int64_t>(tokens_.size()));
  tokens_.push_back(token);
}

Vocab Vocab::build(const std::vector<std::string>& documents, std::size_t max_size) {
  if (max_size <= kReserved) throw ConfigError("vocabulary cap must exceed the reserved tokens");
  std::map<std::string, std::size_t> freq;
  for (const std::string& doc : documents) {
    for (std::string& t : tokenize(doc)) ++freq[std::move(t)];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [token, count] : ranked) {
    if (v.size() >= max_size) break;
    if (!v.index_.contains(token)) v.add(token);
  }
  return v;
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open vocabulary '" + path + "'");
  Vocab v;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (n < kReserved) {
      if (line != v.tokens_[n]) throw InputError("vocabulary '" + path + "' does not start with the reserved tokens");
    } else {
      v.add(line);
    }
    ++n;
  }
  return v;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write vocabulary '" + path + "'");
  for (const std::string& t : tokens_) out << t << '\n';
}

const std::string& Vocab::token(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw InputError("token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::int64_t Vocab::id(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::int64_t> Vocab::encode(std::string_view text, std::size_t max_len) const {
  if (max_len < 2) throw ConfigError("max sequence length must leave room for [CLS] and [SEP]");
  std::vector<std::int64_t> ids{kCls};
  for (const std::string& t : tokenize(text)) {
    if (ids.size() + 1 >= max_len) break;
    ids.push_back(id(t));
  }
  ids.push_back(kSep);
  return ids;
}

MlmExample mask_tokens(std::span<const std::int64_t> seq, double rate, std::size_t vocab_size, Rng& rng) {
  if (rate < 0.0 || rate > 1.0) throw ConfigError("mask rate must lie in [0, 1]");
  if (std::none_of(seq.begin(), seq.end(), [](std::int64_t t) { return !Vocab::is_special(t); })) {
    throw InputError("sequence has no maskable token");
  }
  if (vocab_size <= Vocab::kReserved) throw ConfigError("vocabulary has no ordinary tokens");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::int64_t> random_token(static_cast<std::int64_t>(Vocab::kReserved),
                                                           static_cast<std::int64_t>(vocab_size) - 1);
  MlmExample ex;
  ex.input.assign(seq.begin(), seq.end());
  ex.targets.assign(seq.size(), -1);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (Vocab::is_special(seq[i]) || !(u(rng) < rate)) continue;
    ex.targets[i] = seq[i];
    ++ex.masked;
    const double r = u(rng);
    if (r < 0.8) ex.input[i] = Vocab::kMask;
    else if (r < 0.9) ex.input[i] = random_token(rng);
  }
  return ex;
}

RtdExample rtd_fill(std::span<const std::int64_t> original, MlmExample masked, std::span<const double> probs,
                    std::size_t vocab, Rng& rng) {
  if (masked.targets.size() != original.size()) throw DimensionError("rtd_fill: example does not match sequence");
  if (probs.size() != masked.masked * vocab) throw DimensionError("rtd_fill: expected one probability row per masked position");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RtdExample ex;
  ex.corrupted.assign(original.begin(), original.end());
  ex.labels.assign(original.size(), 0.0);
  std::size_t row = 0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    if (masked.targets[i] < 0) continue;
    const auto p = probs.subspan(row++ * vocab, vocab);
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    const double r = u(rng) * total;
    double acc = 0.0;
    std::size_t pick = vocab - 1;
    for (std::size_t t = 0; t < vocab; ++t) {
      acc += p[t];
      if (r < acc) {
        pick = t;
        break;
      }
    }
    ex.corrupted[i] = static_cast<std::int64_t>(pick);
    ex.labels[i] = ex.corrupted[i] != original[i] ? 1.0 : 0.0;
  }
  ex.masked = std::move(masked);
  return ex;
}

LossValues pretrain_losses(std::span<const double> mlm_logits, std::size_t vocab, std::span<const std::int64_t> targets,
                           std::span<const double> rtd_logits, std::span<const double> rtd_labels,
                           std::span<const double> rtd_weights, double lambda) {
  if (mlm_logits.size() != targets.size() * vocab) throw DimensionError("pretrain_losses: MLM logits do not match targets");
  if (rtd_logits.size() != rtd_labels.size() || rtd_logits.size() != rtd_weights.size()) {
    throw DimensionError("pretrain_losses: RTD logits, labels and weights differ in length");
  }
  LossValues out;
  double ce = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0) continue;
    const auto row = mlm_logits.subspan(i * vocab, vocab);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double x : row) z += std::exp(x - mx);
    ce += mx + std::log(z) - row[static_cast<std::size_t>(targets[i])];
    ++count;
  }
  out.no_masked = count == 0;
  out.mlm = count == 0 ? 0.0 : ce / static_cast<double>(count);
  double bce = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < rtd_logits.size(); ++i) {
    if (rtd_weights[i] == 0.0) continue;
    const double x = rtd_logits[i], y = rtd_labels[i];
    // log(1 + e^x) - y x, evaluated without overflow
    bce += rtd_weights[i] * (std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))) - y * x);
    wsum += rtd_weights[i];
  }
  out.rtd = wsum == 0.0 ? 0.0 : bce / wsum;
  out.joint = out.mlm + lambda * out.rtd;
  return out;
}

LrValue lr_schedule(std::size_t step, std::size_t warmup, std::size_t total) {
  if (step > total) return {0.0, true};
  if (step < warmup) return {static_cast<double>(step) / static_cast<double>(warmup), false};
  if (total == warmup) return {1.0, false};
  return {static_cast<double>(total - step) / static_cast<double>(total - warmup), false};
}

namespace {

bool decays(const std::string& name) {
  return !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"));
}

}  // namespace

Adam::Adam(const ParameterList& params, AdamOptions options) : options_(options) {
  std::vector<std::uintptr_t> seen;
  for (const auto& [name, t] : params.entries()) {
    if (std::find(seen.begin(), seen.end(), t.id()) != seen.end()) continue;
    seen.push_back(t.id());
    tensors_.push_back(t);
    names_.push_back(name);
    decay_.push_back(decays(name));
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ContractError("Adam: learning rate must be finite and >= 0");
  for (std::size_t p = 0; p < tensors_.size(); ++p) {
    if (!tensors_[p].has_grad()) continue;
    const auto g = tensors_[p].grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw EvaluationError("Adam: non-finite gradient in '" + names_[p] + "' at coordinate " + std::to_string(i) +
                              "; step rejected");
      }
    }
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(options_.beta1, t), c2 = 1.0 - std::pow(options_.beta2, t);
  for (std::size_t p = 0; p < tensors_.size(); ++p) {
    if (!tensors_[p].has_grad()) continue;
    const auto g = tensors_[p].grad();
    auto w = tensors_[p].mutable_data();
    auto& m = m_[p];
    auto& v = v_[p];
    const double wd = decay_[p] ? options_.weight_decay : 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.eps) + wd * w[i];
      w[i] -= lr * update;
    }
  }
}

MlmHead::MlmHead(const ModelConfig& cfg, Rng& rng)
    : transform(cfg.d, cfg.d_emb, rng), norm(cfg.d_emb), bias(constant_parameter({cfg.vocab_size}, 0.0)) {}

Tensor MlmHead::operator()(const Tensor& hidden, const Tensor& word_table) const {
  return add_row_bias(matmul(norm(gelu(transform(hidden))), transpose(word_table)), bias);
}

void MlmHead::collect(ParameterList& params, const std::string& prefix) const {
  transform.collect(params, prefix + ".transform");
  norm.collect(params, prefix + ".norm");
  params.add(prefix + ".bias", bias);
}

RtdHead::RtdHead(const ModelConfig& cfg, Rng& rng) : dense(cfg.d, cfg.d, rng), out(cfg.d, 1, rng) {}

Tensor RtdHead::operator()(const Tensor& hidden) const { return out(gelu(dense(hidden))); }

void RtdHead::collect(ParameterList& params, const std::string& prefix) const {
  dense.collect(params, prefix + ".dense");
  out.collect(params, prefix + ".out");
}

namespace {

struct MaskedRows {
  std::vector<std::int64_t> rows;
  std::vector<std::int64_t> targets;
};

MaskedRows masked_rows(const MlmExample& ex) {
  MaskedRows out;
  for (std::size_t i = 0; i < ex.targets.size(); ++i) {
    if (ex.targets[i] < 0) continue;
    out.rows.push_back(static_cast<std::int64_t>(i));
    out.targets.push_back(ex.targets[i]);
  }
  return out;
}

// Logits of the MLM head at the selected rows only.
Tensor masked_logits(const ConvBertModel& enc, const MlmHead& head, const MlmExample& ex, const MaskedRows& mr) {
  Tensor h = enc.forward(ex.input);
  return head(gather_rows(h, mr.rows), enc.embeddings().word);
}

std::vector<double> row_softmax(std::span<const double> logits, std::size_t vocab) {
  std::vector<double> p(logits.begin(), logits.end());
  for (std::size_t r = 0; r * vocab < p.size(); ++r) {
    double* row = &p[r * vocab];
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t t = 0; t < vocab; ++t) z += (row[t] = std::exp(row[t] - mx));
    for (std::size_t t = 0; t < vocab; ++t) row[t] /= z;
  }
  return p;
}

}  // namespace

RtdExample rtd_make_example(const ConvBertModel& generator, const MlmHead& head, std::span<const std::int64_t> seq,
                            double rate, Rng& rng) {
  MlmExample masked = mask_tokens(seq, rate, generator.config().vocab_size, rng);
  std::vector<double> probs;
  if (masked.masked > 0) {
    NoGradGuard no_grad;
    const MaskedRows mr = masked_rows(masked);
    const Tensor logits = masked_logits(generator, head, masked, mr);
    probs = row_softmax(logits.data(), generator.config().vocab_size);
  }
  return rtd_fill(seq, std::move(masked), probs, generator.config().vocab_size, rng);
}

Objective parse_objective(std::string_view name) {
  if (name == "mlm") return Objective::Mlm;
  if (name == "rtd") return Objective::Rtd;
  throw InputError("unknown objective '" + std::string(name) + "' (expected mlm or rtd)");
}

Pretrainer::Pretrainer(const ModelConfig& cfg, Objective objective, const PretrainOptions& options)
    : config_(cfg),
      objective_(objective),
      options_(options),
      rng_(options.seed),
      model_(config_, rng_),
      optimizer_(ParameterList{}, options.adam) {
  if (objective_ == Objective::Mlm) {
    mlm_head_ = MlmHead(config_, rng_);
  } else {
    rtd_head_ = RtdHead(config_, rng_);
    generator_config_ = generator_config(config_, options_.generator_multiplier);
    generator_ = ConvBertModel(generator_config_, rng_);
    if (options_.share_embeddings) generator_.embeddings().word = model_.embeddings().word;
    generator_head_ = MlmHead(generator_config_, rng_);
  }
  params_ = parameters();
  optimizer_ = Adam(params_, options_.adam);
}

ParameterList Pretrainer::parameters() const {
  ParameterList params = model_.parameters();
  if (objective_ == Objective::Mlm) {
    mlm_head_.collect(params, "mlm_head");
  } else {
    rtd_head_.collect(params, "rtd_head");
    params.append(generator_.parameters("generator"));
    generator_head_.collect(params, "generator_head");
  }
  return params;
}

StepMetrics Pretrainer::step(const std::vector<std::vector<std::int64_t>>& batch, std::size_t total) {
  if (batch.empty()) throw InputError("empty batch");
  params_.zero_grad();
  const std::size_t vocab = config_.vocab_size;
  const double lambda = options_.rtd_weight;

  // Corrupt the whole batch first so the loss weights are known.
  std::vector<MlmExample> examples;
  std::size_t masked_total = 0, positions_total = 0;
  for (const auto& seq : batch) {
    examples.push_back(mask_tokens(seq, options_.mask_rate, vocab, rng_));
    masked_total += examples.back().masked;
    positions_total += seq.size();
  }

  double mlm_sum = 0.0, rtd_sum = 0.0;
  const ConvBertModel& mlm_model = objective_ == Objective::Mlm ? model_ : generator_;
  const MlmHead& mlm_head = objective_ == Objective::Mlm ? mlm_head_ : generator_head_;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const MlmExample& ex = examples[b];
    const MaskedRows mr = masked_rows(ex);
    Tensor loss;
    std::vector<std::int64_t> corrupted = batch[b];
    std::vector<double> labels(batch[b].size(), 0.0);
    if (ex.masked > 0) {
      Tensor logits = masked_logits(mlm_model, mlm_head, ex, mr);
      Tensor ce = cross_entropy(logits, mr.targets);
      mlm_sum += ce.item() * static_cast<double>(ex.masked);
      loss = scale(ce, static_cast<double>(ex.masked) / static_cast<double>(masked_total));
      if (objective_ == Objective::Rtd) {
        const RtdExample rtd = rtd_fill(batch[b], ex, row_softmax(logits.data(), vocab), vocab, rng_);
        corrupted = rtd.corrupted;
        labels = rtd.labels;
      }
    }
    if (objective_ == Objective::Rtd) {
      const std::vector<double> weights(corrupted.size(), 1.0);
      Tensor bce = bce_with_logits(rtd_head_(model_.forward(corrupted)), labels, weights);
      rtd_sum += bce.item() * static_cast<double>(corrupted.size());
      Tensor term = scale(bce, lambda * static_cast<double>(corrupted.size()) / static_cast<double>(positions_total));
      loss = loss.defined() ? add(loss, term) : term;
    }
    if (loss.defined() && loss.requires_grad()) backward(loss);
  }

  const std::size_t t = optimizer_.steps() + 1;
  const auto warmup = static_cast<std::size_t>(std::llround(options_.warmup_fraction * static_cast<double>(total)));
  const LrValue sched = lr_schedule(t, warmup, total);
  if (sched.clamped) std::cerr << "warning: step " << t << " beyond schedule total " << total << "; lr clamped to 0\n";
  const double lr = options_.learning_rate * sched.multiplier;
  optimizer_.step(lr);

  StepMetrics m;
  m.step = t;
  m.lr = lr;
  m.no_masked = masked_total == 0;
  m.mlm_loss = masked_total == 0 ? 0.0 : mlm_sum / static_cast<double>(masked_total);
  m.rtd_loss = objective_ == Objective::Rtd ? rtd_sum / static_cast<double>(positions_total) : 0.0;
  m.joint_loss = m.mlm_loss + (objective_ == Objective::Rtd ? lambda * m.rtd_loss : 0.0);
  metrics_.push_back(m);
  return m;
}

double Pretrainer::evaluate_mlm(const std::vector<MlmExample>& examples) const {
  NoGradGuard no_grad;
  const ConvBertModel& enc = objective_ == Objective::Mlm ? model_ : generator_;
  const MlmHead& head = objective_ == Objective::Mlm ? mlm_head_ : generator_head_;
  double total = 0.0;
  std::size_t count = 0;
  for (const MlmExample& ex : examples) {
    if (ex.masked == 0) continue;
    const MaskedRows mr = masked_rows(ex);
    total += cross_entropy(masked_logits(enc, head, ex, mr), mr.targets).item() * static_cast<double>(ex.masked);
    count += ex.masked;
  }
  if (count == 0) throw InputError("evaluate_mlm: no masked positions");
  return total / static_cast<double>(count);
}

RtdEvaluation Pretrainer::evaluate_rtd(const std::vector<std::vector<std::int64_t>>& corpus, std::size_t passes,
                                       Rng& rng) const {
  if (objective_ != Objective::Rtd) throw ContractError("evaluate_rtd needs an RTD trainer");
  NoGradGuard no_grad;
  RtdEvaluation eval;
  for (std::size_t pass = 0; pass < passes; ++pass) {
    for (const auto& seq : corpus) {
      const RtdExample ex = rtd_make_example(generator_, generator_head_, seq, options_.mask_rate, rng);
      const Tensor logits = rtd_head_(model_.forward(ex.corrupted));
      for (std::size_t i = 0; i < seq.size(); ++i) {
        const bool predicted = logits.at(i) > 0.0;
        if (ex.labels[i] == 1.0) {
          ++eval.replaced;
          eval.replaced_correct += predicted ? 1 : 0;
        } else {
          ++eval.original;
          eval.original_correct += predicted ? 0 : 1;
        }
      }
    }
  }
  return eval;
}

std::vector<StepMetrics> train_loop(Pretrainer& trainer, const std::vector<std::vector<std::int64_t>>& corpus,
                                    std::size_t steps) {
  const std::size_t batch_size = trainer.batch_size();
  if (corpus.size() < batch_size) {
    throw InputError("corpus has " + std::to_string(corpus.size()) + " sequences, fewer than one batch of " +
                     std::to_string(batch_size));
  }
  std::vector<StepMetrics> log;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  std::vector<std::vector<std::int64_t>> batch;
  for (std::size_t s = 0; s < steps; ++s) {
    batch.clear();
    while (batch.size() < batch_size) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), trainer.rng());
        cursor = 0;
      }
      batch.push_back(corpus[order[cursor++]]);
    }
    log.push_back(trainer.step(batch, steps));
  }
  return log;
}

void write_metrics_csv(const std::string& path, const std::vector<StepMetrics>& metrics) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write metrics '" + path + "'");
  out.precision(17);
  out << "step,lr,mlm_loss,rtd_loss,joint_loss\n";
  for (const StepMetrics& m : metrics) {
    out << m.step << ',' << m.lr << ',' << m.mlm_loss << ',' << m.rtd_loss << ',' << m.joint_loss << '\n';
  }
}

std::optional<std::string> matching_preset(const ModelConfig& cfg) {
  for (const std::string& name : ModelConfig::preset_names()) {
    ModelConfig p = ModelConfig::preset(name, cfg.variant);
    p.vocab_size = cfg.vocab_size;
    p.max_positions = cfg.max_positions;
    p.type_vocab = cfg.type_vocab;
    if (p == cfg) return name;
  }
  return std::nullopt;
}

}  // namespace convbert
