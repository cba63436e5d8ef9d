#pragma once

// Desk-scale pretraining: toy tokenizer, masked language modelling,
// replaced-token detection with a jointly trained generator, Adam with
// decoupled weight decay and a linear warmup/decay schedule.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "convbert/config.hpp"
#include "convbert/model.hpp"
#include "convbert/nn.hpp"

namespace convbert {

std::vector<std::string> tokenize(std::string_view text);
// Non-empty lines of a UTF-8 file.
std::vector<std::string> read_corpus(const std::string& path);

class Vocab {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kCls = 1;
  static constexpr std::int64_t kSep = 2;
  static constexpr std::int64_t kMask = 3;
  static constexpr std::int64_t kUnk = 4;
  static constexpr std::size_t kReserved = 5;

  Vocab();
  // Reserved tokens first, then corpus tokens by descending frequency (ties
  // broken lexicographically) until `max_size` entries.
  static Vocab build(const std::vector<std::string>& documents, std::size_t max_size);
  static Vocab load(const std::string& path);
  void save(const std::string& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::int64_t id) const;
  std::int64_t id(const std::string& token) const;
  // [CLS] tokens [SEP], truncated to max_len ids in total.
  std::vector<std::int64_t> encode(std::string_view text, std::size_t max_len) const;

  static bool is_special(std::int64_t id) { return id >= 0 && id < static_cast<std::int64_t>(kReserved); }

 private:
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> index_;
};

struct MlmExample {
  std::vector<std::int64_t> input;    // after corruption
  std::vector<std::int64_t> targets;  // original id at selected positions, -1 elsewhere
  std::size_t masked = 0;
};

// Each non-special position is selected with probability `rate`; selected
// positions become MASK (80%), a random non-special token (10%) or stay
// unchanged (10%).
MlmExample mask_tokens(std::span<const std::int64_t> seq, double rate, std::size_t vocab_size, Rng& rng);

struct RtdExample {
  MlmExample masked;                   // generator input and targets
  std::vector<std::int64_t> corrupted; // discriminator input
  std::vector<double> labels;          // 1 where corrupted differs from the original
};

// Fills the selected positions with draws from `probs`, one row of `vocab`
// probabilities per selected position in position order, and labels the
// replacements.
RtdExample rtd_fill(std::span<const std::int64_t> original, MlmExample masked, std::span<const double> probs,
                    std::size_t vocab, Rng& rng);

struct LossValues {
  double mlm = 0.0;
  double rtd = 0.0;
  double joint = 0.0;
  bool no_masked = false;  // mlm term defined as 0
};

// Scalar form of the objective: mean cross-entropy over rows with a target
// >= 0, mean binary cross-entropy over rows with weight != 0, and
// joint = mlm + lambda * rtd.
LossValues pretrain_losses(std::span<const double> mlm_logits, std::size_t vocab, std::span<const std::int64_t> targets,
                           std::span<const double> rtd_logits, std::span<const double> rtd_labels,
                           std::span<const double> rtd_weights, double lambda);

struct LrValue {
  double multiplier = 0.0;
  bool clamped = false;  // step was beyond total
};

// Linear ramp 0 -> 1 over `warmup`, then linear decay to 0 at `total`.
LrValue lr_schedule(std::size_t step, std::size_t warmup, std::size_t total);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
};

// Adam with bias correction. Weight decay is decoupled and skips biases and
// layer-norm parameters.
class Adam {
 public:
  Adam(const ParameterList& params, AdamOptions options);

  // Throws EvaluationError, leaving parameters untouched, when a gradient is
  // not finite.
  void step(double lr);
  std::size_t steps() const { return steps_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<Tensor> tensors_;
  std::vector<std::string> names_;
  std::vector<bool> decay_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamOptions options_;
  std::size_t steps_ = 0;
};

// Output layer predicting vocabulary ids, tied to a word-embedding table.
struct MlmHead {
  Linear transform;  // d -> d_emb
  LayerNorm norm;
  Tensor bias;       // [vocab]

  MlmHead() = default;
  MlmHead(const ModelConfig& cfg, Rng& rng);
  Tensor operator()(const Tensor& hidden, const Tensor& word_table) const;
  void collect(ParameterList& params, const std::string& prefix) const;
};

// Per-position replaced/original logit.
struct RtdHead {
  Linear dense;
  Linear out;

  RtdHead() = default;
  RtdHead(const ModelConfig& cfg, Rng& rng);
  Tensor operator()(const Tensor& hidden) const;
  void collect(ParameterList& params, const std::string& prefix) const;
};

// Generator-driven RTD example: mask, run the generator, sample at
// temperature 1.
RtdExample rtd_make_example(const ConvBertModel& generator, const MlmHead& head, std::span<const std::int64_t> seq,
                            double rate, Rng& rng);

enum class Objective { Mlm, Rtd };
Objective parse_objective(std::string_view name);

struct PretrainOptions {
  std::uint64_t seed = 1;
  double learning_rate = 1e-3;
  double warmup_fraction = 0.01;  // 10k of 1M updates
  double mask_rate = 0.15;
  double rtd_weight = 50.0;
  double generator_multiplier = 0.25;
  bool share_embeddings = true;
  std::size_t batch_size = 32;
  AdamOptions adam;
};

struct StepMetrics {
  std::size_t step = 0;
  double lr = 0.0;
  double mlm_loss = 0.0;
  double rtd_loss = 0.0;
  double joint_loss = 0.0;
  bool no_masked = false;
};

struct RtdEvaluation {
  std::size_t replaced = 0;
  std::size_t replaced_correct = 0;
  std::size_t original = 0;
  std::size_t original_correct = 0;
  double replaced_accuracy() const { return replaced == 0 ? 0.0 : double(replaced_correct) / double(replaced); }
  double original_accuracy() const { return original == 0 ? 0.0 : double(original_correct) / double(original); }
};

class Pretrainer {
 public:
  Pretrainer(const ModelConfig& cfg, Objective objective, const PretrainOptions& options);

  Objective objective() const { return objective_; }
  const PretrainOptions& options() const { return options_; }
  std::size_t batch_size() const { return options_.batch_size; }
  const ConvBertModel& model() const { return model_; }
  const ConvBertModel& generator() const { return generator_; }
  const MlmHead& mlm_head() const { return mlm_head_; }
  const MlmHead& generator_head() const { return generator_head_; }
  const RtdHead& rtd_head() const { return rtd_head_; }

  // Main encoder under its plain names, then heads and generator.
  ParameterList parameters() const;
  const std::vector<StepMetrics>& metrics() const { return metrics_; }
  std::size_t steps_done() const { return optimizer_.steps(); }

  // One optimizer update on a batch of encoded sequences; `total` sizes the
  // learning-rate schedule.
  StepMetrics step(const std::vector<std::vector<std::int64_t>>& batch, std::size_t total);

  // Mean masked-token cross-entropy of the MLM path (main model for MLM,
  // generator for RTD) over fixed examples.
  double evaluate_mlm(const std::vector<MlmExample>& examples) const;
  // Discriminator accuracy on generator-corrupted copies of the corpus,
  // `passes` draws per sequence.
  RtdEvaluation evaluate_rtd(const std::vector<std::vector<std::int64_t>>& corpus, std::size_t passes, Rng& rng) const;

  Rng& rng() { return rng_; }

 private:
  ModelConfig config_;
  ModelConfig generator_config_;
  Objective objective_;
  PretrainOptions options_;
  Rng rng_;
  ConvBertModel model_;
  MlmHead mlm_head_;
  RtdHead rtd_head_;
  ConvBertModel generator_;
  MlmHead generator_head_;
  ParameterList params_;
  Adam optimizer_;
  std::vector<StepMetrics> metrics_;
};

// Runs `steps` updates over shuffled batches. Throws InputError when the
// corpus holds fewer sequences than one batch.
std::vector<StepMetrics> train_loop(Pretrainer& trainer, const std::vector<std::vector<std::int64_t>>& corpus,
                                    std::size_t steps);

void write_metrics_csv(const std::string& path, const std::vector<StepMetrics>& metrics);

// Name of the preset whose layer dimensions equal `cfg`, if any. Vocabulary
// and position-table sizes are not compared.
std::optional<std::string> matching_preset(const ModelConfig& cfg);

}  // namespace convbert
