#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "convbert/errors.hpp"
#include "convbert/ops.hpp"
#include "convbert/pretrain.hpp"
#include "convbert/verify.hpp"
#include "helpers.hpp"

using namespace convbert;
using testing::randn;

namespace {

std::vector<std::int64_t> ten_tokens() { return {Vocab::kCls, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, Vocab::kSep}; }

std::vector<double> one_hot_rows(const std::vector<std::int64_t>& tokens, std::size_t vocab) {
  std::vector<double> p(tokens.size() * vocab, 0.0);
  for (std::size_t r = 0; r < tokens.size(); ++r) p[r * vocab + static_cast<std::size_t>(tokens[r])] = 1.0;
  return p;
}

}  // namespace

TEST_CASE("tokenizer and vocabulary") {
  CHECK(tokenize("  The CAT\tsat\n") == std::vector<std::string>{"the", "cat", "sat"});
  const Vocab v = Vocab::build({"b a c a", "c a"}, 7);
  CHECK(v.size() == 7);
  CHECK(v.token(Vocab::kPad) == "[PAD]");
  CHECK(v.token(Vocab::kMask) == "[MASK]");
  CHECK(v.id("a") == 5);
  CHECK(v.id("c") == 6);
  CHECK(v.id("b") == Vocab::kUnk);
  CHECK(v.encode("A c zz", 10) == std::vector<std::int64_t>{Vocab::kCls, 5, 6, Vocab::kUnk, Vocab::kSep});
  CHECK(v.encode("a a a a a", 4).size() == 4);
  const std::string path = (std::filesystem::temp_directory_path() / "convbert_unit_vocab.txt").string();
  v.save(path);
  const Vocab back = Vocab::load(path);
  CHECK(back.size() == v.size());
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(v.size()); ++i) CHECK(back.token(i) == v.token(i));
  std::filesystem::remove(path);
}

TEST_CASE("mask_tokens edge rates") {
  Rng rng(1);
  const auto seq = ten_tokens();
  const MlmExample none = mask_tokens(seq, 0.0, 30, rng);
  CHECK(none.input == seq);
  CHECK(none.masked == 0);
  const MlmExample all = mask_tokens(seq, 1.0, 30, rng);
  CHECK(all.masked == 10);
  for (std::size_t i = 1; i <= 10; ++i) CHECK(all.targets[i] == seq[i]);
  CHECK(all.targets.front() == -1);
  CHECK(all.targets.back() == -1);
  const std::vector<std::int64_t> special = {Vocab::kCls, Vocab::kSep};
  CHECK_THROWS_AS(mask_tokens(special, 0.15, 30, rng), InputError);
}

TEST_CASE("mask_tokens rate and corruption split over many samples") {
  Rng rng(2);
  const auto seq = ten_tokens();
  std::size_t masked = 0, total = 0, as_mask = 0, kept = 0;
  for (int s = 0; s < 10000; ++s) {
    const MlmExample ex = mask_tokens(seq, 0.15, 30, rng);
    masked += ex.masked;
    total += 10;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (ex.targets[i] < 0) {
        CHECK(ex.input[i] == seq[i]);
        continue;
      }
      if (ex.input[i] == Vocab::kMask) ++as_mask;
      if (ex.input[i] == seq[i]) ++kept;
      CHECK(ex.input[i] >= 3);
    }
  }
  const double rate = double(masked) / double(total);
  CHECK(rate > 0.14);
  CHECK(rate < 0.16);
  CHECK(double(as_mask) / double(masked) == doctest::Approx(0.8).epsilon(0.03));
  // kept covers the explicit 10% plus random draws that hit the original
  CHECK(double(kept) / double(masked) == doctest::Approx(0.1 + 0.1 / 25.0).epsilon(0.15));
}

TEST_CASE("rtd labels for fixed generators") {
  Rng rng(3);
  const auto seq = ten_tokens();
  const std::size_t vocab = 30;
  MlmExample masked = mask_tokens(seq, 0.5, vocab, rng);
  REQUIRE(masked.masked > 0);
  std::vector<std::int64_t> originals, wrong;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (masked.targets[i] < 0) continue;
    originals.push_back(seq[i]);
    wrong.push_back(seq[i] == 20 ? 21 : 20);
  }
  const RtdExample right = rtd_fill(seq, masked, one_hot_rows(originals, vocab), vocab, rng);
  for (double l : right.labels) CHECK(l == 0.0);
  CHECK(right.corrupted == seq);
  const RtdExample bad = rtd_fill(seq, masked, one_hot_rows(wrong, vocab), vocab, rng);
  for (std::size_t i = 0; i < seq.size(); ++i) CHECK(bad.labels[i] == (masked.targets[i] >= 0 ? 1.0 : 0.0));
}

TEST_CASE("rtd labels from a random generator match recomputation") {
  ModelConfig cfg = ModelConfig::preset("tiny", Variant::BottleneckConv);
  Rng rng(4);
  const ConvBertModel gen(cfg, rng);
  const MlmHead head(cfg, rng);
  std::vector<std::int64_t> seq = {Vocab::kCls};
  for (int i = 0; i < 20; ++i) seq.push_back(5 + (i * 7) % 50);
  seq.push_back(Vocab::kSep);
  for (int trial = 0; trial < 10; ++trial) {
    const RtdExample ex = rtd_make_example(gen, head, seq, 0.3, rng);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      CHECK(ex.labels[i] == (ex.corrupted[i] != seq[i] ? 1.0 : 0.0));
      if (ex.masked.targets[i] < 0) CHECK(ex.corrupted[i] == seq[i]);
    }
  }
}

TEST_CASE("loss values against closed forms") {
  const std::size_t vocab = 17;
  const std::vector<double> uniform(3 * vocab, 0.25);
  const std::vector<std::int64_t> targets = {4, -1, 9};
  const std::vector<double> zeros(3, 0.0), labels = {1, 0, 1}, weights = {1, 1, 1};
  const LossValues lv = pretrain_losses(uniform, vocab, targets, zeros, labels, weights, 50.0);
  CHECK(lv.mlm == doctest::Approx(std::log(17.0)).epsilon(1e-14));
  CHECK(lv.rtd == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(lv.joint == doctest::Approx(std::log(17.0) + 50.0 * std::log(2.0)).epsilon(1e-14));

  // Hand case: 3 tokens, vocab 2.
  const std::vector<double> logits = {2.0, 0.0, 0.0, 1.0, -1.0, 3.0};
  const std::vector<std::int64_t> t3 = {0, 1, -1};
  const std::vector<double> r_logits = {0.5, -2.0, 1.0}, r_labels = {1, 0, 0}, r_w = {1, 1, 0};
  const LossValues h = pretrain_losses(logits, 2, t3, r_logits, r_labels, r_w, 2.0);
  const double ce0 = -2.0 + std::log(std::exp(2.0) + 1.0);
  const double ce1 = -1.0 + std::log(1.0 + std::exp(1.0));
  const double b0 = std::log(1.0 + std::exp(-0.5));
  const double b1 = std::log(1.0 + std::exp(-2.0));
  CHECK(std::abs(h.mlm - (ce0 + ce1) / 2.0) < 1e-12);
  CHECK(std::abs(h.rtd - (b0 + b1) / 2.0) < 1e-12);
  CHECK(std::abs(h.joint - (h.mlm + 2.0 * h.rtd)) < 1e-12);

  const std::vector<std::int64_t> no_targets = {-1, -1, -1};
  const LossValues empty = pretrain_losses(logits, 2, no_targets, r_logits, r_labels, r_w, 2.0);
  CHECK(empty.no_masked);
  CHECK(empty.mlm == 0.0);
}

TEST_CASE("autodiff losses agree with the scalar forms") {
  Rng rng(5);
  const Tensor logits = randn(rng, {4, 6});
  const std::vector<std::int64_t> targets = {2, -1, 5, 0};
  const Tensor r = randn(rng, {4, 1});
  const std::vector<double> labels = {1, 0, 1, 0}, weights = {1, 1, 1, 0};
  const LossValues lv = pretrain_losses(logits.data(), 6, targets, r.data(), labels, weights, 1.0);
  CHECK(std::abs(cross_entropy(logits, targets).item() - lv.mlm) < 1e-12);
  CHECK(std::abs(bce_with_logits(r, labels, weights).item() - lv.rtd) < 1e-12);
}

TEST_CASE("learning-rate schedule") {
  CHECK(lr_schedule(0, 100, 1000).multiplier == 0.0);
  CHECK(lr_schedule(100, 100, 1000).multiplier == 1.0);
  CHECK(lr_schedule(50, 100, 1000).multiplier == 0.5);
  const std::size_t mid = (100 + 1000) / 2;
  CHECK(lr_schedule(mid, 100, 1000).multiplier == doctest::Approx(double(1000 - mid) / 900.0).epsilon(1e-15));
  CHECK(lr_schedule(1000, 100, 1000).multiplier == 0.0);
  const LrValue over = lr_schedule(1001, 100, 1000);
  CHECK(over.multiplier == 0.0);
  CHECK(over.clamped);
}

TEST_CASE("Adam single step, limit and scalar oracle") {
  AdamOptions opts;
  opts.weight_decay = 0.0;
  {
    ParameterList params;
    const Tensor w = Tensor::from({2}, {1.0, -1.0}, true);
    params.add("w", w);
    Adam adam(params, opts);
    backward(sum(mul(w, Tensor::from({2}, {0.3, -4.0}))));
    adam.step(0.1);
    CHECK(std::abs(w.at(0) - (1.0 - 0.1 * 0.3 / (0.3 + 1e-6))) < 1e-15);
    CHECK(std::abs(w.at(1) - (-1.0 + 0.1 * 4.0 / (4.0 + 1e-6))) < 1e-15);
  }
  {
    ParameterList params;
    const Tensor w = Tensor::from({1}, {0.0}, true);
    params.add("w", w);
    Adam adam(params, opts);
    double prev = 0.0, step_size = 0.0;
    for (int i = 0; i < 3000; ++i) {
      Tensor(w).zero_grad();
      backward(scale(sum(w), 2.5));
      adam.step(0.01);
      step_size = prev - w.at(0);
      prev = w.at(0);
    }
    CHECK(step_size == doctest::Approx(0.01).epsilon(1e-6));
  }
  {
    // Quadratic 0.5 * a * (w - c)^2 with weight decay, against a scalar loop.
    AdamOptions wd = opts;
    wd.weight_decay = 0.01;
    ParameterList params;
    const Tensor w = Tensor::from({1}, {2.0}, true);
    params.add("w", w);
    Adam adam(params, wd);
    const double a = 3.0, c = -0.5, lr = 0.05;
    double x = 2.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 10; ++t) {
      Tensor(w).zero_grad();
      const Tensor diff = sub(w, Tensor::from({1}, {c}));
      backward(scale(sum(mul(diff, diff)), 0.5 * a));
      adam.step(lr);
      const double g = a * (x - c);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
      x = x - lr * (mh / (std::sqrt(vh) + 1e-6) + 0.01 * x);
      CHECK(std::abs(w.at(0) - x) < 1e-12);
    }
  }
}

TEST_CASE("Adam rejects non-finite gradients and skips decay on norms and biases") {
  ParameterList params;
  const Tensor w = Tensor::from({1}, {1.0}, true), b = Tensor::from({1}, {1.0}, true);
  params.add("layer.weight", w);
  params.add("layer.bias", b);
  Adam adam(params, AdamOptions{});
  Tensor(w).grad_sink()[0] = NAN;
  CHECK_THROWS_AS(adam.step(0.1), EvaluationError);
  CHECK(w.at(0) == 1.0);
  CHECK(adam.steps() == 0);
  Tensor(w).grad_sink()[0] = 0.0;
  Tensor(b).grad_sink()[0] = 0.0;
  adam.step(0.1);
  CHECK(w.at(0) == doctest::Approx(1.0 - 0.1 * 0.01));
  CHECK(b.at(0) == 1.0);
}

TEST_CASE("MLM loss at initialization is near ln V") {
  const ModelConfig cfg = ModelConfig::preset("tiny", Variant::BottleneckConv);
  PretrainOptions opts;
  Pretrainer trainer(cfg, Objective::Mlm, opts);
  Rng rng(6);
  std::vector<MlmExample> examples;
  for (int s = 0; s < 20; ++s) {
    std::vector<std::int64_t> seq = {Vocab::kCls};
    for (int i = 0; i < 12; ++i) seq.push_back(5 + static_cast<std::int64_t>(rng() % (cfg.vocab_size - 5)));
    seq.push_back(Vocab::kSep);
    examples.push_back(mask_tokens(seq, 0.3, cfg.vocab_size, rng));
  }
  const double loss = trainer.evaluate_mlm(examples);
  CHECK(std::abs(loss - std::log(double(cfg.vocab_size))) < 0.05 * std::log(double(cfg.vocab_size)));
}

TEST_CASE("train loop contracts and determinism") {
  const auto docs = verify::chain_corpus(8, 20, 10, 3);
  const Vocab vocab = Vocab::build(docs, 100);
  ModelConfig cfg = ModelConfig::preset("tiny", Variant::BottleneckConv);
  cfg.vocab_size = vocab.size();
  std::vector<std::vector<std::int64_t>> corpus;
  for (const auto& d : docs) corpus.push_back(vocab.encode(d, 64));

  PretrainOptions opts;
  opts.batch_size = 4;
  for (Objective obj : {Objective::Mlm, Objective::Rtd}) {
    Pretrainer a(cfg, obj, opts), b(cfg, obj, opts), idle(cfg, obj, opts);
    const ParameterList before = idle.parameters();
    std::vector<double> snapshot;
    for (const Tensor& t : before.unique_tensors()) snapshot.insert(snapshot.end(), t.data().begin(), t.data().end());
    CHECK(train_loop(idle, corpus, 0).empty());
    std::vector<double> after;
    for (const Tensor& t : before.unique_tensors()) after.insert(after.end(), t.data().begin(), t.data().end());
    CHECK(snapshot == after);

    const auto la = train_loop(a, corpus, 6), lb = train_loop(b, corpus, 6);
    CHECK(la.size() == 6);
    CHECK(verify::same_metrics(la, lb));
    for (const StepMetrics& m : la) {
      CHECK(std::isfinite(m.joint_loss));
      if (obj == Objective::Mlm) CHECK(m.rtd_loss == 0.0);
    }
  }
  opts.batch_size = 9;
  Pretrainer big(cfg, Objective::Mlm, opts);
  CHECK_THROWS_AS(train_loop(big, corpus, 1), InputError);
}

TEST_CASE("generator shares the word table when asked") {
  const ModelConfig cfg = ModelConfig::preset("tiny", Variant::BottleneckConv);
  PretrainOptions opts;
  const Pretrainer shared(cfg, Objective::Rtd, opts);
  CHECK(shared.generator().embeddings().word.id() == shared.model().embeddings().word.id());
  CHECK(shared.generator().config().d < cfg.d);
  opts.share_embeddings = false;
  const Pretrainer separate(cfg, Objective::Rtd, opts);
  CHECK(separate.generator().embeddings().word.id() != separate.model().embeddings().word.id());
}
