#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <sstream>

#include "convbert/attention.hpp"
#include "convbert/conv_ops.hpp"
#include "convbert/cost.hpp"
#include "convbert/ops.hpp"
#include "convbert/verify.hpp"

namespace convbert::verify {

namespace {

// Gaussian entries with standard deviation `scale`.
Tensor gaussian(Rng& rng, Shape shape, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

double max_kernel_gap(const KernelSet& ks, std::size_t i, std::size_t j) {
  double gap = 0.0;
  for (std::size_t h = 0; h < ks.heads(); ++h)
    for (std::size_t t = 0; t < ks.taps(); ++t) gap = std::max(gap, std::abs(ks.at(i, h, t) - ks.at(j, h, t)));
  return gap;
}

bool kernels_bitwise_equal(const KernelSet& ks, std::size_t i, std::size_t j) {
  const std::size_t width = ks.heads() * ks.taps();
  const double* base = ks.values().data().data();
  return std::memcmp(base + i * width, base + j * width, width * sizeof(double)) == 0;
}

template <typename F>
double best_seconds(std::size_t repetitions, F&& f) {
  double best = INFINITY;
  for (std::size_t r = 0; r < repetitions; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

}  // namespace

DiscriminationResult run_discrimination(std::uint64_t seed, std::size_t draws, double gap) {
  NoGradGuard no_grad;
  DiscriminationResult result;
  result.min_sdconv_gap = INFINITY;
  const std::size_t n = 16, d = 16, heads = 2, dh = d / heads;
  const std::size_t first = 4, second = 11;
  static constexpr std::size_t kTaps[] = {3, 5, 9};
  for (std::size_t draw = 0; draw < draws; ++draw) {
    Rng rng(seed * 104729 + draw);
    const std::size_t k = kTaps[draw % 3];
    const double ks = 1.0 / std::sqrt(static_cast<double>(k));
    const double ds = 1.0 / std::sqrt(static_cast<double>(d));
    const double hs = 1.0 / std::sqrt(static_cast<double>(dh));

    // Same token vector at two positions whose neighbours differ.
    const Tensor drawn = gaussian(rng, {n, d});
    std::vector<double> xv(drawn.data().begin(), drawn.data().end());
    for (std::size_t c = 0; c < d; ++c) xv[second * d + c] = xv[first * d + c];
    const Tensor x = Tensor::from({n, d}, xv);

    KernelGenerator dynamic;
    dynamic.weight = gaussian(rng, {heads, dh, k}, hs);
    dynamic.bias = gaussian(rng, {heads * k});
    const KernelSet dk = dconv_kernels(x, dynamic);

    const Tensor wq = gaussian(rng, {d, d}, ds);
    const Tensor depthwise = gaussian(rng, {d, k}, ks), pointwise = gaussian(rng, {d, d}, ds);
    const Tensor span_bias = gaussian(rng, {d});
    KernelGenerator span_based;
    span_based.weight = gaussian(rng, {heads, dh, k}, hs);
    span_based.bias = gaussian(rng, {heads * k});
    const KernelSet sk = kernel_gen(matmul(x, wq), span_key(x, depthwise, pointwise, span_bias), span_based);

    ++result.draws;
    if (kernels_bitwise_equal(dk, first, second)) ++result.dconv_identical;
    const double g = max_kernel_gap(sk, first, second);
    result.min_sdconv_gap = std::min(result.min_sdconv_gap, g);
    if (g > gap) ++result.sdconv_distinct;
  }
  return result;
}

std::vector<ScalingPoint> measure_scaling(const ModelConfig& cfg, std::span<const std::size_t> lengths,
                                          std::size_t repetitions) {
  NoGradGuard no_grad;
  const MixedAttentionConfig att = cfg.attention();
  const std::size_t width = att.bottleneck_width(), heads = att.attention_heads();
  std::vector<ScalingPoint> points;
  for (const std::size_t n : lengths) {
    ScalingPoint p;
    p.n = n;
    const CostReport cost = count_flops(cfg, n);
    p.attention_madds = cost.layer_madds("attention.scores") + cost.layer_madds("attention.softmax") +
                        cost.layer_madds("attention.context");
    if (att.use_conv) p.sdconv_madds = cost.layer_madds("attention.sdconv");

    Rng rng(n);
    const Tensor q = gaussian(rng, {n, width}), k = gaussian(rng, {n, width}), v = gaussian(rng, {n, width});
    KernelGenerator gen;
    gen.weight = gaussian(rng, {heads, width / heads, att.kernel}, 0.3);
    gen.bias = gaussian(rng, {heads * att.kernel});
    // Each timed sample repeats the call to cover a few million multiply-adds,
    // keeping clock resolution out of the short lengths.
    const std::size_t attention_calls = std::max<std::size_t>(1, 4000000 / (2 * n * n * width));
    const std::size_t sdconv_calls = std::max<std::size_t>(1, 4000000 / (3 * n * width * att.kernel));
    p.attention_seconds = best_seconds(repetitions, [&] {
                            for (std::size_t i = 0; i < attention_calls; ++i) self_attention(q, k, v, heads);
                          }) / static_cast<double>(attention_calls);
    p.sdconv_seconds = best_seconds(repetitions, [&] {
                         for (std::size_t i = 0; i < sdconv_calls; ++i) sdconv(q, k, v, gen);
                       }) / static_cast<double>(sdconv_calls);
    points.push_back(p);
  }
  return points;
}

std::vector<std::string> chain_corpus(std::size_t documents, std::size_t words, std::size_t length,
                                      std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> next(words);
  std::iota(next.begin(), next.end(), 0);
  std::shuffle(next.begin(), next.end(), rng);
  std::vector<std::string> docs;
  for (std::size_t i = 0; i < documents; ++i) {
    std::ostringstream os;
    std::size_t t = rng() % words;
    for (std::size_t j = 0; j < length; ++j) {
      os << 'w' << t << ' ';
      t = next[t];
    }
    docs.push_back(os.str());
  }
  return docs;
}

SmokeSetup default_smoke(Objective objective) {
  SmokeSetup s;
  s.objective = objective;
  if (objective == Objective::Rtd) {
    s.steps = 3000;
    s.learning_rate = 2e-3;
  }
  return s;
}

SmokeResult run_smoke(const SmokeSetup& setup) {
  const std::vector<std::string> docs = chain_corpus(32, 40, 12, 7);
  const Vocab vocab = Vocab::build(docs, 1000);
  ModelConfig cfg = ModelConfig::preset("tiny", Variant::BottleneckConv);
  cfg.vocab_size = vocab.size();
  std::vector<std::vector<std::int64_t>> corpus;
  for (const std::string& doc : docs) corpus.push_back(vocab.encode(doc, cfg.max_positions));

  PretrainOptions options;
  options.learning_rate = setup.learning_rate;
  options.seed = setup.seed;
  Pretrainer trainer(cfg, setup.objective, options);

  Rng eval_rng(99);
  std::vector<MlmExample> held_out;
  for (int pass = 0; pass < 4; ++pass)
    for (const auto& seq : corpus) held_out.push_back(mask_tokens(seq, options.mask_rate, cfg.vocab_size, eval_rng));

  SmokeResult result;
  result.initial_mlm = trainer.evaluate_mlm(held_out);
  const auto t0 = std::chrono::steady_clock::now();
  result.metrics = train_loop(trainer, corpus, setup.steps);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  result.final_mlm = trainer.evaluate_mlm(held_out);
  if (setup.objective == Objective::Rtd) {
    Rng rtd_rng(5);
    result.rtd = trainer.evaluate_rtd(corpus, 20, rtd_rng);
  }
  return result;
}

bool same_metrics(const std::vector<StepMetrics>& a, const std::vector<StepMetrics>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const StepMetrics &x = a[i], &y = b[i];
    if (x.step != y.step || x.no_masked != y.no_masked) return false;
    const double xs[] = {x.lr, x.mlm_loss, x.rtd_loss, x.joint_loss};
    const double ys[] = {y.lr, y.mlm_loss, y.rtd_loss, y.joint_loss};
    if (std::memcmp(xs, ys, sizeof xs) != 0) return false;
  }
  return true;
}

}  // namespace convbert::verify
