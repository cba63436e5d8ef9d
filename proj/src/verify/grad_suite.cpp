#include <functional>
#include <random>

#include "convbert/attention.hpp"
#include "convbert/conv_ops.hpp"
#include "convbert/errors.hpp"
#include "convbert/grad_check.hpp"
#include "convbert/model.hpp"
#include "convbert/ops.hpp"
#include "convbert/pretrain.hpp"
#include "convbert/verify.hpp"

namespace convbert::verify {

namespace {

Tensor randn(Rng& rng, Shape shape, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Contracts an output with fixed random weights so that every output
// element gets a distinct upstream gradient.
struct Probe {
  Tensor weights;
  Tensor operator()(const Tensor& y) const { return sum(mul(y, weights)); }
};

Probe probe_for(Rng& rng, const Shape& shape) {
  Probe p;
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  p.weights = Tensor::from(shape, std::move(v));
  return p;
}

void randomize(const ParameterList& params, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (const Tensor& t : params.unique_tensors()) {
    Tensor p = t;
    for (double& x : p.mutable_data()) x += dist(rng);
  }
}

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : seed_(seed) {}

  void run(const std::string& name, const std::function<Tensor()>& loss, std::vector<Tensor> params) {
    GradCheckOptions options;
    options.seed = seed_ + results_.size();
    const GradCheckResult r = grad_check(loss, params, options);
    results_.push_back({name, r.max_rel_error, r.coords_checked});
  }

  // Checks a unary-or-more op through a random probe of its output.
  void op(const std::string& name, const std::function<Tensor()>& forward, std::vector<Tensor> params, Rng& rng) {
    Tensor y;
    {
      NoGradGuard no_grad;
      y = forward();
    }
    const Probe probe = probe_for(rng, y.shape());
    run(name, [&] { return probe(forward()); }, std::move(params));
  }

  std::vector<GradResult> take() { return std::move(results_); }

 private:
  std::uint64_t seed_;
  std::vector<GradResult> results_;
};

void op_scope(Suite& suite, Rng& rng) {
  const Tensor a = randn(rng, {4, 3}), b = randn(rng, {3, 5}), c = randn(rng, {4, 3});
  suite.op("matmul", [&] { return matmul(a, b); }, {a, b}, rng);
  suite.op("transpose", [&] { return transpose(a); }, {a}, rng);
  suite.op("add", [&] { return add(a, c); }, {a, c}, rng);
  suite.op("sub", [&] { return sub(a, c); }, {a, c}, rng);
  suite.op("mul", [&] { return mul(a, c); }, {a, c}, rng);
  suite.op("scale", [&] { return scale(a, -1.7); }, {a}, rng);
  const Tensor row = randn(rng, {3});
  suite.op("add_row_bias", [&] { return add_row_bias(a, row); }, {a, row}, rng);
  suite.op("reshape", [&] { return reshape(a, {2, 6}); }, {a}, rng);
  const Tensor cube = randn(rng, {2, 3, 4});
  for (std::size_t axis = 0; axis < 3; ++axis) {
    suite.op("softmax.axis" + std::to_string(axis), [&, axis] { return softmax(cube, axis); }, {cube}, rng);
  }
  const Tensor gamma = randn(rng, {3}), beta = randn(rng, {3});
  suite.op("layer_norm", [&] { return layer_norm(a, gamma, beta); }, {a, gamma, beta}, rng);
  suite.op("gelu", [&] { return gelu(a); }, {a}, rng);
  suite.op("sigmoid", [&] { return sigmoid(a); }, {a}, rng);
  const Tensor wide = randn(rng, {4, 2});
  suite.op("concat_cols", [&] { return concat_cols(a, wide); }, {a, wide}, rng);
  suite.run("sum", [&] { return sum(a); }, {a});
  suite.run("mean", [&] { return mean(a); }, {a});
  const Tensor table = randn(rng, {6, 3});
  const std::vector<std::int64_t> ids = {2, 0, 2, 5};
  suite.op("gather_rows", [&] { return gather_rows(table, ids); }, {table}, rng);
  const std::vector<std::uint8_t> valid = {1, 0, 1, 1};
  suite.op("mask_rows", [&] { return mask_rows(a, valid); }, {a}, rng);
  const Tensor gx = randn(rng, {4, 6}), gw = randn(rng, {2, 3, 2}), gb = randn(rng, {4});
  suite.op("grouped_linear", [&] { return grouped_linear(gx, gw, gb); }, {gx, gw, gb}, rng);
  const Tensor logits = randn(rng, {4, 5});
  const std::vector<std::int64_t> targets = {1, -1, 4, 0};
  suite.run("cross_entropy", [&] { return cross_entropy(logits, targets); }, {logits});
  const Tensor bl = randn(rng, {5, 1});
  const std::vector<double> labels = {1, 0, 0, 1, 1}, weights = {1, 1, 0, 1, 1};
  suite.run("bce_with_logits", [&] { return bce_with_logits(bl, labels, weights); }, {bl});

  const std::size_t n = 6, d = 4, heads = 2, k = 3;
  const Tensor x = randn(rng, {n, d}), w = randn(rng, {d, k});
  suite.op("dwconv", [&] { return dwconv(x, w); }, {x, w}, rng);
  const Tensor v = randn(rng, {n, d}), kern_logits = randn(rng, {n, heads, k});
  suite.op("lconv", [&] { return lconv(v, KernelSet(softmax(kern_logits, 2))); }, {v, kern_logits}, rng);
  const Tensor gl = randn(rng, {n, 2 * d});
  suite.op("glu", [&] { return glu(gl); }, {gl}, rng);
  KernelGenerator gen;
  gen.weight = randn(rng, {heads, d / heads, k});
  gen.bias = randn(rng, {heads * k});
  suite.op("dconv", [&] { return dconv(x, gen); }, {x, gen.weight, gen.bias}, rng);
  const Tensor pw = randn(rng, {d, d}), pb = randn(rng, {d});
  suite.op("span_key", [&] { return span_key(x, w, pw, pb); }, {x, w, pw, pb}, rng);
  const Tensor q = randn(rng, {n, d}), ks = randn(rng, {n, d});
  suite.op("kernel_gen", [&] { return kernel_gen(q, ks, gen).values(); }, {q, ks, gen.weight, gen.bias}, rng);
  suite.op("sdconv", [&] { return sdconv(q, ks, v, gen); }, {q, ks, v, gen.weight, gen.bias}, rng);
  const Tensor kk = randn(rng, {n, d});
  const std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1, 0};
  suite.op("self_attention", [&] { return self_attention(q, kk, v, heads, mask); }, {q, kk, v}, rng);
}

void block_scope(Suite& suite, Rng& rng) {
  for (const bool conv : {true, false}) {
    MixedAttentionConfig cfg;
    cfg.d = 8;
    cfg.heads = 4;
    cfg.reduction = 2;
    cfg.head_dim = 2;
    cfg.kernel = 3;
    cfg.use_conv = conv;
    auto block = std::make_shared<MixedAttention>(cfg, rng);
    ParameterList params;
    block->collect(params, "block");
    randomize(params, rng, 0.3);
    const Tensor x = randn(rng, {5, cfg.d});
    const std::vector<std::uint8_t> valid = {1, 1, 1, 1, 0};
    std::vector<Tensor> all = params.unique_tensors();
    all.push_back(x);
    suite.op(conv ? "mixed_attention" : "self_attention_block", [block, x, valid] { return block->forward(x, valid); },
             all, rng);
  }
  ModelConfig cfg = ModelConfig::preset("tiny", Variant::BottleneckGlConv);
  cfg.d = 8;
  cfg.heads = 4;
  cfg.head_dim = 2;
  cfg.ffn_inner = 12;
  auto layer = std::make_shared<EncoderLayer>(cfg, rng);
  ParameterList params;
  layer->collect(params, "layer");
  randomize(params, rng, 0.3);
  const Tensor x = randn(rng, {5, cfg.d});
  std::vector<Tensor> all = params.unique_tensors();
  all.push_back(x);
  suite.op("encoder_layer", [layer, x] { return (*layer)(x, {}); }, all, rng);
}

void model_scope(Suite& suite, Rng& rng) {
  ModelConfig cfg = ModelConfig::preset("tiny", Variant::BottleneckConv);
  cfg.layers = 2;
  cfg.d = 16;
  cfg.d_emb = 8;
  cfg.heads = 4;
  cfg.head_dim = 4;
  cfg.ffn_inner = 32;
  cfg.kernel = 3;
  cfg.vocab_size = 12;
  cfg.max_positions = 8;
  cfg.validate();
  auto model = std::make_shared<ConvBertModel>(cfg, rng);
  auto head = std::make_shared<MlmHead>(cfg, rng);
  ParameterList params = model->parameters();
  head->collect(params, "mlm_head");
  randomize(params, rng, 0.2);
  const std::vector<std::int64_t> ids = {1, 7, 3, 9, 2};
  const std::vector<std::int64_t> targets = {-1, 7, 5, -1, -1};
  suite.run(
      "model",
      [model, head, ids, targets] {
        const Tensor h = model->forward(ids);
        return cross_entropy((*head)(h, model->embeddings().word), targets);
      },
      params.unique_tensors());
}

}  // namespace

GradScope parse_grad_scope(std::string_view name) {
  if (name == "op") return GradScope::Op;
  if (name == "block") return GradScope::Block;
  if (name == "model") return GradScope::Model;
  throw InputError("unknown grad-check scope '" + std::string(name) + "' (expected op, block or model)");
}

double grad_threshold(GradScope scope) { return scope == GradScope::Model ? 1e-3 : 1e-4; }

std::vector<GradResult> run_grad_suite(GradScope scope, std::uint64_t seed) {
  Rng rng(seed);
  Suite suite(seed);
  switch (scope) {
    case GradScope::Op:
      op_scope(suite, rng);
      break;
    case GradScope::Block:
      block_scope(suite, rng);
      break;
    case GradScope::Model:
      model_scope(suite, rng);
      break;
  }
  return suite.take();
}

}  // namespace convbert::verify
