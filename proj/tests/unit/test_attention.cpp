#include <doctest.h>

#include <cmath>

#include "convbert/attention.hpp"
#include "convbert/config.hpp"
#include "convbert/errors.hpp"
#include "convbert/grad_check.hpp"
#include "convbert/ops.hpp"
#include "helpers.hpp"

using namespace convbert;
using testing::randn;

namespace {

MixedAttentionConfig small_block(bool conv = true) {
  MixedAttentionConfig cfg;
  cfg.d = 8;
  cfg.heads = 4;
  cfg.reduction = 2;
  cfg.head_dim = 2;
  cfg.kernel = 3;
  cfg.use_conv = conv;
  return cfg;
}

void set_identity(const Tensor& t) {
  Tensor p = t;
  auto v = p.mutable_data();
  std::fill(v.begin(), v.end(), 0.0);
  const std::size_t rows = t.dim(0), cols = t.dim(1);
  for (std::size_t i = 0; i < std::min(rows, cols); ++i) v[i * cols + i] = 1.0;
}

void randomize(const ParameterList& params, Rng& rng, double stddev) {
  for (const Tensor& t : params.unique_tensors()) {
    const Tensor r = randn(rng, t.shape(), stddev);
    Tensor p = t;
    std::copy(r.data().begin(), r.data().end(), p.mutable_data().begin());
  }
}

}  // namespace

TEST_CASE("self_attention trivial cases") {
  Rng rng(1);
  const Tensor v1 = randn(rng, {1, 4});
  CHECK(testing::max_diff(self_attention(randn(rng, {1, 4}), randn(rng, {1, 4}), v1, 2).data(), v1.data()) == 0.0);

  const Tensor v2 = Tensor::from({2, 2}, {1, 2, 3, 5});
  const Tensor out = self_attention(Tensor::zeros({2, 2}), randn(rng, {2, 2}), v2, 1);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(out.at(i, 0) == 2.0);
    CHECK(out.at(i, 1) == 3.5);
  }
  CHECK_THROWS_AS(self_attention(Tensor::zeros({0, 2}), Tensor::zeros({0, 2}), Tensor::zeros({0, 2}), 1), Error);
}

TEST_CASE("self_attention matches the naive oracle on 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor q = randn(rng, {5, 8}), k = randn(rng, {5, 8}), v = randn(rng, {5, 8});
    const auto expect = reference::attention(testing::mat(q), testing::mat(k), testing::mat(v), 2);
    CHECK(testing::max_diff(self_attention(q, k, v, 2).data(), expect.v) <= 1e-12);
  }
}

TEST_CASE("naive attention oracle trivial cases") {
  const reference::Matrix v(1, 3, std::vector<double>{1, 2, 3});
  CHECK(reference::attention(reference::Matrix(1, 3, 0.5), reference::Matrix(1, 3, 0.1), v, 1).v == v.v);
  const reference::Matrix v3(3, 1, std::vector<double>{1, 2, 6});
  const auto mean = reference::attention(reference::Matrix(3, 1, 0.0), reference::Matrix(3, 1, 1.0), v3, 1);
  for (double x : mean.v) CHECK(x == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("masked keys get no weight and fully masked rows are zero") {
  Rng rng(2);
  const Tensor q = randn(rng, {6, 4}), k = randn(rng, {6, 4}), v = randn(rng, {6, 4});
  const std::vector<std::uint8_t> valid = {1, 0, 1, 1, 0, 1};
  Tensor w;
  self_attention(q, k, v, 2, valid, &w);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 6; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        const double x = w.at((h * 6 + i) * 6 + j);
        CHECK(x >= 0.0);
        if (!valid[j]) CHECK(x < 1e-9);
        total += x;
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  const std::vector<std::uint8_t> none(6, 0);
  const Tensor blank = self_attention(q, k, v, 2, none);
  for (double x : blank.data()) CHECK(x == 0.0);
}

TEST_CASE("attention weights are invariant to a per-row logit shift") {
  Rng rng(3);
  const Tensor q = randn(rng, {5, 4}), k = randn(rng, {5, 4}), v = randn(rng, {5, 4});
  // Adding u to every key shifts row i's logits by q_i . u.
  const Tensor u = randn(rng, {4});
  const Tensor shifted = add_row_bias(k, u);
  Tensor w1, w2;
  self_attention(q, k, v, 1, {}, &w1);
  self_attention(q, shifted, v, 1, {}, &w2);
  CHECK(testing::max_diff(w1.data(), w2.data()) < 1e-12);
}

TEST_CASE("bottleneck widths follow the presets") {
  const MixedAttentionConfig small = ModelConfig::preset("small", Variant::BottleneckConv).attention();
  CHECK(small.bottleneck_width() == 128);
  CHECK(small.attention_heads() == 2);
  const MixedAttentionConfig base = ModelConfig::preset("base", Variant::BottleneckConv).attention();
  CHECK(base.bottleneck_width() == 384);
  CHECK(base.attention_heads() == 6);
}

TEST_CASE("identity projections without bottleneck give Q = K = V = X") {
  MixedAttentionConfig cfg;
  cfg.d = 4;
  cfg.heads = 2;
  cfg.reduction = 1;
  cfg.head_dim = 2;
  cfg.use_conv = false;
  Rng rng(4);
  MixedAttention block(cfg, rng);
  for (const Linear* l : {&block.query, &block.key, &block.value}) {
    set_identity(l->weight);
    testing::fill(l->bias, 0.0);
  }
  const Tensor x = randn(rng, {3, 4});
  const Projections p = block.project(x);
  CHECK(testing::max_diff(p.query.data(), x.data()) == 0.0);
  CHECK(testing::max_diff(p.key.data(), x.data()) == 0.0);
  CHECK(testing::max_diff(p.value.data(), x.data()) == 0.0);
}

TEST_CASE("config validation") {
  MixedAttentionConfig cfg = small_block();
  cfg.reduction = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_block();
  cfg.kernel = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_block();
  cfg.head_dim = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_block();
  cfg.heads = 3;
  cfg.head_dim = 3;
  cfg.d = 9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("mixed attention keeps the input shape") {
  Rng rng(5);
  const MixedAttention block(ModelConfig::preset("small", Variant::BottleneckConv).attention(), rng);
  const Tensor x = randn(rng, {128, 256});
  NoGradGuard no_grad;
  const Tensor y = block.forward(x);
  CHECK(y.shape() == Shape{128, 256});
  CHECK_THROWS_AS(block.forward(randn(rng, {4, 128})), ConfigError);
}

TEST_CASE("degenerate mixed attention: uniform attention and identity convolution") {
  Rng rng(6);
  MixedAttention block(small_block(), rng);
  testing::fill(block.query.weight, 0.0);
  testing::fill(block.query.bias, 0.0);
  Tensor bias = block.kernel_generator.bias;
  auto b = bias.mutable_data();
  for (std::size_t h = 0; h < 2; ++h) {
    b[h * 3 + 0] = -1000.0;
    b[h * 3 + 1] = 0.0;
    b[h * 3 + 2] = -1000.0;
  }
  const Tensor x = randn(rng, {5, 8});
  const Tensor out = block.forward(x);

  const Tensor v = block.value(x);
  std::vector<double> pooled(v.numel());
  for (std::size_t c = 0; c < v.dim(1); ++c) {
    double m = 0.0;
    for (std::size_t i = 0; i < 5; ++i) m += v.at(i, c);
    for (std::size_t i = 0; i < 5; ++i) pooled[i * v.dim(1) + c] = m / 5.0;
  }
  const Tensor expect = block.output(concat_cols(Tensor::from(v.shape(), pooled), block.conv_value(x)));
  CHECK(testing::max_diff(out.data(), expect.data()) <= 1e-12);
}

TEST_CASE("mixed attention equals the branch-composition oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    MixedAttention block(small_block(), rng);
    ParameterList params;
    block.collect(params, "b");
    randomize(params, rng, 0.5);
    const Tensor x = randn(rng, {7, 8});
    const std::vector<std::uint8_t> valid = {1, 1, 1, 0, 1, 1, 0};
    CHECK(testing::max_diff(block.forward(x, valid).data(),
                            reference::mixed_attention(block, testing::mat(x), valid).v) <= 1e-12);
  }
}

TEST_CASE("without convolution and bottleneck the block is standard self-attention") {
  MixedAttentionConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.reduction = 1;
  cfg.head_dim = 4;
  cfg.use_conv = false;
  Rng rng(7);
  MixedAttention block(cfg, rng);
  ParameterList params;
  block.collect(params, "b");
  randomize(params, rng, 0.5);
  const Tensor x = randn(rng, {6, 8});
  namespace ref = reference;
  auto lin = [&](const Linear& l, const ref::Matrix& m) {
    return ref::add_bias(ref::matmul(m, testing::mat(l.weight)), l.bias.data());
  };
  const ref::Matrix xm = testing::mat(x);
  const ref::Matrix att = ref::attention(lin(block.query, xm), lin(block.key, xm), lin(block.value, xm), 2);
  CHECK(testing::max_diff(block.forward(x).data(), lin(block.output, att).v) <= 1e-12);
}

TEST_CASE("mixed attention block gradient check") {
  Rng rng(8);
  MixedAttention block(small_block(), rng);
  ParameterList params;
  block.collect(params, "b");
  randomize(params, rng, 0.3);
  const Tensor x = randn(rng, {5, 8}, 1.0, true);
  const Tensor probe = randn(rng, {5, 8});
  std::vector<Tensor> all = params.unique_tensors();
  all.push_back(x);
  const GradCheckResult r = grad_check([&] { return sum(mul(block.forward(x), probe)); }, all);
  CHECK(r.max_rel_error < 1e-4);
}
