#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "convbert/checkpoint.hpp"
#include "convbert/cost.hpp"
#include "convbert/errors.hpp"
#include "convbert/model.hpp"
#include "convbert/ops.hpp"
#include "helpers.hpp"

using namespace convbert;
using testing::randn;

namespace {

ModelConfig tiny16(Variant variant = Variant::BottleneckConv) {
  ModelConfig cfg = ModelConfig::preset("tiny", variant);
  cfg.layers = 2;
  cfg.d = 16;
  cfg.d_emb = 8;
  cfg.heads = 4;
  cfg.head_dim = 4;
  cfg.ffn_inner = 32;
  cfg.vocab_size = 20;
  cfg.max_positions = 16;
  if (variant == Variant::BertBaseline) cfg.reduction = 1;
  cfg.validate();
  return cfg;
}

void randomize(const ParameterList& params, Rng& rng, double stddev) {
  for (const Tensor& t : params.unique_tensors()) {
    const Tensor r = randn(rng, t.shape(), stddev);
    Tensor p = t;
    std::copy(r.data().begin(), r.data().end(), p.mutable_data().begin());
  }
}

void sum_check(const CostNode& node) {
  if (node.children.empty()) return;
  std::uint64_t p = 0, m = 0;
  for (const CostNode& c : node.children) {
    p += c.total_params();
    m += c.total_madds();
    sum_check(c);
  }
  CHECK(node.params == 0);
  CHECK(node.madds == 0);
  CHECK(node.total_params() == p);
  CHECK(node.total_madds() == m);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("convbert_unit_" + name)).string();
}

}  // namespace

TEST_CASE("presets match the published size table") {
  const ModelConfig small = ModelConfig::preset("small", Variant::BottleneckConv);
  CHECK(small.layers == 12);
  CHECK(small.d == 256);
  CHECK(small.d_emb == 128);
  CHECK(small.ffn_inner == 1024);
  CHECK(small.heads == 4);
  CHECK(small.reduction == 2);
  CHECK(small.head_dim == 64);
  CHECK(small.kernel == 9);
  CHECK(small.groups == 1);
  const ModelConfig ms = ModelConfig::preset("medium-small", Variant::BottleneckGlConv);
  CHECK(ms.d == 384);
  CHECK(ms.d_emb == 128);
  CHECK(ms.ffn_inner == 1536);
  CHECK(ms.groups == 2);
  CHECK(ms.attention().attention_heads() == 4);
  CHECK(ms.attention().head_dim == 48);
  const ModelConfig base = ModelConfig::preset("base", Variant::BottleneckConv);
  CHECK(base.d == 768);
  CHECK(base.d_emb == 768);
  CHECK(base.ffn_inner == 3072);
  CHECK(base.attention().attention_heads() == 6);
  CHECK(base.vocab_size == 30522);
  CHECK(base.max_positions == 512);
}

TEST_CASE("config text parse and round trip") {
  const ModelConfig cfg = ModelConfig::preset("medium-small", Variant::BottleneckGlConv);
  CHECK(ModelConfig::parse(cfg.to_text()) == cfg);
  const ModelConfig seeded = ModelConfig::parse("# comment\npreset = small\nvariant = bnk\n  k = 5  # narrower\n");
  ModelConfig expect = ModelConfig::preset("small", Variant::Bottleneck);
  expect.kernel = 5;
  CHECK(seeded == expect);
  CHECK_THROWS_AS(ModelConfig::parse("preset = small\ncolour = blue\n"), InputError);
  CHECK_THROWS_AS(ModelConfig::parse("preset = small\nd\n"), InputError);
  CHECK_THROWS_AS(ModelConfig::parse("preset = small\ngroups = 3\n"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::parse("preset = small\nvariant = bnk+gl\ngroups = 3\n"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::parse("preset = small\nk = 4\n"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::load("/nonexistent/config.txt"), InputError);
}

TEST_CASE("parameter counts of the presets") {
  // Exact counts under the implemented layout.
  CHECK(count_params(ModelConfig::preset("small", Variant::BottleneckConv)).total_params() == 13195992);
  CHECK(count_params(ModelConfig::preset("medium-small", Variant::BottleneckGlConv)).total_params() == 17545776);
  CHECK(count_params(ModelConfig::preset("base", Variant::BottleneckConv)).total_params() == 105473160);
  CHECK(count_params(ModelConfig::preset("small", Variant::Bottleneck)).total_params() == 11971584);
  CHECK(count_params(ModelConfig::preset("base", Variant::Bottleneck)).total_params() == 94722048);
  CHECK(count_params(ModelConfig::preset("small", Variant::BertBaseline)).total_params() == 13549056);
}

TEST_CASE("count_params agrees with instantiated models") {
  for (Variant v : {Variant::BertBaseline, Variant::Bottleneck, Variant::BottleneckConv, Variant::BottleneckGl,
                    Variant::BottleneckGlConv}) {
    ModelConfig cfg = ModelConfig::preset("tiny", v);
    Rng rng(1);
    const ConvBertModel model(cfg, rng);
    CHECK(count_params(cfg).total_params() == model.parameters().scalar_count());
  }
}

TEST_CASE("structural parameter relations") {
  for (const std::string& preset : {"small", "medium-small", "base"}) {
    const ModelConfig bnk = ModelConfig::preset(preset, Variant::Bottleneck);
    const ModelConfig bert = ModelConfig::preset(preset, Variant::BertBaseline);
    CHECK(count_params(bert).total_params() > count_params(bnk).total_params());
    const ModelConfig gl = ModelConfig::preset(preset, Variant::BottleneckGl);
    CHECK(count_params(bnk).total_params() - count_params(gl).total_params() == bnk.layers * bnk.d * bnk.ffn_inner);
    const ModelConfig main = ModelConfig::preset(preset, Variant::BottleneckConv);
    const ModelConfig gen = generator_config(main, default_generator_multiplier(preset));
    CHECK(count_params(gen).total_params() < count_params(main).total_params());
  }
}

TEST_CASE("cost tree totals and CSV round trip") {
  const CostReport flops = count_flops(ModelConfig::preset("medium-small", Variant::BottleneckGlConv), 64);
  sum_check(flops.root());
  const CostReport back = CostReport::from_csv(flops.to_csv());
  CHECK(back.total_params() == flops.total_params());
  CHECK(back.total_madds() == flops.total_madds());
  CHECK(back.to_csv() == flops.to_csv());
  CHECK(back.at("layer.3.attention.scores").madds == flops.at("layer.3.attention.scores").madds);
  CHECK_THROWS_AS(flops.at("layer.99"), InputError);
  CHECK_THROWS(CostReport::from_csv("component,params,madds\nmodel,5,0\nmodel.a,2,0\n"));
}

TEST_CASE("counted attention scores quadruple and sdconv doubles") {
  const ModelConfig cfg = ModelConfig::preset("small", Variant::BottleneckConv);
  for (std::size_t n : {16, 64, 128}) {
    const CostReport a = count_flops(cfg, n), b = count_flops(cfg, 2 * n);
    CHECK(b.layer_madds("attention.scores") == 4 * a.layer_madds("attention.scores"));
    CHECK(a.layer_madds("attention.scores") == cfg.layers * n * n * (cfg.d / cfg.reduction));
    CHECK(b.layer_madds("attention.sdconv") == 2 * a.layer_madds("attention.sdconv"));
  }
  CHECK_THROWS(count_flops(cfg, 0));
}

TEST_CASE("count_flops equals the instrumented forward pass") {
  for (Variant v : {Variant::BertBaseline, Variant::BottleneckConv, Variant::BottleneckGlConv}) {
    const ModelConfig cfg = ModelConfig::preset("tiny", v);
    Rng rng(2);
    const ConvBertModel model(cfg, rng);
    std::vector<std::int64_t> ids(13);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>((i * 7) % cfg.vocab_size);
    NoGradGuard no_grad;
    MaddCounter counter;
    model.forward(ids);
    CHECK(counter.count() == count_flops(cfg, ids.size()).total_madds());
  }
}

TEST_CASE("embeddings") {
  const ModelConfig small = ModelConfig::preset("small", Variant::BottleneckConv);
  Rng rng(3);
  const Embeddings emb(small, rng);
  CHECK(emb.word.shape() == Shape{30522, 128});
  CHECK(emb.projected);
  CHECK(emb.projection.weight.shape() == Shape{128, 256});
  try {
    const std::vector<std::int64_t> bad = {1, 40000};
    emb(bad);
    FAIL("expected InputError");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("index 1") != std::string::npos);
  }

  ModelConfig cfg = tiny16();
  cfg.d_emb = cfg.d;
  Embeddings zero(cfg, rng);
  for (const Tensor& t : {zero.word, zero.position, zero.segment}) testing::fill(t, 0.0);
  Tensor beta = zero.norm.beta;
  for (std::size_t i = 0; i < beta.numel(); ++i) beta.mutable_data()[i] = 0.1 * double(i);
  const std::vector<std::int64_t> ids = {3, 5, 7};
  const Tensor out = zero(ids);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < cfg.d; ++j) CHECK(out.at(i, j) == doctest::Approx(0.1 * double(j)));

  Embeddings lookup(cfg, rng);
  testing::fill(lookup.position, 0.0);
  testing::fill(lookup.segment, 0.0);
  const std::vector<std::int64_t> one = {6};
  const Tensor row = lookup(one);
  const reference::Matrix word(1, cfg.d, lookup.word.data().subspan(6 * cfg.d, cfg.d));
  const auto expect = reference::layer_norm(word, lookup.norm.gamma.data(), lookup.norm.beta.data());
  CHECK(testing::max_diff(row.data(), expect.v) <= 1e-12);
}

TEST_CASE("grouped linear degenerate and block-diagonal forms") {
  Rng rng(4);
  const Tensor x = randn(rng, {5, 6}), w = randn(rng, {6, 4}), b = randn(rng, {4});
  Linear full;
  full.weight = w;
  full.bias = b;
  CHECK(testing::max_diff(grouped_linear(x, w, b).data(), full(x).data()) == 0.0);

  const Tensor wg = randn(rng, {2, 3, 2});
  std::vector<double> dense(6 * 4, 0.0);
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) dense[(g * 3 + i) * 4 + g * 2 + j] = wg.at((g * 3 + i) * 2 + j);
  const Tensor expect = add_row_bias(matmul(x, Tensor::from({6, 4}, dense)), b);
  CHECK(testing::max_diff(grouped_linear(x, wg, b).data(), expect.data()) <= 1e-12);
  CHECK_THROWS_AS(grouped_linear(randn(rng, {5, 5}), wg, b), DimensionError);
  CHECK(GroupedLinear(1536, 384, 2, rng).weight.numel() + 384 == 1536 * 384 / 2 + 384);
}

TEST_CASE("feed-forward widths and zero weights") {
  Rng rng(5);
  const ModelConfig small = ModelConfig::preset("small", Variant::BottleneckConv);
  const FeedForward ffn(small, rng);
  CHECK(ffn.inner.weight.shape() == Shape{1, 256, 1024});
  CHECK(ffn.outer.weight.shape() == Shape{1, 1024, 256});
  const ModelConfig ms = ModelConfig::preset("medium-small", Variant::BottleneckGlConv);
  CHECK(FeedForward(ms, rng).inner.weight.shape() == Shape{2, 192, 768});

  const ModelConfig cfg = tiny16();
  EncoderLayer layer(cfg, rng);
  for (const Tensor& t : {layer.ffn.inner.weight, layer.ffn.inner.bias, layer.ffn.outer.weight, layer.ffn.outer.bias})
    testing::fill(t, 0.0);
  const Tensor h = randn(rng, {4, cfg.d});
  const Tensor y = layer.ffn(h);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("zero attention and feed-forward weights reduce a layer to stacked norms") {
  ModelConfig cfg = tiny16();
  cfg.layers = 1;
  Rng rng(6);
  ConvBertModel model(cfg, rng);
  ParameterList params = model.parameters();
  for (const auto& [name, t] : params.entries()) {
    if (name.find("layer.0.attention.") == 0 || name.find("layer.0.ffn.") == 0) testing::fill(t, 0.0);
  }
  const std::vector<std::int64_t> ids = {1, 4, 9, 2};
  const Tensor out = model.forward(ids);
  const Tensor emb = model.embeddings()(ids);
  const EncoderLayer& layer = model.layers()[0];
  const Tensor expect = layer.ffn_norm(layer.attention_norm(emb));
  CHECK(out.shape() == emb.shape());
  CHECK(testing::max_diff(out.data(), expect.data()) <= 1e-12);
}

TEST_CASE("model forward matches layer-by-layer recomputation") {
  for (Variant v : {Variant::BottleneckConv, Variant::BottleneckGlConv, Variant::Bottleneck, Variant::BertBaseline}) {
    const ModelConfig cfg = tiny16(v);
    Rng rng(7);
    ConvBertModel model(cfg, rng);
    randomize(model.parameters(), rng, 0.3);
    const std::vector<std::int64_t> ids = {1, 5, 19, 3, 3, 8, 2};
    CHECK(testing::max_diff(model.forward(ids).data(), reference::model_forward(model, ids).v) <= 1e-10);
  }
}

TEST_CASE("model forward finite across presets") {
  for (const std::string& preset : {"small", "medium-small", "base"}) {
    const Variant v = preset == "medium-small" ? Variant::BottleneckGlConv : Variant::BottleneckConv;
    Rng rng(8);
    const ConvBertModel model(ModelConfig::preset(preset, v), rng);
    NoGradGuard no_grad;
    for (std::size_t n : {1, 8, 128}) {
      std::vector<std::int64_t> ids(n);
      for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::int64_t>((i * 131 + 7) % 30522);
      const Tensor h = model.forward(ids);
      CHECK(h.shape() == Shape{n, model.config().d});
      bool finite = true;
      for (double x : h.data()) finite = finite && std::isfinite(x);
      CHECK(finite);
    }
  }
}

TEST_CASE("checkpoint round trip") {
  const ModelConfig cfg = tiny16();
  Rng rng(9);
  ConvBertModel model(cfg, rng);
  // Round to single precision first so the stored values are exact.
  for (const Tensor& t : model.parameters().unique_tensors()) {
    Tensor p = t;
    for (double& x : p.mutable_data()) x = static_cast<float>(x);
  }
  const std::string path = temp_path("ckpt.bin");
  save_checkpoint(path, cfg, model.parameters());
  const Checkpoint ckpt = load_checkpoint(path);
  CHECK(ckpt.config == cfg);
  CHECK(ckpt.find("layer.1.attention.kernel_generator.weight") != nullptr);
  const ConvBertModel back = model_from_checkpoint(ckpt);
  const std::vector<std::int64_t> ids = {1, 2, 3, 4};
  NoGradGuard no_grad;
  CHECK(testing::max_diff(model.forward(ids).data(), back.forward(ids).data()) == 0.0);

  {
    std::ofstream bad(temp_path("bad.bin"), std::ios::binary);
    bad << "NOTCKPT";
  }
  CHECK_THROWS_AS(load_checkpoint(temp_path("bad.bin")), InputError);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 10);
  CHECK_THROWS_AS(load_checkpoint(path), InputError);

  ModelConfig other = cfg;
  other.ffn_inner = 48;
  Rng rng2(1);
  const ConvBertModel mismatched(other, rng2);
  CHECK_THROWS_AS(restore_parameters(ckpt, mismatched.parameters()), InputError);
  std::remove(path.c_str());
  std::remove(temp_path("bad.bin").c_str());
}

TEST_CASE("average attention map") {
  const ModelConfig cfg = tiny16();
  Rng rng(10);
  ConvBertModel model(cfg, rng);
  randomize(model.parameters(), rng, 0.5);
  const std::vector<std::int64_t> one = {4};
  CHECK(average_attention_map(model, one) == std::vector<double>{1.0});
  const std::vector<std::int64_t> ids = {1, 6, 2, 9, 11, 2};
  const auto map = average_attention_map(model, ids);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < ids.size(); ++j) total += map[i * ids.size() + j];
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
  for (const EncoderLayer& layer : model.layers()) {
    for (const Tensor& t : {layer.attention.query.weight, layer.attention.query.bias, layer.attention.key.weight,
                            layer.attention.key.bias})
      testing::fill(t, 0.0);
  }
  for (double x : average_attention_map(model, ids)) CHECK(x == 1.0 / 6.0);
}
