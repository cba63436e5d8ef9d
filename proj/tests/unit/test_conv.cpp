#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "convbert/conv_ops.hpp"
#include "convbert/cost.hpp"
#include "convbert/errors.hpp"
#include "convbert/ops.hpp"
#include "helpers.hpp"

using namespace convbert;
using testing::randn;

namespace {

KernelSet uniform_kernels(std::size_t n, std::size_t heads, std::size_t k) {
  return KernelSet(Tensor::full({n, heads, k}, 1.0 / double(k)));
}

KernelSet center_kernels(std::size_t n, std::size_t heads, std::size_t k) {
  std::vector<double> v(n * heads * k, 0.0);
  for (std::size_t r = 0; r < n * heads; ++r) v[r * k + k / 2] = 1.0;
  return KernelSet(Tensor::from({n, heads, k}, v));
}

KernelGenerator generator(Rng& rng, std::size_t heads, std::size_t dh, std::size_t k, double stddev = 1.0) {
  KernelGenerator g;
  g.weight = randn(rng, {heads, dh, k}, stddev);
  g.bias = randn(rng, {heads * k}, stddev);
  return g;
}

bool rows_equal(const KernelSet& ks, std::size_t i, std::size_t j) {
  const std::size_t w = ks.heads() * ks.taps();
  return std::memcmp(ks.values().data().data() + i * w, ks.values().data().data() + j * w, w * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("dwconv identity, shift and oracle") {
  Rng rng(1);
  const Tensor x = randn(rng, {6, 4});
  CHECK(testing::max_diff(dwconv(x, Tensor::full({4, 1}, 1.0)).data(), x.data()) == 0.0);

  std::vector<double> shift(4 * 3, 0.0);
  for (int c = 0; c < 4; ++c) shift[c * 3 + 2] = 1.0;
  const Tensor y = dwconv(x, Tensor::from({4, 3}, shift));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t c = 0; c < 4; ++c) CHECK(y.at(i, c) == (i + 1 < 6 ? x.at(i + 1, c) : 0.0));

  const Tensor x7 = randn(rng, {7, 4}), w = randn(rng, {4, 5});
  CHECK(testing::max_diff(dwconv(x7, w).data(), reference::dwconv(testing::mat(x7), testing::mat(w)).v) <= 1e-12);
  CHECK_THROWS_AS(dwconv(x7, randn(rng, {3, 5})), DimensionError);
  CHECK_THROWS(dwconv(x7, randn(rng, {4, 4})));
}

TEST_CASE("lconv identity, moving average and oracle") {
  Rng rng(2);
  const Tensor v = randn(rng, {5, 4});
  CHECK(testing::max_diff(convbert::lconv(v, center_kernels(5, 2, 3)).data(), v.data()) == 0.0);

  const Tensor avg = convbert::lconv(Tensor::from({3, 1}, {1, 2, 3}), uniform_kernels(3, 1, 3));
  CHECK(avg.at(0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(avg.at(1) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(avg.at(2) == doctest::Approx(5.0 / 3.0).epsilon(1e-15));

  const Tensor v9 = randn(rng, {9, 8});
  const KernelSet ks(softmax(randn(rng, {9, 2, 3}), 2));
  reference::Kernels rk(9, std::vector<std::vector<double>>(2, std::vector<double>(3)));
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t j = 0; j < 3; ++j) rk[i][h][j] = ks.at(i, h, j);
  CHECK(testing::max_diff(convbert::lconv(v9, ks).data(), reference::lconv(testing::mat(v9), rk).v) <= 1e-12);
  CHECK_THROWS_AS(convbert::lconv(randn(rng, {9, 7}), ks), ConfigError);
}

TEST_CASE("lconv with a position-independent kernel is a plain lightweight convolution") {
  Rng rng(3);
  const Tensor v = randn(rng, {6, 4});
  const std::vector<double> kernel = {0.2, 0.5, 0.3};
  std::vector<double> tiled;
  for (int i = 0; i < 6; ++i) tiled.insert(tiled.end(), kernel.begin(), kernel.end());
  const Tensor out = convbert::lconv(v, KernelSet(Tensor::from({6, 1, 3}, tiled)));
  std::vector<double> w;
  for (int c = 0; c < 4; ++c) w.insert(w.end(), kernel.begin(), kernel.end());
  CHECK(testing::max_diff(out.data(), dwconv(v, Tensor::from({4, 3}, w)).data()) <= 1e-15);
}

TEST_CASE("glu gates") {
  const Tensor x = Tensor::from({1, 4}, {2, -3, 0, 0});
  const Tensor y = glu(x);
  CHECK(y.at(0) == 1.0);
  CHECK(y.at(1) == -1.5);
  const Tensor sat = glu(Tensor::from({1, 2}, {4, 800}));
  CHECK(sat.at(0) == doctest::Approx(4.0));
  Rng rng(4);
  const Tensor r = randn(rng, {3, 6});
  CHECK(testing::max_diff(glu(r).data(), reference::glu(testing::mat(r)).v) <= 1e-12);
  CHECK_THROWS_AS(glu(Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("dconv zero generator is a moving average and repeats kernels for repeated tokens") {
  Rng rng(5);
  const Tensor x = randn(rng, {5, 4});
  KernelGenerator zero;
  zero.weight = Tensor::zeros({2, 2, 3});
  zero.bias = Tensor::zeros({6});
  CHECK(testing::max_diff(dconv(x, zero).data(), convbert::lconv(x, uniform_kernels(5, 2, 3)).data()) <= 1e-15);

  std::vector<double> aba = {1, 2, 3, 4, -1, 0.5, 2, 0, 1, 2, 3, 4};
  const KernelGenerator g = generator(rng, 2, 2, 3);
  const KernelSet ks = dconv_kernels(Tensor::from({3, 4}, aba), g);
  CHECK(rows_equal(ks, 0, 2));
  CHECK_FALSE(rows_equal(ks, 0, 1));
}

TEST_CASE("dconv kernel depends only on its own token") {
  Rng rng(6);
  const Tensor x = randn(rng, {8, 4});
  const KernelGenerator g = generator(rng, 2, 2, 5);
  const KernelSet base = dconv_kernels(x, g);
  std::vector<double> perm(x.data().begin(), x.data().end());
  // reverse every row except row 3
  for (std::size_t i = 0, j = 7; i < j; ++i, --j) {
    if (i == 3 || j == 3) continue;
    std::swap_ranges(perm.begin() + i * 4, perm.begin() + i * 4 + 4, perm.begin() + j * 4);
  }
  const KernelSet moved = dconv_kernels(Tensor::from({8, 4}, perm), g);
  const double* a = base.values().data().data() + 3 * 10;
  const double* b = moved.values().data().data() + 3 * 10;
  CHECK(std::memcmp(a, b, 10 * sizeof(double)) == 0);
}

TEST_CASE("kernel sets are distributions") {
  Rng rng(7);
  const KernelSet ks = kernel_gen(randn(rng, {10, 6}), randn(rng, {10, 6}), generator(rng, 3, 2, 9, 3.0));
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t h = 0; h < 3; ++h) {
      double total = 0.0;
      for (std::size_t j = 0; j < 9; ++j) {
        CHECK(ks.at(i, h, j) >= 0.0);
        total += ks.at(i, h, j);
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
}

TEST_CASE("span_key identity weights and receptive field") {
  Rng rng(8);
  const Tensor x = randn(rng, {6, 3});
  std::vector<double> eye(9, 0.0);
  for (int i = 0; i < 3; ++i) eye[i * 4] = 1.0;
  const Tensor ks = span_key(x, Tensor::full({3, 1}, 1.0), Tensor::from({3, 3}, eye), Tensor());
  CHECK(testing::max_diff(ks.data(), x.data()) == 0.0);

  const std::size_t n = 12, d = 4, k = 5;
  const Tensor xs = randn(rng, {n, d}), dw = randn(rng, {d, k}), pw = randn(rng, {d, 3}), b = randn(rng, {3});
  const Tensor base = span_key(xs, dw, pw, b);
  std::vector<double> edited(xs.data().begin(), xs.data().end());
  const std::size_t i = 3, far = i + k / 2 + 1;
  for (std::size_t c = 0; c < d; ++c) edited[far * d + c] += 10.0;
  const Tensor moved = span_key(Tensor::from({n, d}, edited), dw, pw, b);
  for (std::size_t c = 0; c < 3; ++c) CHECK(moved.at(i, c) == base.at(i, c));
  CHECK(moved.at(far, 0) != base.at(far, 0));
  CHECK(testing::max_diff(base.data(),
                          reference::span_key(testing::mat(xs), testing::mat(dw), testing::mat(pw), b.data()).v) <= 1e-12);
  CHECK_THROWS_AS(span_key(xs, dw, randn(rng, {5, 3}), b), DimensionError);
}

TEST_CASE("kernel_gen zero key gives uniform kernels; sdconv kernels see the window") {
  Rng rng(9);
  const KernelGenerator g = generator(rng, 2, 3, 3);
  KernelGenerator no_bias = g;
  no_bias.bias = Tensor();
  const KernelSet ks = kernel_gen(randn(rng, {4, 6}), Tensor::zeros({4, 6}), no_bias);
  for (double v : ks.values().data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(kernel_gen(randn(rng, {4, 6}), randn(rng, {5, 6}), g), DimensionError);

  // Edits outside the window of position i leave its sdconv kernel unchanged.
  const std::size_t n = 14, d = 6, k = 5;
  const Tensor x = randn(rng, {n, d}), wq = randn(rng, {d, d}), dw = randn(rng, {d, k});
  const Tensor pw = randn(rng, {d, d}), b = randn(rng, {d});
  const KernelGenerator gk = generator(rng, 2, 3, k);
  auto kernels_for = [&](const Tensor& input) { return kernel_gen(matmul(input, wq), span_key(input, dw, pw, b), gk); };
  const KernelSet base = kernels_for(x);
  std::vector<double> edited(x.data().begin(), x.data().end());
  const std::size_t i = 5;
  for (std::size_t pos : {std::size_t{0}, std::size_t{8}, std::size_t{13}})
    for (std::size_t c = 0; c < d; ++c) edited[pos * d + c] = -edited[pos * d + c] + 1.0;
  const KernelSet moved = kernels_for(Tensor::from({n, d}, edited));
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t j = 0; j < k; ++j) CHECK(std::abs(moved.at(i, h, j) - base.at(i, h, j)) <= 1e-12);
}

TEST_CASE("sdconv identity and hand-sized oracle") {
  Rng rng(10);
  // Large centre logit forces one-hot centre kernels.
  KernelGenerator g;
  g.weight = Tensor::zeros({1, 2, 3});
  g.bias = Tensor::from({3}, {-1000, 0, -1000});
  const Tensor v = randn(rng, {4, 2});
  CHECK(testing::max_diff(sdconv(randn(rng, {4, 2}), randn(rng, {4, 2}), v, g).data(), v.data()) == 0.0);

  KernelGenerator hand;
  hand.weight = Tensor::from({1, 2, 3}, {1, 0, -1, 0, 1, 1});
  const Tensor q = Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1});
  const Tensor ks = Tensor::from({3, 2}, {1, 2, 0, 1, 1, 0});
  const Tensor vv = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  const Tensor out = sdconv(q, ks, vv, hand);
  const double expect[] = {0.51482019056593902647, 0.84957923479111713694, 3.5339127895091091796,
                           4.5339127895091091796,  3.219365222598453931,   4.129334649428073473};
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(out.at(i) - expect[i]) <= 1e-12);
  const KernelSet kk = kernel_gen(q, ks, hand);
  CHECK(std::abs(kk.at(1, 0, 0) - 0.15536240349696360679) <= 1e-12);
  CHECK(std::abs(kk.at(0, 0, 2) - 0.090030573170380457998) <= 1e-12);
}

TEST_CASE("sdconv counted cost doubles with n") {
  const ModelConfig cfg = ModelConfig::preset("tiny", Variant::BottleneckConv);
  for (std::size_t n : {8, 32, 100}) {
    const std::uint64_t a = count_flops(cfg, n).layer_madds("attention.sdconv");
    const std::uint64_t b = count_flops(cfg, 2 * n).layer_madds("attention.sdconv");
    CHECK(b == 2 * a);
    // Closed form per layer: q*ks product, kernel generator, softmax, lconv.
    const std::size_t db = cfg.d / cfg.reduction, hc = cfg.heads / cfg.reduction, k = cfg.kernel;
    CHECK(a == cfg.layers * (n * db + n * db * k + n * hc * k + n * hc * k + n * db * k));
  }
}
