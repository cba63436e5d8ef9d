#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <random>

#include "convbert/attention.hpp"
#include "convbert/conv_ops.hpp"
#include "convbert/ops.hpp"
#include "convbert/reference.hpp"
#include "convbert/verify.hpp"

namespace convbert::verify {

namespace {

namespace ref = convbert::reference;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

std::vector<double> normals(Rng& rng, std::size_t count, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(count);
  for (double& x : v) x = dist(rng);
  return v;
}

Tensor random_tensor(Rng& rng, Shape shape, double stddev = 1.0) {
  const std::size_t count = shape_numel(shape);
  return Tensor::from(std::move(shape), normals(rng, count, stddev));
}

ref::Matrix as_matrix(const Tensor& t) { return ref::Matrix(t.dim(0), t.dim(1), t.data()); }

ref::Kernels as_kernels(const KernelSet& ks) {
  ref::Kernels out(ks.positions(), std::vector<std::vector<double>>(ks.heads(), std::vector<double>(ks.taps())));
  for (std::size_t i = 0; i < ks.positions(); ++i)
    for (std::size_t h = 0; h < ks.heads(); ++h)
      for (std::size_t j = 0; j < ks.taps(); ++j) out[i][h][j] = ks.at(i, h, j);
  return out;
}

std::vector<double> flatten(const ref::Kernels& k) {
  std::vector<double> out;
  for (const auto& row : k)
    for (const auto& head : row) out.insert(out.end(), head.begin(), head.end());
  return out;
}

std::vector<std::uint8_t> random_mask(Rng& rng, std::size_t n) {
  std::vector<std::uint8_t> valid(n);
  for (auto& v : valid) v = pick(rng, 0, 3) == 0 ? 0 : 1;
  return valid;
}

// One draw of widths shared by an instance.
struct Dims {
  std::size_t n, heads, head_dim, d, k;
};

Dims draw_dims(Rng& rng) {
  static constexpr std::array<std::size_t, 4> kTaps = {1, 3, 5, 9};
  static constexpr std::array<std::size_t, 3> kHeads = {1, 2, 4};
  Dims s{};
  s.n = pick(rng, 1, 16);
  s.heads = kHeads[pick(rng, 0, kHeads.size() - 1)];
  s.head_dim = pick(rng, 1, 16 / s.heads);
  s.d = s.heads * s.head_dim;
  s.k = kTaps[pick(rng, 0, kTaps.size() - 1)];
  return s;
}

KernelGenerator random_generator(Rng& rng, const Dims& s) {
  KernelGenerator g;
  g.weight = random_tensor(rng, {s.heads, s.head_dim, s.k});
  g.bias = random_tensor(rng, {s.heads * s.k});
  return g;
}

using Check = std::function<double(Rng&)>;

double check_dwconv(Rng& rng) {
  const Dims s = draw_dims(rng);
  const Tensor x = random_tensor(rng, {s.n, s.d}), w = random_tensor(rng, {s.d, s.k});
  return ref::max_abs_diff(dwconv(x, w).data(), ref::dwconv(as_matrix(x), as_matrix(w)).v);
}

double check_lconv(Rng& rng) {
  const Dims s = draw_dims(rng);
  const Tensor v = random_tensor(rng, {s.n, s.d});
  const KernelSet kernels(softmax(random_tensor(rng, {s.n, s.heads, s.k}), 2));
  return ref::max_abs_diff(lconv(v, kernels).data(), ref::lconv(as_matrix(v), as_kernels(kernels)).v);
}

double check_dconv(Rng& rng) {
  const Dims s = draw_dims(rng);
  const Tensor x = random_tensor(rng, {s.n, s.d});
  const KernelGenerator g = random_generator(rng, s);
  return ref::max_abs_diff(dconv(x, g).data(),
                           ref::dconv(as_matrix(x), g.weight.data(), g.bias.data(), s.heads, s.k).v);
}

double check_span_key(Rng& rng) {
  const Dims s = draw_dims(rng);
  const std::size_t out = pick(rng, 1, 16);
  const Tensor x = random_tensor(rng, {s.n, s.d}), dw = random_tensor(rng, {s.d, s.k});
  const Tensor pw = random_tensor(rng, {s.d, out}), b = random_tensor(rng, {out});
  return ref::max_abs_diff(span_key(x, dw, pw, b).data(),
                           ref::span_key(as_matrix(x), as_matrix(dw), as_matrix(pw), b.data()).v);
}

double check_kernel_gen(Rng& rng) {
  const Dims s = draw_dims(rng);
  const Tensor q = random_tensor(rng, {s.n, s.d}), ks = random_tensor(rng, {s.n, s.d});
  const KernelGenerator g = random_generator(rng, s);
  const ref::Kernels expect = ref::kernel_gen(as_matrix(q), as_matrix(ks), g.weight.data(), g.bias.data(), s.heads, s.k);
  return ref::max_abs_diff(kernel_gen(q, ks, g).values().data(), flatten(expect));
}

double check_sdconv(Rng& rng) {
  const Dims s = draw_dims(rng);
  const Tensor q = random_tensor(rng, {s.n, s.d}), ks = random_tensor(rng, {s.n, s.d});
  const Tensor v = random_tensor(rng, {s.n, s.d});
  const KernelGenerator g = random_generator(rng, s);
  return ref::max_abs_diff(
      sdconv(q, ks, v, g).data(),
      ref::sdconv(as_matrix(q), as_matrix(ks), as_matrix(v), g.weight.data(), g.bias.data(), s.heads, s.k).v);
}

double check_self_attention(Rng& rng) {
  const Dims s = draw_dims(rng);
  const Tensor q = random_tensor(rng, {s.n, s.d}), k = random_tensor(rng, {s.n, s.d});
  const Tensor v = random_tensor(rng, {s.n, s.d});
  const std::vector<std::uint8_t> valid = random_mask(rng, s.n);
  Tensor weights;
  const Tensor out = self_attention(q, k, v, s.heads, valid, &weights);
  std::vector<ref::Matrix> expect_weights;
  const ref::Matrix expect = ref::attention(as_matrix(q), as_matrix(k), as_matrix(v), s.heads, valid, &expect_weights);
  std::vector<double> flat_weights;
  for (const auto& m : expect_weights) flat_weights.insert(flat_weights.end(), m.v.begin(), m.v.end());
  return std::max(ref::max_abs_diff(out.data(), expect.v), ref::max_abs_diff(weights.data(), flat_weights));
}

double check_grouped_linear(Rng& rng) {
  static constexpr std::array<std::size_t, 4> kGroups = {1, 2, 4, 8};
  const std::size_t groups = kGroups[pick(rng, 0, kGroups.size() - 1)];
  const std::size_t n = pick(rng, 1, 16);
  const std::size_t a = groups * pick(rng, 1, 16 / groups), b = groups * pick(rng, 1, 16 / groups);
  const Tensor x = random_tensor(rng, {n, a});
  const Tensor w = groups == 1 ? random_tensor(rng, {a, b}) : random_tensor(rng, {groups, a / groups, b / groups});
  const Tensor bias = random_tensor(rng, {b});
  return ref::max_abs_diff(grouped_linear(x, w, bias).data(),
                           ref::grouped_linear(as_matrix(x), w.data(), groups, b, bias.data()).v);
}

double check_mixed_attention(Rng& rng) {
  MixedAttentionConfig cfg;
  cfg.heads = pick(rng, 0, 1) == 0 ? 2 : 4;
  cfg.reduction = 2;
  cfg.head_dim = pick(rng, 1, 16 / cfg.heads);
  cfg.d = cfg.heads * cfg.head_dim;
  static constexpr std::array<std::size_t, 4> kTaps = {1, 3, 5, 9};
  cfg.kernel = kTaps[pick(rng, 0, kTaps.size() - 1)];
  cfg.use_conv = pick(rng, 0, 3) != 0;
  MixedAttention block(cfg, rng);
  ParameterList params;
  block.collect(params, "block");
  for (const Tensor& t : params.unique_tensors()) {
    Tensor p = t;
    const std::vector<double> v = normals(rng, p.numel(), 0.5);
    std::copy(v.begin(), v.end(), p.mutable_data().begin());
  }
  const std::size_t n = pick(rng, 1, 16);
  const Tensor x = random_tensor(rng, {n, cfg.d});
  const std::vector<std::uint8_t> valid = random_mask(rng, n);
  return ref::max_abs_diff(block.forward(x, valid).data(), ref::mixed_attention(block, as_matrix(x), valid).v);
}

}  // namespace

std::vector<OracleResult> run_oracle_suite(std::uint64_t seed, std::size_t instances) {
  const std::vector<std::pair<std::string, Check>> checks = {
      {"dwconv", check_dwconv},
      {"lconv", check_lconv},
      {"dconv", check_dconv},
      {"span_key", check_span_key},
      {"kernel_gen", check_kernel_gen},
      {"sdconv", check_sdconv},
      {"self_attention", check_self_attention},
      {"grouped_linear", check_grouped_linear},
      {"mixed_attention", check_mixed_attention},
  };
  NoGradGuard no_grad;
  std::vector<OracleResult> results;
  for (std::size_t c = 0; c < checks.size(); ++c) {
    OracleResult r;
    r.op = checks[c].first;
    for (std::size_t i = 0; i < instances; ++i) {
      Rng rng(seed * 7919 + c * 1000003 + i);
      const double err = checks[c].second(rng);
      r.max_error = std::isfinite(err) ? std::max(r.max_error, err) : INFINITY;
      ++r.instances;
    }
    results.push_back(r);
  }
  return results;
}

}  // namespace convbert::verify
