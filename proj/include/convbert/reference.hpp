#pragma once

// Naive loop implementations on plain row-major matrices. They share no code
// with the kernels and serve as test oracles.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace convbert {
class ConvBertModel;
struct MixedAttention;
}  // namespace convbert

namespace convbert::reference {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::span<const double> values);
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

// kernels[i][h][j]
using Kernels = std::vector<std::vector<std::vector<double>>>;

double max_abs_diff(std::span<const double> a, std::span<const double> b);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix add_bias(Matrix x, std::span<const double> bias);
std::vector<double> softmax(std::span<const double> logits);
Matrix layer_norm(const Matrix& x, std::span<const double> gamma, std::span<const double> beta, double eps = 1e-12);
Matrix gelu(const Matrix& x);

// weight: groups blocks of [a/g x b/g], stored back to back.
Matrix grouped_linear(const Matrix& x, std::span<const double> weight, std::size_t groups, std::size_t out,
                      std::span<const double> bias);

Matrix dwconv(const Matrix& x, const Matrix& w);
Matrix lconv(const Matrix& v, const Kernels& kernels);
Matrix glu(const Matrix& x);

// Per-head kernel generator: wf is [heads x d_head x k], bias [heads*k] or empty.
Kernels generate_kernels(const Matrix& features, std::span<const double> wf, std::span<const double> bias,
                         std::size_t heads, std::size_t k);
Kernels dconv_kernels(const Matrix& x, std::span<const double> wf, std::span<const double> bias, std::size_t heads,
                      std::size_t k);
Matrix dconv(const Matrix& x, std::span<const double> wf, std::span<const double> bias, std::size_t heads, std::size_t k);
Matrix span_key(const Matrix& x, const Matrix& depthwise, const Matrix& pointwise, std::span<const double> bias);
Kernels kernel_gen(const Matrix& q, const Matrix& key_span, std::span<const double> wf, std::span<const double> bias,
                   std::size_t heads, std::size_t k);
Matrix sdconv(const Matrix& q, const Matrix& key_span, const Matrix& v, std::span<const double> wf,
              std::span<const double> bias, std::size_t heads, std::size_t k);

// Scaled dot-product attention, one head at a time. `weights` (optional)
// receives [heads][n][n].
Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads,
                 std::span<const std::uint8_t> valid = {}, std::vector<Matrix>* weights = nullptr);

// Mixed attention block recomputed from the block's parameter values.
Matrix mixed_attention(const MixedAttention& block, const Matrix& x, std::span<const std::uint8_t> valid = {});

// Full encoder forward recomputed layer by layer from parameter values.
Matrix model_forward(const ConvBertModel& model, std::span<const std::int64_t> ids);

}  // namespace convbert::reference
