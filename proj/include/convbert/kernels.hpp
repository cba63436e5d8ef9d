#pragma once

// Raw compute kernels behind the differentiable ops.
//
// `serial` is the plain single-threaded reference; `parallel` distributes the
// same arithmetic over OpenMP threads. Every output element is accumulated in
// the same order by both, so results agree bitwise. Backward kernels
// accumulate into their outputs; pass an empty span to skip a gradient.

#include <cstddef>
#include <cstdint>
#include <span>

namespace convbert::kernels {

// Sizes shared by the attention kernels. Q, K, V and the output are
// [n x heads*head_dim]; head h owns columns [h*head_dim, (h+1)*head_dim).
struct AttentionShape {
  std::size_t n;
  std::size_t heads;
  std::size_t head_dim;
};

// C[m x n] (+)= op(A) * op(B). op(A) is m x k; A is stored row-major with
// leading dimension lda (k when not transposed, m when transposed).
struct GemmArgs {
  bool trans_a = false;
  bool trans_b = false;
  std::size_t m = 0, n = 0, k = 0;
  const double* a = nullptr;
  std::size_t lda = 0;
  const double* b = nullptr;
  std::size_t ldb = 0;
  double* c = nullptr;
  std::size_t ldc = 0;
  bool accumulate = false;
};

#define CONVBERT_KERNEL_SET                                                                                    \
  void gemm(const GemmArgs& args);                                                                             \
  /* out[i][c] = sum_j w[c][j] * x[i + j - half][c], zero padded */                                           \
  void dwconv_forward(std::span<const double> x, std::span<const double> w, std::size_t n, std::size_t d,     \
                      std::size_t k, std::span<double> out);                                                   \
  void dwconv_backward(std::span<const double> x, std::span<const double> w, std::span<const double> dout,    \
                       std::size_t n, std::size_t d, std::size_t k, std::span<double> dx, std::span<double> dw); \
  /* out[i][c] = sum_j kern[i][h(c)][j] * v[i + j - half][c], h(c) = c / (d / heads) */                       \
  void lconv_forward(std::span<const double> v, std::span<const double> kern, std::size_t n, std::size_t d,   \
                     std::size_t heads, std::size_t k, std::span<double> out);                                 \
  void lconv_backward(std::span<const double> v, std::span<const double> kern, std::span<const double> dout,  \
                      std::size_t n, std::size_t d, std::size_t heads, std::size_t k, std::span<double> dv,    \
                      std::span<double> dkern);                                                                \
  /* Scaled dot-product attention. `valid` is empty (all valid) or n flags. */                                 \
  /* weights is [heads x n x n]; fully masked query rows get zero weights. */                                  \
  void attention_forward(std::span<const double> q, std::span<const double> k, std::span<const double> v,     \
                         std::span<const std::uint8_t> valid, const AttentionShape& s, std::span<double> out,  \
                         std::span<double> weights);                                                           \
  void attention_backward(std::span<const double> q, std::span<const double> k, std::span<const double> v,    \
                          std::span<const double> weights, std::span<const double> dout,                       \
                          const AttentionShape& s, std::span<double> dq, std::span<double> dk,                 \
                          std::span<double> dv);

namespace serial {
CONVBERT_KERNEL_SET
}  // namespace serial

namespace parallel {
CONVBERT_KERNEL_SET
int max_threads();
}  // namespace parallel

#undef CONVBERT_KERNEL_SET

}  // namespace convbert::kernels
