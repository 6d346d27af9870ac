#pragma once

// Row-major dense kernels. All gemm variants accumulate into C.

#include <cstddef>

namespace genie::kernels {

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

struct ConvGeometry {
  std::size_t channels, height, width, kernel_h, kernel_w, stride, padding;

  std::size_t out_h() const { return (height + 2 * padding - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * padding - kernel_w) / stride + 1; }
  bool is_pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && padding == 0; }
};

// cols[(c*kh + i)*kw + j, oy*ow + ox] = img[c, oy*s - p + i, ox*s - p + j] (0 outside)
void im2col(const ConvGeometry& g, const double* img, double* cols);
// Adjoint of im2col: scatter-adds cols back into img.
void col2im_add(const ConvGeometry& g, const double* cols, double* img);

}  // namespace genie::kernels
