#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

// Dense inner loops shared by convolution and matmul. Everything here is
// single-threaded and order-fixed, so results are bitwise reproducible.
namespace segkit::kernels {

// C[m x n] += A[m x k] * B[k x n], all row-major and densely packed.
template <typename T>
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* c0 = c + (i + 0) * n;
    T* c1 = c + (i + 1) * n;
    T* c2 = c + (i + 2) * n;
    T* c3 = c + (i + 3) * n;
    const T* a0 = a + (i + 0) * k;
    const T* a1 = a + (i + 1) * k;
    const T* a2 = a + (i + 2) * k;
    const T* a3 = a + (i + 3) * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      const T* __restrict br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = br[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* __restrict ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T v = ai[p];
      const T* __restrict br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += v * br[j];
    }
  }
}

// dst[cols x rows] = src[rows x cols]^T
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
    const std::size_t r1 = std::min(rows, r0 + kBlock);
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t c1 = std::min(cols, c0 + kBlock);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel, stride, padding, dilation;
  std::size_t out_h, out_w;
};

// Unfolds one image's channel block into [channels*k*k x out_h*out_w].
template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
  const std::size_t plane = g.out_h * g.out_w;
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* src = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        T* dst = col + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        const auto off_y = static_cast<std::ptrdiff_t>(ky * g.dilation) - pad;
        const auto off_x = static_cast<std::ptrdiff_t>(kx * g.dilation) - pad;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride) + off_y;
          T* row = dst + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(row, row + g.out_w, T{0});
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(iy) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride) + off_x;
            row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T{0} : srow[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds columns back into the image gradient.
template <typename T>
void col2im_acc(const ConvGeometry& g, const T* col, T* image) {
  const std::size_t plane = g.out_h * g.out_w;
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* dst = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const T* src = col + ((c * g.kernel + ky) * g.kernel + kx) * plane;
        const auto off_y = static_cast<std::ptrdiff_t>(ky * g.dilation) - pad;
        const auto off_x = static_cast<std::ptrdiff_t>(kx * g.dilation) - pad;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride) + off_y;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* drow = dst + static_cast<std::size_t>(iy) * g.width;
          const T* row = src + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride) + off_x;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) drow[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace segkit::kernels
