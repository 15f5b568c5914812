#pragma once

#include <cblas.h>

#include <cstring>
#include <vector>

#include "certood/tensor.hpp"

// Dense kernels shared by the autodiff tape (float32, BLAS) and by the
// evaluation paths. Convolutions are 3x3, padding 1, stride 1 or 2,
// cross-correlation semantics (no kernel flip).

namespace certood {

inline void sgemm(bool transA, bool transB, int m, int n, int k, float alpha,
                  const float* a, int lda, const float* b, int ldb, float beta,
                  float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, transA ? CblasTrans : CblasNoTrans,
                transB ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
                beta, c, ldc);
}

inline int conv_out_extent(int in, int stride) { return (in + 2 - 3) / stride + 1; }

/// Columns of the 3x3 receptive fields of one image, laid out
/// [C*9, OH*OW]. Out-of-bounds taps are zero (zero padding of 1).
/// rowStride lets several images share one matrix side by side.
template <typename TIn, typename TOut>
void im2col3x3(const TIn* img, int C, int H, int W, int stride, TOut* col,
               std::int64_t rowStride = -1) {
    const int OH = conv_out_extent(H, stride), OW = conv_out_extent(W, stride);
    const int cols = OH * OW;
    if (rowStride < 0) rowStride = cols;
    for (int c = 0; c < C; ++c) {
        const TIn* plane = img + static_cast<std::size_t>(c) * H * W;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                TOut* row = col + static_cast<std::size_t>((c * 9 + ky * 3 + kx)) * rowStride;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= H) {
                        for (int ox = 0; ox < OW; ++ox) row[oy * OW + ox] = TOut(0);
                        continue;
                    }
                    const TIn* src = plane + static_cast<std::size_t>(iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        row[oy * OW + ox] = (ix < 0 || ix >= W) ? TOut(0) : TOut(src[ix]);
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back onto an image gradient.
inline void col2im3x3(const float* col, int C, int H, int W, int stride, float* img,
                      std::int64_t rowStride = -1) {
    const int OH = conv_out_extent(H, stride), OW = conv_out_extent(W, stride);
    const int cols = OH * OW;
    if (rowStride < 0) rowStride = cols;
    for (int c = 0; c < C; ++c) {
        float* plane = img + static_cast<std::size_t>(c) * H * W;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const float* row = col + static_cast<std::size_t>((c * 9 + ky * 3 + kx)) * rowStride;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= H) continue;
                    float* dst = plane + static_cast<std::size_t>(iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        if (ix >= 0 && ix < W) dst[ix] += row[oy * OW + ox];
                    }
                }
            }
        }
    }
}

namespace detail {
inline int conv_chunk(std::int64_t perImageCols) {
    // keep the im2col buffer around a few MB while the gemms stay wide
    const std::int64_t budget = 4 << 20;
    std::int64_t n = budget / std::max<std::int64_t>(1, perImageCols);
    return static_cast<int>(std::max<std::int64_t>(1, std::min<std::int64_t>(64, n)));
}

/// Permutes a [n, F, cols] gradient block into [F, n*cols] with sample-major
/// columns, matching the im2col chunk layout.
inline void gather_grad_chunk(const float* gradOut, int b0, int n, int F, int cols, float* dst) {
    for (int i = 0; i < n; ++i)
        for (int f = 0; f < F; ++f)
            std::memcpy(dst + (static_cast<std::size_t>(f) * n + i) * cols,
                        gradOut + (static_cast<std::size_t>(b0 + i) * F + f) * cols,
                        sizeof(float) * static_cast<std::size_t>(cols));
}
}  // namespace detail

/// out[b,f,:,:] = sum_c kernel[f,c,:,:] (*) in[b,c,:,:] + bias[f]
inline void conv2d_forward(const float* in, int B, int C, int H, int W,
                           const float* kernel, int F, const float* bias, int stride,
                           float* out) {
    const int OH = conv_out_extent(H, stride), OW = conv_out_extent(W, stride);
    const int cols = OH * OW, K = C * 9;
    const int chunk = detail::conv_chunk(static_cast<std::int64_t>(K) * cols);
    std::vector<float> col(static_cast<std::size_t>(K) * cols * chunk);
    std::vector<float> tmp(static_cast<std::size_t>(F) * cols * chunk);
    for (int b0 = 0; b0 < B; b0 += chunk) {
        const int n = std::min(chunk, B - b0);
        // col holds n images side by side: [K, n*cols], sample i in columns [i*cols, (i+1)*cols)
        for (int i = 0; i < n; ++i)
            im2col3x3(in + static_cast<std::size_t>(b0 + i) * C * H * W, C, H, W, stride,
                      col.data() + static_cast<std::size_t>(i) * cols,
                      static_cast<std::int64_t>(n) * cols);
        sgemm(false, false, F, n * cols, K, 1.0f, kernel, K, col.data(), n * cols, 0.0f,
              tmp.data(), n * cols);
        for (int f = 0; f < F; ++f) {
            const float bf = bias ? bias[f] : 0.0f;
            for (int i = 0; i < n; ++i) {
                const float* src = tmp.data() + (static_cast<std::size_t>(f) * n + i) * cols;
                float* dst = out + ((static_cast<std::size_t>(b0 + i) * F) + f) * cols;
                for (int p = 0; p < cols; ++p) dst[p] = src[p] + bf;
            }
        }
    }
}

/// Accumulates input/kernel/bias gradients (+=) for conv2d_forward.
/// Null pointers skip the corresponding gradient.
inline void conv2d_backward(const float* in, int B, int C, int H, int W,
                            const float* kernel, int F, int stride, const float* gradOut,
                            float* gradIn, float* gradKernel, float* gradBias) {
    const int OH = conv_out_extent(H, stride), OW = conv_out_extent(W, stride);
    const int cols = OH * OW, K = C * 9;
    const int chunk = detail::conv_chunk(static_cast<std::int64_t>(K) * cols);
    std::vector<float> col, go, dcol;
    go.resize(static_cast<std::size_t>(F) * cols * chunk);
    if (gradKernel) col.resize(static_cast<std::size_t>(K) * cols * chunk);
    if (gradIn) dcol.resize(static_cast<std::size_t>(K) * cols * chunk);
    for (int b0 = 0; b0 < B; b0 += chunk) {
        const int n = std::min(chunk, B - b0);
        detail::gather_grad_chunk(gradOut, b0, n, F, cols, go.data());
        if (gradKernel) {
            for (int i = 0; i < n; ++i)
                im2col3x3(in + static_cast<std::size_t>(b0 + i) * C * H * W, C, H, W, stride,
                          col.data() + static_cast<std::size_t>(i) * cols,
                          static_cast<std::int64_t>(n) * cols);
            // dK[F,K] += go[F, n*cols] * col[K, n*cols]^T
            sgemm(false, true, F, K, n * cols, 1.0f, go.data(), n * cols, col.data(), n * cols,
                  1.0f, gradKernel, K);
        }
        if (gradIn) {
            // dcol[K, n*cols] = kernel[F,K]^T * go[F, n*cols]
            sgemm(true, false, K, n * cols, F, 1.0f, kernel, K, go.data(), n * cols, 0.0f,
                  dcol.data(), n * cols);
            for (int i = 0; i < n; ++i)
                col2im3x3(dcol.data() + static_cast<std::size_t>(i) * cols, C, H, W, stride,
                          gradIn + static_cast<std::size_t>(b0 + i) * C * H * W,
                          static_cast<std::int64_t>(n) * cols);
        }
    }
    if (gradBias)
        for (int b = 0; b < B; ++b)
            for (int f = 0; f < F; ++f) {
                const float* row = gradOut + (static_cast<std::size_t>(b) * F + f) * cols;
                float s = 0.0f;
                for (int p = 0; p < cols; ++p) s += row[p];
                gradBias[f] += s;
            }
}

/// out[b,i] = sum_j w[i,j] x[b,j] + bias[i]
inline void affine_forward(const float* x, int B, int n, const float* w, int m,
                           const float* bias, float* out) {
    sgemm(false, true, B, m, n, 1.0f, x, n, w, n, 0.0f, out, m);
    if (bias)
        for (int b = 0; b < B; ++b) {
            float* row = out + static_cast<std::size_t>(b) * m;
            for (int i = 0; i < m; ++i) row[i] += bias[i];
        }
}

inline void affine_backward(const float* x, int B, int n, const float* w, int m,
                            const float* gradOut, float* gradX, float* gradW,
                            float* gradBias) {
    if (gradX)  // dX[B,n] += gO[B,m] * W[m,n]
        sgemm(false, false, B, n, m, 1.0f, gradOut, m, w, n, 1.0f, gradX, n);
    if (gradW)  // dW[m,n] += gO^T[m,B] * X[B,n]
        sgemm(true, false, m, n, B, 1.0f, gradOut, m, x, n, 1.0f, gradW, n);
    if (gradBias)
        for (int b = 0; b < B; ++b) {
            const float* row = gradOut + static_cast<std::size_t>(b) * m;
            for (int i = 0; i < m; ++i) gradBias[i] += row[i];
        }
}

}  // namespace certood
