#pragma once

// Naive double-precision reference implementations used as independent
// oracles by the test suites. Deliberately written as direct loops with no
// shared code with the library's BLAS-backed kernels.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "certood/network.hpp"

namespace oracle {

using certood::Shape;
using certood::Tensor;

inline std::vector<double> widen(const Tensor& t) {
    std::vector<double> out(static_cast<std::size_t>(t.numel()));
    for (std::int64_t i = 0; i < t.numel(); ++i) out[static_cast<std::size_t>(i)] = t[i];
    return out;
}

// out[i] = sum_j w[i,j] x[j] + b[i]
inline std::vector<double> affine(const std::vector<double>& x, const Tensor& w, const Tensor& b) {
    const int m = w.dim(0), n = w.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m), 0.0);
    for (int i = 0; i < m; ++i) {
        double acc = b.defined() ? b[i] : 0.0;
        for (int j = 0; j < n; ++j) acc += static_cast<double>(w[i * n + j]) * x[static_cast<std::size_t>(j)];
        out[static_cast<std::size_t>(i)] = acc;
    }
    return out;
}

// 3x3 cross-correlation, padding 1; x is [C,H,W] flattened
inline std::vector<double> conv2d(const std::vector<double>& x, int C, int H, int W,
                                  const Tensor& kernel, const Tensor& bias, int stride) {
    const int F = kernel.dim(0);
    const int OH = (H + 2 - 3) / stride + 1, OW = (W + 2 - 3) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(F) * OH * OW, 0.0);
    for (int f = 0; f < F; ++f)
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
                double acc = bias.defined() ? bias[f] : 0.0;
                for (int c = 0; c < C; ++c)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = oy * stride + ky - 1, ix = ox * stride + kx - 1;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            acc += static_cast<double>(kernel.at({f, c, ky, kx})) *
                                   x[(static_cast<std::size_t>(c) * H + iy) * W + ix];
                        }
                out[(static_cast<std::size_t>(f) * OH + oy) * OW + ox] = acc;
            }
    return out;
}

inline void relu(std::vector<double>& v) {
    for (double& x : v) x = std::max(0.0, x);
}

inline double log_sum_exp(const std::vector<double>& v) {
    double m = v[0];
    for (double x : v) m = std::max(m, x);
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

inline double confidence(const std::vector<double>& logits) {
    double m = logits[0];
    for (double x : logits) m = std::max(m, x);
    double s = 0.0;
    for (double x : logits) s += std::exp(x - m);
    return 1.0 / s;
}

/// Layer-by-layer forward of one sample through a NetworkSpec.
inline std::vector<double> forward(const certood::NetworkSpec& spec,
                                   const certood::ParamStore& params,
                                   const std::vector<double>& sample) {
    std::vector<double> cur = sample;
    Shape shape{spec.inputShape[0], spec.inputShape[1], spec.inputShape[2]};
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const certood::LayerSpec& l = spec.layers[i];
        switch (l.kind) {
            case certood::LayerKind::Conv:
                cur = conv2d(cur, shape[0], shape[1], shape[2], params.weights[i],
                             params.biases[i], l.stride);
                shape = {l.out, (shape[1] + 2 - 3) / l.stride + 1, (shape[2] + 2 - 3) / l.stride + 1};
                break;
            case certood::LayerKind::Affine:
                cur = affine(cur, params.weights[i], params.biases[i]);
                shape = {l.out};
                break;
            case certood::LayerKind::Relu:
                relu(cur);
                break;
            case certood::LayerKind::Flatten:
                shape = {static_cast<int>(cur.size())};
                break;
        }
    }
    return cur;
}

/// Naive interval affine step: per-entry sign split.
inline void iv_affine(const std::vector<double>& lo, const std::vector<double>& hi,
                      const Tensor& w, const Tensor& b, bool applyRelu,
                      std::vector<double>& loOut, std::vector<double>& hiOut) {
    const int m = w.dim(0), n = w.dim(1);
    loOut.assign(static_cast<std::size_t>(m), 0.0);
    hiOut.assign(static_cast<std::size_t>(m), 0.0);
    for (int i = 0; i < m; ++i) {
        double accLo = b.defined() ? b[i] : 0.0, accHi = accLo;
        for (int j = 0; j < n; ++j) {
            const double wij = w[i * n + j];
            if (wij >= 0.0) {
                accHi += wij * hi[static_cast<std::size_t>(j)];
                accLo += wij * lo[static_cast<std::size_t>(j)];
            } else {
                accHi += wij * lo[static_cast<std::size_t>(j)];
                accLo += wij * hi[static_cast<std::size_t>(j)];
            }
        }
        if (applyRelu) {
            accLo = std::max(0.0, accLo);
            accHi = std::max(0.0, accHi);
        }
        loOut[static_cast<std::size_t>(i)] = accLo;
        hiOut[static_cast<std::size_t>(i)] = accHi;
    }
}

/// Central finite differences of a scalar function of a float vector.
/// Returns d f / d x_i for each i.
inline std::vector<double> finite_diff(const std::function<double(const std::vector<float>&)>& f,
                                       std::vector<float> x, double h = 1e-3) {
    std::vector<double> grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float keep = x[i];
        x[i] = static_cast<float>(keep + h);
        const double up = f(x);
        x[i] = static_cast<float>(keep - h);
        const double down = f(x);
        x[i] = keep;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

/// Relative error with a floor so near-zero gradients compare sanely.
inline double rel_err(double a, double b, double floor = 1e-2) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

inline Tensor random_tensor(Shape shape, std::mt19937& rng, float lo = -1.0f, float hi = 1.0f) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = certood::uniform_in(rng, lo, hi);
    return t;
}

/// Small random ReLU net: affine stacks with input dim <= 12, 2-4
/// parameterized layers, K classes.
inline std::pair<certood::NetworkSpec, certood::ParamStore> random_small_net(std::mt19937& rng,
                                                                             int* inputDim = nullptr) {
    const int d = 2 + static_cast<int>(rng() % 11);       // 2..12
    const int layers = 2 + static_cast<int>(rng() % 3);   // 2..4 parameterized
    const int K = 2 + static_cast<int>(rng() % 4);        // 2..5 classes
    certood::NetworkSpec spec;
    spec.inputShape = {1, 1, d};
    spec.classCount = K;
    spec.layers.push_back(certood::LayerSpec::flatten());
    for (int i = 0; i < layers - 1; ++i) {
        spec.layers.push_back(certood::LayerSpec::affine(3 + static_cast<int>(rng() % 6)));
        spec.layers.push_back(certood::LayerSpec::relu());
    }
    spec.layers.push_back(certood::LayerSpec::affine(K));
    certood::ParamStore params = certood::init_params(spec, rng());
    // rescale weights so logits span a few units
    for (Tensor& w : params.weights)
        if (w.defined())
            for (std::int64_t i = 0; i < w.numel(); ++i) w[i] *= 2.0f;
    for (Tensor& b : params.biases)
        if (b.defined())
            for (std::int64_t i = 0; i < b.numel(); ++i)
                b[i] = certood::uniform_in(rng, -0.5f, 0.5f);
    if (inputDim) *inputDim = d;
    return {spec, params};
}

}  // namespace oracle
