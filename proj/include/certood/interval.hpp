#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "certood/network.hpp"

// Interval bound propagation. For a linear layer with weights W the bounds
// of the next layer are
//     hi' = max(W,0) hi + min(W,0) lo + b
//     lo' = min(W,0) hi + max(W,0) lo + b
// optionally followed by the (monotone) ReLU. The logits themselves are
// never bounded directly: the last affine layer is elided into pairwise
// logit differences, which is tighter.

namespace certood {

struct IntervalTensor {
    Tensor lower;
    Tensor upper;

    void check() const {
        require_same_shape(lower, upper, "interval");
        for (std::int64_t i = 0; i < lower.numel(); ++i)
            if (!(lower[i] <= upper[i]))
                throw ContractError("interval lower exceeds upper at element " +
                                    std::to_string(i));
    }
};

/// The reachable input box. Unclipped: [x-eps, x+eps]; clipped: its
/// intersection with the image domain [0,1]^d.
inline IntervalTensor input_interval(const Tensor& x, double epsilon, bool clipToDomain) {
    if (epsilon < 0.0) throw ContractError("input_interval: negative epsilon");
    Tensor lo = x.clone(), hi = x.clone();
    const float e = static_cast<float>(epsilon);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        float l = x[i] - e, u = x[i] + e;
        if (clipToDomain) {
            l = std::max(0.0f, l);
            u = std::min(1.0f, u);
        }
        lo[i] = l;
        hi[i] = u;
    }
    return {lo, hi};
}

namespace detail {

// outward rounding so float32 results stay sound enclosures of the
// double-precision arithmetic
inline float round_up(double v) {
    float f = static_cast<float>(v);
    if (static_cast<double>(f) < v) f = std::nextafter(f, std::numeric_limits<float>::infinity());
    return f;
}
inline float round_down(double v) {
    float f = static_cast<float>(v);
    if (static_cast<double>(f) > v) f = std::nextafter(f, -std::numeric_limits<float>::infinity());
    return f;
}

inline void split_signs(const Tensor& w, std::vector<double>& plus, std::vector<double>& minus) {
    plus.resize(static_cast<std::size_t>(w.numel()));
    minus.resize(static_cast<std::size_t>(w.numel()));
    for (std::int64_t i = 0; i < w.numel(); ++i) {
        plus[static_cast<std::size_t>(i)] = std::max(0.0f, w[i]);
        minus[static_cast<std::size_t>(i)] = std::min(0.0f, w[i]);
    }
}

constexpr double kOverflowGuard = 1e30;

inline void check_magnitude(const std::vector<double>& v, int layer) {
    for (double x : v)
        if (!(std::fabs(x) <= kOverflowGuard))
            throw NumericError("interval propagation overflow at layer " + std::to_string(layer),
                               layer);
}

/// One affine interval step in doubles: out spans [B, m].
inline void iv_affine_f64(const std::vector<double>& lo, const std::vector<double>& hi, int B,
                          int n, const Tensor& w, const Tensor& bias, bool applyRelu,
                          std::vector<double>& loOut, std::vector<double>& hiOut) {
    const int m = w.dim(0);
    std::vector<double> wp, wm;
    split_signs(w, wp, wm);
    loOut.assign(static_cast<std::size_t>(B) * m, 0.0);
    hiOut.assign(static_cast<std::size_t>(B) * m, 0.0);
    f64::dgemm(false, true, B, m, n, 1.0, hi.data(), n, wp.data(), n, 0.0, hiOut.data(), m);
    f64::dgemm(false, true, B, m, n, 1.0, lo.data(), n, wm.data(), n, 1.0, hiOut.data(), m);
    f64::dgemm(false, true, B, m, n, 1.0, lo.data(), n, wp.data(), n, 0.0, loOut.data(), m);
    f64::dgemm(false, true, B, m, n, 1.0, hi.data(), n, wm.data(), n, 1.0, loOut.data(), m);
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < m; ++i) {
            double& l = loOut[static_cast<std::size_t>(b) * m + i];
            double& u = hiOut[static_cast<std::size_t>(b) * m + i];
            if (bias.defined()) {
                l += bias[i];
                u += bias[i];
            }
            if (applyRelu) {
                l = std::max(0.0, l);
                u = std::max(0.0, u);
            }
        }
}

/// One convolution interval step in doubles (kernel split by sign).
inline void iv_conv_f64(const std::vector<double>& lo, const std::vector<double>& hi, int B,
                        int C, int H, int W, const Tensor& kernel, const Tensor& bias,
                        int stride, bool applyRelu, std::vector<double>& loOut,
                        std::vector<double>& hiOut) {
    const int F = kernel.dim(0);
    const int OH = conv_out_extent(H, stride), OW = conv_out_extent(W, stride);
    const int cols = OH * OW, K = C * 9;
    std::vector<double> kp, km;
    split_signs(kernel, kp, km);
    loOut.assign(static_cast<std::size_t>(B) * F * cols, 0.0);
    hiOut.assign(static_cast<std::size_t>(B) * F * cols, 0.0);
    std::vector<double> colLo(static_cast<std::size_t>(K) * cols),
        colHi(static_cast<std::size_t>(K) * cols);
    for (int b = 0; b < B; ++b) {
        const std::size_t inOff = static_cast<std::size_t>(b) * C * H * W;
        im2col3x3(lo.data() + inOff, C, H, W, stride, colLo.data());
        im2col3x3(hi.data() + inOff, C, H, W, stride, colHi.data());
        double* lb = loOut.data() + static_cast<std::size_t>(b) * F * cols;
        double* ub = hiOut.data() + static_cast<std::size_t>(b) * F * cols;
        f64::dgemm(false, false, F, cols, K, 1.0, kp.data(), K, colHi.data(), cols, 0.0, ub, cols);
        f64::dgemm(false, false, F, cols, K, 1.0, km.data(), K, colLo.data(), cols, 1.0, ub, cols);
        f64::dgemm(false, false, F, cols, K, 1.0, kp.data(), K, colLo.data(), cols, 0.0, lb, cols);
        f64::dgemm(false, false, F, cols, K, 1.0, km.data(), K, colHi.data(), cols, 1.0, lb, cols);
        for (int f = 0; f < F; ++f)
            for (int p = 0; p < cols; ++p) {
                double& l = lb[static_cast<std::size_t>(f) * cols + p];
                double& u = ub[static_cast<std::size_t>(f) * cols + p];
                if (bias.defined()) {
                    l += bias[f];
                    u += bias[f];
                }
                if (applyRelu) {
                    l = std::max(0.0, l);
                    u = std::max(0.0, u);
                }
            }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// public single-step propagation (float32 surface, sound outward rounding)

/// Batched interval affine step. Shapes: iv [B,n] (or [n]), weight [m,n].
inline IntervalTensor propagate_affine(const IntervalTensor& iv, const Tensor& weight,
                                       const Tensor& bias, bool applyReLU) {
    Tensor lo = iv.lower.rank() == 1 ? iv.lower.reshaped({1, static_cast<int>(iv.lower.numel())})
                                     : iv.lower;
    Tensor hi = iv.upper.rank() == 1 ? iv.upper.reshaped({1, static_cast<int>(iv.upper.numel())})
                                     : iv.upper;
    if (lo.rank() != 2 || weight.rank() != 2 || lo.dim(1) != weight.dim(1))
        throw DimensionError("propagate_affine: interval " + shape_str(lo.shape()) +
                             " vs weight " + shape_str(weight.shape()));
    const int B = lo.dim(0), n = lo.dim(1), m = weight.dim(0);
    std::vector<double> l64 = f64::widen(lo), h64 = f64::widen(hi), lOut, hOut;
    detail::iv_affine_f64(l64, h64, B, n, weight, bias, applyReLU, lOut, hOut);
    Tensor outLo({B, m}), outHi({B, m});
    for (std::int64_t i = 0; i < outLo.numel(); ++i) {
        outLo[i] = detail::round_down(lOut[static_cast<std::size_t>(i)]);
        outHi[i] = detail::round_up(hOut[static_cast<std::size_t>(i)]);
        if (applyReLU) {
            outLo[i] = std::max(0.0f, outLo[i]);
            outHi[i] = std::max(0.0f, outHi[i]);
        }
    }
    if (iv.lower.rank() == 1) return {outLo.reshaped({m}), outHi.reshaped({m})};
    return {outLo, outHi};
}

/// Batched interval convolution step. Shapes: iv [B,C,H,W] (or [C,H,W]).
inline IntervalTensor propagate_conv(const IntervalTensor& iv, const Tensor& kernel,
                                     const Tensor& bias, int stride, bool applyReLU) {
    const bool single = iv.lower.rank() == 3;
    Tensor lo = single ? iv.lower.reshaped({1, iv.lower.dim(0), iv.lower.dim(1), iv.lower.dim(2)})
                       : iv.lower;
    Tensor hi = single ? iv.upper.reshaped({1, iv.upper.dim(0), iv.upper.dim(1), iv.upper.dim(2)})
                       : iv.upper;
    if (lo.rank() != 4 || kernel.rank() != 4 || lo.dim(1) != kernel.dim(1))
        throw DimensionError("propagate_conv: interval " + shape_str(lo.shape()) +
                             " vs kernel " + shape_str(kernel.shape()));
    const int B = lo.dim(0), C = lo.dim(1), H = lo.dim(2), W = lo.dim(3), F = kernel.dim(0);
    std::vector<double> l64 = f64::widen(lo), h64 = f64::widen(hi), lOut, hOut;
    detail::iv_conv_f64(l64, h64, B, C, H, W, kernel, bias, stride, applyReLU, lOut, hOut);
    const Shape outShape{B, F, conv_out_extent(H, stride), conv_out_extent(W, stride)};
    Tensor outLo(outShape), outHi(outShape);
    for (std::int64_t i = 0; i < outLo.numel(); ++i) {
        outLo[i] = detail::round_down(lOut[static_cast<std::size_t>(i)]);
        outHi[i] = detail::round_up(hOut[static_cast<std::size_t>(i)]);
        if (applyReLU) {
            outLo[i] = std::max(0.0f, outLo[i]);
            outHi[i] = std::max(0.0f, outHi[i]);
        }
    }
    if (single)
        return {outLo.reshaped({outShape[1], outShape[2], outShape[3]}),
                outHi.reshaped({outShape[1], outShape[2], outShape[3]})};
    return {outLo, outHi};
}

// ---------------------------------------------------------------------------
// last-layer elision

/// Upper bounds on all K^2 logit differences f_k - f_l, one [K,K] matrix per
/// sample. Entries can be negative; the diagonal is exactly zero.
inline Tensor logit_diff_upper_bounds(const IntervalTensor& penultimate, const Tensor& lastWeight,
                                      const Tensor& lastBias) {
    Tensor lo = penultimate.lower.rank() == 1
                    ? penultimate.lower.reshaped({1, static_cast<int>(penultimate.lower.numel())})
                    : penultimate.lower;
    Tensor hi = penultimate.upper.rank() == 1
                    ? penultimate.upper.reshaped({1, static_cast<int>(penultimate.upper.numel())})
                    : penultimate.upper;
    const int B = lo.dim(0), n = lo.dim(1), K = lastWeight.dim(0);
    if (lastWeight.dim(1) != n)
        throw DimensionError("logit_diff_upper_bounds: penultimate " + shape_str(lo.shape()) +
                             " vs weight " + shape_str(lastWeight.shape()));
    Tensor out({B, K, K});
    for (int b = 0; b < B; ++b) {
        const float* lrow = lo.data() + static_cast<std::size_t>(b) * n;
        const float* hrow = hi.data() + static_cast<std::size_t>(b) * n;
        for (int k = 0; k < K; ++k)
            for (int l = 0; l < K; ++l) {
                if (l == k) {
                    out.at({b, k, l}) = 0.0f;  // W_k - W_k vanishes identically
                    continue;
                }
                double acc = static_cast<double>(lastBias.defined() ? lastBias[k] - lastBias[l] : 0.0f);
                const float* wk = lastWeight.data() + static_cast<std::size_t>(k) * n;
                const float* wl = lastWeight.data() + static_cast<std::size_t>(l) * n;
                for (int j = 0; j < n; ++j) {
                    const double d = static_cast<double>(wk[j]) - static_cast<double>(wl[j]);
                    acc += d > 0.0 ? d * hrow[j] : d * lrow[j];
                }
                out.at({b, k, l}) = detail::round_up(acc);
            }
    }
    if (penultimate.lower.rank() == 1) return out.reshaped({K, K});
    return out;
}

/// max_k -log sum_l exp(-bounds[k,l]) for one [K,K] matrix; always <= 0.
inline double certified_log_conf_upper(const Tensor& bounds) {
    const int K = bounds.dim(bounds.rank() - 1);
    double best = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
        // stable log-sum-exp of the negated row
        double m = -std::numeric_limits<double>::infinity();
        for (int l = 0; l < K; ++l) m = std::max(m, -static_cast<double>(bounds[k * K + l]));
        double s = 0.0;
        for (int l = 0; l < K; ++l) s += std::exp(-static_cast<double>(bounds[k * K + l]) - m);
        best = std::max(best, -(m + std::log(s)));
    }
    return best;
}

/// max_{k,l} bounds[k,l]; ties resolve to the first entry in row-major
/// order. Satisfies certified_log_conf_upper <= training_bound - log K.
inline double training_bound(const Tensor& bounds) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::int64_t i = 0; i < bounds.numel(); ++i)
        if (static_cast<double>(bounds[i]) > best) best = bounds[i];
    return best;
}

// ---------------------------------------------------------------------------
// full-network certification (float64 walker)

/// Certified upper bounds on the confidence inside the epsilon-box around
/// each sample of the batch. Values lie in [1/K, 1] and are monotone
/// non-decreasing in epsilon.
inline std::vector<double> certify_batch(const NetworkSpec& spec, const ParamStore& params,
                                         const Tensor& batch, double epsilon, bool clipToDomain) {
    check_batch_shape(spec, batch);
    if (epsilon < 0.0) throw ContractError("certify: negative epsilon");
    const int B = batch.dim(0);
    std::vector<double> result(static_cast<std::size_t>(B));
    const int chunk = 64;
    // locate the final affine layer; everything before it is propagated
    const std::size_t last = spec.layers.size() - 1;
    for (int b0 = 0; b0 < B; b0 += chunk) {
        const int n = std::min(chunk, B - b0);
        Shape shape{spec.inputShape[0], spec.inputShape[1], spec.inputShape[2]};
        const std::size_t sampleLen = static_cast<std::size_t>(numel_of(shape));
        std::vector<double> lo(sampleLen * n), hi(sampleLen * n);
        for (std::size_t i = 0; i < sampleLen * n; ++i) {
            const double v = batch[static_cast<std::int64_t>(b0) * static_cast<std::int64_t>(sampleLen) +
                                   static_cast<std::int64_t>(i)];
            double l = v - epsilon, u = v + epsilon;
            if (clipToDomain) {
                l = std::max(0.0, l);
                u = std::min(1.0, u);
            }
            lo[i] = l;
            hi[i] = u;
        }
        for (std::size_t li = 0; li < last; ++li) {
            const LayerSpec& l = spec.layers[li];
            std::vector<double> lOut, hOut;
            switch (l.kind) {
                case LayerKind::Conv:
                    detail::iv_conv_f64(lo, hi, n, shape[0], shape[1], shape[2],
                                        params.weights[li], params.biases[li], l.stride, false,
                                        lOut, hOut);
                    shape = {l.out, conv_out_extent(shape[1], l.stride),
                             conv_out_extent(shape[2], l.stride)};
                    lo = std::move(lOut);
                    hi = std::move(hOut);
                    break;
                case LayerKind::Affine: {
                    const int in = static_cast<int>(numel_of(shape));
                    detail::iv_affine_f64(lo, hi, n, in, params.weights[li], params.biases[li],
                                          false, lOut, hOut);
                    shape = {l.out};
                    lo = std::move(lOut);
                    hi = std::move(hOut);
                    break;
                }
                case LayerKind::Relu:
                    for (double& v : lo) v = std::max(0.0, v);
                    for (double& v : hi) v = std::max(0.0, v);
                    break;
                case LayerKind::Flatten:
                    shape = {static_cast<int>(numel_of(shape))};
                    break;
            }
            detail::check_magnitude(hi, static_cast<int>(li));
            detail::check_magnitude(lo, static_cast<int>(li));
        }
        // elide the final affine layer into logit differences
        const Tensor& w = params.weights[last];
        const Tensor& bias = params.biases[last];
        const int K = spec.classCount;
        const int feat = static_cast<int>(numel_of(shape));
        for (int i = 0; i < n; ++i) {
            const double* lrow = lo.data() + static_cast<std::size_t>(i) * feat;
            const double* hrow = hi.data() + static_cast<std::size_t>(i) * feat;
            double best = -std::numeric_limits<double>::infinity();
            std::vector<double> row(static_cast<std::size_t>(K));
            for (int k = 0; k < K; ++k) {
                for (int l2 = 0; l2 < K; ++l2) {
                    if (l2 == k) {
                        row[static_cast<std::size_t>(l2)] = 0.0;
                        continue;
                    }
                    double acc = static_cast<double>(bias[k]) - static_cast<double>(bias[l2]);
                    const float* wk = w.data() + static_cast<std::size_t>(k) * feat;
                    const float* wl = w.data() + static_cast<std::size_t>(l2) * feat;
                    for (int j = 0; j < feat; ++j) {
                        const double d = static_cast<double>(wk[j]) - static_cast<double>(wl[j]);
                        acc += d > 0.0 ? d * hrow[j] : d * lrow[j];
                    }
                    row[static_cast<std::size_t>(l2)] = acc;
                }
                double m = -std::numeric_limits<double>::infinity();
                for (int l2 = 0; l2 < K; ++l2) m = std::max(m, -row[static_cast<std::size_t>(l2)]);
                double s = 0.0;
                for (int l2 = 0; l2 < K; ++l2)
                    s += std::exp(-row[static_cast<std::size_t>(l2)] - m);
                best = std::max(best, -(m + std::log(s)));
            }
            result[static_cast<std::size_t>(b0 + i)] = std::exp(best);
        }
    }
    return result;
}

/// Single-sample convenience wrapper around certify_batch.
inline double certify(const NetworkSpec& spec, const ParamStore& params, const Tensor& x,
                      double epsilon, bool clipToDomain) {
    Tensor batch = x.rank() == 3 ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x;
    return certify_batch(spec, params, batch, epsilon, clipToDomain)[0];
}

// ---------------------------------------------------------------------------
// recorded (differentiable) propagation for training

struct BoundVars {
    Var lo, hi;
};

inline BoundVars iv_input(Graph& g, const Tensor& x, double epsilon, bool clipToDomain) {
    IntervalTensor iv = input_interval(x, epsilon, clipToDomain);
    return {g.constant(iv.lower), g.constant(iv.upper)};
}

inline BoundVars iv_affine(Graph& g, BoundVars iv, Var w, Var b, bool applyRelu) {
    Var wp = pos_part(g, w), wm = neg_part(g, w);
    Var hi = add(g, affine(g, iv.hi, wp, b), affine(g, iv.lo, wm));
    Var lo = add(g, affine(g, iv.lo, wp, b), affine(g, iv.hi, wm));
    if (applyRelu) {
        hi = relu(g, hi);
        lo = relu(g, lo);
    }
    return {lo, hi};
}

inline BoundVars iv_conv(Graph& g, BoundVars iv, Var k, Var b, int stride, bool applyRelu) {
    Var kp = pos_part(g, k), km = neg_part(g, k);
    Var hi = add(g, conv2d(g, iv.hi, kp, b, stride), conv2d(g, iv.lo, km, stride));
    Var lo = add(g, conv2d(g, iv.lo, kp, b, stride), conv2d(g, iv.hi, km, stride));
    if (applyRelu) {
        hi = relu(g, hi);
        lo = relu(g, lo);
    }
    return {lo, hi};
}

/// Propagates bounds through every layer except the final affine one.
inline BoundVars iv_forward_to_penultimate(Graph& g, const NetworkSpec& spec,
                                           const ParamVars& vars, BoundVars iv) {
    const std::size_t last = spec.layers.size() - 1;
    for (std::size_t i = 0; i < last; ++i) {
        const LayerSpec& l = spec.layers[i];
        switch (l.kind) {
            case LayerKind::Conv:
                iv = iv_conv(g, iv, vars.weights[i], vars.biases[i], l.stride, false);
                break;
            case LayerKind::Affine:
                if (g.value(iv.lo).rank() != 2) iv = {flatten(g, iv.lo), flatten(g, iv.hi)};
                iv = iv_affine(g, iv, vars.weights[i], vars.biases[i], false);
                break;
            case LayerKind::Relu:
                iv = {relu(g, iv.lo), relu(g, iv.hi)};
                break;
            case LayerKind::Flatten:
                iv = {flatten(g, iv.lo), flatten(g, iv.hi)};
                break;
        }
    }
    if (g.value(iv.lo).rank() != 2) iv = {flatten(g, iv.lo), flatten(g, iv.hi)};
    return iv;
}

/// Recorded logit-difference upper bounds, laid out [B, K*K].
inline Var logit_bound_vars(Graph& g, BoundVars penultimate, Var lastW, Var lastB) {
    Var d = pairwise_row_diff(g, lastW);
    Var db = pairwise_diff_vec(g, lastB);
    Var dp = pos_part(g, d), dm = neg_part(g, d);
    return add(g, affine(g, penultimate.hi, dp, db), affine(g, penultimate.lo, dm));
}

/// Recorded per-sample certified loss term: log(m^2/2 + 1) with
/// m = max_{k,l} logit-difference bound at the given epsilon.
inline Var cub_vars(Graph& g, const NetworkSpec& spec, const ParamVars& vars, const Tensor& xOut,
                    double epsilon, bool clipToDomain = false) {
    BoundVars iv = iv_input(g, xOut, epsilon, clipToDomain);
    iv = iv_forward_to_penultimate(g, spec, vars, iv);
    const std::size_t last = spec.layers.size() - 1;
    Var bounds = logit_bound_vars(g, iv, vars.weights[last], vars.biases[last]);
    return damped_square(g, row_max(g, bounds));
}

}  // namespace certood
