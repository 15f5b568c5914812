#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "certood/graph.hpp"

namespace certood {

enum class LayerKind { Conv, Affine, Relu, Flatten };

/// One layer of a declarative network. Convolutions are fixed to kernel 3,
/// padding 1; stride is 1 or 2.
struct LayerSpec {
    LayerKind kind;
    int out = 0;     // channels (Conv) or features (Affine)
    int stride = 1;  // Conv only

    static LayerSpec conv(int channels, int stride) { return {LayerKind::Conv, channels, stride}; }
    static LayerSpec affine(int features) { return {LayerKind::Affine, features, 1}; }
    static LayerSpec relu() { return {LayerKind::Relu, 0, 1}; }
    static LayerSpec flatten() { return {LayerKind::Flatten, 0, 1}; }
};

struct NetworkSpec {
    std::array<int, 3> inputShape{};  // C, H, W
    std::vector<LayerSpec> layers;
    int classCount = 0;
};

/// Checks the structural invariants: strides in {1,2}, positive widths,
/// ReLU after every non-final parameterized layer, final layer Affine(K).
inline void validate_spec(const NetworkSpec& spec) {
    if (spec.classCount < 1) throw ConfigError("network needs at least one class");
    if (spec.layers.empty() || spec.layers.back().kind != LayerKind::Affine ||
        spec.layers.back().out != spec.classCount)
        throw ConfigError("final layer must be affine with classCount outputs");
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        if (l.kind == LayerKind::Conv && l.stride != 1 && l.stride != 2)
            throw ConfigError("conv stride must be 1 or 2");
        if ((l.kind == LayerKind::Conv || l.kind == LayerKind::Affine) && l.out < 1)
            throw ConfigError("layer width must be positive");
        const bool parameterized = l.kind == LayerKind::Conv || l.kind == LayerKind::Affine;
        const bool isFinal = i + 1 == spec.layers.size();
        if (parameterized && !isFinal &&
            (i + 1 >= spec.layers.size() || spec.layers[i + 1].kind != LayerKind::Relu))
            throw ConfigError("every non-final conv/affine layer must be followed by relu");
    }
}

/// The stock architectures. "L" and "XL" are the reference models;
/// "L-half" halves every width of L for quick CPU experiments.
inline NetworkSpec build_architecture(const std::string& name,
                                      std::array<int, 3> inputShape, int classCount) {
    NetworkSpec spec;
    spec.inputShape = inputShape;
    spec.classCount = classCount;
    auto conv = [&](int f, int s) {
        spec.layers.push_back(LayerSpec::conv(f, s));
        spec.layers.push_back(LayerSpec::relu());
    };
    auto hidden = [&](int m) {
        spec.layers.push_back(LayerSpec::affine(m));
        spec.layers.push_back(LayerSpec::relu());
    };
    if (name == "L") {
        conv(64, 1); conv(64, 1); conv(128, 2); conv(128, 1); conv(128, 1);
        spec.layers.push_back(LayerSpec::flatten());
        hidden(512);
    } else if (name == "XL") {
        conv(128, 1); conv(128, 1); conv(256, 2); conv(256, 1); conv(256, 1);
        spec.layers.push_back(LayerSpec::flatten());
        hidden(512);
        hidden(512);
    } else if (name == "L-half") {
        conv(32, 1); conv(32, 1); conv(64, 2); conv(64, 1); conv(64, 1);
        spec.layers.push_back(LayerSpec::flatten());
        hidden(256);
    } else {
        throw ConfigError("unknown architecture '" + name + "' (expected L, XL or L-half)");
    }
    spec.layers.push_back(LayerSpec::affine(classCount));
    validate_spec(spec);
    return spec;
}

/// Activation shapes after every layer, starting from the input shape.
inline std::vector<Shape> layer_output_shapes(const NetworkSpec& spec) {
    std::vector<Shape> shapes;
    Shape cur{spec.inputShape[0], spec.inputShape[1], spec.inputShape[2]};
    bool flat = false;
    for (const LayerSpec& l : spec.layers) {
        switch (l.kind) {
            case LayerKind::Conv:
                if (flat) throw ConfigError("conv after flatten");
                cur = {l.out, conv_out_extent(cur[1], l.stride), conv_out_extent(cur[2], l.stride)};
                break;
            case LayerKind::Affine:
                if (!flat && cur.size() != 1) throw ConfigError("affine before flatten");
                cur = {l.out};
                flat = true;
                break;
            case LayerKind::Flatten:
                cur = {cur[0] * (cur.size() > 1 ? cur[1] * cur[2] : 1)};
                flat = true;
                break;
            case LayerKind::Relu:
                break;
        }
        shapes.push_back(cur);
    }
    return shapes;
}

/// Per-layer weight and bias tensors; entries are empty for layers without
/// parameters. Frozen stores are shareable read-only across threads.
struct ParamStore {
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;

    std::int64_t count() const {
        std::int64_t n = 0;
        for (const Tensor& t : weights) n += t.defined() ? t.numel() : 0;
        for (const Tensor& t : biases) n += t.defined() ? t.numel() : 0;
        return n;
    }
};

/// Shapes of the weight/bias tensors implied by the spec.
inline std::vector<std::pair<Shape, Shape>> param_shapes(const NetworkSpec& spec) {
    std::vector<std::pair<Shape, Shape>> out;
    Shape cur{spec.inputShape[0], spec.inputShape[1], spec.inputShape[2]};
    bool flat = false;
    for (const LayerSpec& l : spec.layers) {
        switch (l.kind) {
            case LayerKind::Conv:
                out.push_back({{l.out, cur[0], 3, 3}, {l.out}});
                cur = {l.out, conv_out_extent(cur[1], l.stride), conv_out_extent(cur[2], l.stride)};
                break;
            case LayerKind::Affine: {
                const int n = flat || cur.size() == 1
                                  ? cur[0]
                                  : cur[0] * cur[1] * cur[2];
                out.push_back({{l.out, n}, {l.out}});
                cur = {l.out};
                flat = true;
                break;
            }
            case LayerKind::Flatten:
                cur = {cur[0] * (cur.size() > 1 ? cur[1] * cur[2] : 1)};
                flat = true;
                out.push_back({{}, {}});
                break;
            case LayerKind::Relu:
                out.push_back({{}, {}});
                break;
        }
    }
    return out;
}

/// Weights ~ uniform(-1/sqrt(fanIn), +1/sqrt(fanIn)), biases zero.
/// Bit-identical for a given seed.
inline ParamStore init_params(const NetworkSpec& spec, std::uint64_t seed) {
    std::mt19937 rng(static_cast<std::uint32_t>(seed ^ (seed >> 32)));
    ParamStore store;
    for (const auto& [wShape, bShape] : param_shapes(spec)) {
        if (wShape.empty()) {
            store.weights.emplace_back();
            store.biases.emplace_back();
            continue;
        }
        const std::int64_t fanIn = numel_of(wShape) / wShape[0];
        const float bound = 1.0f / std::sqrt(static_cast<float>(fanIn));
        Tensor w(wShape);
        for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = uniform_in(rng, -bound, bound);
        store.weights.push_back(std::move(w));
        store.biases.push_back(Tensor::zeros(bShape));
    }
    return store;
}

/// Per-layer tape handles for the parameters.
struct ParamVars {
    std::vector<Var> weights;
    std::vector<Var> biases;
};

inline ParamVars make_param_vars(Graph& g, const NetworkSpec& spec, const ParamStore& params,
                                 bool requiresGrad = true) {
    ParamVars vars;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        if (params.weights[i].defined()) {
            vars.weights.push_back(g.leaf(params.weights[i], requiresGrad));
            vars.biases.push_back(g.leaf(params.biases[i], requiresGrad));
        } else {
            vars.weights.push_back(Var{});
            vars.biases.push_back(Var{});
        }
    }
    return vars;
}

inline void check_batch_shape(const NetworkSpec& spec, const Tensor& batch) {
    if (batch.rank() != 4 || batch.dim(1) != spec.inputShape[0] ||
        batch.dim(2) != spec.inputShape[1] || batch.dim(3) != spec.inputShape[2])
        throw DimensionError("batch " + shape_str(batch.shape()) + " does not match input shape [" +
                             std::to_string(spec.inputShape[0]) + "," +
                             std::to_string(spec.inputShape[1]) + "," +
                             std::to_string(spec.inputShape[2]) + "]");
}

/// Recorded forward pass; returns the logits node.
inline Var forward_vars(Graph& g, const NetworkSpec& spec, const ParamVars& vars, Var x) {
    check_batch_shape(spec, g.value(x));
    Var cur = x;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        switch (l.kind) {
            case LayerKind::Conv:
                cur = conv2d(g, cur, vars.weights[i], vars.biases[i], l.stride);
                break;
            case LayerKind::Affine:
                if (g.value(cur).rank() != 2) cur = flatten(g, cur);
                cur = affine(g, cur, vars.weights[i], vars.biases[i]);
                break;
            case LayerKind::Relu:
                cur = relu(g, cur);
                break;
            case LayerKind::Flatten:
                cur = flatten(g, cur);
                break;
        }
    }
    return cur;
}

/// Convenience wrapper: runs a recorded forward pass on a scratch graph.
inline Tensor forward(const NetworkSpec& spec, const ParamStore& params, const Tensor& batch) {
    Graph g;
    ParamVars vars = make_param_vars(g, spec, params, false);
    Var logits = forward_vars(g, spec, vars, g.constant(batch));
    return g.value(logits);
}

// ---------------------------------------------------------------------------
// float64 evaluation path (used by certification and scoring, where the
// forward pass and the interval pass must agree to ~1e-9)

namespace f64 {

inline void dgemm(bool transA, bool transB, int m, int n, int k, double alpha,
                  const double* a, int lda, const double* b, int ldb, double beta,
                  double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, transA ? CblasTrans : CblasNoTrans,
                transB ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c,
                ldc);
}

inline std::vector<double> widen(const Tensor& t) {
    std::vector<double> out(static_cast<std::size_t>(t.numel()));
    for (std::int64_t i = 0; i < t.numel(); ++i) out[static_cast<std::size_t>(i)] = t[i];
    return out;
}

/// out[b,i] = sum_j w[i,j] x[b,j] + bias[i], double accumulation.
inline void affine_fwd(const std::vector<double>& x, int B, int n, const Tensor& w,
                       const Tensor& bias, std::vector<double>& out) {
    const int m = w.dim(0);
    std::vector<double> wd = widen(w);
    out.assign(static_cast<std::size_t>(B) * m, 0.0);
    dgemm(false, true, B, m, n, 1.0, x.data(), n, wd.data(), n, 0.0, out.data(), m);
    if (bias.defined())
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < m; ++i) out[static_cast<std::size_t>(b) * m + i] += bias[i];
}

inline void conv_fwd(const std::vector<double>& x, int B, int C, int H, int W,
                     const Tensor& kernel, const Tensor& bias, int stride,
                     std::vector<double>& out) {
    const int F = kernel.dim(0);
    const int OH = conv_out_extent(H, stride), OW = conv_out_extent(W, stride);
    const int cols = OH * OW, K = C * 9;
    std::vector<double> kd = widen(kernel);
    out.assign(static_cast<std::size_t>(B) * F * cols, 0.0);
    std::vector<double> col(static_cast<std::size_t>(K) * cols);
    for (int b = 0; b < B; ++b) {
        const double* src = x.data() + static_cast<std::size_t>(b) * C * H * W;
        im2col3x3(src, C, H, W, stride, col.data());
        dgemm(false, false, F, cols, K, 1.0, kd.data(), K, col.data(), cols, 0.0,
              out.data() + static_cast<std::size_t>(b) * F * cols, cols);
        if (bias.defined()) {
            double* dst = out.data() + static_cast<std::size_t>(b) * F * cols;
            for (int f = 0; f < F; ++f)
                for (int p = 0; p < cols; ++p) dst[static_cast<std::size_t>(f) * cols + p] += bias[f];
        }
    }
}

}  // namespace f64

/// Logits of a batch computed with float64 accumulation throughout.
/// Output is [B, K] in doubles (row-major).
inline std::vector<double> eval_logits_f64(const NetworkSpec& spec, const ParamStore& params,
                                           const Tensor& batch) {
    check_batch_shape(spec, batch);
    const int B = batch.dim(0);
    std::vector<double> cur = f64::widen(batch);
    Shape shape{spec.inputShape[0], spec.inputShape[1], spec.inputShape[2]};
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        std::vector<double> next;
        switch (l.kind) {
            case LayerKind::Conv:
                f64::conv_fwd(cur, B, shape[0], shape[1], shape[2], params.weights[i],
                              params.biases[i], l.stride, next);
                shape = {l.out, conv_out_extent(shape[1], l.stride),
                         conv_out_extent(shape[2], l.stride)};
                cur = std::move(next);
                break;
            case LayerKind::Affine: {
                const int n = static_cast<int>(numel_of(shape));
                f64::affine_fwd(cur, B, n, params.weights[i], params.biases[i], next);
                shape = {l.out};
                cur = std::move(next);
                break;
            }
            case LayerKind::Relu:
                for (double& v : cur) v = std::max(0.0, v);
                break;
            case LayerKind::Flatten:
                shape = {static_cast<int>(numel_of(shape))};
                break;
        }
    }
    return cur;
}

/// Float32 view of eval_logits_f64.
inline Tensor eval_logits(const NetworkSpec& spec, const ParamStore& params, const Tensor& batch) {
    std::vector<double> d = eval_logits_f64(spec, params, batch);
    Tensor out({batch.dim(0), spec.classCount});
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(d[static_cast<std::size_t>(i)]);
    return out;
}

// ---------------------------------------------------------------------------
// textual spec encoding (used by the checkpoint format)

inline std::string spec_to_text(const NetworkSpec& spec) {
    std::ostringstream os;
    os << "input " << spec.inputShape[0] << ' ' << spec.inputShape[1] << ' '
       << spec.inputShape[2] << '\n';
    os << "classes " << spec.classCount << '\n';
    for (const LayerSpec& l : spec.layers) {
        switch (l.kind) {
            case LayerKind::Conv: os << "conv " << l.out << ' ' << l.stride << '\n'; break;
            case LayerKind::Affine: os << "affine " << l.out << '\n'; break;
            case LayerKind::Relu: os << "relu\n"; break;
            case LayerKind::Flatten: os << "flatten\n"; break;
        }
    }
    return os.str();
}

inline NetworkSpec spec_from_text(const std::string& text) {
    NetworkSpec spec;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "input") {
            ls >> spec.inputShape[0] >> spec.inputShape[1] >> spec.inputShape[2];
        } else if (tag == "classes") {
            ls >> spec.classCount;
        } else if (tag == "conv") {
            int f = 0, s = 0;
            ls >> f >> s;
            spec.layers.push_back(LayerSpec::conv(f, s));
        } else if (tag == "affine") {
            int m = 0;
            ls >> m;
            spec.layers.push_back(LayerSpec::affine(m));
        } else if (tag == "relu") {
            spec.layers.push_back(LayerSpec::relu());
        } else if (tag == "flatten") {
            spec.layers.push_back(LayerSpec::flatten());
        } else {
            throw ParseError("unknown layer tag '" + tag + "' in network description");
        }
        if (ls.fail()) throw ParseError("malformed network description line: " + line);
    }
    validate_spec(spec);
    return spec;
}

}  // namespace certood
