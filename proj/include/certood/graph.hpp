#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "certood/kernels.hpp"
#include "certood/tensor.hpp"

// Reverse-mode autodiff on an append-only tape. Operations execute eagerly
// and record a backward closure; the tape order is the topological order.
// A Graph is confined to one thread for its forward/backward lifetime.

namespace certood {

/// Handle to a node on a Graph.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Graph {
public:
    using BackFn = std::function<void(Graph&, int)>;

    Var leaf(Tensor value, bool requiresGrad = true) {
        return push(std::move(value), {}, nullptr, requiresGrad);
    }

    Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false); }

    const Tensor& value(Var v) const { return nodes_[check(v)].value; }

    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requiresGrad; }

    /// Gradient of the last backward() root w.r.t. v; zeros if v was not reached.
    Tensor grad(Var v) const {
        const Tensor& g = grads_[check(v)];
        return g.defined() ? g : Tensor::zeros(nodes_[check(v)].value.shape());
    }

    /// Accumulation buffer for a node's gradient, allocated as zeros on first use.
    float* grad_buffer(int id) {
        auto& g = grads_[static_cast<std::size_t>(id)];
        if (!g.defined()) g = Tensor::zeros(nodes_[static_cast<std::size_t>(id)].value.shape());
        return g.data();
    }

    /// Accumulates d(root)/d(node) for every node reachable from root,
    /// visiting each recorded operation exactly once in reverse order.
    void backward(Var root) {
        const std::size_t r = check(root);
        if (nodes_[r].value.numel() != 1)
            throw ContractError("backward root must be scalar, got shape " +
                                shape_str(nodes_[r].value.shape()));
        grads_.assign(nodes_.size(), Tensor());
        std::vector<char> reachable(nodes_.size(), 0);
        mark_reachable(static_cast<int>(r), reachable);
        grads_[r] = Tensor::full({1}, 1.0f);
        for (std::size_t i = r + 1; i-- > 0;) {
            auto& node = nodes_[i];
            if (!reachable[i] || !node.backward || !grads_[i].defined()) continue;
            node.backward(*this, static_cast<int>(i));
        }
    }

    Var push(Tensor value, std::vector<int> inputs, BackFn back, bool forceGrad = false) {
        bool rg = forceGrad;
        for (int i : inputs) rg = rg || nodes_[static_cast<std::size_t>(i)].requiresGrad;
        nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(back), rg});
        grads_.emplace_back();
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& value_at(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor& grad_at(int id) const { return grads_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::vector<int> inputs;
        BackFn backward;
        bool requiresGrad;
    };

    std::size_t check(Var v) const {
        if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw ContractError("invalid graph variable");
        return static_cast<std::size_t>(v.id);
    }

    void mark_reachable(int root, std::vector<char>& seen) const {
        std::vector<int> stack{root};
        while (!stack.empty()) {
            int u = stack.back();
            stack.pop_back();
            if (seen[static_cast<std::size_t>(u)]) continue;
            seen[static_cast<std::size_t>(u)] = 1;
            for (int v : nodes_[static_cast<std::size_t>(u)].inputs)
                if (nodes_[static_cast<std::size_t>(v)].requiresGrad) stack.push_back(v);
        }
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
};

// ---------------------------------------------------------------------------
// elementwise

inline Var add(Graph& g, Var a, Var b) {
    const Tensor &ta = g.value(a), &tb = g.value(b);
    require_same_shape(ta, tb, "add");
    Tensor out = ta.clone();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += tb[i];
    const int ai = a.id, bi = b.id;
    return g.push(std::move(out), {ai, bi}, [ai, bi](Graph& gr, int self) {
        const Tensor& go = gr.grad_at(self);
        for (int in : {ai, bi}) {
            if (!gr.needs_grad(in)) continue;
            float* dst = gr.grad_buffer(in);
            for (std::int64_t i = 0; i < go.numel(); ++i) dst[i] += go[i];
        }
    });
}

inline Var sub(Graph& g, Var a, Var b) {
    const Tensor &ta = g.value(a), &tb = g.value(b);
    require_same_shape(ta, tb, "sub");
    Tensor out = ta.clone();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= tb[i];
    const int ai = a.id, bi = b.id;
    return g.push(std::move(out), {ai, bi}, [ai, bi](Graph& gr, int self) {
        const Tensor& go = gr.grad_at(self);
        if (gr.needs_grad(ai)) {
            float* dst = gr.grad_buffer(ai);
            for (std::int64_t i = 0; i < go.numel(); ++i) dst[i] += go[i];
        }
        if (gr.needs_grad(bi)) {
            float* dst = gr.grad_buffer(bi);
            for (std::int64_t i = 0; i < go.numel(); ++i) dst[i] -= go[i];
        }
    });
}

inline Var scale(Graph& g, Var a, float c) {
    Tensor out = g.value(a).clone();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
    const int ai = a.id;
    return g.push(std::move(out), {ai}, [ai, c](Graph& gr, int self) {
        if (!gr.needs_grad(ai)) return;
        const Tensor& go = gr.grad_at(self);
        float* dst = gr.grad_buffer(ai);
        for (std::int64_t i = 0; i < go.numel(); ++i) dst[i] += c * go[i];
    });
}

inline Var relu(Graph& g, Var a) {
    Tensor out = g.value(a).clone();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(0.0f, out[i]);
    const int ai = a.id;
    // subgradient at 0 is 0: mask on output > 0
    return g.push(std::move(out), {ai}, [ai](Graph& gr, int self) {
        if (!gr.needs_grad(ai)) return;
        const Tensor& go = gr.grad_at(self);
        const Tensor& y = gr.value_at(self);
        float* dst = gr.grad_buffer(ai);
        for (std::int64_t i = 0; i < go.numel(); ++i)
            if (y[i] > 0.0f) dst[i] += go[i];
    });
}

/// max(x, 0) with subgradient 0 at exactly 0 (mask x > 0).
inline Var pos_part(Graph& g, Var a) { return relu(g, a); }

/// min(x, 0) with subgradient 0 at exactly 0 (mask x < 0).
inline Var neg_part(Graph& g, Var a) {
    const Tensor& ta = g.value(a);
    Tensor out = ta.clone();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(0.0f, out[i]);
    const int ai = a.id;
    return g.push(std::move(out), {ai}, [ai](Graph& gr, int self) {
        if (!gr.needs_grad(ai)) return;
        const Tensor& go = gr.grad_at(self);
        const Tensor& x = gr.value_at(ai);
        float* dst = gr.grad_buffer(ai);
        for (std::int64_t i = 0; i < go.numel(); ++i)
            if (x[i] < 0.0f) dst[i] += go[i];
    });
}

inline Var square(Graph& g, Var a) {
    Tensor out = g.value(a).clone();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
    const int ai = a.id;
    return g.push(std::move(out), {ai}, [ai](Graph& gr, int self) {
        if (!gr.needs_grad(ai)) return;
        const Tensor& go = gr.grad_at(self);
        const Tensor& x = gr.value_at(ai);
        float* dst = gr.grad_buffer(ai);
        for (std::int64_t i = 0; i < go.numel(); ++i) dst[i] += 2.0f * x[i] * go[i];
    });
}

/// log(x^2/2 + 1), the damped square used for certified-loss terms.
inline Var damped_square(Graph& g, Var a) {
    const Tensor& ta = g.value(a);
    Tensor out(ta.shape());
    for (std::int64_t i = 0; i < ta.numel(); ++i) {
        const double x = ta[i];
        out[i] = static_cast<float>(std::log(x * x / 2.0 + 1.0));
    }
    const int ai = a.id;
    return g.push(std::move(out), {ai}, [ai](Graph& gr, int self) {
        if (!gr.needs_grad(ai)) return;
        const Tensor& go = gr.grad_at(self);
        const Tensor& x = gr.value_at(ai);
        float* dst = gr.grad_buffer(ai);
        for (std::int64_t i = 0; i < go.numel(); ++i) {
            const double xi = x[i];
            dst[i] += static_cast<float>(go[i] * xi / (xi * xi / 2.0 + 1.0));
        }
    });
}

// ---------------------------------------------------------------------------
// linear layers

inline Var affine(Graph& g, Var x, Var w, Var b) {
    const Tensor &tx = g.value(x), &tw = g.value(w);
    if (tx.rank() != 2 || tw.rank() != 2 || tx.dim(1) != tw.dim(1))
        throw DimensionError("affine: input " + shape_str(tx.shape()) + " vs weight " +
                             shape_str(tw.shape()));
    const int B = tx.dim(0), n = tx.dim(1), m = tw.dim(0);
    const float* bias = nullptr;
    if (b.valid()) {
        const Tensor& tb = g.value(b);
        if (tb.numel() != m)
            throw DimensionError("affine: bias " + shape_str(tb.shape()) + " vs weight " +
                                 shape_str(tw.shape()));
        bias = tb.data();
    }
    Tensor out({B, m});
    affine_forward(tx.data(), B, n, tw.data(), m, bias, out.data());
    const int xi = x.id, wi = w.id, bi = b.valid() ? b.id : -1;
    std::vector<int> ins{xi, wi};
    if (bi >= 0) ins.push_back(bi);
    return g.push(std::move(out), std::move(ins), [xi, wi, bi, B, n, m](Graph& gr, int self) {
        const Tensor& go = gr.grad_at(self);
        const Tensor& tx = gr.value_at(xi);
        const Tensor& tw = gr.value_at(wi);
        float* gx = gr.needs_grad(xi) ? gr.grad_buffer(xi) : nullptr;
        float* gw = gr.needs_grad(wi) ? gr.grad_buffer(wi) : nullptr;
        float* gb = (bi >= 0 && gr.needs_grad(bi)) ? gr.grad_buffer(bi) : nullptr;
        affine_backward(tx.data(), B, n, tw.data(), m, go.data(), gx, gw, gb);
    });
}

inline Var affine(Graph& g, Var x, Var w) { return affine(g, x, w, Var{}); }

inline Var conv2d(Graph& g, Var x, Var k, Var b, int stride) {
    const Tensor &tx = g.value(x), &tk = g.value(k);
    if (stride != 1 && stride != 2)
        throw ContractError("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
    if (tx.rank() != 4 || tk.rank() != 4 || tk.dim(2) != 3 || tk.dim(3) != 3)
        throw DimensionError("conv2d: input " + shape_str(tx.shape()) + " vs kernel " +
                             shape_str(tk.shape()));
    if (tx.dim(1) != tk.dim(1))
        throw DimensionError("conv2d: channel mismatch, input " + shape_str(tx.shape()) +
                             " vs kernel " + shape_str(tk.shape()));
    const int B = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3), F = tk.dim(0);
    const float* bias = nullptr;
    if (b.valid()) {
        const Tensor& tb = g.value(b);
        if (tb.numel() != F)
            throw DimensionError("conv2d: bias " + shape_str(tb.shape()) + " vs kernel " +
                                 shape_str(tk.shape()));
        bias = tb.data();
    }
    Tensor out({B, F, conv_out_extent(H, stride), conv_out_extent(W, stride)});
    conv2d_forward(tx.data(), B, C, H, W, tk.data(), F, bias, stride, out.data());
    const int xi = x.id, ki = k.id, bi = b.valid() ? b.id : -1;
    std::vector<int> ins{xi, ki};
    if (bi >= 0) ins.push_back(bi);
    return g.push(std::move(out), std::move(ins),
                  [xi, ki, bi, B, C, H, W, F, stride](Graph& gr, int self) {
                      const Tensor& go = gr.grad_at(self);
                      const Tensor& tx = gr.value_at(xi);
                      const Tensor& tk = gr.value_at(ki);
                      float* gx = gr.needs_grad(xi) ? gr.grad_buffer(xi) : nullptr;
                      float* gk = gr.needs_grad(ki) ? gr.grad_buffer(ki) : nullptr;
                      float* gb = (bi >= 0 && gr.needs_grad(bi)) ? gr.grad_buffer(bi) : nullptr;
                      conv2d_backward(tx.data(), B, C, H, W, tk.data(), F, stride, go.data(),
                                      gx, gk, gb);
                  });
}

inline Var conv2d(Graph& g, Var x, Var k, int stride) { return conv2d(g, x, k, Var{}, stride); }

inline Var flatten(Graph& g, Var x) {
    const Tensor& tx = g.value(x);
    Tensor out = tx.clone().reshaped({tx.dim(0), static_cast<int>(tx.numel() / tx.dim(0))});
    const int xi = x.id;
    return g.push(std::move(out), {xi}, [xi](Graph& gr, int self) {
        if (!gr.needs_grad(xi)) return;
        const Tensor& go = gr.grad_at(self);
        float* dst = gr.grad_buffer(xi);
        for (std::int64_t i = 0; i < go.numel(); ++i) dst[i] += go[i];
    });
}

// ---------------------------------------------------------------------------
// rowwise reductions over [B, K]

inline void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2)
        throw DimensionError(std::string(what) + ": expected rank-2 input, got " +
                             shape_str(t.shape()));
}

/// Numerically stable log(sum_k exp(x[b,k])) per row.
inline Var log_sum_exp(Graph& g, Var x) {
    const Tensor& tx = g.value(x);
    require_matrix(tx, "log_sum_exp");
    const int B = tx.dim(0), K = tx.dim(1);
    Tensor out({B});
    for (int b = 0; b < B; ++b) {
        const float* row = tx.data() + static_cast<std::size_t>(b) * K;
        float m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        double s = 0.0;
        for (int k = 0; k < K; ++k) s += std::exp(static_cast<double>(row[k]) - m);
        out[b] = static_cast<float>(m + std::log(s));
    }
    const int xi = x.id;
    return g.push(std::move(out), {xi}, [xi, B, K](Graph& gr, int self) {
        if (!gr.needs_grad(xi)) return;
        const Tensor& go = gr.grad_at(self);
        const Tensor& lse = gr.value_at(self);
        const Tensor& tx = gr.value_at(xi);
        float* dst = gr.grad_buffer(xi);
        for (int b = 0; b < B; ++b) {
            const float* row = tx.data() + static_cast<std::size_t>(b) * K;
            float* drow = dst + static_cast<std::size_t>(b) * K;
            for (int k = 0; k < K; ++k)
                drow[k] += go[b] * static_cast<float>(
                                       std::exp(static_cast<double>(row[k]) - lse[b]));
        }
    });
}

/// Row maximum; ties give the gradient to the first occurrence.
inline Var row_max(Graph& g, Var x) {
    const Tensor& tx = g.value(x);
    require_matrix(tx, "row_max");
    const int B = tx.dim(0), K = tx.dim(1);
    Tensor out({B});
    auto argmax = std::make_shared<std::vector<int>>(B);
    for (int b = 0; b < B; ++b) {
        const float* row = tx.data() + static_cast<std::size_t>(b) * K;
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (row[k] > row[best]) best = k;
        (*argmax)[b] = best;
        out[b] = row[best];
    }
    const int xi = x.id;
    return g.push(std::move(out), {xi}, [xi, K, argmax](Graph& gr, int self) {
        if (!gr.needs_grad(xi)) return;
        const Tensor& go = gr.grad_at(self);
        float* dst = gr.grad_buffer(xi);
        for (std::int64_t b = 0; b < go.numel(); ++b)
            dst[b * K + (*argmax)[static_cast<std::size_t>(b)]] += go[b];
    });
}

inline Var row_mean(Graph& g, Var x) {
    const Tensor& tx = g.value(x);
    require_matrix(tx, "row_mean");
    const int B = tx.dim(0), K = tx.dim(1);
    Tensor out({B});
    for (int b = 0; b < B; ++b) {
        double s = 0.0;
        for (int k = 0; k < K; ++k) s += tx[static_cast<std::int64_t>(b) * K + k];
        out[b] = static_cast<float>(s / K);
    }
    const int xi = x.id;
    return g.push(std::move(out), {xi}, [xi, K](Graph& gr, int self) {
        if (!gr.needs_grad(xi)) return;
        const Tensor& go = gr.grad_at(self);
        float* dst = gr.grad_buffer(xi);
        for (std::int64_t b = 0; b < go.numel(); ++b) {
            const float gb = go[b] / static_cast<float>(K);
            for (int k = 0; k < K; ++k) dst[b * K + k] += gb;
        }
    });
}

/// out[b] = x[b, idx[b]]; idx entries must lie in [0, K).
inline Var gather_cols(Graph& g, Var x, std::vector<int> idx) {
    const Tensor& tx = g.value(x);
    require_matrix(tx, "gather_cols");
    const int B = tx.dim(0), K = tx.dim(1);
    if (static_cast<int>(idx.size()) != B)
        throw DimensionError("gather_cols: " + std::to_string(idx.size()) + " indices for " +
                             std::to_string(B) + " rows");
    for (int v : idx)
        if (v < 0 || v >= K)
            throw ContractError("gather_cols: index " + std::to_string(v) +
                                " out of range [0," + std::to_string(K) + ")");
    Tensor out({B});
    for (int b = 0; b < B; ++b) out[b] = tx[static_cast<std::int64_t>(b) * K + idx[static_cast<std::size_t>(b)]];
    auto ix = std::make_shared<std::vector<int>>(std::move(idx));
    const int xi = x.id;
    return g.push(std::move(out), {xi}, [xi, K, ix](Graph& gr, int self) {
        if (!gr.needs_grad(xi)) return;
        const Tensor& go = gr.grad_at(self);
        float* dst = gr.grad_buffer(xi);
        for (std::int64_t b = 0; b < go.numel(); ++b)
            dst[b * K + (*ix)[static_cast<std::size_t>(b)]] += go[b];
    });
}

// ---------------------------------------------------------------------------
// full reductions

inline Var sum(Graph& g, Var x) {
    const Tensor& tx = g.value(x);
    double s = 0.0;
    for (std::int64_t i = 0; i < tx.numel(); ++i) s += tx[i];
    const int xi = x.id;
    return g.push(Tensor::scalar(static_cast<float>(s)), {xi}, [xi](Graph& gr, int self) {
        if (!gr.needs_grad(xi)) return;
        const float go = gr.grad_at(self)[0];
        const Tensor& tx = gr.value_at(xi);
        float* dst = gr.grad_buffer(xi);
        for (std::int64_t i = 0; i < tx.numel(); ++i) dst[i] += go;
    });
}

inline Var mean(Graph& g, Var x) {
    const Tensor& tx = g.value(x);
    const std::int64_t n = tx.numel();
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) s += tx[i];
    const int xi = x.id;
    return g.push(Tensor::scalar(static_cast<float>(s / static_cast<double>(n))), {xi},
                  [xi, n](Graph& gr, int self) {
                      if (!gr.needs_grad(xi)) return;
                      const float go = gr.grad_at(self)[0] / static_cast<float>(n);
                      float* dst = gr.grad_buffer(xi);
                      for (std::int64_t i = 0; i < n; ++i) dst[i] += go;
                  });
}

/// Sum of a subset of a vector's entries.
inline Var index_sum(Graph& g, Var x, std::vector<int> idx) {
    const Tensor& tx = g.value(x);
    for (int v : idx)
        if (v < 0 || v >= tx.numel())
            throw ContractError("index_sum: index " + std::to_string(v) + " out of range");
    double s = 0.0;
    for (int v : idx) s += tx[v];
    auto ix = std::make_shared<std::vector<int>>(std::move(idx));
    const int xi = x.id;
    return g.push(Tensor::scalar(static_cast<float>(s)), {xi}, [xi, ix](Graph& gr, int self) {
        if (!gr.needs_grad(xi)) return;
        const float go = gr.grad_at(self)[0];
        float* dst = gr.grad_buffer(xi);
        for (int v : *ix) dst[v] += go;
    });
}

// ---------------------------------------------------------------------------
// last-layer elision helper

/// All pairwise row differences of W[K,n], laid out [(k*K+l), n] = W[k,:] - W[l,:].
inline Var pairwise_row_diff(Graph& g, Var w) {
    const Tensor& tw = g.value(w);
    require_matrix(tw, "pairwise_row_diff");
    const int K = tw.dim(0), n = tw.dim(1);
    Tensor out({K * K, n});
    for (int k = 0; k < K; ++k)
        for (int l = 0; l < K; ++l) {
            const float* rk = tw.data() + static_cast<std::size_t>(k) * n;
            const float* rl = tw.data() + static_cast<std::size_t>(l) * n;
            float* dst = out.data() + static_cast<std::size_t>(k * K + l) * n;
            for (int j = 0; j < n; ++j) dst[j] = rk[j] - rl[j];
        }
    const int wi = w.id;
    return g.push(std::move(out), {wi}, [wi, K, n](Graph& gr, int self) {
        if (!gr.needs_grad(wi)) return;
        const Tensor& go = gr.grad_at(self);
        float* dst = gr.grad_buffer(wi);
        for (int k = 0; k < K; ++k)
            for (int l = 0; l < K; ++l) {
                const float* grow = go.data() + static_cast<std::size_t>(k * K + l) * n;
                float* dk = dst + static_cast<std::size_t>(k) * n;
                float* dl = dst + static_cast<std::size_t>(l) * n;
                for (int j = 0; j < n; ++j) {
                    dk[j] += grow[j];
                    dl[j] -= grow[j];
                }
            }
    });
}

/// Pairwise differences of a vector b[K], laid out [(k*K+l)] = b[k] - b[l].
inline Var pairwise_diff_vec(Graph& g, Var b) {
    const Tensor& tb = g.value(b);
    const int K = static_cast<int>(tb.numel());
    Tensor out({K * K});
    for (int k = 0; k < K; ++k)
        for (int l = 0; l < K; ++l) out[k * K + l] = tb[k] - tb[l];
    const int bi = b.id;
    return g.push(std::move(out), {bi}, [bi, K](Graph& gr, int self) {
        if (!gr.needs_grad(bi)) return;
        const Tensor& go = gr.grad_at(self);
        float* dst = gr.grad_buffer(bi);
        for (int k = 0; k < K; ++k)
            for (int l = 0; l < K; ++l) {
                dst[k] += go[k * K + l];
                dst[l] -= go[k * K + l];
            }
    });
}

}  // namespace certood
