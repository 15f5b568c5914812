#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "certood/interval.hpp"
#include "certood/metrics.hpp"

namespace certood {

/// Mean over the batch of -log p_y(x), with a stable log-sum-exp.
inline Var cross_entropy(Graph& g, Var logits, const std::vector<int>& labels) {
    const Tensor& t = g.value(logits);
    if (static_cast<int>(labels.size()) != t.dim(0))
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                             " labels for batch of " + std::to_string(t.dim(0)));
    for (int y : labels)
        if (y < 0 || y >= t.dim(1))
            throw ContractError("cross_entropy: label " + std::to_string(y) +
                                " outside [0," + std::to_string(t.dim(1)) + ")");
    return mean(g, sub(g, log_sum_exp(g, logits), gather_cols(g, logits, labels)));
}

/// Cross-entropy against the uniform distribution, mean over the batch:
/// (1/K) sum_k -log p_k(x). Minimal (log K) exactly at uniform predictions.
inline Var oe_loss(Graph& g, Var logits) {
    return mean(g, sub(g, log_sum_exp(g, logits), row_mean(g, logits)));
}

/// Mean log-confidence, in [-log K, 0].
inline Var ceda_loss(Graph& g, Var logits) {
    return mean(g, sub(g, row_max(g, logits), log_sum_exp(g, logits)));
}

/// Per-batch loss summary. perSampleCub holds the certified loss of each
/// out-distribution sample at the training radius; epsSelection lists the
/// sample indices whose loss term kept that radius.
struct LossReport {
    double ceLoss = 0.0;
    double oodLoss = 0.0;
    std::vector<float> perSampleCub;
    std::size_t quantileCut = 0;
    std::vector<int> epsSelection;
};

struct GoodLoss {
    Var total;
    Var inLogits;
    LossReport report;
};

/// The certified-detection objective with quantile split: the out samples
/// are ordered ascending by their certified loss at radius epsilon; the
/// floor(q*M) smallest contribute that loss, the rest the radius-0 loss.
/// total = ce + (kappa/M) * sum of the chosen terms.
inline GoodLoss good_objective(Graph& g, const NetworkSpec& spec, const ParamVars& vars,
                               const Tensor& inBatch, const std::vector<int>& inLabels,
                               const Tensor& outBatch, double epsilon, double kappa, double q) {
    if (q < 0.0 || q > 1.0)
        throw ContractError("good_objective: quantile " + std::to_string(q) + " outside [0,1]");
    GoodLoss res;
    Var logits = forward_vars(g, spec, vars, g.constant(inBatch));
    res.inLogits = logits;
    Var ce = cross_entropy(g, logits, inLabels);

    const int M = outBatch.dim(0);
    Var cubEps = cub_vars(g, spec, vars, outBatch, epsilon);
    const Tensor& cubVal = g.value(cubEps);
    std::vector<int> order(static_cast<std::size_t>(M));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&cubVal](int a, int b) { return cubVal[a] < cubVal[b]; });
    const std::size_t cut = static_cast<std::size_t>(std::floor(q * M));

    std::vector<int> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut));
    std::vector<int> rest(order.begin() + static_cast<std::ptrdiff_t>(cut), order.end());
    Var oodSum;
    if (!chosen.empty()) oodSum = index_sum(g, cubEps, chosen);
    if (!rest.empty()) {
        Var cub0 = cub_vars(g, spec, vars, outBatch, 0.0);
        Var restSum = index_sum(g, cub0, rest);
        oodSum = oodSum.valid() ? add(g, oodSum, restSum) : restSum;
    }
    Var ood = scale(g, oodSum, static_cast<float>(kappa / M));
    res.total = add(g, ce, ood);

    res.report.ceLoss = g.value(ce)[0];
    res.report.oodLoss = g.value(ood)[0];
    res.report.perSampleCub.assign(cubVal.data(), cubVal.data() + M);
    res.report.quantileCut = cut;
    res.report.epsSelection = std::move(chosen);
    return res;
}

/// Single-sample certified loss at a given radius, evaluated without a tape.
inline double cub_loss(const NetworkSpec& spec, const ParamStore& params, const Tensor& x,
                       double epsilon, bool clipToDomain = false) {
    Graph g;
    ParamVars vars = make_param_vars(g, spec, params, false);
    Tensor batch = x.rank() == 3 ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x;
    Var cub = cub_vars(g, spec, vars, batch, epsilon, clipToDomain);
    return g.value(cub)[0];
}

// ---------------------------------------------------------------------------
// adversarial uniform-confidence training (out-distribution adversarial
// training baseline)

struct AcetLoss {
    Var loss;              // uniform cross-entropy at the attacked points
    Tensor attackedPoints; // one per out sample, inside the clipped eps-box
};

/// Inner maximization: plain sign-gradient ascent on the uniform
/// cross-entropy, 40 steps of size 2*eps/41, starting at the target input,
/// projected onto the eps-box intersected with [0,1]^d. Returns the
/// highest-confidence iterate per sample.
inline Tensor acet_training_attack(const NetworkSpec& spec, const ParamStore& params,
                                   const Tensor& outBatch, double epsilon, int steps = 40) {
    if (epsilon < 0.0) throw ContractError("acet attack: negative epsilon");
    Tensor cur = outBatch.clone();
    Tensor best = outBatch.clone();
    const int M = outBatch.dim(0);
    const std::int64_t len = outBatch.numel() / M;
    std::vector<double> bestConf(static_cast<std::size_t>(M),
                                 -std::numeric_limits<double>::infinity());
    const float alpha = static_cast<float>(2.0 * epsilon / (steps + 1));
    for (int it = 0; it <= steps; ++it) {
        Graph g;
        ParamVars vars = make_param_vars(g, spec, params, false);
        Var x = g.leaf(cur.clone(), true);
        Var logits = forward_vars(g, spec, vars, x);
        const Tensor& lv = g.value(logits);
        for (int i = 0; i < M; ++i) {
            const double conf = confidence(std::span<const float>(
                lv.data() + static_cast<std::size_t>(i) * spec.classCount,
                static_cast<std::size_t>(spec.classCount)));
            if (conf > bestConf[static_cast<std::size_t>(i)]) {
                bestConf[static_cast<std::size_t>(i)] = conf;
                std::copy(cur.data() + i * len, cur.data() + (i + 1) * len,
                          best.data() + i * len);
            }
        }
        if (it == steps || epsilon == 0.0) break;
        // ascend the per-sample uniform cross-entropy
        Var objective = sum(g, sub(g, log_sum_exp(g, logits), row_mean(g, logits)));
        g.backward(objective);
        Tensor grad = g.grad(x);
        for (std::int64_t i = 0; i < cur.numel(); ++i) {
            const float gv = grad[i];
            float v = cur[i] + (gv > 0.0f ? alpha : gv < 0.0f ? -alpha : 0.0f);
            const float center = outBatch[i];
            v = std::min(v, std::min(1.0f, center + static_cast<float>(epsilon)));
            v = std::max(v, std::max(0.0f, center - static_cast<float>(epsilon)));
            cur[i] = v;
        }
    }
    return best;
}

/// Outer objective at the attacked points, recorded on the caller's tape.
inline AcetLoss acet_objective(Graph& g, const NetworkSpec& spec, const ParamVars& vars,
                               const ParamStore& params, const Tensor& outBatch,
                               double epsilon, int steps = 40) {
    AcetLoss res;
    res.attackedPoints = acet_training_attack(spec, params, outBatch, epsilon, steps);
    res.loss = oe_loss(g, forward_vars(g, spec, vars, g.constant(res.attackedPoints)));
    return res;
}

}  // namespace certood
