#pragma once

#include <cstdint>
#include <fstream>
#include <random>
#include <vector>

#include "certood/metrics.hpp"
#include "certood/network.hpp"

// Confidence-maximizing l_inf attacks. The search ascends the log
// confidence with sign-gradient steps and momentum; a step that fails to
// increase the confidence is undone and halves the step size, a successful
// step grows it by 1.1. Every iterate is projected onto the intersection of
// the eps-box around the seed with [0,1]^d, and the best iterate ever seen
// is returned.

namespace certood {

enum class InitScheme { NearPoint, UniformBall, Contrast };

struct AttackConfig {
    int steps = 500;
    int restarts = 5;
    double initialStep = -1.0;  // < 0 picks 0.1 * epsilon
    double momentum = 0.9;
    InitScheme init = InitScheme::NearPoint;
    double initRadius = 0.01;
    double epsilon = 0.1;
    int targetClass = -1;  // >= 0 maximizes that class instead of the top one

    double step0() const { return initialStep > 0.0 ? initialStep : 0.1 * epsilon; }

    void validate() const {
        if (steps < 1 || restarts < 1)
            throw ContractError("attack needs steps >= 1 and restarts >= 1");
        if (momentum < 0.0 || momentum >= 1.0)
            throw ContractError("attack momentum must lie in [0,1)");
        if (epsilon < 0.0) throw ContractError("attack epsilon must be non-negative");
        if (initRadius < 0.0 || initRadius > epsilon)
            throw ContractError("attack init radius must lie in [0, epsilon]");
    }
};

struct AttackResult {
    Tensor bestPoint;
    double bestConfidence = 0.0;
    double trajectoryMaxSeen = 0.0;
};

/// Contrast-stretching start point: pixels above 1-eps saturate to 1, the
/// rest darken by eps (floored at 0). Always inside the clipped eps-box.
inline Tensor contrast_init(const Tensor& x, double epsilon) {
    Tensor out = x.clone();
    const float e = static_cast<float>(epsilon);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = x[i] > 1.0f - e ? 1.0f : std::max(0.0f, x[i] - e);
    return out;
}

namespace detail {

struct Box {
    Tensor lo, hi;  // per-pixel clipped eps-box around the seed batch
};

inline Box seed_box(const Tensor& seeds, double epsilon) {
    Box box{seeds.clone(), seeds.clone()};
    const float e = static_cast<float>(epsilon);
    for (std::int64_t i = 0; i < seeds.numel(); ++i) {
        box.lo[i] = std::max(0.0f, seeds[i] - e);
        box.hi[i] = std::min(1.0f, seeds[i] + e);
    }
    return box;
}

inline void project(Tensor& points, const Box& box) {
    for (std::int64_t i = 0; i < points.numel(); ++i)
        points[i] = std::min(box.hi[i], std::max(box.lo[i], points[i]));
}

/// One forward/backward sweep: per-sample confidence plus d(logConf)/dx.
/// needGrad=false skips the backward pass.
inline void conf_and_grad(const NetworkSpec& spec, const ParamStore& params,
                          const Tensor& points, int targetClass, bool needGrad,
                          std::vector<double>& conf, Tensor* grad) {
    Graph g;
    ParamVars vars = make_param_vars(g, spec, params, false);
    Var x = g.leaf(points.clone(), needGrad);
    Var logits = forward_vars(g, spec, vars, x);
    const Tensor& lv = g.value(logits);
    const int N = lv.dim(0), K = lv.dim(1);
    conf.resize(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i)
        conf[static_cast<std::size_t>(i)] = confidence(std::span<const float>(
            lv.data() + static_cast<std::size_t>(i) * K, static_cast<std::size_t>(K)));
    if (!needGrad) return;
    Var perSample = targetClass >= 0
                        ? sub(g, gather_cols(g, logits, std::vector<int>(
                                                            static_cast<std::size_t>(N), targetClass)),
                              log_sum_exp(g, logits))
                        : sub(g, row_max(g, logits), log_sum_exp(g, logits));
    g.backward(sum(g, perSample));
    *grad = g.grad(x);
    // flat regions give no direction; treat non-finite gradients as zero
    for (std::int64_t i = 0; i < grad->numel(); ++i)
        if (!std::isfinite((*grad)[i])) (*grad)[i] = 0.0f;
}

}  // namespace detail

/// Monotone PGD over a whole batch of seeds. initOverride, when defined,
/// replaces the first restart's start points (projected into each box).
inline std::vector<AttackResult> attack_batch(const NetworkSpec& spec, const ParamStore& params,
                                              const Tensor& seeds, const AttackConfig& cfg,
                                              std::uint64_t seed,
                                              const Tensor& initOverride = Tensor()) {
    cfg.validate();
    check_batch_shape(spec, seeds);
    const int N = seeds.dim(0);
    const std::int64_t len = seeds.numel() / N;
    std::mt19937 rng(static_cast<std::uint32_t>(seed ^ (seed >> 32)));
    const detail::Box box = detail::seed_box(seeds, cfg.epsilon);

    Tensor best = seeds.clone();
    std::vector<double> bestConf(static_cast<std::size_t>(N));
    {
        std::vector<double> seedConf;
        detail::conf_and_grad(spec, params, seeds, cfg.targetClass, false, seedConf, nullptr);
        bestConf = seedConf;  // the seed itself counts as an iterate
    }

    auto draw_init = [&](int restart) {
        Tensor pts = seeds.clone();
        if (restart == 0 && initOverride.defined()) {
            pts = initOverride.clone();
        } else if (cfg.init == InitScheme::Contrast && restart == 0) {
            pts = contrast_init(seeds, cfg.epsilon);
        } else if (cfg.init == InitScheme::UniformBall) {
            for (std::int64_t i = 0; i < pts.numel(); ++i)
                pts[i] = seeds[i] + uniform_in(rng, -static_cast<float>(cfg.epsilon),
                                               static_cast<float>(cfg.epsilon));
        } else {
            const float r = static_cast<float>(cfg.initRadius);
            for (std::int64_t i = 0; i < pts.numel(); ++i)
                pts[i] = seeds[i] + uniform_in(rng, -r, r);
        }
        detail::project(pts, box);
        return pts;
    };

    for (int restart = 0; restart < cfg.restarts; ++restart) {
        Tensor cur = draw_init(restart);
        Tensor grad;
        std::vector<double> curConf;
        detail::conf_and_grad(spec, params, cur, cfg.targetClass, true, curConf, &grad);
        std::vector<float> step(static_cast<std::size_t>(N), static_cast<float>(cfg.step0()));
        Tensor momentum = Tensor::zeros(seeds.shape());
        for (int i = 0; i < N; ++i)
            if (curConf[static_cast<std::size_t>(i)] > bestConf[static_cast<std::size_t>(i)]) {
                bestConf[static_cast<std::size_t>(i)] = curConf[static_cast<std::size_t>(i)];
                std::copy(cur.data() + i * len, cur.data() + (i + 1) * len,
                          best.data() + i * len);
            }

        Tensor cand(seeds.shape());
        for (int it = 0; it < cfg.steps; ++it) {
            for (int i = 0; i < N; ++i) {
                float* m = momentum.data() + i * len;
                const float* gp = grad.data() + i * len;
                const float* cp = cur.data() + i * len;
                float* xp = cand.data() + i * len;
                const float a = step[static_cast<std::size_t>(i)];
                for (std::int64_t j = 0; j < len; ++j) {
                    m[j] = static_cast<float>(cfg.momentum) * m[j] + gp[j];
                    xp[j] = cp[j] + (m[j] > 0.0f ? a : m[j] < 0.0f ? -a : 0.0f);
                }
            }
            detail::project(cand, box);
            Tensor candGrad;
            std::vector<double> candConf;
            detail::conf_and_grad(spec, params, cand, cfg.targetClass, true, candConf, &candGrad);
            for (int i = 0; i < N; ++i) {
                const std::size_t si = static_cast<std::size_t>(i);
                if (candConf[si] > bestConf[si]) {
                    bestConf[si] = candConf[si];
                    std::copy(cand.data() + i * len, cand.data() + (i + 1) * len,
                              best.data() + i * len);
                }
                if (candConf[si] > curConf[si]) {
                    curConf[si] = candConf[si];
                    std::copy(cand.data() + i * len, cand.data() + (i + 1) * len,
                              cur.data() + i * len);
                    std::copy(candGrad.data() + i * len, candGrad.data() + (i + 1) * len,
                              grad.data() + i * len);
                    step[si] *= 1.1f;
                } else {
                    step[si] *= 0.5f;  // backtrack: keep cur and its gradient
                }
            }
        }
    }

    // report confidences from the float64 evaluation path so that
    // bestConfidence == Conf(bestPoint) for downstream consumers
    std::vector<AttackResult> out(static_cast<std::size_t>(N));
    const std::vector<double> evalBest = [&] {
        std::vector<double> logits = eval_logits_f64(spec, params, best);
        std::vector<double> c(static_cast<std::size_t>(N));
        for (int i = 0; i < N; ++i)
            c[static_cast<std::size_t>(i)] = confidence(std::span<const double>(
                logits.data() + static_cast<std::size_t>(i) * spec.classCount,
                static_cast<std::size_t>(spec.classCount)));
        return c;
    }();
    const std::vector<double> evalSeed = [&] {
        std::vector<double> logits = eval_logits_f64(spec, params, seeds);
        std::vector<double> c(static_cast<std::size_t>(N));
        for (int i = 0; i < N; ++i)
            c[static_cast<std::size_t>(i)] = confidence(std::span<const double>(
                logits.data() + static_cast<std::size_t>(i) * spec.classCount,
                static_cast<std::size_t>(spec.classCount)));
        return c;
    }();
    for (int i = 0; i < N; ++i) {
        const std::size_t si = static_cast<std::size_t>(i);
        Tensor pt({seeds.dim(1), seeds.dim(2), seeds.dim(3)});
        if (evalSeed[si] > evalBest[si]) {
            std::copy(seeds.data() + i * len, seeds.data() + (i + 1) * len, pt.data());
            out[si].bestConfidence = evalSeed[si];
        } else {
            std::copy(best.data() + i * len, best.data() + (i + 1) * len, pt.data());
            out[si].bestConfidence = evalBest[si];
        }
        out[si].bestPoint = pt;
        out[si].trajectoryMaxSeen = std::max(out[si].bestConfidence, bestConf[si]);
    }
    return out;
}

/// Single-sample convenience wrapper.
inline AttackResult monotone_pgd(const NetworkSpec& spec, const ParamStore& params,
                                 const Tensor& x, const AttackConfig& cfg,
                                 std::uint64_t seed = 0) {
    Tensor batch = x.rank() == 3 ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x;
    return attack_batch(spec, params, batch, cfg, seed)[0];
}

/// Warm-started attack: start points transferred from another model are
/// projected into each sample's box first. An undefined seedPoints tensor
/// falls back to the configured init scheme.
inline std::vector<AttackResult> transfer_attack(const NetworkSpec& spec, const ParamStore& params,
                                                 const Tensor& seeds, const Tensor& seedPoints,
                                                 const AttackConfig& cfg, std::uint64_t seed = 0) {
    if (!seedPoints.defined()) return attack_batch(spec, params, seeds, cfg, seed);
    require_same_shape(seeds, seedPoints, "transfer_attack");
    Tensor init = seedPoints.clone();
    detail::project(init, detail::seed_box(seeds, cfg.epsilon));
    return attack_batch(spec, params, seeds, cfg, seed, init);
}

/// Per-sample maximum confidence across several attack runs; a lower bound
/// on the true worst case.
inline double worst_case_aggregate(const std::vector<AttackResult>& resultsForSample) {
    if (resultsForSample.empty()) throw ContractError("worst_case_aggregate of empty set");
    double best = 0.0;
    for (const AttackResult& r : resultsForSample) best = std::max(best, r.bestConfidence);
    return best;
}

/// Columnwise aggregation of [attack][sample] result grids.
inline std::vector<double> worst_case_aggregate_all(
    const std::vector<std::vector<AttackResult>>& grid) {
    if (grid.empty()) throw ContractError("worst_case_aggregate of empty set");
    std::vector<double> out(grid.front().size(), 0.0);
    for (const auto& run : grid) {
        if (run.size() != out.size())
            throw ContractError("worst_case_aggregate: ragged result grid");
        for (std::size_t i = 0; i < run.size(); ++i)
            out[i] = std::max(out[i], run[i].bestConfidence);
    }
    return out;
}

// ---------------------------------------------------------------------------
// best-point dumps for transfer attacks

namespace detail {
constexpr char kPointsMagic[8] = {'G', 'O', 'O', 'D', 'B', 'P', 'T', 'S'};
}

inline void save_best_points(const std::string& path, const std::vector<AttackResult>& results) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("cannot open best-points file for writing: " + path);
    os.write(detail::kPointsMagic, 8);
    const std::uint32_t version = 1, count = static_cast<std::uint32_t>(results.size());
    os.write(reinterpret_cast<const char*>(&version), 4);
    os.write(reinterpret_cast<const char*>(&count), 4);
    for (const AttackResult& r : results) {
        const std::uint32_t rank = static_cast<std::uint32_t>(r.bestPoint.rank());
        os.write(reinterpret_cast<const char*>(&rank), 4);
        for (int d = 0; d < r.bestPoint.rank(); ++d) {
            const std::uint32_t e = static_cast<std::uint32_t>(r.bestPoint.dim(d));
            os.write(reinterpret_cast<const char*>(&e), 4);
        }
        os.write(reinterpret_cast<const char*>(r.bestPoint.data()),
                 static_cast<std::streamsize>(r.bestPoint.numel() * 4));
    }
}

/// Loads a best-points dump as one [N,C,H,W] tensor, keyed by sample index.
inline Tensor load_best_points(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open best-points file: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, detail::kPointsMagic, 8) != 0)
        throw ParseError("bad best-points magic in " + path);
    std::uint32_t version = 0, count = 0;
    if (!is.read(reinterpret_cast<char*>(&version), 4) || version != 1)
        throw ParseError("unsupported best-points version in " + path);
    if (!is.read(reinterpret_cast<char*>(&count), 4) || count == 0)
        throw ParseError("empty best-points file " + path);
    Tensor out;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t rank = 0;
        if (!is.read(reinterpret_cast<char*>(&rank), 4) || rank != 3)
            throw ParseError("best-points entries must be rank-3 images in " + path);
        std::uint32_t ext[3];
        if (!is.read(reinterpret_cast<char*>(ext), 12))
            throw ParseError("truncated best-points file " + path);
        if (!out.defined())
            out = Tensor({static_cast<int>(count), static_cast<int>(ext[0]),
                          static_cast<int>(ext[1]), static_cast<int>(ext[2])});
        const std::int64_t len = out.numel() / count;
        if (!is.read(reinterpret_cast<char*>(out.data() + static_cast<std::int64_t>(i) * len),
                     static_cast<std::streamsize>(len * 4)))
            throw ParseError("truncated best-points file " + path);
    }
    return out;
}

}  // namespace certood
