#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "certood/tensor.hpp"

namespace certood {

/// Maximum softmax probability, computed stably; lies in [1/K, 1].
inline double confidence(std::span<const float> logits) {
    double m = -std::numeric_limits<double>::infinity();
    for (float v : logits) m = std::max(m, static_cast<double>(v));
    double s = 0.0;
    for (float v : logits) s += std::exp(static_cast<double>(v) - m);
    return 1.0 / s;  // exp(m - m) / sum == max prob
}

inline double confidence(std::span<const double> logits) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : logits) m = std::max(m, v);
    double s = 0.0;
    for (double v : logits) s += std::exp(v - m);
    return 1.0 / s;
}

/// Per-row confidences of a [B,K] logit tensor.
inline std::vector<float> batch_confidences(const Tensor& logits) {
    const int B = logits.dim(0), K = logits.dim(1);
    std::vector<float> out(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b)
        out[static_cast<std::size_t>(b)] = static_cast<float>(
            confidence(std::span<const float>(logits.data() + static_cast<std::size_t>(b) * K,
                                              static_cast<std::size_t>(K))));
    return out;
}

namespace detail {

// strict and tied pair counts via sort + binary search, 64-bit accumulation;
// ties use exact float equality
inline std::pair<std::int64_t, std::int64_t> pair_counts(const std::vector<float>& inScores,
                                                         const std::vector<float>& outScores) {
    if (inScores.empty() || outScores.empty())
        throw ContractError("auroc needs non-empty score sets");
    std::vector<float> sortedOut = outScores;
    std::sort(sortedOut.begin(), sortedOut.end());
    std::int64_t greater = 0, equal = 0;
    for (float s : inScores) {
        const auto lo = std::lower_bound(sortedOut.begin(), sortedOut.end(), s);
        const auto hi = std::upper_bound(lo, sortedOut.end(), s);
        greater += lo - sortedOut.begin();
        equal += hi - lo;
    }
    return {greater, equal};
}

}  // namespace detail

/// P(in > out) + 1/2 P(in == out) over all in/out score pairs.
inline double auroc(const std::vector<float>& inScores, const std::vector<float>& outScores) {
    auto [gt, eq] = detail::pair_counts(inScores, outScores);
    return (static_cast<double>(gt) + 0.5 * static_cast<double>(eq)) /
           (static_cast<double>(inScores.size()) * static_cast<double>(outScores.size()));
}

/// Conservative variant: P(in > out) only, dropping the equality term.
inline double cauroc(const std::vector<float>& inScores, const std::vector<float>& outScores) {
    auto [gt, eq] = detail::pair_counts(inScores, outScores);
    (void)eq;
    return static_cast<double>(gt) /
           (static_cast<double>(inScores.size()) * static_cast<double>(outScores.size()));
}

/// AUC against certified confidence upper bounds (provable worst case).
inline double gauc(const std::vector<float>& inConfs, const std::vector<float>& certifiedUppers) {
    return auroc(inConfs, certifiedUppers);
}

/// AUC against attack-maximized confidences (empirical worst case).
inline double aauc(const std::vector<float>& inConfs, const std::vector<float>& attackedConfs) {
    return auroc(inConfs, attackedConfs);
}

inline double mean_confidence(const std::vector<float>& confs) {
    if (confs.empty()) throw ContractError("mean_confidence of empty set");
    double s = 0.0;
    for (float v : confs) s += v;
    return s / static_cast<double>(confs.size());
}

/// Per-sample scores of one evaluated input. When attacked and certified
/// values are both present they must satisfy clean <= attacked <= certified
/// (up to 1e-5).
struct EvalRecord {
    float cleanConf = 0.0f;
    std::optional<float> attackedConf;
    std::optional<float> certifiedUpper;
    std::string datasetTag;

    void check() const {
        constexpr float slack = 1e-5f;
        if (attackedConf && *attackedConf + slack < cleanConf)
            throw ContractError("attacked confidence below clean confidence on " + datasetTag);
        if (attackedConf && certifiedUpper && *attackedConf > *certifiedUpper + slack)
            throw ContractError("attacked confidence exceeds certified bound on " + datasetTag);
        if (certifiedUpper && !attackedConf && *certifiedUpper + slack < cleanConf)
            throw ContractError("certified bound below clean confidence on " + datasetTag);
    }
};

/// One aggregated row of the evaluation CSV.
struct MetricsRow {
    std::string method;
    std::string dataset;
    double auc = 0.0;
    std::optional<double> caurocValue;
    std::optional<double> aaucValue;
    std::optional<double> gaucValue;
    double meanConf = 0.0;
    double epsilon = 0.0;
};

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream os(path);
    if (!os) throw ParseError("cannot open metrics csv for writing: " + path);
    os << "method,dataset,auc,cauroc,aauc,gauc,mean_conf,epsilon\n";
    auto cell = [&os](const std::optional<double>& v) {
        if (v) os << *v;
        os << ',';
    };
    for (const MetricsRow& r : rows) {
        os << r.method << ',' << r.dataset << ',' << r.auc << ',';
        cell(r.caurocValue);
        cell(r.aaucValue);
        cell(r.gaucValue);
        os << r.meanConf << ',' << r.epsilon << '\n';
    }
}

}  // namespace certood
