#pragma once

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "certood/attacks.hpp"
#include "certood/interval.hpp"
#include "certood/train.hpp"

// Implementations of the CLI subcommands, exposed as plain functions so the
// test suites can drive them directly.

namespace certood {

/// Parses "CxHxW" extents.
inline Shape parse_shape(const std::string& s) {
    Shape out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, 'x')) out.push_back(std::stoi(tok));
    if (out.size() != 3) throw ConfigError("shape must be CxHxW, got '" + s + "'");
    return out;
}

/// Resolves a dataset spec string:
///   uniform:N | smooth:N        synthetic noise shaped like `want`
///   idx:images[,labels]         IDX files
///   blob:path                   raw u8 blob
///   bare path                   IDX by suffix (-ubyte/.idx), else blob
/// Loaded images whose shape differs from `want` are converted by luminance
/// grayscale + bilinear resize.
inline Dataset resolve_dataset(const std::string& spec, const Shape& want, std::uint64_t seed) {
    auto starts = [&spec](const char* p) { return spec.rfind(p, 0) == 0; };
    Dataset ds;
    if (starts("uniform:") || starts("smooth:")) {
        if (want.empty()) throw ConfigError("synthetic noise needs a target shape");
        const int n = std::stoi(spec.substr(spec.find(':') + 1));
        ds = starts("uniform:") ? uniform_noise(n, want, seed) : smooth_noise(n, want, seed);
    } else if (starts("idx:")) {
        const std::string rest = spec.substr(4);
        const auto comma = rest.find(',');
        ds = comma == std::string::npos ? load_idx(rest)
                                        : load_idx(rest.substr(0, comma), rest.substr(comma + 1));
    } else if (starts("blob:")) {
        ds = load_raw_blob(spec.substr(5));
    } else if (spec.find("-ubyte") != std::string::npos || spec.find(".idx") != std::string::npos) {
        ds = load_idx(spec);
    } else {
        ds = load_raw_blob(spec);
    }
    if (!want.empty() && (ds.images.dim(1) != want[0] || ds.images.dim(2) != want[1] ||
                          ds.images.dim(3) != want[2])) {
        if (want[0] != 1)
            throw ConfigError("dataset '" + spec + "' has shape " + shape_str(ds.images.shape()) +
                              "; automatic conversion only targets single-channel inputs");
        ds = to_grayscale_resized(ds, want[1], want[2]);
    }
    return ds;
}

inline Dataset take_first(const Dataset& ds, int limit) {
    if (limit <= 0 || limit >= ds.count()) return ds;
    const std::int64_t len = ds.images.numel() / ds.count();
    Dataset out;
    out.name = ds.name;
    out.images = Tensor({limit, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
    std::copy(ds.images.data(), ds.images.data() + limit * len, out.images.data());
    if (!ds.labels.empty())
        out.labels.assign(ds.labels.begin(), ds.labels.begin() + limit);
    return out;
}

inline std::vector<float> clean_confidences(const NetworkSpec& spec, const ParamStore& params,
                                            const Tensor& images) {
    const int N = images.dim(0), K = spec.classCount;
    std::vector<float> confs(static_cast<std::size_t>(N));
    const int chunk = 256;
    for (int b0 = 0; b0 < N; b0 += chunk) {
        const int n = std::min(chunk, N - b0);
        Tensor part({n, images.dim(1), images.dim(2), images.dim(3)});
        const std::int64_t len = part.numel() / n;
        std::copy(images.data() + b0 * len, images.data() + (b0 + n) * len, part.data());
        std::vector<double> logits = eval_logits_f64(spec, params, part);
        for (int i = 0; i < n; ++i)
            confs[static_cast<std::size_t>(b0 + i)] = static_cast<float>(
                confidence(std::span<const double>(logits.data() + static_cast<std::size_t>(i) * K,
                                                   static_cast<std::size_t>(K))));
    }
    return confs;
}

inline std::vector<float> certified_uppers(const NetworkSpec& spec, const ParamStore& params,
                                           const Tensor& images, double epsilon, bool clip) {
    std::vector<double> bounds = certify_batch(spec, params, images, epsilon, clip);
    return std::vector<float>(bounds.begin(), bounds.end());
}

inline std::vector<float> attacked_confidences(const NetworkSpec& spec, const ParamStore& params,
                                               const Tensor& images, const AttackConfig& cfg,
                                               std::uint64_t seed,
                                               const Tensor& seedPoints = Tensor(),
                                               std::vector<AttackResult>* collect = nullptr) {
    const int N = images.dim(0);
    std::vector<float> confs(static_cast<std::size_t>(N));
    const int chunk = 64;
    const std::int64_t len = images.numel() / N;
    for (int b0 = 0; b0 < N; b0 += chunk) {
        const int n = std::min(chunk, N - b0);
        Tensor part({n, images.dim(1), images.dim(2), images.dim(3)});
        std::copy(images.data() + b0 * len, images.data() + (b0 + n) * len, part.data());
        Tensor init;
        if (seedPoints.defined()) {
            init = Tensor({n, images.dim(1), images.dim(2), images.dim(3)});
            std::copy(seedPoints.data() + b0 * len, seedPoints.data() + (b0 + n) * len,
                      init.data());
        }
        std::vector<AttackResult> results =
            init.defined() ? transfer_attack(spec, params, part, init, cfg, seed + b0)
                           : attack_batch(spec, params, part, cfg, seed + b0);
        for (int i = 0; i < n; ++i) {
            confs[static_cast<std::size_t>(b0 + i)] =
                static_cast<float>(results[static_cast<std::size_t>(i)].bestConfidence);
            if (collect) collect->push_back(results[static_cast<std::size_t>(i)]);
        }
    }
    return confs;
}

// ---------------------------------------------------------------------------

struct CertifyOptions {
    std::string checkpoint;
    std::string dataset;
    double epsilon = 0.0;
    bool clip = true;
    std::string outCsv;
    std::string inDataset;  // optional: enables the GAUC summary
    int limit = 0;
    std::uint64_t seed = 0;
};

/// Per-sample certified confidence upper bounds as CSV; prints a GAUC
/// summary when an in-distribution dataset is supplied.
inline int cmd_certify(const CertifyOptions& opt, std::ostream& log = std::cout) {
    Checkpoint ckpt = load_checkpoint(opt.checkpoint);
    const Shape want{ckpt.spec.inputShape[0], ckpt.spec.inputShape[1], ckpt.spec.inputShape[2]};
    Dataset ds = take_first(resolve_dataset(opt.dataset, want, opt.seed), opt.limit);
    const std::vector<float> clean = clean_confidences(ckpt.spec, ckpt.params, ds.images);
    const std::vector<float> cert =
        certified_uppers(ckpt.spec, ckpt.params, ds.images, opt.epsilon, opt.clip);
    std::ofstream os(opt.outCsv);
    if (!os) throw ParseError("cannot open output csv: " + opt.outCsv);
    os << "index,clean_conf,certified_upper\n";
    for (std::size_t i = 0; i < cert.size(); ++i)
        os << i << ',' << clean[i] << ',' << cert[i] << '\n';
    if (!opt.inDataset.empty()) {
        Dataset inDs = take_first(resolve_dataset(opt.inDataset, want, opt.seed + 1), opt.limit);
        const std::vector<float> inConfs = clean_confidences(ckpt.spec, ckpt.params, inDs.images);
        log << "gauc " << gauc(inConfs, cert) << std::endl;
    }
    return 0;
}

struct AttackOptions {
    std::string checkpoint;
    std::string dataset;
    AttackConfig attack;
    std::string outCsv;
    std::string seedPointsPath;  // optional transfer-attack starts
    std::string dumpBestPath;    // optional best-point dump
    int limit = 0;
    std::uint64_t seed = 0;
};

inline int cmd_attack(const AttackOptions& opt, std::ostream& log = std::cout) {
    Checkpoint ckpt = load_checkpoint(opt.checkpoint);
    const Shape want{ckpt.spec.inputShape[0], ckpt.spec.inputShape[1], ckpt.spec.inputShape[2]};
    Dataset ds = take_first(resolve_dataset(opt.dataset, want, opt.seed), opt.limit);
    Tensor seedPoints;
    if (!opt.seedPointsPath.empty()) {
        seedPoints = load_best_points(opt.seedPointsPath);
        if (seedPoints.dim(0) < ds.count())
            throw ContractError("seed-points file holds " + std::to_string(seedPoints.dim(0)) +
                                " points for " + std::to_string(ds.count()) + " samples");
    }
    const std::vector<float> clean = clean_confidences(ckpt.spec, ckpt.params, ds.images);
    std::vector<AttackResult> results;
    const std::vector<float> attacked = attacked_confidences(
        ckpt.spec, ckpt.params, ds.images, opt.attack, opt.seed, seedPoints, &results);
    std::ofstream os(opt.outCsv);
    if (!os) throw ParseError("cannot open output csv: " + opt.outCsv);
    os << "index,clean_conf,attacked_conf\n";
    for (std::size_t i = 0; i < attacked.size(); ++i)
        os << i << ',' << clean[i] << ',' << attacked[i] << '\n';
    if (!opt.dumpBestPath.empty()) save_best_points(opt.dumpBestPath, results);
    log << "mean attacked confidence " << mean_confidence(attacked) << std::endl;
    return 0;
}

struct EvalOptions {
    std::string checkpoint;
    std::string inImages, inLabels;
    std::vector<std::pair<std::string, std::string>> oodSets;  // name -> spec
    double epsilon = 0.0;
    AttackConfig attack;
    bool runAttack = true;
    std::string outCsv;
    int limit = 0;
    std::uint64_t seed = 0;
};

/// One metrics row per out-distribution set: auc / cauroc / aauc / gauc /
/// mean_conf at the given radius. Aborts if the certified/attacked/clean
/// ordering is violated anywhere.
inline int cmd_eval(const EvalOptions& opt, std::ostream& log = std::cout) {
    Checkpoint ckpt = load_checkpoint(opt.checkpoint);
    const Shape want{ckpt.spec.inputShape[0], ckpt.spec.inputShape[1], ckpt.spec.inputShape[2]};
    Dataset inDs = take_first(
        resolve_dataset(opt.inLabels.empty() ? opt.inImages : "idx:" + opt.inImages + "," + opt.inLabels,
                        want, opt.seed),
        opt.limit);
    const std::vector<float> inConfs = clean_confidences(ckpt.spec, ckpt.params, inDs.images);
    if (!inDs.labels.empty()) {
        Tensor logits = eval_logits(ckpt.spec, ckpt.params, inDs.images);
        log << "in-distribution accuracy " << batch_accuracy(logits, inDs.labels) << std::endl;
    }
    log << "in-distribution mean confidence " << mean_confidence(inConfs) << std::endl;

    std::vector<MetricsRow> rows;
    std::uint64_t oodSeed = opt.seed + 1;
    for (const auto& [name, spec] : opt.oodSets) {
        Dataset ood = take_first(resolve_dataset(spec, want, oodSeed++), opt.limit);
        const std::vector<float> clean = clean_confidences(ckpt.spec, ckpt.params, ood.images);
        AttackConfig atk = opt.attack;
        atk.epsilon = opt.epsilon;
        atk.initRadius = std::min(atk.initRadius, atk.epsilon);
        std::vector<float> attacked;
        if (opt.runAttack)
            attacked = attacked_confidences(ckpt.spec, ckpt.params, ood.images, atk, opt.seed);
        const std::vector<float> cert =
            certified_uppers(ckpt.spec, ckpt.params, ood.images, opt.epsilon, true);
        for (std::size_t i = 0; i < clean.size(); ++i) {
            EvalRecord rec;
            rec.cleanConf = clean[i];
            if (opt.runAttack) rec.attackedConf = attacked[i];
            rec.certifiedUpper = cert[i];
            rec.datasetTag = name;
            rec.check();
        }
        MetricsRow row;
        row.method = ckpt.meta.method;
        row.dataset = name;
        row.auc = auroc(inConfs, clean);
        row.caurocValue = cauroc(inConfs, clean);
        if (opt.runAttack) row.aaucValue = aauc(inConfs, attacked);
        row.gaucValue = gauc(inConfs, cert);
        row.meanConf = mean_confidence(clean);
        row.epsilon = opt.epsilon;
        constexpr double tol = 1e-9;
        if (opt.runAttack && *row.gaucValue > *row.aaucValue + tol)
            throw ContractError("GAUC " + std::to_string(*row.gaucValue) + " exceeds AAUC " +
                                std::to_string(*row.aaucValue) + " on " + name);
        if (opt.runAttack && *row.aaucValue > row.auc + tol)
            throw ContractError("AAUC " + std::to_string(*row.aaucValue) + " exceeds AUC " +
                                std::to_string(row.auc) + " on " + name);
        if (*row.gaucValue > row.auc + tol)
            throw ContractError("GAUC exceeds AUC on " + name);
        rows.push_back(row);
        log << name << "  auc " << row.auc << "  gauc " << *row.gaucValue;
        if (opt.runAttack) log << "  aauc " << *row.aaucValue;
        log << std::endl;
    }
    write_metrics_csv(opt.outCsv, rows);
    return 0;
}

struct TrainOptions {
    std::string configPath;
    std::string resumeCheckpoint;
    bool dryRun = false;
};

inline int cmd_train(const TrainOptions& opt, std::ostream& log = std::cout) {
    TrainConfig cfg = parse_train_config(opt.configPath);
    cfg.validate();
    if (cfg.trainImages.empty()) throw ConfigError("config key train_images is required");
    Dataset inDs = take_first(
        resolve_dataset(cfg.trainLabels.empty() ? cfg.trainImages
                                                : "idx:" + cfg.trainImages + "," + cfg.trainLabels,
                        {}, cfg.seed),
        cfg.trainLimit);
    if (inDs.labels.empty()) throw ConfigError("training data has no labels");
    const Shape want{inDs.images.dim(1), inDs.images.dim(2), inDs.images.dim(3)};
    Dataset outDs;
    if (!cfg.oodSpec.empty()) {
        // "+"-separated specs concatenate into one OOD pool
        std::istringstream ss(cfg.oodSpec);
        std::string part;
        std::vector<Dataset> parts;
        while (std::getline(ss, part, '+'))
            parts.push_back(resolve_dataset(part, want, cfg.seed + 7 + parts.size()));
        outDs = std::move(parts.front());
        for (std::size_t i = 1; i < parts.size(); ++i) {
            Tensor merged({outDs.count() + parts[i].count(), want[0], want[1], want[2]});
            std::copy(outDs.images.data(), outDs.images.data() + outDs.images.numel(),
                      merged.data());
            std::copy(parts[i].images.data(), parts[i].images.data() + parts[i].images.numel(),
                      merged.data() + outDs.images.numel());
            outDs.images = merged;
            outDs.name += "+" + parts[i].name;
        }
    }
    if (opt.dryRun) {
        log << "config ok: method " << cfg.method << ", " << inDs.count()
            << " training samples, " << outDs.count() << " OOD samples" << std::endl;
        return 0;
    }
    std::optional<Checkpoint> resume;
    if (!opt.resumeCheckpoint.empty()) resume = load_checkpoint(opt.resumeCheckpoint);
    TrainResult res = train(cfg, inDs, outDs, resume ? &*resume : nullptr, &log);
    log << "final checkpoint " << res.finalCheckpointPath << std::endl;
    return 0;
}

struct GenNoiseOptions {
    std::string kind = "uniform";  // uniform | smooth
    int count = 0;
    Shape shape;
    std::uint64_t seed = 0;
    std::string outPath;
};

inline int cmd_gen_noise(const GenNoiseOptions& opt, std::ostream& log = std::cout) {
    if (opt.kind != "uniform" && opt.kind != "smooth")
        throw ConfigError("noise kind must be uniform or smooth");
    Dataset ds = opt.kind == "uniform" ? uniform_noise(opt.count, opt.shape, opt.seed)
                                       : smooth_noise(opt.count, opt.shape, opt.seed);
    save_raw_blob(ds, opt.outPath);
    log << "wrote " << ds.count() << " " << opt.kind << " images to " << opt.outPath << std::endl;
    return 0;
}

/// Exit codes shared by the CLI and the tests: 0 success, 2 configuration,
/// 3 parse, 4 numeric, 5 contract/dimension, 1 anything else.
inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const ParseError*>(&e)) return 3;
    if (dynamic_cast<const NumericError*>(&e)) return 4;
    if (dynamic_cast<const DimensionError*>(&e)) return 5;
    if (dynamic_cast<const ContractError*>(&e)) return 5;
    return 1;
}

}  // namespace certood
