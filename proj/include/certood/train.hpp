#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "certood/checkpoint.hpp"
#include "certood/data.hpp"
#include "certood/losses.hpp"

namespace certood {

/// Linear ramp between two epochs, clamped to the endpoint values outside.
struct Schedule {
    int startEpoch = 0;
    int endEpoch = 0;
    double startValue = 0.0;
    double endValue = 0.0;

    double at(double epoch) const {
        if (startEpoch > endEpoch) throw ContractError("schedule: startEpoch > endEpoch");
        if (epoch <= startEpoch) return startValue;
        if (epoch >= endEpoch) return endValue;
        const double t = (epoch - startEpoch) / static_cast<double>(endEpoch - startEpoch);
        return startValue + t * (endValue - startValue);
    }

    static Schedule constant(double v) { return {0, 0, v, v}; }
};

inline double schedule_value(const Schedule& s, int epoch, double fracWithinEpoch) {
    return s.at(epoch + fracWithinEpoch);
}

/// Piecewise-constant learning rate: divided by `divisor` at the start of
/// each listed epoch.
struct LrSchedule {
    double initial = 1e-3;
    std::vector<int> dropEpochs;
    double divisor = 5.0;

    double at(int epoch) const {
        double lr = initial;
        for (int d : dropEpochs)
            if (epoch >= d) lr /= divisor;
        return lr;
    }
};

// ---------------------------------------------------------------------------
// optimizers (l2 penalty folded into the gradient: g += wd * p)

struct Grads {
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;
};

inline Grads collect_grads(Graph& g, const ParamVars& vars) {
    Grads out;
    for (std::size_t i = 0; i < vars.weights.size(); ++i) {
        out.weights.push_back(vars.weights[i].valid() ? g.grad(vars.weights[i]) : Tensor());
        out.biases.push_back(vars.biases[i].valid() ? g.grad(vars.biases[i]) : Tensor());
    }
    return out;
}

class SgdNesterov {
public:
    explicit SgdNesterov(double momentum = 0.9) : momentum_(momentum) {}

    void step(ParamStore& params, const Grads& grads, double lr, double weightDecay) {
        lazy_init(params);
        for (std::size_t i = 0; i < params.weights.size(); ++i) {
            if (!params.weights[i].defined()) continue;
            apply(params.weights[i], grads.weights[i], velW_[i], lr, weightDecay);
            apply(params.biases[i], grads.biases[i], velB_[i], lr, weightDecay);
        }
    }

private:
    void lazy_init(const ParamStore& params) {
        if (!velW_.empty()) return;
        for (std::size_t i = 0; i < params.weights.size(); ++i) {
            velW_.push_back(params.weights[i].defined() ? Tensor::zeros(params.weights[i].shape())
                                                        : Tensor());
            velB_.push_back(params.biases[i].defined() ? Tensor::zeros(params.biases[i].shape())
                                                       : Tensor());
        }
    }

    void apply(Tensor& p, const Tensor& g, Tensor& vel, double lr, double wd) {
        const float m = static_cast<float>(momentum_);
        for (std::int64_t j = 0; j < p.numel(); ++j) {
            const float gt = g[j] + static_cast<float>(wd) * p[j];
            vel[j] = m * vel[j] + gt;
            p[j] -= static_cast<float>(lr) * (gt + m * vel[j]);
        }
    }

    double momentum_;
    std::vector<Tensor> velW_, velB_;
};

class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamStore& params, const Grads& grads, double lr, double weightDecay) {
        lazy_init(params);
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, t_), c2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params.weights.size(); ++i) {
            if (!params.weights[i].defined()) continue;
            apply(params.weights[i], grads.weights[i], mW_[i], vW_[i], lr, weightDecay, c1, c2);
            apply(params.biases[i], grads.biases[i], mB_[i], vB_[i], lr, weightDecay, c1, c2);
        }
    }

private:
    void lazy_init(const ParamStore& params) {
        if (!mW_.empty()) return;
        for (std::size_t i = 0; i < params.weights.size(); ++i) {
            const bool has = params.weights[i].defined();
            mW_.push_back(has ? Tensor::zeros(params.weights[i].shape()) : Tensor());
            vW_.push_back(has ? Tensor::zeros(params.weights[i].shape()) : Tensor());
            mB_.push_back(has ? Tensor::zeros(params.biases[i].shape()) : Tensor());
            vB_.push_back(has ? Tensor::zeros(params.biases[i].shape()) : Tensor());
        }
    }

    void apply(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, double lr, double wd,
               double c1, double c2) {
        for (std::int64_t j = 0; j < p.numel(); ++j) {
            const double gt = g[j] + wd * p[j];
            m[j] = static_cast<float>(beta1_ * m[j] + (1.0 - beta1_) * gt);
            v[j] = static_cast<float>(beta2_ * v[j] + (1.0 - beta2_) * gt * gt);
            const double mhat = m[j] / c1, vhat = v[j] / c2;
            p[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps_));
        }
    }

    double beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::vector<Tensor> mW_, vW_, mB_, vB_;
};

// ---------------------------------------------------------------------------
// configuration

struct TrainConfig {
    std::string method = "good";  // plain | oe | ceda | acet | good
    std::string architecture = "L";
    int classCount = 10;
    double quantile = 1.0;
    Schedule epsilonSchedule = Schedule::constant(0.0);
    Schedule kappaSchedule = Schedule::constant(0.0);
    int epochs = 30;
    int batchSize = 128;
    std::uint64_t seed = 0;
    int warmupEpochs = 2;
    std::string optimizer = "sgd";  // sgd | adam
    double momentum = 0.9;
    double weightDecay = 0.05;
    LrSchedule lr;
    bool augmentCrop = true;
    bool augmentFlip = false;
    int cropPad = 4;
    int checkpointEvery = 0;  // 0: final checkpoint only
    std::string outDir = ".";
    std::string runName = "model";
    std::string trainImages, trainLabels;
    std::string oodSpec;
    int trainLimit = 0;
    int acetSteps = 40;

    void validate() const {
        if (quantile < 0.0 || quantile > 1.0)
            throw ConfigError("quantile must lie in [0,1]");
        if (method != "plain" && method != "oe" && method != "ceda" && method != "acet" &&
            method != "good")
            throw ConfigError("unknown training method '" + method + "'");
        if (optimizer != "sgd" && optimizer != "adam")
            throw ConfigError("unknown optimizer '" + optimizer + "'");
        if (epochs < 1 || batchSize < 1) throw ConfigError("epochs and batch size must be >= 1");
        if (lr.initial <= 0.0) throw ConfigError("learning rate must be positive");
        if (weightDecay < 0.0) throw ConfigError("weight decay must be non-negative");
        if (method != "plain" && oodSpec.empty())
            throw ConfigError("method '" + method + "' needs an out-distribution (key ood)");
    }
};

/// Flat key-value config file: one `key value...` pair per line, '#'
/// comments. Unknown keys are rejected.
inline TrainConfig parse_train_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    TrainConfig cfg;
    std::string line;
    int lineNo = 0;
    auto ints = [](const std::string& s) {
        std::vector<int> out;
        std::istringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
        return out;
    };
    while (std::getline(is, line)) {
        ++lineNo;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        std::string rest;
        std::getline(ls, rest);
        std::istringstream vs(rest);
        auto want = [&](auto& dst) {
            if (!(vs >> dst))
                throw ConfigError("bad value for '" + key + "' at " + path + ":" +
                                  std::to_string(lineNo));
        };
        if (key == "method") want(cfg.method);
        else if (key == "architecture") want(cfg.architecture);
        else if (key == "classes") want(cfg.classCount);
        else if (key == "quantile") want(cfg.quantile);
        else if (key == "epochs") want(cfg.epochs);
        else if (key == "batch_size") want(cfg.batchSize);
        else if (key == "seed") want(cfg.seed);
        else if (key == "warmup_epochs") want(cfg.warmupEpochs);
        else if (key == "optimizer") want(cfg.optimizer);
        else if (key == "momentum") want(cfg.momentum);
        else if (key == "weight_decay") want(cfg.weightDecay);
        else if (key == "lr") want(cfg.lr.initial);
        else if (key == "lr_divisor") want(cfg.lr.divisor);
        else if (key == "lr_drop_epochs") {
            std::string s;
            want(s);
            cfg.lr.dropEpochs = ints(s);
        }
        else if (key == "epsilon_start_epoch") want(cfg.epsilonSchedule.startEpoch);
        else if (key == "epsilon_end_epoch") want(cfg.epsilonSchedule.endEpoch);
        else if (key == "epsilon_start") want(cfg.epsilonSchedule.startValue);
        else if (key == "epsilon_end") want(cfg.epsilonSchedule.endValue);
        else if (key == "kappa_start_epoch") want(cfg.kappaSchedule.startEpoch);
        else if (key == "kappa_end_epoch") want(cfg.kappaSchedule.endEpoch);
        else if (key == "kappa_start") want(cfg.kappaSchedule.startValue);
        else if (key == "kappa_end") want(cfg.kappaSchedule.endValue);
        else if (key == "augment_crop") want(cfg.augmentCrop);
        else if (key == "augment_flip") want(cfg.augmentFlip);
        else if (key == "crop_pad") want(cfg.cropPad);
        else if (key == "checkpoint_every") want(cfg.checkpointEvery);
        else if (key == "out_dir") want(cfg.outDir);
        else if (key == "run_name") want(cfg.runName);
        else if (key == "train_images") want(cfg.trainImages);
        else if (key == "train_labels") want(cfg.trainLabels);
        else if (key == "train_limit") want(cfg.trainLimit);
        else if (key == "ood") want(cfg.oodSpec);
        else if (key == "acet_steps") want(cfg.acetSteps);
        else
            throw ConfigError("unknown config key '" + key + "' at " + path + ":" +
                              std::to_string(lineNo));
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// training loop

struct EpochStats {
    int epoch = 0;
    double ceLoss = 0.0;
    double oodLoss = 0.0;
    double trainAcc = 0.0;
    double epsilon = 0.0;
    double kappa = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    NetworkSpec spec;
    ParamStore params;
    std::vector<EpochStats> log;
    std::string finalCheckpointPath;
};

inline void write_epoch_csv(const std::string& path, const std::vector<EpochStats>& log) {
    std::ofstream os(path);
    if (!os) throw ParseError("cannot open metrics log for writing: " + path);
    os << "epoch,ce_loss,ood_loss,train_acc,epsilon,kappa,lr\n";
    for (const EpochStats& s : log)
        os << s.epoch << ',' << s.ceLoss << ',' << s.oodLoss << ',' << s.trainAcc << ','
           << s.epsilon << ',' << s.kappa << ',' << s.lr << '\n';
}

inline double batch_accuracy(const Tensor& logits, const std::vector<int>& labels) {
    const int B = logits.dim(0), K = logits.dim(1);
    int hit = 0;
    for (int b = 0; b < B; ++b) {
        const float* row = logits.data() + static_cast<std::size_t>(b) * K;
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (row[k] > row[best]) best = k;
        hit += best == labels[static_cast<std::size_t>(b)];
    }
    return static_cast<double>(hit) / B;
}

/// Runs the configured training method. Resuming continues the epoch
/// counter from the checkpoint's recorded epoch.
inline TrainResult train(const TrainConfig& cfg, const Dataset& inData, const Dataset& outData,
                         const Checkpoint* resume = nullptr, std::ostream* progress = nullptr) {
    cfg.validate();
    inData.check();
    if (inData.labels.empty()) throw ContractError("training needs labeled in-distribution data");

    TrainResult res;
    int firstEpoch = 0;
    if (resume) {
        res.spec = resume->spec;
        res.params = resume->params;
        firstEpoch = resume->meta.epoch;
    } else {
        res.spec = build_architecture(
            cfg.architecture,
            {inData.images.dim(1), inData.images.dim(2), inData.images.dim(3)}, cfg.classCount);
        res.params = init_params(res.spec, cfg.seed);
    }

    const bool needsOod = cfg.method != "plain";
    Dataset oodOrEmpty = outData;
    if (needsOod) {
        oodOrEmpty.check();
    } else if (oodOrEmpty.count() == 0) {
        // the batcher wants something to cycle; plain training never reads it
        oodOrEmpty = inData;
    }
    AugmentConfig aug{cfg.cropPad, cfg.augmentFlip};
    MixedBatcher batcher(inData, oodOrEmpty, cfg.batchSize, cfg.seed + 1, aug, cfg.augmentCrop);
    const int batches = batcher.batchesPerEpoch();

    SgdNesterov sgd(cfg.momentum);
    Adam adam;

    std::filesystem::create_directories(cfg.outDir);
    for (int epoch = firstEpoch; epoch < firstEpoch + cfg.epochs; ++epoch) {
        const double lr = cfg.lr.at(epoch);
        double ceSum = 0.0, oodSum = 0.0, accSum = 0.0;
        double lastEps = 0.0, lastKappa = 0.0;
        for (int bi = 0; bi < batches; ++bi) {
            const double epochF = epoch + static_cast<double>(bi) / batches;
            const double eps = cfg.epsilonSchedule.at(epochF);
            const double kappa = cfg.kappaSchedule.at(epochF);
            lastEps = eps;
            lastKappa = kappa;
            MixedBatch mb = batcher.next();

            Graph g;
            ParamVars vars = make_param_vars(g, res.spec, res.params, true);
            const bool warmup = epoch - firstEpoch < cfg.warmupEpochs;
            const bool useOod = needsOod && !warmup && kappa > 0.0;
            Var total;
            double ceVal = 0.0, oodVal = 0.0;
            Tensor logitsValue;
            if (cfg.method == "good" && useOod) {
                GoodLoss loss = good_objective(g, res.spec, vars, mb.inImages, mb.inLabels,
                                               mb.outImages, eps, kappa, cfg.quantile);
                total = loss.total;
                ceVal = loss.report.ceLoss;
                oodVal = loss.report.oodLoss;
                logitsValue = g.value(loss.inLogits);
            } else {
                Var logits = forward_vars(g, res.spec, vars, g.constant(mb.inImages));
                Var ce = cross_entropy(g, logits, mb.inLabels);
                total = ce;
                if (useOod) {
                    Var outLoss;
                    if (cfg.method == "oe")
                        outLoss = oe_loss(
                            g, forward_vars(g, res.spec, vars, g.constant(mb.outImages)));
                    else if (cfg.method == "ceda")
                        outLoss = ceda_loss(
                            g, forward_vars(g, res.spec, vars, g.constant(mb.outImages)));
                    else if (cfg.method == "acet")
                        outLoss = acet_objective(g, res.spec, vars, res.params, mb.outImages,
                                                 eps, cfg.acetSteps)
                                      .loss;
                    else
                        throw ConfigError("method '" + cfg.method + "' has no loss");
                    Var scaled = scale(g, outLoss, static_cast<float>(kappa));
                    oodVal = g.value(scaled)[0];
                    total = add(g, ce, scaled);
                }
                ceVal = g.value(ce)[0];
                logitsValue = g.value(logits);
            }
            const float totalVal = g.value(total)[0];
            if (!std::isfinite(totalVal))
                throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(bi));
            g.backward(total);
            Grads grads = collect_grads(g, vars);
            if (cfg.optimizer == "sgd")
                sgd.step(res.params, grads, lr, cfg.weightDecay);
            else
                adam.step(res.params, grads, lr, cfg.weightDecay);
            ceSum += ceVal;
            oodSum += oodVal;
            if (logitsValue.defined() && logitsValue.rank() == 2 &&
                logitsValue.dim(0) == static_cast<int>(mb.inLabels.size()))
                accSum += batch_accuracy(logitsValue, mb.inLabels);
        }
        EpochStats stats{epoch,
                         ceSum / batches,
                         oodSum / batches,
                         accSum / batches,
                         lastEps,
                         lastKappa,
                         lr};
        res.log.push_back(stats);
        if (progress)
            (*progress) << "epoch " << epoch << "  ce " << stats.ceLoss << "  ood "
                        << stats.oodLoss << "  acc " << stats.trainAcc << "  eps "
                        << stats.epsilon << "  kappa " << stats.kappa << "  lr " << lr
                        << std::endl;
        const bool last = epoch + 1 == firstEpoch + cfg.epochs;
        if (last || (cfg.checkpointEvery > 0 && (epoch + 1) % cfg.checkpointEvery == 0)) {
            CheckpointMeta meta;
            meta.epoch = epoch + 1;
            meta.epsilon = lastEps;
            meta.kappa = lastKappa;
            meta.quantile = cfg.quantile;
            meta.seed = cfg.seed;
            meta.method = cfg.method;
            const std::string path = cfg.outDir + "/" + cfg.runName +
                                     (last ? std::string(".ckpt")
                                           : "_epoch" + std::to_string(epoch + 1) + ".ckpt");
            save_checkpoint(res.spec, res.params, meta, path);
            if (last) res.finalCheckpointPath = path;
        }
    }
    write_epoch_csv(cfg.outDir + "/" + cfg.runName + "_metrics.csv", res.log);
    return res;
}

}  // namespace certood
