// Command-line surface: train / certify / attack / eval / gen-noise.

#include <CLI11.hpp>

#include <iostream>

#include "certood/commands.hpp"

namespace {

certood::InitScheme parse_init(const std::string& s) {
    if (s == "near") return certood::InitScheme::NearPoint;
    if (s == "ball") return certood::InitScheme::UniformBall;
    if (s == "contrast") return certood::InitScheme::Contrast;
    throw certood::ConfigError("unknown init scheme '" + s + "' (near|ball|contrast)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"certood: certified out-of-distribution detection toolkit"};
    app.require_subcommand(1);

    certood::TrainOptions trainOpt;
    CLI::App* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", trainOpt.configPath, "flat key-value config file")->required();
    train->add_option("--resume", trainOpt.resumeCheckpoint, "checkpoint to continue from");
    train->add_flag("--dry-run", trainOpt.dryRun, "validate config and datasets, then exit");

    certood::CertifyOptions certOpt;
    CLI::App* certify = app.add_subcommand("certify", "certified confidence upper bounds");
    certify->add_option("--checkpoint", certOpt.checkpoint)->required();
    certify->add_option("--dataset", certOpt.dataset, "idx:/blob:/uniform:N/smooth:N spec")
        ->required();
    certify->add_option("--epsilon", certOpt.epsilon)->required();
    certify->add_flag("!--no-clip", certOpt.clip, "bound over the raw eps-box instead of its [0,1] intersection");
    certify->add_option("--out", certOpt.outCsv)->required();
    certify->add_option("--in-dataset", certOpt.inDataset, "in-distribution set for the GAUC summary");
    certify->add_option("--limit", certOpt.limit, "evaluate only the first N samples");
    certify->add_option("--seed", certOpt.seed);

    certood::AttackOptions atkOpt;
    std::string initScheme = "near";
    CLI::App* attack = app.add_subcommand("attack", "confidence-maximizing PGD");
    attack->add_option("--checkpoint", atkOpt.checkpoint)->required();
    attack->add_option("--dataset", atkOpt.dataset)->required();
    attack->add_option("--epsilon", atkOpt.attack.epsilon)->required();
    attack->add_option("--steps", atkOpt.attack.steps);
    attack->add_option("--restarts", atkOpt.attack.restarts);
    attack->add_option("--step-size", atkOpt.attack.initialStep, "initial step (default 0.1*epsilon)");
    attack->add_option("--momentum", atkOpt.attack.momentum);
    attack->add_option("--init", initScheme, "near|ball|contrast");
    attack->add_option("--init-radius", atkOpt.attack.initRadius);
    attack->add_option("--target-class", atkOpt.attack.targetClass);
    attack->add_option("--out", atkOpt.outCsv)->required();
    attack->add_option("--seed-points", atkOpt.seedPointsPath, "best-point dump for a transfer attack");
    attack->add_option("--dump-best", atkOpt.dumpBestPath, "write best points for later transfer");
    attack->add_option("--limit", atkOpt.limit);
    attack->add_option("--seed", atkOpt.seed);

    certood::EvalOptions evalOpt;
    std::vector<std::string> oodSpecs;
    std::string evalInit = "near";
    CLI::App* eval = app.add_subcommand("eval", "clean/adversarial/guaranteed AUC table");
    eval->add_option("--checkpoint", evalOpt.checkpoint)->required();
    eval->add_option("--in-images", evalOpt.inImages)->required();
    eval->add_option("--in-labels", evalOpt.inLabels);
    eval->add_option("--ood", oodSpecs, "NAME=SPEC, repeatable")->take_all();
    eval->add_option("--epsilon", evalOpt.epsilon)->required();
    eval->add_option("--attack-steps", evalOpt.attack.steps);
    eval->add_option("--attack-restarts", evalOpt.attack.restarts);
    eval->add_option("--attack-init", evalInit);
    bool noAttack = false;
    eval->add_flag("--no-attack", noAttack, "skip the adversarial AUC");
    eval->add_option("--out", evalOpt.outCsv)->required();
    eval->add_option("--limit", evalOpt.limit);
    eval->add_option("--seed", evalOpt.seed);

    certood::GenNoiseOptions noiseOpt;
    std::string shapeStr = "1x28x28";
    CLI::App* gen = app.add_subcommand("gen-noise", "write a synthetic noise dataset");
    gen->add_option("--kind", noiseOpt.kind, "uniform|smooth")->required();
    gen->add_option("--count", noiseOpt.count)->required();
    gen->add_option("--shape", shapeStr, "CxHxW");
    gen->add_option("--seed", noiseOpt.seed);
    gen->add_option("--out", noiseOpt.outPath)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return certood::cmd_train(trainOpt);
        if (*certify) return certood::cmd_certify(certOpt);
        if (*attack) {
            atkOpt.attack.init = parse_init(initScheme);
            atkOpt.attack.initRadius = std::min(atkOpt.attack.initRadius, atkOpt.attack.epsilon);
            return certood::cmd_attack(atkOpt);
        }
        if (*eval) {
            evalOpt.attack.init = parse_init(evalInit);
            evalOpt.runAttack = !noAttack;
            for (const std::string& s : oodSpecs) {
                const auto eq = s.find('=');
                if (eq == std::string::npos)
                    throw certood::ConfigError("--ood expects NAME=SPEC, got '" + s + "'");
                evalOpt.oodSets.emplace_back(s.substr(0, eq), s.substr(eq + 1));
            }
            return certood::cmd_eval(evalOpt);
        }
        if (*gen) {
            noiseOpt.shape = certood::parse_shape(shapeStr);
            return certood::cmd_gen_noise(noiseOpt);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return certood::exit_code_for(e);
    }
    return 1;
}
