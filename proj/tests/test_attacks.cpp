#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <random>

#include "certood/attacks.hpp"
#include "certood/interval.hpp"
#include "oracle.hpp"

using namespace certood;

namespace {

/// Two-class linear model f(x) = W x; confidence is maximized at the box
/// corner x + eps * sign(w0 - w1), clipped to [0,1].
std::pair<NetworkSpec, ParamStore> linear_model(const Tensor& w0, const Tensor& w1) {
    const int d = static_cast<int>(w0.numel());
    NetworkSpec spec;
    spec.inputShape = {1, 1, d};
    spec.classCount = 2;
    spec.layers = {LayerSpec::flatten(), LayerSpec::affine(2)};
    ParamStore params;
    params.weights = {Tensor(), Tensor({2, d})};
    params.biases = {Tensor(), Tensor({2})};
    for (int j = 0; j < d; ++j) {
        params.weights[1][j] = w0[j];
        params.weights[1][d + j] = w1[j];
    }
    return {spec, params};
}

double model_conf(const NetworkSpec& spec, const ParamStore& params, const Tensor& x) {
    std::vector<double> logits = eval_logits_f64(
        spec, params, x.rank() == 3 ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x);
    return confidence(std::span<const double>(logits));
}

}  // namespace

TEST_CASE("attack config validation") {
    AttackConfig cfg;
    cfg.epsilon = 0.1;
    cfg.initRadius = 0.01;
    REQUIRE_NOTHROW(cfg.validate());
    cfg.steps = 0;
    REQUIRE_THROWS_AS(cfg.validate(), ContractError);
    cfg.steps = 10;
    cfg.initRadius = 0.2;  // exceeds epsilon
    REQUIRE_THROWS_AS(cfg.validate(), ContractError);
    cfg.initRadius = 0.01;
    cfg.momentum = 1.0;
    REQUIRE_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("monotone PGD on a linear model finds the corner") {
    std::mt19937 rng(3);
    Tensor w0({4}, {2.0f, -1.5f, 0.5f, -2.5f});
    Tensor w1({4}, {-1.0f, 1.0f, -0.5f, 1.5f});
    auto [spec, params] = linear_model(w0, w1);
    Tensor x({1, 1, 4}, {0.5f, 0.5f, 0.5f, 0.5f});
    const double eps = 0.2;

    // closed-form optimum: the box corner along +/- sign(w0 - w1), whichever
    // class ends up more confident
    Tensor cornerA = x.clone(), cornerB = x.clone();
    for (int j = 0; j < 4; ++j) {
        const float dir = w0[j] - w1[j] > 0 ? 1.0f : -1.0f;
        cornerA[j] += dir * static_cast<float>(eps);
        cornerB[j] -= dir * static_cast<float>(eps);
    }
    const double target =
        std::max(model_conf(spec, params, cornerA), model_conf(spec, params, cornerB));

    AttackConfig cfg;
    cfg.epsilon = eps;
    cfg.steps = 100;
    cfg.restarts = 2;
    cfg.initRadius = 0.01;
    AttackResult res = monotone_pgd(spec, params, x, cfg, 7);
    REQUIRE(res.bestConfidence >= target - 1e-4);
    REQUIRE(res.bestConfidence <= target + 1e-9);
}

TEST_CASE("zero radius returns the seed itself") {
    std::mt19937 rng(11);
    int d = 0;
    auto [spec, params] = oracle::random_small_net(rng, &d);
    Tensor x = oracle::random_tensor({1, 1, d}, rng, 0.0f, 1.0f);
    AttackConfig cfg;
    cfg.epsilon = 0.0;
    cfg.steps = 5;
    cfg.restarts = 1;
    cfg.initRadius = 0.0;
    AttackResult res = monotone_pgd(spec, params, x, cfg, 3);
    for (std::int64_t i = 0; i < x.numel(); ++i) REQUIRE(res.bestPoint[i] == x[i]);
    REQUIRE_THAT(res.bestConfidence, Catch::Matchers::WithinAbs(model_conf(spec, params, x), 1e-12));
}

TEST_CASE("attack confidence dominates the seed confidence") {
    std::mt19937 rng(13);
    for (int trial = 0; trial < 5; ++trial) {
        int d = 0;
        auto [spec, params] = oracle::random_small_net(rng, &d);
        Tensor x = oracle::random_tensor({1, 1, d}, rng, 0.0f, 1.0f);
        AttackConfig cfg;
        cfg.epsilon = 0.1;
        cfg.steps = 30;
        cfg.restarts = 2;
        AttackResult res = monotone_pgd(spec, params, x, cfg, trial);
        REQUIRE(res.bestConfidence >= model_conf(spec, params, x) - 1e-12);
        REQUIRE(res.trajectoryMaxSeen >= res.bestConfidence - 1e-12);
    }
}

TEST_CASE("contrast initialization") {
    SECTION("threshold rule") {
        Tensor x({2}, {0.95f, 0.4f});
        Tensor init = contrast_init(x, 0.3);
        REQUIRE(init[0] == 1.0f);
        REQUIRE_THAT(init[1], Catch::Matchers::WithinAbs(0.1, 1e-6));
    }
    SECTION("dark pixels floor at zero") {
        Tensor x({1}, {0.2f});
        REQUIRE(contrast_init(x, 0.3)[0] == 0.0f);
    }
    SECTION("always inside the clipped box") {
        std::mt19937 rng(17);
        Tensor x = oracle::random_tensor({50}, rng, 0.0f, 1.0f);
        for (double eps : {0.05, 0.3, 0.9}) {
            Tensor init = contrast_init(x, eps);
            for (std::int64_t i = 0; i < x.numel(); ++i) {
                REQUIRE(init[i] >= std::max(0.0, static_cast<double>(x[i]) - eps) - 1e-7);
                REQUIRE(init[i] <= std::min(1.0, static_cast<double>(x[i]) + eps) + 1e-7);
                REQUIRE(init[i] >= 0.0f);
                REQUIRE(init[i] <= 1.0f);
            }
        }
    }
}

TEST_CASE("iterates respect the box constraint exactly") {
    std::mt19937 rng(23);
    int d = 0;
    auto [spec, params] = oracle::random_small_net(rng, &d);
    Tensor batch = oracle::random_tensor({6, 1, 1, d}, rng, 0.0f, 1.0f);
    AttackConfig cfg;
    cfg.epsilon = 0.25;
    cfg.steps = 20;
    cfg.restarts = 2;
    cfg.init = InitScheme::UniformBall;
    cfg.initRadius = 0.25;
    std::vector<AttackResult> res = attack_batch(spec, params, batch, cfg, 5);
    for (int i = 0; i < 6; ++i) {
        for (std::int64_t j = 0; j < res[static_cast<std::size_t>(i)].bestPoint.numel(); ++j) {
            const float seed = batch[i * d + j];
            const float v = res[static_cast<std::size_t>(i)].bestPoint[j];
            REQUIRE(v >= std::max(0.0f, seed - 0.25f));
            REQUIRE(v <= std::min(1.0f, seed + 0.25f));
        }
    }
}

TEST_CASE("worst-case aggregation") {
    AttackResult a, b, c;
    a.bestConfidence = 0.3;
    b.bestConfidence = 0.9;
    c.bestConfidence = 0.5;
    SECTION("singleton") { REQUIRE(worst_case_aggregate({a}) == 0.3); }
    SECTION("max of several") {
        REQUIRE(worst_case_aggregate({a, b, c}) == 0.9);
        for (const AttackResult& r : {a, b, c})
            REQUIRE(worst_case_aggregate({a, b, c}) >= r.bestConfidence);
    }
    SECTION("grid aggregation is columnwise") {
        std::vector<std::vector<AttackResult>> grid{{a, b}, {c, a}};
        std::vector<double> agg = worst_case_aggregate_all(grid);
        REQUIRE(agg[0] == 0.5);
        REQUIRE(agg[1] == 0.9);
    }
    SECTION("empty input") {
        REQUIRE_THROWS_AS(worst_case_aggregate({}), ContractError);
    }
}

TEST_CASE("transfer attacks") {
    std::mt19937 rng(29);
    int d = 0;
    auto [spec, params] = oracle::random_small_net(rng, &d);
    Tensor batch = oracle::random_tensor({4, 1, 1, d}, rng, 0.1f, 0.9f);
    AttackConfig cfg;
    cfg.epsilon = 0.1;
    cfg.steps = 15;
    cfg.restarts = 1;
    cfg.initRadius = 0.01;

    SECTION("out-of-box transfer points are projected before the attack") {
        Tensor farSeeds = Tensor::full(batch.shape(), 5.0f);  // far outside every box
        std::vector<AttackResult> res = transfer_attack(spec, params, batch, farSeeds, cfg, 3);
        for (int i = 0; i < 4; ++i)
            for (std::int64_t j = 0; j < d; ++j) {
                const float v = res[static_cast<std::size_t>(i)].bestPoint[j];
                REQUIRE(v <= std::min(1.0f, batch[i * d + j] + 0.1f) + 1e-7f);
            }
    }
    SECTION("warm start from the same model dominates under aggregation") {
        std::vector<AttackResult> original = attack_batch(spec, params, batch, cfg, 3);
        Tensor warm({4, 1, 1, d});
        for (int i = 0; i < 4; ++i)
            std::copy(original[static_cast<std::size_t>(i)].bestPoint.data(),
                      original[static_cast<std::size_t>(i)].bestPoint.data() + d,
                      warm.data() + i * d);
        std::vector<AttackResult> transferred = transfer_attack(spec, params, batch, warm, cfg, 4);
        for (int i = 0; i < 4; ++i)
            REQUIRE(transferred[static_cast<std::size_t>(i)].bestConfidence >=
                    original[static_cast<std::size_t>(i)].bestConfidence - 1e-9);
    }
    SECTION("undefined seed set falls back to the init scheme") {
        std::vector<AttackResult> res = transfer_attack(spec, params, batch, Tensor(), cfg, 3);
        REQUIRE(res.size() == 4);
    }
}

TEST_CASE("attack lower bound never exceeds the certificate") {
    std::mt19937 rng(31);
    for (int trial = 0; trial < 4; ++trial) {
        int d = 0;
        auto [spec, params] = oracle::random_small_net(rng, &d);
        Tensor batch = oracle::random_tensor({8, 1, 1, d}, rng, 0.0f, 1.0f);
        const double eps = 0.15;
        AttackConfig cfg;
        cfg.epsilon = eps;
        cfg.steps = 40;
        cfg.restarts = 2;
        cfg.initRadius = 0.01;
        std::vector<AttackResult> attacked = attack_batch(spec, params, batch, cfg, trial);
        std::vector<double> cert = certify_batch(spec, params, batch, eps, true);
        for (int i = 0; i < 8; ++i)
            REQUIRE(attacked[static_cast<std::size_t>(i)].bestConfidence <=
                    cert[static_cast<std::size_t>(i)] + 1e-5);
    }
}

TEST_CASE("best-point files round trip") {
    std::mt19937 rng(37);
    std::vector<AttackResult> results(3);
    for (AttackResult& r : results) {
        r.bestPoint = oracle::random_tensor({1, 2, 2}, rng, 0.0f, 1.0f);
        r.bestConfidence = 0.5;
    }
    const std::string path = "best_points_test.bin";
    save_best_points(path, results);
    Tensor loaded = load_best_points(path);
    REQUIRE(loaded.shape() == Shape{3, 1, 2, 2});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j)
            REQUIRE(loaded[i * 4 + j] == results[static_cast<std::size_t>(i)].bestPoint[j]);
    std::remove(path.c_str());
    REQUIRE_THROWS_AS(load_best_points(path), ParseError);
}
