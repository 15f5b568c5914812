#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "certood/interval.hpp"
#include "certood/metrics.hpp"
#include "oracle.hpp"

using namespace certood;

TEST_CASE("input interval construction") {
    Tensor x({3}, {0.99f, 0.5f, 0.0f});
    SECTION("zero radius degenerates to the point") {
        IntervalTensor iv = input_interval(x, 0.0, false);
        for (int i = 0; i < 3; ++i) {
            REQUIRE(iv.lower[i] == x[i]);
            REQUIRE(iv.upper[i] == x[i]);
        }
    }
    SECTION("clipped box") {
        IntervalTensor iv = input_interval(x, 0.3, true);
        REQUIRE_THAT(iv.lower[0], Catch::Matchers::WithinAbs(0.69, 1e-6));
        REQUIRE(iv.upper[0] == 1.0f);
        REQUIRE(iv.lower[2] == 0.0f);
    }
    SECTION("unclipped box") {
        IntervalTensor iv = input_interval(Tensor({1}, {0.5f}), 0.3, false);
        REQUIRE_THAT(iv.lower[0], Catch::Matchers::WithinAbs(0.2, 1e-6));
        REQUIRE_THAT(iv.upper[0], Catch::Matchers::WithinAbs(0.8, 1e-6));
    }
    SECTION("negative radius") {
        REQUIRE_THROWS_AS(input_interval(x, -0.1, false), ContractError);
    }
}

TEST_CASE("interval affine step") {
    SECTION("degenerate interval equals the plain affine image") {
        std::mt19937 rng(3);
        Tensor w = oracle::random_tensor({4, 3}, rng);
        Tensor b = oracle::random_tensor({4}, rng);
        Tensor x = oracle::random_tensor({1, 3}, rng);
        IntervalTensor iv{x, x};
        IntervalTensor out = propagate_affine(iv, w, b, false);
        std::vector<double> ref = oracle::affine(oracle::widen(x), w, b);
        for (int i = 0; i < 4; ++i) {
            REQUIRE_THAT(out.lower[i], Catch::Matchers::WithinAbs(ref[i], 1e-6));
            REQUIRE(out.lower[i] <= out.upper[i]);
            REQUIRE_THAT(out.upper[i], Catch::Matchers::WithinAbs(ref[i], 1e-6));
        }
    }
    SECTION("sign split on the unit box") {
        Tensor w({1, 2}, {1.0f, -1.0f});
        Tensor b({1}, {0.0f});
        IntervalTensor iv{Tensor({1, 2}, {0.0f, 0.0f}), Tensor({1, 2}, {1.0f, 1.0f})};
        IntervalTensor pre = propagate_affine(iv, w, b, false);
        REQUIRE(pre.lower[0] == -1.0f);
        REQUIRE(pre.upper[0] == 1.0f);
        IntervalTensor post = propagate_affine(iv, w, b, true);
        REQUIRE(post.lower[0] == 0.0f);
        REQUIRE(post.upper[0] == 1.0f);
    }
    SECTION("Monte-Carlo containment") {
        std::mt19937 rng(17);
        Tensor w = oracle::random_tensor({5, 4}, rng);
        Tensor b = oracle::random_tensor({5}, rng);
        Tensor lo = oracle::random_tensor({1, 4}, rng, -1.0f, 0.0f);
        Tensor hi = lo.clone();
        for (int i = 0; i < 4; ++i) hi[i] += uniform_in(rng, 0.0f, 1.0f);
        IntervalTensor out = propagate_affine({lo, hi}, w, b, true);
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<double> pt(4);
            for (int i = 0; i < 4; ++i) pt[i] = lo[i] + uniform01(rng) * (hi[i] - lo[i]);
            std::vector<double> y = oracle::affine(pt, w, b);
            for (int i = 0; i < 5; ++i) {
                const double v = std::max(0.0, y[i]);
                REQUIRE(v >= out.lower[i]);
                REQUIRE(v <= out.upper[i]);
            }
        }
    }
}

TEST_CASE("interval conv step") {
    SECTION("identity kernel on a degenerate interval") {
        std::mt19937 rng(5);
        Tensor x = oracle::random_tensor({1, 4, 4}, rng, 0.0f, 1.0f);
        Tensor k = Tensor::zeros({1, 1, 3, 3});
        k.at({0, 0, 1, 1}) = 1.0f;
        IntervalTensor out = propagate_conv({x, x}, k, Tensor({1}), 1, false);
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            REQUIRE(out.lower[i] == x[i]);
            REQUIRE(out.upper[i] == x[i]);
        }
    }
    SECTION("monotone all-ones kernel on the unit box") {
        Tensor k = Tensor::full({1, 1, 3, 3}, 1.0f);
        IntervalTensor iv{Tensor::zeros({1, 4, 4}), Tensor::full({1, 4, 4}, 1.0f)};
        IntervalTensor out = propagate_conv(iv, k, Tensor({1}), 1, false);
        // upper equals conv of the all-ones image, lower conv of zeros
        REQUIRE(out.upper.at({0, 1, 1}) == 9.0f);
        REQUIRE(out.upper.at({0, 0, 0}) == 4.0f);
        for (std::int64_t i = 0; i < out.lower.numel(); ++i) REQUIRE(out.lower[i] == 0.0f);
    }
    SECTION("Monte-Carlo containment") {
        std::mt19937 rng(29);
        Tensor k = oracle::random_tensor({2, 1, 3, 3}, rng);
        Tensor b = oracle::random_tensor({2}, rng);
        Tensor lo = oracle::random_tensor({1, 3, 3}, rng, 0.0f, 0.4f);
        Tensor hi = lo.clone();
        for (std::int64_t i = 0; i < hi.numel(); ++i) hi[i] += uniform_in(rng, 0.0f, 0.5f);
        IntervalTensor out = propagate_conv({lo, hi}, k, b, 1, false);
        for (int trial = 0; trial < 500; ++trial) {
            std::vector<double> pt(9);
            for (int i = 0; i < 9; ++i) pt[i] = lo[i] + uniform01(rng) * (hi[i] - lo[i]);
            std::vector<double> y = oracle::conv2d(pt, 1, 3, 3, k, b, 1);
            for (std::size_t i = 0; i < y.size(); ++i) {
                REQUIRE(y[i] >= out.lower[static_cast<std::int64_t>(i)]);
                REQUIRE(y[i] <= out.upper[static_cast<std::int64_t>(i)]);
            }
        }
    }
}

TEST_CASE("logit difference bounds") {
    std::mt19937 rng(37);
    const int n = 6, K = 4;
    Tensor w = oracle::random_tensor({K, n}, rng);
    Tensor b = oracle::random_tensor({K}, rng);
    SECTION("diagonal is exactly zero") {
        Tensor lo = oracle::random_tensor({1, n}, rng, 0.0f, 0.5f);
        Tensor hi = lo.clone();
        for (int i = 0; i < n; ++i) hi[i] += 0.3f;
        Tensor bounds = logit_diff_upper_bounds({lo, hi}, w, b);
        for (int k = 0; k < K; ++k) REQUIRE(bounds.at({0, k, k}) == 0.0f);
    }
    SECTION("degenerate interval gives exact logit differences") {
        Tensor z = oracle::random_tensor({1, n}, rng);
        Tensor bounds = logit_diff_upper_bounds({z, z}, w, b);
        std::vector<double> logits = oracle::affine(oracle::widen(z), w, b);
        for (int k = 0; k < K; ++k)
            for (int l = 0; l < K; ++l)
                REQUIRE_THAT(bounds.at({0, k, l}),
                             Catch::Matchers::WithinAbs(logits[k] - logits[l], 1e-5));
    }
    SECTION("dominates sampled differences") {
        Tensor lo = oracle::random_tensor({1, n}, rng, 0.0f, 0.5f);
        Tensor hi = lo.clone();
        for (int i = 0; i < n; ++i) hi[i] += uniform_in(rng, 0.0f, 0.7f);
        Tensor bounds = logit_diff_upper_bounds({lo, hi}, w, b);
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<double> pt(n);
            for (int i = 0; i < n; ++i) pt[i] = lo[i] + uniform01(rng) * (hi[i] - lo[i]);
            std::vector<double> logits = oracle::affine(pt, w, b);
            for (int k = 0; k < K; ++k)
                for (int l = 0; l < K; ++l)
                    REQUIRE(logits[k] - logits[l] <= bounds.at({0, k, l}) + 1e-9);
        }
    }
}

TEST_CASE("certified log-confidence reductions") {
    SECTION("all-zero bounds give the uniform confidence") {
        Tensor bounds = Tensor::zeros({3, 3});
        REQUIRE_THAT(certified_log_conf_upper(bounds),
                     Catch::Matchers::WithinAbs(-std::log(3.0), 1e-12));
        REQUIRE(training_bound(bounds) == 0.0);
    }
    SECTION("single dominant entry") {
        Tensor bounds = Tensor::zeros({2, 2});
        bounds.at({0, 1}) = 7.5f;
        REQUIRE(training_bound(bounds) == 7.5);
    }
    SECTION("eval bound never exceeds training bound minus log K") {
        std::mt19937 rng(41);
        for (int trial = 0; trial < 200; ++trial) {
            const int K = 2 + static_cast<int>(rng() % 5);
            Tensor bounds({K, K});
            for (int k = 0; k < K; ++k)
                for (int l = 0; l < K; ++l)
                    bounds.at({k, l}) = k == l ? 0.0f : uniform_in(rng, -5.0f, 5.0f);
            const double evalBound = certified_log_conf_upper(bounds);
            REQUIRE(evalBound <= 0.0 + 1e-12);
            REQUIRE(evalBound <= training_bound(bounds) - std::log(static_cast<double>(K)) + 1e-9);
        }
    }
}

namespace {

/// Confidence of a point through the oracle forward.
double oracle_conf(const NetworkSpec& spec, const ParamStore& params, const std::vector<double>& x) {
    return oracle::confidence(oracle::forward(spec, params, x));
}

}  // namespace

TEST_CASE("certify") {
    std::mt19937 rng(53);
    SECTION("exact at zero radius") {
        for (int trial = 0; trial < 30; ++trial) {
            int d = 0;
            auto [spec, params] = oracle::random_small_net(rng, &d);
            Tensor x = oracle::random_tensor({1, 1, 1, d}, rng, 0.0f, 1.0f);
            const double bound = certify_batch(spec, params, x, 0.0, false)[0];
            std::vector<double> logits = eval_logits_f64(spec, params, x);
            const double conf = confidence(std::span<const double>(logits));
            REQUIRE_THAT(bound, Catch::Matchers::WithinAbs(conf, 1e-6));
        }
    }
    SECTION("saturates towards 1 for huge radii") {
        auto [spec, params] = oracle::random_small_net(rng);
        Tensor x = oracle::random_tensor({1, 1, 1, spec.inputShape[2]}, rng, 0.0f, 1.0f);
        const double bound = certify_batch(spec, params, x, 50.0, false)[0];
        REQUIRE(bound > 0.99);
    }
    SECTION("monotone in the radius") {
        for (int trial = 0; trial < 10; ++trial) {
            auto [spec, params] = oracle::random_small_net(rng);
            Tensor x = oracle::random_tensor({1, 1, 1, spec.inputShape[2]}, rng, 0.0f, 1.0f);
            double prev = 0.0;
            for (double eps : {0.0, 0.01, 0.05, 0.1, 0.3, 1.0}) {
                const double b = certify_batch(spec, params, x, eps, true)[0];
                REQUIRE(b >= prev - 1e-7);
                prev = b;
            }
        }
    }
    SECTION("2-pixel toy net dominates a dense grid") {
        NetworkSpec spec;
        spec.inputShape = {1, 1, 2};
        spec.classCount = 2;
        spec.layers = {LayerSpec::flatten(), LayerSpec::affine(4), LayerSpec::relu(),
                       LayerSpec::affine(2)};
        ParamStore params = init_params(spec, 99);
        for (Tensor& w : params.weights)
            if (w.defined())
                for (std::int64_t i = 0; i < w.numel(); ++i) w[i] *= 4.0f;
        Tensor x({1, 1, 1, 2}, {0.4f, 0.7f});
        const double eps = 0.25;
        const double bound = certify_batch(spec, params, x, eps, true)[0];
        double worst = 0.0;
        for (int i = 0; i < 200; ++i)
            for (int j = 0; j < 200; ++j) {
                const double p0 = std::max(0.0, 0.4 - eps) +
                                  (std::min(1.0, 0.4 + eps) - std::max(0.0, 0.4 - eps)) * i / 199.0;
                const double p1 = std::max(0.0, 0.7 - eps) +
                                  (std::min(1.0, 0.7 + eps) - std::max(0.0, 0.7 - eps)) * j / 199.0;
                worst = std::max(worst, oracle_conf(spec, params, {p0, p1}));
            }
        REQUIRE(bound >= worst - 1e-9);
        REQUIRE(bound >= 1.0 / 2);  // range sanity
        REQUIRE(bound <= 1.0);
    }
    SECTION("soundness against sampling and corner enumeration") {
        for (int trial = 0; trial < 5; ++trial) {
            int d = 0;
            auto [spec, params] = oracle::random_small_net(rng, &d);
            Tensor x = oracle::random_tensor({1, 1, 1, d}, rng, 0.0f, 1.0f);
            const double eps = 0.05 + 0.1 * uniform01(rng);
            const double bound = certify_batch(spec, params, x, eps, true)[0];
            std::vector<double> lo(static_cast<std::size_t>(d)), hi(static_cast<std::size_t>(d));
            for (int i = 0; i < d; ++i) {
                lo[static_cast<std::size_t>(i)] = std::max(0.0, static_cast<double>(x[i]) - eps);
                hi[static_cast<std::size_t>(i)] = std::min(1.0, static_cast<double>(x[i]) + eps);
            }
            for (int s = 0; s < 2000; ++s) {
                std::vector<double> pt(static_cast<std::size_t>(d));
                for (int i = 0; i < d; ++i)
                    pt[static_cast<std::size_t>(i)] =
                        lo[static_cast<std::size_t>(i)] +
                        uniform01(rng) * (hi[static_cast<std::size_t>(i)] - lo[static_cast<std::size_t>(i)]);
                REQUIRE(oracle_conf(spec, params, pt) <= bound + 1e-9);
            }
            for (std::uint32_t mask = 0; mask < (1u << d); ++mask) {
                std::vector<double> pt(static_cast<std::size_t>(d));
                for (int i = 0; i < d; ++i)
                    pt[static_cast<std::size_t>(i)] =
                        (mask >> i) & 1u ? hi[static_cast<std::size_t>(i)] : lo[static_cast<std::size_t>(i)];
                REQUIRE(oracle_conf(spec, params, pt) <= bound + 1e-9);
            }
        }
    }
    SECTION("overflow guard names the layer") {
        NetworkSpec spec;
        spec.inputShape = {1, 1, 2};
        spec.classCount = 2;
        spec.layers = {LayerSpec::flatten(), LayerSpec::affine(2), LayerSpec::relu(),
                       LayerSpec::affine(2), LayerSpec::relu(), LayerSpec::affine(2)};
        ParamStore params = init_params(spec, 1);
        for (Tensor& w : params.weights)
            if (w.defined())
                for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = 1e20f;
        Tensor x({1, 1, 1, 2}, {0.5f, 0.5f});
        try {
            certify_batch(spec, params, x, 0.1, false);
            FAIL("expected a numeric error");
        } catch (const NumericError& e) {
            REQUIRE(e.layerIndex >= 0);
        }
    }
}

TEST_CASE("recorded propagation agrees with the eval walker") {
    std::mt19937 rng(61);
    for (int trial = 0; trial < 10; ++trial) {
        int d = 0;
        auto [spec, params] = oracle::random_small_net(rng, &d);
        Tensor batch = oracle::random_tensor({3, 1, 1, d}, rng, 0.0f, 1.0f);
        const double eps = 0.1;

        Graph g;
        ParamVars vars = make_param_vars(g, spec, params, false);
        Var cub = cub_vars(g, spec, vars, batch, eps);
        // reference: training bound from the float64 walker feeding the damp
        for (int b = 0; b < 3; ++b) {
            std::vector<double> lo(static_cast<std::size_t>(d)), hi(static_cast<std::size_t>(d));
            for (int i = 0; i < d; ++i) {
                lo[static_cast<std::size_t>(i)] = batch[b * d + i] - eps;
                hi[static_cast<std::size_t>(i)] = batch[b * d + i] + eps;
            }
            // walk the affine stack with the naive oracle
            std::vector<double> l = lo, h = hi, l2, h2;
            const std::size_t last = spec.layers.size() - 1;
            for (std::size_t li = 0; li < last; ++li) {
                const LayerSpec& layer = spec.layers[li];
                if (layer.kind == LayerKind::Affine) {
                    oracle::iv_affine(l, h, params.weights[li], params.biases[li], false, l2, h2);
                    l = l2;
                    h = h2;
                } else if (layer.kind == LayerKind::Relu) {
                    for (double& v : l) v = std::max(0.0, v);
                    for (double& v : h) v = std::max(0.0, v);
                }
            }
            const Tensor& wL = params.weights[last];
            const Tensor& bL = params.biases[last];
            const int K = spec.classCount;
            double m = 0.0;
            for (int k = 0; k < K; ++k)
                for (int l3 = 0; l3 < K; ++l3) {
                    if (k == l3) continue;
                    double acc = static_cast<double>(bL[k]) - bL[l3];
                    for (std::size_t j = 0; j < l.size(); ++j) {
                        const double dw = static_cast<double>(wL[k * static_cast<int>(l.size()) + static_cast<int>(j)]) -
                                          wL[l3 * static_cast<int>(l.size()) + static_cast<int>(j)];
                        acc += dw > 0 ? dw * h[j] : dw * l[j];
                    }
                    m = std::max(m, acc);
                }
            const double expected = std::log(m * m / 2.0 + 1.0);
            REQUIRE_THAT(g.value(cub)[b], Catch::Matchers::WithinAbs(expected, 1e-4));
        }
    }
}

TEST_CASE("interval ordering is preserved through propagation") {
    std::mt19937 rng(71);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor w = oracle::random_tensor({6, 5}, rng, -2.0f, 2.0f);
        Tensor b = oracle::random_tensor({6}, rng);
        Tensor lo = oracle::random_tensor({2, 5}, rng, -1.0f, 1.0f);
        Tensor hi = lo.clone();
        for (std::int64_t i = 0; i < hi.numel(); ++i) hi[i] += uniform_in(rng, 0.0f, 0.5f);
        IntervalTensor out = propagate_affine({lo, hi}, w, b, trial % 2 == 0);
        REQUIRE_NOTHROW(out.check());
    }
}
