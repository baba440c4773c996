#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "dagforge/cpd_models.hpp"
#include "dagforge/exact_oracle.hpp"

using namespace dagforge;

namespace {

Array gaussian_data(Rng& rng, int n, int d) {
    Array x(n, d);
    for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = rng.normal();
    return x;
}

ParamSet random_linear_params(const DagState& g, Rng& rng) {
    ParamSet t = zero_params(ModelConfig{}, g.num_nodes());
    for (const auto& [i, j] : g.edges()) t.blocks[static_cast<std::size_t>(j)][i] = rng.normal();
    return t;
}

ParamSet random_params(const ModelConfig& cfg, int d, Rng& rng) {
    ParamSet t = zero_params(cfg, d);
    for (auto& b : t.blocks)
        for (Eigen::Index k = 0; k < b.size(); ++k) b[k] = rng.normal();
    return t;
}

// Straight double loop over observations and nodes.
double naive_linear_log_likelihood(const DagState& g, const ParamSet& t, const Array& x, double s2) {
    double ll = 0.0;
    for (Eigen::Index n = 0; n < x.rows(); ++n) {
        for (int i = 0; i < g.num_nodes(); ++i) {
            double mu = 0.0;
            for (int p = 0; p < g.num_nodes(); ++p)
                if (g.has_edge(p, i)) mu += t.blocks[static_cast<std::size_t>(i)][p] * x(n, p);
            const double r = x(n, i) - mu;
            ll += -0.5 * std::log(2 * M_PI * s2) - 0.5 * r * r / s2;
        }
    }
    return ll;
}

const DagState kChain = empty_state(4).with_edge(0, 1).with_edge(1, 2).with_edge(0, 2).with_edge(3, 2);

}  // namespace

TEST_CASE("log_likelihood closed forms") {
    const ModelConfig cfg;
    Array x = Array::Zero(1, 1);
    CHECK(log_likelihood(empty_state(1), zero_params(cfg, 1), x, cfg) == doctest::Approx(1.383647).epsilon(1e-6));

    const DagState g = empty_state(2).with_edge(0, 1);
    ParamSet t = zero_params(cfg, 2);
    t.blocks[1][0] = 2.0;
    Array obs(1, 2);
    obs << 1.0, 2.0;
    const Vector ll = observation_log_likelihoods(g, t, obs, cfg);
    const double node0 = -0.5 * std::log(2 * M_PI * 0.01) - 0.5 * 1.0 / 0.01;
    CHECK(ll[0] - node0 == doctest::Approx(1.383647).epsilon(1e-6));
    CHECK_THROWS_AS(log_likelihood(g, t, Array::Zero(1, 3), cfg), std::invalid_argument);
}

TEST_CASE("log_likelihood matches the naive oracle and is exchangeable") {
    const ModelConfig cfg;
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const Array x = gaussian_data(rng, 15, 4);
        const ParamSet t = random_linear_params(kChain, rng);
        const double ll = log_likelihood(kChain, t, x, cfg);
        CHECK(ll == doctest::Approx(naive_linear_log_likelihood(kChain, t, x, cfg.obs_variance)).epsilon(1e-12));
        std::vector<int> perm(15);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        Array xp(15, 4);
        for (int n = 0; n < 15; ++n) xp.row(n) = x.row(perm[static_cast<std::size_t>(n)]);
        CHECK(log_likelihood(kChain, t, xp, cfg) == doctest::Approx(ll).epsilon(1e-12));
    }
}

TEST_CASE("log_prior_params") {
    const ModelConfig cfg;
    CHECK(log_prior_params(empty_state(3), zero_params(cfg, 3), cfg) == 0.0);
    const DagState g = empty_state(2).with_edge(0, 1);
    CHECK(log_prior_params(g, zero_params(cfg, 2), cfg) == doctest::Approx(-0.918939).epsilon(1e-6));
    ParamSet bad = zero_params(cfg, 2);
    bad.blocks[0][1] = 0.5;
    CHECK_THROWS_AS(log_prior_params(g, bad, cfg), std::invalid_argument);

    ModelConfig mlp;
    mlp.kind = CpdKind::MlpGaussian;
    const ParamSet z = zero_params(mlp, 2);
    CHECK(z.total_size() == 42);
    CHECK(log_prior_params(empty_state(2), z, mlp) == doctest::Approx(42 * -0.918939).epsilon(1e-6));
    CHECK(zero_params(mlp, 20).total_size() == 2220);
}

TEST_CASE("log_prior_graph is uniform by default") {
    CHECK(log_prior_graph(empty_state(3)) == 0.0);
    CHECK(log_prior_graph(kChain) == 0.0);
    DagState full = empty_state(4);
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) full = full.with_edge(i, j);
    CHECK(log_prior_graph(full) == 0.0);
    ModelConfig sparse;
    sparse.graph_edge_penalty = 0.5;
    CHECK(log_prior_graph(full, sparse) == doctest::Approx(-3.0));
}

TEST_CASE("log_reward is the sum of its terms") {
    const ModelConfig cfg;
    CHECK(log_reward(empty_state(1), zero_params(cfg, 1), Array::Zero(1, 1), cfg) ==
          doctest::Approx(1.383647).epsilon(1e-6));
    Rng rng(2);
    const Array x = gaussian_data(rng, 10, 4);
    const ParamSet t = random_linear_params(kChain, rng);
    double prior = 0.0;
    for (const auto& [i, j] : kChain.edges()) {
        const double v = t.blocks[static_cast<std::size_t>(j)][i];
        prior += -0.5 * std::log(2 * M_PI) - 0.5 * v * v;
    }
    CHECK(log_reward(kChain, t, x, cfg) ==
          doctest::Approx(naive_linear_log_likelihood(kChain, t, x, 0.01) + prior).epsilon(1e-12));
}

TEST_CASE("minibatch_log_reward") {
    const ModelConfig cfg;
    Rng rng(3);
    const Array x = gaussian_data(rng, 6, 4);
    const ParamSet t = random_linear_params(kChain, rng);
    const double full = log_reward(kChain, t, x, cfg);
    CHECK(minibatch_log_reward(kChain, t, x, 6, cfg) == doctest::Approx(full).epsilon(1e-14));
    CHECK_THROWS_AS(minibatch_log_reward(kChain, t, Array::Zero(0, 4), 6, cfg), std::invalid_argument);

    // Exhaustive mean over all C(6,2) batches.
    double total = 0.0;
    int count = 0;
    for (int a = 0; a < 6; ++a) {
        for (int b = a + 1; b < 6; ++b) {
            Array batch(2, 4);
            batch.row(0) = x.row(a);
            batch.row(1) = x.row(b);
            total += minibatch_log_reward(kChain, t, batch, 6, cfg);
            ++count;
        }
    }
    CHECK(count == 15);
    CHECK(std::abs(total / count - full) <= 1e-9 * std::max(1.0, std::abs(full)));

    const Array big = gaussian_data(rng, 100, 4);
    const Array quarter = big.topRows(25);
    const double prior = log_prior_params(kChain, t, cfg);
    CHECK(minibatch_log_reward(kChain, t, quarter, 100, cfg) - prior ==
          doctest::Approx(4.0 * log_likelihood(kChain, t, quarter, cfg)));
}

TEST_CASE("grad_theta_log_reward") {
    const ModelConfig cfg;
    Rng rng(4);
    const Array x = gaussian_data(rng, 20, 4);

    SUBCASE("zero at the exact posterior mean") {
        const auto post = posterior_params(kChain, x, cfg);
        ParamSet mean = zero_params(cfg, 4);
        for (int i = 0; i < 4; ++i)
            for (std::size_t a = 0; a < post[static_cast<std::size_t>(i)].parents.size(); ++a)
                mean.blocks[static_cast<std::size_t>(i)][post[static_cast<std::size_t>(i)].parents[a]] =
                    post[static_cast<std::size_t>(i)].mean[static_cast<Eigen::Index>(a)];
        const ParamSet g = grad_theta_log_reward(kChain, mean, x, cfg);
        for (const auto& b : g.blocks) CHECK(b.cwiseAbs().maxCoeff() <= 1e-8);
    }
    SUBCASE("prior score without data") {
        ModelConfig c2 = cfg;
        c2.prior_mean = 0.3;
        c2.prior_variance = 2.0;
        const ParamSet t = random_linear_params(kChain, rng);
        const ParamSet g = grad_theta_log_reward(kChain, t, Array::Zero(0, 4), c2);
        for (const auto& [i, j] : kChain.edges())
            CHECK(g.blocks[static_cast<std::size_t>(j)][i] ==
                  doctest::Approx(-(t.blocks[static_cast<std::size_t>(j)][i] - 0.3) / 2.0));
        CHECK(g.blocks[0].isZero());
    }
    SUBCASE("equals the score of the exact posterior") {
        const auto post = posterior_params(kChain, x, cfg);
        for (int trial = 0; trial < 10; ++trial) {
            const ParamSet t = random_linear_params(kChain, rng);
            const ParamSet g = grad_theta_log_reward(kChain, t, x, cfg);
            for (int i = 0; i < 4; ++i) {
                const auto& f = post[static_cast<std::size_t>(i)];
                const auto k = static_cast<Eigen::Index>(f.parents.size());
                if (k == 0) continue;
                Eigen::VectorXd th(k);
                for (Eigen::Index a = 0; a < k; ++a) th[a] = t.blocks[static_cast<std::size_t>(i)][f.parents[static_cast<std::size_t>(a)]];
                const Eigen::VectorXd score = -f.cov.inverse() * (th - f.mean);
                for (Eigen::Index a = 0; a < k; ++a) {
                    const double got = g.blocks[static_cast<std::size_t>(i)][f.parents[static_cast<std::size_t>(a)]];
                    CHECK(std::abs(got - score[a]) <= 1e-8 * std::max(1.0, std::abs(score[a])));
                }
            }
        }
    }
    SUBCASE("mlp kind matches finite differences") {
        ModelConfig mlp;
        mlp.kind = CpdKind::MlpGaussian;
        const Array xs = gaussian_data(rng, 8, 3);
        const DagState g = empty_state(3).with_edge(0, 2).with_edge(1, 2).with_edge(0, 1);
        ParamSet t = random_params(mlp, 3, rng);
        const ParamSet grad = grad_theta_log_reward(g, t, xs, mlp, 2.5);
        auto f = [&](const ParamSet& p) { return 2.5 * log_likelihood(g, p, xs, mlp) + log_prior_params(g, p, mlp); };
        const double h = 1e-6;
        for (int i = 0; i < 3; ++i) {
            for (Eigen::Index k = 0; k < t.blocks[static_cast<std::size_t>(i)].size(); ++k) {
                ParamSet plus = t, minus = t;
                plus.blocks[static_cast<std::size_t>(i)][k] += h;
                minus.blocks[static_cast<std::size_t>(i)][k] -= h;
                const double fd = (f(plus) - f(minus)) / (2 * h);
                const double an = grad.blocks[static_cast<std::size_t>(i)][k];
                CHECK(std::abs(an - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
            }
        }
    }
}
