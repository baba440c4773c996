#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "dagforge/evaluation.hpp"

using namespace dagforge;

namespace {

Array gaussian_data(Rng& rng, int n, int d) {
    Array x(n, d);
    for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = rng.normal();
    return x;
}

PolicyConfig small_policy() {
    PolicyConfig c;
    c.width = 16;
    return c;
}

SampleBag exact_bag(const ExactPosterior& post, int count, Rng& rng) {
    std::vector<double> cdf;
    double acc = 0.0;
    for (double lp : post.log_posterior) cdf.push_back(acc += std::exp(lp));
    SampleBag bag;
    for (int k = 0; k < count; ++k) {
        const double u = rng.uniform() * acc;
        const auto idx = static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        const DagState& g = post.dags[std::min(idx, post.dags.size() - 1)];
        bag.add(g, post.sample_theta(g, rng));
    }
    return bag;
}

// Independent sum over orderings using only log_pf_edge.
double brute_log_pG(const ForwardModel& model, const DagState& g) {
    auto edges = g.edges();
    std::sort(edges.begin(), edges.end());
    std::vector<double> terms;
    do {
        DagState s = empty_state(g.num_nodes());
        double lp = 0.0;
        for (const auto& [i, j] : edges) {
            const DagState next = s.with_edge(i, j);
            lp += log_pf_edge(model, s, next);
            s = next;
        }
        terms.push_back(lp);
    } while (std::next_permutation(edges.begin(), edges.end()));
    return log_sum_exp(terms);
}

DagState graph_with(int d, std::vector<std::pair<int, int>> edges) {
    DagState g = empty_state(d);
    for (const auto& [i, j] : edges) g = g.with_edge(i, j);
    return g;
}

}  // namespace

TEST_CASE("feature estimates of a constant bag are that graph's indicators") {
    const DagState g = graph_with(4, {{0, 1}, {1, 2}, {3, 2}});
    SampleBag bag;
    for (int k = 0; k < 5; ++k) bag.add(g, zero_params(ModelConfig{}, 4));
    const FeatureMatrices f = feature_estimates(bag);
    const FeatureMatrices ind = feature_indicators(g);
    CHECK(f.edge == ind.edge);
    CHECK(f.path == ind.path);
    CHECK(f.markov == ind.markov);
    CHECK_THROWS_AS(feature_estimates(SampleBag{}), std::invalid_argument);
}

TEST_CASE("feature estimates from exact posterior samples match the exact features") {
    Rng rng(1);
    const Array x = gaussian_data(rng, 8, 3);
    ModelConfig mc;
    mc.obs_variance = 1.0;
    const ExactPosterior post = exact_graph_posterior(x, mc);
    const int n = 4000;
    const SampleBag bag = exact_bag(post, n, rng);
    const FeatureMatrices est = feature_estimates(bag);
    const FeatureMatrices ex = exact_features(post);
    for (const auto& [a, b] : {std::pair{&est.edge, &ex.edge}, {&est.path, &ex.path}, {&est.markov, &ex.markov}}) {
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                const double p = (*b)(i, j);
                const double se = std::sqrt(std::max(p * (1 - p), 1e-12) / n);
                CHECK(std::abs((*a)(i, j) - p) <= 3 * se + 1e-12);
            }
    }
    CHECK((est.edge.array() <= est.path.array()).all());
}

TEST_CASE("rmse and Pearson correlation") {
    Array a(3, 3), b(3, 3);
    a << 0, 0.2, 0.9, 0.1, 0, 0.4, 0.7, 0.3, 0;
    b << 0, 0.1, 0.8, 0.3, 0, 0.5, 0.6, 0.2, 0;
    const FeatureComparison same = rmse_and_pearson(a, a);
    CHECK(same.rmse == 0.0);
    CHECK(*same.pearson == doctest::Approx(1.0));
    const Array comp = (1.0 - a.array()).matrix();
    CHECK(*rmse_and_pearson(comp, a).pearson == doctest::Approx(-1.0));

    // Direct computation over the six off-diagonal entries.
    const std::vector<double> xa{0.2, 0.9, 0.1, 0.4, 0.7, 0.3}, xb{0.1, 0.8, 0.3, 0.5, 0.6, 0.2};
    double sq = 0, ma = 0, mb = 0;
    for (int k = 0; k < 6; ++k) {
        sq += (xa[k] - xb[k]) * (xa[k] - xb[k]);
        ma += xa[k] / 6;
        mb += xb[k] / 6;
    }
    double sab = 0, saa = 0, sbb = 0;
    for (int k = 0; k < 6; ++k) {
        sab += (xa[k] - ma) * (xb[k] - mb);
        saa += (xa[k] - ma) * (xa[k] - ma);
        sbb += (xb[k] - mb) * (xb[k] - mb);
    }
    const FeatureComparison c = rmse_and_pearson(a, b);
    CHECK(c.rmse == doctest::Approx(std::sqrt(sq / 6)).epsilon(1e-14));
    CHECK(*c.pearson == doctest::Approx(sab / std::sqrt(saa * sbb)).epsilon(1e-14));

    CHECK_FALSE(rmse_and_pearson(Array::Constant(3, 3, 0.5), b).pearson.has_value());
    CHECK_THROWS_AS(rmse_and_pearson(Array::Zero(2, 2), b), std::invalid_argument);
}

TEST_CASE("cross-entropy of parameter samples") {
    Rng rng(2);
    const Array x = gaussian_data(rng, 10, 3);
    ModelConfig mc;
    mc.obs_variance = 0.5;
    const ExactPosterior post = exact_graph_posterior(x, mc);
    const SampleBag bag = exact_bag(post, 200, rng);
    const double ce = cross_entropy_theta(bag, post);
    CHECK(std::isfinite(ce));
    SampleBag modes;
    for (const auto& g : bag.graphs) modes.add(g, post.posterior_mean(g));
    CHECK(cross_entropy_theta(modes, post) < ce);

    // Hand computation with explicit inverses.
    SampleBag hand;
    hand.add(graph_with(3, {{0, 1}}), zero_params(mc, 3));
    hand.thetas[0].blocks[1][0] = 0.3;
    hand.add(graph_with(3, {{0, 2}, {1, 2}}), zero_params(mc, 3));
    hand.thetas[1].blocks[2][0] = -0.2;
    hand.thetas[1].blocks[2][1] = 0.5;
    hand.add(empty_state(3), zero_params(mc, 3));
    double expected = 0.0;
    for (std::size_t k = 0; k < hand.size(); ++k) {
        for (int i = 0; i < 3; ++i) {
            const auto parents = hand.graphs[k].parents(i);
            if (parents.empty()) continue;
            const auto np = static_cast<Eigen::Index>(parents.size());
            Eigen::MatrixXd xp(x.rows(), np);
            for (Eigen::Index c = 0; c < np; ++c) xp.col(c) = x.col(parents[static_cast<std::size_t>(c)]);
            const Eigen::MatrixXd prec = Eigen::MatrixXd::Identity(np, np) + xp.transpose() * xp / 0.5;
            const Eigen::VectorXd mean = prec.inverse() * (xp.transpose() * x.col(i).matrix() / 0.5);
            Eigen::VectorXd t(np);
            for (Eigen::Index c = 0; c < np; ++c) t[c] = hand.thetas[k].blocks[static_cast<std::size_t>(i)][parents[static_cast<std::size_t>(c)]];
            const Eigen::VectorXd r = t - mean;
            expected -= -0.5 * np * std::log(2 * M_PI) + 0.5 * std::log(prec.determinant()) - 0.5 * r.dot(prec * r);
        }
    }
    CHECK(cross_entropy_theta(hand, post) == doctest::Approx(expected / 3).epsilon(1e-10));
}

TEST_CASE("held-out negative log-likelihood") {
    Rng rng(3);
    ModelConfig mc;
    mc.obs_variance = 0.1;
    const DagState truth = graph_with(3, {{0, 1}, {1, 2}});
    ParamSet theta = zero_params(mc, 3);
    theta.blocks[1][0] = 1.5;
    theta.blocks[2][1] = -0.8;
    Array heldout(50, 3);
    for (int r = 0; r < 50; ++r) {
        heldout(r, 0) = std::sqrt(0.1) * rng.normal();
        heldout(r, 1) = 1.5 * heldout(r, 0) + std::sqrt(0.1) * rng.normal();
        heldout(r, 2) = -0.8 * heldout(r, 1) + std::sqrt(0.1) * rng.normal();
    }
    SampleBag one;
    one.add(truth, theta);
    const double nll = heldout_nll(one, heldout, mc);
    CHECK(nll == doctest::Approx(-log_likelihood(truth, theta, heldout, mc) / 50).epsilon(1e-12));

    SampleBag twice;
    for (int k = 0; k < 2; ++k) {
        twice.add(truth, theta);
        twice.add(empty_state(3), zero_params(mc, 3));
    }
    SampleBag once;
    once.add(truth, theta);
    once.add(empty_state(3), zero_params(mc, 3));
    CHECK(heldout_nll(twice, heldout, mc) == doctest::Approx(heldout_nll(once, heldout, mc)).epsilon(1e-14));

    SampleBag wrong;
    ParamSet bad = zero_params(mc, 3);
    bad.blocks[1][0] = -1.0;
    bad.blocks[2][1] = 2.0;
    wrong.add(truth, bad);
    CHECK(nll < heldout_nll(wrong, heldout, mc));
    CHECK_THROWS_AS(heldout_nll(SampleBag{}, heldout, mc), std::invalid_argument);
}

TEST_CASE("expected structural Hamming distance") {
    const DagState ref = graph_with(3, {{0, 1}});
    SampleBag bag;
    bag.add(ref, zero_params(ModelConfig{}, 3));
    CHECK(expected_shd(bag, ref) == 0.0);
    CHECK(shd(empty_state(3), ref) == 1);
    CHECK(shd(graph_with(3, {{1, 0}}), ref) == 1);
    CHECK(shd(graph_with(3, {{1, 0}, {1, 2}}), ref) == 2);
    bag.add(graph_with(3, {{1, 0}, {2, 1}, {2, 0}}), zero_params(ModelConfig{}, 3));
    CHECK(expected_shd(bag, ref) == doctest::Approx(1.5));
}

TEST_CASE("AUROC against a pairwise count") {
    const DagState ref = graph_with(3, {{0, 1}, {1, 2}});
    Array labels = Array::Zero(3, 3);
    labels(0, 1) = labels(1, 2) = 1.0;
    CHECK(*auroc(labels, ref) == doctest::Approx(1.0));
    CHECK(*auroc(Array::Constant(3, 3, 0.3), ref) == doctest::Approx(0.5));
    CHECK_FALSE(auroc(labels, empty_state(3)).has_value());

    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        Array s(3, 3);
        for (Eigen::Index k = 0; k < 9; ++k) s.data()[k] = std::round(rng.uniform() * 4) / 4;
        double wins = 0;
        int pairs = 0;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                if (i == j || !ref.has_edge(i, j)) continue;
                for (int a = 0; a < 3; ++a)
                    for (int b = 0; b < 3; ++b) {
                        if (a == b || ref.has_edge(a, b)) continue;
                        ++pairs;
                        wins += s(i, j) > s(a, b) ? 1.0 : (s(i, j) == s(a, b) ? 0.5 : 0.0);
                    }
            }
        CHECK(*auroc(s, ref) == doctest::Approx(wins / pairs).epsilon(1e-14));
    }
    Array one_inversion = labels;
    one_inversion(2, 0) = 1.5;
    CHECK(*auroc(one_inversion, ref) == doctest::Approx(1.0 - 2.0 / 8.0));
}

TEST_CASE("single-edge graphs have an exact terminating probability") {
    const Policy pol(3, ModelConfig{}, small_policy(), 3);
    const DagState g = graph_with(3, {{2, 0}});
    Rng rng(5);
    const double expected = log_pf_edge(pol, empty_state(3), g);
    for (int beam : {0, 1, 5}) {
        EstimatorConfig cfg;
        cfg.beam_size = beam;
        cfg.mc_trajectories = 3;
        CHECK(estimate_log_pG(pol, g, cfg, rng) == doctest::Approx(expected).epsilon(1e-13));
    }
    ParamSet theta = zero_params(ModelConfig{}, 3);
    theta.blocks[0][2] = 0.25;
    CHECK(estimate_log_pT(pol, g, theta, EstimatorConfig{}, rng) ==
          doctest::Approx(expected + log_pf_theta(pol, g, theta)).epsilon(1e-13));
    CHECK(estimate_log_pG(pol, empty_state(3), EstimatorConfig{}, rng) == 0.0);
}

TEST_CASE("full beam equals the exhaustive trajectory sum") {
    const Policy pol(4, ModelConfig{}, small_policy(), 4);
    for (const auto& g : {graph_with(4, {{0, 1}, {1, 2}}), graph_with(4, {{0, 1}, {2, 3}, {0, 3}}),
                          graph_with(4, {{0, 1}, {1, 2}, {2, 3}, {0, 3}})}) {
        const double brute = brute_log_pG(pol, g);
        CHECK(exhaustive_log_pG(pol, g) == doctest::Approx(brute).epsilon(1e-12));
        EstimatorConfig cfg;
        cfg.beam_size = static_cast<int>(count_trajectories(g));
        Rng rng(1);
        CHECK(estimate_log_pG(pol, g, cfg, rng) == doctest::Approx(brute).epsilon(1e-12));
        cfg.beam_size = 1000;
        CHECK(estimate_log_pG(pol, g, cfg, rng) == doctest::Approx(brute).epsilon(1e-12));
    }
}

TEST_CASE("beam plus Monte Carlo is unbiased in probability space") {
    const Policy pol(4, ModelConfig{}, small_policy(), 6);
    const DagState g = graph_with(4, {{0, 1}, {1, 2}, {2, 3}, {0, 3}});
    const double truth = std::exp(exhaustive_log_pG(pol, g));
    for (int beam : {0, 3}) {
        EstimatorConfig cfg;
        cfg.beam_size = beam;
        cfg.mc_trajectories = 2;
        Rng rng(7);
        const int runs = 1000;
        double sum = 0, sq = 0;
        for (int r = 0; r < runs; ++r) {
            const double v = std::exp(estimate_log_pG(pol, g, cfg, rng));
            sum += v;
            sq += v * v;
        }
        const double mean = sum / runs;
        const double se = std::sqrt((sq / runs - mean * mean) / runs);
        CAPTURE(beam);
        CHECK(std::abs(mean - truth) <= 3 * se);
    }
}

TEST_CASE("consistent policy terminating probabilities track the reward") {
    Rng rng(8);
    const Array x = gaussian_data(rng, 12, 2);
    const ExactPosterior post = exact_graph_posterior(x, ModelConfig{});
    const ConsistentPolicy pol = consistent_policy(post);
    const SampleBag bag = sample_bag(pol, 50, rng);
    std::vector<double> gaps;
    for (std::size_t k = 0; k < bag.size(); ++k)
        gaps.push_back(estimate_log_pT(pol, bag.graphs[k], bag.thetas[k], EstimatorConfig{}, rng) -
                       log_reward(bag.graphs[k], bag.thetas[k], x, ModelConfig{}));
    const auto [lo, hi] = std::minmax_element(gaps.begin(), gaps.end());
    CHECK(*hi - *lo <= 1e-6);
}

TEST_CASE("RANSAC line fits") {
    Rng rng(9);
    std::vector<double> x, y;
    for (int k = 0; k < 50; ++k) {
        x.push_back(k * 0.7 - 3);
        y.push_back(x.back() - 5);
    }
    RansacFit f = ransac_slope(x, y, rng);
    CHECK(*f.slope == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(*f.intercept == doctest::Approx(-5.0).epsilon(1e-12));
    CHECK(f.inliers == 50);

    x.clear();
    y.clear();
    for (int k = 0; k < 200; ++k) {
        const double v = rng.uniform() * 20 - 10;
        x.push_back(v);
        y.push_back(k % 10 == 0 ? v + 30 + 20 * rng.uniform() : v);
    }
    f = ransac_slope(x, y, rng);
    CHECK(std::abs(*f.slope - 1.0) <= 1e-6);
    CHECK(f.inliers == 180);

    f = ransac_slope({1.0, 3.0}, {2.0, 8.0}, rng);
    CHECK(*f.slope == doctest::Approx(3.0));
    CHECK(*f.intercept == doctest::Approx(-1.0));
    CHECK_FALSE(ransac_slope({1.0, 1.0, 1.0}, {1.0, 2.0, 3.0}, rng).slope.has_value());
    CHECK_THROWS_AS(ransac_slope({1.0}, {1.0}, rng), std::invalid_argument);
}

TEST_CASE("metrics do not depend on the bag order") {
    Rng rng(10);
    const Array x = gaussian_data(rng, 10, 3);
    const ExactPosterior post = exact_graph_posterior(x, ModelConfig{});
    SampleBag bag = exact_bag(post, 30, rng);
    SampleBag rev;
    for (std::size_t k = bag.size(); k-- > 0;) rev.add(bag.graphs[k], bag.thetas[k]);
    const DagState ref = graph_with(3, {{0, 1}});
    CHECK(feature_estimates(bag).path.isApprox(feature_estimates(rev).path, 1e-14));
    CHECK(cross_entropy_theta(bag, post) == doctest::Approx(cross_entropy_theta(rev, post)).epsilon(1e-13));
    CHECK(heldout_nll(bag, x, ModelConfig{}) == doctest::Approx(heldout_nll(rev, x, ModelConfig{})).epsilon(1e-13));
    CHECK(expected_shd(bag, ref) == doctest::Approx(expected_shd(rev, ref)).epsilon(1e-14));
}

TEST_CASE("policy evaluation report") {
    Rng rng(11);
    const Array x = gaussian_data(rng, 20, 3);
    const Array heldout = gaussian_data(rng, 10, 3);
    const ExactPosterior post = exact_graph_posterior(x, ModelConfig{});
    const DagState truth = graph_with(3, {{0, 1}});
    const Policy pol(3, ModelConfig{}, small_policy(), 12);
    EvaluationInputs in;
    in.data = &x;
    in.heldout = &heldout;
    in.exact = &post;
    in.ground_truth = &truth;
    in.points_csv_path = "test_eval_points.csv";
    EvaluationConfig cfg;
    cfg.num_samples = 200;
    cfg.slope_samples = 50;
    const MetricsReport a = evaluate_policy(pol, in, cfg);
    const MetricsReport b = evaluate_policy(pol, in, cfg);
    CHECK(to_json(a).dump() == to_json(b).dump());
    const auto j = to_json(a);
    CHECK(j["edge"]["rmse"].is_number());
    CHECK(j["cross_entropy"].is_number());
    CHECK(j["nll"].is_number());
    CHECK(j["eshd"].is_number());
    CHECK(j["auroc"].is_number());
    CHECK(j["slope"].is_number());
    std::ifstream csv("test_eval_points.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "log_R,log_PT,num_edges");
    int rows = 0;
    for (std::string line; std::getline(csv, line);) ++rows;
    CHECK(rows == 50);
    std::ifstream svg("test_eval_points.svg");
    CHECK(svg.good());
    std::remove("test_eval_points.csv");
    std::remove("test_eval_points.svg");

    EvaluationInputs none;
    const auto bare = to_json(evaluate_policy(pol, none, cfg));
    CHECK(bare["edge"].is_null());
    CHECK(bare["nll"].is_null());
    CHECK(bare["slope"].is_null());
}
