#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "dagforge/datagen.hpp"

using namespace dagforge;

namespace {

std::string write_text(const std::string& name, const std::string& text) {
    std::ofstream os(name);
    os << text;
    return name;
}

}  // namespace

TEST_CASE("edge probability from the expected edge count") {
    GenConfig c;
    CHECK(c.edge_probability() == doctest::Approx(0.5));
    c.expected_edges_per_node = 2;
    CHECK(c.edge_probability() == 1.0);
    c.num_nodes = 20;
    CHECK(c.edge_probability() == doctest::Approx(40.0 / 190.0));
    c.num_nodes = 1;
    CHECK(c.edge_probability() == 0.0);
}

TEST_CASE("ER graphs at the extremes of p") {
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        CHECK(sample_er_dag(6, 0.0, rng).num_edges() == 0);
        const DagState full = sample_er_dag(6, 1.0, rng);
        CHECK(full.num_edges() == 15);
        CHECK_FALSE(action_mask(full).any());
    }
    CHECK_THROWS_AS(sample_er_dag(3, 1.5, rng), std::invalid_argument);
}

TEST_CASE("ER1 graphs on five nodes have five edges on average") {
    Rng rng(2);
    GenConfig c;
    const int n = 10000;
    double sum = 0, sq = 0;
    std::vector<int> direction(2, 0);
    for (int k = 0; k < n; ++k) {
        const DagState g = sample_er_dag(c, rng);
        CHECK(DagState::from_adjacency(g.adjacency()) == g);
        sum += g.num_edges();
        sq += g.num_edges() * g.num_edges();
        if (g.has_edge(0, 1)) ++direction[0];
        if (g.has_edge(1, 0)) ++direction[1];
    }
    const double mean = sum / n;
    const double se = std::sqrt((sq / n - mean * mean) / n);
    CHECK(std::abs(mean - 5.0) <= 3 * se);
    // Random orders make both directions equally likely.
    const double p = 0.25;
    CHECK(std::abs(direction[0] - n * p) <= 4 * std::sqrt(n * p * (1 - p)));
    CHECK(std::abs(direction[1] - n * p) <= 4 * std::sqrt(n * p * (1 - p)));
}

TEST_CASE("ground-truth parameters") {
    Rng rng(3);
    GenConfig c;
    CHECK(sample_ground_truth_params(empty_state(5), c, rng) == zero_params(c.model_config(), 5));

    const DagState g = empty_state(5).with_edge(0, 1).with_edge(2, 1).with_edge(1, 4);
    double sum = 0, sq = 0;
    int count = 0;
    for (int k = 0; k < 33334; ++k) {
        const ParamSet t = sample_ground_truth_params(g, c, rng);
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 5; ++j) {
                const double v = t.blocks[static_cast<std::size_t>(i)][j];
                if (!g.has_edge(j, i)) {
                    CHECK(v == 0.0);
                    continue;
                }
                sum += v;
                sq += v * v;
                ++count;
            }
    }
    const double mean = sum / count;
    const double var = sq / count - mean * mean;
    CHECK(count >= 100000);
    CHECK(std::abs(mean) <= 3 * std::sqrt(1.0 / count));
    CHECK(std::abs(var - 1.0) <= 3 * std::sqrt(2.0 / count));

    GenConfig mlp = c;
    mlp.kind = CpdKind::MlpGaussian;
    const ParamSet m = sample_ground_truth_params(empty_state(5), mlp, rng);
    CHECK(m.total_size() == 5 * param_block_size(mlp.model_config(), 5));
    CHECK(m.as_rows().cwiseAbs().minCoeff() > 0.0);
}

TEST_CASE("ancestral sampling moments") {
    Rng rng(4);
    GenConfig c;
    const int n = 100000;
    const Array e = ancestral_sample(empty_state(3), zero_params(c.model_config(), 3), c, n, rng);
    for (int j = 0; j < 3; ++j) {
        const double mean = e.col(j).mean();
        const double var = (e.col(j).array() - mean).square().mean();
        CHECK(std::abs(var - 0.01) <= 3 * 0.01 * std::sqrt(2.0 / n));
    }
    const DagState chain = empty_state(2).with_edge(0, 1);
    ParamSet t = zero_params(c.model_config(), 2);
    t.blocks[1][0] = 1.0;
    const Array x = ancestral_sample(chain, t, c, n, rng);
    const double m1 = x.col(1).mean();
    const double v1 = (x.col(1).array() - m1).square().mean();
    CHECK(std::abs(v1 - 0.02) <= 3 * 0.02 * std::sqrt(2.0 / n));

    // Reverse labels: node 1 is the root, so order must come from the graph, not the index.
    const DagState back = empty_state(2).with_edge(1, 0);
    ParamSet tb = zero_params(c.model_config(), 2);
    tb.blocks[0][1] = 2.0;
    const Array y = ancestral_sample(back, tb, c, n, rng);
    const double m0 = y.col(0).mean();
    CHECK(std::abs((y.col(0).array() - m0).square().mean() - 0.05) <= 3 * 0.05 * std::sqrt(2.0 / n));

    Rng a(9), b(9);
    CHECK(ancestral_sample(chain, t, c, 50, a) == ancestral_sample(chain, t, c, 50, b));
}

TEST_CASE("MLP ancestral sampling uses the MLP mean") {
    Rng rng(5);
    GenConfig c;
    c.kind = CpdKind::MlpGaussian;
    c.noise_variance = 1e-12;
    const DagState g = empty_state(3).with_edge(0, 2).with_edge(1, 2);
    const ParamSet t = sample_ground_truth_params(g, c, rng);
    const Array x = ancestral_sample(g, t, c, 20, rng);
    Array masked = x;
    masked.col(2).setZero();
    const Vector mean = mlp_mean(t.blocks[2], masked, c.mlp_hidden);
    for (int r = 0; r < 20; ++r) CHECK(x(r, 2) == doctest::Approx(mean[r]).epsilon(1e-5));
}

TEST_CASE("generated problems are reproducible") {
    GenConfig c;
    c.seed = 17;
    const GeneratedProblem a = generate_problem(c);
    const GeneratedProblem b = generate_problem(c);
    CHECK(a.truth.graph == b.truth.graph);
    CHECK(a.data.observations == b.data.observations);
    REQUIRE(a.data.heldout.has_value());
    CHECK(a.data.heldout->rows() == 100);
    CHECK(a.data.observations.rows() == 100);
    CHECK(a.data.observations.cols() == 5);
    c.seed = 18;
    CHECK(generate_problem(c).data.observations != a.data.observations);
}

TEST_CASE("dataset CSV round trip") {
    GenConfig c;
    c.seed = 3;
    const GeneratedProblem p = generate_problem(c);
    const std::string path = "test_datagen_data.csv";
    write_dataset(path, p.data.observations);
    const Array back = read_dataset(path);
    CHECK(back.rows() == 100);
    CHECK(back.cols() == 5);
    CHECK(back == p.data.observations);
    std::ifstream is(path);
    std::string header;
    std::getline(is, header);
    CHECK(header == "X1,X2,X3,X4,X5");
    std::remove(path.c_str());

    Array special(2, 2);
    special << 1e-300, -0.1, 123456789.123456789, 5e-324;
    write_dataset(path, special);
    CHECK(read_dataset(path) == special);
    std::remove(path.c_str());
}

TEST_CASE("malformed CSV reports the line") {
    const auto expect_line = [](const std::string& text, int line) {
        const std::string path = write_text("test_datagen_bad.csv", text);
        try {
            read_dataset(path);
            FAIL("no error for: " << text);
        } catch (const DatasetParseError& e) {
            CHECK(e.line() == line);
        }
        std::remove(path.c_str());
    };
    expect_line("X1,X3\n1,2\n", 1);
    expect_line("A,B\n1,2\n", 1);
    expect_line("X1,X2\n1,2\n3\n", 3);
    expect_line("X1,X2\n1,2\n3,abc\n", 3);
    expect_line("X1,X2\n1,2\n3,4,5\n", 3);
    expect_line("X1,X2\n\n1,nan\n", 3);
    expect_line("", 1);
    CHECK_THROWS(read_dataset("/nonexistent/data.csv"));

    const std::string ok = write_text("test_datagen_ok.csv", "X1,X2\r\n1, 2\r\n\r\n3,4\r\n");
    const Array a = read_dataset(ok);
    CHECK(a.rows() == 2);
    CHECK(a(1, 0) == 3.0);
    std::remove(ok.c_str());
}

TEST_CASE("ground-truth sidecar round trip") {
    GenConfig c;
    c.seed = 21;
    c.kind = CpdKind::MlpGaussian;
    c.num_nodes = 4;
    const GeneratedProblem p = generate_problem(c);
    const std::string path = "test_datagen_truth.json";
    write_ground_truth(path, p.truth);
    const GroundTruth back = read_ground_truth(path);
    std::remove(path.c_str());
    CHECK(back.graph == p.truth.graph);
    CHECK(back.theta == p.truth.theta);
    CHECK(back.cfg.seed == 21);
    CHECK(back.cfg.kind == CpdKind::MlpGaussian);
    const Dataset ds{p.data.observations, p.data.heldout};
    CHECK(ds.num_nodes() == 4);
}
