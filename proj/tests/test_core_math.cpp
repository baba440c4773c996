#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "dagforge/core_math.hpp"
#include "dagforge/random.hpp"

using namespace dagforge;

namespace {

Array random_array(Rng& rng, int r, int c, double scale = 1.0) {
    Array a(r, c);
    for (Eigen::Index k = 0; k < a.size(); ++k) a.data()[k] = scale * rng.normal();
    return a;
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

double eval(const Builder& f, const std::vector<Array>& xs) {
    Tape t;
    std::vector<Var> vs;
    for (const auto& x : xs) vs.push_back(t.input(x));
    return f(t, vs).scalar();
}

// Central finite differences against the tape gradient.
void check_gradient(const Builder& f, std::vector<Array> xs, double tol = 1e-6) {
    Tape t;
    std::vector<Var> vs;
    for (const auto& x : xs) vs.push_back(t.input(x));
    const Var out = f(t, vs);
    const auto grads = t.grad(out, vs);
    const double h = 1e-6;
    for (std::size_t n = 0; n < xs.size(); ++n) {
        for (Eigen::Index k = 0; k < xs[n].size(); ++k) {
            auto plus = xs;
            auto minus = xs;
            plus[n].data()[k] += h;
            minus[n].data()[k] -= h;
            const double fd = (eval(f, plus) - eval(f, minus)) / (2 * h);
            const double an = grads[n].data()[k];
            CHECK(an == doctest::Approx(fd).epsilon(tol).scale(1.0));
        }
    }
}

}  // namespace

TEST_CASE("scalar helpers") {
    CHECK(huber(0.5, 1.0) == doctest::Approx(0.125));
    CHECK(huber(3.0, 1.0) == doctest::Approx(2.5));
    CHECK(huber(-3.0, 1.0) == doctest::Approx(2.5));
    CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)));
    CHECK(softplus(800.0) == doctest::Approx(800.0));
    CHECK(sigmoid(-800.0) >= 0.0);
    const std::vector<double> v{1000.0, 1000.0};
    CHECK(log_sum_exp(v) == doctest::Approx(1000.0 + std::log(2.0)));
}

TEST_CASE("masked log-softmax") {
    const std::vector<double> logits{1.0, 2.0, 3.0};
    const bool mask[] = {true, false, true};
    const auto lp = masked_log_softmax(logits, mask);
    CHECK(is_masked_log_prob(lp[1]));
    CHECK(std::exp(lp[0]) + std::exp(lp[2]) == doctest::Approx(1.0));
    CHECK(lp[2] - lp[0] == doctest::Approx(2.0));
    const bool none[] = {false, false, false};
    CHECK_THROWS_WITH_AS(masked_log_softmax(logits, none), "no valid action", std::invalid_argument);
}

TEST_CASE("gaussian densities agree with direct formulas") {
    Vector x(2), m(2), var(2);
    x << 0.3, -1.0;
    m << 0.0, 0.5;
    var << 2.0, 0.25;
    double direct = 0.0;
    for (int k = 0; k < 2; ++k)
        direct += -0.5 * std::log(2 * M_PI * var[k]) - 0.5 * (x[k] - m[k]) * (x[k] - m[k]) / var[k];
    CHECK(gaussian_diag_log_density(x, m, var) == doctest::Approx(direct));

    Eigen::MatrixXd l(2, 2);
    l << 1.5, 0.0, 0.4, 0.7;
    const Eigen::MatrixXd cov = l * l.transpose();
    const Eigen::VectorXd r = x - m;
    const double full = -std::log(2 * M_PI) - 0.5 * std::log(cov.determinant()) - 0.5 * r.dot(cov.inverse() * r);
    CHECK(gaussian_full_log_density(x, m, l) == doctest::Approx(full));
}

TEST_CASE("tape gradients match finite differences") {
    Rng rng(7);
    const Array a = random_array(rng, 3, 4);
    const Array b = random_array(rng, 3, 4);
    const Array c = random_array(rng, 4, 2);
    const Array pos = random_array(rng, 3, 4).cwiseAbs().array() + 0.5;

    SUBCASE("elementwise") {
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(mul(add(v[0], v[1]), sub(v[0], v[1]))); },
                       {a, b});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(div(v[0], v[1])); }, {a, pos});
        check_gradient([](Tape&, const std::vector<Var>& v) { return mean(log(v[0])); }, {pos});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(sqrt(v[0])); }, {pos});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(exp(scale(v[0], 0.5))); }, {a});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(sigmoid(v[0])); }, {a});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(softplus(neg(v[0]))); }, {a});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(square(add_scalar(v[0], 0.3))); }, {a});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(huber(scale(v[0], 2.0), 1.0)); }, {a});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(mul(relu(v[0]), v[1])); }, {a, b});
    }
    SUBCASE("linear algebra and reshaping") {
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(square(matmul(v[0], v[1]))); }, {a, c});
        const Array row = random_array(rng, 1, 4);
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(square(add_row(v[0], v[1]))); }, {a, row});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(square(row_sum(v[0]))); }, {a});
        const Array six = random_array(rng, 6, 2);
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(square(block_sum_rows(v[0], 3))); }, {six});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(square(block_mean_rows(v[0], 2))); }, {six});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(mul(tile_rows(v[0], 3), v[1])); },
                       {row, a});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(matmul(reshape(v[0], 4, 3), v[1])); },
                       {a, random_array(rng, 3, 2)});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(matmul(transpose(v[0]), v[1])); },
                       {a, random_array(rng, 3, 2)});
        check_gradient(
            [](Tape&, const std::vector<Var>& v) { return sum(square(concat_cols({v[0], slice_cols(v[1], 1, 2)}))); },
            {a, b});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(square(gather(v[0], {{0, 1}, {2, 3}, {0, 1}}))); },
                       {a});
        Mask where = Mask::Constant(3, 4, false);
        where(1, 2) = true;
        check_gradient([where](Tape&, const std::vector<Var>& v) { return sum(square(overwrite(v[0], where, 5.0))); },
                       {a});
    }
    SUBCASE("masked log-softmax rows") {
        Mask m = Mask::Constant(3, 4, true);
        m(0, 1) = false;
        m(2, 0) = false;
        m(2, 3) = false;
        check_gradient(
            [m](Tape&, const std::vector<Var>& v) {
                const Var lp = masked_log_softmax_rows(v[0], m);
                return sum(gather(lp, {{0, 0}, {0, 3}, {1, 2}, {2, 1}}));
            },
            {a});
        Tape t;
        const Var x = t.input(a);
        const Var lp = masked_log_softmax_rows(x, m);
        CHECK(is_masked_log_prob(lp.value()(0, 1)));
        for (int r = 0; r < 3; ++r) {
            double s = 0.0;
            for (int k = 0; k < 4; ++k)
                if (m(r, k)) s += std::exp(lp.value()(r, k));
            CHECK(s == doctest::Approx(1.0));
        }
        Mask empty = m;
        empty.row(1).setConstant(false);
        CHECK_THROWS_AS(masked_log_softmax_rows(x, empty), std::invalid_argument);
        CHECK_NOTHROW(masked_log_softmax_rows(x, empty, true));
    }
    SUBCASE("graph ops") {
        const int d = 3;
        const Array h = random_array(rng, 2 * d, 2);
        std::vector<std::uint8_t> adj(2 * d * d, 0);
        adj[0 * d + 1] = 1;
        adj[0 * d + 2] = 1;
        adj[d * d + 2 * d + 1] = 1;
        for (bool fp : {true, false})
            check_gradient([adj, fp](Tape&, const std::vector<Var>& v) { return sum(square(graph_aggregate(v[0], adj, 3, fp))); },
                           {h});
        Tape t;
        const Var hv = t.input(h);
        const Array agg = graph_aggregate(hv, adj, d, true).value();
        CHECK(agg(1, 0) == doctest::Approx(h(0, 0)));
        CHECK(agg(0, 0) == 0.0);
        CHECK(agg(d + 1, 1) == doctest::Approx(h(d + 2, 1)));

        const Array q = random_array(rng, 2 * d, 2), k = random_array(rng, 2 * d, 2), vv = random_array(rng, 2 * d, 2);
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(square(block_attention(v[0], v[1], v[2], 3))); },
                       {q, k, vv});
        check_gradient([](Tape&, const std::vector<Var>& v) { return sum(square(block_bilinear(v[0], v[1], 3))); },
                       {q, k});
        const Array bil = block_bilinear(t.input(q), t.input(k), d).value();
        CHECK(bil.rows() == 2);
        CHECK(bil(1, 2 * d + 0) == doctest::Approx(q.row(d + 2).dot(k.row(d + 0))));
    }
    SUBCASE("full-covariance density") {
        const int p = 3;
        const Array mu = random_array(rng, 2, p);
        Array fac = random_array(rng, 2, p * p, 0.3);
        for (int r = 0; r < 2; ++r)
            for (int i = 0; i < p; ++i) fac(r, i * p + i) = 1.0 + 0.2 * i;
        const Array x = random_array(rng, 2, p);
        Mask act = Mask::Constant(2, p, true);
        act(1, 1) = false;
        check_gradient(
            [x, act](Tape&, const std::vector<Var>& v) { return sum(masked_tril_gaussian_log_density(v[0], v[1], x, act)); },
            {mu, fac});
        Tape t;
        const Array out = masked_tril_gaussian_log_density(t.input(mu), t.input(fac), x, act).value();
        Eigen::MatrixXd l = Eigen::MatrixXd::Zero(p, p);
        for (int i = 0; i < p; ++i)
            for (int j = 0; j <= i; ++j) l(i, j) = fac(0, i * p + j);
        CHECK(out(0, 0) == doctest::Approx(gaussian_full_log_density(x.row(0).transpose(), mu.row(0).transpose(), l)));
    }
}

TEST_CASE("tape gradient semantics") {
    Tape t;
    const Var a = t.input(Array::Constant(2, 2, 1.0));
    const Var b = t.input(Array::Constant(2, 2, 2.0));
    const Var out = sum(mul(a, detach(b)));
    const std::vector<Var> ins{a, b};
    const auto g = t.grad(out, ins);
    CHECK(g[1].isZero());
    CHECK(g[0].isApproxToConstant(2.0));
    CHECK_THROWS_AS(t.grad(a, ins), std::invalid_argument);

    t.set_leaf(a, Array::Constant(2, 2, 3.0));
    t.replay();
    CHECK(out.scalar() == doctest::Approx(24.0));
}
