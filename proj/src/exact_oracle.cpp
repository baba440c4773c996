#include "dagforge/exact_oracle.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include <Eigen/Cholesky>

namespace dagforge {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

int parent_mask(const DagState& g, int node) {
    int m = 0;
    for (int p : g.parents(node)) m |= 1 << p;
    return m;
}

void require_linear(const ModelConfig& cfg) {
    if (cfg.kind != CpdKind::LinearGaussian) throw std::invalid_argument("exact posterior requires the linear-gaussian kind");
}

}  // namespace

std::vector<DagState> enumerate_dags(int d) {
    if (d < 1) throw std::invalid_argument("enumerate_dags: d must be at least 1");
    if (d > 5) throw std::invalid_argument("enumeration cap");
    std::vector<DagState> out{empty_state(d)};
    std::unordered_set<AdjacencyKey, AdjacencyKeyHash> seen{out.front().key()};
    for (std::size_t k = 0; k < out.size(); ++k) {
        const DagState s = out[k];
        const ActionMask m = action_mask(s);
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j < d; ++j) {
                if (!m(i, j)) continue;
                DagState next = apply_add_edge(s, i, j);
                if (seen.insert(next.key()).second) out.push_back(std::move(next));
            }
        }
    }
    return out;
}

NodePosterior node_posterior(int node, const std::vector<int>& parents, const Array& data, const ModelConfig& cfg) {
    require_linear(cfg);
    cfg.validate();
    const auto n = data.rows();
    const auto k = static_cast<Eigen::Index>(parents.size());
    const double s2 = cfg.obs_variance;
    const double s02 = cfg.prior_variance;
    Eigen::MatrixXd xpa(n, k);
    for (Eigen::Index c = 0; c < k; ++c) xpa.col(c) = data.col(parents[static_cast<std::size_t>(c)]);
    const Eigen::VectorXd xi = data.col(node);

    NodePosterior post;
    post.parents = parents;
    const Eigen::VectorXd r = xi - xpa * Eigen::VectorXd::Constant(k, cfg.prior_mean);
    double lml = -0.5 * static_cast<double>(n) * (kLog2Pi + std::log(s2)) - 0.5 * r.squaredNorm() / s2;
    if (k == 0) {
        post.log_marginal = lml;
        return post;
    }
    Eigen::MatrixXd precision = Eigen::MatrixXd::Identity(k, k) / s02;
    precision.noalias() += xpa.transpose() * xpa / s2;
    const Eigen::LLT<Eigen::MatrixXd> llt(precision);
    if (llt.info() != Eigen::Success) throw std::runtime_error("posterior precision is singular");
    post.cov = llt.solve(Eigen::MatrixXd::Identity(k, k));
    post.cov = 0.5 * (post.cov + post.cov.transpose());
    const Eigen::VectorXd rhs = Eigen::VectorXd::Constant(k, cfg.prior_mean / s02) + xpa.transpose() * xi / s2;
    post.mean = llt.solve(rhs);
    const Eigen::LLT<Eigen::MatrixXd> cov_llt(post.cov);
    post.cov_lower = cov_llt.matrixL();

    const Eigen::VectorXd b = xpa.transpose() * r;
    const Eigen::MatrixXd lp = llt.matrixL();
    const double logdet_precision = 2.0 * lp.diagonal().array().log().sum();
    lml -= 0.5 * (static_cast<double>(k) * std::log(s02) + logdet_precision);
    lml += 0.5 * b.dot(llt.solve(b)) / (s2 * s2);
    post.log_marginal = lml;
    return post;
}

std::vector<NodePosterior> posterior_params(const DagState& g, const Array& data, const ModelConfig& cfg) {
    if (data.cols() != g.num_nodes()) throw std::invalid_argument("data column count does not match the graph");
    std::vector<NodePosterior> out;
    for (int i = 0; i < g.num_nodes(); ++i) out.push_back(node_posterior(i, g.parents(i), data, cfg));
    return out;
}

double log_marginal_likelihood(const DagState& g, const Array& data, const ModelConfig& cfg) {
    double total = 0.0;
    for (const auto& p : posterior_params(g, data, cfg)) total += p.log_marginal;
    return total;
}

ExactPosterior exact_graph_posterior(const Array& data, const ModelConfig& cfg) {
    require_linear(cfg);
    const int d = static_cast<int>(data.cols());
    ExactPosterior post;
    post.num_nodes = d;
    post.cfg = cfg;
    post.dags = enumerate_dags(d);
    post.families.assign(static_cast<std::size_t>(d), {});
    for (int i = 0; i < d; ++i) {
        auto& fam = post.families[static_cast<std::size_t>(i)];
        for (int m = 0; m < (1 << d); ++m) {
            std::vector<int> parents;
            for (int p = 0; p < d; ++p)
                if ((m >> p) & 1) parents.push_back(p);
            if ((m >> i) & 1) {
                fam.emplace_back();
                continue;
            }
            fam.push_back(node_posterior(i, parents, data, cfg));
        }
    }
    std::vector<double> unnorm;
    for (std::size_t k = 0; k < post.dags.size(); ++k) {
        const DagState& g = post.dags[k];
        double lml = 0.0;
        for (int i = 0; i < d; ++i) lml += post.family(i, g).log_marginal;
        post.log_marginal.push_back(lml);
        unnorm.push_back(lml + log_prior_graph(g, cfg));
        post.index.emplace(g.key(), k);
    }
    const double z = log_sum_exp(unnorm);
    for (double u : unnorm) post.log_posterior.push_back(u - z);
    return post;
}

std::optional<std::size_t> ExactPosterior::index_of(const DagState& g) const {
    const auto it = index.find(g.key());
    if (it == index.end() || g.num_nodes() != num_nodes) return std::nullopt;
    return it->second;
}

double ExactPosterior::log_prob(const DagState& g) const {
    const auto k = index_of(g);
    if (!k) throw std::invalid_argument("graph not in the enumeration");
    return log_posterior[*k];
}

const NodePosterior& ExactPosterior::family(int node, const DagState& g) const {
    return families.at(static_cast<std::size_t>(node)).at(static_cast<std::size_t>(parent_mask(g, node)));
}

ParamSet ExactPosterior::posterior_mean(const DagState& g) const {
    ParamSet theta = zero_params(cfg, num_nodes);
    for (int i = 0; i < num_nodes; ++i) {
        const auto& f = family(i, g);
        for (std::size_t a = 0; a < f.parents.size(); ++a)
            theta.blocks[static_cast<std::size_t>(i)][f.parents[a]] = f.mean[static_cast<Eigen::Index>(a)];
    }
    return theta;
}

ParamSet ExactPosterior::sample_theta(const DagState& g, Rng& rng) const {
    ParamSet theta = zero_params(cfg, num_nodes);
    for (int i = 0; i < num_nodes; ++i) {
        const auto& f = family(i, g);
        const auto k = static_cast<Eigen::Index>(f.parents.size());
        if (k == 0) continue;
        Eigen::VectorXd z(k);
        for (Eigen::Index a = 0; a < k; ++a) z[a] = rng.normal();
        const Eigen::VectorXd v = f.mean + f.cov_lower * z;
        for (Eigen::Index a = 0; a < k; ++a) theta.blocks[static_cast<std::size_t>(i)][f.parents[static_cast<std::size_t>(a)]] = v[a];
    }
    return theta;
}

FeatureMatrices feature_indicators(const DagState& g) {
    const int d = g.num_nodes();
    FeatureMatrices f{Array::Zero(d, d), Array::Zero(d, d), Array::Zero(d, d)};
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
            if (i == j) continue;
            f.edge(i, j) = g.has_edge(i, j) ? 1.0 : 0.0;
            f.path(i, j) = g.reaches(i, j) ? 1.0 : 0.0;
            bool mb = g.has_edge(i, j) || g.has_edge(j, i);
            for (int c = 0; c < d && !mb; ++c) mb = g.has_edge(i, c) && g.has_edge(j, c);
            f.markov(i, j) = mb ? 1.0 : 0.0;
        }
    }
    return f;
}

FeatureMatrices exact_features(const ExactPosterior& post) {
    const int d = post.num_nodes;
    FeatureMatrices out{Array::Zero(d, d), Array::Zero(d, d), Array::Zero(d, d)};
    for (std::size_t k = 0; k < post.dags.size(); ++k) {
        const double p = std::exp(post.log_posterior[k]);
        if (p == 0.0) continue;
        const FeatureMatrices f = feature_indicators(post.dags[k]);
        out.edge += p * f.edge;
        out.path += p * f.path;
        out.markov += p * f.markov;
    }
    return out;
}

double posterior_theta_log_density(const ParamSet& theta, const DagState& g, const ExactPosterior& post) {
    check_layout(g, theta, post.cfg);
    double lp = 0.0;
    for (int i = 0; i < g.num_nodes(); ++i) {
        const auto& f = post.family(i, g);
        const auto k = static_cast<Eigen::Index>(f.parents.size());
        if (k == 0) continue;
        Eigen::VectorXd x(k);
        for (Eigen::Index a = 0; a < k; ++a) x[a] = theta.blocks[static_cast<std::size_t>(i)][f.parents[static_cast<std::size_t>(a)]];
        lp += gaussian_full_log_density(x, f.mean, f.cov_lower);
    }
    return lp;
}

nlohmann::json to_json(const ExactPosterior& post) {
    nlohmann::json graphs = nlohmann::json::object();
    for (std::size_t k = 0; k < post.dags.size(); ++k) graphs[post.dags[k].to_hex()] = post.log_posterior[k];
    return {{"num_nodes", post.num_nodes}, {"num_graphs", post.dags.size()}, {"log_posterior", graphs}};
}

ConsistentPolicy::ConsistentPolicy(ExactPosterior post) : post_(std::move(post)) {
    if (post_.num_nodes != 2) throw std::invalid_argument("consistent_policy requires d = 2");
}

ForwardDistribution ConsistentPolicy::forward(const DagState& g) const {
    const int d = post_.num_nodes;
    const int p = param_block_size(post_.cfg, d);
    ForwardDistribution f;
    f.edge_log_probs = Array::Constant(d, d, kMaskedLogProb);
    if (g.num_edges() == 0) {
        const double lp0 = post_.log_prob(g);
        f.p_stop = std::exp(lp0);
        f.log_p_stop = lp0;
        f.log_p_continue = std::log1p(-f.p_stop);
        for (const auto& [i, j] : std::vector<std::pair<int, int>>{{0, 1}, {1, 0}})
            f.edge_log_probs(i, j) = post_.log_prob(g.with_edge(i, j)) - f.log_p_continue;
    }
    f.theta_mean = Array::Zero(d, p);
    f.theta_factor = Array::Zero(d, p * p);
    for (int i = 0; i < d; ++i) {
        for (int k = 0; k < p; ++k) f.theta_factor(i, k * p + k) = 1.0;
        const auto& fam = post_.family(i, g);
        for (std::size_t a = 0; a < fam.parents.size(); ++a) {
            const int ka = fam.parents[a];
            f.theta_mean(i, ka) = fam.mean[static_cast<Eigen::Index>(a)];
            for (std::size_t c = 0; c <= a; ++c)
                f.theta_factor(i, ka * p + fam.parents[c]) = fam.cov_lower(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(c));
        }
    }
    return f;
}

ConsistentPolicy consistent_policy(const ExactPosterior& post) { return ConsistentPolicy(post); }

}  // namespace dagforge
