#pragma once

#include <optional>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "dagforge/cpd_models.hpp"
#include "dagforge/dag_space.hpp"
#include "dagforge/policy.hpp"

namespace dagforge {

/// Closed-form posterior of one node's coefficients given a parent set.
/// `mean` and `cov` live on the active block, ordered as `parents`.
struct NodePosterior {
    std::vector<int> parents;
    Vector mean;
    Eigen::MatrixXd cov;
    Eigen::MatrixXd cov_lower;  // Cholesky factor of cov
    double log_marginal = 0.0;
};

struct ExactPosterior {
    int num_nodes = 0;
    ModelConfig cfg;
    std::vector<DagState> dags;
    std::vector<double> log_marginal;   // log P(D | G) per DAG
    std::vector<double> log_posterior;  // normalized log P(G | D)
    /// families[i][m]: posterior of node i with the parent set encoded by bit mask m.
    std::vector<std::vector<NodePosterior>> families;

    std::optional<std::size_t> index_of(const DagState& g) const;
    double log_prob(const DagState& g) const;
    const NodePosterior& family(int node, const DagState& g) const;
    ParamSet posterior_mean(const DagState& g) const;
    ParamSet sample_theta(const DagState& g, Rng& rng) const;

    std::unordered_map<AdjacencyKey, std::size_t, AdjacencyKeyHash> index;
};

/// Every labeled DAG on d nodes, once each. Throws "enumeration cap" for d > 5.
std::vector<DagState> enumerate_dags(int d);

NodePosterior node_posterior(int node, const std::vector<int>& parents, const Array& data, const ModelConfig& cfg);
std::vector<NodePosterior> posterior_params(const DagState& g, const Array& data, const ModelConfig& cfg);
double log_marginal_likelihood(const DagState& g, const Array& data, const ModelConfig& cfg);

/// `data` may have zero rows; the column count fixes d.
ExactPosterior exact_graph_posterior(const Array& data, const ModelConfig& cfg);

struct FeatureMatrices {
    Array edge;
    Array path;
    Array markov;
};

/// 0/1 indicators of edge, directed path and Markov-blanket membership.
FeatureMatrices feature_indicators(const DagState& g);
FeatureMatrices exact_features(const ExactPosterior& post);

double posterior_theta_log_density(const ParamSet& theta, const DagState& g, const ExactPosterior& post);

nlohmann::json to_json(const ExactPosterior& post);

/// Table policy on two nodes whose every transition has zero residual:
/// P(stop | G0) = P(G0 | D), P(G' | G0, not stop) proportional to P(G' | D),
/// and P(theta | G, stop) the exact parameter posterior (full-covariance heads).
class ConsistentPolicy : public ForwardModel {
  public:
    explicit ConsistentPolicy(ExactPosterior post);

    int num_nodes() const override { return post_.num_nodes; }
    const ModelConfig& model() const override { return post_.cfg; }
    ForwardDistribution forward(const DagState& g) const override;
    const ExactPosterior& posterior() const { return post_; }

  private:
    ExactPosterior post_;
};

/// Throws std::invalid_argument unless the posterior is over d = 2.
ConsistentPolicy consistent_policy(const ExactPosterior& post);

}  // namespace dagforge
