#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dagforge/cpd_models.hpp"
#include "dagforge/dag_space.hpp"
#include "dagforge/exact_oracle.hpp"
#include "dagforge/policy.hpp"
#include "dagforge/random.hpp"

namespace dagforge {

/// Joint samples (G, theta) from a forward model.
struct SampleBag {
    std::vector<DagState> graphs;
    std::vector<ParamSet> thetas;

    std::size_t size() const { return graphs.size(); }
    bool empty() const { return graphs.empty(); }
    void add(DagState g, ParamSet theta);
};

/// `count` rollouts from G0 followed by a parameter draw at the final graph.
SampleBag sample_bag(const ForwardModel& model, int count, Rng& rng);

/// Empirical edge / path / Markov-blanket frequencies. Throws on an empty bag.
FeatureMatrices feature_estimates(const SampleBag& bag);

/// Off-diagonal comparison. `pearson` is empty when either side has zero variance.
struct FeatureComparison {
    double rmse = 0.0;
    std::optional<double> pearson;
};
FeatureComparison rmse_and_pearson(const Array& estimate, const Array& exact);

/// -(1/K) sum_k log P(theta_k | G_k, D) under the exact parameter posterior.
double cross_entropy_theta(const SampleBag& bag, const ExactPosterior& post);

/// Expected negative log-likelihood per held-out row, averaged over the bag.
double heldout_nll(const SampleBag& bag, const Array& heldout, const ModelConfig& cfg);

/// Structural Hamming distance; a reversed edge counts once.
int shd(const DagState& g, const DagState& reference);
double expected_shd(const SampleBag& bag, const DagState& reference);

/// Rank AUROC of off-diagonal edge scores against the reference edges, ties
/// counted one half. Empty when the labels are all equal.
std::optional<double> auroc(const Array& edge_scores, const DagState& reference);

struct EstimatorConfig {
    int beam_size = 64;
    int mc_trajectories = 256;
    std::uint64_t seed = 0;

    void validate() const;
};

/// log P(G | G0) from top-scoring beam trajectories plus uniform rejection
/// sampled trajectories. Exact when the beam covers all K! orderings.
double estimate_log_pG(const ForwardModel& model, const DagState& g, const EstimatorConfig& cfg, Rng& rng);
/// estimate_log_pG plus log P(stop | G) + log P(theta | G, stop).
double estimate_log_pT(const ForwardModel& model, const DagState& g, const ParamSet& theta, const EstimatorConfig& cfg,
                       Rng& rng);
/// Sum over all K! orderings. Throws for K > 8.
double exhaustive_log_pG(const ForwardModel& model, const DagState& g);

struct RansacFit {
    std::optional<double> slope;
    std::optional<double> intercept;
    int inliers = 0;
};

/// 1000 two-point proposals, inliers within 1.4826 * MAD of the least-squares
/// residuals, least-squares refit on the largest inlier set.
RansacFit ransac_slope(const std::vector<double>& x, const std::vector<double>& y, Rng& rng, int proposals = 1000);

struct ScatterPoint {
    double log_reward = 0.0;
    double log_pt = 0.0;
    int num_edges = 0;
};

/// Point k uses its own rng seeded from (cfg.seed, k), so the result does not
/// depend on `threads`.
std::vector<ScatterPoint> reward_scatter(const ForwardModel& model, const SampleBag& bag, const Array& data,
                                         const EstimatorConfig& cfg, int threads = 1);

void write_scatter_csv(const std::string& path, const std::vector<ScatterPoint>& points);
void write_scatter_svg(const std::string& path, const std::vector<ScatterPoint>& points, const RansacFit& fit);

struct EvaluationConfig {
    int num_samples = 1000;
    int slope_samples = 1000;
    EstimatorConfig estimator;
    std::uint64_t seed = 0;
    /// Worker threads for the slope scatter.
    int threads = 1;

    void validate() const;
};

struct FeatureScores {
    FeatureComparison edge, path, markov;
};

/// Every field is optional because each metric needs different inputs.
struct MetricsReport {
    int num_samples = 0;
    std::optional<FeatureScores> features;
    std::optional<double> cross_entropy;
    std::optional<double> nll;
    std::optional<double> eshd;
    std::optional<double> auroc;
    std::optional<RansacFit> slope;
    std::string points_csv_path;
};

nlohmann::json to_json(const MetricsReport& r);

struct EvaluationInputs {
    const Array* data = nullptr;
    const Array* heldout = nullptr;
    const ExactPosterior* exact = nullptr;
    const DagState* ground_truth = nullptr;
    /// When set, the slope scatter is written here (and to `.svg` alongside).
    std::string points_csv_path;
};

MetricsReport evaluate_policy(const ForwardModel& model, const EvaluationInputs& in, const EvaluationConfig& cfg);

}  // namespace dagforge
