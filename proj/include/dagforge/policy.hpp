#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dagforge/core_math.hpp"
#include "dagforge/cpd_models.hpp"
#include "dagforge/dag_space.hpp"
#include "dagforge/random.hpp"

namespace dagforge {

/// Distribution over the next action from one state. `edge_log_probs` is
/// conditional on not stopping. Exactly one of theta_var (diagonal mode) and
/// theta_factor (full mode, d x P*P row-major lower-triangular factors) is set.
struct ForwardDistribution {
    double p_stop = 1.0;
    double log_p_stop = 0.0;
    double log_p_continue = kMaskedLogProb;
    Array edge_log_probs;
    Array theta_mean;
    Array theta_var;
    Array theta_factor;

    bool full_covariance() const { return theta_factor.size() > 0; }
    /// Log-density of theta's active coordinates (stop factor excluded).
    double theta_log_density(const ParamSet& theta, const Mask& active) const;
    /// Draw over the active coordinates; inactive coordinates are 0.
    ParamSet sample_theta(const Mask& active, Rng& rng) const;
};

/// Anything that defines the hierarchical forward policy.
class ForwardModel {
  public:
    virtual ~ForwardModel() = default;
    virtual int num_nodes() const = 0;
    virtual const ModelConfig& model() const = 0;
    virtual int max_parents() const { return -1; }
    virtual ForwardDistribution forward(const DagState& g) const = 0;
    /// Batched evaluation; the default loops over `forward`.
    virtual std::vector<ForwardDistribution> forward_many(std::span<const DagState> graphs) const;
};

/// log P(G' | G) = log(1 - p_stop) + log P(G' | G, not stop).
double log_pf_edge(const ForwardModel& model, const DagState& g, const DagState& next);
/// log P(stop | G) + log P(theta | G, stop).
double log_pf_theta(const ForwardModel& model, const DagState& g, const ParamSet& theta);

struct Trajectory {
    std::vector<DagState> states;  // front is the empty graph
    const DagState& final_state() const { return states.back(); }
};

/// Draws the next action: nullopt means stop. With probability `exploration_eps`
/// the draw is uniform among stop and the valid edges instead of the policy.
std::optional<std::pair<int, int>> sample_action(const DagState& g, const ForwardDistribution& f, int max_parents,
                                                 Rng& rng, double exploration_eps = 0.0);

/// Rollout from the empty graph. With probability `exploration_eps` a step
/// draws uniformly among stop and the valid edges instead of the policy.
Trajectory sample_trajectory(const ForwardModel& model, Rng& rng, double exploration_eps = 0.0);

/// `count` rollouts advanced in lockstep so each step is one batched forward.
std::vector<Trajectory> sample_trajectories(const ForwardModel& model, int count, Rng& rng,
                                            double exploration_eps = 0.0);

struct PolicyConfig {
    int width = 64;
    int message_layers = 2;
    bool attention = true;
    bool full_covariance = false;
    double variance_floor = 1e-6;
    /// Pre-softplus bias of the variance head at initialization.
    double variance_bias_init = -5.0;
    int max_parents = -1;

    void validate() const;
};

/// Named parameter tensors in a fixed order.
struct PolicyParameters {
    std::vector<std::string> names;
    std::vector<Array> tensors;

    std::size_t size() const { return tensors.size(); }
    std::size_t index_of(const std::string& name) const;
    Array& operator[](const std::string& name) { return tensors[index_of(name)]; }
    const Array& operator[](const std::string& name) const { return tensors[index_of(name)]; }
    void add(std::string name, Array value);
    Eigen::Index num_scalars() const;
    bool all_finite() const;
};

struct NodeEmbeddings {
    Vector g;
    Array u;
    Array v;
    Array w;
};

/// Tape outputs of a batched forward over B graphs with d nodes each.
struct PolicyBatch {
    Var log_stop;        // B x 1
    Var log_continue;    // B x 1
    Var edge_log_probs;  // B x d*d
    Var theta_mean;      // B*d x P
    Var theta_var;       // B*d x P (diagonal mode)
    Var theta_factor;    // B*d x P*P (full mode)
    Var embeddings;      // B*d x width
    std::vector<bool> forced_stop;
};

class Policy : public ForwardModel {
  public:
    Policy(int d, ModelConfig model, PolicyConfig cfg, std::uint64_t seed);
    Policy(int d, ModelConfig model, PolicyConfig cfg, PolicyParameters params);

    int num_nodes() const override { return d_; }
    const ModelConfig& model() const override { return model_; }
    const PolicyConfig& config() const { return cfg_; }
    int max_parents() const override { return cfg_.max_parents; }
    int param_dim() const { return param_dim_; }

    const PolicyParameters& parameters() const { return params_; }
    PolicyParameters& parameters() { return params_; }

    NodeEmbeddings embed(const DagState& g) const;
    ForwardDistribution forward(const DagState& g) const override;
    std::vector<ForwardDistribution> forward_many(std::span<const DagState> graphs) const override;

    /// Puts every parameter tensor on the tape, as differentiable inputs or constants.
    std::vector<Var> bind(Tape& tape, bool differentiable) const;
    PolicyBatch forward_tape(Tape& tape, std::span<const Var> params, std::span<const DagState> graphs) const;

    nlohmann::json to_json() const;
    static Policy from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static Policy load(const std::string& path);

  private:
    void check_parameters() const;

    int d_;
    int param_dim_;
    ModelConfig model_;
    PolicyConfig cfg_;
    PolicyParameters params_;
};

}  // namespace dagforge
