#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dagforge/core_math.hpp"
#include "dagforge/dag_space.hpp"

namespace dagforge {

enum class CpdKind { LinearGaussian, MlpGaussian };

std::string to_string(CpdKind kind);
CpdKind parse_cpd_kind(const std::string& name);

/// Likelihood and prior hyperparameters shared by every node.
struct ModelConfig {
    CpdKind kind = CpdKind::LinearGaussian;
    double obs_variance = 0.01;
    double prior_mean = 0.0;
    double prior_variance = 1.0;
    int mlp_hidden = 5;
    /// log P(G) = -graph_edge_penalty * num_edges; 0 gives the uniform prior.
    double graph_edge_penalty = 0.0;

    void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Per-node CPD parameters. For the linear kind block i has length d and
/// block i[j] is the coefficient of parent j (exactly 0 for non-parents). For
/// the MLP kind block i is [W1 (hidden x d, row-major), b1, w2, b2].
struct ParamSet {
    std::vector<Vector> blocks;

    int num_nodes() const { return static_cast<int>(blocks.size()); }
    Eigen::Index total_size() const;
    /// blocks stacked as rows (d x block size).
    Array as_rows() const;
    static ParamSet from_rows(const Array& rows);
    bool operator==(const ParamSet& other) const;
};

struct Dataset {
    Array observations;           // N x d
    std::optional<Array> heldout;  // N' x d

    int num_nodes() const { return static_cast<int>(observations.cols()); }
    int num_rows() const { return static_cast<int>(observations.rows()); }
};

/// Length of one node's parameter block.
int param_block_size(const ModelConfig& cfg, int d);

/// d x block-size mask of the coordinates that carry prior mass under G.
Mask active_coordinates(const DagState& g, const ModelConfig& cfg);

ParamSet zero_params(const ModelConfig& cfg, int d);

/// Mean of X_i given the inputs for an MLP block; `masked_inputs` already has
/// non-parent columns zeroed.
Vector mlp_mean(const Vector& block, const Array& masked_inputs, int hidden);

/// Per-observation log P(x | G, theta), length N.
Vector observation_log_likelihoods(const DagState& g, const ParamSet& theta, const Array& data, const ModelConfig& cfg);

double log_likelihood(const DagState& g, const ParamSet& theta, const Array& data, const ModelConfig& cfg);
double log_prior_params(const DagState& g, const ParamSet& theta, const ModelConfig& cfg);
double log_prior_graph(const DagState& g, const ModelConfig& cfg = {});
double log_reward(const DagState& g, const ParamSet& theta, const Array& data, const ModelConfig& cfg);

/// Unbiased mini-batch estimate: the batch log-likelihood is scaled by N/M.
double minibatch_log_reward(const DagState& g, const ParamSet& theta, const Array& batch, int total_rows,
                            const ModelConfig& cfg);

/// Gradient of [likelihood_scale * log P(data | G, theta) + log P(theta | G)]
/// with respect to theta, zero on inactive coordinates.
ParamSet grad_theta_log_reward(const DagState& g, const ParamSet& theta, const Array& data, const ModelConfig& cfg,
                               double likelihood_scale = 1.0);

/// Throws if a linear-kind block has a nonzero non-parent coordinate or the
/// block sizes do not match the model.
void check_layout(const DagState& g, const ParamSet& theta, const ModelConfig& cfg);

}  // namespace dagforge
