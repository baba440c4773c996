#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dagforge/cpd_models.hpp"
#include "dagforge/dag_space.hpp"
#include "dagforge/policy.hpp"
#include "dagforge/random.hpp"

namespace dagforge {

struct Transition {
    DagState from;
    DagState to;
};

/// FIFO ring of (G, G') pairs stored as the packed key of G plus the added edge.
class ReplayBuffer {
  public:
    ReplayBuffer(int num_nodes, std::size_t capacity);

    /// Throws std::invalid_argument unless `to` is `from` plus exactly one edge.
    void push(const DagState& from, const DagState& to);
    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }
    Transition at(std::size_t k) const;
    /// Uniform draws with replacement.
    std::vector<Transition> sample(std::size_t count, Rng& rng) const;

    nlohmann::json to_json() const;
    static ReplayBuffer from_json(const nlohmann::json& j);

  private:
    struct Entry {
        AdjacencyKey from;
        int source;
        int target;
    };
    int d_;
    std::size_t capacity_;
    std::size_t next_ = 0;  // slot overwritten by the next push once full
    std::vector<Entry> entries_;
};

struct TrainerConfig {
    int env_steps_per_update = 16;
    int batch_size = 256;
    double learning_rate = 1e-3;
    /// Infinity selects the square loss.
    double huber_delta = 1.0;
    double penalty_weight = 0.0;
    int total_updates = 10000;
    double eps_start = 1.0;
    double eps_end = 0.1;
    /// Updates over which exploration is annealed; 0 means half of total_updates.
    int eps_anneal_updates = 0;
    /// 0 uses the full dataset in every reward.
    int minibatch_size = 0;
    std::uint64_t seed = 0;
    std::size_t buffer_capacity = 100000;
    double grad_clip = 10.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    /// Learning rate is multiplied by this factor over the run (linear decay); 1 keeps it constant.
    double final_lr_fraction = 1.0;
    int report_every = 100;
    int checkpoint_every = 0;
    std::string checkpoint_path;
    std::string history_path;
    std::string dump_path;

    void validate() const;
    double exploration(int update) const;
    double learning_rate_at(int update) const;
};

struct LossReport {
    int update = 0;
    double loss = 0.0;
    double mean_abs_residual = 0.0;
    double penalty = 0.0;
    double p_stop_g0 = 0.0;
    double grad_norm = 0.0;
};

/// Residual between the two complete states reached from G and G'. The log
/// reward uses minibatch scaling when `total_rows` exceeds data.rows().
double subtb_residual(const ForwardModel& model, const DagState& g, const DagState& next, const ParamSet& theta,
                      const ParamSet& theta_next, const Array& data, int total_rows = -1);

struct LossOptions {
    /// Per-transition (theta at G, theta at G'); sampled on-policy when null.
    const std::vector<std::pair<ParamSet, ParamSet>>* fixed_theta = nullptr;
    /// Rows used for the reward; when null and minibatch_size > 0 a batch is sampled.
    const Array* minibatch = nullptr;
    bool compute_gradient = true;
};

struct LossEvaluation {
    double loss = 0.0;
    double mean_abs_residual = 0.0;
    double penalty = 0.0;
    std::vector<double> residuals;
    std::vector<Array> gradients;
    std::vector<std::pair<ParamSet, ParamSet>> thetas;
};

LossEvaluation evaluate_loss(const Policy& policy, std::span<const Transition> batch, const Array& data,
                             const TrainerConfig& cfg, Rng& rng, const LossOptions& options = {});

class Adam {
  public:
    Adam() = default;
    explicit Adam(const PolicyParameters& shapes, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8);
    void step(PolicyParameters& params, const std::vector<Array>& grads, double lr);
    long steps() const { return t_; }
    nlohmann::json to_json() const;
    static Adam from_json(const nlohmann::json& j);

  private:
    double beta1_ = 0.9, beta2_ = 0.999, epsilon_ = 1e-8;
    long t_ = 0;
    std::vector<Array> m_, v_;
};

/// Rescales the gradients in place to a global norm of at most `max_norm`.
/// Returns the norm before clipping.
double clip_global_norm(std::vector<Array>& grads, double max_norm);

class TrainingDiverged : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Everything needed to continue a run.
struct TrainerState {
    Policy policy;
    Adam optimizer;
    ReplayBuffer buffer;
    std::vector<DagState> envs;
    Rng rng;
    int update = 0;
    std::vector<LossReport> history;

    nlohmann::json to_json() const;
    static TrainerState from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static TrainerState load(const std::string& path);
};

TrainerState initial_trainer_state(int d, const ModelConfig& model, const PolicyConfig& pcfg, const TrainerConfig& cfg);

using ReportCallback = std::function<void(const LossReport&)>;

/// Runs updates until state.update reaches cfg.total_updates. Throws
/// TrainingDiverged on a non-finite loss or gradient after writing the dump.
void train(TrainerState& state, const Array& data, const TrainerConfig& cfg, const ReportCallback& on_report = {});

struct TrainResult {
    Policy policy;
    std::vector<LossReport> history;
};

TrainResult train(const Array& data, const ModelConfig& model, const PolicyConfig& pcfg, const TrainerConfig& cfg,
                  const ReportCallback& on_report = {});

void write_history_csv(const std::string& path, const std::vector<LossReport>& history);
nlohmann::json to_json(const LossReport& r);

}  // namespace dagforge
