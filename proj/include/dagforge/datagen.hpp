#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "dagforge/cpd_models.hpp"
#include "dagforge/dag_space.hpp"
#include "dagforge/random.hpp"

namespace dagforge {

struct GenConfig {
    int num_nodes = 5;
    /// 1 for ER1, 2 for ER2.
    double expected_edges_per_node = 1.0;
    int num_samples = 100;
    int num_heldout = 100;
    CpdKind kind = CpdKind::LinearGaussian;
    double noise_variance = 0.01;
    int mlp_hidden = 5;
    std::uint64_t seed = 0;

    void validate() const;
    /// expected edges / C(d, 2), clipped to [0, 1].
    double edge_probability() const;
    /// Model matching the generating process (same kind, noise and hidden width).
    ModelConfig model_config() const;
};

nlohmann::json to_json(const GenConfig& cfg);
GenConfig gen_config_from_json(const nlohmann::json& j);

/// Random topological order, then each order-respecting pair independently.
DagState sample_er_dag(const GenConfig& cfg, Rng& rng);
DagState sample_er_dag(int d, double edge_probability, Rng& rng);

/// Standard normal values on the coordinates active under G (all of them for MLPs).
ParamSet sample_ground_truth_params(const DagState& g, const GenConfig& cfg, Rng& rng);

/// n rows drawn in topological order with N(0, noise_variance) noise.
Array ancestral_sample(const DagState& g, const ParamSet& theta, const GenConfig& cfg, int n, Rng& rng);

struct GroundTruth {
    DagState graph;
    ParamSet theta;
    GenConfig cfg;
};

struct GeneratedProblem {
    Dataset data;
    GroundTruth truth;
};

/// Graph, parameters, observations and held-out rows from one rng seeded by cfg.seed.
GeneratedProblem generate_problem(const GenConfig& cfg);

nlohmann::json to_json(const GroundTruth& truth);
GroundTruth ground_truth_from_json(const nlohmann::json& j);
void write_ground_truth(const std::string& path, const GroundTruth& truth);
GroundTruth read_ground_truth(const std::string& path);

class DatasetParseError : public std::runtime_error {
  public:
    DatasetParseError(const std::string& path, int line, const std::string& what)
        : std::runtime_error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}
    int line() const { return line_; }

  private:
    int line_;
};

/// CSV with header X1..Xd and values printed with 17 significant digits.
void write_dataset(const std::string& path, const Array& observations);
Array read_dataset(const std::string& path);
/// An empty `heldout_path` leaves the held-out set unset.
Dataset read_dataset(const std::string& path, const std::string& heldout_path);

}  // namespace dagforge
