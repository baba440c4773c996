#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dagforge/cpd_models.hpp"
#include "dagforge/datagen.hpp"
#include "dagforge/evaluation.hpp"
#include "dagforge/policy.hpp"
#include "dagforge/trainer.hpp"

namespace dagforge {

/// Bad config file, bad flag or missing input. Maps to exit code 2.
class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class CompareReference { Policy, Exact };

/// Everything a command needs. Parsed from flat `section.key = value` text.
struct ExperimentConfig {
    GenConfig data;
    /// Above 1, commands run on dataset_01 .. dataset_NN under the output
    /// directory, with data seeds data.seed, data.seed + 1, ...
    int num_datasets = 1;

    ModelConfig model;
    PolicyConfig policy;
    TrainerConfig train;
    bool resume = false;

    EvaluationConfig eval;
    bool compare_exact = false;
    CompareReference reference = CompareReference::Policy;

    std::string out_dir = ".";
    std::string data_path;
    std::string heldout_path;
    std::string ground_truth_path;
    std::string checkpoint_path;

    void validate() const;
};

/// Throws ConfigError naming the line for syntax errors, unknown or repeated
/// keys and bad values. model.kind, model.obs_variance and model.mlp_hidden
/// default to the data section when absent.
ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::string& path);

/// Every accepted key, in schema order.
std::vector<std::string> config_keys();
/// One `key = value` line per key; parses back to the same config.
std::string to_config_text(const ExperimentConfig& cfg);
/// Nested by section.
nlohmann::json config_json(const ExperimentConfig& cfg);

/// SHA-1 of "blob <size>\0<content>", as git computes object ids.
std::string git_blob_sha1(const std::string& content);
std::string file_blob_sha1(const std::filesystem::path& path);

struct CommandOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    int threads = 1;
    std::optional<std::string> out;
};

/// Config from file plus flag overrides; --seed sets every seed in the config.
ExperimentConfig resolve_config(const CommandOptions& opts);

/// Directories a command works in, one per dataset.
std::vector<std::filesystem::path> run_directories(const ExperimentConfig& cfg);

void cmd_generate(const ExperimentConfig& cfg);
void cmd_train(const ExperimentConfig& cfg);
void cmd_evaluate(const ExperimentConfig& cfg);
void cmd_compare_exact(const ExperimentConfig& cfg);

/// mean, standard deviation and Student-t 95% interval; interval bounds are
/// null with fewer than two values.
nlohmann::json summarize(const std::vector<double>& values);

/// Runs `command` and maps failures to exit codes: 0 success, 2 usage or
/// config, 3 numerical failure.
int run_command(const std::string& command, const CommandOptions& opts);

}  // namespace dagforge
