#include "dagforge/experiment.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "dagforge/exact_oracle.hpp"

namespace fs = std::filesystem;

namespace dagforge {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

template <class T>
T parse_integer(const std::string& v) {
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) throw std::invalid_argument("not an integer: '" + v + "'");
    return out;
}

double parse_double(const std::string& v) {
    if (v == "inf" || v == "infinity") return std::numeric_limits<double>::infinity();
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty() || std::isnan(out))
        throw std::invalid_argument("not a number: '" + v + "'");
    return out;
}

bool parse_bool(const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw std::invalid_argument("expected true or false, got '" + v + "'");
}

std::string format_double(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string to_string(CompareReference r) { return r == CompareReference::Policy ? "policy" : "exact"; }

CompareReference parse_reference(const std::string& v) {
    if (v == "policy") return CompareReference::Policy;
    if (v == "exact") return CompareReference::Exact;
    throw std::invalid_argument("expected policy or exact, got '" + v + "'");
}

void assign(int& dst, const std::string& v) { dst = parse_integer<int>(v); }
void assign(std::uint64_t& dst, const std::string& v) { dst = parse_integer<std::uint64_t>(v); }
void assign(double& dst, const std::string& v) { dst = parse_double(v); }
void assign(bool& dst, const std::string& v) { dst = parse_bool(v); }
void assign(std::string& dst, const std::string& v) { dst = v; }
void assign(CpdKind& dst, const std::string& v) { dst = parse_cpd_kind(v); }
void assign(CompareReference& dst, const std::string& v) { dst = parse_reference(v); }

nlohmann::json value_json(int v) { return v; }
nlohmann::json value_json(std::uint64_t v) { return v; }
nlohmann::json value_json(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(format_double(v)); }
nlohmann::json value_json(bool v) { return v; }
nlohmann::json value_json(const std::string& v) { return v; }
nlohmann::json value_json(CpdKind v) { return to_string(v); }
nlohmann::json value_json(CompareReference v) { return to_string(v); }

std::string value_text(int v) { return std::to_string(v); }
std::string value_text(std::uint64_t v) { return std::to_string(v); }
std::string value_text(double v) { return format_double(v); }
std::string value_text(bool v) { return v ? "true" : "false"; }
std::string value_text(const std::string& v) { return v; }
std::string value_text(CpdKind v) { return to_string(v); }
std::string value_text(CompareReference v) { return to_string(v); }

struct Field {
    std::string key;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<nlohmann::json(const ExperimentConfig&)> json;
    std::function<std::string(const ExperimentConfig&)> text;
};

template <class Ref>
Field field(std::string key, Ref ref) {
    return {std::move(key), [ref](ExperimentConfig& c, const std::string& v) { assign(ref(c), v); },
            [ref](const ExperimentConfig& c) { return value_json(ref(c)); },
            [ref](const ExperimentConfig& c) { return value_text(ref(c)); }};
}

Field size_field(std::string key) {
    return {std::move(key),
            [](ExperimentConfig& c, const std::string& v) { c.train.buffer_capacity = parse_integer<std::size_t>(v); },
            [](const ExperimentConfig& c) { return nlohmann::json(c.train.buffer_capacity); },
            [](const ExperimentConfig& c) { return std::to_string(c.train.buffer_capacity); }};
}

#define DF_FIELD(key, member) field(key, [](auto& c) -> auto& { return c.member; })

const std::vector<Field>& schema() {
    static const std::vector<Field> fields = {
        DF_FIELD("data.num_nodes", data.num_nodes),
        DF_FIELD("data.expected_edges_per_node", data.expected_edges_per_node),
        DF_FIELD("data.num_samples", data.num_samples),
        DF_FIELD("data.num_heldout", data.num_heldout),
        DF_FIELD("data.kind", data.kind),
        DF_FIELD("data.noise_variance", data.noise_variance),
        DF_FIELD("data.mlp_hidden", data.mlp_hidden),
        DF_FIELD("data.seed", data.seed),
        DF_FIELD("data.num_datasets", num_datasets),
        DF_FIELD("model.kind", model.kind),
        DF_FIELD("model.obs_variance", model.obs_variance),
        DF_FIELD("model.prior_mean", model.prior_mean),
        DF_FIELD("model.prior_variance", model.prior_variance),
        DF_FIELD("model.mlp_hidden", model.mlp_hidden),
        DF_FIELD("model.graph_edge_penalty", model.graph_edge_penalty),
        DF_FIELD("policy.width", policy.width),
        DF_FIELD("policy.message_layers", policy.message_layers),
        DF_FIELD("policy.attention", policy.attention),
        DF_FIELD("policy.full_covariance", policy.full_covariance),
        DF_FIELD("policy.variance_floor", policy.variance_floor),
        DF_FIELD("policy.variance_bias_init", policy.variance_bias_init),
        DF_FIELD("policy.max_parents", policy.max_parents),
        DF_FIELD("train.env_steps_per_update", train.env_steps_per_update),
        DF_FIELD("train.batch_size", train.batch_size),
        DF_FIELD("train.learning_rate", train.learning_rate),
        DF_FIELD("train.final_lr_fraction", train.final_lr_fraction),
        DF_FIELD("train.huber_delta", train.huber_delta),
        DF_FIELD("train.penalty_weight", train.penalty_weight),
        DF_FIELD("train.total_updates", train.total_updates),
        DF_FIELD("train.eps_start", train.eps_start),
        DF_FIELD("train.eps_end", train.eps_end),
        DF_FIELD("train.eps_anneal_updates", train.eps_anneal_updates),
        DF_FIELD("train.minibatch_size", train.minibatch_size),
        DF_FIELD("train.seed", train.seed),
        size_field("train.buffer_capacity"),
        DF_FIELD("train.grad_clip", train.grad_clip),
        DF_FIELD("train.adam_beta1", train.adam_beta1),
        DF_FIELD("train.adam_beta2", train.adam_beta2),
        DF_FIELD("train.adam_epsilon", train.adam_epsilon),
        DF_FIELD("train.report_every", train.report_every),
        DF_FIELD("train.checkpoint_every", train.checkpoint_every),
        DF_FIELD("train.resume", resume),
        DF_FIELD("eval.num_samples", eval.num_samples),
        DF_FIELD("eval.slope_samples", eval.slope_samples),
        DF_FIELD("eval.seed", eval.seed),
        DF_FIELD("eval.beam_size", eval.estimator.beam_size),
        DF_FIELD("eval.mc_trajectories", eval.estimator.mc_trajectories),
        DF_FIELD("eval.estimator_seed", eval.estimator.seed),
        DF_FIELD("eval.compare_exact", compare_exact),
        DF_FIELD("eval.reference", reference),
        DF_FIELD("paths.out", out_dir),
        DF_FIELD("paths.data", data_path),
        DF_FIELD("paths.heldout", heldout_path),
        DF_FIELD("paths.ground_truth", ground_truth_path),
        DF_FIELD("paths.checkpoint", checkpoint_path),
    };
    return fields;
}

#undef DF_FIELD

const Field* find_field(const std::string& key) {
    for (const auto& f : schema())
        if (f.key == key) return &f;
    return nullptr;
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write " + path.string());
    os << j.dump(2) << '\n';
    if (!os) throw ConfigError("cannot write " + path.string());
}

struct RunPaths {
    fs::path dir;
    fs::path data, heldout, truth, checkpoint;
};

RunPaths paths_for(const ExperimentConfig& cfg, const fs::path& dir) {
    const auto pick = [&](const std::string& set, const char* name) { return set.empty() ? dir / name : fs::path(set); };
    return {dir, pick(cfg.data_path, "data.csv"), pick(cfg.heldout_path, "heldout.csv"),
            pick(cfg.ground_truth_path, "ground_truth.json"), pick(cfg.checkpoint_path, "checkpoint.json")};
}

nlohmann::json report_header(const std::string& command, const ExperimentConfig& cfg,
                             const std::vector<std::pair<std::string, fs::path>>& inputs) {
    nlohmann::json hashes = nlohmann::json::object();
    for (const auto& [name, path] : inputs) hashes[name] = {{"path", path.generic_string()}, {"sha1", file_blob_sha1(path)}};
    return {{"command", command},
            {"config", config_json(cfg)},
            {"config_sha1", git_blob_sha1(to_config_text(cfg))},
            {"inputs", hashes}};
}

Array load_data(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("dataset not found: " + path.string() + " (run generate first)");
    return read_dataset(path.string());
}

void require_oracle_range(const ExperimentConfig& cfg, int d) {
    if (d > 5) throw ConfigError("oracle cap: exact comparison needs d <= 5, got d = " + std::to_string(d));
    if (cfg.model.kind != CpdKind::LinearGaussian)
        throw ConfigError("oracle cap: exact comparison needs the linear-gaussian model");
}

Policy load_policy(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string() + " (run train first)");
    return Policy::load(path.string());
}

void write_feature_csv(const fs::path& path, const Array& exact, const Array& estimate) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write " + path.string());
    os << "i,j,exact,estimate\n" << std::setprecision(17);
    for (Eigen::Index i = 0; i < exact.rows(); ++i)
        for (Eigen::Index j = 0; j < exact.cols(); ++j)
            if (i != j) os << i << ',' << j << ',' << exact(i, j) << ',' << estimate(i, j) << '\n';
}

nlohmann::json comparison_json(const FeatureComparison& c) {
    return {{"rmse", c.rmse}, {"pearson", c.pearson ? nlohmann::json(*c.pearson) : nlohmann::json(nullptr)}};
}

/// Adds each numeric leaf of `j` to `acc` under its dotted path.
void collect_numbers(const nlohmann::json& j, const std::string& prefix, std::map<std::string, std::vector<double>>& acc) {
    if (j.is_object()) {
        for (const auto& [k, v] : j.items()) collect_numbers(v, prefix.empty() ? k : prefix + "." + k, acc);
    } else if (j.is_number()) {
        acc[prefix].push_back(j.get<double>());
    }
}

void write_summary(const fs::path& path, const std::string& command, const ExperimentConfig& cfg,
                   const std::vector<nlohmann::json>& per_run) {
    std::map<std::string, std::vector<double>> acc;
    for (const auto& r : per_run) collect_numbers(r, "", acc);
    nlohmann::json metrics = nlohmann::json::object();
    for (const auto& [k, v] : acc) metrics[k] = summarize(v);
    write_json(path, {{"command", command},
                      {"num_datasets", per_run.size()},
                      {"config", config_json(cfg)},
                      {"config_sha1", git_blob_sha1(to_config_text(cfg))},
                      {"metrics", metrics}});
}

}  // namespace

void ExperimentConfig::validate() const {
    try {
        data.validate();
        model.validate();
        policy.validate();
        train.validate();
        eval.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    if (num_datasets < 1) throw ConfigError("invalid config: data.num_datasets must be at least 1");
    if (num_datasets > 1 && !(data_path.empty() && heldout_path.empty() && ground_truth_path.empty() && checkpoint_path.empty()))
        throw ConfigError("invalid config: paths.data, paths.heldout, paths.ground_truth and paths.checkpoint "
                          "cannot be combined with data.num_datasets > 1");
    if (out_dir.empty()) throw ConfigError("invalid config: paths.out is empty");
}

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
    ExperimentConfig cfg;
    std::set<std::string> seen;
    std::istringstream is(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(is, raw)) {
        ++lineno;
        const auto where = origin + ":" + std::to_string(lineno) + ": ";
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'section.key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const Field* f = find_field(key);
        if (!f) throw ConfigError(where + "unknown key '" + key + "'");
        if (!seen.insert(key).second) throw ConfigError(where + "repeated key '" + key + "'");
        try {
            f->set(cfg, value);
        } catch (const std::exception& e) {
            throw ConfigError(where + key + ": " + e.what());
        }
    }
    if (!seen.count("model.kind")) cfg.model.kind = cfg.data.kind;
    if (!seen.count("model.obs_variance")) cfg.model.obs_variance = cfg.data.noise_variance;
    if (!seen.count("model.mlp_hidden")) cfg.model.mlp_hidden = cfg.data.mlp_hidden;
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::string& path) { return parse_config(read_file(path), path); }

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& f : schema()) out.push_back(f.key);
    return out;
}

std::string to_config_text(const ExperimentConfig& cfg) {
    std::string out;
    for (const auto& f : schema()) out += f.key + " = " + f.text(cfg) + "\n";
    return out;
}

nlohmann::json config_json(const ExperimentConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& f : schema()) {
        const auto dot = f.key.find('.');
        j[f.key.substr(0, dot)][f.key.substr(dot + 1)] = f.json(cfg);
    }
    return j;
}

std::string git_blob_sha1(const std::string& content) {
    const std::string header = "blob " + std::to_string(content.size()) + '\0';
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx) throw std::runtime_error("EVP_MD_CTX_new failed");
    const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                    EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                    EVP_DigestFinal_ex(ctx, digest, &len) == 1;
    EVP_MD_CTX_free(ctx);
    if (!ok) throw std::runtime_error("SHA-1 digest failed");
    std::ostringstream hex;
    for (unsigned int k = 0; k < len; ++k) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[k]);
    return hex.str();
}

std::string file_blob_sha1(const fs::path& path) { return git_blob_sha1(read_file(path)); }

ExperimentConfig resolve_config(const CommandOptions& opts) {
    if (opts.config_path.empty()) throw ConfigError("--config is required");
    ExperimentConfig cfg = load_config(opts.config_path);
    if (opts.seed) {
        cfg.data.seed = *opts.seed;
        cfg.train.seed = *opts.seed;
        cfg.eval.seed = *opts.seed;
        cfg.eval.estimator.seed = *opts.seed;
    }
    if (opts.out) cfg.out_dir = *opts.out;
    if (opts.threads < 1) throw ConfigError("--threads must be at least 1");
    cfg.eval.threads = opts.threads;
    cfg.validate();
    return cfg;
}

std::vector<fs::path> run_directories(const ExperimentConfig& cfg) {
    const fs::path root(cfg.out_dir);
    if (cfg.num_datasets == 1) return {root};
    std::vector<fs::path> out;
    for (int k = 1; k <= cfg.num_datasets; ++k) {
        char name[32];
        std::snprintf(name, sizeof name, "dataset_%02d", k);
        out.push_back(root / name);
    }
    return out;
}

void cmd_generate(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto dirs = run_directories(cfg);
    for (std::size_t k = 0; k < dirs.size(); ++k) {
        GenConfig gen = cfg.data;
        gen.seed = cfg.data.seed + k;
        const RunPaths p = paths_for(cfg, dirs[k]);
        std::error_code ec;
        fs::create_directories(p.dir, ec);
        if (ec) throw ConfigError("cannot create " + p.dir.string() + ": " + ec.message());
        const GeneratedProblem prob = generate_problem(gen);
        write_dataset(p.data.string(), prob.data.observations);
        if (prob.data.heldout) write_dataset(p.heldout.string(), *prob.data.heldout);
        write_ground_truth(p.truth.string(), prob.truth);
        std::vector<std::pair<std::string, fs::path>> outputs = {{"data", p.data}, {"ground_truth", p.truth}};
        if (prob.data.heldout) outputs.emplace_back("heldout", p.heldout);
        nlohmann::json report = report_header("generate", cfg, {});
        report["seed"] = gen.seed;
        report["num_edges"] = prob.truth.graph.num_edges();
        nlohmann::json files = nlohmann::json::object();
        for (const auto& [name, path] : outputs) files[name] = {{"path", path.generic_string()}, {"sha1", file_blob_sha1(path)}};
        report["outputs"] = files;
        write_json(p.dir / "generate_report.json", report);
        spdlog::info("generated {} (seed {}, {} edges)", p.dir.string(), gen.seed, prob.truth.graph.num_edges());
    }
}

void cmd_train(const ExperimentConfig& cfg) {
    cfg.validate();
    std::vector<nlohmann::json> finals;
    for (const auto& dir : run_directories(cfg)) {
        const RunPaths p = paths_for(cfg, dir);
        const Array data = load_data(p.data);
        fs::create_directories(p.dir);
        TrainerConfig tc = cfg.train;
        tc.checkpoint_path = (p.dir / "trainer_state.json").string();
        tc.history_path = (p.dir / "history.csv").string();
        tc.dump_path = (p.dir / "divergence_dump.json").string();

        std::optional<TrainerState> state;
        if (cfg.resume && fs::exists(tc.checkpoint_path)) {
            state = TrainerState::load(tc.checkpoint_path);
            if (state->policy.num_nodes() != data.cols())
                throw ConfigError("trainer state in " + tc.checkpoint_path + " does not match the dataset width");
            spdlog::info("resuming {} from update {}", p.dir.string(), state->update);
        } else {
            state = initial_trainer_state(static_cast<int>(data.cols()), cfg.model, cfg.policy, tc);
        }
        train(*state, data, tc, [&](const LossReport& r) {
            spdlog::info("update {} loss {:.6g} |delta| {:.6g} p_stop(G0) {:.4f}", r.update, r.loss, r.mean_abs_residual,
                         r.p_stop_g0);
        });
        state->save(tc.checkpoint_path);
        state->policy.save(p.checkpoint.string());
        write_history_csv(tc.history_path, state->history);

        nlohmann::json report = report_header("train", cfg, {{"data", p.data}});
        report["updates"] = state->update;
        report["final"] = state->history.empty() ? nlohmann::json(nullptr) : to_json(state->history.back());
        report["outputs"] = {{"checkpoint", {{"path", p.checkpoint.generic_string()}, {"sha1", file_blob_sha1(p.checkpoint)}}},
                             {"history", {{"path", fs::path(tc.history_path).generic_string()}}}};
        write_json(p.dir / "train_report.json", report);
        finals.push_back(report["final"]);
        spdlog::info("trained {} for {} updates", p.dir.string(), state->update);
    }
    if (cfg.num_datasets > 1) write_summary(fs::path(cfg.out_dir) / "train_summary.json", "train", cfg, finals);
}

void cmd_evaluate(const ExperimentConfig& cfg) {
    cfg.validate();
    std::vector<nlohmann::json> runs;
    for (const auto& dir : run_directories(cfg)) {
        const RunPaths p = paths_for(cfg, dir);
        const Policy policy = load_policy(p.checkpoint);
        const Array data = load_data(p.data);
        if (policy.num_nodes() != data.cols()) throw ConfigError("checkpoint and dataset disagree on the node count");

        std::vector<std::pair<std::string, fs::path>> inputs = {{"checkpoint", p.checkpoint}, {"data", p.data}};
        EvaluationInputs in;
        in.data = &data;
        std::optional<Array> heldout;
        if (fs::exists(p.heldout)) {
            heldout = read_dataset(p.heldout.string());
            in.heldout = &*heldout;
            inputs.emplace_back("heldout", p.heldout);
        }
        std::optional<GroundTruth> truth;
        if (fs::exists(p.truth)) {
            truth = read_ground_truth(p.truth.string());
            in.ground_truth = &truth->graph;
            inputs.emplace_back("ground_truth", p.truth);
        }
        std::optional<ExactPosterior> exact;
        if (cfg.compare_exact) {
            require_oracle_range(cfg, static_cast<int>(data.cols()));
            exact = exact_graph_posterior(data, policy.model());
            in.exact = &*exact;
        }
        in.points_csv_path = (p.dir / "scatter.csv").string();

        const MetricsReport m = evaluate_policy(policy, in, cfg.eval);
        nlohmann::json metrics = to_json(m);
        metrics["points_csv_path"] = fs::path(m.points_csv_path).generic_string();
        nlohmann::json report = report_header("evaluate", cfg, inputs);
        report["metrics"] = metrics;
        write_json(p.dir / "metrics.json", report);
        metrics.erase("points_csv_path");
        runs.push_back(metrics);
        spdlog::info("evaluated {} on {} samples", p.dir.string(), m.num_samples);
    }
    if (cfg.num_datasets > 1) write_summary(fs::path(cfg.out_dir) / "metrics_summary.json", "evaluate", cfg, runs);
}

void cmd_compare_exact(const ExperimentConfig& cfg) {
    cfg.validate();
    std::vector<nlohmann::json> runs;
    for (const auto& dir : run_directories(cfg)) {
        const RunPaths p = paths_for(cfg, dir);
        const Array data = load_data(p.data);
        require_oracle_range(cfg, static_cast<int>(data.cols()));
        std::vector<std::pair<std::string, fs::path>> inputs = {{"data", p.data}};

        const ExactPosterior exact = exact_graph_posterior(data, cfg.model);
        const FeatureMatrices truth = exact_features(exact);
        FeatureMatrices est;
        std::optional<SampleBag> bag;
        Rng rng(cfg.eval.seed);
        if (cfg.reference == CompareReference::Policy) {
            const Policy policy = load_policy(p.checkpoint);
            if (policy.num_nodes() != data.cols()) throw ConfigError("checkpoint and dataset disagree on the node count");
            inputs.emplace_back("checkpoint", p.checkpoint);
            bag = sample_bag(policy, cfg.eval.num_samples, rng);
            est = feature_estimates(*bag);
        } else {
            est = truth;
            SampleBag b;
            for (int k = 0; k < cfg.eval.num_samples; ++k) {
                double u = rng.uniform();
                std::size_t m = 0;
                while (m + 1 < exact.dags.size() && (u -= std::exp(exact.log_posterior[m])) > 0.0) ++m;
                b.add(exact.dags[m], exact.sample_theta(exact.dags[m], rng));
            }
            bag = std::move(b);
        }

        const FeatureScores scores{rmse_and_pearson(est.edge, truth.edge), rmse_and_pearson(est.path, truth.path),
                                   rmse_and_pearson(est.markov, truth.markov)};
        write_feature_csv(p.dir / "edge_features.csv", truth.edge, est.edge);
        write_feature_csv(p.dir / "path_features.csv", truth.path, est.path);
        write_feature_csv(p.dir / "markov_features.csv", truth.markov, est.markov);

        nlohmann::json metrics = {{"edge", comparison_json(scores.edge)},
                                  {"path", comparison_json(scores.path)},
                                  {"markov", comparison_json(scores.markov)},
                                  {"cross_entropy", cross_entropy_theta(*bag, exact)}};
        nlohmann::json report = report_header("compare-exact", cfg, inputs);
        report["reference"] = to_string(cfg.reference);
        report["num_samples"] = bag->size();
        report["num_dags"] = exact.dags.size();
        report["metrics"] = metrics;
        report["outputs"] = {"edge_features.csv", "path_features.csv", "markov_features.csv"};
        write_json(p.dir / "compare_exact.json", report);
        runs.push_back(metrics);
        spdlog::info("compared {}: edge rmse {:.4g}", p.dir.string(), scores.edge.rmse);
    }
    if (cfg.num_datasets > 1) write_summary(fs::path(cfg.out_dir) / "compare_exact_summary.json", "compare-exact", cfg, runs);
}

nlohmann::json summarize(const std::vector<double>& values) {
    const auto n = values.size();
    if (n == 0) return {{"n", 0}, {"mean", nullptr}, {"std", nullptr}, {"ci95_low", nullptr}, {"ci95_high", nullptr}};
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(n);
    if (n < 2) return {{"n", n}, {"mean", mean}, {"std", nullptr}, {"ci95_low", nullptr}, {"ci95_high", nullptr}};
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    const boost::math::students_t dist(static_cast<double>(n - 1));
    const double half = boost::math::quantile(dist, 0.975) * sd / std::sqrt(static_cast<double>(n));
    return {{"n", n}, {"mean", mean}, {"std", sd}, {"ci95_low", mean - half}, {"ci95_high", mean + half}};
}

int run_command(const std::string& command, const CommandOptions& opts) {
    try {
        const ExperimentConfig cfg = resolve_config(opts);
        if (command == "generate")
            cmd_generate(cfg);
        else if (command == "train")
            cmd_train(cfg);
        else if (command == "evaluate")
            cmd_evaluate(cfg);
        else if (command == "compare-exact")
            cmd_compare_exact(cfg);
        else
            throw ConfigError("unknown command '" + command + "'");
        return 0;
    } catch (const TrainingDiverged& e) {
        spdlog::error("numerical failure: {}", e.what());
        return 3;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 2;
    }
}

}  // namespace dagforge
