#include "dagforge/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace dagforge {

void GenConfig::validate() const {
    if (num_nodes < 1) throw std::invalid_argument("num_nodes must be at least 1");
    if (!(expected_edges_per_node >= 0.0)) throw std::invalid_argument("expected_edges_per_node must be >= 0");
    if (num_samples < 0 || num_heldout < 0) throw std::invalid_argument("sample counts must be >= 0");
    if (!(noise_variance > 0.0)) throw std::invalid_argument("noise_variance must be > 0");
    if (mlp_hidden < 1) throw std::invalid_argument("mlp_hidden must be at least 1");
}

double GenConfig::edge_probability() const {
    const double pairs = 0.5 * num_nodes * (num_nodes - 1);
    if (pairs <= 0.0) return 0.0;
    return std::clamp(expected_edges_per_node * num_nodes / pairs, 0.0, 1.0);
}

ModelConfig GenConfig::model_config() const {
    ModelConfig m;
    m.kind = kind;
    m.obs_variance = noise_variance;
    m.mlp_hidden = mlp_hidden;
    return m;
}

nlohmann::json to_json(const GenConfig& c) {
    return {{"num_nodes", c.num_nodes},       {"expected_edges_per_node", c.expected_edges_per_node},
            {"num_samples", c.num_samples},   {"num_heldout", c.num_heldout},
            {"kind", to_string(c.kind)},      {"noise_variance", c.noise_variance},
            {"mlp_hidden", c.mlp_hidden},     {"seed", c.seed}};
}

GenConfig gen_config_from_json(const nlohmann::json& j) {
    GenConfig c;
    c.num_nodes = j.at("num_nodes").get<int>();
    c.expected_edges_per_node = j.at("expected_edges_per_node").get<double>();
    c.num_samples = j.at("num_samples").get<int>();
    c.num_heldout = j.at("num_heldout").get<int>();
    c.kind = parse_cpd_kind(j.at("kind").get<std::string>());
    c.noise_variance = j.at("noise_variance").get<double>();
    c.mlp_hidden = j.at("mlp_hidden").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
}

DagState sample_er_dag(int d, double p, Rng& rng) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("edge probability must be in [0, 1]");
    std::vector<int> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t a = order.size(); a > 1; --a) std::swap(order[a - 1], order[rng.index(a)]);
    Mask adj = Mask::Constant(d, d, false);
    for (int a = 0; a < d; ++a)
        for (int b = a + 1; b < d; ++b)
            if (rng.uniform() < p) adj(order[static_cast<std::size_t>(a)], order[static_cast<std::size_t>(b)]) = true;
    return DagState::from_adjacency(adj);
}

DagState sample_er_dag(const GenConfig& cfg, Rng& rng) {
    cfg.validate();
    return sample_er_dag(cfg.num_nodes, cfg.edge_probability(), rng);
}

ParamSet sample_ground_truth_params(const DagState& g, const GenConfig& cfg, Rng& rng) {
    const ModelConfig mc = cfg.model_config();
    ParamSet theta = zero_params(mc, g.num_nodes());
    const Mask active = active_coordinates(g, mc);
    for (int i = 0; i < g.num_nodes(); ++i)
        for (Eigen::Index k = 0; k < active.cols(); ++k)
            if (active(i, k)) theta.blocks[static_cast<std::size_t>(i)][k] = rng.normal();
    return theta;
}

Array ancestral_sample(const DagState& g, const ParamSet& theta, const GenConfig& cfg, int n, Rng& rng) {
    const ModelConfig mc = cfg.model_config();
    check_layout(g, theta, mc);
    const int d = g.num_nodes();
    // Kahn order on the adjacency.
    std::vector<int> indeg(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) indeg[static_cast<std::size_t>(j)] = g.in_degree(j);
    std::vector<int> order;
    for (int j = 0; j < d; ++j)
        if (indeg[static_cast<std::size_t>(j)] == 0) order.push_back(j);
    for (std::size_t k = 0; k < order.size(); ++k)
        for (int c : g.children(order[k]))
            if (--indeg[static_cast<std::size_t>(c)] == 0) order.push_back(c);

    const double sd = std::sqrt(cfg.noise_variance);
    Array x = Array::Zero(n, d);
    for (int i : order) {
        const auto& block = theta.blocks[static_cast<std::size_t>(i)];
        Vector mean = Vector::Zero(n);
        if (mc.kind == CpdKind::LinearGaussian) {
            for (int p : g.parents(i)) mean += block[p] * x.col(p);
        } else {
            Array masked = Array::Zero(n, d);
            for (int p : g.parents(i)) masked.col(p) = x.col(p);
            mean = mlp_mean(block, masked, mc.mlp_hidden);
        }
        for (int r = 0; r < n; ++r) x(r, i) = mean[r] + sd * rng.normal();
    }
    return x;
}

GeneratedProblem generate_problem(const GenConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    GeneratedProblem out;
    out.truth.cfg = cfg;
    out.truth.graph = sample_er_dag(cfg, rng);
    out.truth.theta = sample_ground_truth_params(out.truth.graph, cfg, rng);
    out.data.observations = ancestral_sample(out.truth.graph, out.truth.theta, cfg, cfg.num_samples, rng);
    if (cfg.num_heldout > 0) out.data.heldout = ancestral_sample(out.truth.graph, out.truth.theta, cfg, cfg.num_heldout, rng);
    return out;
}

nlohmann::json to_json(const GroundTruth& t) {
    const int d = t.graph.num_nodes();
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(d), std::vector<int>(static_cast<std::size_t>(d), 0));
    for (const auto& [i, j] : t.graph.edges()) adj[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = 1;
    std::vector<std::vector<double>> theta;
    for (const auto& b : t.theta.blocks) theta.emplace_back(b.data(), b.data() + b.size());
    return {{"adjacency", adj}, {"theta", theta}, {"config", to_json(t.cfg)}, {"seed", t.cfg.seed}};
}

GroundTruth ground_truth_from_json(const nlohmann::json& j) {
    GroundTruth t;
    t.cfg = gen_config_from_json(j.at("config"));
    const auto adj = j.at("adjacency").get<std::vector<std::vector<int>>>();
    const auto d = static_cast<Eigen::Index>(adj.size());
    Mask m(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
        if (static_cast<Eigen::Index>(adj[static_cast<std::size_t>(i)].size()) != d) throw std::invalid_argument("adjacency is not square");
        for (Eigen::Index k = 0; k < d; ++k) m(i, k) = adj[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] != 0;
    }
    t.graph = DagState::from_adjacency(m);
    for (const auto& row : j.at("theta").get<std::vector<std::vector<double>>>())
        t.theta.blocks.push_back(Eigen::Map<const Vector>(row.data(), static_cast<Eigen::Index>(row.size())));
    check_layout(t.graph, t.theta, t.cfg.model_config());
    return t;
}

void write_ground_truth(const std::string& path, const GroundTruth& truth) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << to_json(truth).dump(2) << '\n';
}

GroundTruth read_ground_truth(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    return ground_truth_from_json(nlohmann::json::parse(is));
}

void write_dataset(const std::string& path, const Array& observations) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    for (Eigen::Index c = 0; c < observations.cols(); ++c) os << (c ? "," : "") << 'X' << c + 1;
    os << '\n';
    char buf[32];
    for (Eigen::Index r = 0; r < observations.rows(); ++r) {
        for (Eigen::Index c = 0; c < observations.cols(); ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", observations(r, c));
            os << (c ? "," : "") << buf;
        }
        os << '\n';
    }
    if (!os) throw std::runtime_error("cannot write " + path);
}

namespace {

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::string trim(std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
    std::size_t a = 0;
    while (a < s.size() && (s[a] == ' ' || s[a] == '\t')) ++a;
    return s.substr(a);
}

}  // namespace

Array read_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    std::string line;
    int lineno = 1;
    if (!std::getline(is, line)) throw DatasetParseError(path, 1, "missing header");
    const auto header = split(trim(line));
    if (header.empty()) throw DatasetParseError(path, 1, "empty header");
    for (std::size_t c = 0; c < header.size(); ++c)
        if (trim(header[c]) != "X" + std::to_string(c + 1))
            throw DatasetParseError(path, 1, "expected header column X" + std::to_string(c + 1) + ", got '" + header[c] + "'");
    const std::size_t d = header.size();
    std::vector<double> values;
    Eigen::Index rows = 0;
    while (std::getline(is, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty()) continue;
        const auto cells = split(line);
        if (cells.size() != d)
            throw DatasetParseError(path, lineno, "expected " + std::to_string(d) + " fields, got " + std::to_string(cells.size()));
        for (const auto& raw : cells) {
            const std::string cell = trim(raw);
            double v = 0.0;
            const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty())
                throw DatasetParseError(path, lineno, "not a number: '" + cell + "'");
            if (!std::isfinite(v)) throw DatasetParseError(path, lineno, "non-finite value");
            values.push_back(v);
        }
        ++rows;
    }
    return Eigen::Map<const Array>(values.data(), rows, static_cast<Eigen::Index>(d));
}

Dataset read_dataset(const std::string& path, const std::string& heldout_path) {
    Dataset ds;
    ds.observations = read_dataset(path);
    if (!heldout_path.empty()) {
        ds.heldout = read_dataset(heldout_path);
        if (ds.heldout->cols() != ds.observations.cols())
            throw std::invalid_argument("held-out data has a different column count than " + path);
    }
    return ds;
}

}  // namespace dagforge
