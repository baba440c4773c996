#include "dagforge/cpd_models.hpp"

#include <cmath>
#include <stdexcept>

namespace dagforge {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

void check_data(const DagState& g, const Array& data) {
    if (data.cols() != g.num_nodes()) throw std::invalid_argument("data column count does not match the graph");
}

// Input matrix with the non-parent columns of node i zeroed.
Array masked_inputs(const DagState& g, const Array& data, int i) {
    Array m = Array::Zero(data.rows(), data.cols());
    for (int p : g.parents(i)) m.col(p) = data.col(p);
    return m;
}

Vector node_means(const DagState& g, const ParamSet& theta, const Array& data, const ModelConfig& cfg, int i) {
    const auto& block = theta.blocks[static_cast<std::size_t>(i)];
    if (cfg.kind == CpdKind::LinearGaussian) {
        Vector mu = Vector::Zero(data.rows());
        for (int p : g.parents(i)) mu += block[p] * data.col(p);
        return mu;
    }
    return mlp_mean(block, masked_inputs(g, data, i), cfg.mlp_hidden);
}

}  // namespace

std::string to_string(CpdKind kind) { return kind == CpdKind::LinearGaussian ? "linear-gaussian" : "mlp-gaussian"; }

CpdKind parse_cpd_kind(const std::string& name) {
    if (name == "linear-gaussian" || name == "linear") return CpdKind::LinearGaussian;
    if (name == "mlp-gaussian" || name == "mlp") return CpdKind::MlpGaussian;
    throw std::invalid_argument("unknown model kind: " + name);
}

void ModelConfig::validate() const {
    if (!(obs_variance > 0.0) || !std::isfinite(obs_variance)) throw std::invalid_argument("obs_variance must be > 0");
    if (!(prior_variance > 0.0) || !std::isfinite(prior_variance))
        throw std::invalid_argument("prior_variance must be > 0");
    if (!std::isfinite(prior_mean)) throw std::invalid_argument("prior_mean must be finite");
    if (mlp_hidden < 1) throw std::invalid_argument("mlp_hidden must be at least 1");
    if (!(graph_edge_penalty >= 0.0)) throw std::invalid_argument("graph_edge_penalty must be >= 0");
}

nlohmann::json to_json(const ModelConfig& cfg) {
    return {{"kind", to_string(cfg.kind)},
            {"obs_variance", cfg.obs_variance},
            {"prior_mean", cfg.prior_mean},
            {"prior_variance", cfg.prior_variance},
            {"mlp_hidden", cfg.mlp_hidden},
            {"graph_edge_penalty", cfg.graph_edge_penalty}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.kind = parse_cpd_kind(j.at("kind").get<std::string>());
    cfg.obs_variance = j.at("obs_variance").get<double>();
    cfg.prior_mean = j.at("prior_mean").get<double>();
    cfg.prior_variance = j.at("prior_variance").get<double>();
    cfg.mlp_hidden = j.at("mlp_hidden").get<int>();
    cfg.graph_edge_penalty = j.value("graph_edge_penalty", 0.0);
    cfg.validate();
    return cfg;
}

Eigen::Index ParamSet::total_size() const {
    Eigen::Index n = 0;
    for (const auto& b : blocks) n += b.size();
    return n;
}

Array ParamSet::as_rows() const {
    if (blocks.empty()) return {};
    Array out(static_cast<Eigen::Index>(blocks.size()), blocks.front().size());
    for (std::size_t i = 0; i < blocks.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = blocks[i].transpose();
    return out;
}

ParamSet ParamSet::from_rows(const Array& rows) {
    ParamSet p;
    for (Eigen::Index i = 0; i < rows.rows(); ++i) p.blocks.emplace_back(rows.row(i).transpose());
    return p;
}

bool ParamSet::operator==(const ParamSet& other) const {
    if (blocks.size() != other.blocks.size()) return false;
    for (std::size_t i = 0; i < blocks.size(); ++i)
        if (blocks[i].size() != other.blocks[i].size() || blocks[i] != other.blocks[i]) return false;
    return true;
}

int param_block_size(const ModelConfig& cfg, int d) {
    if (cfg.kind == CpdKind::LinearGaussian) return d;
    return cfg.mlp_hidden * d + 2 * cfg.mlp_hidden + 1;
}

Mask active_coordinates(const DagState& g, const ModelConfig& cfg) {
    const int d = g.num_nodes();
    if (cfg.kind == CpdKind::MlpGaussian) return Mask::Constant(d, param_block_size(cfg, d), true);
    return g.adjacency().transpose();
}

ParamSet zero_params(const ModelConfig& cfg, int d) {
    ParamSet p;
    p.blocks.assign(static_cast<std::size_t>(d), Vector::Zero(param_block_size(cfg, d)));
    return p;
}

Vector mlp_mean(const Vector& block, const Array& masked_inputs, int hidden) {
    const auto d = masked_inputs.cols();
    if (block.size() != hidden * d + 2 * hidden + 1) throw std::invalid_argument("mlp block size mismatch");
    const Eigen::Map<const Array> w1(block.data(), hidden, d);
    const auto b1 = block.segment(hidden * d, hidden);
    const auto w2 = block.segment(hidden * d + hidden, hidden);
    const double b2 = block[hidden * d + 2 * hidden];
    Array h = masked_inputs * w1.transpose();
    h.rowwise() += b1.transpose();
    h = h.cwiseMax(0.0);
    Vector out = h * w2;
    out.array() += b2;
    return out;
}

void check_layout(const DagState& g, const ParamSet& theta, const ModelConfig& cfg) {
    const int d = g.num_nodes();
    if (theta.num_nodes() != d) throw std::invalid_argument("parameter set has the wrong number of nodes");
    const int p = param_block_size(cfg, d);
    for (const auto& b : theta.blocks)
        if (b.size() != p) throw std::invalid_argument("parameter block has the wrong size");
    if (cfg.kind != CpdKind::LinearGaussian) return;
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            if (!g.has_edge(j, i) && theta.blocks[static_cast<std::size_t>(i)][j] != 0.0)
                throw std::invalid_argument("nonzero coefficient on a non-parent coordinate");
}

Vector observation_log_likelihoods(const DagState& g, const ParamSet& theta, const Array& data, const ModelConfig& cfg) {
    check_data(g, data);
    check_layout(g, theta, cfg);
    const double s2 = cfg.obs_variance;
    const double c = -0.5 * (kLog2Pi + std::log(s2));
    Vector out = Vector::Constant(data.rows(), c * g.num_nodes());
    for (int i = 0; i < g.num_nodes(); ++i) {
        const Vector r = data.col(i) - node_means(g, theta, data, cfg, i);
        out.array() -= 0.5 * r.array().square() / s2;
    }
    return out;
}

double log_likelihood(const DagState& g, const ParamSet& theta, const Array& data, const ModelConfig& cfg) {
    return observation_log_likelihoods(g, theta, data, cfg).sum();
}

double log_prior_params(const DagState& g, const ParamSet& theta, const ModelConfig& cfg) {
    check_layout(g, theta, cfg);
    const Mask active = active_coordinates(g, cfg);
    const double c = -0.5 * (kLog2Pi + std::log(cfg.prior_variance));
    double lp = 0.0;
    for (int i = 0; i < g.num_nodes(); ++i) {
        const auto& b = theta.blocks[static_cast<std::size_t>(i)];
        for (Eigen::Index k = 0; k < b.size(); ++k) {
            if (!active(i, k)) continue;
            const double z = b[k] - cfg.prior_mean;
            lp += c - 0.5 * z * z / cfg.prior_variance;
        }
    }
    return lp;
}

double log_prior_graph(const DagState& g, const ModelConfig& cfg) { return -cfg.graph_edge_penalty * g.num_edges(); }

double log_reward(const DagState& g, const ParamSet& theta, const Array& data, const ModelConfig& cfg) {
    return log_likelihood(g, theta, data, cfg) + log_prior_params(g, theta, cfg) + log_prior_graph(g, cfg);
}

double minibatch_log_reward(const DagState& g, const ParamSet& theta, const Array& batch, int total_rows,
                            const ModelConfig& cfg) {
    if (batch.rows() == 0) throw std::invalid_argument("minibatch_log_reward: empty batch");
    if (batch.rows() > total_rows) throw std::invalid_argument("minibatch_log_reward: batch larger than dataset");
    const double scale = static_cast<double>(total_rows) / static_cast<double>(batch.rows());
    return scale * log_likelihood(g, theta, batch, cfg) + log_prior_params(g, theta, cfg) + log_prior_graph(g, cfg);
}

ParamSet grad_theta_log_reward(const DagState& g, const ParamSet& theta, const Array& data, const ModelConfig& cfg,
                               double likelihood_scale) {
    check_data(g, data);
    check_layout(g, theta, cfg);
    const int d = g.num_nodes();
    const double s2 = cfg.obs_variance;
    ParamSet grad = zero_params(cfg, d);
    if (cfg.kind == CpdKind::LinearGaussian) {
        for (int i = 0; i < d; ++i) {
            const auto& b = theta.blocks[static_cast<std::size_t>(i)];
            const Vector r = data.col(i) - node_means(g, theta, data, cfg, i);
            for (int p : g.parents(i)) {
                grad.blocks[static_cast<std::size_t>(i)][p] =
                    likelihood_scale * data.col(p).dot(r) / s2 - (b[p] - cfg.prior_mean) / cfg.prior_variance;
            }
        }
        return grad;
    }
    const int h = cfg.mlp_hidden;
    for (int i = 0; i < d; ++i) {
        const auto& b = theta.blocks[static_cast<std::size_t>(i)];
        Tape t;
        const Var th = t.input(Array(b.transpose()));
        const Var xm = t.constant(masked_inputs(g, data, i));
        const Var target = t.constant(Array(data.col(i)));
        const Var w1 = reshape(slice_cols(th, 0, h * d), h, d);
        const Var b1 = slice_cols(th, h * d, h);
        const Var w2 = reshape(slice_cols(th, h * d + h, h), h, 1);
        const Var b2 = slice_cols(th, h * d + 2 * h, 1);
        const Var hid = relu(add_row(matmul(xm, transpose(w1)), b1));
        const Var mu = add_row(matmul(hid, w2), b2);
        const Var ll = scale(sum(square(sub(target, mu))), -0.5 * likelihood_scale / s2);
        const Var lp = scale(sum(square(add_scalar(th, -cfg.prior_mean))), -0.5 / cfg.prior_variance);
        const std::vector<Var> ins{th};
        grad.blocks[static_cast<std::size_t>(i)] = t.grad(add(ll, lp), ins)[0].row(0).transpose();
    }
    return grad;
}

}  // namespace dagforge
