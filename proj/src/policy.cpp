#include "dagforge/policy.hpp"

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>

namespace dagforge {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr int kCheckpointVersion = 1;

Array glorot(Rng& rng, int fan_in, int fan_out, double gain = 1.0) {
    const double limit = gain * std::sqrt(6.0 / (fan_in + fan_out));
    Array a(fan_in, fan_out);
    for (Eigen::Index k = 0; k < a.size(); ++k) a.data()[k] = limit * (2.0 * rng.uniform() - 1.0);
    return a;
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

// Lower-triangular factor of one node's active block.
Eigen::MatrixXd active_factor(const Array& factor, int node, const std::vector<Eigen::Index>& idx, Eigen::Index p) {
    const auto n = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index c = 0; c <= a; ++c) l(a, c) = factor(node, idx[static_cast<std::size_t>(a)] * p + idx[static_cast<std::size_t>(c)]);
    return l;
}

std::vector<Eigen::Index> active_indices(const Mask& active, int node) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index k = 0; k < active.cols(); ++k)
        if (active(node, k)) idx.push_back(k);
    return idx;
}

nlohmann::json policy_config_json(const PolicyConfig& c) {
    return {{"width", c.width},
            {"message_layers", c.message_layers},
            {"attention", c.attention},
            {"full_covariance", c.full_covariance},
            {"variance_floor", c.variance_floor},
            {"variance_bias_init", c.variance_bias_init},
            {"max_parents", c.max_parents}};
}

PolicyConfig policy_config_from_json(const nlohmann::json& j) {
    PolicyConfig c;
    c.width = j.at("width").get<int>();
    c.message_layers = j.at("message_layers").get<int>();
    c.attention = j.at("attention").get<bool>();
    c.full_covariance = j.at("full_covariance").get<bool>();
    c.variance_floor = j.at("variance_floor").get<double>();
    c.variance_bias_init = j.at("variance_bias_init").get<double>();
    c.max_parents = j.at("max_parents").get<int>();
    return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// ForwardDistribution
// ---------------------------------------------------------------------------

double ForwardDistribution::theta_log_density(const ParamSet& theta, const Mask& active) const {
    const auto d = theta_mean.rows();
    const auto p = theta_mean.cols();
    if (theta.num_nodes() != d || active.rows() != d || active.cols() != p)
        throw std::invalid_argument("theta layout does not match the policy heads");
    double lp = 0.0;
    for (int i = 0; i < d; ++i) {
        const auto& b = theta.blocks[static_cast<std::size_t>(i)];
        if (b.size() != p) throw std::invalid_argument("theta layout does not match the policy heads");
        const auto idx = active_indices(active, i);
        if (idx.empty()) continue;
        if (full_covariance()) {
            Eigen::VectorXd x(static_cast<Eigen::Index>(idx.size())), m(static_cast<Eigen::Index>(idx.size()));
            for (std::size_t a = 0; a < idx.size(); ++a) {
                x[static_cast<Eigen::Index>(a)] = b[idx[a]];
                m[static_cast<Eigen::Index>(a)] = theta_mean(i, idx[a]);
            }
            lp += gaussian_full_log_density(x, m, active_factor(theta_factor, i, idx, p));
        } else {
            for (Eigen::Index k : idx) {
                const double v = theta_var(i, k);
                const double r = b[k] - theta_mean(i, k);
                lp += -0.5 * (kLog2Pi + std::log(v)) - 0.5 * r * r / v;
            }
        }
    }
    return lp;
}

ParamSet ForwardDistribution::sample_theta(const Mask& active, Rng& rng) const {
    const auto d = theta_mean.rows();
    const auto p = theta_mean.cols();
    ParamSet theta;
    theta.blocks.assign(static_cast<std::size_t>(d), Vector::Zero(p));
    for (int i = 0; i < d; ++i) {
        const auto idx = active_indices(active, i);
        auto& b = theta.blocks[static_cast<std::size_t>(i)];
        if (full_covariance()) {
            const Eigen::MatrixXd l = active_factor(theta_factor, i, idx, p);
            Eigen::VectorXd z(static_cast<Eigen::Index>(idx.size()));
            for (Eigen::Index a = 0; a < z.size(); ++a) z[a] = rng.normal();
            const Eigen::VectorXd x = l * z;
            for (std::size_t a = 0; a < idx.size(); ++a) b[idx[a]] = theta_mean(i, idx[a]) + x[static_cast<Eigen::Index>(a)];
        } else {
            for (Eigen::Index k : idx) b[k] = theta_mean(i, k) + std::sqrt(theta_var(i, k)) * rng.normal();
        }
    }
    return theta;
}

std::vector<ForwardDistribution> ForwardModel::forward_many(std::span<const DagState> graphs) const {
    std::vector<ForwardDistribution> out;
    out.reserve(graphs.size());
    for (const auto& g : graphs) out.push_back(forward(g));
    return out;
}

double log_pf_edge(const ForwardModel& model, const DagState& g, const DagState& next) {
    if (backward_prob(g, next) <= 0.0) throw std::invalid_argument("illegal transition");
    const ActionMask mask = action_mask(g, model.max_parents());
    for (const auto& [i, j] : next.edges()) {
        if (g.has_edge(i, j)) continue;
        if (!mask(i, j)) throw std::invalid_argument("illegal transition");
        const ForwardDistribution f = model.forward(g);
        const double e = f.edge_log_probs(i, j);
        if (is_masked_log_prob(e) || is_masked_log_prob(f.log_p_continue)) return kMaskedLogProb;
        return f.log_p_continue + e;
    }
    throw std::invalid_argument("illegal transition");
}

double log_pf_theta(const ForwardModel& model, const DagState& g, const ParamSet& theta) {
    check_layout(g, theta, model.model());
    const ForwardDistribution f = model.forward(g);
    return f.log_p_stop + f.theta_log_density(theta, active_coordinates(g, model.model()));
}

std::optional<std::pair<int, int>> sample_action(const DagState& g, const ForwardDistribution& f, int max_parents,
                                                 Rng& rng, double eps) {
    const int d = g.num_nodes();
    const ActionMask mask = action_mask(g, max_parents);
    if (!mask.any()) return std::nullopt;
    if (eps > 0.0 && rng.uniform() < eps) {
        const std::size_t pick = rng.index(static_cast<std::size_t>(mask.count()) + 1);
        if (pick == 0) return std::nullopt;
        std::size_t seen = 0;
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                if (mask(i, j) && ++seen == pick) return std::make_pair(i, j);
    }
    if (rng.uniform() < f.p_stop) return std::nullopt;
    double u = rng.uniform();
    std::pair<int, int> last{-1, -1};
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
            if (!mask(i, j)) continue;
            last = {i, j};
            u -= std::exp(f.edge_log_probs(i, j));
            if (u < 0.0) return last;
        }
    }
    return last;
}

Trajectory sample_trajectory(const ForwardModel& model, Rng& rng, double exploration_eps) {
    if (!(exploration_eps >= 0.0 && exploration_eps < 1.0 + 1e-15))
        throw std::invalid_argument("exploration_eps must be in [0, 1]");
    Trajectory t{{empty_state(model.num_nodes())}};
    while (true) {
        const DagState& g = t.states.back();
        const auto a = sample_action(g, model.forward(g), model.max_parents(), rng, exploration_eps);
        if (!a) return t;
        t.states.push_back(apply_add_edge(g, a->first, a->second));
    }
}

std::vector<Trajectory> sample_trajectories(const ForwardModel& model, int count, Rng& rng, double exploration_eps) {
    std::vector<Trajectory> out(static_cast<std::size_t>(count), Trajectory{{empty_state(model.num_nodes())}});
    std::vector<std::size_t> live(static_cast<std::size_t>(count));
    for (std::size_t k = 0; k < live.size(); ++k) live[k] = k;
    while (!live.empty()) {
        std::vector<DagState> states;
        for (std::size_t k : live) states.push_back(out[k].states.back());
        const auto dists = model.forward_many(states);
        std::vector<std::size_t> next;
        for (std::size_t n = 0; n < live.size(); ++n) {
            const auto a = sample_action(states[n], dists[n], model.max_parents(), rng, exploration_eps);
            if (!a) continue;
            out[live[n]].states.push_back(apply_add_edge(states[n], a->first, a->second));
            next.push_back(live[n]);
        }
        live = std::move(next);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

void PolicyConfig::validate() const {
    if (width < 1) throw std::invalid_argument("policy width must be at least 1");
    if (message_layers < 0) throw std::invalid_argument("message_layers must be >= 0");
    if (!(variance_floor > 0.0)) throw std::invalid_argument("variance_floor must be > 0");
}

std::size_t PolicyParameters::index_of(const std::string& name) const {
    for (std::size_t k = 0; k < names.size(); ++k)
        if (names[k] == name) return k;
    throw std::out_of_range("unknown policy tensor: " + name);
}

void PolicyParameters::add(std::string name, Array value) {
    names.push_back(std::move(name));
    tensors.push_back(std::move(value));
}

Eigen::Index PolicyParameters::num_scalars() const {
    Eigen::Index n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
}

bool PolicyParameters::all_finite() const {
    for (const auto& t : tensors)
        if (!t.allFinite()) return false;
    return true;
}

Policy::Policy(int d, ModelConfig model, PolicyConfig cfg, std::uint64_t seed)
    : d_(d), param_dim_(param_block_size(model, d)), model_(model), cfg_(cfg) {
    if (d < 2) throw std::invalid_argument("policy needs at least 2 nodes");
    model_.validate();
    cfg_.validate();
    Rng rng(seed);
    const int h = cfg_.width;
    const int p = param_dim_;
    Array emb(d, h);
    for (Eigen::Index k = 0; k < emb.size(); ++k) emb.data()[k] = rng.normal();
    params_.add("embedding", emb);
    for (int l = 0; l < cfg_.message_layers; ++l) {
        params_.add("mp" + std::to_string(l) + ".weight", glorot(rng, 3 * h, h));
        params_.add("mp" + std::to_string(l) + ".bias", Array::Zero(1, h));
    }
    if (cfg_.attention) {
        params_.add("attn.query", glorot(rng, h, h));
        params_.add("attn.key", glorot(rng, h, h));
        params_.add("attn.value", glorot(rng, h, h));
        params_.add("attn.output", glorot(rng, h, h, 0.5));
    }
    params_.add("stop.hidden.weight", glorot(rng, h, h));
    params_.add("stop.hidden.bias", Array::Zero(1, h));
    params_.add("stop.out.weight", glorot(rng, h, 1, 0.1));
    params_.add("stop.out.bias", Array::Zero(1, 1));
    params_.add("edge.u.weight", glorot(rng, h, h, 0.5));
    params_.add("edge.u.bias", Array::Zero(1, h));
    params_.add("edge.v.weight", glorot(rng, h, h, 0.5));
    params_.add("edge.v.bias", Array::Zero(1, h));
    params_.add("theta.hidden.weight", glorot(rng, h, h));
    params_.add("theta.hidden.bias", Array::Zero(1, h));
    params_.add("theta.mean.weight", glorot(rng, h, p, 0.1));
    params_.add("theta.mean.bias", Array::Zero(1, p));
    if (cfg_.full_covariance) {
        params_.add("theta.factor.weight", glorot(rng, h, p * p, 0.1));
        Array fb = Array::Zero(1, p * p);
        for (int k = 0; k < p; ++k) fb(0, k * p + k) = cfg_.variance_bias_init;
        params_.add("theta.factor.bias", fb);
    } else {
        params_.add("theta.var.weight", glorot(rng, h, p, 0.1));
        params_.add("theta.var.bias", Array::Constant(1, p, cfg_.variance_bias_init));
    }
}

Policy::Policy(int d, ModelConfig model, PolicyConfig cfg, PolicyParameters params)
    : d_(d), param_dim_(param_block_size(model, d)), model_(model), cfg_(cfg), params_(std::move(params)) {
    model_.validate();
    cfg_.validate();
    const Policy reference(d, model, cfg, 0);
    if (reference.params_.names != params_.names) throw std::invalid_argument("policy tensors do not match the config");
    for (std::size_t k = 0; k < params_.size(); ++k)
        if (reference.params_.tensors[k].rows() != params_.tensors[k].rows() ||
            reference.params_.tensors[k].cols() != params_.tensors[k].cols())
            throw std::invalid_argument("policy tensor " + params_.names[k] + " has the wrong shape");
    check_parameters();
}

void Policy::check_parameters() const {
    if (!params_.all_finite()) throw std::invalid_argument("policy parameters contain non-finite values");
}

std::vector<Var> Policy::bind(Tape& tape, bool differentiable) const {
    std::vector<Var> vars;
    vars.reserve(params_.size());
    for (const auto& t : params_.tensors) vars.push_back(differentiable ? tape.input(t) : tape.constant(t));
    return vars;
}

PolicyBatch Policy::forward_tape(Tape& tape, std::span<const Var> pv, std::span<const DagState> graphs) const {
    if (pv.size() != params_.size()) throw std::invalid_argument("forward_tape: parameter count mismatch");
    const int d = d_;
    const int b = static_cast<int>(graphs.size());
    const int p = param_dim_;
    auto P = [&](const std::string& name) { return pv[params_.index_of(name)]; };

    std::vector<std::uint8_t> adj;
    adj.reserve(static_cast<std::size_t>(b) * static_cast<std::size_t>(d * d));
    Mask edge_mask(b, d * d);
    Mask forced(b, 1);
    PolicyBatch out;
    for (int n = 0; n < b; ++n) {
        const DagState& g = graphs[static_cast<std::size_t>(n)];
        if (g.num_nodes() != d) throw std::invalid_argument("forward_tape: graph size mismatch");
        const auto bytes = g.adjacency_bytes();
        adj.insert(adj.end(), bytes.begin(), bytes.end());
        const ActionMask m = action_mask(g, cfg_.max_parents);
        for (int k = 0; k < d * d; ++k) edge_mask(n, k) = m.valid(k / d, k % d);
        forced(n, 0) = !m.any();
        out.forced_stop.push_back(forced(n, 0));
    }

    Var h = tile_rows(P("embedding"), b);
    for (int l = 0; l < cfg_.message_layers; ++l) {
        const std::string pre = "mp" + std::to_string(l);
        const Var parents = graph_aggregate(h, adj, d, true);
        const Var children = graph_aggregate(h, adj, d, false);
        h = relu(linear(concat_cols({h, parents, children}), P(pre + ".weight"), P(pre + ".bias")));
    }
    if (cfg_.attention) {
        const Var a = block_attention(matmul(h, P("attn.query")), matmul(h, P("attn.key")), matmul(h, P("attn.value")), d);
        h = add(h, matmul(a, P("attn.output")));
    }
    out.embeddings = h;

    const Var g = block_mean_rows(h, d);
    const Var stop_logit =
        linear(relu(linear(g, P("stop.hidden.weight"), P("stop.hidden.bias"))), P("stop.out.weight"), P("stop.out.bias"));
    out.log_stop = overwrite(neg(softplus(neg(stop_logit))), forced, 0.0);
    out.log_continue = overwrite(neg(softplus(stop_logit)), forced, kMaskedLogProb);

    const Var u = linear(h, P("edge.u.weight"), P("edge.u.bias"));
    const Var v = linear(h, P("edge.v.weight"), P("edge.v.bias"));
    out.edge_log_probs = masked_log_softmax_rows(block_bilinear(u, v, d), edge_mask, true);

    const Var w = relu(linear(h, P("theta.hidden.weight"), P("theta.hidden.bias")));
    out.theta_mean = linear(w, P("theta.mean.weight"), P("theta.mean.bias"));
    if (cfg_.full_covariance) {
        const Var raw = linear(w, P("theta.factor.weight"), P("theta.factor.bias"));
        Array diag_sel = Array::Zero(static_cast<Eigen::Index>(b) * d, p * p);
        for (int k = 0; k < p; ++k) diag_sel.col(k * p + k).setOnes();
        const Array off_sel = 1.0 - diag_sel.array();
        const Var diag = sqrt(add_scalar(softplus(raw), cfg_.variance_floor));
        out.theta_factor = add(mul(raw, tape.constant(off_sel)), mul(diag, tape.constant(diag_sel)));
    } else {
        out.theta_var = add_scalar(softplus(linear(w, P("theta.var.weight"), P("theta.var.bias"))), cfg_.variance_floor);
    }
    return out;
}

std::vector<ForwardDistribution> Policy::forward_many(std::span<const DagState> graphs) const {
    if (graphs.empty()) return {};
    Tape tape;
    const auto pv = bind(tape, false);
    const PolicyBatch batch = forward_tape(tape, pv, graphs);
    const int d = d_;
    std::vector<ForwardDistribution> out(graphs.size());
    const Array& ls = batch.log_stop.value();
    const Array& lc = batch.log_continue.value();
    const Array& el = batch.edge_log_probs.value();
    const Array& mean = batch.theta_mean.value();
    for (std::size_t n = 0; n < graphs.size(); ++n) {
        auto& f = out[n];
        const auto row = static_cast<Eigen::Index>(n);
        f.log_p_stop = ls(row, 0);
        f.log_p_continue = lc(row, 0);
        f.p_stop = batch.forced_stop[n] ? 1.0 : std::exp(f.log_p_stop);
        f.edge_log_probs = Eigen::Map<const Array>(el.row(row).data(), d, d);
        f.theta_mean = mean.middleRows(row * d, d);
        if (cfg_.full_covariance) f.theta_factor = batch.theta_factor.value().middleRows(row * d, d);
        else f.theta_var = batch.theta_var.value().middleRows(row * d, d);
    }
    return out;
}

ForwardDistribution Policy::forward(const DagState& g) const {
    const DagState one[] = {g};
    return forward_many(one).front();
}

NodeEmbeddings Policy::embed(const DagState& g) const {
    Tape tape;
    const auto pv = bind(tape, false);
    const DagState one[] = {g};
    const PolicyBatch batch = forward_tape(tape, pv, one);
    auto P = [&](const std::string& name) { return pv[params_.index_of(name)]; };
    const Var h = batch.embeddings;
    NodeEmbeddings e;
    e.g = block_mean_rows(h, d_).value().row(0).transpose();
    e.u = linear(h, P("edge.u.weight"), P("edge.u.bias")).value();
    e.v = linear(h, P("edge.v.weight"), P("edge.v.bias")).value();
    e.w = relu(linear(h, P("theta.hidden.weight"), P("theta.hidden.bias"))).value();
    return e;
}

nlohmann::json Policy::to_json() const {
    nlohmann::json tensors = nlohmann::json::array();
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const Array& t = params_.tensors[k];
        tensors.push_back({{"name", params_.names[k]},
                           {"rows", t.rows()},
                           {"cols", t.cols()},
                           {"data", std::vector<double>(t.data(), t.data() + t.size())}});
    }
    return {{"format", "dagforge-policy"},
            {"version", kCheckpointVersion},
            {"num_nodes", d_},
            {"model", dagforge::to_json(model_)},
            {"policy", policy_config_json(cfg_)},
            {"tensors", tensors}};
}

Policy Policy::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "dagforge-policy") throw std::invalid_argument("not a policy checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion) throw std::invalid_argument("unsupported checkpoint version");
    PolicyParameters params;
    for (const auto& t : j.at("tensors")) {
        const auto rows = t.at("rows").get<Eigen::Index>();
        const auto cols = t.at("cols").get<Eigen::Index>();
        const auto data = t.at("data").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw std::invalid_argument("tensor size mismatch");
        params.add(t.at("name").get<std::string>(), Eigen::Map<const Array>(data.data(), rows, cols));
    }
    return Policy(j.at("num_nodes").get<int>(), model_config_from_json(j.at("model")),
                  policy_config_from_json(j.at("policy")), std::move(params));
}

void Policy::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << to_json().dump() << '\n';
}

Policy Policy::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    return from_json(nlohmann::json::parse(is));
}

}  // namespace dagforge
