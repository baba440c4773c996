#include "dagforge/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace dagforge {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr int kStateVersion = 1;

std::pair<int, int> added_edge(const DagState& from, const DagState& to) {
    if (from.num_nodes() != to.num_nodes() || to.num_edges() != from.num_edges() + 1)
        throw std::invalid_argument("transition must add exactly one edge");
    std::pair<int, int> edge{-1, -1};
    for (const auto& [i, j] : to.edges()) {
        if (from.has_edge(i, j)) continue;
        if (edge.first >= 0) throw std::invalid_argument("transition must add exactly one edge");
        edge = {i, j};
    }
    if (edge.first < 0 || from.with_edge(edge.first, edge.second) != to)
        throw std::invalid_argument("transition must add exactly one edge");
    return edge;
}

double reward(const DagState& g, const ParamSet& theta, const Array& rows, int total_rows, const ModelConfig& mc) {
    if (rows.rows() == 0 || total_rows <= rows.rows()) return log_reward(g, theta, rows, mc);
    return minibatch_log_reward(g, theta, rows, total_rows, mc);
}

Array sample_rows(const Array& data, int m, Rng& rng) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(data.rows()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    Array out(m, data.cols());
    for (int k = 0; k < m; ++k) {
        const std::size_t pick = static_cast<std::size_t>(k) + rng.index(idx.size() - static_cast<std::size_t>(k));
        std::swap(idx[static_cast<std::size_t>(k)], idx[pick]);
        out.row(k) = data.row(idx[static_cast<std::size_t>(k)]);
    }
    return out;
}

nlohmann::json array_json(const Array& a) {
    return {{"rows", a.rows()}, {"cols", a.cols()}, {"data", std::vector<double>(a.data(), a.data() + a.size())}};
}

Array array_from_json(const nlohmann::json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw std::invalid_argument("array size mismatch");
    return Eigen::Map<const Array>(data.data(), rows, cols);
}

LossReport report_from_json(const nlohmann::json& j) {
    LossReport r;
    r.update = j.at("update").get<int>();
    r.loss = j.at("loss").get<double>();
    r.mean_abs_residual = j.at("mean_abs_residual").get<double>();
    r.penalty = j.at("penalty").get<double>();
    r.p_stop_g0 = j.at("p_stop_g0").get<double>();
    r.grad_norm = j.at("grad_norm").get<double>();
    return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Replay buffer
// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(int num_nodes, std::size_t capacity) : d_(num_nodes), capacity_(capacity) {
    if (num_nodes < 1) throw std::invalid_argument("replay buffer needs at least one node");
    if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be positive");
}

void ReplayBuffer::push(const DagState& from, const DagState& to) {
    if (from.num_nodes() != d_) throw std::invalid_argument("transition has the wrong number of nodes");
    const auto [i, j] = added_edge(from, to);
    Entry e{from.key(), i, j};
    if (entries_.size() < capacity_) {
        entries_.push_back(std::move(e));
    } else {
        entries_[next_] = std::move(e);
        next_ = (next_ + 1) % capacity_;
    }
}

Transition ReplayBuffer::at(std::size_t k) const {
    const Entry& e = entries_.at(k);
    DagState from = DagState::from_key(d_, e.from);
    DagState to = from.with_edge(e.source, e.target);
    return {std::move(from), std::move(to)};
}

std::vector<Transition> ReplayBuffer::sample(std::size_t count, Rng& rng) const {
    if (entries_.empty()) throw std::logic_error("cannot sample from an empty replay buffer");
    std::vector<Transition> out;
    out.reserve(count);
    for (std::size_t k = 0; k < count; ++k) out.push_back(at(rng.index(entries_.size())));
    return out;
}

nlohmann::json ReplayBuffer::to_json() const {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& e : entries_)
        items.push_back({DagState::from_key(d_, e.from).to_hex(), e.source, e.target});
    return {{"num_nodes", d_}, {"capacity", capacity_}, {"next", next_}, {"entries", items}};
}

ReplayBuffer ReplayBuffer::from_json(const nlohmann::json& j) {
    ReplayBuffer b(j.at("num_nodes").get<int>(), j.at("capacity").get<std::size_t>());
    for (const auto& item : j.at("entries")) {
        const DagState from = DagState::from_hex(b.d_, item.at(0).get<std::string>());
        b.entries_.push_back({from.key(), item.at(1).get<int>(), item.at(2).get<int>()});
        added_edge(from, from.with_edge(b.entries_.back().source, b.entries_.back().target));
    }
    if (b.entries_.size() > b.capacity_) throw std::invalid_argument("replay buffer exceeds its capacity");
    b.next_ = j.at("next").get<std::size_t>();
    if (b.next_ >= b.capacity_) throw std::invalid_argument("replay buffer cursor out of range");
    return b;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void TrainerConfig::validate() const {
    if (env_steps_per_update < 1) throw std::invalid_argument("env_steps_per_update must be at least 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning_rate must be > 0");
    if (!(huber_delta > 0.0)) throw std::invalid_argument("huber_delta must be > 0");
    if (!(penalty_weight >= 0.0) || !std::isfinite(penalty_weight)) throw std::invalid_argument("penalty_weight must be >= 0");
    if (total_updates < 0) throw std::invalid_argument("total_updates must be >= 0");
    if (!(eps_start >= 0.0 && eps_start <= 1.0) || !(eps_end >= 0.0 && eps_end <= 1.0))
        throw std::invalid_argument("exploration must be in [0, 1]");
    if (eps_anneal_updates < 0) throw std::invalid_argument("eps_anneal_updates must be >= 0");
    if (minibatch_size < 0) throw std::invalid_argument("minibatch_size must be >= 0");
    if (buffer_capacity == 0) throw std::invalid_argument("buffer_capacity must be positive");
    if (!(grad_clip > 0.0)) throw std::invalid_argument("grad_clip must be > 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) || !(adam_epsilon > 0.0))
        throw std::invalid_argument("invalid Adam hyperparameters");
    if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0)) throw std::invalid_argument("final_lr_fraction must be in (0, 1]");
    if (report_every < 1) throw std::invalid_argument("report_every must be at least 1");
    if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
}

double TrainerConfig::exploration(int update) const {
    const int span = eps_anneal_updates > 0 ? eps_anneal_updates : total_updates / 2;
    if (span <= 0 || update >= span) return eps_end;
    const double t = static_cast<double>(std::max(update, 0)) / span;
    return eps_start + t * (eps_end - eps_start);
}

double TrainerConfig::learning_rate_at(int update) const {
    if (total_updates <= 0 || final_lr_fraction == 1.0) return learning_rate;
    const double t = std::clamp(static_cast<double>(update) / total_updates, 0.0, 1.0);
    return learning_rate * (1.0 - t * (1.0 - final_lr_fraction));
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

double subtb_residual(const ForwardModel& model, const DagState& g, const DagState& next, const ParamSet& theta,
                      const ParamSet& theta_next, const Array& data, int total_rows) {
    added_edge(g, next);
    const ModelConfig& mc = model.model();
    const int total = total_rows < 0 ? static_cast<int>(data.rows()) : total_rows;
    const double lhs = reward(next, theta_next, data, total, mc) - std::log(static_cast<double>(next.num_edges())) +
                       log_pf_theta(model, g, theta);
    const double rhs = reward(g, theta, data, total, mc) + log_pf_edge(model, g, next) + log_pf_theta(model, next, theta_next);
    return lhs - rhs;
}

LossEvaluation evaluate_loss(const Policy& policy, std::span<const Transition> batch, const Array& data,
                             const TrainerConfig& cfg, Rng& rng, const LossOptions& options) {
    const int nb = static_cast<int>(batch.size());
    if (nb == 0) throw std::invalid_argument("empty training batch");
    const int d = policy.num_nodes();
    const int p = policy.param_dim();
    const ModelConfig& mc = policy.model();
    if (data.cols() != d) throw std::invalid_argument("data column count does not match the policy");
    if (options.fixed_theta && static_cast<int>(options.fixed_theta->size()) != nb)
        throw std::invalid_argument("fixed_theta must hold one pair per transition");

    Array sampled;
    const Array* rows = &data;
    if (options.minibatch) {
        rows = options.minibatch;
    } else if (cfg.minibatch_size > 0 && cfg.minibatch_size < data.rows()) {
        sampled = sample_rows(data, cfg.minibatch_size, rng);
        rows = &sampled;
    }
    const int total = static_cast<int>(data.rows());

    std::vector<DagState> graphs;
    graphs.reserve(2 * static_cast<std::size_t>(nb));
    std::vector<std::pair<int, int>> edges;
    for (const auto& t : batch) {
        edges.push_back(added_edge(t.from, t.to));
        graphs.push_back(t.from);
    }
    for (const auto& t : batch) graphs.push_back(t.to);

    Tape tape;
    const auto pv = policy.bind(tape, options.compute_gradient);
    const PolicyBatch out = policy.forward_tape(tape, pv, graphs);
    const bool full = policy.config().full_covariance;

    // Parameters at both endpoints, sampled off-tape.
    const auto rows_total = static_cast<Eigen::Index>(graphs.size()) * d;
    Array theta_rows = Array::Zero(rows_total, p);
    Mask active(rows_total, p);
    LossEvaluation ev;
    ev.thetas.resize(static_cast<std::size_t>(nb));
    for (std::size_t n = 0; n < graphs.size(); ++n) {
        const auto r0 = static_cast<Eigen::Index>(n) * d;
        const Mask act = active_coordinates(graphs[n], mc);
        active.middleRows(r0, d) = act;
        const std::size_t b = n % static_cast<std::size_t>(nb);
        const bool first = n < static_cast<std::size_t>(nb);
        ParamSet theta;
        if (options.fixed_theta) {
            theta = first ? (*options.fixed_theta)[b].first : (*options.fixed_theta)[b].second;
            check_layout(graphs[n], theta, mc);
        } else {
            ForwardDistribution f;
            f.theta_mean = out.theta_mean.value().middleRows(r0, d);
            if (full) f.theta_factor = out.theta_factor.value().middleRows(r0, d);
            else f.theta_var = out.theta_var.value().middleRows(r0, d);
            theta = f.sample_theta(act, rng);
        }
        theta_rows.middleRows(r0, d) = theta.as_rows();
        (first ? ev.thetas[b].first : ev.thetas[b].second) = std::move(theta);
    }
    const Array active_d = active.cast<double>();

    Var density;
    Var diff;
    if (full) {
        density = block_sum_rows(masked_tril_gaussian_log_density(out.theta_mean, out.theta_factor, theta_rows, active), d);
    } else {
        diff = sub(tape.constant(theta_rows), out.theta_mean);
        const Var per = add(scale(add_scalar(log(out.theta_var), kLog2Pi), -0.5), scale(div(square(diff), out.theta_var), -0.5));
        density = block_sum_rows(row_sum(mul(per, tape.constant(active_d))), d);
    }

    std::vector<std::pair<int, int>> at_from, at_to, at_edge;
    Array offset(nb, 1);
    for (int b = 0; b < nb; ++b) {
        at_from.emplace_back(b, 0);
        at_to.emplace_back(nb + b, 0);
        at_edge.emplace_back(b, edges[static_cast<std::size_t>(b)].first * d + edges[static_cast<std::size_t>(b)].second);
        const auto& t = batch[static_cast<std::size_t>(b)];
        const auto& th = ev.thetas[static_cast<std::size_t>(b)];
        offset(b, 0) = reward(t.to, th.second, *rows, total, mc) - std::log(static_cast<double>(t.to.num_edges())) -
                       reward(t.from, th.first, *rows, total, mc);
    }
    const Var log_pf = add(gather(out.edge_log_probs, at_edge), gather(out.log_continue, at_from));
    const Var lhs = add(add(tape.constant(offset), gather(out.log_stop, at_from)), gather(density, at_from));
    const Var rhs = add(add(log_pf, gather(out.log_stop, at_to)), gather(density, at_to));
    const Var residual = sub(lhs, rhs);
    Var loss = std::isinf(cfg.huber_delta) ? mean(square(residual)) : mean(huber(residual, cfg.huber_delta));

    if (cfg.penalty_weight > 0.0 && !full) {
        const double scale_lik = rows->rows() > 0 ? static_cast<double>(total) / static_cast<double>(rows->rows()) : 1.0;
        Array score_r = Array::Zero(rows_total, p);
        for (std::size_t n = 0; n < graphs.size(); ++n) {
            const std::size_t b = n % static_cast<std::size_t>(nb);
            const ParamSet& th = n < static_cast<std::size_t>(nb) ? ev.thetas[b].first : ev.thetas[b].second;
            score_r.middleRows(static_cast<Eigen::Index>(n) * d, d) =
                grad_theta_log_reward(graphs[n], th, *rows, mc, scale_lik).as_rows();
        }
        const Var score_q = neg(div(diff, out.theta_var));
        const Var gap = mul(sub(score_q, tape.constant(score_r)), tape.constant(active_d));
        const Var penalty = scale(sum(square(gap)), 0.5 * cfg.penalty_weight / nb);
        ev.penalty = penalty.scalar();
        loss = add(loss, penalty);
    }

    ev.loss = loss.scalar();
    const Array& res = residual.value();
    ev.residuals.assign(res.data(), res.data() + res.size());
    ev.mean_abs_residual = res.cwiseAbs().mean();
    if (options.compute_gradient) ev.gradients = tape.grad(loss, pv);
    return ev;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

Adam::Adam(const PolicyParameters& shapes, double beta1, double beta2, double epsilon)
    : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
    for (const auto& t : shapes.tensors) {
        m_.push_back(Array::Zero(t.rows(), t.cols()));
        v_.push_back(Array::Zero(t.rows(), t.cols()));
    }
}

void Adam::step(PolicyParameters& params, const std::vector<Array>& grads, double lr) {
    if (grads.size() != params.size() || m_.size() != params.size()) throw std::invalid_argument("Adam: tensor count mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto g = grads[k].array();
        m_[k] = (beta1_ * m_[k].array() + (1.0 - beta1_) * g).matrix();
        v_[k] = (beta2_ * v_[k].array() + (1.0 - beta2_) * g.square()).matrix();
        params.tensors[k].array() -= lr * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + epsilon_);
    }
}

nlohmann::json Adam::to_json() const {
    nlohmann::json m = nlohmann::json::array(), v = nlohmann::json::array();
    for (const auto& a : m_) m.push_back(array_json(a));
    for (const auto& a : v_) v.push_back(array_json(a));
    return {{"beta1", beta1_}, {"beta2", beta2_}, {"epsilon", epsilon_}, {"t", t_}, {"m", m}, {"v", v}};
}

Adam Adam::from_json(const nlohmann::json& j) {
    Adam a;
    a.beta1_ = j.at("beta1").get<double>();
    a.beta2_ = j.at("beta2").get<double>();
    a.epsilon_ = j.at("epsilon").get<double>();
    a.t_ = j.at("t").get<long>();
    for (const auto& x : j.at("m")) a.m_.push_back(array_from_json(x));
    for (const auto& x : j.at("v")) a.v_.push_back(array_from_json(x));
    if (a.m_.size() != a.v_.size()) throw std::invalid_argument("Adam state is inconsistent");
    return a;
}

double clip_global_norm(std::vector<Array>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    if (std::isfinite(norm) && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto& g : grads) g *= f;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Trainer state
// ---------------------------------------------------------------------------

nlohmann::json to_json(const LossReport& r) {
    return {{"update", r.update},       {"loss", r.loss},           {"mean_abs_residual", r.mean_abs_residual},
            {"penalty", r.penalty},     {"p_stop_g0", r.p_stop_g0}, {"grad_norm", r.grad_norm}};
}

nlohmann::json TrainerState::to_json() const {
    nlohmann::json envs_json = nlohmann::json::array();
    for (const auto& e : envs) envs_json.push_back(e.to_hex());
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& r : history) hist.push_back(dagforge::to_json(r));
    return {{"format", "dagforge-trainer"},
            {"version", kStateVersion},
            {"policy", policy.to_json()},
            {"optimizer", optimizer.to_json()},
            {"buffer", buffer.to_json()},
            {"envs", envs_json},
            {"rng", rng.serialize()},
            {"update", update},
            {"history", hist}};
}

TrainerState TrainerState::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "dagforge-trainer") throw std::invalid_argument("not a trainer checkpoint");
    if (j.at("version").get<int>() != kStateVersion) throw std::invalid_argument("unsupported checkpoint version");
    TrainerState s{Policy::from_json(j.at("policy")), Adam::from_json(j.at("optimizer")),
                   ReplayBuffer::from_json(j.at("buffer")), {}, Rng{}, j.at("update").get<int>(), {}};
    const int d = s.policy.num_nodes();
    for (const auto& e : j.at("envs")) s.envs.push_back(DagState::from_hex(d, e.get<std::string>()));
    s.rng.deserialize(j.at("rng").get<std::string>());
    for (const auto& r : j.at("history")) s.history.push_back(report_from_json(r));
    return s;
}

void TrainerState::save(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp);
        if (!os) throw std::runtime_error("cannot write " + tmp);
        os << to_json().dump() << '\n';
        if (!os) throw std::runtime_error("cannot write " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot write " + path);
}

TrainerState TrainerState::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    return from_json(nlohmann::json::parse(is));
}

TrainerState initial_trainer_state(int d, const ModelConfig& model, const PolicyConfig& pcfg, const TrainerConfig& cfg) {
    cfg.validate();
    Policy policy(d, model, pcfg, cfg.seed);
    Adam adam(policy.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    return TrainerState{std::move(policy),
                        std::move(adam),
                        ReplayBuffer(d, cfg.buffer_capacity),
                        std::vector<DagState>(static_cast<std::size_t>(cfg.env_steps_per_update), empty_state(d)),
                        Rng(mix_seed(cfg.seed)),
                        0,
                        {}};
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

void step_envs(TrainerState& s, double eps) {
    const auto dists = s.policy.forward_many(s.envs);
    for (std::size_t k = 0; k < s.envs.size(); ++k) {
        const auto a = sample_action(s.envs[k], dists[k], s.policy.max_parents(), s.rng, eps);
        if (!a) {
            s.envs[k] = empty_state(s.policy.num_nodes());
            continue;
        }
        DagState next = apply_add_edge(s.envs[k], a->first, a->second);
        s.buffer.push(s.envs[k], next);
        s.envs[k] = std::move(next);
    }
}

[[noreturn]] void diverged(const TrainerState& s, const TrainerConfig& cfg, std::span<const Transition> batch,
                           const LossEvaluation& ev, const std::string& what) {
    if (!cfg.dump_path.empty()) {
        nlohmann::json transitions = nlohmann::json::array();
        for (const auto& t : batch) transitions.push_back({t.from.to_hex(), t.to.to_hex()});
        nlohmann::json residuals = nlohmann::json::array();
        for (double r : ev.residuals) residuals.push_back(std::isfinite(r) ? nlohmann::json(r) : nlohmann::json(nullptr));
        nlohmann::json dump = {{"update", s.update},
                               {"reason", what},
                               {"loss", std::isfinite(ev.loss) ? nlohmann::json(ev.loss) : nlohmann::json(nullptr)},
                               {"residuals", residuals},
                               {"transitions", transitions}};
        if (s.policy.parameters().all_finite()) dump["policy"] = s.policy.to_json();
        std::ofstream os(cfg.dump_path);
        os << dump.dump(2) << '\n';
    }
    throw TrainingDiverged("training diverged at update " + std::to_string(s.update) + ": " + what);
}

}  // namespace

void train(TrainerState& state, const Array& data, const TrainerConfig& cfg, const ReportCallback& on_report) {
    cfg.validate();
    if (data.cols() != state.policy.num_nodes()) throw std::invalid_argument("data column count does not match the policy");
    if (state.envs.empty()) state.envs.assign(static_cast<std::size_t>(cfg.env_steps_per_update), empty_state(state.policy.num_nodes()));

    const std::size_t warm = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), state.buffer.capacity());
    for (int guard = 0; state.update < cfg.total_updates && state.buffer.size() < warm && guard < 100000; ++guard)
        step_envs(state, cfg.exploration(state.update));

    while (state.update < cfg.total_updates) {
        step_envs(state, cfg.exploration(state.update));
        if (state.buffer.size() == 0) continue;
        const auto batch = state.buffer.sample(static_cast<std::size_t>(cfg.batch_size), state.rng);
        LossEvaluation ev = evaluate_loss(state.policy, batch, data, cfg, state.rng);
        if (!std::isfinite(ev.loss)) diverged(state, cfg, batch, ev, "non-finite loss");
        for (const auto& g : ev.gradients)
            if (!g.allFinite()) diverged(state, cfg, batch, ev, "non-finite gradient");
        const double norm = clip_global_norm(ev.gradients, cfg.grad_clip);
        state.optimizer.step(state.policy.parameters(), ev.gradients, cfg.learning_rate_at(state.update));
        if (!state.policy.parameters().all_finite()) diverged(state, cfg, batch, ev, "non-finite parameters");
        ++state.update;

        if (state.update % cfg.report_every == 0 || state.update == cfg.total_updates) {
            LossReport r{state.update, ev.loss, ev.mean_abs_residual, ev.penalty,
                         state.policy.forward(empty_state(state.policy.num_nodes())).p_stop, norm};
            state.history.push_back(r);
            if (on_report) on_report(r);
        }
        if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() && state.update % cfg.checkpoint_every == 0) {
            state.save(cfg.checkpoint_path);
            if (!cfg.history_path.empty()) write_history_csv(cfg.history_path, state.history);
        }
    }
    if (!cfg.history_path.empty()) write_history_csv(cfg.history_path, state.history);
}

TrainResult train(const Array& data, const ModelConfig& model, const PolicyConfig& pcfg, const TrainerConfig& cfg,
                  const ReportCallback& on_report) {
    TrainerState state = initial_trainer_state(static_cast<int>(data.cols()), model, pcfg, cfg);
    train(state, data, cfg, on_report);
    return {std::move(state.policy), std::move(state.history)};
}

void write_history_csv(const std::string& path, const std::vector<LossReport>& history) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "update,loss,mean_abs_residual,penalty,p_stop_g0,grad_norm\n" << std::setprecision(17);
    for (const auto& r : history)
        os << r.update << ',' << r.loss << ',' << r.mean_abs_residual << ',' << r.penalty << ',' << r.p_stop_g0 << ','
           << r.grad_norm << '\n';
}

}  // namespace dagforge
