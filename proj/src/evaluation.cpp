#include "dagforge/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

namespace dagforge {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr int kPrefetchAllEdges = 10;
constexpr std::size_t kForwardChunk = 512;

std::vector<double> off_diagonal(const Array& m) {
    std::vector<double> out;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            if (i != j) out.push_back(m(i, j));
    return out;
}

double median(std::vector<double> v) {
    const std::size_t n = v.size();
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2), v.end());
    const double hi = v[n / 2];
    if (n % 2 == 1) return hi;
    return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2)));
}

// Least-squares line through the selected points; empty if x is constant.
std::optional<std::pair<double, double>> fit_line(const std::vector<double>& x, const std::vector<double>& y,
                                                  const std::vector<std::size_t>& idx) {
    if (idx.size() < 2) return std::nullopt;
    double mx = 0.0, my = 0.0;
    for (std::size_t k : idx) {
        mx += x[k];
        my += y[k];
    }
    mx /= static_cast<double>(idx.size());
    my /= static_cast<double>(idx.size());
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t k : idx) {
        sxx += (x[k] - mx) * (x[k] - mx);
        sxy += (x[k] - mx) * (y[k] - my);
    }
    if (sxx <= 0.0) return std::nullopt;
    const double slope = sxy / sxx;
    return std::make_pair(slope, my - slope * mx);
}

// Forward distributions of sub-graphs of one target, evaluated in batches.
class TrajectoryScorer {
  public:
    TrajectoryScorer(const ForwardModel& model, const DagState& g) : model_(model), g_(g), edges_(g.edges()) {
        if (static_cast<int>(edges_.size()) <= kPrefetchAllEdges) {
            std::vector<DagState> all;
            const std::size_t k = edges_.size();
            for (std::size_t mask = 0; mask < (std::size_t{1} << k); ++mask) {
                DagState s = empty_state(g.num_nodes());
                for (std::size_t e = 0; e < k; ++e)
                    if ((mask >> e) & 1) s = s.with_edge(edges_[e].first, edges_[e].second);
                if (mask + 1 < (std::size_t{1} << k)) all.push_back(std::move(s));
            }
            prefetch(all);
        }
    }

    const std::vector<std::pair<int, int>>& edges() const { return edges_; }

    void prefetch(const std::vector<DagState>& states) {
        std::vector<DagState> missing;
        std::unordered_map<AdjacencyKey, bool, AdjacencyKeyHash> queued;
        for (const auto& s : states)
            if (!cache_.count(s.key()) && queued.emplace(s.key(), true).second) missing.push_back(s);
        for (std::size_t start = 0; start < missing.size(); start += kForwardChunk) {
            const std::size_t n = std::min(kForwardChunk, missing.size() - start);
            const std::span<const DagState> part(missing.data() + start, n);
            auto dists = model_.forward_many(part);
            for (std::size_t k = 0; k < n; ++k) cache_.emplace(part[k].key(), std::move(dists[k]));
        }
    }

    double step(const DagState& s, int e) {
        auto it = cache_.find(s.key());
        if (it == cache_.end()) {
            prefetch({s});
            it = cache_.find(s.key());
        }
        const auto [i, j] = edges_[static_cast<std::size_t>(e)];
        const double lc = it->second.log_p_continue;
        const double le = it->second.edge_log_probs(i, j);
        if (is_masked_log_prob(lc) || is_masked_log_prob(le)) return kNegInf;
        return lc + le;
    }

    double trajectory(const std::vector<int>& order) {
        DagState s = empty_state(g_.num_nodes());
        double lp = 0.0;
        for (int e : order) {
            lp += step(s, e);
            s = s.with_edge(edges_[static_cast<std::size_t>(e)].first, edges_[static_cast<std::size_t>(e)].second);
        }
        return lp;
    }

    void prefetch_orders(const std::vector<std::vector<int>>& orders) {
        if (static_cast<int>(edges_.size()) <= kPrefetchAllEdges) return;
        std::vector<DagState> states;
        for (const auto& order : orders) {
            DagState s = empty_state(g_.num_nodes());
            for (int e : order) {
                states.push_back(s);
                s = s.with_edge(edges_[static_cast<std::size_t>(e)].first, edges_[static_cast<std::size_t>(e)].second);
            }
        }
        prefetch(states);
    }

  private:
    const ForwardModel& model_;
    DagState g_;
    std::vector<std::pair<int, int>> edges_;
    std::unordered_map<AdjacencyKey, ForwardDistribution, AdjacencyKeyHash> cache_;
};

struct Partial {
    std::vector<int> order;
    DagState state;
    double logp;
};

std::vector<Partial> beam_search(TrajectoryScorer& scorer, int num_nodes, std::size_t width) {
    const int k = static_cast<int>(scorer.edges().size());
    std::vector<Partial> beam{{{}, empty_state(num_nodes), 0.0}};
    for (int t = 0; t < k; ++t) {
        std::vector<DagState> states;
        for (const auto& p : beam) states.push_back(p.state);
        scorer.prefetch(states);
        struct Candidate {
            std::size_t parent;
            int edge;
            double logp;
        };
        std::vector<Candidate> cand;
        for (std::size_t b = 0; b < beam.size(); ++b) {
            std::vector<bool> used(static_cast<std::size_t>(k), false);
            for (int e : beam[b].order) used[static_cast<std::size_t>(e)] = true;
            for (int e = 0; e < k; ++e)
                if (!used[static_cast<std::size_t>(e)]) cand.push_back({b, e, beam[b].logp + scorer.step(beam[b].state, e)});
        }
        // Stable order keeps ties deterministic: lexicographic by parent then edge.
        std::stable_sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) { return a.logp > b.logp; });
        if (cand.size() > width) cand.resize(width);
        std::vector<Partial> next;
        for (const auto& c : cand) {
            Partial p = beam[c.parent];
            p.order.push_back(c.edge);
            const auto [i, j] = scorer.edges()[static_cast<std::size_t>(c.edge)];
            p.state = p.state.with_edge(i, j);
            p.logp = c.logp;
            next.push_back(std::move(p));
        }
        beam = std::move(next);
    }
    return beam;
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

}  // namespace

void SampleBag::add(DagState g, ParamSet theta) {
    graphs.push_back(std::move(g));
    thetas.push_back(std::move(theta));
}

SampleBag sample_bag(const ForwardModel& model, int count, Rng& rng) {
    if (count < 0) throw std::invalid_argument("sample count must be >= 0");
    SampleBag bag;
    const auto traj = sample_trajectories(model, count, rng);
    std::vector<DagState> finals;
    for (const auto& t : traj) finals.push_back(t.final_state());
    for (std::size_t start = 0; start < finals.size(); start += kForwardChunk) {
        const std::size_t n = std::min(kForwardChunk, finals.size() - start);
        const std::span<const DagState> part(finals.data() + start, n);
        const auto dists = model.forward_many(part);
        for (std::size_t k = 0; k < n; ++k)
            bag.add(part[k], dists[k].sample_theta(active_coordinates(part[k], model.model()), rng));
    }
    return bag;
}

FeatureMatrices feature_estimates(const SampleBag& bag) {
    if (bag.empty()) throw std::invalid_argument("feature_estimates: empty sample bag");
    const int d = bag.graphs.front().num_nodes();
    FeatureMatrices out{Array::Zero(d, d), Array::Zero(d, d), Array::Zero(d, d)};
    for (const auto& g : bag.graphs) {
        const FeatureMatrices f = feature_indicators(g);
        out.edge += f.edge;
        out.path += f.path;
        out.markov += f.markov;
    }
    const double n = static_cast<double>(bag.size());
    out.edge /= n;
    out.path /= n;
    out.markov /= n;
    return out;
}

FeatureComparison rmse_and_pearson(const Array& estimate, const Array& exact) {
    if (estimate.rows() != exact.rows() || estimate.cols() != exact.cols() || estimate.rows() != estimate.cols())
        throw std::invalid_argument("rmse_and_pearson: shapes differ or are not square");
    const auto a = off_diagonal(estimate);
    const auto b = off_diagonal(exact);
    FeatureComparison out;
    if (a.empty()) return out;
    const double n = static_cast<double>(a.size());
    double sq = 0.0, ma = 0.0, mb = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        sq += (a[k] - b[k]) * (a[k] - b[k]);
        ma += a[k];
        mb += b[k];
    }
    out.rmse = std::sqrt(sq / n);
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        sab += (a[k] - ma) * (b[k] - mb);
        saa += (a[k] - ma) * (a[k] - ma);
        sbb += (b[k] - mb) * (b[k] - mb);
    }
    if (saa > 0.0 && sbb > 0.0) out.pearson = std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
    return out;
}

double cross_entropy_theta(const SampleBag& bag, const ExactPosterior& post) {
    if (bag.empty()) throw std::invalid_argument("cross_entropy_theta: empty sample bag");
    double total = 0.0;
    for (std::size_t k = 0; k < bag.size(); ++k) total -= posterior_theta_log_density(bag.thetas[k], bag.graphs[k], post);
    return total / static_cast<double>(bag.size());
}

double heldout_nll(const SampleBag& bag, const Array& heldout, const ModelConfig& cfg) {
    if (bag.empty()) throw std::invalid_argument("heldout_nll: empty sample bag");
    if (heldout.rows() == 0) throw std::invalid_argument("heldout_nll: no held-out rows");
    double total = 0.0;
    for (std::size_t k = 0; k < bag.size(); ++k) total -= observation_log_likelihoods(bag.graphs[k], bag.thetas[k], heldout, cfg).mean();
    return total / static_cast<double>(bag.size());
}

int shd(const DagState& g, const DagState& reference) {
    if (g.num_nodes() != reference.num_nodes()) throw std::invalid_argument("shd: graph sizes differ");
    int count = 0;
    for (int i = 0; i < g.num_nodes(); ++i)
        for (int j = i + 1; j < g.num_nodes(); ++j)
            if (g.has_edge(i, j) != reference.has_edge(i, j) || g.has_edge(j, i) != reference.has_edge(j, i)) ++count;
    return count;
}

double expected_shd(const SampleBag& bag, const DagState& reference) {
    if (bag.empty()) throw std::invalid_argument("expected_shd: empty sample bag");
    double total = 0.0;
    for (const auto& g : bag.graphs) total += shd(g, reference);
    return total / static_cast<double>(bag.size());
}

std::optional<double> auroc(const Array& edge_scores, const DagState& reference) {
    const int d = reference.num_nodes();
    if (edge_scores.rows() != d || edge_scores.cols() != d) throw std::invalid_argument("auroc: score shape mismatch");
    std::vector<std::pair<double, bool>> items;
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            if (i != j) items.emplace_back(edge_scores(i, j), reference.has_edge(i, j));
    const auto pos = static_cast<double>(std::count_if(items.begin(), items.end(), [](const auto& p) { return p.second; }));
    const double neg = static_cast<double>(items.size()) - pos;
    if (pos == 0.0 || neg == 0.0) return std::nullopt;
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    double rank_sum = 0.0;
    for (std::size_t k = 0; k < items.size();) {
        std::size_t end = k;
        while (end < items.size() && items[end].first == items[k].first) ++end;
        const double avg = 0.5 * static_cast<double>(k + 1 + end);
        for (std::size_t m = k; m < end; ++m)
            if (items[m].second) rank_sum += avg;
        k = end;
    }
    return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

void EstimatorConfig::validate() const {
    if (beam_size < 0) throw std::invalid_argument("beam_size must be >= 0");
    if (mc_trajectories < 1) throw std::invalid_argument("mc_trajectories must be >= 1");
}

double estimate_log_pG(const ForwardModel& model, const DagState& g, const EstimatorConfig& cfg, Rng& rng) {
    cfg.validate();
    const int k = g.num_edges();
    if (k == 0) return 0.0;
    TrajectoryScorer scorer(model, g);
    const double log_total = log_count_trajectories(g);
    const bool countable = k <= 20;
    const double total = countable ? static_cast<double>(count_trajectories(g)) : std::numeric_limits<double>::infinity();
    const std::size_t width = countable ? static_cast<std::size_t>(std::min<double>(cfg.beam_size, total))
                                        : static_cast<std::size_t>(cfg.beam_size);

    std::vector<double> terms;
    std::set<std::vector<int>> in_beam;
    if (width > 0) {
        for (auto& p : beam_search(scorer, g.num_nodes(), width)) {
            terms.push_back(p.logp);
            in_beam.insert(std::move(p.order));
        }
    }
    if (countable && static_cast<double>(in_beam.size()) >= total) return log_sum_exp(terms);

    std::vector<std::vector<int>> orders;
    std::vector<int> perm(static_cast<std::size_t>(k));
    while (static_cast<int>(orders.size()) < cfg.mc_trajectories) {
        std::iota(perm.begin(), perm.end(), 0);
        // Uniform backward sampling removes edges in uniformly random order.
        for (std::size_t a = perm.size() - 1; a > 0; --a) std::swap(perm[a], perm[rng.index(a + 1)]);
        if (!in_beam.count(perm)) orders.push_back(perm);
    }
    scorer.prefetch_orders(orders);
    std::vector<double> mc;
    for (const auto& o : orders) mc.push_back(scorer.trajectory(o));
    const double remaining = countable ? std::log(total - static_cast<double>(in_beam.size()))
                                       : log_total + std::log1p(-static_cast<double>(in_beam.size()) * std::exp(-log_total));
    terms.push_back(remaining - std::log(static_cast<double>(orders.size())) + log_sum_exp(mc));
    return log_sum_exp(terms);
}

double estimate_log_pT(const ForwardModel& model, const DagState& g, const ParamSet& theta, const EstimatorConfig& cfg,
                       Rng& rng) {
    return estimate_log_pG(model, g, cfg, rng) + log_pf_theta(model, g, theta);
}

double exhaustive_log_pG(const ForwardModel& model, const DagState& g) {
    const int k = g.num_edges();
    if (k > 8) throw std::invalid_argument("exhaustive_log_pG: more than 8 edges");
    if (k == 0) return 0.0;
    TrajectoryScorer scorer(model, g);
    std::vector<int> order(static_cast<std::size_t>(k));
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> terms;
    do {
        terms.push_back(scorer.trajectory(order));
    } while (std::next_permutation(order.begin(), order.end()));
    return log_sum_exp(terms);
}

RansacFit ransac_slope(const std::vector<double>& x, const std::vector<double>& y, Rng& rng, int proposals) {
    if (x.size() != y.size()) throw std::invalid_argument("ransac_slope: x and y differ in length");
    if (x.size() < 2) throw std::invalid_argument("ransac_slope: needs at least two points");
    const std::size_t n = x.size();
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    RansacFit fit;
    const auto initial = fit_line(x, y, all);
    if (!initial) return fit;
    if (n == 2) {
        fit.slope = initial->first;
        fit.intercept = initial->second;
        fit.inliers = 2;
        return fit;
    }

    std::vector<double> res(n);
    for (std::size_t k = 0; k < n; ++k) res[k] = y[k] - (initial->first * x[k] + initial->second);
    const double med = median(res);
    for (auto& r : res) r = std::abs(r - med);
    double threshold = 1.4826 * median(res);
    if (!(threshold > 0.0)) {
        double scale = 1.0;
        for (double v : y) scale = std::max(scale, std::abs(v));
        threshold = 1e-9 * scale;
    }

    std::vector<std::size_t> best;
    double best_sse = std::numeric_limits<double>::infinity();
    std::pair<double, double> best_line = *initial;
    for (int p = 0; p < proposals; ++p) {
        const std::size_t i = rng.index(n);
        std::size_t j = rng.index(n - 1);
        if (j >= i) ++j;
        if (x[i] == x[j]) continue;
        const double slope = (y[j] - y[i]) / (x[j] - x[i]);
        const double intercept = y[i] - slope * x[i];
        std::vector<std::size_t> inl;
        double sse = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            const double r = y[k] - (slope * x[k] + intercept);
            if (std::abs(r) <= threshold) {
                inl.push_back(k);
                sse += r * r;
            }
        }
        if (inl.size() > best.size() || (inl.size() == best.size() && sse < best_sse)) {
            best = std::move(inl);
            best_sse = sse;
            best_line = {slope, intercept};
        }
    }
    if (best.empty()) best = all;
    const auto refit = fit_line(x, y, best);
    const auto line = refit ? *refit : best_line;
    fit.slope = line.first;
    fit.intercept = line.second;
    fit.inliers = static_cast<int>(best.size());
    return fit;
}

std::vector<ScatterPoint> reward_scatter(const ForwardModel& model, const SampleBag& bag, const Array& data,
                                         const EstimatorConfig& cfg, int threads) {
    cfg.validate();
    std::vector<ScatterPoint> out(bag.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    const auto work = [&] {
        for (std::size_t k; (k = next++) < bag.size();) {
            try {
                Rng rng(mix_seed(cfg.seed ^ mix_seed(k)));
                ScatterPoint& p = out[k];
                p.log_reward = log_reward(bag.graphs[k], bag.thetas[k], data, model.model());
                p.log_pt = estimate_log_pT(model, bag.graphs[k], bag.thetas[k], cfg, rng);
                p.num_edges = bag.graphs[k].num_edges();
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const int n = std::clamp(threads, 1, static_cast<int>(std::max<std::size_t>(bag.size(), 1)));
    std::vector<std::thread> pool;
    for (int t = 1; t < n; ++t) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    return out;
}

void write_scatter_csv(const std::string& path, const std::vector<ScatterPoint>& points) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "log_R,log_PT,num_edges\n" << std::setprecision(17);
    for (const auto& p : points) os << p.log_reward << ',' << p.log_pt << ',' << p.num_edges << '\n';
}

void write_scatter_svg(const std::string& path, const std::vector<ScatterPoint>& points, const RansacFit& fit) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    const double w = 640, h = 480, m = 60;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    int max_edges = 1;
    for (const auto& p : points) {
        if (!std::isfinite(p.log_reward) || !std::isfinite(p.log_pt)) continue;
        x0 = std::min(x0, p.log_reward);
        x1 = std::max(x1, p.log_reward);
        y0 = std::min(y0, p.log_pt);
        y1 = std::max(y1, p.log_pt);
        max_edges = std::max(max_edges, p.num_edges);
    }
    if (!(x1 > x0)) {
        x0 -= 1;
        x1 += 1;
    }
    if (!(y1 > y0)) {
        y0 -= 1;
        y1 += 1;
    }
    auto sx = [&](double v) { return m + (v - x0) / (x1 - x0) * (w - 2 * m); };
    auto sy = [&](double v) { return h - m - (v - y0) / (y1 - y0) * (h - 2 * m); };
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<line x1=\"" << m << "\" y1=\"" << h - m << "\" x2=\"" << w - m << "\" y2=\"" << h - m << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << m << "\" y1=\"" << m << "\" x2=\"" << m << "\" y2=\"" << h - m << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << w / 2 << "\" y=\"" << h - 15 << "\" text-anchor=\"middle\" font-size=\"14\">log R(G, theta)</text>\n";
    os << "<text x=\"15\" y=\"" << h / 2 << "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 15 " << h / 2
       << ")\">log P_T(G, theta)</text>\n";
    os << "<text x=\"" << m << "\" y=\"" << h - m + 18 << "\" font-size=\"11\">" << fmt(x0) << "</text>\n";
    os << "<text x=\"" << w - m << "\" y=\"" << h - m + 18 << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(x1) << "</text>\n";
    os << "<text x=\"" << m - 4 << "\" y=\"" << h - m << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(y0) << "</text>\n";
    os << "<text x=\"" << m - 4 << "\" y=\"" << m + 10 << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(y1) << "</text>\n";
    for (const auto& p : points) {
        if (!std::isfinite(p.log_reward) || !std::isfinite(p.log_pt)) continue;
        const int hue = 240 - 240 * p.num_edges / max_edges;
        os << "<circle cx=\"" << fmt(sx(p.log_reward)) << "\" cy=\"" << fmt(sy(p.log_pt)) << "\" r=\"3\" fill=\"hsl(" << hue
           << ",80%,45%)\" fill-opacity=\"0.6\"/>\n";
    }
    if (fit.slope && fit.intercept) {
        os << "<line x1=\"" << fmt(sx(x0)) << "\" y1=\"" << fmt(sy(*fit.slope * x0 + *fit.intercept)) << "\" x2=\"" << fmt(sx(x1))
           << "\" y2=\"" << fmt(sy(*fit.slope * x1 + *fit.intercept)) << "\" stroke=\"black\" stroke-dasharray=\"6 4\"/>\n";
        os << "<text x=\"" << m + 10 << "\" y=\"" << m + 10 << "\" font-size=\"14\">slope " << fmt(*fit.slope) << "</text>\n";
    }
    os << "</svg>\n";
}

void EvaluationConfig::validate() const {
    if (num_samples < 1) throw std::invalid_argument("num_samples must be at least 1");
    if (slope_samples < 0) throw std::invalid_argument("slope_samples must be >= 0");
    if (threads < 1) throw std::invalid_argument("threads must be at least 1");
    estimator.validate();
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) {
    return v && std::isfinite(*v) ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

nlohmann::json comparison_json(const FeatureComparison& c) {
    return {{"rmse", c.rmse}, {"pearson", optional_json(c.pearson)}};
}

}  // namespace

nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["num_samples"] = r.num_samples;
    if (r.features) {
        j["edge"] = comparison_json(r.features->edge);
        j["path"] = comparison_json(r.features->path);
        j["markov"] = comparison_json(r.features->markov);
    } else {
        j["edge"] = j["path"] = j["markov"] = nullptr;
    }
    j["cross_entropy"] = optional_json(r.cross_entropy);
    j["nll"] = optional_json(r.nll);
    j["eshd"] = optional_json(r.eshd);
    j["auroc"] = optional_json(r.auroc);
    if (r.slope) {
        j["slope"] = optional_json(r.slope->slope);
        j["slope_intercept"] = optional_json(r.slope->intercept);
        j["slope_inliers"] = r.slope->inliers;
    } else {
        j["slope"] = nullptr;
    }
    j["points_csv_path"] = r.points_csv_path.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.points_csv_path);
    return j;
}

MetricsReport evaluate_policy(const ForwardModel& model, const EvaluationInputs& in, const EvaluationConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const SampleBag bag = sample_bag(model, cfg.num_samples, rng);
    MetricsReport r;
    r.num_samples = static_cast<int>(bag.size());
    if (in.exact) {
        const FeatureMatrices est = feature_estimates(bag);
        const FeatureMatrices ex = exact_features(*in.exact);
        r.features = FeatureScores{rmse_and_pearson(est.edge, ex.edge), rmse_and_pearson(est.path, ex.path),
                                   rmse_and_pearson(est.markov, ex.markov)};
        if (model.model().kind == CpdKind::LinearGaussian) r.cross_entropy = cross_entropy_theta(bag, *in.exact);
    }
    if (in.heldout && in.heldout->rows() > 0) r.nll = heldout_nll(bag, *in.heldout, model.model());
    if (in.ground_truth) {
        r.eshd = expected_shd(bag, *in.ground_truth);
        r.auroc = auroc(feature_estimates(bag).edge, *in.ground_truth);
    }
    if (in.data && cfg.slope_samples > 0) {
        SampleBag sub;
        for (std::size_t k = 0; k < bag.size() && static_cast<int>(sub.size()) < cfg.slope_samples; ++k)
            sub.add(bag.graphs[k], bag.thetas[k]);
        const auto points = reward_scatter(model, sub, *in.data, cfg.estimator, cfg.threads);
        std::vector<double> xs, ys;
        for (const auto& p : points) {
            if (!std::isfinite(p.log_reward) || !std::isfinite(p.log_pt)) continue;
            xs.push_back(p.log_reward);
            ys.push_back(p.log_pt);
        }
        r.slope = xs.size() >= 2 ? ransac_slope(xs, ys, rng) : RansacFit{};
        if (!in.points_csv_path.empty()) {
            write_scatter_csv(in.points_csv_path, points);
            std::string svg = in.points_csv_path;
            const auto dot = svg.rfind(".csv");
            svg = (dot != std::string::npos && dot + 4 == svg.size() ? svg.substr(0, dot) : svg) + ".svg";
            write_scatter_svg(svg, points, *r.slope);
            r.points_csv_path = in.points_csv_path;
        }
    }
    return r;
}

}  // namespace dagforge
