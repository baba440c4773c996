#include "dagforge/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <Eigen/Dense>

namespace dagforge {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

void require_same_shape(const Array& a, const Array& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
}

Tape& common_tape(Var a, Var b) {
    if (&a.tape() != &b.tape()) throw std::invalid_argument("operands recorded on different tapes");
    return a.tape();
}

}  // namespace

bool all_finite(const Array& a) { return a.allFinite(); }

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double log_sum_exp(std::span<const double> values) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : values) m = std::max(m, v);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double v : values) s += std::exp(v - m);
    return m + std::log(s);
}

double huber(double residual, double delta) {
    if (!(delta > 0)) throw std::invalid_argument("huber: delta must be positive");
    const double a = std::abs(residual);
    return a <= delta ? 0.5 * residual * residual : delta * (a - 0.5 * delta);
}

std::vector<double> masked_log_softmax(std::span<const double> logits, std::span<const bool> mask) {
    if (logits.size() != mask.size()) throw std::invalid_argument("masked_log_softmax: shape mismatch");
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < logits.size(); ++k)
        if (mask[k]) m = std::max(m, logits[k]);
    if (m == -std::numeric_limits<double>::infinity()) throw std::invalid_argument("no valid action");
    double s = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k)
        if (mask[k]) s += std::exp(logits[k] - m);
    const double lse = m + std::log(s);
    std::vector<double> out(logits.size(), kMaskedLogProb);
    for (std::size_t k = 0; k < logits.size(); ++k)
        if (mask[k]) out[k] = logits[k] - lse;
    return out;
}

double gaussian_diag_log_density(const Vector& x, const Vector& mean, const Vector& var) {
    if (x.size() != mean.size() || x.size() != var.size())
        throw std::invalid_argument("gaussian_diag_log_density: shape mismatch");
    double total = 0.0;
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        if (!(var[k] > 0)) throw std::invalid_argument("gaussian_diag_log_density: variance must be positive");
        const double r = x[k] - mean[k];
        total += -0.5 * (kLog2Pi + std::log(var[k])) - r * r / (2.0 * var[k]);
    }
    return total;
}

double gaussian_full_log_density(const Vector& x, const Vector& mean, const Eigen::MatrixXd& scale_lower) {
    const Eigen::Index n = x.size();
    if (mean.size() != n || scale_lower.rows() != n || scale_lower.cols() != n)
        throw std::invalid_argument("gaussian_full_log_density: shape mismatch");
    double log_det = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
        if (!(scale_lower(k, k) > 0))
            throw std::invalid_argument("gaussian_full_log_density: factor diagonal must be positive");
        log_det += std::log(scale_lower(k, k));
    }
    const Eigen::MatrixXd lower = scale_lower.triangularView<Eigen::Lower>();
    const Vector z = lower.triangularView<Eigen::Lower>().solve(x - mean);
    return -0.5 * static_cast<double>(n) * kLog2Pi - log_det - 0.5 * z.squaredNorm();
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

const Array& Var::value() const { return tape_->value(*this); }

double Var::scalar() const {
    const Array& v = value();
    if (v.size() != 1) throw std::invalid_argument("Var::scalar on non-scalar node");
    return v(0, 0);
}

Var Tape::input(Array value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    n.is_leaf = true;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Array value) {
    Node n;
    n.value = std::move(value);
    n.is_leaf = true;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::scalar_constant(double v) {
    Array a(1, 1);
    a(0, 0) = v;
    return constant(std::move(a));
}

Tape::Inputs Tape::gather_inputs(const Node& n) const {
    Inputs in;
    in.reserve(n.inputs.size());
    for (int id : n.inputs) in.push_back(&nodes_[static_cast<std::size_t>(id)].value);
    return in;
}

Var Tape::record(std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
    Node n;
    n.inputs.reserve(inputs.size());
    for (const Var& v : inputs) {
        if (&v.tape() != this) throw std::invalid_argument("input recorded on a different tape");
        n.inputs.push_back(v.id());
        n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(v.id())].requires_grad;
    }
    n.value = forward(gather_inputs(n));
    n.forward = std::move(forward);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::set_leaf(Var leaf, Array value) {
    Node& n = nodes_.at(static_cast<std::size_t>(leaf.id()));
    if (!n.is_leaf) throw std::invalid_argument("set_leaf on a non-leaf node");
    n.value = std::move(value);
}

void Tape::replay() {
    for (Node& n : nodes_) {
        if (n.is_leaf) continue;
        n.value = n.forward(gather_inputs(n));
    }
}

std::vector<Array> Tape::grad(Var output, std::span<const Var> inputs) {
    const Array& out = value(output);
    if (out.rows() != 1 || out.cols() != 1) throw std::invalid_argument("grad: output node must be a scalar");

    const auto count = static_cast<std::size_t>(output.id()) + 1;
    std::vector<bool> keep(count, false);
    for (const Var& v : inputs)
        if (static_cast<std::size_t>(v.id()) < count) keep[static_cast<std::size_t>(v.id())] = true;
    std::vector<Array> grads(count);
    std::vector<bool> reached(count, false);
    grads[count - 1] = Array::Ones(1, 1);
    reached[count - 1] = true;
    last_visits_ = 0;

    for (std::size_t idx = count; idx-- > 0;) {
        if (!reached[idx]) continue;
        const Node& n = nodes_[idx];
        if (n.is_leaf || !n.requires_grad) continue;
        ++last_visits_;
        std::vector<Array*> gin(n.inputs.size(), nullptr);
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const auto pid = static_cast<std::size_t>(n.inputs[k]);
            if (!nodes_[pid].requires_grad) continue;
            if (!reached[pid]) {
                grads[pid] = Array::Zero(nodes_[pid].value.rows(), nodes_[pid].value.cols());
                reached[pid] = true;
            }
            gin[k] = &grads[pid];
        }
        n.backward(gather_inputs(n), n.value, grads[idx], gin);
        if (!keep[idx]) grads[idx] = Array();  // release intermediate storage
    }

    std::vector<Array> result;
    result.reserve(inputs.size());
    for (const Var& v : inputs) {
        const auto id = static_cast<std::size_t>(v.id());
        const Array& val = nodes_.at(id).value;
        if (id < count && reached[id] && grads[id].size() == val.size()) {
            result.push_back(grads[id]);
        } else {
            result.push_back(Array::Zero(val.rows(), val.cols()));
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "add");
    return common_tape(a, b).record(
        {a, b}, [](const Tape::Inputs& in) -> Array { return *in[0] + *in[1]; },
        [](const Tape::Inputs&, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += g;
            if (gi[1]) *gi[1] += g;
        });
}

Var sub(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "sub");
    return common_tape(a, b).record(
        {a, b}, [](const Tape::Inputs& in) -> Array { return *in[0] - *in[1]; },
        [](const Tape::Inputs&, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += g;
            if (gi[1]) *gi[1] -= g;
        });
}

Var mul(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "mul");
    return common_tape(a, b).record(
        {a, b}, [](const Tape::Inputs& in) -> Array { return in[0]->cwiseProduct(*in[1]); },
        [](const Tape::Inputs& in, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += g.cwiseProduct(*in[1]);
            if (gi[1]) *gi[1] += g.cwiseProduct(*in[0]);
        });
}

Var div(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "div");
    return common_tape(a, b).record(
        {a, b}, [](const Tape::Inputs& in) -> Array { return in[0]->cwiseQuotient(*in[1]); },
        [](const Tape::Inputs& in, const Array& out, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += g.cwiseQuotient(*in[1]);
            if (gi[1]) *gi[1] -= g.cwiseProduct(out).cwiseQuotient(*in[1]);
        });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c) {
    return a.tape().record(
        {a}, [c](const Tape::Inputs& in) -> Array { return *in[0] * c; },
        [c](const Tape::Inputs&, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += g * c;
        });
}

Var add_scalar(Var a, double c) {
    return a.tape().record(
        {a}, [c](const Tape::Inputs& in) -> Array { return (in[0]->array() + c).matrix(); },
        [](const Tape::Inputs&, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += g;
        });
}

Var matmul(Var a, Var b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    return common_tape(a, b).record(
        {a, b}, [](const Tape::Inputs& in) -> Array { return (*in[0]) * (*in[1]); },
        [](const Tape::Inputs& in, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) gi[0]->noalias() += g * in[1]->transpose();
            if (gi[1]) gi[1]->noalias() += in[0]->transpose() * g;
        });
}

Var add_row(Var a, Var row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
    return common_tape(a, row).record(
        {a, row},
        [](const Tape::Inputs& in) -> Array {
            Array out = *in[0];
            out.rowwise() += in[1]->row(0);
            return out;
        },
        [](const Tape::Inputs&, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += g;
            if (gi[1]) *gi[1] += g.colwise().sum();
        });
}

Var relu(Var a) {
    return a.tape().record(
        {a}, [](const Tape::Inputs& in) -> Array { return in[0]->cwiseMax(0.0); },
        [](const Tape::Inputs& in, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += (in[0]->array() > 0.0).select(g, 0.0).matrix();
        });
}

Var sigmoid(Var a) {
    return a.tape().record(
        {a}, [](const Tape::Inputs& in) -> Array { return in[0]->unaryExpr([](double x) { return sigmoid(x); }); },
        [](const Tape::Inputs&, const Array& out, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += (g.array() * out.array() * (1.0 - out.array())).matrix();
        });
}

Var softplus(Var a) {
    return a.tape().record(
        {a}, [](const Tape::Inputs& in) -> Array { return in[0]->unaryExpr([](double x) { return softplus(x); }); },
        [](const Tape::Inputs& in, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += g.cwiseProduct(in[0]->unaryExpr([](double x) { return sigmoid(x); }));
        });
}

Var exp(Var a) {
    return a.tape().record(
        {a}, [](const Tape::Inputs& in) -> Array { return in[0]->array().exp().matrix(); },
        [](const Tape::Inputs&, const Array& out, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += g.cwiseProduct(out);
        });
}

Var log(Var a) {
    return a.tape().record(
        {a}, [](const Tape::Inputs& in) -> Array { return in[0]->array().log().matrix(); },
        [](const Tape::Inputs& in, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += g.cwiseQuotient(*in[0]);
        });
}

Var sqrt(Var a) {
    return a.tape().record(
        {a}, [](const Tape::Inputs& in) -> Array { return in[0]->array().sqrt().matrix(); },
        [](const Tape::Inputs&, const Array& out, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += (0.5 * g.array() / out.array()).matrix();
        });
}

Var square(Var a) {
    return a.tape().record(
        {a}, [](const Tape::Inputs& in) -> Array { return in[0]->array().square().matrix(); },
        [](const Tape::Inputs& in, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += 2.0 * g.cwiseProduct(*in[0]);
        });
}

Var huber(Var a, double delta) {
    if (!(delta > 0)) throw std::invalid_argument("huber: delta must be positive");
    return a.tape().record(
        {a}, [delta](const Tape::Inputs& in) -> Array { return in[0]->unaryExpr([delta](double r) { return huber(r, delta); }); },
        [delta](const Tape::Inputs& in, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += g.cwiseProduct(in[0]->unaryExpr([delta](double r) { return std::clamp(r, -delta, delta); }));
        });
}

Var sum(Var a) {
    return a.tape().record(
        {a},
        [](const Tape::Inputs& in) -> Array {
            Array out(1, 1);
            out(0, 0) = in[0]->sum();
            return out;
        },
        [](const Tape::Inputs&, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) gi[0]->array() += g(0, 0);
        });
}

Var mean(Var a) {
    const auto n = static_cast<double>(a.value().size());
    if (n == 0) throw std::invalid_argument("mean of an empty array");
    return scale(sum(a), 1.0 / n);
}

Var row_sum(Var a) {
    return a.tape().record(
        {a}, [](const Tape::Inputs& in) -> Array { return in[0]->rowwise().sum(); },
        [](const Tape::Inputs&, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) gi[0]->colwise() += g.col(0);
        });
}

Var block_sum_rows(Var a, int block) {
    if (block <= 0 || a.rows() % block != 0) throw std::invalid_argument("block_sum_rows: rows not divisible by block");
    return a.tape().record(
        {a},
        [block](const Tape::Inputs& in) -> Array {
            const Eigen::Index groups = in[0]->rows() / block;
            Array out(groups, in[0]->cols());
            for (Eigen::Index gidx = 0; gidx < groups; ++gidx)
                out.row(gidx) = in[0]->middleRows(gidx * block, block).colwise().sum();
            return out;
        },
        [block](const Tape::Inputs&, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (!gi[0]) return;
            for (Eigen::Index gidx = 0; gidx < g.rows(); ++gidx)
                gi[0]->middleRows(gidx * block, block).rowwise() += g.row(gidx);
        });
}

Var block_mean_rows(Var a, int block) { return scale(block_sum_rows(a, block), 1.0 / block); }

Var tile_rows(Var a, int times) {
    if (times <= 0) throw std::invalid_argument("tile_rows: times must be positive");
    return a.tape().record(
        {a}, [times](const Tape::Inputs& in) -> Array { return in[0]->replicate(times, 1); },
        [times](const Tape::Inputs& in, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (!gi[0]) return;
            const Eigen::Index r = in[0]->rows();
            for (int t = 0; t < times; ++t) *gi[0] += g.middleRows(t * r, r);
        });
}

Var reshape(Var a, int rows, int cols) {
    if (static_cast<Eigen::Index>(rows) * cols != a.value().size()) throw std::invalid_argument("reshape: size mismatch");
    return a.tape().record(
        {a},
        [rows, cols](const Tape::Inputs& in) -> Array {
            return Eigen::Map<const Array>(in[0]->data(), rows, cols);
        },
        [](const Tape::Inputs& in, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += Eigen::Map<const Array>(g.data(), in[0]->rows(), in[0]->cols());
        });
}

Var transpose(Var a) {
    return a.tape().record(
        {a}, [](const Tape::Inputs& in) -> Array { return in[0]->transpose(); },
        [](const Tape::Inputs&, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += g.transpose();
        });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const Eigen::Index rows = parts.front().rows();
    for (const Var& p : parts) {
        if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        if (&p.tape() != &parts.front().tape()) throw std::invalid_argument("concat_cols: mixed tapes");
    }
    return parts.front().tape().record(
        parts,
        [](const Tape::Inputs& in) -> Array {
            Eigen::Index cols = 0;
            for (const Array* a : in) cols += a->cols();
            Array out(in.front()->rows(), cols);
            Eigen::Index c = 0;
            for (const Array* a : in) {
                out.middleCols(c, a->cols()) = *a;
                c += a->cols();
            }
            return out;
        },
        [](const Tape::Inputs& in, const Array&, const Array& g, std::vector<Array*>& gi) {
            Eigen::Index c = 0;
            for (std::size_t k = 0; k < in.size(); ++k) {
                if (gi[k]) *gi[k] += g.middleCols(c, in[k]->cols());
                c += in[k]->cols();
            }
        });
}

Var slice_cols(Var a, int start, int count) {
    if (start < 0 || count < 0 || start + count > a.cols()) throw std::invalid_argument("slice_cols: out of range");
    return a.tape().record(
        {a}, [start, count](const Tape::Inputs& in) -> Array { return in[0]->middleCols(start, count); },
        [start, count](const Tape::Inputs&, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) gi[0]->middleCols(start, count) += g;
        });
}

Var gather(Var a, std::vector<std::pair<int, int>> index) {
    for (const auto& [r, c] : index)
        if (r < 0 || c < 0 || r >= a.rows() || c >= a.cols()) throw std::invalid_argument("gather: index out of range");
    return a.tape().record(
        {a},
        [index](const Tape::Inputs& in) -> Array {
            Array out(static_cast<Eigen::Index>(index.size()), 1);
            for (std::size_t k = 0; k < index.size(); ++k)
                out(static_cast<Eigen::Index>(k), 0) = (*in[0])(index[k].first, index[k].second);
            return out;
        },
        [index](const Tape::Inputs&, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (!gi[0]) return;
            for (std::size_t k = 0; k < index.size(); ++k)
                (*gi[0])(index[k].first, index[k].second) += g(static_cast<Eigen::Index>(k), 0);
        });
}

Var overwrite(Var a, Mask where, double value) {
    if (where.rows() != a.rows() || where.cols() != a.cols()) throw std::invalid_argument("overwrite: shape mismatch");
    return a.tape().record(
        {a}, [where, value](const Tape::Inputs& in) -> Array { return where.select(Array::Constant(in[0]->rows(), in[0]->cols(), value), *in[0]); },
        [where](const Tape::Inputs&, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) *gi[0] += where.select(Array::Zero(g.rows(), g.cols()), g);
        });
}

Var detach(Var a) { return a.tape().constant(a.value()); }

Var masked_log_softmax_rows(Var logits, Mask mask, bool allow_empty_rows) {
    if (mask.rows() != logits.rows() || mask.cols() != logits.cols())
        throw std::invalid_argument("masked_log_softmax_rows: shape mismatch");
    for (Eigen::Index r = 0; r < mask.rows(); ++r)
        if (!mask.row(r).any() && !allow_empty_rows) throw std::invalid_argument("no valid action");
    return logits.tape().record(
        {logits},
        [mask](const Tape::Inputs& in) -> Array {
            const Array& x = *in[0];
            Array out = Array::Constant(x.rows(), x.cols(), kMaskedLogProb);
            for (Eigen::Index r = 0; r < x.rows(); ++r) {
                double m = -std::numeric_limits<double>::infinity();
                for (Eigen::Index c = 0; c < x.cols(); ++c)
                    if (mask(r, c)) m = std::max(m, x(r, c));
                if (m == -std::numeric_limits<double>::infinity()) continue;
                double s = 0.0;
                for (Eigen::Index c = 0; c < x.cols(); ++c)
                    if (mask(r, c)) s += std::exp(x(r, c) - m);
                const double lse = m + std::log(s);
                for (Eigen::Index c = 0; c < x.cols(); ++c)
                    if (mask(r, c)) out(r, c) = x(r, c) - lse;
            }
            return out;
        },
        [mask](const Tape::Inputs&, const Array& out, const Array& g, std::vector<Array*>& gi) {
            if (!gi[0]) return;
            for (Eigen::Index r = 0; r < out.rows(); ++r) {
                double gsum = 0.0;
                for (Eigen::Index c = 0; c < out.cols(); ++c)
                    if (mask(r, c)) gsum += g(r, c);
                for (Eigen::Index c = 0; c < out.cols(); ++c)
                    if (mask(r, c)) (*gi[0])(r, c) += g(r, c) - std::exp(out(r, c)) * gsum;
            }
        });
}

Var graph_aggregate(Var h, std::vector<std::uint8_t> adjacency, int d, bool from_parents) {
    if (d <= 0 || h.rows() % d != 0) throw std::invalid_argument("graph_aggregate: rows not divisible by d");
    const Eigen::Index graphs = h.rows() / d;
    if (static_cast<Eigen::Index>(adjacency.size()) != graphs * d * d)
        throw std::invalid_argument("graph_aggregate: adjacency size mismatch");
    auto apply = [d, from_parents](const std::vector<std::uint8_t>& adj, const Array& src, Array& dst, bool transpose) {
        const Eigen::Index graphs_n = src.rows() / d;
        for (Eigen::Index gidx = 0; gidx < graphs_n; ++gidx) {
            const std::uint8_t* a = adj.data() + gidx * d * d;
            const Eigen::Index base = gidx * d;
            for (int i = 0; i < d; ++i) {
                for (int j = 0; j < d; ++j) {
                    if (!a[i * d + j]) continue;
                    // edge i -> j
                    int to = from_parents ? j : i;
                    int from = from_parents ? i : j;
                    if (transpose) std::swap(to, from);
                    dst.row(base + to) += src.row(base + from);
                }
            }
        }
    };
    return h.tape().record(
        {h},
        [adjacency, apply](const Tape::Inputs& in) -> Array {
            Array out = Array::Zero(in[0]->rows(), in[0]->cols());
            apply(adjacency, *in[0], out, false);
            return out;
        },
        [adjacency, apply](const Tape::Inputs&, const Array&, const Array& g, std::vector<Array*>& gi) {
            if (gi[0]) apply(adjacency, g, *gi[0], true);
        });
}

Var block_attention(Var q, Var k, Var v, int block) {
    if (q.rows() != k.rows() || q.rows() != v.rows() || q.cols() != k.cols())
        throw std::invalid_argument("block_attention: shape mismatch");
    if (block <= 0 || q.rows() % block != 0) throw std::invalid_argument("block_attention: rows not divisible by block");
    Tape& t = common_tape(q, k);
    if (&t != &v.tape()) throw std::invalid_argument("block_attention: mixed tapes");
    const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    auto probs = [s, block](const Array& qa, const Array& ka, Eigen::Index base) {
        Array p = qa.middleRows(base, block) * ka.middleRows(base, block).transpose() * s;
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
            const double m = p.row(r).maxCoeff();
            p.row(r) = (p.row(r).array() - m).exp().matrix();
            p.row(r) /= p.row(r).sum();
        }
        return p;
    };
    return t.record(
        {q, k, v},
        [probs, block](const Tape::Inputs& in) -> Array {
            Array out(in[2]->rows(), in[2]->cols());
            for (Eigen::Index base = 0; base < in[0]->rows(); base += block)
                out.middleRows(base, block).noalias() = probs(*in[0], *in[1], base) * in[2]->middleRows(base, block);
            return out;
        },
        [probs, block, s](const Tape::Inputs& in, const Array&, const Array& g, std::vector<Array*>& gi) {
            for (Eigen::Index base = 0; base < in[0]->rows(); base += block) {
                const Array p = probs(*in[0], *in[1], base);
                const auto go = g.middleRows(base, block);
                if (gi[2]) gi[2]->middleRows(base, block).noalias() += p.transpose() * go;
                if (!gi[0] && !gi[1]) continue;
                const Array dp = go * in[2]->middleRows(base, block).transpose();
                Array ds = p.cwiseProduct(dp);
                const Eigen::VectorXd rows_dot = ds.rowwise().sum();
                ds -= p.cwiseProduct(rows_dot.replicate(1, p.cols()));
                if (gi[0]) gi[0]->middleRows(base, block).noalias() += s * ds * in[1]->middleRows(base, block);
                if (gi[1]) gi[1]->middleRows(base, block).noalias() += s * ds.transpose() * in[0]->middleRows(base, block);
            }
        });
}

Var block_bilinear(Var u, Var v, int block) {
    if (u.rows() != v.rows() || u.cols() != v.cols()) throw std::invalid_argument("block_bilinear: shape mismatch");
    if (block <= 0 || u.rows() % block != 0) throw std::invalid_argument("block_bilinear: rows not divisible by block");
    return common_tape(u, v).record(
        {u, v},
        [block](const Tape::Inputs& in) -> Array {
            const Eigen::Index graphs = in[0]->rows() / block;
            Array out(graphs, block * block);
            for (Eigen::Index gidx = 0; gidx < graphs; ++gidx) {
                const Array sc = in[0]->middleRows(gidx * block, block) * in[1]->middleRows(gidx * block, block).transpose();
                out.row(gidx) = Eigen::Map<const Eigen::RowVectorXd>(sc.data(), block * block);
            }
            return out;
        },
        [block](const Tape::Inputs& in, const Array&, const Array& g, std::vector<Array*>& gi) {
            for (Eigen::Index gidx = 0; gidx < g.rows(); ++gidx) {
                Array gs(block, block);
                Eigen::Map<Eigen::RowVectorXd>(gs.data(), block * block) = g.row(gidx);
                const Eigen::Index base = gidx * block;
                if (gi[0]) gi[0]->middleRows(base, block).noalias() += gs * in[1]->middleRows(base, block);
                if (gi[1]) gi[1]->middleRows(base, block).noalias() += gs.transpose() * in[0]->middleRows(base, block);
            }
        });
}

Var masked_tril_gaussian_log_density(Var mean, Var factor, Array x, Mask active) {
    const Eigen::Index rows = mean.rows();
    const Eigen::Index p = mean.cols();
    if (factor.rows() != rows || factor.cols() != p * p || x.rows() != rows || x.cols() != p ||
        active.rows() != rows || active.cols() != p)
        throw std::invalid_argument("masked_tril_gaussian_log_density: shape mismatch");

    // Extracts the active sub-block of one row's factor and the residual.
    struct Block {
        std::vector<Eigen::Index> idx;
        Eigen::MatrixXd l;
        Eigen::VectorXd r;
    };
    auto extract = [p](const Array& mu, const Array& fac, const Array& xv, const Mask& act, Eigen::Index row) {
        Block b;
        for (Eigen::Index k = 0; k < p; ++k)
            if (act(row, k)) b.idx.push_back(k);
        const auto n = static_cast<Eigen::Index>(b.idx.size());
        b.l = Eigen::MatrixXd::Zero(n, n);
        b.r.resize(n);
        for (Eigen::Index a = 0; a < n; ++a) {
            b.r[a] = xv(row, b.idx[a]) - mu(row, b.idx[a]);
            for (Eigen::Index c = 0; c <= a; ++c) b.l(a, c) = fac(row, b.idx[a] * p + b.idx[c]);
        }
        return b;
    };
    return common_tape(mean, factor).record(
        {mean, factor},
        [x, active, extract](const Tape::Inputs& in) -> Array {
            Array out(in[0]->rows(), 1);
            for (Eigen::Index row = 0; row < in[0]->rows(); ++row) {
                const Block b = extract(*in[0], *in[1], x, active, row);
                const auto n = static_cast<Eigen::Index>(b.idx.size());
                double val = -0.5 * static_cast<double>(n) * kLog2Pi;
                for (Eigen::Index a = 0; a < n; ++a) val -= std::log(b.l(a, a));
                if (n > 0) val -= 0.5 * b.l.triangularView<Eigen::Lower>().solve(b.r).squaredNorm();
                out(row, 0) = val;
            }
            return out;
        },
        [x, active, extract, p](const Tape::Inputs& in, const Array&, const Array& g, std::vector<Array*>& gi) {
            for (Eigen::Index row = 0; row < in[0]->rows(); ++row) {
                const Block b = extract(*in[0], *in[1], x, active, row);
                const auto n = static_cast<Eigen::Index>(b.idx.size());
                if (n == 0) continue;
                const double up = g(row, 0);
                const Eigen::VectorXd z = b.l.triangularView<Eigen::Lower>().solve(b.r);
                const Eigen::VectorXd w = b.l.transpose().triangularView<Eigen::Upper>().solve(z);  // L^-T z
                if (gi[0]) {
                    // d/dmean = +L^-T z
                    for (Eigen::Index a = 0; a < n; ++a) (*gi[0])(row, b.idx[a]) += up * w[a];
                }
                if (gi[1]) {
                    const Eigen::MatrixXd gl = w * z.transpose();
                    for (Eigen::Index a = 0; a < n; ++a) {
                        for (Eigen::Index c = 0; c <= a; ++c) {
                            double v = gl(a, c);
                            if (a == c) v -= 1.0 / b.l(a, a);
                            (*gi[1])(row, b.idx[a] * p + b.idx[c]) += up * v;
                        }
                    }
                }
            }
        });
}

}  // namespace dagforge
