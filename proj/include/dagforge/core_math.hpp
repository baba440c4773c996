#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace dagforge {

/// Dense row-major array of doubles. Every tensor in the library (policy
/// weights, embeddings, activations) is stored as one of these.
using Array = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Log-probability assigned to masked entries. Finite so that arithmetic on it
/// never produces NaN; the probability it stands for is exactly zero.
inline constexpr double kMaskedLogProb = std::numeric_limits<double>::lowest();

inline bool is_masked_log_prob(double v) { return v <= kMaskedLogProb / 2; }

bool all_finite(const Array& a);

// ---------------------------------------------------------------------------
// Scalar helpers
// ---------------------------------------------------------------------------

double sigmoid(double x);
double softplus(double x);
double log_sum_exp(std::span<const double> values);

/// Huber loss: quadratic within `delta`, linear outside. delta must be > 0.
double huber(double residual, double delta);

/// Log-softmax restricted to the entries where `mask` is true. Masked entries
/// receive kMaskedLogProb. Throws std::invalid_argument("no valid action")
/// when the mask has no true entry.
std::vector<double> masked_log_softmax(std::span<const double> logits, std::span<const bool> mask);

/// Sum over k of log N(x_k | mean_k, var_k).
double gaussian_diag_log_density(const Vector& x, const Vector& mean, const Vector& var);

/// log N(x | mean, L L^T) for a lower-triangular `scale_lower` with a strictly
/// positive diagonal. Entries above the diagonal are ignored.
double gaussian_full_log_density(const Vector& x, const Vector& mean, const Eigen::MatrixXd& scale_lower);

// ---------------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------------

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
  public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }
    const Array& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const;

  private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Define-by-run reverse-mode differentiation tape. Nodes are appended in
/// topological order; `grad` sweeps them in reverse. A tape is single-threaded
/// and is rebuilt for every evaluation.
class Tape {
  public:
    using Inputs = std::vector<const Array*>;
    using ForwardFn = std::function<Array(const Inputs&)>;
    /// Accumulates into the (non-null) input gradients given the upstream
    /// gradient of the node output.
    using BackwardFn = std::function<void(const Inputs& in, const Array& out, const Array& grad_out,
                                          std::vector<Array*>& grad_in)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable leaf.
    Var input(Array value);
    /// Non-differentiable leaf.
    Var constant(Array value);
    Var scalar_constant(double v);

    Var record(std::vector<Var> inputs, ForwardFn forward, BackwardFn backward);

    const Array& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id())).value; }
    bool requires_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id())).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Overwrites a leaf value. Call `replay` afterwards to refresh dependants.
    void set_leaf(Var leaf, Array value);

    /// Recomputes every non-leaf node from the current leaf values.
    void replay();

    /// d output / d input for each input. `output` must be 1x1; inputs that do
    /// not influence the output receive exact zeros.
    std::vector<Array> grad(Var output, std::span<const Var> inputs);

    /// Number of nodes whose backward rule ran in the last `grad` call.
    std::size_t last_backward_visits() const { return last_visits_; }

  private:
    struct Node {
        Array value;
        std::vector<int> inputs;
        ForwardFn forward;
        BackwardFn backward;
        bool requires_grad = false;
        bool is_leaf = false;
    };
    Inputs gather_inputs(const Node& n) const;

    std::vector<Node> nodes_;
    std::size_t last_visits_ = 0;
};

// Elementwise and linear-algebra primitives. Binary elementwise ops require
// identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var matmul(Var a, Var b);
/// Adds the 1 x cols row vector `row` to every row of `a`.
Var add_row(Var a, Var row);
Var relu(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var square(Var a);
Var huber(Var a, double delta);
/// Sum of all entries, 1x1.
Var sum(Var a);
/// Mean of all entries, 1x1.
Var mean(Var a);
/// Row sums, rows x 1.
Var row_sum(Var a);
/// Sums consecutive groups of `block` rows: (rows/block) x cols.
Var block_sum_rows(Var a, int block);
Var block_mean_rows(Var a, int block);
Var tile_rows(Var a, int times);
/// Row-major reshape; rows*cols must equal the input size.
Var reshape(Var a, int rows, int cols);
Var transpose(Var a);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, int start, int count);
/// Column vector of the entries a(r, c) for each requested (r, c).
Var gather(Var a, std::vector<std::pair<int, int>> index);
/// Entries where `where` is true are replaced by `value`; no gradient flows
/// through replaced entries.
Var overwrite(Var a, Mask where, double value);
/// Copies the value as a constant: gradients never flow through the result.
Var detach(Var a);

/// Row-wise masked log-softmax. Masked entries become kMaskedLogProb with a
/// hard-zero gradient. Rows with no valid entry throw unless `allow_empty_rows`,
/// in which case the whole row is set to kMaskedLogProb.
Var masked_log_softmax_rows(Var logits, Mask mask, bool allow_empty_rows = false);

/// Neighbourhood sums for a batch of graphs stacked as blocks of `d` rows.
/// `adjacency` holds batch*d*d row-major 0/1 entries, adjacency[i][j] meaning
/// edge i -> j. With `from_parents` row j of the output is the sum of rows i
/// with an edge i -> j; otherwise row i sums its children.
Var graph_aggregate(Var h, std::vector<std::uint8_t> adjacency, int d, bool from_parents);

/// Single-head scaled dot-product self-attention applied independently to each
/// block of `block` rows.
Var block_attention(Var q, Var k, Var v, int block);

/// For each block of `block` rows of u and v, the flattened score matrix
/// U V^T as one output row of length block*block.
Var block_bilinear(Var u, Var v, int block);

/// Per-row Normal log-density with a lower-triangular scale factor restricted
/// to the active coordinates of that row. `mean` is rows x P, `factor` is
/// rows x P*P (row-major P x P per row, upper part ignored), `x` and `active`
/// are rows x P. Returns rows x 1.
Var masked_tril_gaussian_log_density(Var mean, Var factor, Array x, Mask active);

}  // namespace dagforge
