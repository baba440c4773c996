#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dagforge/core_math.hpp"
#include "dagforge/random.hpp"

namespace dagforge {

struct AddEdge {
    int source = 0;
    int target = 0;
    bool operator==(const AddEdge&) const = default;
};
struct Stop {
    bool operator==(const Stop&) const = default;
};
using Action = std::variant<AddEdge, Stop>;

/// Packed row-major adjacency bits; identifies a graph.
using AdjacencyKey = std::vector<std::uint64_t>;

struct AdjacencyKeyHash {
    std::size_t operator()(const AdjacencyKey& key) const noexcept;
};

/// valid(i, j) is true iff adding i -> j keeps the graph a DAG and the edge is
/// not already present.
struct ActionMask {
    Mask valid;

    int num_nodes() const { return static_cast<int>(valid.rows()); }
    int count() const { return static_cast<int>(valid.count()); }
    bool any() const { return valid.any(); }
    bool operator()(int i, int j) const { return valid(i, j); }
};

class DagState;
DagState apply_add_edge(const DagState& s, int i, int j);

/// A DAG under construction. Keeps adjacency and the reflexive-transitive
/// closure as bit rows so that cycle checks and insertions are O(d^2/64).
/// Values are immutable once built; `with_edge` returns a new state.
class DagState {
  public:
    DagState() = default;

    static DagState empty(int d);
    /// Builds a state from a d x d 0/1 matrix, verifying acyclicity.
    static DagState from_adjacency(const Mask& adjacency);
    static DagState from_key(int d, const AdjacencyKey& key);
    static DagState from_hex(int d, const std::string& hex);

    int num_nodes() const { return d_; }
    int num_edges() const { return num_edges_; }
    bool has_edge(int i, int j) const { return test(adjacency_, i, j); }
    /// i reaches j through directed edges (reflexive).
    bool reaches(int i, int j) const { return test(closure_, i, j); }
    bool can_add(int i, int j) const;
    int in_degree(int j) const;

    DagState with_edge(int i, int j) const;
    DagState without_edge(int i, int j) const;

    std::vector<std::pair<int, int>> edges() const;
    std::vector<int> parents(int j) const;
    std::vector<int> children(int i) const;
    Mask adjacency() const;
    Mask closure() const;
    /// Row-major 0/1 entries, d*d bytes.
    std::vector<std::uint8_t> adjacency_bytes() const;

    const AdjacencyKey& key() const { return adjacency_; }
    std::string to_hex() const;
    std::string to_csv() const;

    bool operator==(const DagState& other) const { return d_ == other.d_ && adjacency_ == other.adjacency_; }

  private:
    friend DagState apply_add_edge(const DagState& s, int i, int j);

    bool test(const std::vector<std::uint64_t>& bits, int i, int j) const;
    void set(std::vector<std::uint64_t>& bits, int i, int j) const;
    std::size_t words_per_row() const { return (static_cast<std::size_t>(d_) + 63) / 64; }

    int d_ = 0;
    int num_edges_ = 0;
    std::vector<std::uint64_t> adjacency_;  // row-major, each row padded to whole words
    std::vector<std::uint64_t> closure_;
};

DagState empty_state(int d);

/// `max_parents < 0` means unlimited.
ActionMask action_mask(const DagState& s, int max_parents = -1);

/// Throws std::invalid_argument("illegal transition") when (i, j) is masked.
DagState apply_add_edge(const DagState& s, int i, int j);

/// Parents of `child` in the state space: one per edge removal.
std::vector<DagState> enumerate_parents(const DagState& child);

/// Uniform backward transition probability 1 / child.num_edges().
double backward_prob(const DagState& parent, const DagState& child);

/// K! for K = num_edges. Throws std::overflow_error for K > 20.
std::uint64_t count_trajectories(const DagState& s);

/// log K!, valid for any K.
double log_count_trajectories(const DagState& s);

/// G0 -> ... -> s obtained by removing uniformly random edges, returned in
/// forward order (front is the empty graph, back is s).
std::vector<DagState> sample_backward_trajectory(const DagState& s, Rng& rng);

/// Serialize / parse a d x d 0/1 adjacency as comma separated rows.
std::string adjacency_to_csv(const Mask& adjacency);
Mask adjacency_from_csv(const std::string& text);

}  // namespace dagforge
