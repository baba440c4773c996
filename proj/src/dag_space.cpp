#include "dagforge/dag_space.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dagforge {

std::size_t AdjacencyKeyHash::operator()(const AdjacencyKey& key) const noexcept {
    std::size_t h = 1469598103934665603ULL;
    for (std::uint64_t w : key) {
        h ^= std::hash<std::uint64_t>{}(w) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    }
    return h;
}

bool DagState::test(const std::vector<std::uint64_t>& bits, int i, int j) const {
    if (i < 0 || j < 0 || i >= d_ || j >= d_) throw std::out_of_range("node index out of range");
    const std::size_t w = static_cast<std::size_t>(i) * words_per_row() + static_cast<std::size_t>(j) / 64;
    return (bits[w] >> (static_cast<unsigned>(j) % 64)) & 1ULL;
}

void DagState::set(std::vector<std::uint64_t>& bits, int i, int j) const {
    const std::size_t w = static_cast<std::size_t>(i) * words_per_row() + static_cast<std::size_t>(j) / 64;
    bits[w] |= 1ULL << (static_cast<unsigned>(j) % 64);
}

DagState DagState::empty(int d) {
    if (d < 1) throw std::invalid_argument("empty_state: d must be at least 1");
    DagState s;
    s.d_ = d;
    s.adjacency_.assign(static_cast<std::size_t>(d) * s.words_per_row(), 0);
    s.closure_ = s.adjacency_;
    for (int i = 0; i < d; ++i) s.set(s.closure_, i, i);
    return s;
}

DagState DagState::from_adjacency(const Mask& adjacency) {
    if (adjacency.rows() != adjacency.cols()) throw std::invalid_argument("adjacency must be square");
    const int d = static_cast<int>(adjacency.rows());
    // Insert edges in a topological order of the target graph; an edge whose
    // insertion is illegal means the input has a cycle or a self-loop.
    std::vector<int> indeg(static_cast<std::size_t>(d), 0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            if (adjacency(i, j)) ++indeg[static_cast<std::size_t>(j)];
    std::vector<int> order;
    std::vector<int> ready;
    for (int j = 0; j < d; ++j)
        if (indeg[static_cast<std::size_t>(j)] == 0) ready.push_back(j);
    while (!ready.empty()) {
        const int v = ready.back();
        ready.pop_back();
        order.push_back(v);
        for (int j = 0; j < d; ++j)
            if (adjacency(v, j) && --indeg[static_cast<std::size_t>(j)] == 0) ready.push_back(j);
    }
    if (static_cast<int>(order.size()) != d) throw std::invalid_argument("adjacency contains a cycle");
    DagState s = empty(d);
    for (int v : order)
        for (int j = 0; j < d; ++j)
            if (adjacency(v, j)) s = apply_add_edge(s, v, j);
    return s;
}

DagState DagState::from_key(int d, const AdjacencyKey& key) {
    DagState probe = empty(d);
    if (key.size() != probe.adjacency_.size()) throw std::invalid_argument("adjacency key size mismatch");
    Mask adj = Mask::Constant(d, d, false);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) adj(i, j) = probe.test(key, i, j);
    return from_adjacency(adj);
}

bool DagState::can_add(int i, int j) const { return i != j && !has_edge(i, j) && !reaches(j, i); }

int DagState::in_degree(int j) const {
    int n = 0;
    for (int i = 0; i < d_; ++i) n += has_edge(i, j) ? 1 : 0;
    return n;
}

DagState DagState::with_edge(int i, int j) const { return apply_add_edge(*this, i, j); }

DagState DagState::without_edge(int i, int j) const {
    if (!has_edge(i, j)) throw std::invalid_argument("without_edge: edge not present");
    Mask adj = adjacency();
    adj(i, j) = false;
    return from_adjacency(adj);
}

std::vector<std::pair<int, int>> DagState::edges() const {
    std::vector<std::pair<int, int>> out;
    for (int i = 0; i < d_; ++i)
        for (int j = 0; j < d_; ++j)
            if (has_edge(i, j)) out.emplace_back(i, j);
    return out;
}

std::vector<int> DagState::parents(int j) const {
    std::vector<int> out;
    for (int i = 0; i < d_; ++i)
        if (has_edge(i, j)) out.push_back(i);
    return out;
}

std::vector<int> DagState::children(int i) const {
    std::vector<int> out;
    for (int j = 0; j < d_; ++j)
        if (has_edge(i, j)) out.push_back(j);
    return out;
}

Mask DagState::adjacency() const {
    Mask m(d_, d_);
    for (int i = 0; i < d_; ++i)
        for (int j = 0; j < d_; ++j) m(i, j) = has_edge(i, j);
    return m;
}

Mask DagState::closure() const {
    Mask m(d_, d_);
    for (int i = 0; i < d_; ++i)
        for (int j = 0; j < d_; ++j) m(i, j) = reaches(i, j);
    return m;
}

std::vector<std::uint8_t> DagState::adjacency_bytes() const {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(d_) * static_cast<std::size_t>(d_), 0);
    for (int i = 0; i < d_; ++i)
        for (int j = 0; j < d_; ++j) out[static_cast<std::size_t>(i * d_ + j)] = has_edge(i, j) ? 1 : 0;
    return out;
}

std::string DagState::to_hex() const {
    // Bit k = i*d + j is the (3 - k%4)-th bit of hex digit k/4.
    static constexpr char kDigits[] = "0123456789abcdef";
    const int bits = d_ * d_;
    std::string out(static_cast<std::size_t>((bits + 3) / 4), '0');
    for (int k = 0; k < bits; ++k) {
        if (!has_edge(k / d_, k % d_)) continue;
        char& c = out[static_cast<std::size_t>(k / 4)];
        const int nibble = static_cast<int>(std::string_view(kDigits).find(c)) | (1 << (3 - k % 4));
        c = kDigits[nibble];
    }
    return out;
}

DagState DagState::from_hex(int d, const std::string& hex) {
    if (d < 1) throw std::invalid_argument("from_hex: d must be at least 1");
    const int bits = d * d;
    if (static_cast<int>(hex.size()) != (bits + 3) / 4) throw std::invalid_argument("from_hex: length mismatch");
    Mask adj = Mask::Constant(d, d, false);
    for (int k = 0; k < bits; ++k) {
        const char c = hex[static_cast<std::size_t>(k / 4)];
        int nibble = 0;
        if (c >= '0' && c <= '9') nibble = c - '0';
        else if (c >= 'a' && c <= 'f') nibble = c - 'a' + 10;
        else if (c >= 'A' && c <= 'F') nibble = c - 'A' + 10;
        else throw std::invalid_argument("from_hex: invalid digit");
        adj(k / d, k % d) = (nibble >> (3 - k % 4)) & 1;
    }
    return from_adjacency(adj);
}

std::string DagState::to_csv() const { return adjacency_to_csv(adjacency()); }

DagState empty_state(int d) { return DagState::empty(d); }

ActionMask action_mask(const DagState& s, int max_parents) {
    const int d = s.num_nodes();
    ActionMask m{Mask::Constant(d, d, false)};
    for (int j = 0; j < d; ++j) {
        if (max_parents >= 0 && s.in_degree(j) >= max_parents) continue;
        for (int i = 0; i < d; ++i) m.valid(i, j) = s.can_add(i, j);
    }
    return m;
}

DagState apply_add_edge(const DagState& s, int i, int j) {
    const int d = s.num_nodes();
    if (i < 0 || j < 0 || i >= d || j >= d || !s.can_add(i, j)) throw std::invalid_argument("illegal transition");
    DagState next = s;
    next.set(next.adjacency_, i, j);
    ++next.num_edges_;
    // Every node reaching i now reaches everything j reaches.
    const std::size_t wpr = next.words_per_row();
    const auto row_j = static_cast<std::size_t>(j) * wpr;
    for (int a = 0; a < d; ++a) {
        if (!s.reaches(a, i)) continue;
        const auto row_a = static_cast<std::size_t>(a) * wpr;
        for (std::size_t w = 0; w < wpr; ++w) next.closure_[row_a + w] |= s.closure_[row_j + w];
    }
    return next;
}

std::vector<DagState> enumerate_parents(const DagState& child) {
    std::vector<DagState> out;
    for (const auto& [i, j] : child.edges()) out.push_back(child.without_edge(i, j));
    return out;
}

double backward_prob(const DagState& parent, const DagState& child) {
    if (parent.num_nodes() != child.num_nodes() || child.num_edges() != parent.num_edges() + 1)
        throw std::invalid_argument("backward_prob: states are not adjacent");
    for (const auto& [i, j] : parent.edges())
        if (!child.has_edge(i, j)) throw std::invalid_argument("backward_prob: states are not adjacent");
    return 1.0 / static_cast<double>(child.num_edges());
}

std::uint64_t count_trajectories(const DagState& s) {
    const int k = s.num_edges();
    if (k > 20) throw std::overflow_error("count_trajectories: K! does not fit in 64 bits");
    std::uint64_t f = 1;
    for (int t = 2; t <= k; ++t) f *= static_cast<std::uint64_t>(t);
    return f;
}

double log_count_trajectories(const DagState& s) { return std::lgamma(static_cast<double>(s.num_edges()) + 1.0); }

std::vector<DagState> sample_backward_trajectory(const DagState& s, Rng& rng) {
    std::vector<DagState> rev{s};
    DagState cur = s;
    while (cur.num_edges() > 0) {
        const auto e = cur.edges();
        const auto& [i, j] = e[rng.index(e.size())];
        cur = cur.without_edge(i, j);
        rev.push_back(cur);
    }
    std::reverse(rev.begin(), rev.end());
    return rev;
}

std::string adjacency_to_csv(const Mask& adjacency) {
    std::ostringstream os;
    for (Eigen::Index i = 0; i < adjacency.rows(); ++i) {
        for (Eigen::Index j = 0; j < adjacency.cols(); ++j) os << (j ? "," : "") << (adjacency(i, j) ? 1 : 0);
        os << '\n';
    }
    return os.str();
}

Mask adjacency_from_csv(const std::string& text) {
    std::vector<std::vector<bool>> rows;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<bool> row;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            if (cell == "1") row.push_back(true);
            else if (cell == "0") row.push_back(false);
            else throw std::invalid_argument("adjacency CSV: entries must be 0 or 1");
        }
        rows.push_back(std::move(row));
    }
    const auto d = static_cast<Eigen::Index>(rows.size());
    Mask m(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
        if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != d)
            throw std::invalid_argument("adjacency CSV: matrix must be square");
        for (Eigen::Index j = 0; j < d; ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    return m;
}

}  // namespace dagforge
