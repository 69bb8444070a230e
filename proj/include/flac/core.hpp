#pragma once
// Pair-sampled probability matching between a main model's similarities and a
// bias-capturing model's dissimilarities.
//
// For a batch with targets y and (inferred) attribute equality, only pairs
// with equal targets and different attributes (a10) or different targets and
// equal attributes (a01) enter the loss. For each anchor j the main model's
// kernel values K(h_i, h_j) and the bias model's 1 - K(b_i, b_j) over those
// pairs are normalised into distributions and compared with a divergence.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flac/log.hpp"
#include "flac/tensor.hpp"

namespace flac {

inline constexpr double kProbFloor = 1e-12;

// ---- kernels ----------------------------------------------------------------

struct KernelKind {
    enum class Type { student_t, rbf, cosine };

    Type type = Type::student_t;
    double sigma = 1.0;  // rbf bandwidth

    static KernelKind student_t() { return {}; }
    static KernelKind rbf(double sigma = 1.0) {
        if (!(sigma > 0.0)) throw std::invalid_argument("rbf kernel: sigma must be positive");
        return {Type::rbf, sigma};
    }
    static KernelKind cosine() { return {Type::cosine, 1.0}; }

    std::string name() const {
        switch (type) {
            case Type::student_t: return "student_t";
            case Type::rbf: {
                if (sigma == 1.0) return "rbf";
                char buf[64];
                const auto res = std::to_chars(buf, buf + sizeof buf, sigma);
                return "rbf:" + std::string(buf, res.ptr);
            }
            case Type::cosine: return "cosine";
        }
        return "?";
    }

    // Accepts "student_t", "cosine", "rbf" or "rbf:<sigma>".
    static KernelKind parse(std::string_view text) {
        if (text == "student_t" || text == "student-t") return student_t();
        if (text == "cosine") return cosine();
        if (text == "rbf") return rbf();
        if (text.rfind("rbf:", 0) == 0) return rbf(std::stod(std::string(text.substr(4))));
        throw std::invalid_argument("unknown kernel '" + std::string(text) + "'");
    }

    friend bool operator==(const KernelKind&, const KernelKind&) = default;
};

inline double kernel_similarity(const KernelKind& kind, std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("kernel_similarity: dimension mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    }
    switch (kind.type) {
        case KernelKind::Type::student_t:
        case KernelKind::Type::rbf: {
            double sq = 0.0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                const double d = a[k] - b[k];
                sq += d * d;
            }
            if (kind.type == KernelKind::Type::student_t) return 1.0 / (1.0 + std::sqrt(sq));
            return std::exp(-sq / (2.0 * kind.sigma * kind.sigma));
        }
        case KernelKind::Type::cosine: {
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                dot += a[k] * b[k];
                na += a[k] * a[k];
                nb += b[k] * b[k];
            }
            const double denom = std::max(std::sqrt(std::max(na, kProbFloor * kProbFloor)) *
                                              std::sqrt(std::max(nb, kProbFloor * kProbFloor)),
                                          kProbFloor);
            return 0.5 + 0.5 * (dot / denom);
        }
    }
    return 0.0;
}

inline std::span<const double> row_of(const Tensor& x, std::size_t r) {
    const std::size_t w = x.cols();
    return x.data().subspan(r * w, w);
}

// N x N constant kernel matrix over the rows of X.
inline Tensor pairwise_kernel_matrix(const KernelKind& kind, const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("pairwise_kernel_matrix: expected a matrix, got " + shape_str(x.shape()));
    const std::size_t n = x.rows();
    if (n < 2) throw std::invalid_argument("pairwise_kernel_matrix: need at least 2 rows");
    std::vector<double> k(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        k[i * n + i] = kernel_similarity(kind, row_of(x, i), row_of(x, i));
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = kernel_similarity(kind, row_of(x, i), row_of(x, j));
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    return Tensor::matrix(n, n, std::move(k));
}

// ---- pair sets ----------------------------------------------------------------

struct IndexPair {
    std::size_t i = 0;
    std::size_t j = 0;
    friend auto operator<=>(const IndexPair&, const IndexPair&) = default;
};

class BoolMatrix {
public:
    BoolMatrix() = default;
    explicit BoolMatrix(std::size_t n, bool value = false) : n_(n), cells_(n * n, value ? 1 : 0) {}

    // Ground-truth equality of categorical labels.
    static BoolMatrix from_labels(std::span<const int> labels) {
        BoolMatrix m(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i)
            for (std::size_t j = 0; j < labels.size(); ++j) m.set(i, j, labels[i] == labels[j]);
        return m;
    }

    std::size_t size() const { return n_; }
    bool operator()(std::size_t i, std::size_t j) const { return cells_[i * n_ + j] != 0; }
    void set(std::size_t i, std::size_t j, bool v) { cells_[i * n_ + j] = v ? 1 : 0; }

    friend bool operator==(const BoolMatrix&, const BoolMatrix&) = default;

private:
    std::size_t n_ = 0;
    std::vector<std::uint8_t> cells_;
};

struct AttributeEquality {
    BoolMatrix equal;
    double threshold = 0.0;
    bool degenerate = false;
};

// Two samples share the protected attribute when their bias-kernel value is
// strictly above the midpoint of the batch's off-diagonal kernel range.
inline AttributeEquality infer_attribute_equality(const Tensor& kb) {
    if (kb.rank() != 2 || kb.rows() != kb.cols()) {
        throw ShapeError("infer_attribute_equality: expected a square matrix, got " + shape_str(kb.shape()));
    }
    const std::size_t n = kb.rows();
    if (n < 2) throw std::invalid_argument("infer_attribute_equality: need at least 2 samples");
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) {
                lo = std::min(lo, kb.at(i, j));
                hi = std::max(hi, kb.at(i, j));
            }
    AttributeEquality out{BoolMatrix(n), 0.5 * (hi + lo), false};
    for (std::size_t i = 0; i < n; ++i) out.equal.set(i, i, true);
    if (hi - lo < 1e-9) {
        out.degenerate = true;
        warn("infer_attribute_equality: bias kernel values are constant across the batch; "
             "treating all pairs as differing in the protected attribute");
        return out;
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) out.equal.set(i, j, kb.at(i, j) > out.threshold);
    return out;
}

struct PairSets {
    std::vector<IndexPair> a10;  // same target, different attribute
    std::vector<IndexPair> a01;  // different target, same attribute
    std::vector<IndexPair> a11;  // same target, same attribute, i != j
    std::vector<IndexPair> a00;  // different target, different attribute
    std::vector<IndexPair> s;    // a10 followed by a01

    std::size_t total() const { return a10.size() + a01.size() + a11.size() + a00.size(); }
};

inline PairSets build_pair_sets(std::span<const int> y, const BoolMatrix& t_equal) {
    const std::size_t n = y.size();
    if (t_equal.size() != n) {
        throw ShapeError("build_pair_sets: " + std::to_string(n) + " labels but equality matrix of size " +
                         std::to_string(t_equal.size()));
    }
    PairSets sets;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const bool same_y = y[i] == y[j];
            const bool same_t = t_equal(i, j);
            const IndexPair p{i, j};
            if (same_y && !same_t) sets.a10.push_back(p);
            else if (!same_y && same_t) sets.a01.push_back(p);
            else if (same_y) sets.a11.push_back(p);
            else sets.a00.push_back(p);
        }
    }
    sets.s = sets.a10;
    sets.s.insert(sets.s.end(), sets.a01.begin(), sets.a01.end());
    return sets;
}

// ---- distributions --------------------------------------------------------------

// Groups pair positions by anchor (the second index of each pair).
struct AnchorIndex {
    std::vector<std::size_t> anchors;  // distinct anchors in first-seen order
    std::vector<std::size_t> slot;     // pair position -> index into anchors

    explicit AnchorIndex(std::span<const IndexPair> pairs) {
        std::vector<std::size_t> lookup;
        slot.reserve(pairs.size());
        for (const auto& p : pairs) {
            if (p.j >= lookup.size()) lookup.resize(p.j + 1, std::numeric_limits<std::size_t>::max());
            if (lookup[p.j] == std::numeric_limits<std::size_t>::max()) {
                lookup[p.j] = anchors.size();
                anchors.push_back(p.j);
            }
            slot.push_back(lookup[p.j]);
        }
    }
};

struct PairDistribution {
    std::vector<double> prob;  // aligned with the pair list
    bool clamped = false;      // some anchor's denominator fell below the floor
};

namespace detail {

template <class Weight>
PairDistribution normalise_per_anchor(std::span<const IndexPair> pairs, std::size_t n, Weight weight,
                                      const char* who) {
    for (const auto& p : pairs) {
        if (p.i >= n || p.j >= n) throw std::out_of_range(std::string(who) + ": pair index out of range");
    }
    const AnchorIndex index(pairs);
    std::vector<double> totals(index.anchors.size(), 0.0);
    PairDistribution out;
    out.prob.resize(pairs.size());
    for (std::size_t m = 0; m < pairs.size(); ++m) {
        out.prob[m] = weight(pairs[m]);
        totals[index.slot[m]] += out.prob[m];
    }
    for (auto& t : totals) {
        if (t < kProbFloor) {
            t = kProbFloor;
            out.clamped = true;
        }
    }
    if (out.clamped) warn(std::string(who) + ": anchor with vanishing denominator clamped to 1e-12");
    for (std::size_t m = 0; m < pairs.size(); ++m) out.prob[m] /= totals[index.slot[m]];
    return out;
}

inline void require_square(const Tensor& k, const char* who) {
    if (k.rank() != 2 || k.rows() != k.cols()) {
        throw ShapeError(std::string(who) + ": expected a square matrix, got " + shape_str(k.shape()));
    }
}

}  // namespace detail

// p_h(i|j) = K(i,j) / sum_{k:(k,j) in s} K(k,j)
inline PairDistribution similarity_distribution(const Tensor& kh, std::span<const IndexPair> s) {
    detail::require_square(kh, "similarity_distribution");
    return detail::normalise_per_anchor(s, kh.rows(), [&](const IndexPair& p) { return kh.at(p.i, p.j); },
                                        "similarity_distribution");
}

// p_b(i|j) = (1 - K(i,j)) / sum_{k:(k,j) in s} (1 - K(k,j))
inline PairDistribution dissimilarity_distribution(const Tensor& kb, std::span<const IndexPair> s) {
    detail::require_square(kb, "dissimilarity_distribution");
    return detail::normalise_per_anchor(s, kb.rows(), [&](const IndexPair& p) { return 1.0 - kb.at(p.i, p.j); },
                                        "dissimilarity_distribution");
}

// ---- divergences ----------------------------------------------------------------

enum class Divergence { jeffreys, kl, mse };

inline std::string divergence_name(Divergence d) {
    switch (d) {
        case Divergence::jeffreys: return "jeffreys";
        case Divergence::kl: return "kl";
        case Divergence::mse: return "mse";
    }
    return "?";
}

inline Divergence parse_divergence(std::string_view text) {
    if (text == "jeffreys") return Divergence::jeffreys;
    if (text == "kl") return Divergence::kl;
    if (text == "mse") return Divergence::mse;
    throw std::invalid_argument("unknown divergence '" + std::string(text) + "'");
}

// Plain evaluation; kl is KL(p || q), jeffreys is KL(p||q) + KL(q||p).
inline double divergence_value(Divergence kind, std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ShapeError("divergence: mismatched supports");
    double total = 0.0;
    for (std::size_t m = 0; m < p.size(); ++m) {
        const double lp = std::log(std::max(p[m], kProbFloor));
        const double lq = std::log(std::max(q[m], kProbFloor));
        switch (kind) {
            case Divergence::jeffreys: total += (p[m] - q[m]) * (lp - lq); break;
            case Divergence::kl: total += p[m] * (lp - lq); break;
            case Divergence::mse: total += (p[m] - q[m]) * (p[m] - q[m]); break;
        }
    }
    return total;
}

// Differentiable through p_h only; p_b is a constant target.
inline Tensor divergence(Divergence kind, const Tensor& p_b, const Tensor& p_h) {
    if (p_b.numel() != p_h.numel()) {
        throw ShapeError("divergence: mismatched supports " + shape_str(p_b.shape()) + " vs " +
                         shape_str(p_h.shape()));
    }
    const Tensor target = p_b.shape() == p_h.shape() ? p_b : Tensor(p_h.shape(), {p_b.data().begin(), p_b.data().end()});
    std::vector<double> log_target(target.numel());
    for (std::size_t m = 0; m < log_target.size(); ++m) log_target[m] = std::log(std::max(target[m], kProbFloor));
    const Tensor log_b(p_h.shape(), std::move(log_target));
    switch (kind) {
        case Divergence::jeffreys:
            return sum((target - p_h) * (log_b - log(clamp_min(p_h, kProbFloor))));
        case Divergence::kl:
            return sum(target * (log_b - log(clamp_min(p_h, kProbFloor))));
        case Divergence::mse: {
            const Tensor diff = target - p_h;
            return sum(diff * diff);
        }
    }
    throw std::invalid_argument("divergence: unknown kind");
}

// ---- the loss ---------------------------------------------------------------------

// Which halves of the pair condition feed the loss (full S or one term only).
enum class PairTerms { both, same_target_only, same_attribute_only };

inline std::string pair_terms_name(PairTerms t) {
    switch (t) {
        case PairTerms::both: return "both";
        case PairTerms::same_target_only: return "a10_only";
        case PairTerms::same_attribute_only: return "a01_only";
    }
    return "?";
}

inline PairTerms parse_pair_terms(std::string_view text) {
    if (text == "both") return PairTerms::both;
    if (text == "a10_only") return PairTerms::same_target_only;
    if (text == "a01_only") return PairTerms::same_attribute_only;
    throw std::invalid_argument("unknown pair terms '" + std::string(text) + "'");
}

struct FlacOptions {
    KernelKind kernel = KernelKind::student_t();
    Divergence divergence = Divergence::jeffreys;
    PairTerms terms = PairTerms::both;
    bool normalize = false;  // L2-normalise rows of H and B before the kernels
};

// Rows scaled to unit L2 norm (differentiable; zero rows stay near zero).
inline Tensor l2_normalize_rows(const Tensor& x) {
    const Tensor ones = Tensor::full(Shape{x.cols(), 1}, 1.0);
    const Tensor norms = sqrt(clamp_min(matmul(x * x, ones), kProbFloor * kProbFloor));
    return x / matmul(norms, Tensor::full(Shape{1, x.cols()}, 1.0));
}

// Kernel values K(h_i, h_j) for each listed pair as an M x 1 tensor on the tape.
inline Tensor pair_kernel(const KernelKind& kind, const Tensor& h, std::span<const IndexPair> pairs) {
    std::vector<std::size_t> left(pairs.size()), right(pairs.size());
    for (std::size_t m = 0; m < pairs.size(); ++m) {
        left[m] = pairs[m].i;
        right[m] = pairs[m].j;
    }
    const Tensor a = index_select(h, left);
    const Tensor b = index_select(h, right);
    switch (kind.type) {
        case KernelKind::Type::student_t:
            return 1.0 / (1.0 + l2_distance_rowpairs(a, b));
        case KernelKind::Type::rbf: {
            const Tensor d = l2_distance_rowpairs(a, b);
            return exp(d * d * (-1.0 / (2.0 * kind.sigma * kind.sigma)));
        }
        case KernelKind::Type::cosine: {
            const Tensor ones = Tensor::full(Shape{h.cols(), 1}, 1.0);
            const Tensor dot = matmul(a * b, ones);
            const double sq_floor = kProbFloor * kProbFloor;
            const Tensor na = sqrt(clamp_min(matmul(a * a, ones), sq_floor));
            const Tensor nb = sqrt(clamp_min(matmul(b * b, ones), sq_floor));
            const Tensor cos = dot / clamp_min(na * nb, kProbFloor);
            return 0.5 + cos * 0.5;
        }
    }
    throw std::invalid_argument("pair_kernel: unknown kernel");
}

struct FlacLoss {
    Tensor loss = Tensor::scalar(0.0);
    PairSets sets;
    double threshold = 0.0;
    bool degenerate = false;
    std::size_t active_pairs = 0;
};

inline std::vector<IndexPair> select_terms(const PairSets& sets, PairTerms terms) {
    switch (terms) {
        case PairTerms::both: return sets.s;
        case PairTerms::same_target_only: return sets.a10;
        case PairTerms::same_attribute_only: return sets.a01;
    }
    return sets.s;
}

// Loss from a precomputed bias kernel matrix and attribute-equality matrix
// (either inferred, or ground truth in oracle mode).
inline FlacLoss flac_loss_from_equality(const Tensor& h, const Tensor& kb, std::span<const int> y,
                                        const BoolMatrix& t_equal, const FlacOptions& options) {
    if (h.rank() != 2) throw ShapeError("flac_loss: representations must be a matrix, got " + shape_str(h.shape()));
    const std::size_t n = h.rows();
    if (y.size() != n || kb.rows() != n) {
        throw ShapeError("flac_loss: batch size mismatch between representations (" + std::to_string(n) +
                         "), labels (" + std::to_string(y.size()) + ") and bias kernel (" +
                         std::to_string(kb.rows()) + ")");
    }
    FlacLoss out;
    out.sets = build_pair_sets(y, t_equal);
    const std::vector<IndexPair> pairs = select_terms(out.sets, options.terms);
    out.active_pairs = pairs.size();
    if (pairs.empty()) return out;

    const PairDistribution p_b = dissimilarity_distribution(kb, pairs);

    const AnchorIndex index(pairs);
    const std::size_t m = pairs.size();
    const std::size_t anchors = index.anchors.size();
    std::vector<double> grouping(anchors * m, 0.0);
    for (std::size_t k = 0; k < m; ++k) grouping[index.slot[k] * m + k] = 1.0;

    const Tensor kh = pair_kernel(options.kernel, h, pairs);
    const Tensor totals = matmul(Tensor::matrix(anchors, m, std::move(grouping)), kh);
    for (double t : totals.data()) {
        if (t < kProbFloor) {
            warn("flac_loss: anchor with vanishing similarity mass clamped to 1e-12");
            break;
        }
    }
    const Tensor p_h = kh / index_select(clamp_min(totals, kProbFloor), index.slot);
    out.loss = divergence(options.divergence, Tensor(Shape{m, 1}, p_b.prob), p_h);
    return out;
}

// Full mechanism: bias kernel from B, inferred attribute equality, pair sets,
// distributions and divergence. B is read as plain data and never enters the tape.
inline FlacLoss flac_loss_detailed(const Tensor& h, const Tensor& b, std::span<const int> y,
                                   const FlacOptions& options = {}) {
    if (b.rank() != 2 || b.rows() != h.rows()) {
        throw ShapeError("flac_loss: bias representations " + shape_str(b.shape()) +
                         " do not match batch of " + shape_str(h.shape()));
    }
    Tensor kb;
    {
        NoGradGuard no_grad;
        kb = pairwise_kernel_matrix(options.kernel, options.normalize ? l2_normalize_rows(b.detach()) : b);
    }
    AttributeEquality eq = infer_attribute_equality(kb);
    FlacLoss out = flac_loss_from_equality(options.normalize ? l2_normalize_rows(h) : h, kb, y, eq.equal, options);
    out.threshold = eq.threshold;
    out.degenerate = eq.degenerate;
    return out;
}

inline Tensor flac_loss(const Tensor& h, const Tensor& b, std::span<const int> y,
                        const KernelKind& kernel = KernelKind::student_t(),
                        Divergence div = Divergence::jeffreys) {
    return flac_loss_detailed(h, b, y, FlacOptions{kernel, div, PairTerms::both}).loss;
}

// ---- diagnostics -------------------------------------------------------------------

struct SetStats {
    std::size_t count = 0;
    double mean = std::numeric_limits<double>::quiet_NaN();
    double min = std::numeric_limits<double>::quiet_NaN();
    double max = std::numeric_limits<double>::quiet_NaN();
    bool defined() const { return count > 0; }
};

struct PairSetStats {
    SetStats a10, a01, a11, a00;
};

inline SetStats set_stats(const Tensor& k, std::span<const IndexPair> pairs) {
    SetStats st;
    st.count = pairs.size();
    if (pairs.empty()) return st;
    double total = 0.0;
    st.min = std::numeric_limits<double>::infinity();
    st.max = -std::numeric_limits<double>::infinity();
    for (const auto& p : pairs) {
        const double v = k.at(p.i, p.j);
        total += v;
        st.min = std::min(st.min, v);
        st.max = std::max(st.max, v);
    }
    st.mean = total / static_cast<double>(pairs.size());
    return st;
}

inline PairSetStats pair_set_similarity_stats(const Tensor& kh, const PairSets& sets) {
    detail::require_square(kh, "pair_set_similarity_stats");
    return {set_stats(kh, sets.a10), set_stats(kh, sets.a01), set_stats(kh, sets.a11), set_stats(kh, sets.a00)};
}

}  // namespace flac
