#pragma once
// Evaluation: group-averaged accuracy, QMI from information potentials,
// p% rule, DFPR/DFNR and a silhouette score for representation diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flac/core.hpp"
#include "flac/data.hpp"
#include "flac/log.hpp"
#include "flac/training.hpp"

namespace flac {

struct GroupedPredictions {
    std::vector<int> predicted;
    std::vector<int> y;
    std::vector<int> t;

    std::size_t size() const { return y.size(); }

    void validate() const {
        if (y.empty()) throw std::invalid_argument("predictions: empty");
        if (predicted.size() != y.size() || t.size() != y.size()) {
            throw std::invalid_argument("predictions: predicted, y and t lengths differ");
        }
    }
};

struct Accuracies {
    double overall = 0.0;
    double unbiased = 0.0;
    double bias_conflict = std::numeric_limits<double>::quiet_NaN();
};

// `linked(y)` gives the attribute statistically tied to class y; samples with
// t != linked(y) form the bias-conflicting subset.
template <class Linked = int (*)(int)>
Accuracies accuracies(const GroupedPredictions& p, Linked linked = &linked_color) {
    p.validate();
    Accuracies out;
    std::map<std::pair<int, int>, std::pair<std::size_t, std::size_t>> cells;
    std::size_t hit = 0, conflict_hit = 0, conflict_n = 0, aligned_n = 0;
    std::vector<int> ys, ts;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool ok = p.predicted[i] == p.y[i];
        hit += ok ? 1 : 0;
        auto& c = cells[{p.y[i], p.t[i]}];
        c.first += ok ? 1 : 0;
        ++c.second;
        if (p.t[i] != linked(p.y[i])) {
            conflict_hit += ok ? 1 : 0;
            ++conflict_n;
        } else {
            ++aligned_n;
        }
        ys.push_back(p.y[i]);
        ts.push_back(p.t[i]);
    }
    std::sort(ys.begin(), ys.end());
    ys.erase(std::unique(ys.begin(), ys.end()), ys.end());
    std::sort(ts.begin(), ts.end());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
    // A split without any bias-aligned sample lacks those cells by construction.
    std::size_t expected = 0;
    for (int yv : ys)
        for (int tv : ts) expected += (aligned_n == 0 && tv == linked(yv)) ? 0 : 1;
    if (cells.size() < expected) {
        warn("accuracies: " + std::to_string(expected - cells.size()) +
             " empty (y, t) cells excluded from the unbiased average");
    }
    out.overall = static_cast<double>(hit) / static_cast<double>(p.size());
    double total = 0.0;
    for (const auto& [key, c] : cells) total += static_cast<double>(c.first) / static_cast<double>(c.second);
    out.unbiased = total / static_cast<double>(cells.size());
    if (conflict_n) out.bias_conflict = static_cast<double>(conflict_hit) / static_cast<double>(conflict_n);
    else warn("accuracies: no bias-conflicting samples");
    return out;
}

// ---- QMI ---------------------------------------------------------------------------------

struct QmiOptions {
    bool exclude_diagonal = false;
    std::uint64_t seed = 0;  // used only when t is unbalanced
};

struct QmiPotentials {
    double v_in = 0.0;
    double v_all = 0.0;
    double v_btw = 0.0;
    double value() const { return v_in + v_all - 2.0 * v_btw; }
};

// Rows kept after down-sampling every attribute class to the minority count.
// Selection is a seeded shuffle per class; rows come back in ascending order.
inline std::vector<std::size_t> balanced_rows(std::span<const int> t, std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < t.size(); ++i) by_class[t[i]].push_back(i);
    std::size_t minority = std::numeric_limits<std::size_t>::max();
    for (const auto& [c, rows] : by_class) minority = std::min(minority, rows.size());
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> keep;
    for (auto& [c, rows] : by_class) {
        if (rows.size() > minority) std::shuffle(rows.begin(), rows.end(), rng);
        keep.insert(keep.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(minority));
    }
    std::sort(keep.begin(), keep.end());
    return keep;
}

// Information potentials from a precomputed kernel matrix (N x N, row-major).
inline QmiPotentials qmi_potentials(std::span<const double> k, std::span<const int> t, bool exclude_diagonal) {
    const std::size_t n = t.size();
    if (k.size() != n * n) throw ShapeError("qmi: kernel matrix does not match label count");
    std::map<int, std::size_t> counts;
    for (int v : t) ++counts[v];
    const double nn = static_cast<double>(n);
    double all = 0.0;
    std::vector<double> row_total(n, 0.0);
    std::map<int, double> within;
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
            if (exclude_diagonal && a == b) continue;
            const double v = k[a * n + b];
            row_total[a] += v;
            if (t[a] == t[b]) within[t[a]] += v;
        }
        all += row_total[a];
    }
    std::map<int, double> class_rows;
    for (std::size_t a = 0; a < n; ++a) class_rows[t[a]] += row_total[a];
    QmiPotentials pot;
    for (const auto& [c, jp] : counts) {
        const double w = static_cast<double>(jp) / nn;
        pot.v_in += within[c];
        pot.v_all += w * w * all;
        pot.v_btw += w * class_rows[c];
    }
    pot.v_in /= nn * nn;
    pot.v_all /= nn * nn;
    pot.v_btw /= nn * nn;
    return pot;
}

// Quadratic mutual information between representations (rows of h) and the
// attribute t, with the student's t kernel.
inline double qmi(const Tensor& h, std::span<const int> t, const QmiOptions& options = {}) {
    if (h.rank() != 2 || h.rows() != t.size()) {
        throw ShapeError("qmi: representations " + shape_str(h.shape()) + " vs " + std::to_string(t.size()) +
                         " labels");
    }
    std::map<int, std::size_t> counts;
    for (int v : t) ++counts[v];
    if (counts.size() < 2) throw std::invalid_argument("qmi: undefined for a single attribute class");
    std::size_t lo = t.size(), hi = 0;
    for (const auto& [c, n] : counts) {
        lo = std::min(lo, n);
        hi = std::max(hi, n);
    }
    Tensor x = h;
    std::vector<int> labels(t.begin(), t.end());
    if (lo != hi) {
        warn("qmi: attribute classes unbalanced (" + std::to_string(lo) + " vs " + std::to_string(hi) +
             "), down-sampling to the minority count");
        const auto keep = balanced_rows(t, options.seed);
        {
            NoGradGuard no_grad;
            x = index_select(h.detach(), keep);
        }
        labels.clear();
        for (auto r : keep) labels.push_back(t[r]);
    }
    const Tensor k = pairwise_kernel_matrix(KernelKind::student_t(), x);
    return qmi_potentials(k.data(), labels, options.exclude_diagonal).value();
}

// ---- fairness ------------------------------------------------------------------------------

// min of the two positive-prediction-rate ratios between t = 0 and t = 1.
inline double p_rule(const GroupedPredictions& p, int positive = 1) {
    p.validate();
    std::size_t n0 = 0, n1 = 0, pos0 = 0, pos1 = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p.t[i] != 0 && p.t[i] != 1) throw std::invalid_argument("p_rule: t must be binary (0/1)");
        const bool pos = p.predicted[i] == positive;
        if (p.t[i] == 0) {
            ++n0;
            pos0 += pos ? 1 : 0;
        } else {
            ++n1;
            pos1 += pos ? 1 : 0;
        }
    }
    if (!n0 || !n1) throw std::invalid_argument("p_rule: both attribute groups must be nonempty");
    const double r0 = static_cast<double>(pos0) / static_cast<double>(n0);
    const double r1 = static_cast<double>(pos1) / static_cast<double>(n1);
    if (r0 == 0.0 && r1 == 0.0) throw std::domain_error("p_rule: undefined when neither group has positive predictions");
    if (r0 == 0.0 || r1 == 0.0) return 0.0;
    return std::min(r0 / r1, r1 / r0);
}

struct Mistreatment {
    double dfpr = 0.0;
    double dfnr = 0.0;
    double mistreatment = 0.0;
};

inline Mistreatment dfpr_dfnr(const GroupedPredictions& p) {
    p.validate();
    std::size_t n[2][2] = {}, err[2][2] = {};  // [y][t]
    for (std::size_t i = 0; i < p.size(); ++i) {
        if ((p.y[i] != 0 && p.y[i] != 1) || (p.t[i] != 0 && p.t[i] != 1)) {
            throw std::invalid_argument("dfpr_dfnr: y and t must be binary (0/1)");
        }
        ++n[p.y[i]][p.t[i]];
        err[p.y[i]][p.t[i]] += p.predicted[i] != p.y[i] ? 1 : 0;
    }
    for (int y = 0; y < 2; ++y)
        for (int t = 0; t < 2; ++t)
            if (!n[y][t]) {
                throw std::invalid_argument("dfpr_dfnr: empty conditioning cell (y=" + std::to_string(y) +
                                            ", t=" + std::to_string(t) + ")");
            }
    auto rate = [&](int y, int t) { return static_cast<double>(err[y][t]) / static_cast<double>(n[y][t]); };
    Mistreatment m;
    m.dfpr = rate(0, 1) - rate(0, 0);
    m.dfnr = rate(1, 1) - rate(1, 0);
    m.mistreatment = std::abs(m.dfpr) + std::abs(m.dfnr);
    return m;
}

// Maps multi-class y, t and predictions onto binary groups: label < C/2 -> 1.
inline GroupedPredictions binarize(const GroupedPredictions& p, int n_classes, int n_colors) {
    GroupedPredictions out;
    for (std::size_t i = 0; i < p.size(); ++i) {
        out.predicted.push_back(2 * p.predicted[i] < n_classes ? 1 : 0);
        out.y.push_back(2 * p.y[i] < n_classes ? 1 : 0);
        out.t.push_back(2 * p.t[i] < n_colors ? 1 : 0);
    }
    return out;
}

// ---- representation diagnostics ---------------------------------------------------------

// Mean silhouette coefficient under Euclidean distance; singleton clusters score 0.
inline double silhouette(const Tensor& x, std::span<const int> labels) {
    if (x.rank() != 2 || x.rows() != labels.size()) throw ShapeError("silhouette: rows and labels differ");
    const std::size_t n = x.rows(), d = x.cols();
    std::map<int, std::size_t> counts;
    for (int l : labels) ++counts[l];
    if (counts.size() < 2) throw std::invalid_argument("silhouette: needs at least two clusters");
    const auto data = x.data();
    double total = 0.0;
    std::map<int, double> dist_sum;
    for (std::size_t i = 0; i < n; ++i) {
        dist_sum.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = data[i * d + c] - data[j * d + c];
                s += diff * diff;
            }
            dist_sum[labels[j]] += std::sqrt(s);
        }
        const std::size_t own = counts[labels[i]];
        if (own < 2) continue;
        const double a = dist_sum[labels[i]] / static_cast<double>(own - 1);
        double b = std::numeric_limits<double>::infinity();
        for (const auto& [l, c] : counts)
            if (l != labels[i]) b = std::min(b, dist_sum[l] / static_cast<double>(c));
        const double m = std::max(a, b);
        total += m > 0.0 ? (b - a) / m : 0.0;
    }
    return total / static_cast<double>(n);
}

// ---- full evaluation --------------------------------------------------------------------------

struct EvalReport {
    double acc_overall = 0.0;
    double acc_unbiased = 0.0;
    double acc_bias_conflict = std::numeric_limits<double>::quiet_NaN();
    double qmi = 0.0;
    double p_rule = 0.0;
    double dfpr = 0.0;
    double dfnr = 0.0;
    double mistreatment = 0.0;
};

struct EvalOptions {
    int n_classes = 10;
    int n_colors = 10;
    std::size_t qmi_max_samples = 2000;  // per-class balanced subsample for the O(N^2) estimator
    std::uint64_t seed = 0;
};

inline GroupedPredictions group_predictions(std::span<const ColorGridSample> samples, std::span<const int> predicted) {
    GroupedPredictions g;
    g.predicted.assign(predicted.begin(), predicted.end());
    for (const auto& s : samples) {
        g.y.push_back(s.y);
        g.t.push_back(s.t);
    }
    return g;
}

// Seeded, attribute-balanced subset of at most `max_samples` rows.
inline std::vector<std::size_t> qmi_subset(std::span<const int> t, std::size_t max_samples, std::uint64_t seed) {
    auto keep = balanced_rows(t, seed);
    std::map<int, std::size_t> counts;
    for (int v : t) ++counts[v];
    const std::size_t per_class = keep.size() / counts.size();
    const std::size_t cap = std::max<std::size_t>(1, max_samples / counts.size());
    if (per_class <= cap) return keep;
    std::map<int, std::vector<std::size_t>> by_class;
    for (auto r : keep) by_class[t[r]].push_back(r);
    std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
    std::vector<std::size_t> out;
    for (auto& [c, rows] : by_class) {
        std::shuffle(rows.begin(), rows.end(), rng);
        out.insert(out.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(cap));
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline EvalReport evaluate(const Mlp& model, std::span<const ColorGridSample> samples, const EvalOptions& options) {
    const auto pred = predict(model, samples);
    const auto grouped = group_predictions(samples, pred.labels);
    EvalReport r;
    const auto acc = accuracies(grouped);
    r.acc_overall = acc.overall;
    r.acc_unbiased = acc.unbiased;
    r.acc_bias_conflict = acc.bias_conflict;

    const auto rows = qmi_subset(grouped.t, options.qmi_max_samples, options.seed);
    std::vector<int> t_sub;
    for (auto i : rows) t_sub.push_back(grouped.t[i]);
    {
        NoGradGuard no_grad;
        r.qmi = qmi(index_select(pred.repr, rows), t_sub, {false, options.seed});
    }

    const auto bin = binarize(grouped, options.n_classes, options.n_colors);
    try {
        r.p_rule = p_rule(bin);
    } catch (const std::domain_error&) {
        r.p_rule = std::numeric_limits<double>::quiet_NaN();
    }
    const auto m = dfpr_dfnr(bin);
    r.dfpr = m.dfpr;
    r.dfnr = m.dfnr;
    r.mistreatment = m.mistreatment;
    return r;
}

}  // namespace flac
