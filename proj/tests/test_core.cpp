#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "flac/core.hpp"

using namespace flac;

namespace {

using PairList = std::vector<IndexPair>;

PairList sorted(PairList v) {
    std::sort(v.begin(), v.end());
    return v;
}

Tensor random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<double> v(r * c);
    for (auto& x : v) x = d(rng);
    return Tensor::matrix(r, c, std::move(v));
}

// Bias representations that sit in tight, well-separated clusters per attribute.
Tensor clustered_bias(const std::vector<int>& t, int n_attr, std::mt19937_64& rng, double jitter = 1e-3) {
    std::normal_distribution<double> d(0.0, jitter);
    std::vector<double> v(t.size() * n_attr, 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) {
        for (int k = 0; k < n_attr; ++k) v[i * n_attr + k] = (k == t[i] ? 10.0 : 0.0) + d(rng);
    }
    return Tensor::matrix(t.size(), n_attr, std::move(v));
}

// Naive re-statement of the loss with plain loops: midpoint threshold over Kb,
// S from the pair predicates, per-anchor normalisation, Jeffreys divergence.
double naive_flac(const Tensor& h, const Tensor& b, const std::vector<int>& y) {
    const std::size_t n = y.size();
    auto kt = [](const Tensor& x, std::size_t i, std::size_t j) {
        double sq = 0.0;
        for (std::size_t k = 0; k < x.cols(); ++k) {
            const double d = x.at(i, k) - x.at(j, k);
            sq += d * d;
        }
        return 1.0 / (1.0 + std::sqrt(sq));
    };
    double lo = 1e300, hi = -1e300;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) {
                lo = std::min(lo, kt(b, i, j));
                hi = std::max(hi, kt(b, i, j));
            }
    const double thr = (lo + hi) / 2;
    double loss = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        std::vector<std::size_t> partners;
        for (std::size_t i = 0; i < n; ++i) {
            if (i == j) continue;
            const bool same_t = kt(b, i, j) > thr;
            if ((y[i] == y[j]) != same_t) partners.push_back(i);
        }
        double sh = 0.0, sb = 0.0;
        for (auto i : partners) {
            sh += kt(h, i, j);
            sb += 1.0 - kt(b, i, j);
        }
        for (auto i : partners) {
            const double ph = kt(h, i, j) / sh;
            const double pb = std::max((1.0 - kt(b, i, j)) / sb, 1e-12);
            loss += (pb - ph) * (std::log(pb) - std::log(ph));
        }
    }
    return loss;
}

}  // namespace

// ---- kernels ----

TEST(Kernel, StudentTValues) {
    const auto k = KernelKind::student_t();
    const std::vector<double> a{3, 4}, z{0, 0}, p{0}, q{1};
    EXPECT_DOUBLE_EQ(kernel_similarity(k, a, a), 1.0);
    EXPECT_DOUBLE_EQ(kernel_similarity(k, p, q), 0.5);
    EXPECT_NEAR(kernel_similarity(k, a, z), 1.0 / 6.0, 1e-15);
    EXPECT_THROW(kernel_similarity(k, a, p), ShapeError);
}

TEST(Kernel, AllVariantsInUnitIntervalAndSymmetric) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> d(0.0, 3.0);
    for (const auto& kind : {KernelKind::student_t(), KernelKind::rbf(0.7), KernelKind::cosine()}) {
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> a(4), b(4);
            for (auto& x : a) x = d(rng);
            for (auto& x : b) x = d(rng);
            const double ab = kernel_similarity(kind, a, b);
            EXPECT_GE(ab, 0.0);
            EXPECT_LE(ab, 1.0);
            EXPECT_DOUBLE_EQ(ab, kernel_similarity(kind, b, a));
        }
    }
    const std::vector<double> u{1, 0}, v{-1, 0};
    EXPECT_NEAR(kernel_similarity(KernelKind::cosine(), u, v), 0.0, 1e-15);
    EXPECT_NEAR(kernel_similarity(KernelKind::cosine(), u, u), 1.0, 1e-15);
    EXPECT_NEAR(kernel_similarity(KernelKind::rbf(2.0), u, v), std::exp(-4.0 / 8.0), 1e-15);
}

TEST(Kernel, NamesRoundTrip) {
    for (const auto& kind : {KernelKind::student_t(), KernelKind::rbf(), KernelKind::rbf(0.25), KernelKind::cosine()}) {
        EXPECT_EQ(KernelKind::parse(kind.name()), kind);
    }
    EXPECT_THROW(KernelKind::parse("laplace"), std::invalid_argument);
    EXPECT_THROW(KernelKind::rbf(0.0), std::invalid_argument);
}

TEST(Kernel, PairwiseMatrix) {
    const auto k = pairwise_kernel_matrix(KernelKind::student_t(), Tensor::matrix({{0}, {1}}));
    EXPECT_EQ(std::vector<double>(k.data().begin(), k.data().end()), (std::vector<double>{1, 0.5, 0.5, 1}));
    const auto same = pairwise_kernel_matrix(KernelKind::student_t(), Tensor::matrix({{2, 3}, {2, 3}}));
    for (double v : same.data()) EXPECT_DOUBLE_EQ(v, 1.0);
    EXPECT_THROW(pairwise_kernel_matrix(KernelKind::student_t(), Tensor::matrix({{1, 2}})), std::invalid_argument);

    std::mt19937_64 rng(5);
    const auto x = random_matrix(rng, 6, 3);
    for (const auto& kind : {KernelKind::student_t(), KernelKind::rbf(1.5), KernelKind::cosine()}) {
        const auto km = pairwise_kernel_matrix(kind, x);
        for (std::size_t i = 0; i < 6; ++i) {
            for (std::size_t j = 0; j < 6; ++j) {
                double sq = 0.0, dot = 0.0, ni = 0.0, nj = 0.0;
                for (std::size_t c = 0; c < 3; ++c) {
                    const double a = x.at(i, c), b = x.at(j, c);
                    sq += (a - b) * (a - b);
                    dot += a * b;
                    ni += a * a;
                    nj += b * b;
                }
                double expect = 0.0;
                if (kind.type == KernelKind::Type::student_t) expect = 1.0 / (1.0 + std::sqrt(sq));
                if (kind.type == KernelKind::Type::rbf) expect = std::exp(-sq / (2 * 1.5 * 1.5));
                if (kind.type == KernelKind::Type::cosine) expect = 0.5 + 0.5 * dot / std::sqrt(ni * nj);
                EXPECT_NEAR(km.at(i, j), expect, 1e-14) << kind.name() << " " << i << "," << j;
            }
        }
    }
}

// ---- attribute equality ----

TEST(AttributeEquality, MidpointThresholdIsStrict) {
    // Off-diagonal values {1.0, 0.2}: threshold 0.6.
    const auto kb = Tensor::matrix({{1.0, 1.0, 0.2}, {1.0, 1.0, 0.2}, {0.2, 0.2, 1.0}});
    const auto eq = infer_attribute_equality(kb);
    EXPECT_DOUBLE_EQ(eq.threshold, 0.6);
    EXPECT_FALSE(eq.degenerate);
    EXPECT_TRUE(eq.equal(0, 1));
    EXPECT_FALSE(eq.equal(0, 2));
    EXPECT_TRUE(eq.equal(2, 2));

    // A value sitting exactly on the midpoint is inferred unequal.
    const auto kb2 = Tensor::matrix({{1.0, 1.0, 0.5, 0.0},
                                     {1.0, 1.0, 0.5, 0.0},
                                     {0.5, 0.5, 1.0, 0.0},
                                     {0.0, 0.0, 0.0, 1.0}});
    const auto eq2 = infer_attribute_equality(kb2);
    EXPECT_DOUBLE_EQ(eq2.threshold, 0.5);
    EXPECT_FALSE(eq2.equal(0, 2));
    EXPECT_TRUE(eq2.equal(0, 1));
}

TEST(AttributeEquality, IdenticalBiasPairInferredEqual) {
    const auto b = Tensor::matrix({{0.3, 0.7}, {0.3, 0.7}, {5.0, -2.0}});
    const auto eq = infer_attribute_equality(pairwise_kernel_matrix(KernelKind::student_t(), b));
    EXPECT_TRUE(eq.equal(0, 1));
    EXPECT_TRUE(eq.equal(1, 0));
    EXPECT_FALSE(eq.equal(0, 2));
}

TEST(AttributeEquality, DegenerateBatchWarnsAndTreatsAllUnequal) {
    ScopedWarningCapture capture;
    const auto kb = Tensor::full(Shape{3, 3}, 0.4);
    const auto eq = infer_attribute_equality(kb);
    EXPECT_TRUE(eq.degenerate);
    ASSERT_EQ(capture.messages().size(), 1u);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(eq.equal(i, j), i == j);
}

TEST(AttributeEquality, RecoversClusteredAttributes) {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> pick(0, 3);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<int> t(16);
        for (auto& v : t) v = pick(rng);
        t[0] = 0;
        t[1] = 1;  // at least two attribute values
        const auto b = clustered_bias(t, 4, rng);
        const auto eq = infer_attribute_equality(pairwise_kernel_matrix(KernelKind::student_t(), b));
        EXPECT_EQ(eq.equal, BoolMatrix::from_labels(t));
    }
}

// ---- pair sets ----

TEST(PairSets, WorkedExample) {
    const std::vector<int> y{0, 0, 1, 1}, t{0, 1, 0, 1};
    const auto sets = build_pair_sets(y, BoolMatrix::from_labels(t));
    EXPECT_EQ(sorted(sets.a10), sorted({{0, 1}, {1, 0}, {2, 3}, {3, 2}}));
    EXPECT_EQ(sorted(sets.a01), sorted({{0, 2}, {2, 0}, {1, 3}, {3, 1}}));
    EXPECT_TRUE(sets.a11.empty());
    EXPECT_EQ(sorted(sets.a00), sorted({{0, 3}, {3, 0}, {1, 2}, {2, 1}}));
    EXPECT_EQ(sets.s.size(), 8u);
}

TEST(PairSets, SingleGroupAndAllDistinct) {
    const std::vector<int> same(5, 2);
    const auto one = build_pair_sets(same, BoolMatrix::from_labels(same));
    EXPECT_TRUE(one.a10.empty() && one.a01.empty() && one.a00.empty());
    EXPECT_EQ(one.a11.size(), 20u);

    const std::vector<int> distinct{0, 1, 2, 3};
    const auto all = build_pair_sets(distinct, BoolMatrix::from_labels(distinct));
    EXPECT_EQ(all.a00.size(), 12u);
    EXPECT_TRUE(all.a10.empty() && all.a01.empty() && all.a11.empty());
}

TEST(PairSets, MatchBruteForcePredicates) {
    std::mt19937_64 rng(23);
    std::uniform_int_distribution<int> pick(0, 2);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 3 + trial % 10;
        std::vector<int> y(n), t(n);
        for (auto& v : y) v = pick(rng);
        for (auto& v : t) v = pick(rng);
        PairList a10, a01, a11, a00;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const IndexPair p{i, j};
                if (y[i] == y[j] && t[i] != t[j]) a10.push_back(p);
                if (y[i] != y[j] && t[i] == t[j]) a01.push_back(p);
                if (y[i] == y[j] && t[i] == t[j]) a11.push_back(p);
                if (y[i] != y[j] && t[i] != t[j]) a00.push_back(p);
            }
        const auto sets = build_pair_sets(y, BoolMatrix::from_labels(t));
        EXPECT_EQ(sorted(sets.a10), a10);
        EXPECT_EQ(sorted(sets.a01), a01);
        EXPECT_EQ(sorted(sets.a11), a11);
        EXPECT_EQ(sorted(sets.a00), a00);
        EXPECT_EQ(sets.total(), n * (n - 1));
        PairList s = a10;
        s.insert(s.end(), a01.begin(), a01.end());
        EXPECT_EQ(sorted(sets.s), sorted(s));
    }
}

TEST(PairSets, SizeMismatchThrows) {
    const std::vector<int> y{0, 1, 2};
    EXPECT_THROW(build_pair_sets(y, BoolMatrix(2)), ShapeError);
}

// ---- distributions ----

TEST(Distributions, HandValues) {
    // Anchor 0 with partners 1 and 2.
    const auto k = Tensor::matrix({{1.0, 0.6, 0.2}, {0.6, 1.0, 0.0}, {0.2, 0.0, 1.0}});
    const PairList s{{1, 0}, {2, 0}};
    const auto ph = similarity_distribution(k, s);
    EXPECT_NEAR(ph.prob[0], 0.75, 1e-15);
    EXPECT_NEAR(ph.prob[1], 0.25, 1e-15);
    const auto kb = Tensor::matrix({{1.0, 0.2, 0.6}, {0.2, 1.0, 0.0}, {0.6, 0.0, 1.0}});
    const auto pb = dissimilarity_distribution(kb, s);
    EXPECT_NEAR(pb.prob[0], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(pb.prob[1], 1.0 / 3.0, 1e-15);

    const PairList single{{1, 0}};
    EXPECT_DOUBLE_EQ(similarity_distribution(k, single).prob[0], 1.0);

    const auto kb01 = Tensor::matrix({{1.0, 0.0, 1.0}, {0.0, 1.0, 0.0}, {1.0, 0.0, 1.0}});
    const auto full = dissimilarity_distribution(kb01, s);
    EXPECT_DOUBLE_EQ(full.prob[0], 1.0);
    EXPECT_DOUBLE_EQ(full.prob[1], 0.0);
}

TEST(Distributions, EqualValuesAreUniform) {
    const auto k = Tensor::full(Shape{4, 4}, 0.3);
    const PairList s{{1, 0}, {2, 0}, {3, 0}};
    for (double p : similarity_distribution(k, s).prob) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
    for (double p : dissimilarity_distribution(k, s).prob) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
}

TEST(Distributions, ZeroDenominatorClampsAndWarns) {
    ScopedWarningCapture capture;
    const auto ones = Tensor::full(Shape{3, 3}, 1.0);
    const PairList s{{1, 0}, {2, 0}};
    const auto pb = dissimilarity_distribution(ones, s);
    EXPECT_TRUE(pb.clamped);
    EXPECT_EQ(pb.prob, (std::vector<double>{0.0, 0.0}));
    EXPECT_EQ(capture.messages().size(), 1u);
    const PairList bad{{5, 0}};
    EXPECT_THROW(similarity_distribution(ones, bad), std::out_of_range);
}

TEST(Distributions, PerAnchorNormalisation) {
    std::mt19937_64 rng(29);
    const auto x = random_matrix(rng, 12, 3);
    const auto k = pairwise_kernel_matrix(KernelKind::student_t(), x);
    std::vector<int> y(12), t(12);
    std::uniform_int_distribution<int> pick(0, 2);
    for (auto& v : y) v = pick(rng);
    for (auto& v : t) v = pick(rng);
    const auto sets = build_pair_sets(y, BoolMatrix::from_labels(t));
    const auto ph = similarity_distribution(k, sets.s);
    const auto pb = dissimilarity_distribution(k, sets.s);
    std::map<std::size_t, double> sh, sb;
    for (std::size_t m = 0; m < sets.s.size(); ++m) {
        EXPECT_GE(ph.prob[m], 0.0);
        EXPECT_LE(ph.prob[m], 1.0);
        sh[sets.s[m].j] += ph.prob[m];
        sb[sets.s[m].j] += pb.prob[m];
    }
    for (const auto& [anchor, total] : sh) EXPECT_NEAR(total, 1.0, 1e-9) << anchor;
    for (const auto& [anchor, total] : sb) EXPECT_NEAR(total, 1.0, 1e-9) << anchor;
}

// ---- divergences ----

TEST(Divergence, IdenticalIsZero) {
    const std::vector<double> p{0.2, 0.3, 0.5};
    for (auto kind : {Divergence::jeffreys, Divergence::kl, Divergence::mse}) {
        EXPECT_NEAR(divergence_value(kind, p, p), 0.0, 1e-15);
        EXPECT_NEAR(divergence(kind, Tensor::vector(p), Tensor::vector(p)).item(), 0.0, 1e-15);
    }
}

TEST(Divergence, JeffreysHandValue) {
    const std::vector<double> pb{0.8, 0.2}, ph{0.2, 0.8};
    const double expect = 1.2 * std::log(4.0);
    EXPECT_NEAR(divergence_value(Divergence::jeffreys, pb, ph), expect, 1e-12);
    EXPECT_NEAR(divergence(Divergence::jeffreys, Tensor::vector(pb), Tensor::vector(ph)).item(), expect, 1e-12);
    EXPECT_NEAR(expect, 1.66355, 1e-5);
}

TEST(Divergence, JeffreysIsSymmetricKlSum) {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> p(5), q(5);
        double sp = 0, sq = 0;
        for (auto& v : p) sp += (v = u(rng));
        for (auto& v : q) sq += (v = u(rng));
        for (auto& v : p) v /= sp;
        for (auto& v : q) v /= sq;
        double kl_pq = 0, kl_qp = 0;
        for (int m = 0; m < 5; ++m) {
            kl_pq += p[m] * std::log(p[m] / q[m]);
            kl_qp += q[m] * std::log(q[m] / p[m]);
        }
        EXPECT_NEAR(divergence_value(Divergence::kl, p, q), kl_pq, 1e-12);
        EXPECT_NEAR(divergence_value(Divergence::jeffreys, p, q), kl_pq + kl_qp, 1e-12);
        EXPECT_NEAR(divergence_value(Divergence::jeffreys, q, p), divergence_value(Divergence::jeffreys, p, q), 1e-12);
        EXPECT_GE(divergence_value(Divergence::jeffreys, p, q), 0.0);
    }
}

TEST(Divergence, MismatchedSupportsThrow) {
    EXPECT_THROW(divergence(Divergence::kl, Tensor::vector({0.5, 0.5}), Tensor::vector({1.0})), ShapeError);
    EXPECT_THROW(parse_divergence("hellinger"), std::invalid_argument);
    EXPECT_EQ(parse_divergence(divergence_name(Divergence::mse)), Divergence::mse);
}

// ---- loss ----

TEST(FlacLoss, EmptySIsExactlyZeroWithoutGradient) {
    // One target and one attribute across the batch: every pair lands in A11.
    Tape tape;
    const auto h = Tensor::matrix({{0.1, 0.2}, {0.5, -0.3}, {1.0, 2.0}}, true);
    const auto kb = Tensor::full(Shape{3, 3}, 1.0);
    const std::vector<int> y{3, 3, 3}, t{1, 1, 1};
    const auto res = flac_loss_from_equality(h, kb, y, BoolMatrix::from_labels(t), FlacOptions{});
    EXPECT_EQ(res.active_pairs, 0u);
    EXPECT_EQ(res.loss.item(), 0.0);
    EXPECT_TRUE(tape.backward(res.loss).empty());
}

TEST(FlacLoss, SingleTargetBatchUnderInferenceKeepsSameTargetPairs) {
    // The midpoint rule always splits a non-constant batch, so a single-target
    // batch still yields A10 pairs when attributes are inferred.
    std::mt19937_64 rng(61);
    const std::vector<int> y{3, 3, 3, 3};
    const auto b = random_matrix(rng, 4, 2) * 1e-3;
    const auto h = random_matrix(rng, 4, 2);
    const auto res = flac_loss_detailed(h, b, y);
    EXPECT_TRUE(res.sets.a01.empty());
    EXPECT_FALSE(res.sets.a10.empty());
    EXPECT_EQ(res.sets.a10.size() + res.sets.a11.size(), 12u);
}

TEST(FlacLoss, MatchesNaiveLoopOracle) {
    std::mt19937_64 rng(37);
    std::uniform_int_distribution<int> pick(0, 2);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<int> y(10), t(10);
        for (auto& v : y) v = pick(rng);
        for (auto& v : t) v = pick(rng);
        t[0] = 0;
        t[1] = 1;
        const auto h = random_matrix(rng, 10, 4);
        const auto b = clustered_bias(t, 3, rng, 0.5);
        EXPECT_NEAR(flac_loss(h, b, y).item(), naive_flac(h, b, y), 1e-10);
    }
}

TEST(FlacLoss, GradientCheckAllDivergencesAndKernels) {
    std::mt19937_64 rng(41);
    const std::vector<int> y{0, 0, 1, 1, 0, 1, 2, 2};
    const std::vector<int> t{0, 1, 1, 0, 2, 2, 0, 1};
    for (auto div : {Divergence::jeffreys, Divergence::kl, Divergence::mse}) {
        for (const auto& kind : {KernelKind::student_t(), KernelKind::rbf(2.0), KernelKind::cosine()}) {
            const auto b = clustered_bias(t, 3, rng, 0.3);
            const auto h = random_matrix(rng, 8, 4);
            const FlacOptions opts{kind, div, PairTerms::both, false};
            auto f = [&](const Tensor& x) { return flac_loss_detailed(x, b, y, opts).loss; };
            const auto report = gradient_check(f, h);
            EXPECT_TRUE(report.passed) << divergence_name(div) << "/" << kind.name() << ": " << report.message;
        }
    }
}

TEST(FlacLoss, GradientCheckWithNormalisation) {
    std::mt19937_64 rng(43);
    const std::vector<int> y{0, 0, 1, 1, 0, 1, 2, 2};
    const std::vector<int> t{0, 1, 1, 0, 2, 2, 0, 1};
    const auto b = clustered_bias(t, 3, rng, 0.3);
    const auto h = random_matrix(rng, 8, 4);
    FlacOptions opts;
    opts.normalize = true;
    const auto report = gradient_check([&](const Tensor& x) { return flac_loss_detailed(x, b, y, opts).loss; }, h);
    EXPECT_TRUE(report.passed) << report.message;
}

TEST(FlacLoss, NoGradientFlowsIntoBias) {
    std::mt19937_64 rng(47);
    const std::vector<int> y{0, 0, 1, 1, 2, 2};
    const auto h = random_matrix(rng, 6, 3).detach(true);
    const auto b = random_matrix(rng, 6, 3).detach(true);
    Tape tape;
    const auto loss = flac_loss(h, b, y);
    const auto g = tape.backward(loss);
    EXPECT_TRUE(g.contains(h));
    EXPECT_FALSE(g.contains(b));
}

TEST(FlacLoss, OracleAndInferredPairSetsAgree) {
    std::mt19937_64 rng(53);
    std::uniform_int_distribution<int> pick(0, 3);
    std::vector<int> y(20), t(20);
    for (auto& v : y) v = pick(rng);
    for (auto& v : t) v = pick(rng);
    t[0] = 0;
    t[1] = 1;
    const auto b = clustered_bias(t, 4, rng);
    const auto h = random_matrix(rng, 20, 5);
    const auto inferred = flac_loss_detailed(h, b, y);
    const auto kb = pairwise_kernel_matrix(KernelKind::student_t(), b);
    const auto oracle = flac_loss_from_equality(h, kb, y, BoolMatrix::from_labels(t), FlacOptions{});
    EXPECT_EQ(sorted(inferred.sets.a10), sorted(oracle.sets.a10));
    EXPECT_EQ(sorted(inferred.sets.a01), sorted(oracle.sets.a01));
    EXPECT_EQ(sorted(inferred.sets.a11), sorted(oracle.sets.a11));
    EXPECT_EQ(sorted(inferred.sets.a00), sorted(oracle.sets.a00));
    EXPECT_DOUBLE_EQ(inferred.loss.item(), oracle.loss.item());
}

TEST(FlacLoss, IdealRepresentationReachesOptimum) {
    // Same-class rows coincide (K=1 on A10); classes are far apart (K≈0 on A01).
    const std::vector<int> y{0, 0, 1, 1, 2, 2, 3, 3};
    const std::vector<int> t{0, 1, 1, 2, 2, 3, 3, 0};
    std::vector<double> hv(8);
    for (std::size_t i = 0; i < 8; ++i) hv[i] = 1e13 * y[i];
    const auto h = Tensor::matrix(8, 1, hv);
    std::vector<double> bv(8 * 4, 0.0);
    for (std::size_t i = 0; i < 8; ++i) bv[i * 4 + t[i]] = 1e6;
    const auto b = Tensor::matrix(8, 4, bv);
    const auto res = flac_loss_detailed(h, b, y);
    EXPECT_GT(res.active_pairs, 0u);
    EXPECT_LE(res.loss.item(), 1e-9);

    // A scrambled H on the same batch scores worse.
    const auto bad = Tensor::matrix(8, 1, {0, 5, 1, 7, 2, 3, 9, 4});
    EXPECT_GT(flac_loss(bad, b, y).item(), 1e-3);
}

TEST(FlacLoss, TermSelection) {
    std::mt19937_64 rng(59);
    const std::vector<int> y{0, 0, 1, 1, 2, 2};
    const std::vector<int> t{0, 1, 1, 2, 2, 0};
    const auto b = clustered_bias(t, 3, rng);
    const auto h = random_matrix(rng, 6, 2);
    FlacOptions opts;
    const auto both = flac_loss_detailed(h, b, y, opts);
    opts.terms = PairTerms::same_target_only;
    const auto a10 = flac_loss_detailed(h, b, y, opts);
    opts.terms = PairTerms::same_attribute_only;
    const auto a01 = flac_loss_detailed(h, b, y, opts);
    EXPECT_EQ(both.active_pairs, both.sets.a10.size() + both.sets.a01.size());
    EXPECT_EQ(a10.active_pairs, both.sets.a10.size());
    EXPECT_EQ(a01.active_pairs, both.sets.a01.size());
    for (auto terms : {PairTerms::both, PairTerms::same_target_only, PairTerms::same_attribute_only}) {
        EXPECT_EQ(parse_pair_terms(pair_terms_name(terms)), terms);
    }
}

TEST(FlacLoss, BatchSizeMismatchThrows) {
    const auto h = Tensor::matrix({{1.0}, {2.0}});
    const auto b = Tensor::matrix({{1.0}, {2.0}, {3.0}});
    const std::vector<int> y{0, 1};
    EXPECT_THROW(flac_loss(h, b, y), ShapeError);
}

// ---- diagnostics ----

TEST(PairStats, ValuesAndCounts) {
    const auto ones = Tensor::full(Shape{4, 4}, 1.0);
    const std::vector<int> y{0, 0, 1, 1}, t{0, 1, 0, 1};
    const auto sets = build_pair_sets(y, BoolMatrix::from_labels(t));
    const auto st = pair_set_similarity_stats(ones, sets);
    EXPECT_DOUBLE_EQ(st.a10.mean, 1.0);
    EXPECT_DOUBLE_EQ(st.a01.mean, 1.0);
    EXPECT_DOUBLE_EQ(st.a00.mean, 1.0);
    EXPECT_FALSE(st.a11.defined());
    EXPECT_TRUE(std::isnan(st.a11.mean));
    EXPECT_EQ(st.a10.count + st.a01.count + st.a11.count + st.a00.count, 12u);

    const auto k = Tensor::matrix({{1.0, 0.9, 0.0}, {0.7, 1.0, 0.0}, {0.0, 0.0, 1.0}});
    const PairList a10{{0, 1}, {1, 0}};
    const auto s = set_stats(k, a10);
    EXPECT_NEAR(s.mean, 0.8, 1e-15);
    EXPECT_DOUBLE_EQ(s.min, 0.7);
    EXPECT_DOUBLE_EQ(s.max, 0.9);
}
