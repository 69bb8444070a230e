#pragma once
// Small MLP encoder + linear head, task losses, Adam, and the training loops
// for the bias-capturing model and the main model (task loss + alpha * FLAC).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "flac/core.hpp"
#include "flac/data.hpp"
#include "flac/tensor.hpp"

namespace flac {

// ---- model -------------------------------------------------------------------------

struct MLPConfig {
    int input_dim = 192;
    std::vector<int> hidden_dims{128, 64};
    int repr_dim = 32;
    int n_classes = 10;

    void validate() const {
        if (input_dim <= 0 || repr_dim <= 0 || n_classes <= 0) {
            throw std::invalid_argument("mlp: all dimensions must be positive");
        }
        for (int h : hidden_dims)
            if (h <= 0) throw std::invalid_argument("mlp: all dimensions must be positive");
    }

    friend bool operator==(const MLPConfig&, const MLPConfig&) = default;
};

struct Linear {
    Tensor weight;  // in x out
    Tensor bias;    // 1 x out
};

// ReLU layers up to the representation (penultimate activation), then a linear head.
struct Mlp {
    MLPConfig config;
    std::vector<Linear> layers;  // hidden..., representation, head

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (const auto& l : layers) {
            out.push_back(l.weight);
            out.push_back(l.bias);
        }
        return out;
    }

    // Independent copy of every parameter.
    Mlp clone(bool requires_grad = true) const {
        Mlp out{config, {}};
        for (const auto& l : layers) out.layers.push_back({l.weight.detach(requires_grad), l.bias.detach(requires_grad)});
        return out;
    }
};

// Uniform fan-in initialisation: bound sqrt(6 / fan_in) for ReLU layers,
// 1 / sqrt(fan_in) for the head; biases start at zero.
inline Mlp make_mlp(const MLPConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    Mlp model{config, {}};
    std::vector<int> widths{config.input_dim};
    widths.insert(widths.end(), config.hidden_dims.begin(), config.hidden_dims.end());
    widths.push_back(config.repr_dim);
    widths.push_back(config.n_classes);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const auto fan_in = static_cast<std::size_t>(widths[l]);
        const auto fan_out = static_cast<std::size_t>(widths[l + 1]);
        const bool head = l + 2 == widths.size();
        const double bound = head ? 1.0 / std::sqrt(static_cast<double>(fan_in))
                                  : std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<double> w(fan_in * fan_out);
        for (auto& v : w) v = dist(rng);
        model.layers.push_back({Tensor::matrix(fan_in, fan_out, std::move(w), true),
                                Tensor::zeros(Shape{1, fan_out}, true)});
    }
    return model;
}

struct ForwardResult {
    Tensor repr;    // N x repr_dim
    Tensor logits;  // N x n_classes
};

inline Tensor linear(const Linear& layer, const Tensor& x) {
    const Tensor z = matmul(x, layer.weight);
    return z.rows() == 1 ? z + layer.bias : add(z, layer.bias);
}

inline ForwardResult forward(const Mlp& model, const Tensor& x) {
    if (x.rank() != 2 || x.cols() != static_cast<std::size_t>(model.config.input_dim)) {
        throw ShapeError("forward: expected N x " + std::to_string(model.config.input_dim) + " input, got " +
                         shape_str(x.shape()));
    }
    Tensor h = x;
    for (std::size_t l = 0; l + 1 < model.layers.size(); ++l) h = relu(linear(model.layers[l], h));
    return {h, linear(model.layers.back(), h)};
}

// ---- task losses ---------------------------------------------------------------------

inline Tensor row_sums(const Tensor& x) { return matmul(x, Tensor::full(Shape{x.cols(), 1}, 1.0)); }

// Repeats an N x 1 column across `cols` columns.
inline Tensor spread_columns(const Tensor& column, std::size_t cols) {
    return matmul(column, Tensor::full(Shape{1, cols}, 1.0));
}

inline Tensor row_max_constant(const Tensor& x) {
    const std::size_t n = x.rows(), c = x.cols();
    std::vector<double> out(n * c);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = x.data().subspan(i * c, c);
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * c), c, *std::max_element(row.begin(), row.end()));
    }
    return Tensor::matrix(n, c, std::move(out));
}

// Mean negative log-softmax probability of the true class.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> y) {
    if (logits.rank() != 2 || logits.rows() != y.size()) {
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(y.size()) +
                         " labels");
    }
    const std::size_t n = logits.rows(), c = logits.cols();
    std::vector<double> onehot(n * c, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= c) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(y[i]) + " outside [0, " +
                                    std::to_string(c) + ")");
        }
        onehot[i * c + static_cast<std::size_t>(y[i])] = 1.0;
    }
    const Tensor z = logits - row_max_constant(logits);
    const Tensor lse = log(row_sums(exp(z)));
    const Tensor picked = row_sums(z * Tensor::matrix(n, c, std::move(onehot)));
    return mean(lse - picked);
}

// Supervised contrastive loss over L2-normalised representations. Anchors
// without a same-label partner contribute zero; the result is averaged over
// all N anchors.
inline Tensor supcon_loss(const Tensor& repr, std::span<const int> y, double temperature = 0.1) {
    if (!(temperature > 0.0)) throw std::invalid_argument("supcon_loss: temperature must be positive");
    if (repr.rank() != 2 || repr.rows() != y.size()) {
        throw ShapeError("supcon_loss: representations " + shape_str(repr.shape()) + " vs " +
                         std::to_string(y.size()) + " labels");
    }
    const std::size_t n = repr.rows(), d = repr.cols();
    std::vector<double> weights(n * n, 0.0);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t positives = 0;
        for (std::size_t p = 0; p < n; ++p) positives += (p != i && y[p] == y[i]) ? 1 : 0;
        if (positives == 0) continue;
        any = true;
        for (std::size_t p = 0; p < n; ++p)
            if (p != i && y[p] == y[i]) weights[i * n + p] = 1.0 / static_cast<double>(positives);
    }
    if (!any) return Tensor::scalar(0.0);

    const Tensor norms = sqrt(clamp_min(row_sums(repr * repr), kProbFloor * kProbFloor));
    const Tensor z = repr / spread_columns(norms, d);
    const Tensor sim = matmul(z, transpose(z)) * (1.0 / temperature);
    const Tensor shifted = sim - row_max_constant(sim);
    std::vector<double> off_diagonal(n * n, 1.0);
    for (std::size_t i = 0; i < n; ++i) off_diagonal[i * n + i] = 0.0;
    const Tensor denom = row_sums(exp(shifted) * Tensor::matrix(n, n, std::move(off_diagonal)));
    const Tensor log_prob = shifted - spread_columns(log(clamp_min(denom, kProbFloor)), n);
    return sum(log_prob * Tensor::matrix(n, n, std::move(weights))) * (-1.0 / static_cast<double>(n));
}

// ---- optimiser -------------------------------------------------------------------------

struct OptimizerState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    long step = 0;
    std::vector<std::vector<double>> m, v;
};

// Bias-corrected Adam with decoupled weight decay (p -= lr * wd * p).
inline void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, OptimizerState& state) {
    if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), 0.0);
            state.v.emplace_back(p.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("adam_step: optimiser state does not match parameters");
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (grads[k].size() != params[k].numel() || state.m[k].size() != params[k].numel()) {
            throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(k) + " " +
                             shape_str(params[k].shape()));
        }
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto p = params[k].mutable_data();
        auto& m = state.m[k];
        auto& v = state.v[k];
        const auto& g = grads[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            p[i] -= state.lr * state.weight_decay * p[i] + state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

// Gradients aligned with `params`; parameters absent from the map get zeros.
inline std::vector<std::vector<double>> collect_grads(std::span<const Tensor> params, const GradientMap& grads) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto& p : params) {
        if (grads.contains(p)) out.push_back(grads.at(p));
        else out.emplace_back(p.numel(), 0.0);
    }
    return out;
}

// ---- configuration -------------------------------------------------------------------------

enum class TaskLoss { ce, supcon };

inline std::string task_loss_name(TaskLoss t) { return t == TaskLoss::ce ? "ce" : "supcon"; }

inline TaskLoss parse_task_loss(std::string_view text) {
    if (text == "ce") return TaskLoss::ce;
    if (text == "supcon") return TaskLoss::supcon;
    throw std::invalid_argument("unknown task loss '" + std::string(text) + "'");
}

struct TrainConfig {
    double alpha = 0.0;
    int epochs = 10;
    int batch_size = 128;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    std::vector<double> lr_decay_points{1.0 / 3.0, 2.0 / 3.0};
    double lr_decay_factor = 0.1;
    TaskLoss task_loss = TaskLoss::ce;
    double supcon_temperature = 0.1;
    KernelKind kernel = KernelKind::student_t();
    Divergence divergence = Divergence::jeffreys;
    PairTerms terms = PairTerms::both;
    bool flac_normalize = true;  // unit-norm rows of H and B inside the FLAC kernels
    std::vector<int> hidden_dims{128, 64};
    int repr_dim = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size < 2) throw std::invalid_argument("train: batch_size must be at least 2");
        if (!std::isfinite(alpha) || alpha < 0.0) throw std::invalid_argument("train: alpha must be finite and >= 0");
        if (epochs < 1) throw std::invalid_argument("train: epochs must be positive");
        if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
        if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be >= 0");
        if (!(supcon_temperature > 0.0)) throw std::invalid_argument("train: supcon temperature must be positive");
    }
};

// Piecewise-constant schedule: lr scaled by decay_factor at each decay point
// (a fraction of the total epochs).
inline double lr_at(const TrainConfig& config, int epoch) {
    if (epoch < 0 || epoch >= config.epochs) {
        throw std::out_of_range("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                                std::to_string(config.epochs) + ")");
    }
    double lr = config.lr;
    for (double point : config.lr_decay_points) {
        if (static_cast<double>(epoch) >= point * static_cast<double>(config.epochs)) lr *= config.lr_decay_factor;
    }
    return lr;
}

// ---- frozen bias-capturing encoder ----------------------------------------------------

enum class BiasCapturingMode { attribute_supervised, vanilla_task };

inline std::string bias_mode_name(BiasCapturingMode m) {
    return m == BiasCapturingMode::attribute_supervised ? "attribute_supervised" : "vanilla_task";
}

inline BiasCapturingMode parse_bias_mode(std::string_view text) {
    if (text == "attribute_supervised") return BiasCapturingMode::attribute_supervised;
    if (text == "vanilla_task") return BiasCapturingMode::vanilla_task;
    throw std::invalid_argument("unknown bias-capturing mode '" + std::string(text) + "'");
}

// Batched forward pass outside any tape.
struct Predictions {
    std::vector<int> labels;
    Tensor repr;
    Tensor probabilities;  // row-wise softmax of the logits
};

inline Predictions predict(const Mlp& model, std::span<const ColorGridSample> samples, std::size_t chunk = 1024) {
    if (samples.empty()) throw std::invalid_argument("predict: no samples");
    NoGradGuard no_grad;
    Predictions out;
    const std::size_t n = samples.size();
    const auto rd = static_cast<std::size_t>(model.config.repr_dim);
    const auto nc = static_cast<std::size_t>(model.config.n_classes);
    std::vector<double> repr(n * rd), probs(n * nc);
    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t end = std::min(n, start + chunk);
        rows.resize(end - start);
        std::iota(rows.begin(), rows.end(), start);
        const auto fwd = forward(model, pixel_batch(samples, rows));
        std::copy(fwd.repr.data().begin(), fwd.repr.data().end(), repr.begin() + static_cast<std::ptrdiff_t>(start * rd));
        const std::size_t c = fwd.logits.cols();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto row = fwd.logits.data().subspan(i * c, c);
            const auto best = std::max_element(row.begin(), row.end());
            out.labels.push_back(static_cast<int>(best - row.begin()));
            double z = 0.0;
            for (double v : row) z += std::exp(v - *best);
            for (std::size_t k = 0; k < c; ++k) probs[(start + i) * nc + k] = std::exp(row[k] - *best) / z;
        }
    }
    out.repr = Tensor::matrix(n, rd, std::move(repr));
    out.probabilities = Tensor::matrix(n, nc, std::move(probs));
    return out;
}

// Which output of the bias-capturing model serves as b_i.
enum class BiasFeatures { penultimate, probabilities };

inline std::string bias_features_name(BiasFeatures f) {
    return f == BiasFeatures::penultimate ? "penultimate" : "probabilities";
}

inline BiasFeatures parse_bias_features(std::string_view text) {
    if (text == "penultimate") return BiasFeatures::penultimate;
    if (text == "probabilities") return BiasFeatures::probabilities;
    throw std::invalid_argument("unknown bias feature kind '" + std::string(text) + "'");
}

class FrozenEncoder {
public:
    FrozenEncoder() = default;
    explicit FrozenEncoder(const Mlp& trained, BiasFeatures features = BiasFeatures::probabilities)
        : model_(trained.clone(false)), features_(features) {}

    bool valid() const { return !model_.layers.empty(); }
    const Mlp& model() const { return model_; }
    BiasFeatures features() const { return features_; }

    // b_i for the given samples as a constant N x k matrix.
    Tensor encode(std::span<const ColorGridSample> samples) const {
        auto p = predict(model_, samples);
        return features_ == BiasFeatures::penultimate ? p.repr : p.probabilities;
    }

private:
    Mlp model_;
    BiasFeatures features_ = BiasFeatures::probabilities;
};

// ---- training loop -----------------------------------------------------------------------

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(int epoch, long step, const std::string& component)
        : std::runtime_error("non-finite " + component + " loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step)),
          epoch(epoch), step(step), component(component) {}
    int epoch;
    long step;
    std::string component;
};

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double task_loss = 0.0;
    double flac_loss = 0.0;
    double total_loss = 0.0;
    double train_acc = 0.0;
    double unbiased_acc = std::numeric_limits<double>::quiet_NaN();
    double conflict_acc = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
    Mlp model;
    std::vector<EpochRecord> history;
};

// Optional per-epoch evaluation splits.
struct EvalSplits {
    std::span<const ColorGridSample> unbiased;
    std::span<const ColorGridSample> conflict;
};

inline double group_mean_accuracy(std::span<const ColorGridSample> samples, std::span<const int> predicted) {
    std::map<std::pair<int, int>, std::pair<std::size_t, std::size_t>> groups;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        auto& g = groups[{samples[i].y, samples[i].t}];
        g.first += predicted[i] == samples[i].y ? 1 : 0;
        ++g.second;
    }
    double total = 0.0;
    for (const auto& [key, g] : groups) total += static_cast<double>(g.first) / static_cast<double>(g.second);
    return groups.empty() ? std::numeric_limits<double>::quiet_NaN() : total / static_cast<double>(groups.size());
}

inline double plain_accuracy(std::span<const ColorGridSample> samples, std::span<const int> predicted) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) hit += predicted[i] == samples[i].y ? 1 : 0;
    return samples.empty() ? std::numeric_limits<double>::quiet_NaN()
                           : static_cast<double>(hit) / static_cast<double>(samples.size());
}

namespace detail {

// Trains a fresh MLP on `samples` with labels from `target`. When
// `bias_features` is given (one row per sample, constant), FLAC is added with
// weight config.alpha.
template <class Target>
TrainResult fit(const TrainConfig& config, std::span<const ColorGridSample> samples, Target target, int n_classes,
                const Tensor* bias_features, const EvalSplits* eval) {
    config.validate();
    if (samples.empty()) throw std::invalid_argument("train: empty training set");
    const std::size_t n = samples.size();
    MLPConfig mc;
    mc.input_dim = static_cast<int>(samples[0].pixels.size());
    mc.hidden_dims = config.hidden_dims;
    mc.repr_dim = config.repr_dim;
    mc.n_classes = n_classes;
    TrainResult result{make_mlp(mc, config.seed), {}};
    auto params = result.model.parameters();

    OptimizerState opt;
    opt.lr = config.lr;
    opt.weight_decay = config.weight_decay;

    std::mt19937_64 shuffle_rng(config.seed ^ 0xA5A5A5A5DEADBEEFULL);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const auto bs = static_cast<std::size_t>(config.batch_size);
    const std::size_t bias_dim = bias_features ? bias_features->cols() : 0;
    const FlacOptions flac_opts{config.kernel, config.divergence, config.terms, config.flac_normalize};
    long step = 0;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        opt.lr = lr_at(config, epoch);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = opt.lr;
        std::size_t batches = 0, correct = 0, seen = 0;
        for (std::size_t start = 0; start < n; start += bs) {
            const std::size_t end = std::min(n, start + bs);
            if (end - start < 2) break;
            const std::span<const std::size_t> rows(order.data() + start, end - start);
            std::vector<int> y(rows.size());
            for (std::size_t r = 0; r < rows.size(); ++r) y[r] = target(samples[rows[r]]);

            double task_value = 0.0, flac_value = 0.0, total_value = 0.0;
            std::vector<std::vector<double>> grads;
            {
                Tape tape;
                const auto fwd = forward(result.model, pixel_batch(samples, rows));
                // Blown-up weights surface here first; the task loss would be undefined.
                const auto finite = [](const Tensor& t) {
                    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
                };
                if (!finite(fwd.logits) || !finite(fwd.repr)) throw TrainingDiverged(epoch, step, "task");
                Tensor task = Tensor::scalar(0.0);
                if (config.task_loss == TaskLoss::ce) {
                    task = cross_entropy(fwd.logits, y);
                } else {
                    // Linear probe on detached representations keeps the head trained.
                    const Tensor probe = linear(result.model.layers.back(), fwd.repr.detach());
                    task = supcon_loss(fwd.repr, y, config.supcon_temperature) + cross_entropy(probe, y);
                }
                Tensor total = task;
                if (bias_features) {
                    std::vector<double> b(rows.size() * bias_dim);
                    for (std::size_t r = 0; r < rows.size(); ++r) {
                        const auto src = row_of(*bias_features, rows[r]);
                        std::copy(src.begin(), src.end(), b.begin() + static_cast<std::ptrdiff_t>(r * bias_dim));
                    }
                    const Tensor bmat = Tensor::matrix(rows.size(), bias_dim, std::move(b));
                    if (config.alpha > 0.0) {
                        const Tensor fl = flac_loss_detailed(fwd.repr, bmat, y, flac_opts).loss;
                        flac_value = fl.item();
                        total = task + fl * config.alpha;
                    } else {
                        NoGradGuard no_grad;
                        flac_value = flac_loss_detailed(fwd.repr.detach(), bmat, y, flac_opts).loss.item();
                    }
                }
                task_value = task.item();
                total_value = total.item();
                if (!std::isfinite(task_value)) throw TrainingDiverged(epoch, step, "task");
                if (!std::isfinite(flac_value)) throw TrainingDiverged(epoch, step, "flac");
                if (!std::isfinite(total_value)) throw TrainingDiverged(epoch, step, "total");
                grads = collect_grads(params, tape.backward(total));

                const std::size_t c = fwd.logits.cols();
                for (std::size_t r = 0; r < rows.size(); ++r) {
                    const auto row = fwd.logits.data().subspan(r * c, c);
                    correct += (std::max_element(row.begin(), row.end()) - row.begin()) == y[r] ? 1 : 0;
                }
                seen += rows.size();
            }
            adam_step(params, grads, opt);
            rec.task_loss += task_value;
            rec.flac_loss += flac_value;
            rec.total_loss += total_value;
            ++batches;
            ++step;
        }
        if (batches) {
            rec.task_loss /= static_cast<double>(batches);
            rec.flac_loss /= static_cast<double>(batches);
            rec.total_loss /= static_cast<double>(batches);
            rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
        }
        if (eval) {
            if (!eval->unbiased.empty()) {
                rec.unbiased_acc = group_mean_accuracy(eval->unbiased, predict(result.model, eval->unbiased).labels);
            }
            if (!eval->conflict.empty()) {
                rec.conflict_acc = plain_accuracy(eval->conflict, predict(result.model, eval->conflict).labels);
            }
        }
        result.history.push_back(rec);
    }
    return result;
}

}  // namespace detail

// Trains the bias-capturing model and freezes it. attribute_supervised learns
// the protected attribute on `attribute_split` (disjoint from the main
// training data); vanilla_task learns the target on `train` with CE only.
inline FrozenEncoder train_bias_capturing(BiasCapturingMode mode, std::span<const ColorGridSample> train,
                                          std::span<const ColorGridSample> attribute_split, int n_classes,
                                          TrainConfig config,
                                          BiasFeatures features = BiasFeatures::probabilities) {
    config.alpha = 0.0;
    config.task_loss = TaskLoss::ce;
    if (mode == BiasCapturingMode::attribute_supervised) {
        if (attribute_split.empty()) {
            throw std::invalid_argument("train_bias_capturing: attribute_supervised mode needs an attribute-labelled split");
        }
        auto res = detail::fit(config, attribute_split, [](const ColorGridSample& s) { return s.t; }, n_classes,
                               nullptr, nullptr);
        return FrozenEncoder(res.model, features);
    }
    auto res = detail::fit(config, train, [](const ColorGridSample& s) { return s.y; }, n_classes, nullptr, nullptr);
    return FrozenEncoder(res.model, features);
}

// Main model: minimises task + alpha * FLAC, with B from the frozen encoder.
// With no encoder (or alpha = 0 and no encoder) this is plain task training.
inline TrainResult train_main(const TrainConfig& config, std::span<const ColorGridSample> train, int n_classes,
                              const FrozenEncoder* bias_encoder = nullptr, const EvalSplits* eval = nullptr) {
    std::optional<Tensor> bias_features;
    if (bias_encoder && bias_encoder->valid()) bias_features = bias_encoder->encode(train);
    if (config.alpha > 0.0 && !bias_features) {
        throw std::invalid_argument("train_main: alpha > 0 requires a bias-capturing encoder");
    }
    return detail::fit(config, train, [](const ColorGridSample& s) { return s.y; }, n_classes,
                       bias_features ? &*bias_features : nullptr, eval);
}

// ---- persistence ---------------------------------------------------------------------------

inline void write_history_csv(std::ostream& os, std::span<const EpochRecord> history) {
    os << "epoch,lr,task_loss,flac_loss,train_acc,unbiased_acc,conflict_acc\n";
    os << std::setprecision(17);
    for (const auto& r : history) {
        os << r.epoch << ',' << r.lr << ',' << r.task_loss << ',' << r.flac_loss << ',' << r.train_acc << ','
           << r.unbiased_acc << ',' << r.conflict_acc << '\n';
    }
}

inline std::string mlp_config_echo(const MLPConfig& c) {
    std::ostringstream os;
    os << "input_dim=" << c.input_dim << "\nhidden_dims=";
    for (std::size_t i = 0; i < c.hidden_dims.size(); ++i) os << (i ? "," : "") << c.hidden_dims[i];
    os << "\nrepr_dim=" << c.repr_dim << "\nn_classes=" << c.n_classes << "\n";
    return os.str();
}

inline MLPConfig parse_mlp_config_echo(const std::string& text) {
    MLPConfig c;
    c.hidden_dims.clear();
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (key == "input_dim") c.input_dim = std::stoi(value);
        else if (key == "repr_dim") c.repr_dim = std::stoi(value);
        else if (key == "n_classes") c.n_classes = std::stoi(value);
        else if (key == "hidden_dims") {
            std::istringstream hs(value);
            std::string item;
            while (std::getline(hs, item, ','))
                if (!item.empty()) c.hidden_dims.push_back(std::stoi(item));
        }
    }
    return c;
}

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "FLCK", version u32, config echo (u32 length + text), tensor count u32,
// then per tensor rows u32, cols u32 and the values as f64, little-endian.
inline void write_checkpoint(std::ostream& os, const Mlp& model, const std::string& extra_echo = {}) {
    os.write("FLCK", 4);
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    const std::string echo = mlp_config_echo(model.config) + extra_echo;
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(echo.size()));
    os.write(echo.data(), static_cast<std::streamsize>(echo.size()));
    const auto params = model.parameters();
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.rows()));
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.cols()));
        for (double v : p.data()) detail::put_le<double>(os, v);
    }
    if (!os) throw IoError("write_checkpoint: stream failure");
}

inline Mlp read_checkpoint(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "FLCK", 4) != 0) throw IoError("read_checkpoint: bad magic");
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != kCheckpointVersion) throw IoError("read_checkpoint: unsupported version " + std::to_string(version));
    std::string echo(detail::get_le<std::uint32_t>(is), '\0');
    if (!is.read(echo.data(), static_cast<std::streamsize>(echo.size()))) throw IoError("read_checkpoint: truncated echo");
    Mlp model = make_mlp(parse_mlp_config_echo(echo), 0);
    auto params = model.parameters();
    if (detail::get_le<std::uint32_t>(is) != params.size()) throw IoError("read_checkpoint: parameter count mismatch");
    for (auto& p : params) {
        const auto r = detail::get_le<std::uint32_t>(is);
        const auto c = detail::get_le<std::uint32_t>(is);
        if (r != p.rows() || c != p.cols()) throw IoError("read_checkpoint: parameter shape mismatch");
        for (auto& v : p.mutable_data()) v = detail::get_le<double>(is);
    }
    return model;
}

inline void save_checkpoint(const std::filesystem::path& path, const Mlp& model, const std::string& extra_echo = {}) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    write_checkpoint(os, model, extra_echo);
}

inline Mlp load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return read_checkpoint(is);
}

}  // namespace flac
