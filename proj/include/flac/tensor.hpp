#pragma once
// Minimal define-by-run reverse-mode autodiff over dense row-major tensors.
//
// A Tape records every primitive whose operands require gradients while it is
// the active tape of the calling thread. Tensors are cheap shared handles; the
// tape keeps operands and outputs alive until it is destroyed.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace flac {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

inline std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

enum class Op {
    add, sub, mul, div, neg, matmul, exp, log, sqrt, relu, sum, mean,
    l2_distance_rowpairs, concat, index_select, transpose, clamp_min
};

inline std::string_view op_name(Op op) {
    switch (op) {
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::div: return "div";
        case Op::neg: return "neg";
        case Op::matmul: return "matmul";
        case Op::exp: return "exp";
        case Op::log: return "log";
        case Op::sqrt: return "sqrt";
        case Op::relu: return "relu";
        case Op::sum: return "sum";
        case Op::mean: return "mean";
        case Op::l2_distance_rowpairs: return "l2_distance_rowpairs";
        case Op::concat: return "concat";
        case Op::index_select: return "index_select";
        case Op::transpose: return "transpose";
        case Op::clamp_min: return "clamp_min";
    }
    return "?";
}

namespace detail {

inline constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty when absent
    bool requires_grad = false;
    std::uint64_t tape_id = 0;  // 0: leaf / constant
    std::size_t node = kNoNode;
};

inline std::size_t checked_numel(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    std::size_t n = 1;
    for (auto d : shape) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        n *= d;
    }
    return n;
}

}  // namespace detail

class Tape;

class Tensor {
public:
    Tensor() : Tensor(Shape{1}, std::vector<double>{0.0}) {}

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        const auto n = detail::checked_numel(shape);
        if (n != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(Shape{1}, {v}, requires_grad);
    }
    static Tensor vector(std::vector<double> v, bool requires_grad = false) {
        const auto n = v.size();
        return Tensor(Shape{n}, std::move(v), requires_grad);
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                         bool requires_grad = false) {
        return Tensor(Shape{rows, cols}, std::move(v), requires_grad);
    }
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false) {
        std::vector<double> v;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols) throw ShapeError("ragged matrix literal");
            v.insert(v.end(), r.begin(), r.end());
        }
        return matrix(rows.size(), cols, std::move(v), requires_grad);
    }
    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const auto n = detail::checked_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->data.size(); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t rows() const { return impl_->shape[0]; }
    std::size_t cols() const { return rank() >= 2 ? impl_->shape[1] : 1; }

    std::span<const double> data() const { return impl_->data; }
    // Direct write access, meant for leaves (parameters updated by an optimizer).
    std::span<double> mutable_data() { return impl_->data; }

    double item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

    bool requires_grad() const { return impl_->requires_grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    bool is_leaf() const { return impl_->node == detail::kNoNode; }

    // A new leaf holding a copy of the data, outside any tape.
    Tensor detach(bool requires_grad = false) const {
        return Tensor(shape(), impl_->data, requires_grad);
    }

    const detail::TensorImpl* id() const { return impl_.get(); }

private:
    friend class Tape;
    friend Tensor make_result(Op, std::vector<Tensor>, Shape, std::vector<double>);
    friend struct NodeAccess;

    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

    std::shared_ptr<detail::TensorImpl> impl_;
};

// Gradients of a backward pass, keyed by leaf tensor.
class GradientMap {
public:
    bool contains(const Tensor& t) const { return grads_.count(t.id()) != 0; }
    const std::vector<double>& at(const Tensor& t) const {
        auto it = grads_.find(t.id());
        if (it == grads_.end()) throw std::out_of_range("tensor has no gradient in this map");
        return it->second;
    }
    std::size_t size() const { return grads_.size(); }
    bool empty() const { return grads_.empty(); }

private:
    friend class Tape;
    std::unordered_map<const detail::TensorImpl*, std::vector<double>> grads_;
};

namespace detail {

struct Node {
    Op op;
    std::vector<std::shared_ptr<TensorImpl>> operands;
    std::shared_ptr<TensorImpl> output;
    std::vector<std::size_t> indices;  // index_select rows, concat split points
    std::size_t axis = 0;
    double scalar = 0.0;               // clamp_min floor
};

inline std::atomic<std::uint64_t>& tape_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

}  // namespace detail

// Recording context. Constructing a Tape makes it the active tape of the
// current thread; destruction restores the previous one.
class Tape {
public:
    Tape() : id_(++detail::tape_counter()), previous_(active_slot()) { active_slot() = this; }
    ~Tape() { active_slot() = previous_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_slot(); }

    std::size_t size() const { return nodes_.size(); }
    std::uint64_t id() const { return id_; }
    bool contains(const Tensor& t) const { return t.impl_->tape_id == id_; }

    GradientMap backward(const Tensor& root);

    // One node per line: index, kind, operand references, output shape.
    std::string dump() const {
        std::ostringstream os;
        for (std::size_t n = 0; n < nodes_.size(); ++n) {
            const auto& node = nodes_[n];
            os << n << ' ' << op_name(node.op) << " (";
            for (std::size_t k = 0; k < node.operands.size(); ++k) {
                if (k) os << ", ";
                const auto& operand = node.operands[k];
                if (operand->tape_id == id_) {
                    os << '%' << operand->node;
                } else {
                    os << (operand->requires_grad ? "leaf" : "const");
                }
            }
            os << ") -> " << shape_str(node.output->shape) << '\n';
        }
        return os.str();
    }

private:
    friend Tensor make_result(Op, std::vector<Tensor>, Shape, std::vector<double>);
    friend struct NodeAccess;
    friend class NoGradGuard;

    static Tape*& active_slot() {
        thread_local Tape* active = nullptr;
        return active;
    }

    void propagate(const detail::Node& node);

    std::uint64_t id_;
    Tape* previous_;
    std::vector<detail::Node> nodes_;
};

// Suspends recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : saved_(Tape::active_slot()) { Tape::active_slot() = nullptr; }
    ~NoGradGuard() { Tape::active_slot() = saved_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape* saved_;
};

struct NodeAccess {
    static detail::Node& last(Tape& tape) { return tape.nodes_.back(); }
    static std::shared_ptr<detail::TensorImpl>& impl(Tensor& t) { return t.impl_; }
    static const std::shared_ptr<detail::TensorImpl>& impl(const Tensor& t) { return t.impl_; }
};

// Builds the output tensor and records a node when any operand requires grad
// and a tape is active.
inline Tensor make_result(Op op, std::vector<Tensor> operands, Shape shape, std::vector<double> data) {
    Tensor out(std::move(shape), std::move(data));
    Tape* tape = Tape::active();
    if (!tape) return out;
    const bool needs = std::any_of(operands.begin(), operands.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
    if (!needs) return out;
    detail::Node node;
    node.op = op;
    node.operands.reserve(operands.size());
    for (auto& t : operands) node.operands.push_back(t.impl_);
    out.impl_->requires_grad = true;
    out.impl_->tape_id = tape->id_;
    out.impl_->node = tape->nodes_.size();
    node.output = out.impl_;
    tape->nodes_.push_back(std::move(node));
    return out;
}

namespace detail {

// How an elementwise operand maps onto the output index space.
enum class Bcast { full, scalar, row };

struct ElementwisePlan {
    Shape out_shape;
    Bcast a = Bcast::full;
    Bcast b = Bcast::full;
    std::size_t cols = 1;
};

inline bool is_row_of(const Shape& row, const Shape& mat) {
    return row.size() == 2 && mat.size() == 2 && row[0] == 1 && row[1] == mat[1] && mat[0] > 1;
}

inline ElementwisePlan plan_elementwise(Op op, const Tensor& a, const Tensor& b) {
    ElementwisePlan p;
    if (a.shape() == b.shape()) {
        p.out_shape = a.shape();
    } else if (b.numel() == 1) {
        p.out_shape = a.shape();
        p.b = Bcast::scalar;
    } else if (a.numel() == 1) {
        p.out_shape = b.shape();
        p.a = Bcast::scalar;
    } else if (is_row_of(b.shape(), a.shape())) {
        p.out_shape = a.shape();
        p.b = Bcast::row;
    } else if (is_row_of(a.shape(), b.shape())) {
        p.out_shape = b.shape();
        p.a = Bcast::row;
    } else {
        throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
    p.cols = p.out_shape.size() >= 2 ? p.out_shape[1] : 1;
    return p;
}

inline std::size_t bidx(Bcast mode, std::size_t i, std::size_t cols) {
    switch (mode) {
        case Bcast::full: return i;
        case Bcast::scalar: return 0;
        case Bcast::row: return i % cols;
    }
    return i;
}

inline Bcast recover_bcast(const Shape& operand, const Shape& out) {
    if (operand == out) return Bcast::full;
    std::size_t n = 1;
    for (auto d : operand) n *= d;
    if (n == 1) return Bcast::scalar;
    return Bcast::row;
}

template <class F>
Tensor elementwise(Op op, const Tensor& a, const Tensor& b, F f) {
    const auto plan = plan_elementwise(op, a, b);
    std::size_t n = 1;
    for (auto d : plan.out_shape) n *= d;
    std::vector<double> out(n);
    const auto ad = a.data();
    const auto bd = b.data();
    if (plan.a == Bcast::full && plan.b == Bcast::full) {
        for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[i], bd[i]);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = f(ad[bidx(plan.a, i, plan.cols)], bd[bidx(plan.b, i, plan.cols)]);
        }
    }
    return make_result(op, {a, b}, plan.out_shape, std::move(out));
}

template <class F>
Tensor unary(Op op, const Tensor& x, F f) {
    std::vector<double> out(x.numel());
    const auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
    return make_result(op, {x}, x.shape(), std::move(out));
}

inline void require_matrix(Op op, const Tensor& t) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op_name(op)) + ": expected a matrix, got " + shape_str(t.shape()));
    }
}

inline std::vector<double>& grad_buffer(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    return t.grad;
}

}  // namespace detail

// ---- primitives ------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::elementwise(Op::add, a, b, [](double x, double y) { return x + y; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::elementwise(Op::sub, a, b, [](double x, double y) { return x - y; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::elementwise(Op::mul, a, b, [](double x, double y) { return x * y; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::elementwise(Op::div, a, b, [](double x, double y) { return x / y; });
}
inline Tensor neg(const Tensor& x) {
    return detail::unary(Op::neg, x, [](double v) { return -v; });
}
inline Tensor exp(const Tensor& x) {
    return detail::unary(Op::exp, x, [](double v) { return std::exp(v); });
}
inline Tensor log(const Tensor& x) {
    const auto d = x.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!(d[i] > 0.0)) {
            throw DomainError("log: non-positive input " + std::to_string(d[i]) + " at index " +
                              std::to_string(i));
        }
    }
    return detail::unary(Op::log, x, [](double v) { return std::log(v); });
}
inline Tensor sqrt(const Tensor& x) {
    const auto d = x.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d[i] < 0.0) {
            throw DomainError("sqrt: negative input " + std::to_string(d[i]) + " at index " +
                              std::to_string(i));
        }
    }
    return detail::unary(Op::sqrt, x, [](double v) { return std::sqrt(v); });
}
inline Tensor relu(const Tensor& x) {
    return detail::unary(Op::relu, x, [](double v) { return v > 0.0 ? v : 0.0; });
}
// max(x, floor) elementwise; gradient passes only where x > floor.
inline Tensor clamp_min(const Tensor& x, double floor) {
    auto out = detail::unary(Op::clamp_min, x, [floor](double v) { return v > floor ? v : floor; });
    if (Tape* tape = Tape::active(); tape && tape->contains(out)) NodeAccess::last(*tape).scalar = floor;
    return out;
}

inline Tensor sum(const Tensor& x) {
    const auto d = x.data();
    return make_result(Op::sum, {x}, Shape{1}, {std::accumulate(d.begin(), d.end(), 0.0)});
}
inline Tensor mean(const Tensor& x) {
    const auto d = x.data();
    return make_result(Op::mean, {x}, Shape{1},
                       {std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size())});
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_matrix(Op::matmul, a);
    detail::require_matrix(Op::matmul, b);
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            if (av == 0.0) continue;
            const double* brow = bd.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_result(Op::matmul, {a, b}, Shape{m, n}, std::move(out));
}

inline Tensor transpose(const Tensor& x) {
    detail::require_matrix(Op::transpose, x);
    const std::size_t r = x.rows(), c = x.cols();
    std::vector<double> out(r * c);
    const auto d = x.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = d[i * c + j];
    return make_result(Op::transpose, {x}, Shape{c, r}, std::move(out));
}

// Euclidean distance between row r of a and row r of b; result is M x 1.
inline Tensor l2_distance_rowpairs(const Tensor& a, const Tensor& b) {
    detail::require_matrix(Op::l2_distance_rowpairs, a);
    if (a.shape() != b.shape()) {
        throw ShapeError("l2_distance_rowpairs: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), d = a.cols();
    std::vector<double> out(m);
    const auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t r = 0; r < m; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double diff = ad[r * d + c] - bd[r * d + c];
            s += diff * diff;
        }
        out[r] = std::sqrt(s);
    }
    return make_result(Op::l2_distance_rowpairs, {a, b}, Shape{m, 1}, std::move(out));
}

// Gathers rows (axis 0). Vectors are treated as columns of single-element rows.
inline Tensor index_select(const Tensor& x, std::span<const std::size_t> rows) {
    if (rows.empty()) throw ShapeError("index_select: empty index list");
    const std::size_t n = x.rows();
    const std::size_t width = x.numel() / n;
    std::vector<double> out(rows.size() * width);
    const auto d = x.data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n) {
            throw ShapeError("index_select: row " + std::to_string(rows[r]) + " out of range for " +
                             shape_str(x.shape()));
        }
        std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                    out.begin() + static_cast<std::ptrdiff_t>(r * width));
    }
    Shape shape = x.shape();
    shape[0] = rows.size();
    auto result = make_result(Op::index_select, {x}, shape, std::move(out));
    if (Tape* tape = Tape::active(); tape && tape->contains(result)) {
        NodeAccess::last(*tape).indices.assign(rows.begin(), rows.end());
    }
    return result;
}

// Concatenation of matrices along axis 0 (rows) or 1 (columns).
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
    for (const auto& p : parts) detail::require_matrix(Op::concat, p);
    const std::size_t fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
    std::size_t total = 0;
    std::vector<std::size_t> extents;
    for (const auto& p : parts) {
        const std::size_t f = axis == 0 ? p.cols() : p.rows();
        if (f != fixed) {
            throw ShapeError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        const std::size_t e = axis == 0 ? p.rows() : p.cols();
        extents.push_back(e);
        total += e;
    }
    Shape shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
    std::vector<double> out;
    out.reserve(total * fixed);
    if (axis == 0) {
        for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    } else {
        for (std::size_t r = 0; r < fixed; ++r) {
            for (const auto& p : parts) {
                const auto d = p.data();
                const std::size_t c = p.cols();
                out.insert(out.end(), d.begin() + static_cast<std::ptrdiff_t>(r * c),
                           d.begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
            }
        }
    }
    auto result = make_result(Op::concat, parts, shape, std::move(out));
    if (Tape* tape = Tape::active(); tape && tape->contains(result)) {
        auto& node = NodeAccess::last(*tape);
        node.indices = std::move(extents);
        node.axis = axis;
    }
    return result;
}

// Generic dispatcher over the primitive set.
inline Tensor primitive_forward(Op op, std::span<const Tensor> operands) {
    auto need = [&](std::size_t n) {
        if (operands.size() != n) {
            throw ShapeError(std::string(op_name(op)) + ": expected " + std::to_string(n) +
                             " operands, got " + std::to_string(operands.size()));
        }
    };
    switch (op) {
        case Op::add: need(2); return add(operands[0], operands[1]);
        case Op::sub: need(2); return sub(operands[0], operands[1]);
        case Op::mul: need(2); return mul(operands[0], operands[1]);
        case Op::div: need(2); return div(operands[0], operands[1]);
        case Op::neg: need(1); return neg(operands[0]);
        case Op::matmul: need(2); return matmul(operands[0], operands[1]);
        case Op::exp: need(1); return exp(operands[0]);
        case Op::log: need(1); return log(operands[0]);
        case Op::sqrt: need(1); return sqrt(operands[0]);
        case Op::relu: need(1); return relu(operands[0]);
        case Op::sum: need(1); return sum(operands[0]);
        case Op::mean: need(1); return mean(operands[0]);
        case Op::l2_distance_rowpairs: need(2); return l2_distance_rowpairs(operands[0], operands[1]);
        case Op::concat: return concat(std::vector<Tensor>(operands.begin(), operands.end()), 0);
        case Op::transpose: need(1); return transpose(operands[0]);
        case Op::index_select:
        case Op::clamp_min:
            break;
    }
    throw std::invalid_argument(std::string(op_name(op)) + " needs extra arguments; call it directly");
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }
inline Tensor operator/(double s, const Tensor& a) { return div(Tensor::scalar(s), a); }

// ---- backward ---------------------------------------------------------------

inline void Tape::propagate(const detail::Node& node) {
    using detail::grad_buffer;
    const auto& out = *node.output;
    const auto& g = out.grad;
    // Operands on the path get a buffer even if every local derivative is zero.
    for (const auto& operand : node.operands)
        if (operand->requires_grad) grad_buffer(*operand);
    switch (node.op) {
        case Op::add:
        case Op::sub:
        case Op::mul:
        case Op::div: {
            auto& a = *node.operands[0];
            auto& b = *node.operands[1];
            const auto ma = detail::recover_bcast(a.shape, out.shape);
            const auto mb = detail::recover_bcast(b.shape, out.shape);
            const std::size_t cols = out.shape.size() >= 2 ? out.shape[1] : 1;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const std::size_t ia = detail::bidx(ma, i, cols);
                const std::size_t ib = detail::bidx(mb, i, cols);
                double da = 0.0, db = 0.0;
                switch (node.op) {
                    case Op::add: da = g[i]; db = g[i]; break;
                    case Op::sub: da = g[i]; db = -g[i]; break;
                    case Op::mul: da = g[i] * b.data[ib]; db = g[i] * a.data[ia]; break;
                    default: {
                        const double bv = b.data[ib];
                        da = g[i] / bv;
                        db = -g[i] * a.data[ia] / (bv * bv);
                    }
                }
                if (a.requires_grad) grad_buffer(a)[ia] += da;
                if (b.requires_grad) grad_buffer(b)[ib] += db;
            }
            break;
        }
        case Op::neg: {
            auto& x = *node.operands[0];
            if (!x.requires_grad) break;
            auto& gx = grad_buffer(x);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
            break;
        }
        case Op::exp:
        case Op::log:
        case Op::sqrt:
        case Op::relu:
        case Op::clamp_min: {
            auto& x = *node.operands[0];
            if (!x.requires_grad) break;
            auto& gx = grad_buffer(x);
            for (std::size_t i = 0; i < g.size(); ++i) {
                double local = 0.0;
                switch (node.op) {
                    case Op::exp: local = out.data[i]; break;
                    case Op::log: local = 1.0 / x.data[i]; break;
                    case Op::sqrt: local = 0.5 / out.data[i]; break;
                    case Op::relu: local = x.data[i] > 0.0 ? 1.0 : 0.0; break;
                    default: local = x.data[i] > node.scalar ? 1.0 : 0.0;
                }
                gx[i] += g[i] * local;
            }
            break;
        }
        case Op::sum:
        case Op::mean: {
            auto& x = *node.operands[0];
            if (!x.requires_grad) break;
            auto& gx = grad_buffer(x);
            const double v = node.op == Op::sum ? g[0] : g[0] / static_cast<double>(gx.size());
            for (auto& e : gx) e += v;
            break;
        }
        case Op::matmul: {
            auto& a = *node.operands[0];
            auto& b = *node.operands[1];
            const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
            if (a.requires_grad) {
                auto& ga = grad_buffer(a);
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g.data() + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* brow = b.data.data() + p * n;
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                        ga[i * k + p] += s;
                    }
                }
            }
            if (b.requires_grad) {
                auto& gb = grad_buffer(b);
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g.data() + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = a.data[i * k + p];
                        if (av == 0.0) continue;
                        double* gbrow = gb.data() + p * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
            break;
        }
        case Op::transpose: {
            auto& x = *node.operands[0];
            if (!x.requires_grad) break;
            auto& gx = grad_buffer(x);
            const std::size_t r = x.shape[0], c = x.shape[1];
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
            break;
        }
        case Op::l2_distance_rowpairs: {
            auto& a = *node.operands[0];
            auto& b = *node.operands[1];
            const std::size_t m = a.shape[0], d = a.shape[1];
            for (std::size_t r = 0; r < m; ++r) {
                const double dist = out.data[r];
                if (dist == 0.0 || g[r] == 0.0) continue;  // subgradient 0 at coincident rows
                const double scale = g[r] / dist;
                for (std::size_t c = 0; c < d; ++c) {
                    const double diff = a.data[r * d + c] - b.data[r * d + c];
                    if (a.requires_grad) grad_buffer(a)[r * d + c] += scale * diff;
                    if (b.requires_grad) grad_buffer(b)[r * d + c] -= scale * diff;
                }
            }
            break;
        }
        case Op::index_select: {
            auto& x = *node.operands[0];
            if (!x.requires_grad) break;
            auto& gx = grad_buffer(x);
            const std::size_t width = x.data.size() / x.shape[0];
            for (std::size_t r = 0; r < node.indices.size(); ++r) {
                const std::size_t src = node.indices[r];
                for (std::size_t c = 0; c < width; ++c) gx[src * width + c] += g[r * width + c];
            }
            break;
        }
        case Op::concat: {
            const std::size_t total_cols = out.shape[1];
            std::size_t offset = 0;
            for (std::size_t k = 0; k < node.operands.size(); ++k) {
                auto& part = *node.operands[k];
                const std::size_t extent = node.indices[k];
                if (part.requires_grad) {
                    auto& gp = grad_buffer(part);
                    if (node.axis == 0) {
                        const std::size_t w = part.shape[1];
                        for (std::size_t i = 0; i < extent * w; ++i) gp[i] += g[offset * w + i];
                    } else {
                        const std::size_t rows = part.shape[0];
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < extent; ++c)
                                gp[r * extent + c] += g[r * total_cols + offset + c];
                    }
                }
                offset += extent;
            }
            break;
        }
    }
}

inline GradientMap Tape::backward(const Tensor& root) {
    if (root.numel() != 1) {
        throw ShapeError("backward: root must be scalar, got shape " + shape_str(root.shape()));
    }
    GradientMap result;
    if (!root.requires_grad()) return result;
    if (!contains(root)) throw std::invalid_argument("backward: root was not produced on this tape");

    const std::size_t last = root.impl_->node;
    // Reset every buffer reachable from this pass so that gradients are fresh.
    std::vector<detail::TensorImpl*> leaves;
    std::unordered_set<const detail::TensorImpl*> seen;
    for (std::size_t n = 0; n <= last; ++n) {
        auto& node = nodes_[n];
        node.output->grad.clear();
        for (auto& operand : node.operands) {
            if (operand->requires_grad && operand->tape_id != id_ && seen.insert(operand.get()).second) {
                leaves.push_back(operand.get());
                operand->grad.clear();
            }
        }
    }
    root.impl_->grad.assign(1, 1.0);
    for (std::size_t n = last + 1; n-- > 0;) {
        const auto& node = nodes_[n];
        if (node.output->grad.empty()) continue;
        propagate(node);
    }
    for (auto* leaf : leaves) {
        if (!leaf->grad.empty()) result.grads_.emplace(leaf, leaf->grad);
    }
    return result;
}

// Backward on the current thread's active tape.
inline GradientMap backward(const Tensor& root) {
    Tape* tape = Tape::active();
    if (!tape) {
        if (!root.requires_grad()) return {};
        throw std::invalid_argument("backward: no active tape");
    }
    return tape->backward(root);
}

// ---- finite-difference verification ------------------------------------------

struct GradCheckReport {
    bool passed = true;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::string message;
};

// Compares tape gradients of f at x with central differences. The relative
// error of each component is |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckReport gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                      double step = 1e-5, double tol = 1e-4) {
    if (!(step > 0.0 && step <= 1e-2)) throw std::invalid_argument("gradient_check: step must be in (0, 1e-2]");
    std::vector<double> analytic(x.numel(), 0.0);
    {
        Tape tape;
        Tensor leaf = x.detach(true);
        Tensor y = f(leaf);
        if (y.numel() != 1) throw ShapeError("gradient_check: f must return a scalar");
        auto grads = tape.backward(y);
        if (grads.contains(leaf)) analytic = grads.at(leaf);
    }
    GradCheckReport report;
    std::vector<double> probe(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + step;
        const double fp = f(Tensor(x.shape(), probe)).item();
        probe[i] = orig - step;
        const double fm = f(Tensor(x.shape(), probe)).item();
        probe[i] = orig;
        const double numeric = (fp - fm) / (2.0 * step);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        const double rel = std::abs(analytic[i] - numeric) / denom;
        if (!(rel <= report.max_rel_error)) {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= tol;
    std::ostringstream os;
    os << (report.passed ? "pass" : "FAIL") << ": max relative error " << report.max_rel_error
       << " at component " << report.worst_index << " (analytic " << report.analytic << ", numeric "
       << report.numeric << ")";
    report.message = os.str();
    return report;
}

}  // namespace flac
