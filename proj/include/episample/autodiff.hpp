#ifndef EPISAMPLE_AUTODIFF_HPP
#define EPISAMPLE_AUTODIFF_HPP

// Tape-based reverse-mode automatic differentiation over dense row-major
// tensors of doubles.
//
// A Graph is an append-only tape. Operations on Vars that depend on a
// gradient-requiring leaf append one node each; everything else is computed
// eagerly as a detached constant. Every backward rule is written in terms of
// the same recorded operations, so running backward with create_graph = true
// appends the gradient computation to the tape and the result can be
// differentiated again (MAML's inner loop relies on this).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"

namespace episample {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor value. Scalars have shape {1}.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() : shape{1}, data(1, 0.0) {}

    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        for (auto dim : shape) {
            if (dim == 0) {
                throw ShapeError("Tensor: zero-sized dimension in shape " + shape_str(shape));
            }
        }
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("Tensor: shape " + shape_str(shape) + " holds " +
                             std::to_string(shape_numel(shape)) + " values but " +
                             std::to_string(data.size()) + " were given");
        }
    }

    static Tensor filled(Shape s, double value) {
        const auto n = shape_numel(s);
        return Tensor(std::move(s), std::vector<double>(n, value));
    }
    static Tensor zeros(Shape s) { return filled(std::move(s), 0.0); }
    static Tensor ones(Shape s) { return filled(std::move(s), 1.0); }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> d) {
        return Tensor({rows, cols}, std::move(d));
    }
    static Tensor identity(std::size_t n) {
        auto t = zeros({n, n});
        for (std::size_t i = 0; i < n; ++i) {
            t.data[i * n + i] = 1.0;
        }
        return t;
    }

    std::size_t size() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    std::size_t rows() const { return shape.at(0); }
    std::size_t cols() const { return shape.at(1); }
    double item() const {
        if (data.size() != 1) {
            throw ShapeError("Tensor::item: tensor of shape " + shape_str(shape) + " is not a scalar");
        }
        return data[0];
    }
    double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

enum class Op : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    scale,
    scalar_mul,
    matmul,
    transpose,
    relu,
    exp,
    log,
    sum,
    mean,
    rowsum,
    scale_rows,
    softmax_rows,
    sqdist,
    dot,
    softmax_xent,
};

inline const char* op_name(Op op) {
    switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "subtract";
    case Op::mul: return "multiply";
    case Op::scale: return "scale";
    case Op::scalar_mul: return "scalar_multiply";
    case Op::matmul: return "matmul";
    case Op::transpose: return "transpose";
    case Op::relu: return "relu";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::rowsum: return "rowsum";
    case Op::scale_rows: return "scale_rows";
    case Op::softmax_rows: return "softmax_rows";
    case Op::sqdist: return "squared_euclidean_distance";
    case Op::dot: return "dot";
    case Op::softmax_xent: return "softmax_cross_entropy";
    }
    return "unknown";
}

class Graph;

/// Handle to a tensor value, optionally linked to a node of a Graph.
/// A Var without a node is detached: it is a constant and receives no gradient.
class Var {
public:
    Var() = default;

    /// Detached constant.
    explicit Var(Tensor value) : value_(std::make_shared<const Tensor>(std::move(value))) {}

    const Tensor& value() const { return *value_; }
    const Shape& shape() const { return value_->shape; }
    std::size_t size() const { return value_->size(); }
    double item() const { return value_->item(); }

    bool attached() const noexcept { return node_ >= 0; }
    std::int64_t node() const noexcept { return node_; }
    Graph* graph() const noexcept { return graph_; }

    /// Same value, no graph link.
    Var detach() const {
        Var v;
        v.value_ = value_;
        return v;
    }

private:
    friend class Graph;
    Var(Graph* g, std::int64_t node, std::shared_ptr<const Tensor> value)
        : graph_(g), node_(node), value_(std::move(value)) {}

    Graph* graph_ = nullptr;
    std::int64_t node_ = -1;
    std::shared_ptr<const Tensor> value_ = std::make_shared<const Tensor>();
};

/// Append-only tape of operation records.
class Graph {
public:
    struct Node {
        Op op;
        std::vector<Var> inputs;
        std::shared_ptr<const Tensor> value;
        double scalar = 0.0;                         // scale factor
        std::shared_ptr<const std::vector<std::size_t>> labels; // softmax_xent
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Leaf tensor. With requires_grad = false the result is a detached constant.
    Var leaf(Tensor value, bool requires_grad = true) {
        if (!requires_grad) {
            return Var(std::move(value));
        }
        auto ptr = std::make_shared<const Tensor>(std::move(value));
        nodes_.push_back(Node{Op::leaf, {}, ptr, 0.0, nullptr});
        return Var(this, static_cast<std::int64_t>(nodes_.size() - 1), std::move(ptr));
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    const Node& node(std::size_t i) const { return nodes_.at(i); }
    bool recording() const noexcept { return recording_; }

    /// Appends a node when recording is on and some input is attached to this
    /// graph; otherwise returns a detached constant.
    Var record(Op op, std::vector<Var> inputs, Tensor out, double scalar = 0.0,
               std::shared_ptr<const std::vector<std::size_t>> labels = nullptr) {
        auto ptr = std::make_shared<const Tensor>(std::move(out));
        if (!recording_) {
            return Var(nullptr, -1, std::move(ptr));
        }
        const bool tracked = std::any_of(inputs.begin(), inputs.end(),
                                         [this](const Var& v) { return v.attached() && v.graph() == this; });
        if (!tracked) {
            return Var(nullptr, -1, std::move(ptr));
        }
        for (const auto& in : inputs) {
            if (in.attached() && in.graph() != this) {
                throw Error(std::string(op_name(op)) + ": operands belong to different graphs");
            }
        }
        nodes_.push_back(Node{op, std::move(inputs), ptr, scalar, std::move(labels)});
        return Var(this, static_cast<std::int64_t>(nodes_.size() - 1), std::move(ptr));
    }

    class RecordingGuard {
    public:
        RecordingGuard(Graph& g, bool on) : g_(g), saved_(g.recording_) { g.recording_ = on; }
        ~RecordingGuard() { g_.recording_ = saved_; }
        RecordingGuard(const RecordingGuard&) = delete;
        RecordingGuard& operator=(const RecordingGuard&) = delete;

    private:
        Graph& g_;
        bool saved_;
    };

    Var self(std::size_t i) const {
        return Var(const_cast<Graph*>(this), static_cast<std::int64_t>(i), nodes_[i].value);
    }

private:
    std::vector<Node> nodes_;
    bool recording_ = true;
};

namespace detail {

inline Var make(Op op, std::vector<Var> inputs, Tensor out, double scalar = 0.0,
                std::shared_ptr<const std::vector<std::size_t>> labels = nullptr) {
    Graph* g = nullptr;
    for (const auto& in : inputs) {
        if (in.attached()) {
            g = in.graph();
            break;
        }
    }
    if (g == nullptr) {
        return Var(std::move(out));
    }
    return g->record(op, std::move(inputs), std::move(out), scalar, std::move(labels));
}

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

inline void require_matrix(const char* op, const Var& a) {
    if (a.shape().size() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(a.shape()));
    }
}

inline void require_scalar(const char* op, const Var& a) {
    if (a.size() != 1) {
        throw ShapeError(std::string(op) + ": expected a scalar, got shape " + shape_str(a.shape()));
    }
}

template <typename F>
Tensor map(const Tensor& a, F f) {
    Tensor out = a;
    for (auto& x : out.data) {
        x = f(x);
    }
    return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = f(a.data[i], b.data[i]);
    }
    return out;
}

inline Tensor matmul_values(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a.data[i * k + p];
            const double* brow = b.data.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] += aip * brow[j];
            }
        }
    }
    return out;
}

inline Tensor transpose_values(const Tensor& a) {
    const std::size_t m = a.shape[0], n = a.shape[1];
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.data[j * m + i] = a.data[i * n + j];
        }
    }
    return out;
}

inline Tensor softmax_values(const Tensor& z) {
    const std::size_t m = z.shape[0], n = z.shape[1];
    Tensor out = z;
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data.data() + i * n;
        const double mx = *std::max_element(row, row + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            total += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            row[j] /= total;
        }
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Forward operations

inline Var add(const Var& a, const Var& b) {
    detail::require_same_shape("add", a, b);
    return detail::make(Op::add, {a, b}, detail::zip(a.value(), b.value(), std::plus<>()));
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_shape("subtract", a, b);
    return detail::make(Op::sub, {a, b}, detail::zip(a.value(), b.value(), std::minus<>()));
}

inline Var mul(const Var& a, const Var& b) {
    detail::require_same_shape("multiply", a, b);
    return detail::make(Op::mul, {a, b}, detail::zip(a.value(), b.value(), std::multiplies<>()));
}

/// Multiplication by a constant.
inline Var scale(const Var& a, double c) {
    return detail::make(Op::scale, {a}, detail::map(a.value(), [c](double x) { return c * x; }), c);
}

/// Multiplication of every element of `a` by the scalar tensor `s`.
inline Var scalar_mul(const Var& s, const Var& a) {
    detail::require_scalar("scalar_multiply", s);
    const double c = s.item();
    return detail::make(Op::scalar_mul, {s, a}, detail::map(a.value(), [c](double x) { return c * x; }));
}

inline Var matmul(const Var& a, const Var& b) {
    detail::require_matrix("matmul", a);
    detail::require_matrix("matmul", b);
    if (a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    return detail::make(Op::matmul, {a, b}, detail::matmul_values(a.value(), b.value()));
}

inline Var transpose(const Var& a) {
    detail::require_matrix("transpose", a);
    return detail::make(Op::transpose, {a}, detail::transpose_values(a.value()));
}

inline Var relu(const Var& a) {
    return detail::make(Op::relu, {a}, detail::map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }));
}

inline Var exp(const Var& a) {
    return detail::make(Op::exp, {a}, detail::map(a.value(), [](double x) { return std::exp(x); }));
}

inline Var log(const Var& a) {
    for (double x : a.value().data) {
        if (!(x > 0.0)) {
            throw DomainError("log: non-positive argument " + std::to_string(x));
        }
    }
    return detail::make(Op::log, {a}, detail::map(a.value(), [](double x) { return std::log(x); }));
}

inline Var sum(const Var& a) {
    double total = 0.0;
    for (double x : a.value().data) {
        total += x;
    }
    return detail::make(Op::sum, {a}, Tensor::scalar(total));
}

// Running mean: a constant input comes back bit-exact.
inline Var mean(const Var& a) {
    double m = 0.0;
    std::size_t k = 0;
    for (double x : a.value().data) {
        m += (x - m) / static_cast<double>(++k);
    }
    return detail::make(Op::mean, {a}, Tensor::scalar(m));
}

/// Row sums of an m x n matrix, shape {m}.
inline Var rowsum(const Var& a) {
    detail::require_matrix("rowsum", a);
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out = Tensor::zeros({m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.data[i] += a.value().data[i * n + j];
        }
    }
    return detail::make(Op::rowsum, {a}, std::move(out));
}

/// Multiplies row i of an m x n matrix by v[i].
inline Var scale_rows(const Var& a, const Var& v) {
    detail::require_matrix("scale_rows", a);
    if (v.shape() != Shape{a.shape()[0]}) {
        throw ShapeError("scale_rows: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(v.shape()));
    }
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out = a.value();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.data[i * n + j] *= v.value().data[i];
        }
    }
    return detail::make(Op::scale_rows, {a, v}, std::move(out));
}

/// Row-wise softmax of an m x n matrix (max-subtracted).
inline Var softmax_rows(const Var& z) {
    detail::require_matrix("softmax_rows", z);
    return detail::make(Op::softmax_rows, {z}, detail::softmax_values(z.value()));
}

/// Pairwise squared Euclidean distances between the rows of a (m x e) and b (n x e), shape {m, n}.
inline Var sqdist(const Var& a, const Var& b) {
    detail::require_matrix("squared_euclidean_distance", a);
    detail::require_matrix("squared_euclidean_distance", b);
    if (a.shape()[1] != b.shape()[1]) {
        throw ShapeError("squared_euclidean_distance: feature widths differ " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], n = b.shape()[0], e = a.shape()[1];
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < e; ++p) {
                const double d = a.value().data[i * e + p] - b.value().data[j * e + p];
                acc += d * d;
            }
            out.data[i * n + j] = acc;
        }
    }
    return detail::make(Op::sqdist, {a, b}, std::move(out));
}

/// Inner product of two equally shaped tensors, shape {1}.
inline Var dot(const Var& a, const Var& b) {
    detail::require_same_shape("dot", a, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a.value().data[i] * b.value().data[i];
    }
    return detail::make(Op::dot, {a, b}, Tensor::scalar(acc));
}

/// Per-row negative log-likelihood of `labels` under softmax(logits); shape {m}.
/// Fused and stabilized by subtracting each row's maximum.
inline Var softmax_cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
    detail::require_matrix("softmax_cross_entropy", logits);
    const std::size_t m = logits.shape()[0], n = logits.shape()[1];
    if (labels.size() != m) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits of shape " +
                         shape_str(logits.shape()));
    }
    Tensor out = Tensor::zeros({m});
    const auto& z = logits.value().data;
    for (std::size_t i = 0; i < m; ++i) {
        if (labels[i] >= n) {
            throw ShapeError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " out of range for " +
                             std::to_string(n) + " classes");
        }
        const double* row = z.data() + i * n;
        const double mx = *std::max_element(row, row + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            total += std::exp(row[j] - mx);
        }
        out.data[i] = std::log(total) + mx - row[labels[i]];
    }
    return detail::make(Op::softmax_xent, {logits}, std::move(out), 0.0,
                        std::make_shared<const std::vector<std::size_t>>(labels));
}

// ---------------------------------------------------------------------------
// Backward

using GradientMap = std::map<std::int64_t, Var>;

namespace detail {

inline Var constant(Tensor t) { return Var(std::move(t)); }

// Nodes whose gradient is wanted; empty means every node.
using Needed = std::vector<char>;

inline void accumulate(std::vector<std::optional<Var>>& grads, const Var& input, Var contribution,
                       const Needed& needed) {
    if (!input.attached() || (!needed.empty() && !needed[static_cast<std::size_t>(input.node())])) {
        return;
    }
    auto& slot = grads[static_cast<std::size_t>(input.node())];
    slot = slot ? add(*slot, contribution) : std::move(contribution);
}

// Gradient contributions of node `i` given its upstream gradient.
inline void propagate(Graph& g, std::size_t i, const Var& grad, std::vector<std::optional<Var>>& grads,
                      const Needed& needed) {
    auto acc = [&](const Var& input, Var contribution) { accumulate(grads, input, std::move(contribution), needed); };
    const Graph::Node node = g.node(i); // copy: recording may grow the tape
    const auto& in = node.inputs;
    for (const auto& x : in) {
        if (x.attached() && static_cast<std::size_t>(x.node()) >= i) {
            throw Error("backward: node " + std::to_string(i) + " depends on a later node (cycle)");
        }
    }
    const Var out = g.self(i);
    switch (node.op) {
    case Op::leaf:
        break;
    case Op::add:
        acc(in[0], grad);
        acc(in[1], grad);
        break;
    case Op::sub:
        acc(in[0], grad);
        acc(in[1], scale(grad, -1.0));
        break;
    case Op::mul:
        acc(in[0], mul(grad, in[1]));
        acc(in[1], mul(grad, in[0]));
        break;
    case Op::scale:
        acc(in[0], scale(grad, node.scalar));
        break;
    case Op::scalar_mul:
        if (in[0].attached()) {
            acc(in[0], dot(grad, in[1]));
        }
        acc(in[1], scalar_mul(in[0], grad));
        break;
    case Op::matmul:
        if (in[0].attached()) {
            acc(in[0], matmul(grad, transpose(in[1])));
        }
        if (in[1].attached()) {
            acc(in[1], matmul(transpose(in[0]), grad));
        }
        break;
    case Op::transpose:
        acc(in[0], transpose(grad));
        break;
    case Op::relu:
        acc(in[0],
                   mul(grad, constant(map(in[0].value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; }))));
        break;
    case Op::exp:
        acc(in[0], mul(grad, out));
        break;
    case Op::log:
        // d/dx log x = 1/x = exp(-log x)
        acc(in[0], mul(grad, exp(scale(out, -1.0))));
        break;
    case Op::sum:
        acc(in[0], scalar_mul(grad, constant(Tensor::ones(in[0].shape()))));
        break;
    case Op::mean:
        acc(in[0],
                   scalar_mul(scale(grad, 1.0 / static_cast<double>(in[0].size())),
                              constant(Tensor::ones(in[0].shape()))));
        break;
    case Op::rowsum:
        acc(in[0], scale_rows(constant(Tensor::ones(in[0].shape())), grad));
        break;
    case Op::scale_rows:
        acc(in[0], scale_rows(grad, in[1]));
        if (in[1].attached()) {
            acc(in[1], rowsum(mul(grad, in[0])));
        }
        break;
    case Op::softmax_rows:
        // dz = s * g - s * rowsum(g * s)
        acc(in[0], sub(mul(out, grad), scale_rows(out, rowsum(mul(grad, out)))));
        break;
    case Op::sqdist: {
        const Var gt = transpose(grad);
        if (in[0].attached()) {
            acc(in[0], scale(sub(scale_rows(in[0], rowsum(grad)), matmul(grad, in[1])), 2.0));
        }
        if (in[1].attached()) {
            acc(in[1], scale(sub(scale_rows(in[1], rowsum(gt)), matmul(gt, in[0])), 2.0));
        }
        break;
    }
    case Op::dot:
        acc(in[0], scalar_mul(grad, in[1]));
        acc(in[1], scalar_mul(grad, in[0]));
        break;
    case Op::softmax_xent: {
        const auto& labels = *node.labels;
        const std::size_t m = in[0].shape()[0], n = in[0].shape()[1];
        Tensor onehot = Tensor::zeros({m, n});
        for (std::size_t r = 0; r < m; ++r) {
            onehot.data[r * n + labels[r]] = 1.0;
        }
        acc(in[0], scale_rows(sub(softmax_rows(in[0]), constant(std::move(onehot))), grad));
        break;
    }
    }
}

inline std::vector<std::optional<Var>> run_backward(const Var& output, bool create_graph,
                                                    const std::vector<Var>* targets = nullptr) {
    if (output.size() != 1) {
        throw ShapeError("backward: output must be a scalar, got shape " + shape_str(output.shape()));
    }
    std::vector<std::optional<Var>> grads;
    if (!output.attached()) {
        return grads;
    }
    Graph& g = *output.graph();
    const auto top = static_cast<std::size_t>(output.node());
    grads.resize(top + 1);

    Needed needed;
    if (targets != nullptr) {
        // A node is needed when it is a target or depends on one.
        needed.assign(top + 1, 0);
        for (const auto& t : *targets) {
            if (t.attached() && static_cast<std::size_t>(t.node()) <= top) {
                needed[static_cast<std::size_t>(t.node())] = 1;
            }
        }
        for (std::size_t i = 0; i <= top; ++i) {
            if (needed[i]) {
                continue;
            }
            for (const auto& in : g.node(i).inputs) {
                if (in.attached() && static_cast<std::size_t>(in.node()) < i && needed[static_cast<std::size_t>(in.node())]) {
                    needed[i] = 1;
                    break;
                }
            }
        }
        if (!needed[top]) {
            return grads;
        }
    }

    Graph::RecordingGuard guard(g, create_graph);
    grads[top] = constant(Tensor::ones(output.shape()));
    for (std::size_t i = top + 1; i-- > 0;) {
        if (!grads[i]) {
            continue;
        }
        const Var upstream = *grads[i];
        propagate(g, i, upstream, grads, needed);
    }
    return grads;
}

} // namespace detail

/// Gradients of a scalar output with respect to every gradient-requiring leaf
/// it depends on, keyed by leaf node id. With create_graph = true the
/// returned gradients are themselves recorded on the tape.
inline GradientMap backward(const Var& output, bool create_graph = false) {
    auto grads = detail::run_backward(output, create_graph);
    GradientMap result;
    if (!output.attached()) {
        return result;
    }
    const Graph& g = *output.graph();
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (grads[i] && g.node(i).op == Op::leaf) {
            result.emplace(static_cast<std::int64_t>(i), *grads[i]);
        }
    }
    return result;
}

/// Gradients with respect to the listed tensors, in order. Tensors the output
/// does not depend on get a zero gradient (detached).
inline std::vector<Var> gradients(const Var& output, const std::vector<Var>& wrt, bool create_graph = false) {
    auto grads = detail::run_backward(output, create_graph, &wrt);
    std::vector<Var> result;
    result.reserve(wrt.size());
    for (const auto& v : wrt) {
        if (output.attached() && v.attached() && v.graph() != output.graph()) {
            throw Error("gradients: tensor belongs to a different graph than the output");
        }
        const auto id = v.node();
        if (id >= 0 && static_cast<std::size_t>(id) < grads.size() && grads[static_cast<std::size_t>(id)]) {
            result.push_back(*grads[static_cast<std::size_t>(id)]);
        } else {
            result.emplace_back(Tensor::zeros(v.shape()));
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Scalar function of tensors, built on a fresh graph per evaluation.
using ScalarFunction = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const ScalarFunction& f, const std::vector<Tensor>& point, double epsilon = 1e-5) {
    if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) {
        throw DomainError("grad_check: epsilon must lie in [1e-6, 1e-3]");
    }
    auto evaluate = [&](const std::vector<Tensor>& at) {
        Graph g;
        std::vector<Var> args;
        args.reserve(at.size());
        for (const auto& t : at) {
            args.push_back(g.leaf(t)); // tracked, so f may differentiate internally
        }
        const double v = f(g, args).item();
        if (!std::isfinite(v)) {
            throw DomainError("grad_check: non-finite function value");
        }
        return v;
    };

    Graph g;
    std::vector<Var> args;
    for (const auto& t : point) {
        args.push_back(g.leaf(t));
    }
    const Var out = f(g, args);
    if (!std::isfinite(out.item())) {
        throw DomainError("grad_check: non-finite function value");
    }
    const auto analytic = gradients(out, args);

    double worst = 0.0;
    std::vector<Tensor> probe = point;
    for (std::size_t t = 0; t < point.size(); ++t) {
        for (std::size_t i = 0; i < point[t].size(); ++i) {
            const double x0 = point[t].data[i];
            probe[t].data[i] = x0 + epsilon;
            const double fp = evaluate(probe);
            probe[t].data[i] = x0 - epsilon;
            const double fm = evaluate(probe);
            probe[t].data[i] = x0;
            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double a = analytic[t].value().data[i];
            if (!std::isfinite(a) || !std::isfinite(numeric)) {
                throw DomainError("grad_check: non-finite gradient");
            }
            worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
        }
    }
    return worst;
}

} // namespace episample

#endif
