#pragma once

// Tape-based reverse-mode differentiation over dense double tensors.
//
// Backward rules are written in terms of graph ops, so a gradient pass run
// with create_graph=true records its own nodes and can be differentiated
// again. With create_graph=false the same rules run with recording switched
// off and the pass appends nothing to the tape.

#include <atomic>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "metacoop/tensor.hpp"

namespace metacoop {

enum class Op : std::uint8_t {
    Leaf,
    MatMul,    // A·B
    MatMulNT,  // A·Bᵀ
    MatMulTN,  // Aᵀ·B
    Add,
    Sub,
    Mul,
    AddBias,  // (n,m) + (1,m)
    Relu,
    ReluMask,  // g where x > 0, else 0
    Scale,
    Square,
    Mean,
    Sum,
    SoftmaxXent,  // mean over rows of -log softmax(z)[label]
    Softmax,      // row-wise
    ConcatRows,
    SliceRows,
    PadRows,
    Transpose,
    SumRows,        // (n,m) -> (1,m)
    BroadcastRows,  // (1,m) -> (n,m)
    RowSum,         // (n,m) -> (n,1)
    BroadcastCols,  // (n,1) -> (n,m)
    BroadcastScalar,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::MatMul: return "matmul";
        case Op::MatMulNT: return "matmul_nt";
        case Op::MatMulTN: return "matmul_tn";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::AddBias: return "add_bias";
        case Op::Relu: return "relu";
        case Op::ReluMask: return "relu_mask";
        case Op::Scale: return "scale";
        case Op::Square: return "square";
        case Op::Mean: return "mean";
        case Op::Sum: return "sum";
        case Op::SoftmaxXent: return "softmax_xent";
        case Op::Softmax: return "softmax";
        case Op::ConcatRows: return "concat_rows";
        case Op::SliceRows: return "slice_rows";
        case Op::PadRows: return "pad_rows";
        case Op::Transpose: return "transpose";
        case Op::SumRows: return "sum_rows";
        case Op::BroadcastRows: return "broadcast_rows";
        case Op::RowSum: return "row_sum";
        case Op::BroadcastCols: return "broadcast_cols";
        case Op::BroadcastScalar: return "broadcast_scalar";
    }
    return "?";
}

// Non-tensor operands of an op.
struct OpAttrs {
    double scalar = 0.0;    // Scale factor
    std::size_t begin = 0;  // SliceRows / PadRows row offset
    std::size_t count = 0;  // SliceRows row count, PadRows total rows, Broadcast* repeat count
    Shape shape;            // BroadcastScalar target shape
    std::shared_ptr<const std::vector<int>> labels;  // SoftmaxXent class indices
};

class Graph;

// A tensor value, optionally linked to a node of a Graph.
class Var {
public:
    Var() = default;

    static Var constant(Array value) {
        Var v;
        v.value_ = std::make_shared<const Array>(std::move(value));
        return v;
    }

    bool empty() const noexcept { return !value_; }
    const Array& value() const { return *value_; }
    const Shape& shape() const { return value_->shape(); }
    bool tracked() const noexcept { return node_ >= 0; }
    std::int64_t node() const noexcept { return node_; }

private:
    friend class Graph;
    friend Var detach(const Var& v);

    std::shared_ptr<const Array> value_;
    std::int64_t node_ = -1;
    std::uint64_t graph_ = 0;
};

// Same values, no graph linkage.
inline Var detach(const Var& v) {
    Var out;
    out.value_ = v.value_;
    return out;
}

namespace detail {

[[noreturn]] inline void fail(Op op, const std::string& msg) { throw ShapeError(std::string(op_name(op)) + ": " + msg); }

inline void require(bool ok, Op op, const char* msg) {
    if (!ok) fail(op, msg);
}

inline bool is_matrix(const Array& a) { return a.rank() == 2; }

inline Array matmul(const Array& a, const Array& b, bool ta, bool tb, Op op) {
    require(is_matrix(a) && is_matrix(b), op, "operands must be rank 2");
    const std::size_t n = ta ? a.cols() : a.rows();
    const std::size_t k = ta ? a.rows() : a.cols();
    const std::size_t kb = tb ? b.cols() : b.rows();
    const std::size_t m = tb ? b.rows() : b.cols();
    if (k != kb) fail(op, "inner dimensions " + to_string(a.shape()) + " x " + to_string(b.shape()));
    // A transposed right operand is materialized so the inner loop runs over
    // contiguous rows. Each C[i][j] accumulates its k terms in increasing order.
    std::vector<double> bt;
    const double* B = b.values().data();
    if (tb) {
        bt.resize(k * m);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < k; ++c) bt[c * m + r] = B[r * k + c];
        B = bt.data();
    }
    Array c(Shape{n, m});
    const double* A = a.values().data();
    double* C = c.values().data();
    const std::size_t lda = a.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double* crow = C + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ta ? A[p * lda + i] : A[i * lda + p];
            const double* brow = B + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

template <class F>
Array zip(const Array& a, const Array& b, Op op, F f) {
    if (a.shape() != b.shape()) fail(op, "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Array c(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = f(a[i], b[i]);
    return c;
}

template <class F>
Array map(const Array& a, F f) {
    Array c(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = f(a[i]);
    return c;
}

inline Array softmax_rows(const Array& z) {
    Array s(z.shape());
    const std::size_t n = z.rows(), c = z.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double mx = z.at(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z.at(i, j));
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            s.at(i, j) = std::exp(z.at(i, j) - mx);
            total += s.at(i, j);
        }
        for (std::size_t j = 0; j < c; ++j) s.at(i, j) /= total;
    }
    return s;
}

inline Array one_hot(const std::vector<int>& labels, std::size_t classes) {
    Array y(Shape{labels.size(), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) y.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
    return y;
}

inline Array compute(Op op, std::span<const Var> in, const OpAttrs& at) {
    auto arity = [&](std::size_t n) {
        if (in.size() != n) fail(op, "expected " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
    };
    switch (op) {
        case Op::Leaf:
            throw std::logic_error("compute: leaf nodes carry their own value");
        case Op::MatMul:
            arity(2);
            return matmul(in[0].value(), in[1].value(), false, false, op);
        case Op::MatMulNT:
            arity(2);
            return matmul(in[0].value(), in[1].value(), false, true, op);
        case Op::MatMulTN:
            arity(2);
            return matmul(in[0].value(), in[1].value(), true, false, op);
        case Op::Add:
            arity(2);
            return zip(in[0].value(), in[1].value(), op, [](double x, double y) { return x + y; });
        case Op::Sub:
            arity(2);
            return zip(in[0].value(), in[1].value(), op, [](double x, double y) { return x - y; });
        case Op::Mul:
            arity(2);
            return zip(in[0].value(), in[1].value(), op, [](double x, double y) { return x * y; });
        case Op::AddBias: {
            arity(2);
            const Array& x = in[0].value();
            const Array& b = in[1].value();
            if (!(is_matrix(x) && is_matrix(b) && b.rows() == 1 && b.cols() == x.cols())) {
                fail(op, "bias " + to_string(b.shape()) + " does not fit " + to_string(x.shape()));
            }
            Array c(x.shape());
            const std::size_t m = x.cols();
            for (std::size_t i = 0; i < x.size(); ++i) c[i] = x[i] + b[i % m];
            return c;
        }
        case Op::Relu:
            arity(1);
            return map(in[0].value(), [](double x) { return x > 0.0 ? x : 0.0; });
        case Op::ReluMask:
            arity(2);
            return zip(in[0].value(), in[1].value(), op, [](double g, double x) { return x > 0.0 ? g : 0.0; });
        case Op::Scale: {
            arity(1);
            const double s = at.scalar;
            return map(in[0].value(), [s](double x) { return s * x; });
        }
        case Op::Square:
            arity(1);
            return map(in[0].value(), [](double x) { return x * x; });
        case Op::Mean:
        case Op::Sum: {
            arity(1);
            const Array& x = in[0].value();
            require(x.size() > 0, op, "empty input");
            double s = 0.0;
            for (double v : x.values()) s += v;
            return Array::scalar(op == Op::Mean ? s / static_cast<double>(x.size()) : s);
        }
        case Op::SoftmaxXent: {
            arity(1);
            const Array& z = in[0].value();
            if (!(is_matrix(z) && at.labels && at.labels->size() == z.rows() && z.rows() > 0)) {
                fail(op, "logits " + to_string(z.shape()) + " do not match the label count");
            }
            const std::size_t n = z.rows(), c = z.cols();
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const int y = (*at.labels)[i];
                require(y >= 0 && static_cast<std::size_t>(y) < c, op, "label out of range");
                double mx = z.at(i, 0);
                for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z.at(i, j));
                double se = 0.0;
                for (std::size_t j = 0; j < c; ++j) se += std::exp(z.at(i, j) - mx);
                total += mx + std::log(se) - z.at(i, static_cast<std::size_t>(y));
            }
            return Array::scalar(total / static_cast<double>(n));
        }
        case Op::Softmax:
            arity(1);
            require(is_matrix(in[0].value()), op, "needs rank 2");
            return softmax_rows(in[0].value());
        case Op::ConcatRows: {
            require(!in.empty(), op, "no inputs");
            require(is_matrix(in[0].value()), op, "needs rank 2");
            const std::size_t m = in[0].value().cols();
            std::size_t rows = 0;
            for (const auto& v : in) {
                require(is_matrix(v.value()) && v.value().cols() == m, op, "column mismatch");
                rows += v.value().rows();
            }
            std::vector<double> data;
            data.reserve(rows * m);
            for (const auto& v : in) data.insert(data.end(), v.value().values().begin(), v.value().values().end());
            return Array(Shape{rows, m}, std::move(data));
        }
        case Op::SliceRows: {
            arity(1);
            const Array& x = in[0].value();
            require(is_matrix(x) && at.begin + at.count <= x.rows(), op, "row range out of bounds");
            const std::size_t m = x.cols();
            auto first = x.values().begin() + static_cast<std::ptrdiff_t>(at.begin * m);
            return Array(Shape{at.count, m}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(at.count * m)));
        }
        case Op::PadRows: {
            arity(1);
            const Array& x = in[0].value();
            require(is_matrix(x) && at.begin + x.rows() <= at.count, op, "padding target too small");
            const std::size_t m = x.cols();
            Array c(Shape{at.count, m});
            std::copy(x.values().begin(), x.values().end(), c.values().begin() + static_cast<std::ptrdiff_t>(at.begin * m));
            return c;
        }
        case Op::Transpose: {
            arity(1);
            const Array& x = in[0].value();
            require(is_matrix(x), op, "needs rank 2");
            const std::size_t n = x.rows(), m = x.cols();
            Array c(Shape{m, n});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) c[j * n + i] = x[i * m + j];
            return c;
        }
        case Op::SumRows: {
            arity(1);
            const Array& x = in[0].value();
            require(is_matrix(x), op, "needs rank 2");
            const std::size_t n = x.rows(), m = x.cols();
            Array c(Shape{1, m});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) c[j] += x[i * m + j];
            return c;
        }
        case Op::BroadcastRows: {
            arity(1);
            const Array& x = in[0].value();
            require(is_matrix(x) && x.rows() == 1, op, "needs shape (1, m)");
            const std::size_t m = x.cols();
            Array c(Shape{at.count, m});
            for (std::size_t i = 0; i < at.count; ++i)
                for (std::size_t j = 0; j < m; ++j) c[i * m + j] = x[j];
            return c;
        }
        case Op::RowSum: {
            arity(1);
            const Array& x = in[0].value();
            require(is_matrix(x), op, "needs rank 2");
            const std::size_t n = x.rows(), m = x.cols();
            Array c(Shape{n, 1});
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < m; ++j) s += x[i * m + j];
                c[i] = s;
            }
            return c;
        }
        case Op::BroadcastCols: {
            arity(1);
            const Array& x = in[0].value();
            require(is_matrix(x) && x.cols() == 1, op, "needs shape (n, 1)");
            const std::size_t n = x.rows();
            Array c(Shape{n, at.count});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < at.count; ++j) c[i * at.count + j] = x[i];
            return c;
        }
        case Op::BroadcastScalar: {
            arity(1);
            require(in[0].value().size() == 1, op, "needs a scalar");
            return Array(at.shape, in[0].value()[0]);
        }
    }
    throw std::logic_error("compute: unknown op");
}

}  // namespace detail

class Graph {
public:
    enum class Mode { Recording, Frozen };

    explicit Graph(Mode mode = Mode::Recording) : mode_(mode), id_(next_id()) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Mode mode() const noexcept { return mode_; }
    void set_mode(Mode m) noexcept { mode_ = m; }
    std::size_t node_count() const noexcept { return nodes_.size(); }

    // Differentiable input. In frozen mode the result is a plain constant.
    Var leaf(Array value) {
        if (!value.all_finite()) throw NumericError("leaf: non-finite value");
        Var v = Var::constant(std::move(value));
        if (mode_ == Mode::Recording) {
            v.node_ = static_cast<std::int64_t>(nodes_.size());
            v.graph_ = id_;
            nodes_.push_back(Node{Op::Leaf, {}, {}, v});
        }
        return v;
    }

    Var apply(Op op, std::span<const Var> inputs, const OpAttrs& attrs = {}) {
        bool any_tracked = false;
        for (const auto& in : inputs) {
            if (in.empty()) throw std::invalid_argument(std::string(op_name(op)) + ": empty input");
            if (in.tracked()) {
                if (in.graph_ != id_) throw std::invalid_argument(std::string(op_name(op)) + ": input from another graph");
                any_tracked = true;
            }
        }
        Array out = detail::compute(op, inputs, attrs);
        if (!out.all_finite()) throw NumericError(std::string(op_name(op)) + " produced a non-finite value");
        Var v = Var::constant(std::move(out));
        if (mode_ == Mode::Recording && any_tracked) {
            v.node_ = static_cast<std::int64_t>(nodes_.size());
            v.graph_ = id_;
            nodes_.push_back(Node{op, std::vector<Var>(inputs.begin(), inputs.end()), attrs, v});
        }
        return v;
    }

    Var matmul(const Var& a, const Var& b) { return apply2(Op::MatMul, a, b); }
    Var matmul_nt(const Var& a, const Var& b) { return apply2(Op::MatMulNT, a, b); }
    Var matmul_tn(const Var& a, const Var& b) { return apply2(Op::MatMulTN, a, b); }
    Var add(const Var& a, const Var& b) { return apply2(Op::Add, a, b); }
    Var sub(const Var& a, const Var& b) { return apply2(Op::Sub, a, b); }
    Var mul(const Var& a, const Var& b) { return apply2(Op::Mul, a, b); }
    Var add_bias(const Var& x, const Var& b) { return apply2(Op::AddBias, x, b); }
    Var relu(const Var& x) { return apply1(Op::Relu, x); }
    Var relu_mask(const Var& g, const Var& x) { return apply2(Op::ReluMask, g, x); }
    Var square(const Var& x) { return apply1(Op::Square, x); }
    Var mean(const Var& x) { return apply1(Op::Mean, x); }
    Var sum(const Var& x) { return apply1(Op::Sum, x); }
    Var softmax(const Var& x) { return apply1(Op::Softmax, x); }
    Var transpose(const Var& x) { return apply1(Op::Transpose, x); }
    Var sum_rows(const Var& x) { return apply1(Op::SumRows, x); }
    Var row_sum(const Var& x) { return apply1(Op::RowSum, x); }

    Var scale(const Var& x, double s) {
        OpAttrs at;
        at.scalar = s;
        return apply1(Op::Scale, x, at);
    }
    Var softmax_xent(const Var& logits, std::shared_ptr<const std::vector<int>> labels) {
        OpAttrs at;
        at.labels = std::move(labels);
        return apply1(Op::SoftmaxXent, logits, at);
    }
    Var softmax_xent(const Var& logits, std::vector<int> labels) {
        return softmax_xent(logits, std::make_shared<const std::vector<int>>(std::move(labels)));
    }
    Var concat_rows(std::span<const Var> parts) { return apply(Op::ConcatRows, parts); }
    Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
        OpAttrs at;
        at.begin = begin;
        at.count = count;
        return apply1(Op::SliceRows, x, at);
    }
    Var pad_rows(const Var& x, std::size_t begin, std::size_t total) {
        OpAttrs at;
        at.begin = begin;
        at.count = total;
        return apply1(Op::PadRows, x, at);
    }
    Var broadcast_rows(const Var& x, std::size_t n) {
        OpAttrs at;
        at.count = n;
        return apply1(Op::BroadcastRows, x, at);
    }
    Var broadcast_cols(const Var& x, std::size_t m) {
        OpAttrs at;
        at.count = m;
        return apply1(Op::BroadcastCols, x, at);
    }
    Var broadcast_scalar(const Var& x, Shape shape) {
        OpAttrs at;
        at.shape = std::move(shape);
        return apply1(Op::BroadcastScalar, x, at);
    }

    // d(loss)/d(wrt[i]) for each i. Tensors the loss does not depend on get
    // an explicit zero. With create_graph the results are themselves tracked.
    std::vector<Var> gradient(const Var& loss, std::span<const Var> wrt, bool create_graph) {
        if (mode_ == Mode::Frozen) throw std::logic_error("gradient: graph is frozen");
        if (loss.empty() || loss.value().size() != 1) {
            throw ShapeError("gradient: loss must be a scalar, got " + (loss.empty() ? std::string("empty") : to_string(loss.shape())));
        }
        if (loss.tracked() && loss.graph_ != id_) throw std::invalid_argument("gradient: loss from another graph");

        std::vector<Var> result;
        result.reserve(wrt.size());
        if (!loss.tracked()) {
            for (const auto& w : wrt) result.push_back(Var::constant(Array(w.shape())));
            return result;
        }

        const auto end = static_cast<std::size_t>(loss.node_) + 1;
        std::vector<char> relevant(end, 0);
        std::vector<char> is_target(end, 0);
        for (const auto& w : wrt) {
            if (w.tracked() && w.graph_ == id_ && static_cast<std::size_t>(w.node_) < end) {
                relevant[static_cast<std::size_t>(w.node_)] = 1;
                is_target[static_cast<std::size_t>(w.node_)] = 1;
            }
        }
        for (std::size_t i = 0; i < end; ++i) {
            if (relevant[i]) continue;
            for (const auto& in : nodes_[i].inputs) {
                if (in.tracked() && relevant[static_cast<std::size_t>(in.node_)]) {
                    relevant[i] = 1;
                    break;
                }
            }
        }

        std::vector<Var> adj(end);
        adj[end - 1] = Var::constant(Array(loss.shape(), 1.0));

        const Mode saved = mode_;
        mode_ = create_graph ? Mode::Recording : Mode::Frozen;
        try {
            for (std::size_t i = end; i-- > 0;) {
                if (adj[i].empty() || !relevant[i]) continue;
                // nodes_ is a deque: references stay valid while backward rules append.
                const Node& node = nodes_[i];
                for (std::size_t k = 0; k < node.inputs.size(); ++k) {
                    const Var& in = node.inputs[k];
                    if (!in.tracked() || !relevant[static_cast<std::size_t>(in.node_)]) continue;
                    Var g = vjp(node, adj[i], k);
                    if (g.empty()) continue;
                    Var& slot = adj[static_cast<std::size_t>(in.node_)];
                    slot = slot.empty() ? g : add(slot, g);
                }
                if (!is_target[i]) adj[i] = Var{};
            }
        } catch (...) {
            mode_ = saved;
            throw;
        }
        mode_ = saved;

        for (const auto& w : wrt) {
            if (w.tracked() && w.graph_ == id_ && static_cast<std::size_t>(w.node_) < end &&
                !adj[static_cast<std::size_t>(w.node_)].empty()) {
                result.push_back(adj[static_cast<std::size_t>(w.node_)]);
            } else {
                result.push_back(Var::constant(Array(w.shape())));
            }
        }
        return result;
    }

    // Named event counters, used to observe which model paths ran.
    void tally(std::string_view event) {
        auto it = counters_.find(event);
        if (it == counters_.end()) it = counters_.emplace(std::string(event), 0).first;
        ++it->second;
    }
    std::size_t tally_count(std::string_view event) const {
        auto it = counters_.find(event);
        return it == counters_.end() ? 0 : it->second;
    }

private:
    struct Node {
        Op op;
        std::vector<Var> inputs;
        OpAttrs attrs;
        Var output;
    };

    static std::uint64_t next_id() {
        static std::atomic<std::uint64_t> counter{1};
        return counter.fetch_add(1);
    }

    Var apply1(Op op, const Var& x, const OpAttrs& at = {}) { return apply(op, std::span<const Var>(&x, 1), at); }
    Var apply2(Op op, const Var& a, const Var& b) {
        const Var in[2] = {a, b};
        return apply(op, in);
    }

    // Contribution of the output adjoint g to input k of node. Empty Var
    // means no contribution.
    Var vjp(const Node& node, const Var& g, std::size_t k) {
        const auto& in = node.inputs;
        switch (node.op) {
            case Op::Leaf:
                return {};
            case Op::MatMul:
                return k == 0 ? matmul_nt(g, in[1]) : matmul_tn(in[0], g);
            case Op::MatMulNT:
                return k == 0 ? matmul(g, in[1]) : matmul_tn(g, in[0]);
            case Op::MatMulTN:
                return k == 0 ? matmul_nt(in[1], g) : matmul(in[0], g);
            case Op::Add:
                return g;
            case Op::Sub:
                return k == 0 ? g : scale(g, -1.0);
            case Op::Mul:
                return mul(g, in[1 - k]);
            case Op::AddBias:
                return k == 0 ? g : sum_rows(g);
            case Op::Relu:
                return relu_mask(g, in[0]);
            case Op::ReluMask:
                // The mask is piecewise constant in x.
                return k == 0 ? relu_mask(g, in[1]) : Var{};
            case Op::Scale:
                return scale(g, node.attrs.scalar);
            case Op::Square:
                return scale(mul(g, in[0]), 2.0);
            case Op::Mean:
                return broadcast_scalar(scale(g, 1.0 / static_cast<double>(in[0].value().size())), in[0].shape());
            case Op::Sum:
                return broadcast_scalar(g, in[0].shape());
            case Op::SoftmaxXent: {
                const Array& z = in[0].value();
                const double inv_n = 1.0 / static_cast<double>(z.rows());
                Var residual = sub(softmax(in[0]), Var::constant(detail::one_hot(*node.attrs.labels, z.cols())));
                return mul(broadcast_scalar(g, z.shape()), scale(residual, inv_n));
            }
            case Op::Softmax: {
                const Var& s = node.output;
                Var inner = broadcast_cols(row_sum(mul(g, s)), s.value().cols());
                return mul(s, sub(g, inner));
            }
            case Op::ConcatRows: {
                std::size_t offset = 0;
                for (std::size_t j = 0; j < k; ++j) offset += in[j].value().rows();
                return slice_rows(g, offset, in[k].value().rows());
            }
            case Op::SliceRows:
                return pad_rows(g, node.attrs.begin, in[0].value().rows());
            case Op::PadRows:
                return slice_rows(g, node.attrs.begin, in[0].value().rows());
            case Op::Transpose:
                return transpose(g);
            case Op::SumRows:
                return broadcast_rows(g, in[0].value().rows());
            case Op::BroadcastRows:
                return sum_rows(g);
            case Op::RowSum:
                return broadcast_cols(g, in[0].value().cols());
            case Op::BroadcastCols:
                return row_sum(g);
            case Op::BroadcastScalar:
                return sum(g);
        }
        throw std::logic_error("vjp: unknown op");
    }

    Mode mode_;
    std::uint64_t id_;
    std::deque<Node> nodes_;
    std::map<std::string, std::size_t, std::less<>> counters_;
};

}  // namespace metacoop
