#pragma once

// Tape-based reverse-mode differentiation over dense float64 arrays.
//
// A Graph is a single-use tape: every primitive appends one node holding its
// output value and a closure that pushes the output gradient back to its
// inputs. backward() walks the tape in exact reverse order, then releases all
// intermediate storage. Long-lived trainable state lives in Parameter objects
// that enter a graph as leaves and receive accumulated gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bnnser/errors.hpp"
#include "bnnser/rng.hpp"

namespace bnnser::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Dense array outside any graph.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty, or same size as data

    Tensor() = default;
    Tensor(Shape s, std::vector<double> d, bool rg = false)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        if (numel(shape) != data.size())
            throw ShapeError("tensor shape " + to_string(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
        for (auto dim : shape)
            if (dim == 0) throw ShapeError("tensor dimensions must be positive");
    }
    static Tensor zeros(Shape s) {
        const auto n = numel(s);
        return Tensor(std::move(s), std::vector<double>(n, 0.0));
    }
    std::size_t size() const noexcept { return data.size(); }
};

/// Trainable array that outlives graphs.
struct Parameter {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Shape s)
        : name(std::move(n)), shape(std::move(s)), value(numel(shape), 0.0), grad(numel(shape), 0.0) {}

    std::size_t size() const noexcept { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

enum class Op : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    div,
    matmul,
    conv1d,
    maxpool1d,
    sigmoid,
    tanh,
    relu,
    softplus,
    exp,
    log,
    square,
    sqrt,
    mean,
    variance,
    sum,
    slice,
    concat,
    dropout,
    // helpers beyond the core set
    neg,
    scale,
    shift,
    reshape,
    clamp_min,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::div: return "div";
        case Op::matmul: return "matmul";
        case Op::conv1d: return "conv1d";
        case Op::maxpool1d: return "maxpool1d";
        case Op::sigmoid: return "sigmoid";
        case Op::tanh: return "tanh";
        case Op::relu: return "relu";
        case Op::softplus: return "softplus";
        case Op::exp: return "exp";
        case Op::log: return "log";
        case Op::square: return "square";
        case Op::sqrt: return "sqrt";
        case Op::mean: return "mean";
        case Op::variance: return "variance";
        case Op::sum: return "sum";
        case Op::slice: return "slice";
        case Op::concat: return "concat";
        case Op::dropout: return "dropout-mask-apply";
        case Op::neg: return "neg";
        case Op::scale: return "scale";
        case Op::shift: return "shift";
        case Op::reshape: return "reshape";
        case Op::clamp_min: return "clamp_min";
    }
    return "?";
}

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
    Var() = default;

    Graph& graph() const { return *graph_; }
    std::uint32_t id() const noexcept { return id_; }
    bool valid() const noexcept { return graph_ != nullptr; }

    inline const Shape& shape() const;
    inline std::span<const double> value() const;
    inline std::size_t size() const;
    inline double item() const;

private:
    friend class Graph;
    Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}
    Graph* graph_ = nullptr;
    std::uint32_t id_ = 0;
};

class Graph {
public:
    using Backward = std::function<void(Graph&, std::uint32_t)>;

    /// `record = false` builds an inference-only tape: no closures, no backward.
    explicit Graph(std::uint64_t seed = 0, bool record = true) : rng_(seed), seed_(seed), record_(record) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    std::uint64_t seed() const noexcept { return seed_; }
    Rng& rng() noexcept { return rng_; }
    bool recording() const noexcept { return record_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    bool consumed() const noexcept { return consumed_; }

    Var constant(Shape shape, std::vector<double> value) {
        check_shape(shape, value.size());
        return push(Op::leaf, std::move(shape), std::move(value), {}, nullptr, false, nullptr);
    }
    Var constant(const Tensor& t) { return constant(t.shape, t.data); }
    Var scalar(double v) { return constant({1}, {v}); }

    /// Leaf owned by the graph; its gradient is readable through grad() after backward.
    Var input(const Tensor& t) {
        check_shape(t.shape, t.data.size());
        return push(Op::leaf, t.shape, t.data, {}, nullptr, record_ && t.requires_grad, nullptr);
    }

    /// Leaf bound to a Parameter; backward accumulates into param.grad.
    Var param(Parameter& p) {
        if (p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), 0.0);
        return push(Op::leaf, p.shape, p.value, {}, nullptr, record_ && p.trainable, &p);
    }

    /// Appends a node. Throws NumericError on non-finite output.
    Var emit(Op op, Shape shape, std::vector<double> value, std::vector<std::uint32_t> inputs, Backward fn) {
        for (std::size_t i = 0; i < value.size(); ++i) {
            if (!std::isfinite(value[i]))
                throw NumericError(std::string("non-finite output in op '") + op_name(op) + "' at node " +
                                   std::to_string(nodes_.size()));
        }
        bool rg = false;
        if (record_)
            for (auto in : inputs) rg = rg || nodes_[in].requires_grad;
        return push(op, std::move(shape), std::move(value), std::move(inputs), rg ? std::move(fn) : nullptr, rg,
                    nullptr);
    }

    // --- access used by op implementations ---
    const Shape& shape_of(std::uint32_t id) const { return nodes_.at(id).shape; }
    const std::vector<double>& value_of(std::uint32_t id) const {
        const auto& n = nodes_.at(id);
        if (n.released) throw Error("value of node " + std::to_string(id) + " was released by backward");
        return n.value;
    }
    Op op_of(std::uint32_t id) const { return nodes_.at(id).op; }
    bool requires_grad(std::uint32_t id) const { return nodes_.at(id).requires_grad; }

    /// Output gradient of a node during backward.
    const std::vector<double>& grad_out(std::uint32_t id) const { return nodes_[id].grad; }

    /// Gradient sink for an input, or nullptr if that input does not need one.
    double* grad_in(std::uint32_t id) {
        auto& n = nodes_[id];
        if (!n.requires_grad) return nullptr;
        if (n.param) return n.param->grad.data();
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        return n.grad.data();
    }

    /// Reverse sweep from a scalar node. A graph can be swept once.
    void backward(Var loss) {
        if (!record_) throw Error("backward on a non-recording graph");
        if (consumed_) throw Error("graph already consumed by a previous backward");
        if (loss.graph_ != this) throw Error("loss does not belong to this graph");
        auto& ln = nodes_.at(loss.id_);
        if (ln.value.size() != 1) throw ShapeError("backward needs a scalar loss, got " + to_string(ln.shape));
        consumed_ = true;
        if (!ln.requires_grad) return release();
        ln.grad.assign(1, 1.0);
        for (std::size_t i = loss.id_ + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
            n.backward(*this, static_cast<std::uint32_t>(i));
        }
        release();
    }

    /// Gradient of an input leaf after backward.
    std::span<const double> grad(Var v) const {
        const auto& n = nodes_.at(v.id_);
        if (n.op != Op::leaf || n.param) throw Error("grad() is only kept for input leaves");
        return n.grad;
    }

private:
    struct Node {
        Op op;
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;
        std::vector<std::uint32_t> inputs;
        Backward backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
        bool released = false;
    };

    static void check_shape(const Shape& s, std::size_t n) {
        if (numel(s) != n) throw ShapeError("shape " + to_string(s) + " does not match " + std::to_string(n) + " values");
        for (auto d : s)
            if (d == 0) throw ShapeError("tensor dimensions must be positive");
    }

    Var push(Op op, Shape shape, std::vector<double> value, std::vector<std::uint32_t> inputs, Backward fn, bool rg,
             Parameter* p) {
        if (consumed_) throw Error("graph already consumed by a previous backward");
        nodes_.push_back(Node{op, std::move(shape), std::move(value), {}, std::move(inputs), std::move(fn), p, rg, false});
        return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
    }

    void release() {
        for (auto& n : nodes_) {
            n.backward = nullptr;
            if (n.op == Op::leaf) continue;
            n.released = true;
            std::vector<double>().swap(n.value);
            std::vector<double>().swap(n.grad);
        }
    }

    std::vector<Node> nodes_;
    Rng rng_;
    std::uint64_t seed_;
    bool record_;
    bool consumed_ = false;
};

inline const Shape& Var::shape() const { return graph_->shape_of(id_); }
inline std::span<const double> Var::value() const { return graph_->value_of(id_); }
inline std::size_t Var::size() const { return graph_->shape_of(id_).empty() ? 1 : numel(graph_->shape_of(id_)); }
inline double Var::item() const {
    auto v = value();
    if (v.size() != 1) throw ShapeError("item() on non-scalar " + to_string(shape()));
    return v[0];
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace detail {

inline void same_graph(Var a, Var b) {
    if (&a.graph() != &b.graph()) throw Error("operands belong to different graphs");
}

inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Broadcasting rule: the smaller operand must be a trailing-dimension suffix of
// the larger one (or a single value); it is tiled over the leading dimensions.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return a;
    if (numel(b) == 1 || is_suffix(b, a)) return a;
    if (numel(a) == 1 || is_suffix(a, b)) return b;
    throw ShapeError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
}

template <class F, class DA, class DB>
Var binary(Op op, Var a, Var b, F f, DA dfa, DB dfb) {
    same_graph(a, b);
    Graph& g = a.graph();
    Shape shape = broadcast_shape(a.shape(), b.shape(), op_name(op));
    const auto& av = g.value_of(a.id());
    const auto& bv = g.value_of(b.id());
    const std::size_t n = numel(shape), na = av.size(), nb = bv.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i % na], bv[i % nb]);
    const auto ia = a.id(), ib = b.id();
    return g.emit(op, std::move(shape), std::move(out), {ia, ib}, [ia, ib, n, na, nb, dfa, dfb](Graph& g, std::uint32_t self) {
        const auto& go = g.grad_out(self);
        const auto& av = g.value_of(ia);
        const auto& bv = g.value_of(ib);
        if (double* ga = g.grad_in(ia))
            for (std::size_t i = 0; i < n; ++i) ga[i % na] += go[i] * dfa(av[i % na], bv[i % nb]);
        if (double* gb = g.grad_in(ib))
            for (std::size_t i = 0; i < n; ++i) gb[i % nb] += go[i] * dfb(av[i % na], bv[i % nb]);
    });
}

// Reduction geometry: shape = [outer, len, inner] around `axis`.
struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
    Shape reduced;
};

inline AxisSplit split_axis(const Shape& s, std::optional<std::size_t> axis) {
    AxisSplit r;
    if (!axis) {
        r.len = numel(s);
        r.reduced = {1};
        return r;
    }
    if (*axis >= s.size()) throw ShapeError("axis " + std::to_string(*axis) + " out of range for " + to_string(s));
    for (std::size_t i = 0; i < *axis; ++i) r.outer *= s[i];
    r.len = s[*axis];
    for (std::size_t i = *axis + 1; i < s.size(); ++i) r.inner *= s[i];
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != *axis) r.reduced.push_back(s[i]);
    if (r.reduced.empty()) r.reduced = {1};
    return r;
}

}  // namespace detail

/// Elementwise op with derivative written in terms of input x and output y.
template <class F, class D>
Var elementwise(Op op, Var x, F f, D dydx) {
    Graph& g = x.graph();
    const auto& xv = g.value_of(x.id());
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    const auto ix = x.id();
    return g.emit(op, x.shape(), std::move(out), {ix}, [ix, dydx](Graph& g, std::uint32_t self) {
        double* gx = g.grad_in(ix);
        if (!gx) return;
        const auto& go = g.grad_out(self);
        const auto& xv = g.value_of(ix);
        const auto& yv = g.value_of(self);
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += go[i] * dydx(xv[i], yv[i]);
    });
}

inline Var add(Var a, Var b) {
    return detail::binary(
        Op::add, a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}
inline Var sub(Var a, Var b) {
    return detail::binary(
        Op::sub, a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}
inline Var mul(Var a, Var b) {
    return detail::binary(
        Op::mul, a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}
inline Var div(Var a, Var b) {
    return detail::binary(
        Op::div, a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

inline Var neg(Var x) {
    return elementwise(Op::neg, x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}
inline Var scale(Var x, double c) {
    return elementwise(Op::scale, x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}
inline Var shift(Var x, double c) {
    return elementwise(Op::shift, x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus_value(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline Var sigmoid(Var x) {
    return elementwise(Op::sigmoid, x, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}
inline Var tanh(Var x) {
    return elementwise(Op::tanh, x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}
// Subgradient 0 at the kink.
inline Var relu(Var x) {
    return elementwise(Op::relu, x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}
inline Var softplus(Var x) {
    return elementwise(Op::softplus, x, softplus_value, [](double v, double) { return sigmoid_value(v); });
}
inline Var exp(Var x) {
    return elementwise(Op::exp, x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Var log(Var x) {
    return elementwise(Op::log, x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Var square(Var x) {
    return elementwise(Op::square, x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}
// Gradient taken as 0 where the output is exactly 0.
inline Var sqrt(Var x) {
    return elementwise(Op::sqrt, x, [](double v) { return std::sqrt(v); },
                       [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}
inline Var clamp_min(Var x, double lo) {
    return elementwise(Op::clamp_min, x, [lo](double v) { return v > lo ? v : lo; },
                       [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var x) { return scale(x, c); }
inline Var operator*(Var x, double c) { return scale(x, c); }
inline Var operator+(Var x, double c) { return shift(x, c); }
inline Var operator+(double c, Var x) { return shift(x, c); }
inline Var operator-(Var x, double c) { return shift(x, -c); }
inline Var operator-(double c, Var x) { return shift(neg(x), c); }

/// [m,k] x [k,n] -> [m,n]
inline Var matmul(Var a, Var b) {
    detail::same_graph(a, b);
    Graph& g = a.graph();
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
        throw ShapeError("matmul: shapes " + to_string(as) + " and " + to_string(bs) + " are incompatible");
    const std::size_t m = as[0], k = as[1], n = bs[1];
    const auto& av = g.value_of(a.id());
    const auto& bv = g.value_of(b.id());
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            const double* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    const auto ia = a.id(), ib = b.id();
    return g.emit(Op::matmul, {m, n}, std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph& g, std::uint32_t self) {
        const auto& go = g.grad_out(self);
        const auto& av = g.value_of(ia);
        const auto& bv = g.value_of(ib);
        if (double* ga = g.grad_in(ia)) {  // dA = dC B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double* brow = bv.data() + p * n;
                    const double* grow = go.data() + i * n;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    ga[i * k + p] += acc;
                }
        }
        if (double* gb = g.grad_in(ib)) {  // dB = A^T dC
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    const double* grow = go.data() + i * n;
                    double* gbrow = gb + p * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                }
        }
    });
}

/// x [N,Cin,L], w [Cout,Cin,K], optional bias [Cout] -> [N,Cout,L].
/// Stride 1, "same" zero padding: (K-1)/2 on the left, the rest on the right.
inline Var conv1d(Var x, Var w, std::optional<Var> bias = std::nullopt) {
    detail::same_graph(x, w);
    Graph& g = x.graph();
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 3 || ws.size() != 3 || xs[1] != ws[1])
        throw ShapeError("conv1d: input " + to_string(xs) + " and kernel " + to_string(ws) + " are incompatible");
    const std::size_t N = xs[0], Cin = xs[1], L = xs[2], Cout = ws[0], K = ws[2];
    if (bias) {
        detail::same_graph(x, *bias);
        if (numel(bias->shape()) != Cout) throw ShapeError("conv1d: bias must have " + std::to_string(Cout) + " values");
    }
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((K - 1) / 2);
    const auto& xv = g.value_of(x.id());
    const auto& wv = g.value_of(w.id());
    std::vector<double> out(N * Cout * L, 0.0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Cout; ++co) {
            double* o = out.data() + (n * Cout + co) * L;
            if (bias) std::fill(o, o + L, g.value_of(bias->id())[co]);
            for (std::size_t ci = 0; ci < Cin; ++ci) {
                const double* xi = xv.data() + (n * Cin + ci) * L;
                for (std::size_t k = 0; k < K; ++k) {
                    const double wk = wv[(co * Cin + ci) * K + k];
                    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - pad;
                    const std::size_t lo = off < 0 ? static_cast<std::size_t>(-off) : 0;
                    const std::size_t hi = off > 0 ? L - std::min<std::size_t>(L, static_cast<std::size_t>(off)) : L;
                    for (std::size_t l = lo; l < hi; ++l) o[l] += wk * xi[l + off];
                }
            }
        }
    std::vector<std::uint32_t> ins{x.id(), w.id()};
    if (bias) ins.push_back(bias->id());
    const auto ix = x.id(), iw = w.id();
    const std::optional<std::uint32_t> ibias = bias ? std::optional<std::uint32_t>(bias->id()) : std::nullopt;
    return g.emit(Op::conv1d, {N, Cout, L}, std::move(out), std::move(ins),
                  [=](Graph& g, std::uint32_t self) {
                      const auto& go = g.grad_out(self);
                      const auto& xv = g.value_of(ix);
                      const auto& wv = g.value_of(iw);
                      double* gx = g.grad_in(ix);
                      double* gw = g.grad_in(iw);
                      double* gb = ibias ? g.grad_in(*ibias) : nullptr;
                      for (std::size_t n = 0; n < N; ++n)
                          for (std::size_t co = 0; co < Cout; ++co) {
                              const double* o = go.data() + (n * Cout + co) * L;
                              if (gb)
                                  for (std::size_t l = 0; l < L; ++l) gb[co] += o[l];
                              for (std::size_t ci = 0; ci < Cin; ++ci) {
                                  const double* xi = xv.data() + (n * Cin + ci) * L;
                                  double* gxi = gx ? gx + (n * Cin + ci) * L : nullptr;
                                  for (std::size_t k = 0; k < K; ++k) {
                                      const std::size_t widx = (co * Cin + ci) * K + k;
                                      const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - pad;
                                      const std::size_t lo = off < 0 ? static_cast<std::size_t>(-off) : 0;
                                      const std::size_t hi =
                                          off > 0 ? L - std::min<std::size_t>(L, static_cast<std::size_t>(off)) : L;
                                      if (gw) {
                                          double acc = 0.0;
                                          for (std::size_t l = lo; l < hi; ++l) acc += o[l] * xi[l + off];
                                          gw[widx] += acc;
                                      }
                                      if (gxi) {
                                          const double wk = wv[widx];
                                          for (std::size_t l = lo; l < hi; ++l) gxi[l + off] += wk * o[l];
                                      }
                                  }
                              }
                          }
                  });
}

/// Non-overlapping max pooling over the last axis of [N,C,L]. L must divide by `size`.
/// Ties resolve to the lowest index; only that index receives gradient.
inline Var maxpool1d(Var x, std::size_t size) {
    Graph& g = x.graph();
    const auto& xs = x.shape();
    if (xs.size() != 3) throw ShapeError("maxpool1d expects [N,C,L], got " + to_string(xs));
    if (size == 0 || xs[2] % size != 0)
        throw ShapeError("maxpool1d: length " + std::to_string(xs[2]) + " not divisible by pool " + std::to_string(size));
    const std::size_t rows = xs[0] * xs[1], L = xs[2], Lo = L / size;
    const auto& xv = g.value_of(x.id());
    std::vector<double> out(rows * Lo);
    std::vector<std::size_t> arg(rows * Lo);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < Lo; ++j) {
            const std::size_t base = r * L + j * size;
            std::size_t best = base;
            for (std::size_t q = 1; q < size; ++q)
                if (xv[base + q] > xv[best]) best = base + q;
            out[r * Lo + j] = xv[best];
            arg[r * Lo + j] = best;
        }
    const auto ix = x.id();
    return g.emit(Op::maxpool1d, {xs[0], xs[1], Lo}, std::move(out), {ix},
                  [ix, arg = std::move(arg)](Graph& g, std::uint32_t self) {
                      double* gx = g.grad_in(ix);
                      if (!gx) return;
                      const auto& go = g.grad_out(self);
                      for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += go[i];
                  });
}

/// Sum over one axis, or over everything when axis is empty (result shape [1]).
inline Var sum(Var x, std::optional<std::size_t> axis = std::nullopt) {
    Graph& g = x.graph();
    const auto sp = detail::split_axis(x.shape(), axis);
    const auto& xv = g.value_of(x.id());
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l)
            for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.len + l) * sp.inner + i];
    const auto ix = x.id();
    return g.emit(Op::sum, sp.reduced, std::move(out), {ix}, [ix, sp](Graph& g, std::uint32_t self) {
        double* gx = g.grad_in(ix);
        if (!gx) return;
        const auto& go = g.grad_out(self);
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t l = 0; l < sp.len; ++l)
                for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.len + l) * sp.inner + i] += go[o * sp.inner + i];
    });
}

inline Var mean(Var x, std::optional<std::size_t> axis = std::nullopt) {
    Graph& g = x.graph();
    const auto sp = detail::split_axis(x.shape(), axis);
    const auto& xv = g.value_of(x.id());
    const double inv = 1.0 / static_cast<double>(sp.len);
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l)
            for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.len + l) * sp.inner + i];
    for (auto& v : out) v *= inv;
    const auto ix = x.id();
    return g.emit(Op::mean, sp.reduced, std::move(out), {ix}, [ix, sp, inv](Graph& g, std::uint32_t self) {
        double* gx = g.grad_in(ix);
        if (!gx) return;
        const auto& go = g.grad_out(self);
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t l = 0; l < sp.len; ++l)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    gx[(o * sp.len + l) * sp.inner + i] += go[o * sp.inner + i] * inv;
    });
}

/// Two-pass variance; `unbiased` divides by len-1 instead of len.
inline Var variance(Var x, std::optional<std::size_t> axis = std::nullopt, bool unbiased = false) {
    Graph& g = x.graph();
    const auto sp = detail::split_axis(x.shape(), axis);
    const std::size_t ddof = unbiased ? 1 : 0;
    if (sp.len <= ddof) throw ShapeError("variance needs more than " + std::to_string(ddof) + " elements along the axis");
    const double denom = static_cast<double>(sp.len - ddof);
    const auto& xv = g.value_of(x.id());
    const std::size_t nout = sp.outer * sp.inner;
    std::vector<double> mu(nout, 0.0), out(nout, 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l)
            for (std::size_t i = 0; i < sp.inner; ++i) mu[o * sp.inner + i] += xv[(o * sp.len + l) * sp.inner + i];
    for (auto& m : mu) m /= static_cast<double>(sp.len);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const double d = xv[(o * sp.len + l) * sp.inner + i] - mu[o * sp.inner + i];
                out[o * sp.inner + i] += d * d;
            }
    for (auto& v : out) v /= denom;
    const auto ix = x.id();
    return g.emit(Op::variance, sp.reduced, std::move(out), {ix},
                  [ix, sp, denom, mu = std::move(mu)](Graph& g, std::uint32_t self) {
                      double* gx = g.grad_in(ix);
                      if (!gx) return;
                      const auto& go = g.grad_out(self);
                      const auto& xv = g.value_of(ix);
                      for (std::size_t o = 0; o < sp.outer; ++o)
                          for (std::size_t l = 0; l < sp.len; ++l)
                              for (std::size_t i = 0; i < sp.inner; ++i) {
                                  const std::size_t idx = (o * sp.len + l) * sp.inner + i;
                                  gx[idx] += go[o * sp.inner + i] * 2.0 * (xv[idx] - mu[o * sp.inner + i]) / denom;
                              }
                  });
}

/// Elements [begin, end) along `axis`.
inline Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
    Graph& g = x.graph();
    const auto& xs = x.shape();
    const auto sp = detail::split_axis(xs, axis);
    if (begin >= end || end > sp.len)
        throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for axis length " +
                         std::to_string(sp.len));
    const std::size_t w = end - begin;
    Shape shape = xs;
    shape[axis] = w;
    const auto& xv = g.value_of(x.id());
    std::vector<double> out(sp.outer * w * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * sp.len + begin) * sp.inner), w * sp.inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * w * sp.inner));
    const auto ix = x.id();
    return g.emit(Op::slice, std::move(shape), std::move(out), {ix}, [ix, sp, begin, w](Graph& g, std::uint32_t self) {
        double* gx = g.grad_in(ix);
        if (!gx) return;
        const auto& go = g.grad_out(self);
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t j = 0; j < w * sp.inner; ++j) gx[(o * sp.len + begin) * sp.inner + j] += go[o * w * sp.inner + j];
    });
}

/// Joins tensors along `axis`; all other dimensions must agree.
inline Var concat(std::span<const Var> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    Graph& g = parts[0].graph();
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat axis out of range");
    std::vector<std::size_t> lens;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::same_graph(parts[0], p);
        const auto& s = p.shape();
        if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d)
            if (d != axis && s[d] != s0[d]) throw ShapeError("concat: shape mismatch " + to_string(s0) + " vs " + to_string(s));
        lens.push_back(s[axis]);
        total += s[axis];
    }
    const auto sp = detail::split_axis(s0, axis);
    Shape shape = s0;
    shape[axis] = total;
    std::vector<double> out(sp.outer * total * sp.inner);
    std::vector<std::uint32_t> ids;
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& v = g.value_of(parts[k].id());
        const std::size_t chunk = lens[k] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                        out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * sp.inner));
        offset += lens[k];
        ids.push_back(parts[k].id());
    }
    auto ids_copy = ids;
    return g.emit(Op::concat, std::move(shape), std::move(out), std::move(ids),
                  [ids = std::move(ids_copy), lens = std::move(lens), sp, total](Graph& g, std::uint32_t self) {
                      const auto& go = g.grad_out(self);
                      std::size_t offset = 0;
                      for (std::size_t k = 0; k < ids.size(); ++k) {
                          const std::size_t chunk = lens[k] * sp.inner;
                          if (double* gx = g.grad_in(ids[k]))
                              for (std::size_t o = 0; o < sp.outer; ++o)
                                  for (std::size_t j = 0; j < chunk; ++j)
                                      gx[o * chunk + j] += go[(o * total + offset) * sp.inner + j];
                          offset += lens[k];
                      }
                  });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
    return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

inline Var reshape(Var x, Shape shape) {
    Graph& g = x.graph();
    if (numel(shape) != x.size())
        throw ShapeError("reshape " + to_string(x.shape()) + " -> " + to_string(shape) + " changes the element count");
    const auto ix = x.id();
    return g.emit(Op::reshape, std::move(shape), g.value_of(ix), {ix}, [ix](Graph& g, std::uint32_t self) {
        double* gx = g.grad_in(ix);
        if (!gx) return;
        const auto& go = g.grad_out(self);
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
}

/// x * mask for a mask drawn outside the graph (already scaled by 1/keep).
inline Var dropout_apply(Var x, std::vector<double> mask) {
    Graph& g = x.graph();
    if (mask.size() != x.size()) throw ShapeError("dropout mask size does not match input");
    const auto& xv = g.value_of(x.id());
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * mask[i];
    const auto ix = x.id();
    return g.emit(Op::dropout, x.shape(), std::move(out), {ix}, [ix, mask = std::move(mask)](Graph& g, std::uint32_t self) {
        double* gx = g.grad_in(ix);
        if (!gx) return;
        const auto& go = g.grad_out(self);
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * mask[i];
    });
}

/// Inverted-dropout mask: 0 with probability `rate`, else 1/(1-rate).
inline std::vector<double> dropout_mask(std::size_t n, double rate, Rng& rng) {
    std::vector<double> mask(n, 1.0);
    if (rate <= 0.0) return mask;
    const double keep = 1.0 - rate;
    for (auto& m : mask) m = uniform01(rng) < keep ? 1.0 / keep : 0.0;
    return mask;
}

/// Copies a node's value out as a plain Tensor.
inline Tensor to_tensor(Var v) {
    auto val = v.value();
    return Tensor(v.shape(), std::vector<double>(val.begin(), val.end()));
}

}  // namespace bnnser::ad
