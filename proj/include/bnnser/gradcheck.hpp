#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bnnser/autodiff.hpp"

namespace bnnser::ad {

using GraphFn = std::function<Var(Graph&, std::span<const Var>)>;

namespace detail {

// Fixed non-uniform weights so every output coordinate contributes distinctly.
inline double probe_weight(std::size_t i) { return 0.5 + static_cast<double>((i * 7919) % 13) / 13.0; }

inline double scalarize(Var y) {
    auto v = y.value();
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) acc += probe_weight(i) * v[i];
    return acc;
}

inline Var scalarize_graph(Graph& g, Var y) {
    std::vector<double> w(y.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = probe_weight(i);
    return sum(mul(y, g.constant(y.shape(), std::move(w))));
}

}  // namespace detail

/// Max over all input coordinates of |analytic - central difference| / max(1, |analytic|).
/// `f` must be deterministic given the graph seed.
inline double gradcheck(const GraphFn& f, std::vector<Tensor> point, double eps, std::uint64_t seed = 0) {
    if (!(eps > 0.0 && eps <= 1e-2)) throw ValidationError("gradcheck eps must lie in (0, 1e-2]");

    std::vector<std::vector<double>> analytic;
    {
        Graph g(seed);
        std::vector<Var> in;
        for (auto t : point) {
            t.requires_grad = true;
            in.push_back(g.input(t));
        }
        Var loss = detail::scalarize_graph(g, f(g, in));
        g.backward(loss);
        for (auto& v : in) {
            auto gr = g.grad(v);
            analytic.emplace_back(gr.begin(), gr.end());
            if (analytic.back().empty()) analytic.back().assign(v.size(), 0.0);
        }
    }

    auto evaluate = [&](const std::vector<Tensor>& pt) {
        Graph g(seed, false);
        std::vector<Var> in;
        for (const auto& t : pt) in.push_back(g.constant(t));
        return detail::scalarize(f(g, in));
    };

    double worst = 0.0;
    for (std::size_t k = 0; k < point.size(); ++k) {
        for (std::size_t i = 0; i < point[k].size(); ++i) {
            const double orig = point[k].data[i];
            point[k].data[i] = orig + eps;
            const double up = evaluate(point);
            point[k].data[i] = orig - eps;
            const double down = evaluate(point);
            point[k].data[i] = orig;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[k][i];
            worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
        }
    }
    return worst;
}

/// The op under test applied with fixed attributes to `in`.
inline Var apply_op(Op op, Graph& /*g*/, std::span<const Var> in) {
    auto need = [&](std::size_t n) {
        if (in.size() != n)
            throw ValidationError(std::string("op '") + op_name(op) + "' takes " + std::to_string(n) + " inputs");
    };
    switch (op) {
        case Op::add: need(2); return add(in[0], in[1]);
        case Op::sub: need(2); return sub(in[0], in[1]);
        case Op::mul: need(2); return mul(in[0], in[1]);
        case Op::div: need(2); return div(in[0], in[1]);
        case Op::matmul: need(2); return matmul(in[0], in[1]);
        case Op::conv1d:
            if (in.size() == 3) return conv1d(in[0], in[1], in[2]);
            need(2);
            return conv1d(in[0], in[1]);
        case Op::maxpool1d: need(1); return maxpool1d(in[0], 2);
        case Op::sigmoid: need(1); return sigmoid(in[0]);
        case Op::tanh: need(1); return tanh(in[0]);
        case Op::relu: need(1); return relu(in[0]);
        case Op::softplus: need(1); return softplus(in[0]);
        case Op::exp: need(1); return exp(in[0]);
        case Op::log: need(1); return log(in[0]);
        case Op::square: need(1); return square(in[0]);
        case Op::sqrt: need(1); return sqrt(in[0]);
        case Op::mean: need(1); return mean(in[0], in[0].shape().size() > 1 ? std::optional<std::size_t>(0) : std::nullopt);
        case Op::variance:
            need(1);
            return variance(in[0], in[0].shape().size() > 1 ? std::optional<std::size_t>(0) : std::nullopt, true);
        case Op::sum: need(1); return sum(in[0]);
        case Op::slice: {
            need(1);
            const std::size_t ax = in[0].shape().size() - 1;
            const std::size_t len = in[0].shape()[ax];
            return len > 1 ? slice(in[0], ax, 1, len) : slice(in[0], ax, 0, 1);
        }
        case Op::concat: return concat(in, 0);
        case Op::dropout: {
            need(1);
            std::vector<double> mask(in[0].size());
            for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i % 3 == 1) ? 0.0 : 2.0;
            return dropout_apply(in[0], std::move(mask));
        }
        case Op::neg: need(1); return neg(in[0]);
        case Op::scale: need(1); return scale(in[0], 1.7);
        case Op::shift: need(1); return shift(in[0], 0.3);
        case Op::reshape: need(1); return reshape(in[0], {in[0].size()});
        case Op::clamp_min: need(1); return clamp_min(in[0], 0.0);
        case Op::leaf: break;
    }
    throw ValidationError(std::string("gradcheck: unsupported op '") + op_name(op) + "'");
}

inline double gradcheck(Op op, std::vector<Tensor> point, double eps) {
    if (op == Op::leaf) throw ValidationError("gradcheck: unsupported op 'leaf'");
    return gradcheck([op](Graph& g, std::span<const Var> in) { return apply_op(op, g, in); }, std::move(point), eps);
}

/// A random point away from kinks, ties and domain edges for the given op.
inline std::vector<Tensor> random_point(Op op, Rng& rng) {
    auto normal = [&](Shape s, double sd = 1.0) {
        std::vector<double> v(numel(s));
        for (auto& x : v) x = sd * standard_normal(rng);
        return Tensor(std::move(s), std::move(v));
    };
    auto away_from_zero = [&](Shape s, double gap) {
        std::vector<double> v(numel(s));
        for (auto& x : v) {
            const double mag = gap + std::abs(standard_normal(rng));
            x = uniform01(rng) < 0.5 ? -mag : mag;
        }
        return Tensor(std::move(s), std::move(v));
    };
    auto positive = [&](Shape s, double lo, double hi) {
        std::vector<double> v(numel(s));
        for (auto& x : v) x = uniform(rng, lo, hi);
        return Tensor(std::move(s), std::move(v));
    };
    const std::size_t r = static_cast<std::size_t>(uniform_int(rng, 2, 4));
    const std::size_t c = static_cast<std::size_t>(uniform_int(rng, 2, 5));
    switch (op) {
        case Op::add:
        case Op::sub:
        case Op::mul:
            // second operand alternates between same-shape and broadcast row
            return {normal({r, c}), uniform01(rng) < 0.5 ? normal({r, c}) : normal({c})};
        case Op::div: return {normal({r, c}), away_from_zero({r, c}, 0.5)};
        case Op::matmul: {
            const std::size_t k = static_cast<std::size_t>(uniform_int(rng, 2, 5));
            return {normal({r, k}), normal({k, c})};
        }
        case Op::conv1d: {
            const std::size_t cin = static_cast<std::size_t>(uniform_int(rng, 1, 3));
            const std::size_t cout = static_cast<std::size_t>(uniform_int(rng, 1, 3));
            const std::size_t k = static_cast<std::size_t>(uniform_int(rng, 1, 5));
            const std::size_t len = static_cast<std::size_t>(uniform_int(rng, 4, 9));
            return {normal({2, cin, len}), normal({cout, cin, k}, 0.5), normal({cout}, 0.5)};
        }
        case Op::maxpool1d: {
            // distinct values with gaps far larger than any finite-difference step
            const std::size_t len = 2 * static_cast<std::size_t>(uniform_int(rng, 2, 4));
            const std::size_t n = 2 * 2 * len;
            std::vector<double> v(n);
            for (std::size_t i = 0; i < n; ++i) v[i] = 0.1 * static_cast<double>(i);
            for (std::size_t i = n; i-- > 1;) std::swap(v[i], v[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(i)))]);
            return {Tensor({2, 2, len}, std::move(v))};
        }
        case Op::relu:
        case Op::clamp_min: return {away_from_zero({r, c}, 0.05)};
        case Op::log:
        case Op::sqrt: return {positive({r, c}, 0.2, 3.0)};
        case Op::exp: return {normal({r, c}, 0.7)};
        case Op::variance: return {normal({r, c})};
        case Op::concat: return {normal({r, c}), normal({1, c}), normal({2, c})};
        default: return {normal({r, c})};
    }
}

}  // namespace bnnser::ad
