#pragma once

// Deterministic layers (dense, conv block, LSTM) and the Bayes-by-Backprop
// linear layer with windowed weight sampling.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "bnnser/autodiff.hpp"

namespace bnnser::nn {

using ad::Graph;
using ad::Parameter;
using ad::Shape;
using ad::Var;

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

inline void init_uniform(Parameter& p, double lo, double hi, Rng& rng) {
    for (auto& v : p.value) v = uniform(rng, lo, hi);
}

/// Fully connected layer, x [rows,in] -> [rows,out].
class Dense {
public:
    Dense() = default;
    Dense(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
        : weight(name + ".weight", {in, out}), bias(name + ".bias", {out}) {
        const double k = 1.0 / std::sqrt(static_cast<double>(in));
        init_uniform(weight, -k, k, rng);
        init_uniform(bias, -k, k, rng);
    }

    Var forward(Graph& g, Var x) { return ad::matmul(x, g.param(weight)) + g.param(bias); }

    std::vector<Parameter*> parameters() { return {&weight, &bias}; }
    std::size_t in_features() const { return weight.shape[0]; }
    std::size_t out_features() const { return weight.shape[1]; }

    Parameter weight;
    Parameter bias;
};

/// conv1d (same padding) -> relu -> non-overlapping maxpool.
class ConvBlock {
public:
    ConvBlock() = default;
    ConvBlock(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t pool,
              Rng& rng)
        : weight(name + ".weight", {out_ch, in_ch, kernel}), bias(name + ".bias", {out_ch}), pool(pool) {
        const double k = 1.0 / std::sqrt(static_cast<double>(in_ch * kernel));
        init_uniform(weight, -k, k, rng);
        init_uniform(bias, -k, k, rng);
    }

    /// x [N,Cin,L] -> [N,Cout,L/pool]
    Var forward(Graph& g, Var x) {
        return ad::maxpool1d(ad::relu(ad::conv1d(x, g.param(weight), g.param(bias))), pool);
    }

    std::vector<Parameter*> parameters() { return {&weight, &bias}; }

    Parameter weight;
    Parameter bias;
    std::size_t pool = 1;
};

struct LstmState {
    Var h;  // [B,H]
    Var c;  // [B,H]
};

/// LSTM weights bound into one graph. Gate column order: input, forget, candidate, output.
struct LstmWeights {
    Var w_ih;  // [in,4H]
    Var w_hh;  // [H,4H]
    Var bias;  // [4H]
    std::size_t hidden = 0;
};

/// One cell update. Gates are sigmoid, the candidate is tanh.
inline LstmState lstm_step(Var x_t, const LstmState& state, const LstmWeights& w) {
    const auto& xs = x_t.shape();
    if (xs.size() != 2 || xs[1] != w.w_ih.shape()[0])
        throw ShapeError("lstm_step: input " + ad::to_string(xs) + " does not match input weights " +
                         ad::to_string(w.w_ih.shape()));
    if (state.h.shape() != Shape{xs[0], w.hidden} || state.c.shape() != state.h.shape())
        throw ShapeError("lstm_step: state shape " + ad::to_string(state.h.shape()) + " does not match batch/hidden");
    const std::size_t H = w.hidden;
    Var gates = ad::matmul(x_t, w.w_ih) + ad::matmul(state.h, w.w_hh) + w.bias;
    Var i = ad::sigmoid(ad::slice(gates, 1, 0, H));
    Var f = ad::sigmoid(ad::slice(gates, 1, H, 2 * H));
    Var cand = ad::tanh(ad::slice(gates, 1, 2 * H, 3 * H));
    Var o = ad::sigmoid(ad::slice(gates, 1, 3 * H, 4 * H));
    Var c = f * state.c + i * cand;
    Var h = o * ad::tanh(c);
    return {h, c};
}

class LstmLayer {
public:
    LstmLayer() = default;
    LstmLayer(const std::string& name, std::size_t in, std::size_t hidden, Rng& rng)
        : w_ih(name + ".w_ih", {in, 4 * hidden}), w_hh(name + ".w_hh", {hidden, 4 * hidden}),
          bias(name + ".bias", {4 * hidden}), hidden_(hidden) {
        const double k = 1.0 / std::sqrt(static_cast<double>(hidden));
        init_uniform(w_ih, -k, k, rng);
        init_uniform(w_hh, -k, k, rng);
        init_uniform(bias, -k, k, rng);
        for (std::size_t j = hidden; j < 2 * hidden; ++j) bias.value[j] = 1.0;
    }

    LstmWeights bind(Graph& g) { return {g.param(w_ih), g.param(w_hh), g.param(bias), hidden_}; }

    LstmState zero_state(Graph& g, std::size_t batch) const {
        return {g.constant({batch, hidden_}, std::vector<double>(batch * hidden_, 0.0)),
                g.constant({batch, hidden_}, std::vector<double>(batch * hidden_, 0.0))};
    }

    /// xs is time-major [T*B, in] (row t*B + b). Returns [T*B, H]; `state` is
    /// updated to the final state.
    Var run(Graph& g, Var xs, std::size_t batch, LstmState& state) {
        const std::size_t rows = xs.shape()[0];
        if (rows % batch != 0) throw ShapeError("lstm: row count not divisible by batch size");
        const auto w = bind(g);
        std::vector<Var> outs;
        outs.reserve(rows / batch);
        for (std::size_t t = 0; t < rows / batch; ++t) {
            state = lstm_step(ad::slice(xs, 0, t * batch, (t + 1) * batch), state, w);
            outs.push_back(state.h);
        }
        return ad::concat(outs, 0);
    }

    std::vector<Parameter*> parameters() { return {&w_ih, &w_hh, &bias}; }
    std::size_t hidden() const { return hidden_; }

    Parameter w_ih;
    Parameter w_hh;
    Parameter bias;

private:
    std::size_t hidden_ = 0;
};

// ---------------------------------------------------------------------------
// Bayes by Backprop
// ---------------------------------------------------------------------------

/// Variational parameters: every weight and bias has its own (mu, rho); sigma = softplus(rho).
struct BayesParams {
    Parameter mu_w;
    Parameter rho_w;
    Parameter mu_b;
    Parameter rho_b;

    std::size_t in_features() const { return mu_w.shape[0]; }
    std::size_t out_features() const { return mu_w.shape[1]; }
    std::vector<Parameter*> parameters() { return {&mu_w, &rho_w, &mu_b, &rho_b}; }
};

struct Prior {
    double mean = 0.0;
    double std = 1.0;
};

inline BayesParams make_bayes_params(const std::string& name, std::size_t in, std::size_t out, Range mu_init,
                                     Range rho_init, Rng& rng) {
    BayesParams p{Parameter(name + ".mu_w", {in, out}), Parameter(name + ".rho_w", {in, out}),
                  Parameter(name + ".mu_b", {out}), Parameter(name + ".rho_b", {out})};
    init_uniform(p.mu_w, mu_init.lo, mu_init.hi, rng);
    init_uniform(p.rho_w, rho_init.lo, rho_init.hi, rng);
    init_uniform(p.mu_b, mu_init.lo, mu_init.hi, rng);
    init_uniform(p.rho_b, rho_init.lo, rho_init.hi, rng);
    return p;
}

/// One sampled weight set with its log densities (absent when not requested).
struct WeightDraw {
    Var w;
    Var b;
    Var log_q;
    Var log_prior;
};

namespace detail {

inline const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

// Sum over coordinates of log N(x; mean, sd) with graph-valued mean and sd.
inline Var gaussian_log_density(Var x, Var mu, Var sd) {
    const double n = static_cast<double>(x.size());
    Var z = (x - mu) / sd;
    return ad::shift(ad::scale(ad::sum(ad::square(z)), -0.5) - ad::sum(ad::log(sd)), -n * kHalfLog2Pi);
}

inline Var prior_log_density(Var x, const Prior& prior) {
    const double n = static_cast<double>(x.size());
    Var sq = ad::sum(ad::square(ad::shift(x, -prior.mean)));
    return ad::shift(ad::scale(sq, -0.5 / (prior.std * prior.std)), -n * (std::log(prior.std) + kHalfLog2Pi));
}

inline Var draw_one(Graph& g, Var mu, Var sigma, Rng& rng) {
    std::vector<double> eps(mu.size());
    for (auto& e : eps) e = standard_normal(rng);
    return mu + sigma * g.constant(mu.shape(), std::move(eps));
}

}  // namespace detail

/// Variational parameters bound into one graph, with sigma = softplus(rho) computed once.
struct BayesBinding {
    Var mu_w, rho_w, mu_b, rho_b;
    Var sigma_w, sigma_b;
};

inline BayesBinding bind(Graph& g, BayesParams& p) {
    if (p.mu_w.shape != p.rho_w.shape || p.mu_b.shape != p.rho_b.shape)
        throw ShapeError("BayesParams: mu and rho shapes differ");
    BayesBinding b{g.param(p.mu_w), g.param(p.rho_w), g.param(p.mu_b), g.param(p.rho_b), {}, {}};
    b.sigma_w = ad::softplus(b.rho_w);
    b.sigma_b = ad::softplus(b.rho_b);
    return b;
}

/// w = mu + softplus(rho) * eps, eps ~ N(0, I) drawn from `rng` outside the graph,
/// so gradients reach mu and rho through the reparameterization path.
/// With `densities`, log q(w|theta) and log P(w) are summed over all weights and biases.
inline WeightDraw sample_weights(Graph& g, const BayesBinding& p, const Prior& prior, Rng& rng, bool densities = true) {
    if (!(prior.std > 0.0)) throw ValidationError("prior std must be positive");
    WeightDraw d;
    d.w = detail::draw_one(g, p.mu_w, p.sigma_w, rng);
    d.b = detail::draw_one(g, p.mu_b, p.sigma_b, rng);
    if (densities) {
        d.log_q = detail::gaussian_log_density(d.w, p.mu_w, p.sigma_w) +
                  detail::gaussian_log_density(d.b, p.mu_b, p.sigma_b);
        d.log_prior = detail::prior_log_density(d.w, prior) + detail::prior_log_density(d.b, prior);
    }
    return d;
}

inline WeightDraw sample_weights(Graph& g, BayesParams& p, const Prior& prior, Rng& rng, bool densities = true) {
    return sample_weights(g, bind(g, p), prior, rng, densities);
}

inline Var linear(Var x, Var w, Var b) {
    if (x.shape().size() != 2 || x.shape()[1] != w.shape()[0])
        throw ShapeError("bayes linear: input " + ad::to_string(x.shape()) + " does not match weights " +
                         ad::to_string(w.shape()));
    return ad::matmul(x, w) + b;
}

struct BayesSample {
    Var output;
    Var log_q;
    Var log_prior;
};

inline BayesSample bayes_linear_sample(Graph& g, Var input, BayesParams& p, const Prior& prior, Rng& rng) {
    auto d = sample_weights(g, p, prior, rng, true);
    return {linear(input, d.w, d.b), d.log_q, d.log_prior};
}

/// Forward with w = mu_w; consumes no randomness.
inline Var bayes_linear_mean(Graph& g, Var input, BayesParams& p) {
    return linear(input, g.param(p.mu_w), g.param(p.mu_b));
}

/// ceil(frames / window_frames) independent draws; frame t uses draw floor(t / window_frames).
struct WeightSchedule {
    std::size_t frames = 0;
    std::size_t window_frames = 1;
    std::vector<WeightDraw> draws;

    std::size_t draw_for_frame(std::size_t t) const {
        if (t >= frames) throw ShapeError("frame " + std::to_string(t) + " outside schedule of " + std::to_string(frames));
        return t / window_frames;
    }
};

inline std::size_t window_count(std::size_t frames, std::size_t window_frames) {
    return (frames + window_frames - 1) / window_frames;
}

inline WeightSchedule sample_schedule(Graph& g, const BayesBinding& p, const Prior& prior, std::size_t frames,
                                      std::size_t window_frames, Rng& rng, bool densities = true) {
    if (frames < 1 || window_frames < 1) throw ValidationError("schedule needs frames >= 1 and window >= 1");
    WeightSchedule s{frames, window_frames, {}};
    const std::size_t n = window_count(frames, window_frames);
    s.draws.reserve(n);
    for (std::size_t i = 0; i < n; ++i) s.draws.push_back(sample_weights(g, p, prior, rng, densities));
    return s;
}

inline WeightSchedule sample_schedule(Graph& g, BayesParams& p, const Prior& prior, std::size_t frames,
                                      std::size_t window_frames, Rng& rng, bool densities = true) {
    return sample_schedule(g, bind(g, p), prior, frames, window_frames, rng, densities);
}

}  // namespace bnnser::nn
