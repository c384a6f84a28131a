#pragma once

// End-to-end gradient check of a model's total loss against central
// differences, coordinate by coordinate over the model parameters.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "bnnser/model.hpp"

namespace bnnser {

/// Tiny architecture for end-to-end checks: 4-channel convs, LSTM hidden 8.
inline ModelConfig tiny_model_config(System sys = System::lu, std::uint64_t seed = 1) {
    ModelConfig c;
    c.system = sys;
    c.conv = {{{8, 4, 10}, {6, 4, 8}, {6, 4, 8}}};
    c.lstm_layers = 2;
    c.lstm_hidden = 8;
    c.head_widths = {8, 8};
    c.window_frames = 4;
    c.n_train = 3;
    c.n_infer = 4;
    c.seq_len = 8;
    c.median_window = 3;
    c.mu_init = {-0.5, 0.5};
    c.seed = seed;
    if (sys == System::mu) c.alpha = 0.0;
    return c;
}

/// Random audio in [-0.5, 0.5] and labels with m in [-0.5, 0.5], s in [0.05, 0.4].
inline Batch random_batch(std::size_t frames, std::size_t batch, Rng& rng) {
    Batch b;
    b.frames = frames;
    b.batch = batch;
    b.audio.resize(frames * batch * kFrameSamples);
    for (auto& x : b.audio) x = uniform(rng, -0.5, 0.5);
    for (std::size_t i = 0; i < frames * batch; ++i) {
        b.label_m.push_back(uniform(rng, -0.5, 0.5));
        b.label_s.push_back(uniform(rng, 0.05, 0.4));
    }
    return b;
}

struct ModelGradcheckResult {
    double max_error = 0.0;  // max |analytic - numeric| / max(1, |analytic|)
    std::string worst;       // "tensor[index]" of the maximum
    std::size_t checked = 0;
    std::size_t rechecked = 0;  // coordinates re-checked with a smaller step
};

/// Compares d(total loss)/d(parameter) with central differences. The graph
/// seed fixes dropout masks and weight noise, so the loss is a deterministic
/// function of the parameters. `max_coords` > 0 checks that many random
/// coordinates per tensor (all of them when the tensor is smaller).
///
/// Max-pool and ReLU make the loss piecewise smooth. When the two one-sided
/// differences disagree by 1e-4 or more (a switch, or strong curvature, within
/// the step), the coordinate is re-checked with steps eps/10 and eps/100 until
/// the sides agree; the error reported is the one at the last step tried.
inline ModelGradcheckResult model_gradcheck(Model& model, const Batch& batch, std::uint64_t graph_seed, double eps = 1e-5,
                                            std::size_t max_coords = 0, Rng* coord_rng = nullptr,
                                            std::size_t minibatches = 3) {
    auto params = model.parameters();
    for (auto* p : params) p->zero_grad();
    {
        ad::Graph g(graph_seed);
        auto loss = model.batch_loss(g, batch, true, minibatches);
        g.backward(loss.total);
    }
    auto loss_at = [&]() {
        ad::Graph g(graph_seed, false);
        return model.batch_loss(g, batch, true, minibatches).total.item();
    };

    const double base = loss_at();
    ModelGradcheckResult r;
    for (auto* p : params) {
        std::vector<std::size_t> coords(p->value.size());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (max_coords > 0 && coords.size() > max_coords) {
            if (!coord_rng) throw ValidationError("model_gradcheck: coordinate subsets need an rng");
            for (std::size_t i = 0; i < max_coords; ++i)
                std::swap(coords[i], coords[static_cast<std::size_t>(
                                         uniform_int(*coord_rng, static_cast<int>(i), static_cast<int>(coords.size() - 1)))]);
            coords.resize(max_coords);
        }
        for (auto i : coords) {
            const double orig = p->value[i], analytic = p->grad[i];
            double err = 0.0;
            bool kink = false;
            double h = eps;
            for (int attempt = 0; attempt < 3; ++attempt, h /= 10.0) {
                p->value[i] = orig + h;
                const double up = loss_at();
                p->value[i] = orig - h;
                const double down = loss_at();
                p->value[i] = orig;
                const double numeric = (up - down) / (2.0 * h);
                err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
                const double sides = std::abs((up - base) / h - (base - down) / h) / std::max(1.0, std::abs(numeric));
                if (sides < 1e-4) break;
                kink = true;
            }
            r.rechecked += kink;
            if (r.worst.empty() || err > r.max_error) {
                r.max_error = err;
                r.worst = p->name + "[" + std::to_string(i) + "]";
            }
            ++r.checked;
        }
    }
    return r;
}

}  // namespace bnnser
