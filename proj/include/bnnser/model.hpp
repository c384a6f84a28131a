#pragma once

// End-to-end model: raw 40 ms frames -> three conv blocks -> stacked LSTM ->
// a three-layer head. The head is Bayesian (BBB, systems "mu" and "lu") or
// deterministic (baselines "stl" and "mtl_pu").

#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bnnser/autodiff.hpp"
#include "bnnser/dataset.hpp"
#include "bnnser/layers.hpp"
#include "bnnser/losses.hpp"

namespace bnnser {

enum class System { mu, lu, stl, mtl_pu };

inline const char* system_name(System s) {
    switch (s) {
        case System::mu: return "mu";
        case System::lu: return "lu";
        case System::stl: return "stl";
        case System::mtl_pu: return "mtl_pu";
    }
    return "?";
}

inline System parse_system(const std::string& s) {
    if (s == "mu") return System::mu;
    if (s == "lu") return System::lu;
    if (s == "stl") return System::stl;
    if (s == "mtl_pu") return System::mtl_pu;
    throw ValidationError("unknown system '" + s + "' (expected mu, lu, stl or mtl_pu)");
}

inline bool is_bayesian(System s) { return s == System::mu || s == System::lu; }

struct ConvLayerSpec {
    std::size_t kernel = 8;
    std::size_t channels = 64;
    std::size_t pool = 10;
};

struct ModelConfig {
    System system = System::lu;
    // architecture
    std::array<ConvLayerSpec, 3> conv{{{8, 64, 10}, {6, 128, 8}, {6, 128, 8}}};
    std::size_t lstm_layers = 2;
    std::size_t lstm_hidden = 256;
    std::vector<std::size_t> head_widths{64, 64};
    std::size_t window_frames = 50;
    double prior_mean = 0.0;
    double prior_std = 1.0;
    nn::Range mu_init{-0.1, 0.1};
    nn::Range rho_init{-3.0, -2.0};
    // objective and optimisation
    double alpha = 1.0;
    double dropout = 0.5;
    double learning_rate = 1e-4;
    std::size_t batch_size = 5;
    std::size_t seq_len = 300;
    std::size_t epochs = 100;
    std::size_t n_train = 8;
    std::size_t n_infer = 30;
    double sigma_obs = 1.0;
    std::size_t median_window = 50;
    std::uint64_t seed = 1;

    /// Pooling left after the three blocks so that one frame maps to one feature vector.
    std::size_t final_pool() const {
        std::size_t prod = 1;
        for (const auto& c : conv) prod *= c.pool;
        if (prod == 0 || kFrameSamples % prod != 0)
            throw ValidationError("conv pool sizes (product " + std::to_string(prod) + ") must divide the 640-sample frame");
        return kFrameSamples / prod;
    }

    void validate() const {
        for (const auto& c : conv)
            if (c.kernel == 0 || c.channels == 0 || c.pool == 0) throw ValidationError("conv kernel, channels and pool must be >= 1");
        (void)final_pool();
        if (lstm_layers == 0 || lstm_hidden == 0) throw ValidationError("lstm needs at least one layer and hidden >= 1");
        if (head_widths.size() != 2 || head_widths[0] == 0 || head_widths[1] == 0)
            throw ValidationError("head_widths must list two positive hidden widths");
        if (window_frames < 1) throw ValidationError("window_frames must be >= 1");
        if (!(prior_std > 0.0)) throw ValidationError("prior_std must be positive");
        if (mu_init.lo > mu_init.hi || rho_init.lo > rho_init.hi) throw ValidationError("init ranges must have lo <= hi");
        if (!(alpha >= 0.0)) throw ValidationError("alpha must be >= 0");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must be in [0, 1)");
        if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
        if (batch_size == 0 || epochs == 0) throw ValidationError("batch_size and epochs must be >= 1");
        if (seq_len < 2) throw ValidationError("seq_len must be >= 2 frames");
        if (n_train < 2 || n_infer < 2) throw ValidationError("n_train and n_infer must be >= 2");
        if (!(sigma_obs > 0.0)) throw ValidationError("sigma_obs must be positive");
        if (median_window < 1) throw ValidationError("median_window must be >= 1");
    }
};

/// A training/evaluation batch in time-major layout: row t*B + b.
struct Batch {
    std::size_t frames = 0;
    std::size_t batch = 0;
    std::vector<double> audio;    // frames*batch*640
    std::vector<double> label_m;  // frames*batch
    std::vector<double> label_s;
};

struct BatchLoss {
    ad::Var total;
    ad::Var ccc_term;
    ad::Var bbb_term;  // zero for deterministic systems
    ad::Var kl_term;   // s-head CCC term for mtl_pu
};

// RNG stream tags under the model seed.
inline constexpr std::uint64_t kInitStream = 1, kShuffleStream = 2, kBatchStream = 3, kPredictStream = 4;

class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(derive_seed(cfg_.seed, {kInitStream}));
        std::size_t in_ch = 1;
        for (std::size_t i = 0; i < 3; ++i) {
            const auto& c = cfg_.conv[i];
            conv.emplace_back("conv" + std::to_string(i + 1), in_ch, c.channels, c.kernel, c.pool, rng);
            in_ch = c.channels;
        }
        std::size_t in = in_ch;
        for (std::size_t i = 0; i < cfg_.lstm_layers; ++i) {
            lstm.emplace_back("lstm" + std::to_string(i + 1), in, cfg_.lstm_hidden, rng);
            in = cfg_.lstm_hidden;
        }
        const std::array<std::size_t, 4> dims{cfg_.lstm_hidden, cfg_.head_widths[0], cfg_.head_widths[1], 1};
        for (std::size_t l = 0; l < 3; ++l) {
            const auto n = std::to_string(l + 1);
            if (is_bayesian(cfg_.system)) {
                bayes.push_back(nn::make_bayes_params("bbb" + n, dims[l], dims[l + 1], cfg_.mu_init, cfg_.rho_init, rng));
            } else {
                head.emplace_back("head" + n, dims[l], dims[l + 1], rng);
                if (cfg_.system == System::mtl_pu) s_head.emplace_back("shead" + n, dims[l], dims[l + 1], rng);
            }
        }
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    ModelConfig& config() noexcept { return cfg_; }
    System system() const noexcept { return cfg_.system; }
    nn::Prior prior() const { return {cfg_.prior_mean, cfg_.prior_std}; }
    std::size_t feature_dim() const { return cfg_.lstm_hidden; }

    /// Conv + LSTM weights (shared by every system).
    std::vector<ad::Parameter*> extractor_parameters() {
        std::vector<ad::Parameter*> out;
        for (auto& c : conv)
            for (auto* p : c.parameters()) out.push_back(p);
        for (auto& l : lstm)
            for (auto* p : l.parameters()) out.push_back(p);
        return out;
    }

    std::vector<ad::Parameter*> deterministic_parameters() {
        auto out = extractor_parameters();
        for (auto* layers : {&head, &s_head})
            for (auto& d : *layers)
                for (auto* p : d.parameters()) out.push_back(p);
        return out;
    }

    std::vector<ad::Parameter*> bayes_parameters() {
        std::vector<ad::Parameter*> out;
        for (auto& b : bayes)
            for (auto* p : b.parameters()) out.push_back(p);
        return out;
    }

    /// Every trainable tensor in a fixed order (optimizer and checkpoint order).
    std::vector<ad::Parameter*> parameters() {
        auto out = deterministic_parameters();
        for (auto* p : bayes_parameters()) out.push_back(p);
        return out;
    }

    static std::size_t count(const std::vector<ad::Parameter*>& ps) {
        std::size_t n = 0;
        for (auto* p : ps) n += p->value.size();
        return n;
    }

    /// audio: rows*640 raw samples, rows = frames*batch time-major. Returns [rows, H].
    /// `feature_mask` (optional) is the dropout mask applied to the conv features.
    ad::Var features(ad::Graph& g, std::span<const double> audio, std::size_t batch, std::vector<nn::LstmState>& state,
                     const std::vector<double>* feature_mask = nullptr) {
        const std::size_t rows = audio.size() / kFrameSamples;
        if (rows * kFrameSamples != audio.size() || rows == 0) throw ShapeError("audio is not a whole number of frames");
        ad::Var x = g.constant({rows, 1, kFrameSamples}, std::vector<double>(audio.begin(), audio.end()));
        for (auto& c : conv) x = c.forward(g, x);
        const std::size_t fp = cfg_.final_pool();
        if (fp > 1) x = ad::maxpool1d(x, fp);
        x = ad::reshape(x, {rows, cfg_.conv[2].channels});
        if (feature_mask) x = ad::dropout_apply(x, *feature_mask);
        if (state.empty())
            for (auto& l : lstm) state.push_back(l.zero_state(g, batch));
        for (std::size_t i = 0; i < lstm.size(); ++i) x = lstm[i].run(g, x, batch, state[i]);
        return x;
    }

    /// Dropout masks for one batch: conv features and the two hidden head layers.
    struct Masks {
        std::vector<double> features, hidden1, hidden2;
    };

    Masks make_masks(std::size_t rows, Rng& rng) const {
        return {ad::dropout_mask(rows * cfg_.conv[2].channels, cfg_.dropout, rng),
                ad::dropout_mask(rows * cfg_.head_widths[0], cfg_.dropout, rng),
                ad::dropout_mask(rows * cfg_.head_widths[1], cfg_.dropout, rng)};
    }

    /// Deterministic head output [rows,1]: the BBB head at w = mu_w, or the m head of a baseline.
    ad::Var mean_head(ad::Graph& g, ad::Var h, const Masks* masks = nullptr) {
        auto layer = [&](std::size_t l, ad::Var x) {
            return is_bayesian(cfg_.system) ? nn::bayes_linear_mean(g, x, bayes[l]) : head[l].forward(g, x);
        };
        return mlp(h, masks, 0, [&](std::size_t l, ad::Var x, std::size_t, std::size_t) { return layer(l, x); });
    }

    /// mtl_pu only: s head, softplus output [rows,1].
    ad::Var s_head_forward(ad::Graph& g, ad::Var h, const Masks* masks = nullptr) {
        if (cfg_.system != System::mtl_pu) throw Error("s head exists only for mtl_pu");
        return ad::softplus(
            mlp(h, masks, 0, [&](std::size_t l, ad::Var x, std::size_t, std::size_t) { return s_head[l].forward(g, x); }));
    }

    /// One stochastic pass of the BBB head over `frames` x `batch` rows with
    /// windowed weight draws. Schedules (one per layer) are appended to `schedules`.
    ad::Var sample_head(ad::Graph& g, ad::Var h, std::size_t frames, std::size_t batch, Rng& rng, bool densities,
                        std::vector<nn::WeightSchedule>* schedules, const Masks* masks = nullptr,
                        const std::vector<nn::BayesBinding>* bindings = nullptr) {
        if (!is_bayesian(cfg_.system)) throw Error("stochastic passes need a Bayesian head");
        std::vector<nn::BayesBinding> local;
        if (!bindings) {
            for (auto& b : bayes) local.push_back(nn::bind(g, b));
            bindings = &local;
        }
        std::array<nn::WeightSchedule, 3> sched;
        for (std::size_t l = 0; l < 3; ++l)
            sched[l] = nn::sample_schedule(g, (*bindings)[l], prior(), frames, cfg_.window_frames, rng, densities);
        std::vector<ad::Var> outs;
        const std::size_t b = cfg_.window_frames;
        for (std::size_t k = 0; k < sched[0].draws.size(); ++k) {
            const std::size_t r0 = k * b * batch, r1 = std::min(frames, (k + 1) * b) * batch;
            ad::Var x = r0 == 0 && r1 == frames * batch ? h : ad::slice(h, 0, r0, r1);
            outs.push_back(mlp(x, masks, r0, [&](std::size_t l, ad::Var in, std::size_t, std::size_t) {
                return nn::linear(in, sched[l].draws[k].w, sched[l].draws[k].b);
            }));
        }
        if (schedules)
            for (auto& s : sched) schedules->push_back(std::move(s));
        return outs.size() == 1 ? outs[0] : ad::concat(outs, 0);
    }

    /// Forward + objective for one batch. Training mode applies dropout.
    BatchLoss batch_loss(ad::Graph& g, const Batch& bt, bool training, std::size_t minibatches_per_epoch) {
        const std::size_t T = bt.frames, B = bt.batch, rows = T * B;
        if (bt.audio.size() != rows * kFrameSamples || bt.label_m.size() != rows || bt.label_s.size() != rows)
            throw ShapeError("batch buffers do not match frames x batch");
        std::optional<Masks> masks;
        if (training && cfg_.dropout > 0.0) masks = make_masks(rows, g.rng());
        std::vector<nn::LstmState> state;
        ad::Var h = features(g, bt.audio, B, state, masks ? &masks->features : nullptr);
        ad::Var lm = g.constant({T, B}, bt.label_m);
        ad::Var ls = g.constant({T, B}, bt.label_s);
        const Masks* mk = masks ? &*masks : nullptr;

        BatchLoss out;
        ad::Var m_hat = ad::reshape(mean_head(g, h, mk), {T, B});
        out.ccc_term = ccc_training_term(m_hat, lm);
        if (!is_bayesian(cfg_.system)) {
            out.bbb_term = g.scalar(0.0);
            if (cfg_.system == System::mtl_pu) {
                out.kl_term = ccc_training_term(ad::reshape(s_head_forward(g, h, mk), {T, B}), ls);
                out.total = out.ccc_term + out.kl_term;
            } else {
                out.kl_term = g.scalar(0.0);
                out.total = out.ccc_term;
            }
            return out;
        }

        std::vector<nn::BayesBinding> bindings;
        for (auto& b : bayes) bindings.push_back(nn::bind(g, b));
        std::vector<nn::WeightSchedule> schedules;
        std::vector<ad::Var> passes;
        for (std::size_t p = 0; p < cfg_.n_train; ++p)
            passes.push_back(ad::reshape(sample_head(g, h, T, B, g.rng(), true, &schedules, mk, &bindings), {1, T, B}));
        ad::Var samples = ad::concat(passes, 0);
        ad::Var data_fit = gaussian_nll(samples, lm, cfg_.sigma_obs);
        const double complexity_scale = 1.0 / (static_cast<double>(minibatches_per_epoch) * static_cast<double>(rows));
        out.bbb_term = bbb_loss(schedules, cfg_.n_train, data_fit, complexity_scale);
        out.kl_term = kl_label_loss(lm, ls, samples);
        out.total = out.ccc_term + out.bbb_term;
        if (cfg_.alpha > 0.0) out.total = out.total + ad::scale(out.kl_term, cfg_.alpha);
        return out;
    }

    std::vector<nn::ConvBlock> conv;
    std::vector<nn::LstmLayer> lstm;
    std::vector<nn::BayesParams> bayes;
    std::vector<nn::Dense> head;
    std::vector<nn::Dense> s_head;
    double tuning_beta = 0.0;  // mtl_pu dynamic tuning scalar

private:
    // tanh hidden layers, linear output; dropout after each hidden layer.
    template <class Layer>
    ad::Var mlp(ad::Var x, const Masks* masks, std::size_t row0, Layer&& layer) {
        const std::size_t rows = x.shape()[0];
        auto drop = [&](ad::Var v, const std::vector<double>& mask, std::size_t width) {
            if (!masks) return v;
            return ad::dropout_apply(v, std::vector<double>(mask.begin() + static_cast<std::ptrdiff_t>(row0 * width),
                                                            mask.begin() + static_cast<std::ptrdiff_t>((row0 + rows) * width)));
        };
        ad::Var h1 = drop(ad::tanh(layer(0, x, row0, rows)), masks ? masks->hidden1 : empty_, cfg_.head_widths[0]);
        ad::Var h2 = drop(ad::tanh(layer(1, h1, row0, rows)), masks ? masks->hidden2 : empty_, cfg_.head_widths[1]);
        return layer(2, h2, row0, rows);
    }

    ModelConfig cfg_;
    std::vector<double> empty_;
};

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// LSTM features [T, H] for a whole recording, computed in chunks of seq_len
/// frames with the recurrent state carried across chunk boundaries.
inline std::vector<double> extract_features(Model& model, std::span<const float> waveform) {
    std::size_t T = 0;
    const auto frames = frame_waveform(waveform, &T);
    const std::size_t H = model.feature_dim(), chunk = model.config().seq_len;
    std::vector<double> out;
    out.reserve(T * H);
    std::vector<std::vector<double>> h_state, c_state;
    for (std::size_t t0 = 0; t0 < T; t0 += chunk) {
        const std::size_t t1 = std::min(T, t0 + chunk);
        ad::Graph g(0, false);
        std::vector<nn::LstmState> state;
        for (std::size_t i = 0; i < h_state.size(); ++i)
            state.push_back({g.constant({1, H}, h_state[i]), g.constant({1, H}, c_state[i])});
        auto h = model.features(
            g, std::span<const double>(frames.data() + t0 * kFrameSamples, (t1 - t0) * kFrameSamples), 1, state);
        out.insert(out.end(), h.value().begin(), h.value().end());
        h_state.clear();
        c_state.clear();
        for (auto& s : state) {
            h_state.emplace_back(s.h.value().begin(), s.h.value().end());
            c_state.emplace_back(s.c.value().begin(), s.c.value().end());
        }
    }
    return out;
}

/// n stochastic outputs (n x T), the mean-weight output, and the per-frame unbiased sample std.
struct PredictionDistribution {
    std::size_t n = 0;
    std::size_t frames = 0;
    std::vector<double> samples;
    std::vector<double> m_hat;
    std::vector<double> s_hat;
};

/// Head-only half of predict_distribution, on precomputed features [T,H].
/// Pass i draws from its own stream derive_seed(seed, {i}), so the result
/// does not depend on the order passes are evaluated in.
inline PredictionDistribution predict_from_features(Model& model, std::span<const double> feats, std::size_t n,
                                                    std::uint64_t seed, bool median_filtered = true) {
    if (n < 2) throw ValidationError("predict_distribution needs n >= 2");
    if (!is_bayesian(model.system())) throw ValidationError("predict_distribution needs a Bayesian (mu/lu) model");
    const std::size_t H = model.feature_dim(), T = feats.size() / H;
    PredictionDistribution d;
    d.n = n;
    d.frames = T;
    d.samples.resize(n * T);
    {
        ad::Graph g(0, false);
        auto h = g.constant({T, H}, std::vector<double>(feats.begin(), feats.end()));
        auto m = model.mean_head(g, h);
        d.m_hat.assign(m.value().begin(), m.value().end());
    }
    for (std::size_t i = 0; i < n; ++i) {
        ad::Graph g(0, false);
        Rng rng(derive_seed(seed, {i}));
        auto h = g.constant({T, H}, std::vector<double>(feats.begin(), feats.end()));
        auto y = model.sample_head(g, h, T, 1, rng, false, nullptr);
        std::copy(y.value().begin(), y.value().end(), d.samples.begin() + static_cast<std::ptrdiff_t>(i * T));
    }
    d.s_hat = sample_moments(d.samples, n, T).std;
    if (median_filtered) {
        const std::size_t w = model.config().median_window;
        for (std::size_t i = 0; i < n; ++i) {
            auto row = median_filter(std::span<const double>(d.samples.data() + i * T, T), w);
            std::copy(row.begin(), row.end(), d.samples.begin() + static_cast<std::ptrdiff_t>(i * T));
        }
        d.m_hat = median_filter(d.m_hat, w);
        d.s_hat = median_filter(d.s_hat, w);
    }
    return d;
}

inline PredictionDistribution predict_distribution(Model& model, std::span<const float> waveform, std::size_t n,
                                                   std::uint64_t seed, bool median_filtered = true) {
    if (n < 2) throw ValidationError("predict_distribution needs n >= 2");
    const auto feats = extract_features(model, waveform);
    return predict_from_features(model, feats, n, seed, median_filtered);
}

/// Unified per-recording prediction for every system; s_hat is empty for stl.
struct Prediction {
    std::vector<double> m_hat;
    std::vector<double> s_hat;
    std::vector<double> samples;  // n x T, Bayesian systems only
    std::size_t n = 0;
};

/// Raw (unfiltered, untuned) baseline head outputs on features [T,H].
inline std::pair<std::vector<double>, std::vector<double>> baseline_heads(Model& model, std::span<const double> feats) {
    const std::size_t H = model.feature_dim(), T = feats.size() / H;
    ad::Graph g(0, false);
    auto h = g.constant({T, H}, std::vector<double>(feats.begin(), feats.end()));
    auto m = model.mean_head(g, h);
    std::vector<double> mv(m.value().begin(), m.value().end()), sv;
    if (model.system() == System::mtl_pu) {
        auto s = model.s_head_forward(g, h);
        sv.assign(s.value().begin(), s.value().end());
    }
    return {mv, sv};
}

inline Prediction predict(Model& model, std::span<const float> waveform, std::uint64_t seed) {
    const auto feats = extract_features(model, waveform);
    Prediction p;
    if (is_bayesian(model.system())) {
        auto d = predict_from_features(model, feats, model.config().n_infer, seed);
        p.m_hat = std::move(d.m_hat);
        p.s_hat = std::move(d.s_hat);
        p.samples = std::move(d.samples);
        p.n = d.n;
        return p;
    }
    auto [m, s] = baseline_heads(model, feats);
    const std::size_t w = model.config().median_window;
    if (model.system() == System::mtl_pu) {
        // dynamic tuning: shift m by beta times the centred s estimate
        const double s_mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
        for (std::size_t t = 0; t < m.size(); ++t) m[t] += model.tuning_beta * (s[t] - s_mean);
        p.s_hat = median_filter(s, w);
    }
    p.m_hat = median_filter(m, w);
    return p;
}

}  // namespace bnnser
