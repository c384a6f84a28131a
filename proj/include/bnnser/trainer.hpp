#pragma once

// Training loop: Adam over minibatches of fixed-length segments, best/last
// checkpoints, per-epoch loss curve, bit-exact resume.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "bnnser/checkpoint.hpp"
#include "bnnser/csv.hpp"
#include "bnnser/dataset.hpp"
#include "bnnser/model.hpp"

namespace bnnser {

struct Segment {
    std::size_t recording = 0;
    std::size_t start = 0;  // first frame
};

/// Non-overlapping seq_len-frame segments; a shorter tail is dropped.
inline std::vector<Segment> make_segments(const std::vector<Recording>& recs, std::size_t seq_len) {
    std::vector<Segment> out;
    for (std::size_t r = 0; r < recs.size(); ++r) {
        if (recs[r].frames() < seq_len)
            throw ValidationError(recs[r].id + " has " + std::to_string(recs[r].frames()) +
                                  " frames, fewer than seq_len " + std::to_string(seq_len));
        for (std::size_t s = 0; s + seq_len <= recs[r].frames(); s += seq_len) out.push_back({r, s});
    }
    return out;
}

inline Batch make_batch(const std::vector<Recording>& recs, const std::vector<GaussianLabel>& labels,
                        std::span<const Segment> segs, std::size_t seq_len) {
    Batch b;
    b.frames = seq_len;
    b.batch = segs.size();
    const std::size_t B = segs.size();
    b.audio.resize(seq_len * B * kFrameSamples);
    b.label_m.resize(seq_len * B);
    b.label_s.resize(seq_len * B);
    for (std::size_t t = 0; t < seq_len; ++t)
        for (std::size_t j = 0; j < B; ++j) {
            const auto& seg = segs[j];
            const auto& rec = recs[seg.recording];
            const std::size_t f = seg.start + t, row = t * B + j;
            std::copy_n(rec.waveform.begin() + static_cast<std::ptrdiff_t>(f * kFrameSamples), kFrameSamples,
                        b.audio.begin() + static_cast<std::ptrdiff_t>(row * kFrameSamples));
            b.label_m[row] = labels[seg.recording].m[f];
            b.label_s[row] = labels[seg.recording].s[f];
        }
    return b;
}

inline void adam_step(const std::vector<ad::Parameter*>& ps, AdamState& st, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
    if (st.m.size() != ps.size()) st.init(ps);
    ++st.step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& p = *ps[i];
        if (!p.trainable) continue;
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (std::size_t k = 0; k < p.value.size(); ++k) {
            const double g = p.grad[k];
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            p.value[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
        }
    }
}

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double total = 0.0;
    double ccc_term = 0.0;
    double bbb_term = 0.0;
    double kl_term = 0.0;
    double seconds = 0.0;
};

struct TrainOptions {
    std::filesystem::path out_dir;  // empty: no files written
    bool resume = false;            // continue from out_dir/last.ckpt
    std::size_t stop_after = 0;     // stop after this many epochs in total (0: config.epochs)
    std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
    std::vector<EpochLog> curve;
    double best_loss = 0.0;
    std::size_t epochs_done = 0;
};

inline constexpr const char* kBestCheckpoint = "best.ckpt";
inline constexpr const char* kLastCheckpoint = "last.ckpt";
inline constexpr const char* kLossCurve = "loss_curve.csv";

namespace train_detail {

inline void write_curve(const std::filesystem::path& path, const std::vector<EpochLog>& curve) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "epoch,total,ccc_term,bbb_term,kl_term\n";
    for (const auto& e : curve)
        out << e.epoch << ',' << csv::format_double(e.total) << ',' << csv::format_double(e.ccc_term) << ','
            << csv::format_double(e.bbb_term) << ',' << csv::format_double(e.kl_term) << '\n';
}

inline std::vector<EpochLog> read_curve(const std::filesystem::path& path, std::size_t up_to) {
    std::vector<EpochLog> out;
    std::ifstream in(path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        if (++lineno == 1 || csv::trim(line).empty()) continue;
        const auto f = csv::split(csv::trim(line));
        if (f.size() != 5) throw FormatError("loss curve: expected 5 fields", lineno);
        EpochLog e;
        e.epoch = static_cast<std::size_t>(csv::parse_double(f[0], lineno));
        e.total = csv::parse_double(f[1], lineno);
        e.ccc_term = csv::parse_double(f[2], lineno);
        e.bbb_term = csv::parse_double(f[3], lineno);
        e.kl_term = csv::parse_double(f[4], lineno);
        if (e.epoch <= up_to) out.push_back(e);
    }
    return out;
}

inline std::vector<GaussianLabel> labels_of(const std::vector<Recording>& recs) {
    std::vector<GaussianLabel> out;
    for (const auto& r : recs) out.push_back(label_distribution(r.trace));
    return out;
}

}  // namespace train_detail

/// One epoch's forward/backward/update sweep. Randomness comes only from
/// derive_seed(seed, {shuffle, epoch}) and derive_seed(seed, {batch, epoch, k}).
inline EpochLog train_epoch(Model& model, const std::vector<Recording>& recs, const std::vector<GaussianLabel>& labels,
                            std::size_t epoch, AdamState& adam) {
    const auto& cfg = model.config();
    auto segs = make_segments(recs, cfg.seq_len);
    Rng shuffle(derive_seed(cfg.seed, {kShuffleStream, epoch}));
    for (std::size_t i = segs.size(); i > 1; --i)
        std::swap(segs[i - 1], segs[static_cast<std::size_t>(uniform_int(shuffle, 0, static_cast<int>(i - 1)))]);
    const std::size_t nb = (segs.size() + cfg.batch_size - 1) / cfg.batch_size;
    auto params = model.parameters();
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = epoch;
    for (std::size_t k = 0; k < nb; ++k) {
        const std::size_t lo = k * cfg.batch_size, hi = std::min(segs.size(), lo + cfg.batch_size);
        const auto batch = make_batch(recs, labels, std::span<const Segment>(segs.data() + lo, hi - lo), cfg.seq_len);
        for (auto* p : params) p->zero_grad();
        ad::Graph g(derive_seed(cfg.seed, {kBatchStream, epoch, k}));
        auto loss = model.batch_loss(g, batch, true, nb);
        const std::pair<const char*, double> terms[] = {{"total", loss.total.item()},
                                                        {"ccc", loss.ccc_term.item()},
                                                        {"bbb", loss.bbb_term.item()},
                                                        {"kl", loss.kl_term.item()}};
        for (const auto& [name, v] : terms)
            if (!std::isfinite(v))
                throw NumericError(std::string("non-finite ") + name + " term at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(k));
        log.total += terms[0].second;
        log.ccc_term += terms[1].second;
        log.bbb_term += terms[2].second;
        log.kl_term += terms[3].second;
        g.backward(loss.total);
        adam_step(params, adam, cfg.learning_rate);
    }
    const double inv = 1.0 / static_cast<double>(nb);
    log.total *= inv;
    log.ccc_term *= inv;
    log.bbb_term *= inv;
    log.kl_term *= inv;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return log;
}

/// Least-squares beta for m_adj = m_hat + beta (s_hat - mean s_hat), pooled over recordings.
inline double fit_tuning_beta(Model& model, const std::vector<Recording>& recs) {
    double num = 0.0, den = 0.0;
    for (const auto& r : recs) {
        const auto feats = extract_features(model, r.waveform);
        auto [m, s] = baseline_heads(model, feats);
        const auto target = mean_annotation(r.trace);
        const double s_mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
        for (std::size_t t = 0; t < m.size(); ++t) {
            num += (target[t] - m[t]) * (s[t] - s_mean);
            den += (s[t] - s_mean) * (s[t] - s_mean);
        }
    }
    return den > 0.0 ? num / den : 0.0;
}

/// Trains `model` on `recs` (train split). On return the model holds the
/// best-training-loss parameters.
inline TrainResult train(Model& model, const std::vector<Recording>& recs, const TrainOptions& opt = {}) {
    if (recs.empty()) throw ValidationError("training split is empty");
    const auto& cfg = model.config();
    const bool files = !opt.out_dir.empty();
    if (files) std::filesystem::create_directories(opt.out_dir);
    const auto labels = train_detail::labels_of(recs);

    TrainState state;
    state.adam.init(model.parameters());
    TrainResult result;
    if (opt.resume) {
        if (!files) throw ValidationError("resume needs an output directory");
        const auto ck = load_checkpoint(opt.out_dir / kLastCheckpoint);
        restore_into(model, ck);
        state = ck.state;
        result.curve = train_detail::read_curve(opt.out_dir / kLossCurve, state.epochs_done);
    }
    const std::size_t last_epoch = opt.stop_after ? std::min(opt.stop_after, cfg.epochs) : cfg.epochs;
    auto params = model.parameters();
    std::vector<std::vector<double>> best_values;
    TrainState best_state;
    for (std::size_t epoch = state.epochs_done + 1; epoch <= last_epoch; ++epoch) {
        auto log = train_epoch(model, recs, labels, epoch, state.adam);
        state.epochs_done = epoch;
        result.curve.push_back(log);
        const bool improved = log.total < state.best_loss;
        if (improved) {
            state.best_loss = log.total;
            best_values.clear();
            for (auto* p : params) best_values.push_back(p->value);
            best_state = state;
        }
        if (files) {
            if (improved) save_checkpoint(opt.out_dir / kBestCheckpoint, model, state);
            save_checkpoint(opt.out_dir / kLastCheckpoint, model, state);
            train_detail::write_curve(opt.out_dir / kLossCurve, result.curve);
        }
        if (opt.on_epoch) opt.on_epoch(log);
    }
    result.best_loss = state.best_loss;
    result.epochs_done = state.epochs_done;

    // leave the best parameters in the model
    if (!best_values.empty()) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
    } else if (files && std::filesystem::exists(opt.out_dir / kBestCheckpoint)) {
        const auto ck = load_checkpoint(opt.out_dir / kBestCheckpoint);
        restore_into(model, ck);
        best_state = ck.state;
    }
    if (model.system() == System::mtl_pu) {
        model.tuning_beta = fit_tuning_beta(model, recs);
        if (files) save_checkpoint(opt.out_dir / kBestCheckpoint, model, best_state);
    }
    return result;
}

}  // namespace bnnser
