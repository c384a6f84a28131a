#pragma once

// Synthetic stand-in for a continuous-arousal corpus: raw 16 kHz audio plus
// multi-annotator traces at 40 ms, with the same shape statistics as the
// real data (mean label near 0.01, mean annotator spread near 0.23).
//
// Each recording has two slow hidden processes: arousal x(t) and an
// ambiguity envelope u(t) in (0,1). Annotators follow x with a lag and a
// bias, plus private noise whose amplitude is proportional to u(t), so the
// annotator spread s_t tracks u(t). The audio is a harmonic-plus-noise
// signal: arousal sets loudness, pitch and syllable-rate modulation depth,
// ambiguity sets the noise fraction. Both targets are therefore audible.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "bnnser/errors.hpp"
#include "bnnser/labels.hpp"
#include "bnnser/rng.hpp"
#include "bnnser/wav.hpp"

namespace bnnser {

inline constexpr std::size_t kFrameSamples = 640;  // 40 ms at 16 kHz

enum class Split { train, dev };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "dev"; }

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "dev") return Split::dev;
    throw ValidationError("unknown split '" + s + "' (expected train or dev)");
}

struct CorpusSpec {
    std::size_t n_train = 9;
    std::size_t n_dev = 9;
    double duration_s = 300.0;
    std::size_t annotators = 6;
    std::uint64_t seed = 7;
    double target_mean_of_m = 0.01;
    double target_mean_of_s = 0.23;

    std::size_t frames() const { return static_cast<std::size_t>(std::llround(duration_s / kFramePeriod)); }

    void validate() const {
        if (n_train == 0 || n_dev == 0) throw ValidationError("corpus needs at least one train and one dev recording");
        if (annotators < 2) throw ValidationError("corpus needs at least 2 annotators");
        if (!(duration_s > 0.0)) throw ValidationError("duration_s must be positive");
        if (std::abs(static_cast<double>(frames()) * kFramePeriod - duration_s) > 1e-9)
            throw ValidationError("duration_s must be a multiple of 0.04 s");
        if (!(target_mean_of_s > 0.0) || std::abs(target_mean_of_m) >= 0.5)
            throw ValidationError("target statistics out of range");
    }
};

struct Recording {
    std::string id;
    Split split = Split::train;
    std::vector<float> waveform;  // frames * 640 samples
    AnnotationTrace trace;
    std::uint64_t seed = 0;

    std::size_t frames() const { return trace.frames(); }
};

/// Hidden processes kept for diagnostics and tests.
struct LatentProcesses {
    std::vector<double> arousal;
    std::vector<double> ambiguity;
};

namespace gen {

inline void standardize(std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    const double sd = std::sqrt(ss / n);
    for (auto& x : v) x = sd > 0.0 ? (x - m) / sd : 0.0;
}

/// Centered moving average, truncated at the edges.
inline std::vector<double> box_smooth(const std::vector<double>& v, std::size_t width) {
    std::vector<double> prefix(v.size() + 1, 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) prefix[i + 1] = prefix[i] + v[i];
    std::vector<double> out(v.size());
    const std::size_t half = width / 2;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const std::size_t lo = i >= half ? i - half : 0, hi = std::min(v.size(), i + half + 1);
        out[i] = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
    }
    return out;
}

/// Standardized sum of `k` random sinusoids (periods in frames) plus smoothed noise.
inline std::vector<double> slow_process(std::size_t T, int k_lo, int k_hi, double period_lo, double period_hi,
                                        double noise_weight, std::size_t noise_width, Rng& rng) {
    std::vector<double> v(T, 0.0);
    const int k = uniform_int(rng, k_lo, k_hi);
    for (int i = 0; i < k; ++i) {
        const double period = std::exp(uniform(rng, std::log(period_lo), std::log(period_hi)));
        const double amp = uniform(rng, 0.5, 1.0), phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        for (std::size_t t = 0; t < T; ++t)
            v[t] += amp * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / period + phase);
    }
    std::vector<double> noise(T);
    for (auto& x : noise) x = standard_normal(rng);
    noise = box_smooth(box_smooth(noise, noise_width), noise_width);
    standardize(noise);
    standardize(v);
    for (std::size_t t = 0; t < T; ++t) v[t] += noise_weight * noise[t];
    standardize(v);
    return v;
}

inline std::vector<double> annotate(const std::vector<double>& x, const std::vector<double>& u,
                                    const std::vector<std::size_t>& lags, const std::vector<double>& biases,
                                    const std::vector<std::vector<double>>& noise, double kappa) {
    const std::size_t T = x.size(), a = lags.size();
    std::vector<double> y(T * a);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < a; ++i) {
            const double lagged = x[t >= lags[i] ? t - lags[i] : 0];
            y[t * a + i] = std::clamp(lagged + biases[i] + kappa * u[t] * noise[i][t], -1.0, 1.0);
        }
    return y;
}

inline double mean_spread(const std::vector<double>& y, std::size_t T, std::size_t a) {
    AnnotationTrace tr("calib", T, a, y);
    const auto s = perception_uncertainty(tr);
    return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(T);
}

}  // namespace gen

/// One recording; `index` counts train recordings first, then dev.
inline Recording generate_recording(const CorpusSpec& spec, std::size_t index, LatentProcesses* latent = nullptr) {
    spec.validate();
    const std::size_t T = spec.frames(), a = spec.annotators;
    const bool is_train = index < spec.n_train;
    Recording rec;
    rec.split = is_train ? Split::train : Split::dev;
    const std::size_t local = is_train ? index : index - spec.n_train;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "%s_%02zu", split_name(rec.split), local + 1);
    rec.id = idbuf;
    rec.seed = derive_seed(spec.seed, {index});
    Rng rng(rec.seed);

    // arousal: 3-6 sinusoids with 10-60 s periods plus slow noise
    auto z = gen::slow_process(T, 3, 6, 250.0, 1500.0, 0.35, 25, rng);
    std::vector<double> x(T);
    for (std::size_t t = 0; t < T; ++t) x[t] = 0.45 * std::tanh(0.8 * z[t]);
    const double x_mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(T);
    const double m_target = spec.target_mean_of_m + 0.03 * standard_normal(rng);
    for (auto& v : x) v += m_target - x_mean;

    // ambiguity: partly shared with arousal, partly its own slow process
    auto w = gen::slow_process(T, 2, 4, 150.0, 1000.0, 0.35, 15, rng);
    std::vector<double> u(T);
    for (std::size_t t = 0; t < T; ++t) u[t] = 1.0 / (1.0 + std::exp(-1.6 * (0.45 * z[t] + 0.9 * w[t])));

    // annotators
    std::vector<std::size_t> lags(a);
    std::vector<double> biases(a);
    std::vector<std::vector<double>> noise(a);
    for (std::size_t i = 0; i < a; ++i) {
        lags[i] = static_cast<std::size_t>(uniform_int(rng, 0, 25));
        biases[i] = 0.04 * standard_normal(rng);
        std::vector<double> n(T);
        for (auto& v : n) v = standard_normal(rng);
        noise[i] = gen::box_smooth(n, 9);
        gen::standardize(noise[i]);
    }
    const double b_mean = std::accumulate(biases.begin(), biases.end(), 0.0) / static_cast<double>(a);
    for (auto& b : biases) b -= b_mean;

    // noise amplitude calibrated by bisection so this recording's mean spread hits its target
    const double s_target = std::max(0.05, spec.target_mean_of_s + 0.02 * standard_normal(rng));
    double lo = 0.0, hi = 4.0;
    for (int it = 0; it < 50; ++it) {
        const double mid = 0.5 * (lo + hi);
        (gen::mean_spread(gen::annotate(x, u, lags, biases, noise, mid), T, a) < s_target ? lo : hi) = mid;
    }
    rec.trace = AnnotationTrace(rec.id, T, a, gen::annotate(x, u, lags, biases, noise, 0.5 * (lo + hi)));

    // audio
    rec.waveform.resize(T * kFrameSamples);
    const double dt = 1.0 / static_cast<double>(kSampleRate);
    double phase = 0.0, syllable = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double syllable_hz = uniform(rng, 3.5, 5.0);
    for (std::size_t t = 0; t < T; ++t) {
        const double ar = std::clamp(0.5 * (x[t] + 1.0), 0.0, 1.0);
        const double f0 = 100.0 + 200.0 * ar;
        const double amp = 0.08 + 0.5 * ar;
        const double depth = 0.2 + 0.6 * ar;
        const double noise_frac = 0.05 + 0.9 * u[t];
        for (std::size_t k = 0; k < kFrameSamples; ++k) {
            phase += 2.0 * std::numbers::pi * f0 * dt;
            syllable += 2.0 * std::numbers::pi * syllable_hz * dt;
            double harmonic = 0.0;
            for (int h = 1; h <= 5; ++h) harmonic += std::sin(h * phase) / h;
            harmonic /= 1.5;
            const double env = 1.0 - depth * (0.5 + 0.5 * std::cos(syllable));
            const double s = amp * env * ((1.0 - noise_frac) * harmonic + noise_frac * 0.6 * standard_normal(rng)) +
                             0.005 * standard_normal(rng);
            rec.waveform[t * kFrameSamples + k] = static_cast<float>(std::clamp(s, -1.0, 1.0));
        }
        if (phase > 1e6) phase = std::fmod(phase, 2.0 * std::numbers::pi);
    }
    if (latent) *latent = {std::move(x), std::move(u)};
    return rec;
}

inline std::vector<Recording> generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    std::vector<Recording> out;
    out.reserve(spec.n_train + spec.n_dev);
    for (std::size_t i = 0; i < spec.n_train + spec.n_dev; ++i) out.push_back(generate_recording(spec, i));
    return out;
}

/// Splits into non-overlapping 640-sample frames, rows of one flat buffer.
/// A ragged tail is zero-padded with a warning.
inline std::vector<double> frame_waveform(std::span<const float> waveform, std::size_t* frames_out = nullptr,
                                          std::vector<std::string>* warnings = nullptr) {
    if (waveform.empty()) throw ValidationError("cannot frame an empty waveform");
    const std::size_t frames = (waveform.size() + kFrameSamples - 1) / kFrameSamples;
    if (waveform.size() % kFrameSamples != 0) {
        const std::string msg = "waveform length " + std::to_string(waveform.size()) +
                                " is not a multiple of 640; zero-padding the last frame";
        if (warnings)
            warnings->push_back(msg);
        else
            std::cerr << "warning: " << msg << '\n';
    }
    std::vector<double> out(frames * kFrameSamples, 0.0);
    std::copy(waveform.begin(), waveform.end(), out.begin());
    if (frames_out) *frames_out = frames;
    return out;
}

/// Mean over all frames of all recordings of m_t and s_t.
struct CorpusStats {
    double mean_of_m = 0.0;
    double mean_of_s = 0.0;
};

inline CorpusStats corpus_stats(const std::vector<Recording>& recs) {
    double sm = 0.0, ss = 0.0;
    std::size_t n = 0;
    for (const auto& r : recs) {
        const auto m = mean_annotation(r.trace);
        const auto s = perception_uncertainty(r.trace);
        sm += std::accumulate(m.begin(), m.end(), 0.0);
        ss += std::accumulate(s.begin(), s.end(), 0.0);
        n += m.size();
    }
    return {sm / static_cast<double>(n), ss / static_cast<double>(n)};
}

// ---------------------------------------------------------------------------
// On-disk corpus: <dir>/manifest.jsonl plus one .wav and one .csv per recording.
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string id;
    Split split = Split::train;
    std::string wav;  // relative to the corpus directory
    std::string csv;
    std::uint64_t seed = 0;
};

inline constexpr const char* kManifestName = "manifest.jsonl";

inline void write_recording(const std::filesystem::path& dir, const Recording& rec, std::ofstream& manifest) {
    const std::string wav = rec.id + ".wav", csv = rec.id + ".csv";
    write_wav(dir / wav, rec.waveform, WavFormat::float32);
    write_annotation_csv(dir / csv, rec.trace);
    nlohmann::ordered_json j{{"id", rec.id}, {"split", split_name(rec.split)}, {"wav", wav}, {"csv", csv}, {"seed", rec.seed}};
    manifest << j.dump() << '\n';
}

inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& dir) {
    const auto path = dir / kManifestName;
    std::ifstream in(path);
    if (!in) throw ValidationError("no corpus manifest at " + path.string());
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (csv::trim(line).empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ManifestEntry e;
            e.id = j.at("id").get<std::string>();
            e.split = parse_split(j.at("split").get<std::string>());
            e.wav = j.at("wav").get<std::string>();
            e.csv = j.at("csv").get<std::string>();
            e.seed = j.value("seed", std::uint64_t{0});
            out.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError(path.filename().string() + ": " + ex.what(), lineno);
        } catch (const ValidationError& ex) {
            throw FormatError(path.filename().string() + ": " + ex.what(), lineno);
        }
    }
    return out;
}

/// Loads audio and labels. Audio is padded to whole frames; a difference of
/// one frame against the label count is trimmed, anything larger is an error.
inline Recording load_recording(const std::filesystem::path& dir, const ManifestEntry& e,
                                std::vector<std::string>* warnings = nullptr) {
    Recording rec;
    rec.id = e.id;
    rec.split = e.split;
    rec.seed = e.seed;
    auto trace = load_annotation_csv(dir / e.csv, warnings);
    auto wav = load_wav(dir / e.wav);
    std::size_t frames = 0;
    auto framed = frame_waveform(wav, &frames, warnings);
    std::size_t T = trace.frames();
    if (frames > T + 1 || T > frames + 1)
        throw ValidationError(e.id + ": audio has " + std::to_string(frames) + " frames but labels have " +
                              std::to_string(T));
    T = std::min(T, frames);
    rec.waveform.assign(framed.begin(), framed.begin() + static_cast<std::ptrdiff_t>(T * kFrameSamples));
    if (T != trace.frames()) {
        std::vector<double> v(trace.values().begin(),
                              trace.values().begin() + static_cast<std::ptrdiff_t>(T * trace.annotators()));
        trace = AnnotationTrace(e.id, T, trace.annotators(), std::move(v));
    }
    rec.trace = AnnotationTrace(e.id, trace.frames(), trace.annotators(), trace.values());
    return rec;
}

inline std::vector<Recording> load_corpus(const std::filesystem::path& dir, std::optional<Split> only = std::nullopt,
                                          std::vector<std::string>* warnings = nullptr) {
    std::vector<Recording> out;
    for (const auto& e : load_manifest(dir))
        if (!only || e.split == *only) out.push_back(load_recording(dir, e, warnings));
    return out;
}

}  // namespace bnnser
