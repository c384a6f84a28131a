#pragma once

// Multi-annotator arousal traces and the per-frame Gaussian label N(m_t, s_t),
// with m_t the plain annotator mean and s_t the unbiased annotator spread.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "bnnser/csv.hpp"
#include "bnnser/errors.hpp"

namespace bnnser {

inline constexpr double kFramePeriod = 0.04;
inline constexpr double kMinLabelStd = 1e-3;

/// T frames x a annotators, row-major.
class AnnotationTrace {
public:
    AnnotationTrace() = default;
    AnnotationTrace(std::string recording_id, std::size_t frames, std::size_t annotators, std::vector<double> values,
                    double frame_period = kFramePeriod)
        : id_(std::move(recording_id)), frames_(frames), annotators_(annotators), values_(std::move(values)),
          frame_period_(frame_period) {
        if (frames_ == 0 || annotators_ == 0) throw ValidationError("annotation trace must be non-empty");
        if (values_.size() != frames_ * annotators_)
            throw ValidationError("annotation trace: " + std::to_string(values_.size()) + " values for " +
                                  std::to_string(frames_) + "x" + std::to_string(annotators_));
        for (double v : values_)
            if (!std::isfinite(v) || v < -1.0 || v > 1.0)
                throw ValidationError("annotation values must be finite and within [-1, 1]");
    }

    const std::string& recording_id() const noexcept { return id_; }
    std::size_t frames() const noexcept { return frames_; }
    std::size_t annotators() const noexcept { return annotators_; }
    double frame_period() const noexcept { return frame_period_; }
    const std::vector<double>& values() const noexcept { return values_; }

    std::span<const double> frame(std::size_t t) const { return {values_.data() + t * annotators_, annotators_}; }
    double at(std::size_t t, std::size_t i) const { return values_[t * annotators_ + i]; }

private:
    std::string id_;
    std::size_t frames_ = 0;
    std::size_t annotators_ = 0;
    std::vector<double> values_;
    double frame_period_ = kFramePeriod;
};

/// Per-frame N(m_t, s_t).
struct GaussianLabel {
    std::vector<double> m;
    std::vector<double> s;
    std::size_t size() const noexcept { return m.size(); }
};

inline std::vector<double> mean_annotation(const AnnotationTrace& trace) {
    std::vector<double> m(trace.frames());
    const double inv = 1.0 / static_cast<double>(trace.annotators());
    for (std::size_t t = 0; t < trace.frames(); ++t) {
        double acc = 0.0;
        for (double y : trace.frame(t)) acc += y;
        m[t] = acc * inv;
    }
    return m;
}

inline std::vector<double> perception_uncertainty(const AnnotationTrace& trace) {
    const std::size_t a = trace.annotators();
    if (a < 2) throw ValidationError("perception uncertainty needs at least 2 annotators, got " + std::to_string(a));
    const auto m = mean_annotation(trace);
    std::vector<double> s(trace.frames());
    for (std::size_t t = 0; t < trace.frames(); ++t) {
        double ss = 0.0;
        for (double y : trace.frame(t)) ss += (y - m[t]) * (y - m[t]);
        s[t] = std::sqrt(ss / static_cast<double>(a - 1));
    }
    return s;
}

inline GaussianLabel label_distribution(const AnnotationTrace& trace, double s_min = kMinLabelStd) {
    GaussianLabel label{mean_annotation(trace), perception_uncertainty(trace)};
    for (auto& v : label.s) v = std::max(v, s_min);
    return label;
}

// ---------------------------------------------------------------------------
// CSV: header `time_s,ann_1,...,ann_a`, one row per 40 ms frame.
// ---------------------------------------------------------------------------

inline constexpr double kClampTolerance = 0.05;

inline void write_annotation_csv(const std::filesystem::path& path, const AnnotationTrace& trace) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << "time_s";
    for (std::size_t i = 1; i <= trace.annotators(); ++i) out << ",ann_" << i;
    out << '\n';
    for (std::size_t t = 0; t < trace.frames(); ++t) {
        out << csv::format_fixed(static_cast<double>(t) * trace.frame_period(), 2);
        for (double v : trace.frame(t)) out << ',' << csv::format_double(v);
        out << '\n';
    }
    if (!out) throw Error("failed writing " + path.string());
}

/// Reads an annotation CSV. Values slightly outside [-1, 1] (by at most
/// kClampTolerance) are clamped and reported through `warnings`; anything
/// further out is an error.
inline AnnotationTrace load_annotation_csv(const std::filesystem::path& path,
                                           std::vector<std::string>* warnings = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open annotation file " + path.string());
    auto warn = [&](const std::string& msg) {
        if (warnings)
            warnings->push_back(msg);
        else
            std::cerr << "warning: " << msg << '\n';
    };

    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line)) throw FormatError("empty annotation file", 1);
    const auto header = csv::split(csv::trim(line));
    if (header.size() < 3 || csv::trim(header[0]) != "time_s")
        throw FormatError("header must be time_s,ann_1,...,ann_a with at least two annotators", lineno);
    for (std::size_t i = 1; i < header.size(); ++i)
        if (csv::trim(header[i]) != "ann_" + std::to_string(i))
            throw FormatError("header column " + std::to_string(i + 1) + " must be ann_" + std::to_string(i), lineno);
    const std::size_t a = header.size() - 1;

    std::vector<double> values;
    std::vector<double> times;
    while (std::getline(in, line)) {
        ++lineno;
        const auto trimmed = csv::trim(line);
        if (trimmed.empty()) continue;
        const auto fields = csv::split(trimmed);
        if (fields.size() != a + 1)
            throw FormatError("expected " + std::to_string(a + 1) + " fields, got " + std::to_string(fields.size()),
                              lineno);
        const double time = csv::parse_double(fields[0], lineno);
        if (!times.empty()) {
            const double step = time - times.back();
            if (!(step > 0.0)) throw FormatError("non-monotonic time", lineno);
            if (step > 1.5 * kFramePeriod) throw FormatError("gap in time column", lineno);
            if (std::abs(step - kFramePeriod) > 1e-6) throw FormatError("irregular frame period", lineno);
        }
        times.push_back(time);
        for (std::size_t i = 1; i <= a; ++i) {
            double v = csv::parse_double(fields[i], lineno);
            if (!std::isfinite(v)) throw FormatError("non-finite annotation", lineno);
            if (v < -1.0 || v > 1.0) {
                if (std::abs(v) > 1.0 + kClampTolerance)
                    throw FormatError("annotation " + std::string(csv::trim(fields[i])) + " outside [-1, 1]", lineno);
                warn(path.filename().string() + ":" + std::to_string(lineno) + ": clamped annotation " +
                     std::string(csv::trim(fields[i])));
                v = std::clamp(v, -1.0, 1.0);
            }
            values.push_back(v);
        }
    }
    if (times.empty()) throw FormatError("annotation file has no frames", lineno);
    return AnnotationTrace(path.stem().string(), times.size(), a, std::move(values), kFramePeriod);
}

}  // namespace bnnser
