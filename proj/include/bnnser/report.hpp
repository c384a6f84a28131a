#pragma once

// Evaluation reports and the paired significance comparison between two of them.
//
//   <dir>/metrics.csv          system,recording_id,ccc_m,ccc_s,kl
//   <dir>/summary.json         macro averages (null where a system has no s estimate)
//   <dir>/predictions/<id>.csv time_s,m_hat,s_hat  (median-filtered)
//   <dir>/predictions/<id>.samples.csv  optional wide export of the n stochastic outputs

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bnnser/config.hpp"
#include "bnnser/csv.hpp"
#include "bnnser/dataset.hpp"
#include "bnnser/losses.hpp"
#include "bnnser/model.hpp"
#include "bnnser/stats.hpp"

namespace bnnser {

inline constexpr const char* kMetricsName = "metrics.csv";
inline constexpr const char* kSummaryName = "summary.json";
inline constexpr const char* kPredictionsDir = "predictions";
inline constexpr double kSignificance = 0.05;

struct RecordingMetrics {
    std::string recording_id;
    double ccc_m = 0.0;
    std::optional<double> ccc_s;  // absent for stl
    std::optional<double> kl;
};

struct RecordingResult {
    RecordingMetrics metrics;
    Prediction prediction;
};

struct EvaluationReport {
    std::string system;
    std::string split;
    std::uint64_t config_hash = 0;
    std::vector<RecordingResult> recordings;
};

/// Per-recording prediction stream, independent of evaluation order.
inline std::uint64_t prediction_seed(const Model& model, const std::string& recording_id) {
    return derive_seed(model.config().seed, {kPredictStream, fnv1a(recording_id)});
}

/// Metrics of one prediction against a recording's annotations.
/// KL is the frame mean of KL(label || prediction) with both stds floored at s_min.
inline RecordingMetrics score(const std::string& id, const AnnotationTrace& trace, const std::vector<double>& m_hat,
                              const std::vector<double>& s_hat, double s_min = kMinLabelStd) {
    const auto m = mean_annotation(trace);
    if (m_hat.size() != m.size())
        throw ShapeError(id + ": " + std::to_string(m_hat.size()) + " predictions for " + std::to_string(m.size()) +
                         " label frames");
    RecordingMetrics r;
    r.recording_id = id;
    r.ccc_m = ccc(m_hat, m);
    if (!s_hat.empty()) {
        const auto s = perception_uncertainty(trace);
        r.ccc_s = ccc(s_hat, s);
        double kl = 0.0;
        for (std::size_t t = 0; t < m.size(); ++t)
            kl += gaussian_kl(m[t], std::max(s[t], s_min), m_hat[t], std::max(s_hat[t], s_min));
        r.kl = kl / static_cast<double>(m.size());
    }
    return r;
}

inline EvaluationReport evaluate(Model& model, const std::vector<Recording>& recs, const std::string& split) {
    if (recs.empty()) throw ValidationError("split '" + split + "' is empty");
    EvaluationReport rep;
    rep.system = system_name(model.system());
    rep.split = split;
    rep.config_hash = config_hash(model.config());
    for (const auto& r : recs) {
        RecordingResult rr;
        rr.prediction = predict(model, r.waveform, prediction_seed(model, r.id));
        rr.metrics = score(r.id, r.trace, rr.prediction.m_hat, rr.prediction.s_hat);
        rep.recordings.push_back(std::move(rr));
    }
    return rep;
}

struct MacroMetrics {
    double ccc_m = 0.0;
    std::optional<double> ccc_s, kl;
};

inline MacroMetrics macro_average(const std::vector<RecordingMetrics>& rows) {
    MacroMetrics out;
    if (rows.empty()) return out;
    const double k = static_cast<double>(rows.size());
    double cs = 0.0, kl = 0.0;
    bool have_s = true;
    for (const auto& r : rows) {
        out.ccc_m += r.ccc_m / k;
        if (!r.ccc_s || !r.kl) {
            have_s = false;
            continue;
        }
        cs += *r.ccc_s / k;
        kl += *r.kl / k;
    }
    if (have_s) out.ccc_s = cs, out.kl = kl;
    return out;
}

namespace report_detail {

inline std::string opt(const std::optional<double>& v) { return v ? csv::format_double(*v) : std::string(); }

inline std::ofstream open(const std::filesystem::path& p) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    return out;
}

inline std::string hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 15];
    return s;
}

}  // namespace report_detail

inline void write_metrics_csv(const std::filesystem::path& path, const std::string& system,
                              const std::vector<RecordingMetrics>& rows) {
    auto out = report_detail::open(path);
    out << "system,recording_id,ccc_m,ccc_s,kl\n";
    for (const auto& r : rows)
        out << system << ',' << r.recording_id << ',' << csv::format_double(r.ccc_m) << ','
            << report_detail::opt(r.ccc_s) << ',' << report_detail::opt(r.kl) << '\n';
}

inline void write_predictions_csv(const std::filesystem::path& path, const Prediction& p) {
    auto out = report_detail::open(path);
    out << "time_s,m_hat,s_hat\n";
    for (std::size_t t = 0; t < p.m_hat.size(); ++t)
        out << csv::format_fixed(static_cast<double>(t) * kFramePeriod, 2) << ',' << csv::format_double(p.m_hat[t])
            << ',' << (p.s_hat.empty() ? std::string() : csv::format_double(p.s_hat[t])) << '\n';
}

inline void write_samples_csv(const std::filesystem::path& path, const Prediction& p) {
    auto out = report_detail::open(path);
    const std::size_t T = p.m_hat.size();
    out << "time_s";
    for (std::size_t i = 1; i <= p.n; ++i) out << ",y_" << i;
    out << '\n';
    for (std::size_t t = 0; t < T; ++t) {
        out << csv::format_fixed(static_cast<double>(t) * kFramePeriod, 2);
        for (std::size_t i = 0; i < p.n; ++i) out << ',' << csv::format_double(p.samples[i * T + t]);
        out << '\n';
    }
}

inline void write_report(const std::filesystem::path& dir, const EvaluationReport& rep, bool export_samples = false) {
    std::filesystem::create_directories(dir / kPredictionsDir);
    std::vector<RecordingMetrics> rows;
    for (const auto& r : rep.recordings) rows.push_back(r.metrics);
    write_metrics_csv(dir / kMetricsName, rep.system, rows);

    const auto macro = macro_average(rows);
    nlohmann::ordered_json j;
    j["system"] = rep.system;
    j["split"] = rep.split;
    j["config_hash"] = report_detail::hex(rep.config_hash);
    j["recordings"] = rows.size();
    j["ccc_m"] = macro.ccc_m;
    j["ccc_s"] = macro.ccc_s ? nlohmann::ordered_json(*macro.ccc_s) : nlohmann::ordered_json(nullptr);
    j["kl"] = macro.kl ? nlohmann::ordered_json(*macro.kl) : nlohmann::ordered_json(nullptr);
    if (rep.system == "stl") j["note"] = "single-task baseline: no uncertainty estimate, ccc_s and kl not applicable";
    if (rep.system == "mtl_pu")
        j["note"] = "simplified dynamic tuning: m_adj = m_hat + beta * (s_hat - mean(s_hat)), scalar beta fit on train";
    report_detail::open(dir / kSummaryName) << j.dump(2) << '\n';

    for (const auto& r : rep.recordings) {
        write_predictions_csv(dir / kPredictionsDir / (r.metrics.recording_id + ".csv"), r.prediction);
        if (export_samples && r.prediction.n > 0)
            write_samples_csv(dir / kPredictionsDir / (r.metrics.recording_id + ".samples.csv"), r.prediction);
    }
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

struct MetricsTable {
    std::string system;
    std::vector<RecordingMetrics> rows;
};

/// Reads metrics.csv (or a report directory containing one).
inline MetricsTable read_metrics_csv(std::filesystem::path path) {
    if (std::filesystem::is_directory(path)) path /= kMetricsName;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open report " + path.string());
    MetricsTable tab;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto trimmed = csv::trim(line);
        if (lineno == 1) {
            if (trimmed != "system,recording_id,ccc_m,ccc_s,kl")
                throw FormatError(path.string() + ": unexpected header '" + std::string(trimmed) + "'", 1);
            continue;
        }
        if (trimmed.empty()) continue;
        const auto f = csv::split(trimmed);
        if (f.size() != 5) throw FormatError(path.string() + ": expected 5 fields", lineno);
        if (tab.system.empty()) tab.system = std::string(f[0]);
        if (f[0] != tab.system) throw FormatError(path.string() + ": mixed systems in one report", lineno);
        RecordingMetrics r;
        r.recording_id = std::string(f[1]);
        r.ccc_m = csv::parse_double(f[2], lineno);
        if (!f[3].empty()) r.ccc_s = csv::parse_double(f[3], lineno);
        if (!f[4].empty()) r.kl = csv::parse_double(f[4], lineno);
        tab.rows.push_back(std::move(r));
    }
    if (tab.rows.empty()) throw ValidationError(path.string() + ": report has no recordings");
    return tab;
}

struct DirectionalTest {
    std::string metric;
    std::string better;  // hypothesis: `better` beats `worse`
    std::string worse;
    stats::TTestResult test;
    bool significant = false;
};

struct Comparison {
    std::string a, b;
    std::size_t recordings = 0;
    std::vector<DirectionalTest> tests;
};

/// Paired one-tailed tests per metric in both directions. CCC is higher-is-better,
/// KL lower-is-better. Metrics missing from either report are skipped.
inline Comparison compare_reports(const MetricsTable& ta, const MetricsTable& tb) {
    std::map<std::string, const RecordingMetrics*> ib;
    for (const auto& r : tb.rows) ib[r.recording_id] = &r;
    std::vector<std::string> ids_a, ids_b;
    for (const auto& r : ta.rows) ids_a.push_back(r.recording_id);
    for (const auto& r : tb.rows) ids_b.push_back(r.recording_id);
    std::sort(ids_a.begin(), ids_a.end());
    std::sort(ids_b.begin(), ids_b.end());
    if (ids_a != ids_b || std::adjacent_find(ids_a.begin(), ids_a.end()) != ids_a.end())
        throw ValidationError("reports cover different recording sets");

    Comparison c;
    c.a = ta.system;
    c.b = tb.system;
    if (c.a == c.b) c.a += " (a)", c.b += " (b)";
    c.recordings = ta.rows.size();

    auto column = [&](auto get) {
        std::vector<double> xa, xb;
        for (const auto& r : ta.rows) {
            const auto va = get(r), vb = get(*ib.at(r.recording_id));
            if (!va || !vb) return std::pair<std::vector<double>, std::vector<double>>{};
            xa.push_back(*va);
            xb.push_back(*vb);
        }
        return std::pair{xa, xb};
    };
    auto add = [&](const std::string& metric, bool higher_better, auto get) {
        auto [xa, xb] = column(get);
        if (xa.empty()) return;
        for (int dir = 0; dir < 2; ++dir) {
            const bool a_first = dir == 0;
            const auto& hi = a_first ? xa : xb;
            const auto& lo = a_first ? xb : xa;
            DirectionalTest d;
            d.metric = metric;
            d.better = a_first ? c.a : c.b;
            d.worse = a_first ? c.b : c.a;
            d.test = higher_better ? stats::paired_t_test_one_tailed(hi, lo) : stats::paired_t_test_one_tailed(lo, hi);
            d.significant = d.test.p_value <= kSignificance;
            c.tests.push_back(std::move(d));
        }
    };
    add("ccc_m", true, [](const RecordingMetrics& r) { return std::optional<double>(r.ccc_m); });
    add("ccc_s", true, [](const RecordingMetrics& r) { return r.ccc_s; });
    add("kl", false, [](const RecordingMetrics& r) { return r.kl; });
    return c;
}

inline void print_comparison(std::ostream& out, const Comparison& c) {
    out << "paired one-tailed t-tests over " << c.recordings << " recordings (significance at p <= "
        << csv::format_double(kSignificance) << ")\n";
    for (const auto& d : c.tests) {
        out << d.metric << ": " << d.better << " better than " << d.worse << "  t=" << csv::format_double(d.test.t)
            << " p=" << csv::format_double(d.test.p_value) << "  "
            << (d.significant ? "significant" : "not significant");
        if (!d.test.note.empty()) out << " (" << d.test.note << ")";
        out << '\n';
    }
}

}  // namespace bnnser
