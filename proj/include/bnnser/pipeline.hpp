#pragma once

// Command implementations shared by the CLI and the tests: generate, train,
// evaluate, compare. Each refuses to overwrite existing outputs unless forced.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bnnser/checkpoint.hpp"
#include "bnnser/config.hpp"
#include "bnnser/dataset.hpp"
#include "bnnser/report.hpp"
#include "bnnser/trainer.hpp"

namespace bnnser {

struct CommonOptions {
    std::optional<std::uint64_t> seed;  // overrides corpus and model seeds
    bool force = false;
    bool allow_mismatch = false;
};

/// Applies --seed and USER_CORPUS_DIR to a loaded config.
inline RunConfig apply_overrides(RunConfig rc, const CommonOptions& opt) {
    if (opt.seed) {
        rc.corpus.seed = *opt.seed;
        rc.model.seed = *opt.seed;
    }
    if (const char* dir = std::getenv("USER_CORPUS_DIR"); dir && *dir) rc.paths.corpus_dir = dir;
    return rc;
}

namespace pipeline_detail {

inline void refuse_overwrite(const std::filesystem::path& p, bool force, const std::string& what) {
    if (!force && std::filesystem::exists(p))
        throw ValidationError(what + " already exists at " + p.string() + "; pass --force to overwrite");
}

inline void print_warnings(std::ostream& log, const std::vector<std::string>& w) {
    for (const auto& s : w) log << "warning: " << s << '\n';
}

}  // namespace pipeline_detail

inline CorpusStats cmd_generate(const RunConfig& rc, const CommonOptions& opt, std::ostream& log = std::cout) {
    rc.corpus.validate();
    const std::filesystem::path dir = rc.paths.corpus_dir;
    pipeline_detail::refuse_overwrite(dir / kManifestName, opt.force, "a corpus");
    std::filesystem::create_directories(dir);
    if (std::filesystem::exists(dir / kManifestName))
        for (const auto& e : load_manifest(dir)) {
            std::filesystem::remove(dir / e.wav);
            std::filesystem::remove(dir / e.csv);
        }
    const auto recs = generate_corpus(rc.corpus);
    {
        std::ofstream manifest(dir / kManifestName, std::ios::binary);
        if (!manifest) throw Error("cannot write " + (dir / kManifestName).string());
        for (const auto& r : recs) write_recording(dir, r, manifest);
    }
    echo_config(dir, rc);
    const auto st = corpus_stats(recs);
    log << "generated " << recs.size() << " recordings (" << rc.corpus.n_train << " train, " << rc.corpus.n_dev
        << " dev, " << rc.corpus.frames() << " frames each) in " << dir.string() << '\n'
        << "mean of m: " << csv::format_fixed(st.mean_of_m, 4) << "  mean of s: " << csv::format_fixed(st.mean_of_s, 4)
        << '\n';
    return st;
}

/// Model config for a system name: `lu` forces alpha 1 and `mu` alpha 0.
inline ModelConfig config_for_system(ModelConfig m, System sys) {
    m.system = sys;
    if (sys == System::lu) m.alpha = 1.0;
    if (sys == System::mu) m.alpha = 0.0;
    return m;
}

inline std::filesystem::path checkpoint_dir_for(const RunConfig& rc, System sys) {
    return std::filesystem::path(rc.paths.checkpoint_dir) / system_name(sys);
}

struct TrainCommandOptions {
    bool resume = false;
    std::size_t stop_after = 0;
};

inline TrainResult cmd_train(RunConfig rc, System sys, const CommonOptions& opt, const TrainCommandOptions& topt = {},
                             std::ostream& log = std::cout) {
    rc.model = config_for_system(rc.model, sys);
    rc.model.validate();
    const auto out_dir = checkpoint_dir_for(rc, sys);
    if (!topt.resume) pipeline_detail::refuse_overwrite(out_dir / kBestCheckpoint, opt.force, "a checkpoint");
    std::vector<std::string> warnings;
    const auto recs = load_corpus(rc.paths.corpus_dir, Split::train, &warnings);
    pipeline_detail::print_warnings(log, warnings);
    if (recs.empty()) throw ValidationError("corpus at " + rc.paths.corpus_dir + " has no train recordings");
    std::filesystem::create_directories(out_dir);
    echo_config(out_dir, rc);

    Model model(rc.model);
    TrainOptions to;
    to.out_dir = out_dir;
    to.resume = topt.resume;
    to.stop_after = topt.stop_after;
    to.on_epoch = [&](const EpochLog& e) {
        log << "epoch " << e.epoch << "/" << rc.model.epochs << "  loss " << csv::format_fixed(e.total, 6) << "  ccc "
            << csv::format_fixed(e.ccc_term, 4) << "  bbb " << csv::format_fixed(e.bbb_term, 4) << "  kl "
            << csv::format_fixed(e.kl_term, 4) << "  (" << csv::format_fixed(e.seconds, 1) << " s)\n";
    };
    log << "training " << system_name(sys) << " on " << recs.size() << " recordings, "
        << Model::count(model.parameters()) << " parameters\n";
    auto result = train(model, recs, to);
    log << "best training loss " << csv::format_fixed(result.best_loss, 6) << "; checkpoint "
        << (out_dir / kBestCheckpoint).string() << '\n';
    if (sys == System::mtl_pu) log << "tuning beta " << csv::format_double(model.tuning_beta) << '\n';
    return result;
}

struct EvaluateCommandOptions {
    std::filesystem::path checkpoint;
    Split split = Split::dev;
    std::filesystem::path out_dir;  // default: <report_dir>/<system>/<split>
    bool export_samples = false;
};

inline EvaluationReport cmd_evaluate(const RunConfig& rc, const EvaluateCommandOptions& eopt,
                                     const CommonOptions& opt, std::ostream& log = std::cout) {
    auto ck = load_checkpoint(eopt.checkpoint);
    if (ck.config_hash != config_hash(rc.model)) {
        const std::string msg = "checkpoint " + eopt.checkpoint.string() +
                                " was trained with a different model configuration than the current config";
        if (!opt.allow_mismatch) throw ValidationError(msg + " (pass --allow-mismatch to evaluate anyway)");
        log << "warning: " << msg << "; proceeding with the checkpoint's own configuration\n";
    }
    const std::string split = split_name(eopt.split);
    const auto out_dir = eopt.out_dir.empty()
                             ? std::filesystem::path(rc.paths.report_dir) / system_name(ck.model.system()) / split
                             : eopt.out_dir;
    pipeline_detail::refuse_overwrite(out_dir / kMetricsName, opt.force, "a report");
    std::vector<std::string> warnings;
    const auto recs = load_corpus(rc.paths.corpus_dir, eopt.split, &warnings);
    pipeline_detail::print_warnings(log, warnings);
    auto rep = evaluate(ck.model, recs, split);
    std::filesystem::create_directories(out_dir);
    write_report(out_dir, rep, eopt.export_samples);
    echo_config(out_dir, rc);

    std::vector<RecordingMetrics> rows;
    for (const auto& r : rep.recordings) rows.push_back(r.metrics);
    const auto macro = macro_average(rows);
    log << rep.system << " on " << split << " (" << rows.size() << " recordings): ccc_m "
        << csv::format_fixed(macro.ccc_m, 4);
    if (macro.ccc_s) log << "  ccc_s " << csv::format_fixed(*macro.ccc_s, 4) << "  kl " << csv::format_fixed(*macro.kl, 4);
    log << "\nreport written to " << out_dir.string() << '\n';
    return rep;
}

inline Comparison cmd_compare(const std::filesystem::path& a, const std::filesystem::path& b,
                              std::ostream& out = std::cout) {
    auto c = compare_reports(read_metrics_csv(a), read_metrics_csv(b));
    print_comparison(out, c);
    return c;
}

}  // namespace bnnser
