// bnnser: generate a synthetic corpus, train a system, evaluate it, compare two reports.
//
// Exit codes: 0 success, 1 validation error (bad config, input or usage), 2 runtime failure.

#include <iostream>

#include <CLI11.hpp>

#include "bnnser/pipeline.hpp"

namespace {

bnnser::RunConfig load_config(const std::string& path, const bnnser::CommonOptions& opt) {
    bnnser::RunConfig rc = path.empty() ? bnnser::RunConfig{} : bnnser::load_run_config(path);
    return bnnser::apply_overrides(std::move(rc), opt);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bayes-by-Backprop speech emotion recognition with label uncertainty"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    bnnser::CommonOptions common;
    app.add_option("--config", config_path, "run config (TOML); defaults are used when omitted")
        ->check(CLI::ExistingFile);
    auto* seed_opt = app.add_option("--seed", seed, "seed for every stochastic component");
    app.add_flag("--force", common.force, "overwrite existing outputs");
    app.add_flag("--allow-mismatch", common.allow_mismatch, "evaluate despite a checkpoint/config hash mismatch");

    auto* gen = app.add_subcommand("generate", "write the synthetic corpus");
    double duration_s = 0.0;
    gen->add_option("--duration-s", duration_s, "recording length in seconds")->check(CLI::PositiveNumber);

    auto* tr = app.add_subcommand("train", "train one system");
    std::string system;
    bnnser::TrainCommandOptions topt;
    tr->add_option("system", system, "mu | lu | stl | mtl_pu")
        ->required()
        ->check(CLI::IsMember({"mu", "lu", "stl", "mtl_pu"}));
    tr->add_flag("--resume", topt.resume, "continue from last.ckpt");
    tr->add_option("--stop-after", topt.stop_after, "stop after this many epochs in total");

    auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on a split");
    std::string checkpoint, split = "dev", out_dir;
    bool export_samples = false;
    ev->add_option("checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
    ev->add_option("--split", split, "train | dev")->check(CLI::IsMember({"train", "dev"}));
    ev->add_option("--out", out_dir, "report directory (default <report_dir>/<system>/<split>)");
    ev->add_flag("--export-samples", export_samples, "also write the n stochastic outputs per recording");

    auto* cmp = app.add_subcommand("compare", "paired significance tests between two reports");
    std::string report_a, report_b;
    cmp->add_option("report_a", report_a, "report directory or metrics.csv")->required();
    cmp->add_option("report_b", report_b, "report directory or metrics.csv")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }
    if (*seed_opt) common.seed = seed;

    try {
        if (*gen) {
            auto rc = load_config(config_path, common);
            if (duration_s > 0.0) rc.corpus.duration_s = duration_s;
            bnnser::cmd_generate(rc, common);
        } else if (*tr) {
            bnnser::cmd_train(load_config(config_path, common), bnnser::parse_system(system), common, topt);
        } else if (*ev) {
            bnnser::EvaluateCommandOptions eopt;
            eopt.checkpoint = checkpoint;
            eopt.split = bnnser::parse_split(split);
            eopt.out_dir = out_dir;
            eopt.export_samples = export_samples;
            bnnser::cmd_evaluate(load_config(config_path, common), eopt, common);
        } else if (*cmp) {
            bnnser::cmd_compare(report_a, report_b);
        }
    } catch (const bnnser::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const bnnser::FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
