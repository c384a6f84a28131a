// Acceptance suite: one PASS/FAIL line per criterion. Exit status is non-zero
// when any criterion fails.
//
//   acceptance --workdir DIR [--only 1,5,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "bnnser/gradcheck.hpp"
#include "bnnser/model_gradcheck.hpp"
#include "bnnser/pipeline.hpp"

using namespace bnnser;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int digits = 3) {
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

RunConfig desk_config() { return load_run_config(fs::path(BNNSER_SOURCE_DIR) / "configs" / "desk.toml"); }

void set_paths(RunConfig& rc, const fs::path& dir) {
    rc.paths.corpus_dir = (dir / "corpus").string();
    rc.paths.checkpoint_dir = (dir / "checkpoints").string();
    rc.paths.report_dir = (dir / "reports").string();
}

CommonOptions forced() {
    CommonOptions o;
    o.force = true;
    return o;
}

// train + evaluate on dev, returning the report directory
fs::path train_and_evaluate(const RunConfig& rc, System sys, std::ostream& log) {
    TrainCommandOptions t;
    cmd_train(rc, sys, forced(), t, log);
    EvaluateCommandOptions e;
    e.checkpoint = checkpoint_dir_for(rc, sys) / kBestCheckpoint;
    cmd_evaluate(rc, e, forced(), log);
    return fs::path(rc.paths.report_dir) / system_name(sys) / "dev";
}

// ---------------------------------------------------------------------------
// 1. gradient integrity
// ---------------------------------------------------------------------------

Outcome gradient_integrity() {
    const std::vector<ad::Op> ops = {
        ad::Op::add,     ad::Op::sub,     ad::Op::mul,      ad::Op::div,     ad::Op::matmul,  ad::Op::conv1d,
        ad::Op::maxpool1d, ad::Op::sigmoid, ad::Op::tanh,   ad::Op::relu,    ad::Op::softplus, ad::Op::exp,
        ad::Op::log,     ad::Op::square,  ad::Op::sqrt,     ad::Op::mean,    ad::Op::variance, ad::Op::sum,
        ad::Op::slice,   ad::Op::concat,  ad::Op::dropout,  ad::Op::neg,     ad::Op::scale,   ad::Op::shift,
        ad::Op::reshape, ad::Op::clamp_min};
    double op_worst = 0.0;
    std::string op_at;
    for (std::uint64_t seed = 1; seed <= 100; ++seed)
        for (auto op : ops) {
            Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(op)}));
            const double e = ad::gradcheck(op, ad::random_point(op, rng), 1e-6);
            if (e > op_worst) op_worst = e, op_at = std::string(ad::op_name(op)) + " seed " + std::to_string(seed);
        }

    // seeds 1-10 check every parameter coordinate, 11-100 eight per tensor
    const System systems[] = {System::lu, System::mu, System::stl, System::mtl_pu};
    double model_worst = 0.0;
    std::string model_at;
    std::size_t coords = 0, rechecked = 0;
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
        const System sys = systems[seed % 4];
        Model m(tiny_model_config(sys, seed));
        Rng rng(derive_seed(seed, {1}));
        const auto batch = random_batch(8, 1, rng);
        Rng pick(derive_seed(seed, {2}));
        const auto r = model_gradcheck(m, batch, derive_seed(seed, {3}), 1e-5, seed <= 10 ? 0 : 8, &pick);
        coords += r.checked;
        rechecked += r.rechecked;
        if (r.max_error > model_worst)
            model_worst = r.max_error, model_at = std::string(system_name(sys)) + " seed " + std::to_string(seed) + " " + r.worst;
    }
    const bool pass = op_worst < 1e-4 && model_worst < 1e-4;
    return {pass, std::to_string(ops.size()) + " ops x 100 seeds max err " + fmt(op_worst) + " (" + op_at +
                      "); tiny model 100 seeds, " + std::to_string(coords) + " coordinates (" + std::to_string(rechecked) +
                      " re-checked with a smaller step after one-sided differences disagreed), max err " + fmt(model_worst) + " (" +
                      model_at + ")"};
}

// ---------------------------------------------------------------------------
// 2. ELBO complexity oracle
// ---------------------------------------------------------------------------

Outcome elbo_oracle() {
    Rng rng(2024);
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
        const auto in = static_cast<std::size_t>(uniform_int(rng, 1, 4));
        const auto out = static_cast<std::size_t>(uniform_int(rng, 1, 3));
        const double mu_half = uniform(rng, 0.1, 1.0);
        const double rho_lo = uniform(rng, -3.0, -1.0);
        auto p = nn::make_bayes_params("q" + std::to_string(k), in, out, {-mu_half, mu_half}, {rho_lo, rho_lo + 1.0}, rng);
        nn::Prior prior;
        prior.std = uniform(rng, 0.5, 1.5);

        double closed = 0.0;
        auto add = [&](const ad::Parameter& mu, const ad::Parameter& rho) {
            for (std::size_t i = 0; i < mu.value.size(); ++i)
                closed += gaussian_kl(mu.value[i], std::log1p(std::exp(rho.value[i])), prior.mean, prior.std);
        };
        add(p.mu_w, p.rho_w);
        add(p.mu_b, p.rho_b);

        Rng draw_rng(derive_seed(2024, {static_cast<std::uint64_t>(k)}));
        double acc = 0.0;
        const int draws = 10000;
        for (int i = 0; i < draws; ++i) {
            ad::Graph g(0, false);
            std::vector<nn::WeightSchedule> sched{nn::sample_schedule(g, p, prior, 1, 1, draw_rng)};
            acc += bbb_loss(sched, 1, g.scalar(0.0), std::size_t{1}).item();
        }
        worst = std::max(worst, std::abs(acc / draws - closed) / closed);
    }
    return {worst < 0.05, "20 posteriors, 1e4 samples each: max relative error " + fmt(worst)};
}

// ---------------------------------------------------------------------------
// 3. metric oracles
// ---------------------------------------------------------------------------

double ccc_two_pass(const std::vector<double>& x, const std::vector<double>& y) {
    long double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
    mx /= x.size();
    my /= y.size();
    long double vx = 0, vy = 0, c = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        vx += (x[i] - mx) * (x[i] - mx);
        vy += (y[i] - my) * (y[i] - my);
        c += (x[i] - mx) * (y[i] - my);
    }
    const long double n = x.size();
    return static_cast<double>(2 * c / n / (vx / n + vy / n + (mx - my) * (mx - my)));
}

// Composite Simpson over +-12 sd of p of p(x) (log p(x) - log q(x)).
double kl_quadrature(double mp, double sp, double mq, double sq) {
    const double lo = mp - 12 * sp, hi = mp + 12 * sp;
    const int n = 20000;
    const double h = (hi - lo) / n;
    auto logpdf = [](double x, double m, double s) {
        return -0.5 * std::log(2 * std::numbers::pi) - std::log(s) - 0.5 * (x - m) * (x - m) / (s * s);
    };
    auto f = [&](double x) { return std::exp(logpdf(x, mp, sp)) * (logpdf(x, mp, sp) - logpdf(x, mq, sq)); };
    double acc = f(lo) + f(hi);
    for (int i = 1; i < n; ++i) acc += f(lo + i * h) * (i % 2 ? 4.0 : 2.0);
    return acc * h / 3.0;
}

std::vector<double> median_naive(const std::vector<double>& x, std::size_t w) {
    const std::size_t left = (w - 1) / 2, right = w - 1 - left;
    std::vector<double> out;
    for (std::size_t t = 0; t < x.size(); ++t) {
        std::vector<double> win;
        for (std::size_t j = (t >= left ? t - left : 0); j <= std::min(x.size() - 1, t + right); ++j) win.push_back(x[j]);
        std::sort(win.begin(), win.end());
        const std::size_t k = win.size();
        out.push_back(k % 2 ? win[k / 2] : 0.5 * (win[k / 2 - 1] + win[k / 2]));
    }
    return out;
}

Outcome metric_oracles() {
    Rng rng(303);
    double ccc_err = 0.0;
    for (int k = 0; k < 1000; ++k) {
        const auto n = static_cast<std::size_t>(uniform_int(rng, 2, 400));
        const double shift = uniform(rng, -1, 1), sx = uniform(rng, 0.05, 2), sy = uniform(rng, 0.05, 2),
                     rho = uniform(rng, -1, 1);
        std::vector<double> x(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double a = standard_normal(rng), b = standard_normal(rng);
            x[i] = sx * a;
            y[i] = shift + sy * (rho * a + std::sqrt(1 - rho * rho) * b);
        }
        ccc_err = std::max(ccc_err, std::abs(ccc(x, y) - ccc_two_pass(x, y)));
    }

    double kl_err = 0.0;
    for (int k = 0; k < 100; ++k) {
        const double mp = uniform(rng, -1, 1), mq = uniform(rng, -1, 1);
        const double sp = uniform(rng, 0.05, 1.0), sq = uniform(rng, 0.05, 1.0);
        kl_err = std::max(kl_err, std::abs(gaussian_kl(mp, sp, mq, sq) - kl_quadrature(mp, sp, mq, sq)));
    }

    std::size_t median_bad = 0;
    for (int k = 0; k < 300; ++k) {
        std::vector<double> x(static_cast<std::size_t>(uniform_int(rng, 1, 300)));
        // coarse values so windows contain ties
        for (auto& v : x) v = std::round(standard_normal(rng) * 4) / 4;
        const auto w = static_cast<std::size_t>(uniform_int(rng, 1, 80));
        if (median_filter(x, w) != median_naive(x, w)) ++median_bad;
    }
    const bool pass = ccc_err <= 1e-12 && kl_err <= 1e-6 && median_bad == 0;
    return {pass, "ccc 1000 pairs max |diff| " + fmt(ccc_err) + "; gaussian_kl 100 pairs max |diff| " + fmt(kl_err) +
                      "; median_filter " + std::to_string(300 - median_bad) + "/300 exact"};
}

// ---------------------------------------------------------------------------
// 4. label-model oracles
// ---------------------------------------------------------------------------

Outcome label_oracles() {
    auto frame = [](std::vector<double> ys) {
        const auto a = ys.size();
        return AnnotationTrace("fixture", 1, a, std::move(ys));
    };
    struct Fixture {
        std::vector<double> ys;
        double m, s;
    };
    const std::vector<Fixture> fixtures{
        {{0.1, 0.2, 0.3, 0.2, 0.1, 0.3}, 0.2, std::sqrt(0.04 / 5.0)},
        {std::vector<double>(6, 0.5), 0.5, 0.0},
        {{-0.37, 0.37}, 0.0, 0.74 / std::sqrt(2.0)},
        {{0.0, 1.0}, 0.5, std::sqrt(0.5)},
        {{0.4, 0.4, 0.4}, 0.4, 0.0},
    };
    double err = 0.0;
    for (const auto& f : fixtures) {
        const auto tr = frame(f.ys);
        err = std::max({err, std::abs(mean_annotation(tr)[0] - f.m), std::abs(perception_uncertainty(tr)[0] - f.s)});
    }
    const auto lab = label_distribution(frame({0.3, 0.3, 0.3}));
    const bool floored = std::abs(lab.m[0] - 0.3) <= 1e-12 && lab.s[0] == kMinLabelStd;
    const double quoted = std::max(std::abs(perception_uncertainty(frame({0.0, 1.0}))[0] - 0.707107),
                                   std::abs(perception_uncertainty(frame({0.1, 0.2, 0.3, 0.2, 0.1, 0.3}))[0] - 0.089443));

    Rng rng(404);
    double pair_err = 0.0;
    for (int k = 0; k < 10000; ++k) {
        const double y1 = uniform(rng, -1, 1), y2 = uniform(rng, -1, 1);
        pair_err = std::max(pair_err, std::abs(perception_uncertainty(frame({y1, y2}))[0] - std::abs(y1 - y2) / std::sqrt(2.0)));
    }
    const bool pass = err <= 1e-12 && floored && quoted < 1e-6 && pair_err <= 1e-15;
    return {pass, std::to_string(fixtures.size()) + " fixtures max |diff| " + fmt(err) + (floored ? "; floor ok" : "; floor WRONG") +
                      "; a=2 identity over 1e4 pairs max |diff| " + fmt(pair_err)};
}

// ---------------------------------------------------------------------------
// 5 + 6. directional comparison of +LU and MU over five training seeds
// ---------------------------------------------------------------------------

struct SeedResult {
    std::uint64_t seed;
    MetricsTable lu, mu;
};

struct Directional {
    std::vector<SeedResult> seeds;
    Comparison pooled;
    double seconds = 0.0;
};

MacroMetrics macro_of(const MetricsTable& t) { return macro_average(t.rows); }

const DirectionalTest& pick(const Comparison& c, const std::string& metric, const std::string& better) {
    for (const auto& d : c.tests)
        if (d.metric == metric && d.better == better) return d;
    throw Error("comparison lacks " + metric + " test for " + better);
}

Directional run_directional(const fs::path& dir) {
    const auto t0 = std::chrono::steady_clock::now();
    auto rc = desk_config();
    set_paths(rc, dir);
    std::ofstream log(dir / "log.txt");
    cmd_generate(rc, forced(), log);

    Directional d;
    MetricsTable pool_lu{"lu", {}}, pool_mu{"mu", {}};
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto run = rc;
        run.model.seed = seed;
        run.paths.checkpoint_dir = (dir / ("seed" + std::to_string(seed)) / "checkpoints").string();
        run.paths.report_dir = (dir / ("seed" + std::to_string(seed)) / "reports").string();
        SeedResult s{seed, read_metrics_csv(train_and_evaluate(run, System::lu, log)),
                     read_metrics_csv(train_and_evaluate(run, System::mu, log))};
        for (auto [src, dst] : {std::pair{&s.lu, &pool_lu}, std::pair{&s.mu, &pool_mu}})
            for (auto r : src->rows) {
                r.recording_id = "seed" + std::to_string(seed) + "/" + r.recording_id;
                dst->rows.push_back(r);
            }
        d.seeds.push_back(std::move(s));
    }
    d.pooled = compare_reports(pool_mu, pool_lu);
    d.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ofstream summary(dir / "comparison.txt");
    print_comparison(summary, d.pooled);
    return d;
}

Outcome label_uncertainty_direction(const Directional& d) {
    int wins = 0;
    std::string per_seed;
    for (const auto& s : d.seeds) {
        const auto lu = macro_of(s.lu), mu = macro_of(s.mu);
        const bool win = *lu.ccc_s > *mu.ccc_s && *lu.kl < *mu.kl;
        wins += win;
        per_seed += " s" + std::to_string(s.seed) + "(ccc_s " + fmt(*lu.ccc_s, 2) + "/" + fmt(*mu.ccc_s, 2) + ", kl " +
                    fmt(*lu.kl, 2) + "/" + fmt(*mu.kl, 2) + ")";
    }
    const double p_s = pick(d.pooled, "ccc_s", "lu").test.p_value, p_kl = pick(d.pooled, "kl", "lu").test.p_value;
    const bool in_time = d.seconds < 30 * 60;
    const bool pass = wins >= 4 && p_s <= 0.05 && p_kl <= 0.05 && in_time;
    return {pass, "lu beats mu on both ccc_s and kl in " + std::to_string(wins) + "/5 seeds; pooled p(ccc_s) " + fmt(p_s) +
                      ", p(kl) " + fmt(p_kl) + "; lu/mu per seed:" + per_seed + "; " + fmt(d.seconds / 60, 2) + " min"};
}

Outcome mean_non_degradation(const Directional& d) {
    double lu = 0, mu = 0;
    std::size_t n = 0;
    for (const auto& s : d.seeds) {
        for (const auto& r : s.lu.rows) lu += r.ccc_m;
        for (const auto& r : s.mu.rows) mu += r.ccc_m, ++n;
    }
    lu /= static_cast<double>(n);
    mu /= static_cast<double>(n);
    const double p = pick(d.pooled, "ccc_m", "mu").test.p_value;
    const bool pass = std::abs(lu - mu) <= 0.08 || p > 0.05;
    return {pass, "mean dev ccc_m lu " + fmt(lu) + " vs mu " + fmt(mu) + " (|diff| " + fmt(std::abs(lu - mu)) +
                      "); p(mu better than lu) " + fmt(p)};
}

// ---------------------------------------------------------------------------
// 7. degenerate posterior
// ---------------------------------------------------------------------------

Outcome degenerate_posterior() {
    std::size_t checked = 0, bad = 0;
    for (std::uint64_t seed = 1; seed <= 6; ++seed)
        for (auto sys : {System::lu, System::mu}) {
            auto cfg = tiny_model_config(sys, seed);
            cfg.window_frames = 7;
            Model m(cfg);
            for (auto& b : m.bayes)
                for (auto* p : {&b.rho_w, &b.rho_b}) std::fill(p->value.begin(), p->value.end(), -1e4);
            Rng rng(derive_seed(seed, {7}));
            std::vector<float> audio(60 * kFrameSamples);
            for (auto& x : audio) x = static_cast<float>(uniform(rng, -0.5, 0.5));
            for (bool filtered : {false, true}) {
                const auto d = predict_distribution(m, audio, 8, seed, filtered);
                for (double s : d.s_hat) bad += s != 0.0;
                for (std::size_t i = 0; i < d.n; ++i)
                    for (std::size_t t = 0; t < d.frames; ++t) bad += d.samples[i * d.frames + t] != d.m_hat[t];
                checked += d.s_hat.size() + d.samples.size();
            }
        }
    return {bad == 0, std::to_string(checked) + " values checked with sigma forced to 0, " + std::to_string(bad) +
                          " differ from the deterministic pass"};
}

// ---------------------------------------------------------------------------
// 8. determinism of the whole pipeline
// ---------------------------------------------------------------------------

std::map<std::string, std::string> tree_contents(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
    return out;
}

Outcome pipeline_determinism(const fs::path& dir) {
    std::vector<std::map<std::string, std::string>> reports;
    for (const char* run : {"a", "b"}) {
        auto rc = desk_config();
        rc.model.epochs = 2;
        set_paths(rc, dir / run);
        std::ofstream log(dir / (std::string(run) + ".log"));
        cmd_generate(rc, forced(), log);
        const auto rep = train_and_evaluate(rc, System::lu, log);
        auto files = tree_contents(rep);
        files["best.ckpt"] = slurp(checkpoint_dir_for(rc, System::lu) / kBestCheckpoint);
        reports.push_back(std::move(files));
    }
    // the echoed config names the run directory; everything else must match byte for byte
    reports[0].erase(kEffectiveConfigName);
    reports[1].erase(kEffectiveConfigName);
    std::size_t differ = 0;
    for (const auto& [name, body] : reports[0]) {
        auto it = reports[1].find(name);
        differ += it == reports[1].end() || it->second != body;
    }
    differ += reports[0].size() != reports[1].size();
    return {differ == 0 && reports[0].count(kMetricsName),
            std::to_string(reports[0].size()) + " report files and checkpoint compared, " + std::to_string(differ) + " differ"};
}

// ---------------------------------------------------------------------------
// 9. STL report contract
// ---------------------------------------------------------------------------

Outcome stl_contract(const fs::path& dir) {
    auto rc = desk_config();
    rc.model.epochs = 2;
    set_paths(rc, dir);
    std::ofstream log(dir / "log.txt");
    cmd_generate(rc, forced(), log);
    const auto rep = train_and_evaluate(rc, System::stl, log);

    std::vector<std::string> problems;
    std::ifstream metrics(rep / kMetricsName);
    std::string line;
    std::getline(metrics, line);
    if (line != "system,recording_id,ccc_m,ccc_s,kl") problems.push_back("header");
    std::size_t rows = 0;
    while (std::getline(metrics, line)) {
        ++rows;
        const auto f = csv::split(line);
        if (f.size() != 5 || f[0] != "stl" || f[2].empty() || !f[3].empty() || !f[4].empty())
            problems.push_back("row '" + line + "'");
    }
    const auto summary = nlohmann::json::parse(slurp(rep / kSummaryName));
    if (!summary["ccc_m"].is_number() || !summary["ccc_s"].is_null() || !summary["kl"].is_null())
        problems.push_back("summary.json");
    for (const auto& e : fs::directory_iterator(rep / kPredictionsDir)) {
        std::ifstream p(e.path());
        std::getline(p, line);
        while (std::getline(p, line))
            if (line.back() != ',') {
                problems.push_back(e.path().filename().string() + " has s_hat");
                break;
            }
    }
    std::string detail = std::to_string(rows) + " dev recordings report ccc_m only, ccc_s/kl empty and null in summary";
    if (!problems.empty()) detail = "problems: " + problems.front() + (problems.size() > 1 ? " ..." : "");
    return {problems.empty() && rows == static_cast<std::size_t>(rc.corpus.n_dev), detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string workdir = "acceptance_work";
    std::vector<int> only;
    app.add_option("--workdir", workdir, "scratch directory for corpora, checkpoints and reports");
    app.add_option("--only", only, "run only these criteria")->delimiter(',');
    CLI11_PARSE(app, argc, argv);
    const fs::path root = fs::absolute(workdir);
    fs::create_directories(root);
    const std::set<int> wanted(only.begin(), only.end());
    auto want = [&](int k) { return wanted.empty() || wanted.count(k); };

    std::optional<Directional> directional;
    auto directional_result = [&]() -> const Directional& {
        if (!directional) {
            fs::create_directories(root / "directional");
            directional = run_directional(root / "directional");
        }
        return *directional;
    };

    struct Criterion {
        int id;
        const char* name;
        double time_limit_s;  // 0: none
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {1, "gradient integrity", 120, gradient_integrity},
        {2, "ELBO complexity oracle", 60, elbo_oracle},
        {3, "metric oracles", 0, metric_oracles},
        {4, "label-model oracles", 0, label_oracles},
        {5, "+LU beats MU on uncertainty", 0, [&] { return label_uncertainty_direction(directional_result()); }},
        {6, "mean estimation not degraded", 0, [&] { return mean_non_degradation(directional_result()); }},
        {7, "degenerate posterior", 0, degenerate_posterior},
        {8, "pipeline determinism",
         0,
         [&] {
             fs::create_directories(root / "determinism");
             return pipeline_determinism(root / "determinism");
         }},
        {9, "STL report contract",
         0,
         [&] {
             fs::create_directories(root / "stl");
             return stl_contract(root / "stl");
         }},
    };

    int failed = 0;
    for (const auto& c : criteria) {
        if (!want(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.time_limit_s > 0 && secs >= c.time_limit_s) {
            o.pass = false;
            o.detail += "; over the " + fmt(c.time_limit_s, 4) + " s limit";
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << c.id << " (" << c.name << "): " << o.detail << "  ["
                  << fmt(secs, 3) << " s]" << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
