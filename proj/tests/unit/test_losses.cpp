#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "bnnser/gradcheck.hpp"
#include "bnnser/losses.hpp"

using namespace bnnser;
using namespace bnnser::ad;

namespace {

// Two-pass long-double CCC.
double ccc_oracle(const std::vector<double>& x, const std::vector<double>& y) {
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

// Simpson's rule over +-12 sd of p.
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

std::vector<double> median_oracle(const std::vector<double>& x, std::size_t w) {
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

std::vector<double> randv(std::size_t n, Rng& rng, double sd = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = sd * standard_normal(rng);
    return v;
}

}  // namespace

TEST(Ccc, Examples) {
    EXPECT_DOUBLE_EQ(ccc(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3}), 1.0);
    EXPECT_NEAR(ccc(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}), -1.0, 1e-12);
    EXPECT_NEAR(ccc(std::vector<double>{1, 2, 3}, std::vector<double>{2, 3, 4}), 0.571429, 1e-6);
    EXPECT_EQ(ccc(std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5}), 1.0);
    EXPECT_THROW(ccc(std::vector<double>{1.0}, std::vector<double>{1.0}), ValidationError);
    EXPECT_THROW(ccc(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), ValidationError);
}

TEST(Ccc, TrainingTermExamples) {
    EXPECT_DOUBLE_EQ(ccc_training_term(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3}), 0.0);
    EXPECT_NEAR(ccc_training_term(std::vector<double>{3, 2, 1}, std::vector<double>{1, 2, 3}), 2.0, 1e-12);
}

TEST(Ccc, MatchesOracleBoundedAndSymmetric) {
    Rng rng(1);
    for (int rep = 0; rep < 200; ++rep) {
        const auto n = static_cast<std::size_t>(uniform_int(rng, 2, 60));
        auto x = randv(n, rng), y = randv(n, rng, 2.0);
        const double c = ccc(x, y);
        EXPECT_NEAR(c, ccc_oracle(x, y), 1e-12);
        EXPECT_LE(std::abs(c), 1.0 + 1e-12);
        EXPECT_NEAR(c, ccc(y, x), 1e-15);
    }
}

TEST(Ccc, PenalizesBiasUnlikePearson) {
    Rng rng(2);
    auto x = randv(50, rng);
    auto y = x;
    for (auto& v : y) v += 0.5;
    EXPECT_LT(ccc(x, y), 1.0);
    auto z = x;
    for (auto& v : z) v *= 2.0;
    EXPECT_LT(ccc(x, z), 1.0);
}

TEST(Ccc, GraphVersionMatchesPlainAndGradchecks) {
    Rng rng(3);
    const std::size_t T = 20, B = 3;
    auto p = randv(T * B, rng), l = randv(T * B, rng);
    Graph g;
    auto c = ccc(g.constant({T, B}, p), g.constant({T, B}, l));
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<double> pb, lb;
        for (std::size_t t = 0; t < T; ++t) pb.push_back(p[t * B + b]), lb.push_back(l[t * B + b]);
        EXPECT_NEAR(c.value()[b], ccc(pb, lb), 1e-12);
    }
    auto fn = [](Graph&, std::span<const Var> v) { return ccc_training_term(v[0], v[1]); };
    EXPECT_LT(gradcheck(fn, {Tensor({T, B}, p), Tensor({T, B}, l)}, 1e-6), 1e-5);
}

TEST(GaussianKl, Examples) {
    EXPECT_EQ(gaussian_kl(0.3, 0.2, 0.3, 0.2), 0.0);
    EXPECT_NEAR(gaussian_kl(0, 1, 1, 1), 0.5, 1e-12);
    EXPECT_NEAR(gaussian_kl(0, 1, 0, 2), std::log(2.0) + 0.125 - 0.5, 1e-12);
    EXPECT_NEAR(gaussian_kl(0, 1, 0, 2), 0.318147, 1e-6);
    EXPECT_NEAR(gaussian_kl(0, 2, 0, 1), 0.806853, 1e-6);
    EXPECT_THROW(gaussian_kl(0, 0, 0, 1), ValidationError);
    EXPECT_THROW(gaussian_kl(0, 1, 0, -1), ValidationError);
}

TEST(GaussianKl, NonNegativeAndMatchesQuadrature) {
    Rng rng(4);
    for (int rep = 0; rep < 200; ++rep) {
        const double mp = uniform(rng, -1, 1), mq = uniform(rng, -1, 1);
        const double sp = uniform(rng, 0.05, 1.0), sq = uniform(rng, 0.05, 1.0);
        const double kl = gaussian_kl(mp, sp, mq, sq);
        EXPECT_GE(kl, 0.0);
        if (rep < 40) {
            EXPECT_NEAR(kl, kl_quadrature(mp, sp, mq, sq), 1e-6 * std::max(1.0, kl));
        }
    }
}

TEST(GaussianKl, GraphVersionMatches) {
    Graph g;
    auto v = gaussian_kl(g.constant({2}, {0.0, 0.0}), g.constant({2}, {1.0, 2.0}), g.constant({2}, {1.0, 0.0}),
                         g.constant({2}, {1.0, 1.0}));
    EXPECT_NEAR(v.value()[0], 0.5, 1e-12);
    EXPECT_NEAR(v.value()[1], 0.806853, 1e-6);
}

TEST(SampleMoments, IdenticalSamplesGiveExactZero) {
    std::vector<double> s{0.1234567, -0.3, 0.1234567, -0.3, 0.1234567, -0.3};
    auto m = sample_moments(s, 3, 2);
    EXPECT_EQ(m.std[0], 0.0);
    EXPECT_EQ(m.std[1], 0.0);
    EXPECT_EQ(m.mean[0], 0.1234567);
}

TEST(KlLabelLoss, Examples) {
    GaussianLabel same{{0.2, 0.2}, {0.5, 0.5}};
    // samples whose mean is 0.2 and unbiased sd 0.5 in both frames
    std::vector<double> s{0.2 - 0.5 / std::sqrt(2.0), 0.2 - 0.5 / std::sqrt(2.0), 0.2 + 0.5 / std::sqrt(2.0),
                          0.2 + 0.5 / std::sqrt(2.0)};
    EXPECT_NEAR(kl_label_loss(same, s, 2), 0.0, 1e-12);
    GaussianLabel lbl{{0.0}, {1.0}};
    EXPECT_NEAR(kl_label_loss(lbl, std::vector<double>{0.0, 2.0 * std::sqrt(2.0)}, 2),
                gaussian_kl(0, 1, std::sqrt(2.0), 2.0), 1e-12);
    EXPECT_THROW(kl_label_loss(lbl, std::vector<double>{0.0}, 1), ValidationError);
}

TEST(KlLabelLoss, GraphMatchesPlainAndGradchecks) {
    Rng rng(5);
    const std::size_t n = 4, T = 6, B = 1;
    auto samples = randv(n * T * B, rng, 0.3);
    std::vector<double> lm = randv(T, rng, 0.3), ls(T);
    for (auto& v : ls) v = uniform(rng, 0.05, 0.4);
    Graph g;
    auto kl = kl_label_loss(g.constant({T, B}, lm), g.constant({T, B}, ls), g.constant({n, T, B}, samples));
    EXPECT_NEAR(kl.item(), kl_label_loss(GaussianLabel{lm, ls}, samples, n), 1e-12);
    auto fn = [](Graph&, std::span<const Var> v) { return kl_label_loss(v[1], v[2], v[0]); };
    EXPECT_LT(gradcheck(fn, {Tensor({n, T, B}, samples), Tensor({T, B}, lm), Tensor({T, B}, ls)}, 1e-6), 1e-5);
}

TEST(TotalLoss, Examples) {
    EXPECT_DOUBLE_EQ(total_loss(0.3, 1.2, 0.5, 0.0).total, 1.5);
    EXPECT_DOUBLE_EQ(total_loss(0.3, 1.2, 0.5, 2.0).total, 2.5);
    EXPECT_THROW(total_loss(0.3, 1.2, 0.5, -0.1), ValidationError);
}

TEST(MedianFilter, Examples) {
    EXPECT_EQ(median_filter(std::vector<double>{1, 9, 1, 1}, 3), (std::vector<double>{5, 1, 1, 1}));
    EXPECT_EQ(median_filter(std::vector<double>{1, 9, 2, 8, 3}, 3), (std::vector<double>{5, 2, 8, 3, 5.5}));
    std::vector<double> x{0.3, -1.0, 2.0, 0.5};
    EXPECT_EQ(median_filter(x, 1), x);
    std::vector<double> c(20, 0.25);
    EXPECT_EQ(median_filter(c, 7), c);
    EXPECT_THROW(median_filter(std::vector<double>{}, 3), ValidationError);
    EXPECT_THROW(median_filter(x, 0), ValidationError);
}

TEST(MedianFilter, RemovesSingleFrameSpike) {
    std::vector<double> x(300, 0.1);
    x[150] = 5.0;
    const auto y = median_filter(x, 50);
    EXPECT_EQ(y, std::vector<double>(300, 0.1));
    EXPECT_EQ(y, median_oracle(x, 50));
}

TEST(MedianFilter, MatchesNaiveOracle) {
    Rng rng(6);
    for (int rep = 0; rep < 100; ++rep) {
        auto x = randv(static_cast<std::size_t>(uniform_int(rng, 1, 120)), rng);
        const auto w = static_cast<std::size_t>(uniform_int(rng, 1, 60));
        EXPECT_EQ(median_filter(x, w), median_oracle(x, w));
    }
}

TEST(BbbLoss, DegenerateAndPriorExamples) {
    Rng rng(7);
    auto p = nn::make_bayes_params("bbb", 2, 1, {0.0, 0.0}, {0.0, 0.0}, rng);
    const double rho_unit = std::log(std::exp(1.0) - 1.0);
    for (auto* prm : {&p.rho_w, &p.rho_b}) std::fill(prm->value.begin(), prm->value.end(), rho_unit);
    Graph g;
    std::vector<nn::WeightSchedule> sched{nn::sample_schedule(g, p, nn::Prior{}, 100, 50, rng)};
    auto loss = bbb_loss(sched, 1, g.scalar(0.75), std::size_t{1});
    EXPECT_NEAR(loss.item(), 0.75, 1e-12);
    EXPECT_THROW(bbb_loss(std::span<const nn::WeightSchedule>{}, 1, g.scalar(0.0), std::size_t{1}), ValidationError);
    EXPECT_THROW(bbb_loss(sched, 0, g.scalar(0.0), std::size_t{1}), ValidationError);
}

TEST(BbbLoss, MonteCarloComplexityMatchesClosedForm) {
    Rng rng(8);
    auto p = nn::make_bayes_params("bbb", 3, 2, {-0.5, 0.5}, {-1.5, 0.5}, rng);
    // closed form KL(q || prior) summed over all weights
    double closed = 0.0;
    auto add = [&](const Parameter& mu, const Parameter& rho) {
        for (std::size_t i = 0; i < mu.value.size(); ++i)
            closed += gaussian_kl(mu.value[i], std::log1p(std::exp(rho.value[i])), 0.0, 1.0);
    };
    add(p.mu_w, p.rho_w);
    add(p.mu_b, p.rho_b);
    const int draws = 10000;
    double acc = 0.0, acc2 = 0.0;
    Rng draw_rng(9);
    for (int i = 0; i < draws; ++i) {
        Graph g(0, false);
        std::vector<nn::WeightSchedule> sched{nn::sample_schedule(g, p, nn::Prior{}, 1, 1, draw_rng)};
        const double v = bbb_loss(sched, 1, g.scalar(0.0), std::size_t{1}).item();
        acc += v;
        acc2 += v * v;
    }
    const double mc = acc / draws;
    const double se = std::sqrt((acc2 / draws - mc * mc) / draws);
    EXPECT_LT(std::abs(mc - closed) / closed, 0.05);
    EXPECT_LT(std::abs(mc - closed), 3.0 * se);
}

TEST(BbbLoss, AveragesOverPassesAndScalesComplexity) {
    Rng rng(10);
    auto p = nn::make_bayes_params("bbb", 2, 1, {-0.5, 0.5}, {-2.0, -1.0}, rng);
    Graph g;
    std::vector<nn::WeightSchedule> sched{nn::sample_schedule(g, p, nn::Prior{}, 10, 5, rng),
                                          nn::sample_schedule(g, p, nn::Prior{}, 10, 5, rng)};
    double manual = 0.0;
    for (const auto& s : sched)
        for (const auto& d : s.draws) manual += d.log_q.item() - d.log_prior.item();
    EXPECT_NEAR(bbb_loss(sched, 2, g.scalar(1.0), std::size_t{4}).item(), manual / 2.0 / 4.0 + 1.0, 1e-10);
    EXPECT_NEAR(bbb_loss(sched, 2, g.scalar(0.0), 0.01).item(), manual / 2.0 * 0.01, 1e-10);
}

TEST(GaussianNll, MeanOverSamples) {
    Graph g;
    auto nll = gaussian_nll(g.constant({2, 1, 1}, {1.0, -1.0}), g.constant({1, 1}, {0.0}), 1.0);
    EXPECT_NEAR(nll.item(), 0.5 + 0.5 * std::log(2 * std::numbers::pi), 1e-12);
}
