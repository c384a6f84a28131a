#include <gtest/gtest.h>

#include <cmath>

#include "bnnser/gradcheck.hpp"
#include "bnnser/layers.hpp"

using namespace bnnser;
using namespace bnnser::ad;
using namespace bnnser::nn;

namespace {

std::vector<double> randn(std::size_t n, Rng& rng, double sd = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = sd * standard_normal(rng);
    return v;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Direct textbook evaluation of one LSTM cell for a single example.
void lstm_oracle(const std::vector<double>& x, const std::vector<double>& h, const std::vector<double>& c,
                 const std::vector<double>& w_ih, const std::vector<double>& w_hh, const std::vector<double>& b,
                 std::size_t H, std::vector<double>& h_out, std::vector<double>& c_out) {
    const std::size_t in = x.size();
    h_out.assign(H, 0.0);
    c_out.assign(H, 0.0);
    for (std::size_t j = 0; j < H; ++j) {
        double pre[4];
        for (std::size_t gate = 0; gate < 4; ++gate) {
            const std::size_t col = gate * H + j;
            double z = b[col];
            for (std::size_t k = 0; k < in; ++k) z += x[k] * w_ih[k * 4 * H + col];
            for (std::size_t k = 0; k < H; ++k) z += h[k] * w_hh[k * 4 * H + col];
            pre[gate] = z;
        }
        const double i = sig(pre[0]), f = sig(pre[1]), g = std::tanh(pre[2]), o = sig(pre[3]);
        c_out[j] = f * c[j] + i * g;
        h_out[j] = o * std::tanh(c_out[j]);
    }
}

BayesParams small_params(std::size_t in, std::size_t out, Rng& rng) {
    return make_bayes_params("bbb", in, out, {-0.5, 0.5}, {-3.0, -2.0}, rng);
}

}  // namespace

TEST(Lstm, ZeroEverythingGivesZeroState) {
    Rng rng(1);
    LstmLayer layer("lstm", 3, 4, rng);
    for (auto* p : layer.parameters()) std::fill(p->value.begin(), p->value.end(), 0.0);
    Graph g;
    auto state = layer.zero_state(g, 2);
    auto next = lstm_step(g.constant({2, 3}, std::vector<double>(6, 0.0)), state, layer.bind(g));
    for (double v : next.h.value()) EXPECT_EQ(v, 0.0);
    for (double v : next.c.value()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, StepMatchesDirectFormula) {
    Rng rng(2);
    const std::size_t in = 5, H = 6;
    LstmLayer layer("lstm", in, H, rng);
    auto x = randn(in, rng), h = randn(H, rng, 0.5), c = randn(H, rng, 0.5);
    Graph g;
    auto next = lstm_step(g.constant({1, in}, x), {g.constant({1, H}, h), g.constant({1, H}, c)}, layer.bind(g));
    std::vector<double> h_ref, c_ref;
    lstm_oracle(x, h, c, layer.w_ih.value, layer.w_hh.value, layer.bias.value, H, h_ref, c_ref);
    for (std::size_t j = 0; j < H; ++j) {
        EXPECT_NEAR(next.h.value()[j], h_ref[j], 1e-12);
        EXPECT_NEAR(next.c.value()[j], c_ref[j], 1e-12);
    }
}

TEST(Lstm, ForgetGateBiasStartsAtOne) {
    Rng rng(3);
    LstmLayer layer("lstm", 2, 3, rng);
    for (std::size_t j = 3; j < 6; ++j) EXPECT_EQ(layer.bias.value[j], 1.0);
}

TEST(Lstm, StepGradcheckAllWeights) {
    Rng rng(4);
    const std::size_t in = 3, H = 4, B = 2;
    std::vector<Tensor> point = {Tensor({B, in}, randn(B * in, rng)),         Tensor({B, H}, randn(B * H, rng, 0.5)),
                                 Tensor({B, H}, randn(B * H, rng, 0.5)),      Tensor({in, 4 * H}, randn(in * 4 * H, rng, 0.5)),
                                 Tensor({H, 4 * H}, randn(H * 4 * H, rng, 0.5)), Tensor({4 * H}, randn(4 * H, rng, 0.5))};
    auto fn = [H](Graph&, std::span<const Var> v) {
        auto s = lstm_step(v[0], {v[1], v[2]}, {v[3], v[4], v[5], H});
        return concat({s.h, s.c}, 0);
    };
    EXPECT_LT(gradcheck(fn, point, 1e-6), 1e-5);
}

TEST(Lstm, RunProcessesTimeMajorRows) {
    Rng rng(5);
    LstmLayer layer("lstm", 2, 3, rng);
    const std::size_t T = 4, B = 2;
    auto xs = randn(T * B * 2, rng);
    Graph g;
    auto state = layer.zero_state(g, B);
    auto out = layer.run(g, g.constant({T * B, 2}, xs), B, state);
    EXPECT_EQ(out.shape(), (Shape{T * B, 3}));
    // sequence b=1 alone must match its rows in the batched run
    std::vector<double> single;
    for (std::size_t t = 0; t < T; ++t) single.insert(single.end(), xs.begin() + (t * B + 1) * 2, xs.begin() + (t * B + 2) * 2);
    Graph g2;
    auto st2 = layer.zero_state(g2, 1);
    auto out2 = layer.run(g2, g2.constant({T, 2}, single), 1, st2);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.value()[(t * B + 1) * 3 + j], out2.value()[t * 3 + j], 1e-15);
}

TEST(ConvBlock, OutputShape) {
    Rng rng(6);
    ConvBlock block("c", 1, 4, 8, 10, rng);
    Graph g;
    auto y = block.forward(g, g.constant({3, 1, 640}, randn(3 * 640, rng)));
    EXPECT_EQ(y.shape(), (Shape{3, 4, 64}));
}

TEST(BayesLinear, DegeneratePosteriorEqualsDenseLayer) {
    Rng rng(7);
    auto p = small_params(4, 3, rng);
    std::fill(p.rho_w.value.begin(), p.rho_w.value.end(), -1e4);
    std::fill(p.rho_b.value.begin(), p.rho_b.value.end(), -1e4);
    Dense dense("d", 4, 3, rng);
    dense.weight.value = p.mu_w.value;
    dense.bias.value = p.mu_b.value;
    auto x = randn(8, rng);
    Graph g;
    auto in = g.constant({2, 4}, x);
    auto d = sample_weights(g, p, Prior{}, rng, false);
    auto sampled = linear(in, d.w, d.b);
    auto det = dense.forward(g, in);
    auto mean = bayes_linear_mean(g, in, p);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(sampled.value()[i], det.value()[i]);
        EXPECT_EQ(mean.value()[i], det.value()[i]);
    }
}

TEST(BayesLinear, StandardNormalLogDensityAtZero) {
    Graph g;
    auto lq = nn::detail::gaussian_log_density(g.scalar(0.0), g.scalar(0.0), g.scalar(1.0));
    EXPECT_NEAR(lq.item(), -0.918939, 1e-6);
    EXPECT_NEAR(lq.item(), -0.5 * std::log(2.0 * std::numbers::pi), 1e-15);
    EXPECT_NEAR(nn::detail::prior_log_density(g.scalar(0.0), Prior{}).item(), lq.item(), 1e-15);
}

TEST(BayesLinear, PosteriorEqualToPriorHasZeroComplexity) {
    Rng rng(8);
    auto p = small_params(5, 3, rng);
    const double rho_unit = std::log(std::exp(1.0) - 1.0);
    for (auto* prm : {&p.mu_w, &p.mu_b}) std::fill(prm->value.begin(), prm->value.end(), 0.0);
    for (auto* prm : {&p.rho_w, &p.rho_b}) std::fill(prm->value.begin(), prm->value.end(), rho_unit);
    for (int rep = 0; rep < 20; ++rep) {
        Graph g;
        auto s = bayes_linear_sample(g, g.constant({1, 5}, randn(5, rng)), p, Prior{}, rng);
        EXPECT_NEAR(s.log_q.item() - s.log_prior.item(), 0.0, 1e-12);
    }
}

TEST(BayesLinear, MeanForwardMatchesMatrixOracle) {
    Rng rng(9);
    auto p = small_params(4, 3, rng);
    auto x = randn(2 * 4, rng);
    Graph g;
    auto y = bayes_linear_mean(g, g.constant({2, 4}, x), p);
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t j = 0; j < 3; ++j) {
            double ref = p.mu_b.value[j];
            for (std::size_t k = 0; k < 4; ++k) ref += x[r * 4 + k] * p.mu_w.value[k * 3 + j];
            EXPECT_NEAR(y.value()[r * 3 + j], ref, 1e-12);
        }
    Graph g0;
    auto y0 = bayes_linear_mean(g0, g0.constant({1, 4}, std::vector<double>(4, 0.0)), p);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y0.value()[j], p.mu_b.value[j]);
}

TEST(BayesLinear, ReparameterizationGradcheck) {
    Rng rng(10);
    auto p = small_params(3, 2, rng);
    std::vector<Tensor> point = {Tensor({2, 3}, randn(6, rng)), Tensor(p.mu_w.shape, p.mu_w.value),
                                 Tensor(p.rho_w.shape, p.rho_w.value), Tensor(p.mu_b.shape, p.mu_b.value),
                                 Tensor(p.rho_b.shape, p.rho_b.value)};
    auto fn = [](Graph& g, std::span<const Var> v) {
        BayesBinding b{v[1], v[2], v[3], v[4], softplus(v[2]), softplus(v[4])};
        auto d = sample_weights(g, b, Prior{}, g.rng(), true);
        return concat({reshape(linear(v[0], d.w, d.b), {4}), d.log_q, d.log_prior}, 0);
    };
    EXPECT_LT(gradcheck(fn, point, 1e-6, 1234), 1e-5);
}

TEST(BayesLinear, EmpiricalMeanConvergesToMeanWeights) {
    Rng rng(11);
    auto p = make_bayes_params("bbb", 3, 2, {-0.5, 0.5}, {-1.0, 0.0}, rng);
    const std::vector<double> x{0.7, -1.2, 0.4};
    Graph gm;
    auto mean_out = bayes_linear_mean(gm, gm.constant({1, 3}, x), p);
    const int draws = 100000;
    std::vector<double> s1(2, 0.0), s2(2, 0.0);
    Rng draw_rng(12);
    for (int i = 0; i < draws; ++i) {
        Graph g(0, false);
        auto d = sample_weights(g, p, Prior{}, draw_rng, false);
        auto y = linear(g.constant({1, 3}, x), d.w, d.b);
        for (std::size_t j = 0; j < 2; ++j) {
            s1[j] += y.value()[j];
            s2[j] += y.value()[j] * y.value()[j];
        }
    }
    for (std::size_t j = 0; j < 2; ++j) {
        const double m = s1[j] / draws;
        const double sd = std::sqrt(s2[j] / draws - m * m);
        EXPECT_LT(std::abs(m - mean_out.value()[j]), 3.0 * sd / std::sqrt(static_cast<double>(draws)));
    }
}

TEST(Schedule, DrawCounts) {
    Rng rng(13);
    auto p = small_params(2, 1, rng);
    Graph g;
    EXPECT_EQ(sample_schedule(g, p, Prior{}, 300, 50, rng).draws.size(), 6u);
    EXPECT_EQ(sample_schedule(g, p, Prior{}, 50, 50, rng).draws.size(), 1u);
    auto s = sample_schedule(g, p, Prior{}, 51, 50, rng);
    EXPECT_EQ(s.draws.size(), 2u);
    EXPECT_EQ(s.draw_for_frame(50), 1u);
    EXPECT_EQ(s.draw_for_frame(49), 0u);
    EXPECT_THROW(s.draw_for_frame(51), ShapeError);
    EXPECT_THROW(sample_schedule(g, p, Prior{}, 0, 50, rng), ValidationError);
}

TEST(Schedule, MappingIsPiecewiseConstantWithBreaksAtMultiplesOfWindow) {
    Rng rng(14);
    auto p = small_params(2, 1, rng);
    for (std::size_t b : {1u, 3u, 7u, 50u}) {
        for (std::size_t T : {1u, 10u, 99u, 300u}) {
            Graph g;
            auto s = sample_schedule(g, p, Prior{}, T, b, rng, false);
            EXPECT_EQ(s.draws.size(), (T + b - 1) / b);
            for (std::size_t t = 1; t < T; ++t) {
                const bool changes = s.draw_for_frame(t) != s.draw_for_frame(t - 1);
                EXPECT_EQ(changes, t % b == 0);
            }
            EXPECT_EQ(s.draw_for_frame(T - 1), s.draws.size() - 1);
        }
    }
}
