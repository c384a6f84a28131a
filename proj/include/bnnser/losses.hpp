#pragma once

// Objectives and evaluation metrics: concordance correlation, the Gaussian
// label KL, the Monte-Carlo ELBO, the combined training loss, and median
// post-filtering. Most functions come in two flavours: plain (metrics, on
// spans) and graph-valued (training terms, differentiable).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "bnnser/autodiff.hpp"
#include "bnnser/labels.hpp"
#include "bnnser/layers.hpp"

namespace bnnser {

using ad::Graph;
using ad::Var;

// ---------------------------------------------------------------------------
// Concordance correlation coefficient
// ---------------------------------------------------------------------------

/// 2 cov(x,y) / (var x + var y + (mean x - mean y)^2), population moments.
/// Two identical constant sequences give 1.
inline double ccc(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ValidationError("ccc: length mismatch");
    if (x.size() < 2) throw ValidationError("ccc needs at least two frames");
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double vx = 0.0, vy = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        vx += dx * dx;
        vy += dy * dy;
        cov += dx * dy;
    }
    vx /= n;
    vy /= n;
    cov /= n;
    const double denom = vx + vy + (mx - my) * (mx - my);
    if (denom == 0.0) return 1.0;
    return 2.0 * cov / denom;
}

/// Per-column CCC of [T,B] graph tensors -> [B].
inline Var ccc(Var pred, Var label) {
    if (pred.shape() != label.shape() || pred.shape().size() != 2)
        throw ShapeError("ccc: expected matching [T,B] tensors");
    if (pred.shape()[0] < 2) throw ValidationError("ccc needs at least two frames");
    Var mp = ad::mean(pred, 0), ml = ad::mean(label, 0);
    Var dp = pred - mp, dl = label - ml;
    Var vp = ad::mean(ad::square(dp), 0), vl = ad::mean(ad::square(dl), 0);
    Var cov = ad::mean(dp * dl, 0);
    return ad::scale(cov, 2.0) / (vp + vl + ad::square(mp - ml));
}

/// 1 - CCC, averaged over the B sequences of a [T,B] batch.
inline Var ccc_training_term(Var pred, Var label) { return 1.0 - ad::mean(ccc(pred, label)); }

inline double ccc_training_term(std::span<const double> pred, std::span<const double> label) {
    return 1.0 - ccc(label, pred);
}

// ---------------------------------------------------------------------------
// Gaussian KL, KL(N(mu_p, sd_p) || N(mu_q, sd_q))
// ---------------------------------------------------------------------------

inline double gaussian_kl(double mu_p, double sd_p, double mu_q, double sd_q) {
    if (!(sd_p > 0.0) || !(sd_q > 0.0)) throw ValidationError("gaussian_kl needs positive standard deviations");
    const double d = mu_p - mu_q;
    return std::log(sd_q / sd_p) + (sd_p * sd_p + d * d) / (2.0 * sd_q * sd_q) - 0.5;
}

/// Elementwise graph version.
inline Var gaussian_kl(Var mu_p, Var sd_p, Var mu_q, Var sd_q) {
    Var num = ad::square(sd_p) + ad::square(mu_p - mu_q);
    return ad::shift(ad::log(sd_q) - ad::log(sd_p) + num / ad::scale(ad::square(sd_q), 2.0), -0.5);
}

/// Per-frame mean and unbiased standard deviation of `n` sample rows of length T.
/// The spread is accumulated relative to the first sample, so identical rows give exactly 0.
struct SampleMoments {
    std::vector<double> mean;
    std::vector<double> std;
};

inline SampleMoments sample_moments(std::span<const double> samples, std::size_t n, std::size_t frames) {
    if (n < 2) throw ValidationError("sample moments need at least 2 samples");
    if (samples.size() != n * frames) throw ShapeError("sample matrix size does not match n x T");
    SampleMoments r{std::vector<double>(frames), std::vector<double>(frames)};
    for (std::size_t t = 0; t < frames; ++t) {
        const double ref = samples[t];
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = samples[i * frames + t] - ref;
            s1 += d;
            s2 += d * d;
        }
        const double nn = static_cast<double>(n);
        r.mean[t] = ref + s1 / nn;
        r.std[t] = std::sqrt(std::max(0.0, (s2 - s1 * s1 / nn) / (nn - 1.0)));
    }
    return r;
}

/// Mean over frames of KL(label_t || N(sample mean_t, sample std_t)); samples is n x T row-major.
inline double kl_label_loss(const GaussianLabel& labels, std::span<const double> samples, std::size_t n,
                            double s_min = kMinLabelStd) {
    const std::size_t T = labels.size();
    if (n < 2) throw ValidationError("kl_label_loss needs n >= 2 stochastic outputs");
    const auto mom = sample_moments(samples, n, T);
    double acc = 0.0;
    for (std::size_t t = 0; t < T; ++t)
        acc += gaussian_kl(labels.m[t], std::max(labels.s[t], s_min), mom.mean[t], std::max(mom.std[t], s_min));
    return acc / static_cast<double>(T);
}

/// Graph version. samples [n,T,B]; label_m / label_s [T,B]. Uses the sample
/// mean and unbiased sample std across the n outputs, std floored at s_min.
inline Var kl_label_loss(Var label_m, Var label_s, Var samples, double s_min = kMinLabelStd) {
    if (samples.shape().empty() || samples.shape()[0] < 2)
        throw ValidationError("kl_label_loss needs n >= 2 stochastic outputs");
    Var m_hat = ad::mean(samples, 0);
    Var s_hat = ad::clamp_min(ad::sqrt(ad::variance(samples, 0, true)), s_min);
    if (m_hat.shape() != label_m.shape()) throw ShapeError("kl_label_loss: label and prediction frames differ");
    return ad::mean(gaussian_kl(label_m, ad::clamp_min(label_s, s_min), m_hat, s_hat));
}

// ---------------------------------------------------------------------------
// ELBO
// ---------------------------------------------------------------------------

/// Gaussian negative log-likelihood of the targets under N(y_hat, sigma_obs),
/// averaged over every sample and frame. samples [n,T,B], target [T,B].
inline Var gaussian_nll(Var samples, Var target, double sigma_obs) {
    if (!(sigma_obs > 0.0)) throw ValidationError("sigma_obs must be positive");
    const double c = std::log(sigma_obs) + 0.5 * std::log(2.0 * std::numbers::pi);
    return ad::shift(ad::scale(ad::mean(ad::square(samples - target)), 0.5 / (sigma_obs * sigma_obs)), c);
}

/// (1/n) * sum over every draw of every pass of (log q - log P), times
/// `complexity_scale` (1 / minibatches per epoch for the standard minibatch
/// weighting), plus the caller's data-fit term.
inline Var bbb_loss(std::span<const nn::WeightSchedule> schedules, std::size_t passes, Var data_fit,
                    double complexity_scale) {
    if (schedules.empty()) throw ValidationError("bbb_loss: no weight schedules");
    if (passes == 0) throw ValidationError("bbb_loss: passes must be positive");
    std::vector<Var> terms;
    for (const auto& s : schedules) {
        if (s.draws.empty()) throw ValidationError("bbb_loss: empty weight schedule");
        for (const auto& d : s.draws) {
            if (!d.log_q.valid() || !d.log_prior.valid()) throw ValidationError("bbb_loss: draw lacks log densities");
            terms.push_back(d.log_q - d.log_prior);
        }
    }
    Var complexity = ad::sum(ad::concat(terms, 0));
    return ad::scale(complexity, complexity_scale / static_cast<double>(passes)) + data_fit;
}

inline Var bbb_loss(std::span<const nn::WeightSchedule> schedules, std::size_t passes, Var data_fit,
                    std::size_t minibatches_per_epoch) {
    if (minibatches_per_epoch == 0) throw ValidationError("bbb_loss: minibatches per epoch must be positive");
    return bbb_loss(schedules, passes, data_fit, 1.0 / static_cast<double>(minibatches_per_epoch));
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

struct LossBreakdown {
    double ccc_term = 0.0;
    double bbb_term = 0.0;
    double kl_term = 0.0;
    double alpha = 0.0;
    double total = 0.0;
};

inline LossBreakdown total_loss(double ccc_term, double bbb_term, double kl_term, double alpha) {
    if (!(alpha >= 0.0)) throw ValidationError("alpha must be non-negative");
    return {ccc_term, bbb_term, kl_term, alpha, ccc_term + bbb_term + alpha * kl_term};
}

// ---------------------------------------------------------------------------
// Post-processing
// ---------------------------------------------------------------------------

/// Centered sliding median. The window covers (w-1)/2 frames to the left and
/// the rest to the right, truncated at the edges; even counts average the two
/// middle values.
inline std::vector<double> median_filter(std::span<const double> seq, std::size_t window) {
    if (seq.empty()) throw ValidationError("median_filter: empty sequence");
    if (window == 0) throw ValidationError("median_filter: window must be >= 1");
    const std::size_t left = (window - 1) / 2, right = window - 1 - left;
    std::vector<double> out(seq.size()), buf;
    buf.reserve(window);
    for (std::size_t t = 0; t < seq.size(); ++t) {
        const std::size_t lo = t >= left ? t - left : 0;
        const std::size_t hi = std::min(seq.size(), t + right + 1);
        buf.assign(seq.begin() + static_cast<std::ptrdiff_t>(lo), seq.begin() + static_cast<std::ptrdiff_t>(hi));
        const std::size_t k = buf.size() / 2;
        std::nth_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(k), buf.end());
        double med = buf[k];
        if (buf.size() % 2 == 0) {
            const double below = *std::max_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(k));
            med = 0.5 * (below + med);
        }
        out[t] = med;
    }
    return out;
}

}  // namespace bnnser
