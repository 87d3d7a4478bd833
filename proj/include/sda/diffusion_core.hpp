#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <vector>

#include "sda/data_forge.hpp"
#include "sda/error.hpp"
#include "sda/models.hpp"
#include "sda/optim.hpp"
#include "sda/rng.hpp"
#include "sda/tensor.hpp"

// DDPM core: the noise schedule, forward processes, the ε-prediction training
// objective, classifier-free guidance, the ancestral reverse sampler, and the
// analytic-Gaussian oracle used to verify the sampler against closed-form
// moments. All schedule quantities are kept in double precision.
//
// Convention: diffusion operates on [-1,1]-rescaled images; timestep t runs
// 1..T (array index t-1); σ_t² = β_t·(1-ᾱ_{t-1})/(1-ᾱ_t) with ᾱ_0 := 1, so
// σ_1 = 0 and the t=1 reverse step is deterministic.

namespace sda {

struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta, alpha, abar, abar_prev, sigma;

    void check_t(int t) const {
        if (t < 1 || t > T) throw ValueError("timestep out of range 1..T");
    }
};

inline NoiseSchedule make_schedule(int T = 100, double beta_min = 0.001, double beta_max = 0.2) {
    if (T < 2) throw ValueError("make_schedule: T must be >= 2");
    if (!(beta_min > 0) || !(beta_min <= beta_max) || !(beta_max < 1))
        throw ValueError("make_schedule: need 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.abar.resize(static_cast<size_t>(T));
    s.abar_prev.resize(static_cast<size_t>(T));
    s.sigma.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        s.beta[static_cast<size_t>(i)] = beta_min + (beta_max - beta_min) * i / (T - 1);
        s.alpha[static_cast<size_t>(i)] = 1.0 - s.beta[static_cast<size_t>(i)];
        s.abar_prev[static_cast<size_t>(i)] = prod;
        prod *= s.alpha[static_cast<size_t>(i)];
        s.abar[static_cast<size_t>(i)] = prod;
        s.sigma[static_cast<size_t>(i)] =
            std::sqrt(s.beta[static_cast<size_t>(i)] * (1.0 - s.abar_prev[static_cast<size_t>(i)]) /
                      (1.0 - s.abar[static_cast<size_t>(i)]));
    }
    if (s.abar.back() >= 1e-3)
        std::fprintf(stderr, "warning: schedule abar_T = %.3e >= 1e-3 (short schedule?)\n",
                     s.abar.back());
    return s;
}

// ---------------------------------------------------------------- forward

// Eq. 1 single step: x_t = sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps
template <class T>
std::vector<T> forward_step(const std::vector<T>& x_prev, int t, const std::vector<T>& eps,
                            const NoiseSchedule& s) {
    s.check_t(t);
    if (x_prev.size() != eps.size()) throw ShapeError("forward_step: eps shape mismatch");
    const T a = static_cast<T>(std::sqrt(1.0 - s.beta[static_cast<size_t>(t - 1)]));
    const T b = static_cast<T>(std::sqrt(s.beta[static_cast<size_t>(t - 1)]));
    std::vector<T> out(x_prev.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a * x_prev[i] + b * eps[i];
    return out;
}

// Eq. 2 marginal: x_t = sqrt(abar_t) x_0 + sqrt(1-abar_t) eps
template <class T>
std::vector<T> forward_marginal(const std::vector<T>& x0, int t, const std::vector<T>& eps,
                                const NoiseSchedule& s) {
    s.check_t(t);
    if (x0.size() != eps.size()) throw ShapeError("forward_marginal: eps shape mismatch");
    const T a = static_cast<T>(std::sqrt(s.abar[static_cast<size_t>(t - 1)]));
    const T b = static_cast<T>(std::sqrt(1.0 - s.abar[static_cast<size_t>(t - 1)]));
    std::vector<T> out(x0.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

// ---------------------------------------------------------------- reverse

// Eq. 4 step: x_{t-1} = (x_t - ((1-alpha_t)/sqrt(1-abar_t)) eps_hat)/sqrt(alpha_t) + sigma_t z;
// z is ignored at t=1 (sigma_1 = 0 convention makes the last step deterministic)
template <class T>
std::vector<T> reverse_step(const std::vector<T>& x_t, int t, const std::vector<T>& eps_hat,
                            const NoiseSchedule& s, const std::vector<T>* z) {
    s.check_t(t);
    if (x_t.size() != eps_hat.size()) throw ShapeError("reverse_step: eps shape mismatch");
    const size_t ti = static_cast<size_t>(t - 1);
    const T coef = static_cast<T>((1.0 - s.alpha[ti]) / std::sqrt(1.0 - s.abar[ti]));
    const T inv_sqrt_a = static_cast<T>(1.0 / std::sqrt(s.alpha[ti]));
    const T sig = static_cast<T>(s.sigma[ti]);
    std::vector<T> out(x_t.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = inv_sqrt_a * (x_t[i] - coef * eps_hat[i]);
    if (t > 1) {
        if (!z || z->size() != x_t.size()) throw ShapeError("reverse_step: z required for t > 1");
        for (size_t i = 0; i < out.size(); ++i) out[i] += sig * (*z)[i];
    }
    return out;
}

// ---------------------------------------------------------------- CFG

// eps_hat = eps(null) + w (eps(y) - eps(null)); at w=1 the null branch is
// skipped entirely so the identity with the conditional branch is bit-exact
template <class T, class Model>
Tensor<T> cfg_epsilon(const Model& m, const Tensor<T>& x_t, const std::vector<int>& t,
                      const std::vector<int>& y, double w) {
    if (w < 0) throw ValueError("cfg_epsilon: w must be >= 0");
    for (int yi : y)
        if (yi < 0 || yi >= kNumClasses) throw ValueError("cfg_epsilon: label out of range");
    if (w == 1.0) return m.epsilon(x_t, t, &y);
    std::vector<int> null_y(y.size(), kNumClasses);
    auto eps_null = m.epsilon(x_t, t, &null_y);
    if (w == 0.0) return eps_null;
    auto eps_y = m.epsilon(x_t, t, &y);
    return add(eps_null, mul_scalar(sub(eps_y, eps_null), static_cast<T>(w)));
}

// ---------------------------------------------------------------- loss

// deterministic core: everything explicit, Model is any eps-predictor
// exposing epsilon(x, t, y*) — test stubs plug in here
template <class T, class Model>
Tensor<T> diffusion_loss_with(const Model& m, const Tensor<T>& x0, const std::vector<int>* y,
                              const std::vector<int>& t, const Tensor<T>& eps,
                              const NoiseSchedule& s) {
    const auto& sh = x0.shape();
    if (sh.size() != 4) throw ShapeError("diffusion_loss: x0 must be [B,1,H,W]");
    const int B = sh[0];
    if (B < 1) throw ValueError("diffusion_loss: empty batch");
    if (static_cast<int>(t.size()) != B || eps.shape() != sh)
        throw ShapeError("diffusion_loss: t/eps shape mismatch");
    const int64_t item = x0.numel() / B;

    // x_t assembled outside the graph (it is data, not a differentiable path)
    std::vector<T> xt(static_cast<size_t>(x0.numel()));
    for (int i = 0; i < B; ++i) {
        s.check_t(t[static_cast<size_t>(i)]);
        const size_t ti = static_cast<size_t>(t[static_cast<size_t>(i)] - 1);
        const T a = static_cast<T>(std::sqrt(s.abar[ti]));
        const T b = static_cast<T>(std::sqrt(1.0 - s.abar[ti]));
        for (int64_t k = 0; k < item; ++k) {
            size_t off = static_cast<size_t>(i) * item + static_cast<size_t>(k);
            xt[off] = a * x0.data()[off] + b * eps.data()[off];
        }
    }
    auto xt_t = Tensor<T>::from(sh, std::move(xt));
    auto pred = m.epsilon(xt_t, t, y);
    auto d = sub(pred, eps);
    // mean over batch of per-item sum of squares
    return mul_scalar(sum_all(mul(d, d)), static_cast<T>(1.0 / B));
}

// stochastic wrapper: draws per-item t ~ U[1,T], eps ~ N(0,I), and (for
// conditional training) null-label dropout with probability p_drop
template <class T>
Tensor<T> diffusion_loss(const Denoiser<T>& m, const Tensor<T>& x0, const std::vector<int>* y,
                         const NoiseSchedule& s, Rng& rng, double p_drop = 0.1) {
    const int B = x0.shape().at(0);
    if (B < 1) throw ValueError("diffusion_loss: empty batch");
    std::vector<int> t(static_cast<size_t>(B));
    for (auto& v : t) v = rng.range(1, s.T);
    auto eps = Tensor<T>::randn(x0.shape(), rng);
    if (m.conditional) {
        if (!y) throw ValueError("diffusion_loss: conditional model needs labels");
        std::vector<int> yd = *y;
        for (auto& v : yd)
            if (rng.uniform() < p_drop) v = kNumClasses;
        return diffusion_loss_with(m, x0, &yd, t, eps, s);
    }
    if (y) throw ValueError("diffusion_loss: unconditional model rejects labels");
    return diffusion_loss_with(m, x0, nullptr, t, eps, s);
}

// ---------------------------------------------------------------- sampling

// Generic ancestral chain over a flat state vector. eps_fn(x, t) returns the
// ε̂ for state x at step t; the chain starts at x_T ~ N(0,I) and applies
// reverse_step down to t=1. Noise order per sample: dim draws for x_T, then
// dim draws of z per step T..2 — all from the caller's rng, so a per-sample
// rng makes the chain independent of any batching or evaluation order.
template <class T, class EpsFn>
std::vector<T> ancestral_chain(int dim, const NoiseSchedule& s, EpsFn&& eps_fn, Rng& rng) {
    std::vector<T> x(static_cast<size_t>(dim));
    for (auto& v : x) v = static_cast<T>(rng.gaussian());
    std::vector<T> z(static_cast<size_t>(dim));
    for (int t = s.T; t >= 1; --t) {
        std::vector<T> eps = eps_fn(x, t);
        if (t > 1) {
            for (auto& v : z) v = static_cast<T>(rng.gaussian());
            x = reverse_step(x, t, eps, s, &z);
        } else {
            x = reverse_step(x, t, eps, s, static_cast<const std::vector<T>*>(nullptr));
        }
    }
    return x;
}

// model-backed ε̂ for a single image state (batch 1), optional CFG
template <class T>
std::vector<T> denoiser_epsilon_flat(const Denoiser<T>& m, const std::vector<T>& x, int t,
                                     const int* y, double w) {
    auto xt = Tensor<T>::from({1, 1, kImageH, kImageW}, std::vector<T>(x));
    std::vector<int> tv = {t};
    Tensor<T> eps;
    if (m.conditional) {
        if (!y) throw ValueError("conditional denoiser requires a label for sampling");
        std::vector<int> yv = {*y};
        eps = cfg_epsilon(m, xt, tv, yv, w);
    } else {
        if (y) throw ValueError("unconditional denoiser rejects a label");
        eps = m.epsilon(xt, tv, nullptr);
    }
    return {eps.data().begin(), eps.data().end()};
}

// full image sampler: deterministic given seed; clamps to [0,1] only at the end
template <class T>
Image sample_image(const Denoiser<T>& m, const NoiseSchedule& s, const int* y, double w,
                   uint64_t seed) {
    NoGradGuard ng;
    Rng rng(seed);
    auto xm1 = ancestral_chain<T>(
        kImagePixels, s,
        [&](const std::vector<T>& x, int t) { return denoiser_epsilon_flat(m, x, t, y, w); }, rng);
    Image out;
    for (int i = 0; i < kImagePixels; ++i) {
        double v = (std::clamp(static_cast<double>(xm1[static_cast<size_t>(i)]), -1.0, 1.0) + 1.0) / 2.0;
        out.px[static_cast<size_t>(i)] = static_cast<float>(v);
    }
    return out;
}

// ---------------------------------------------------------------- analytic oracle

// Bayes-optimal ε-predictor for Gaussian data x0 ~ N(mu0, var0 I):
// eps* = (x_t - sqrt(abar_t) E[x0|x_t]) / sqrt(1-abar_t), with the exact
// Gaussian posterior mean E[x0|x_t]. Validates the sampler without any
// learned model.
template <class T>
std::vector<T> analytic_gaussian_epsilon(double mu0, double var0, const std::vector<T>& x_t, int t,
                                         const NoiseSchedule& s) {
    if (var0 < 0) throw ValueError("analytic_gaussian_epsilon: var0 must be >= 0");
    s.check_t(t);
    const size_t ti = static_cast<size_t>(t - 1);
    const double ab = s.abar[ti];
    const double sq_ab = std::sqrt(ab);
    const double one_m = 1.0 - ab;
    // posterior: E[x0|x_t] = mu0 + sq_ab*var0/(ab*var0 + 1-ab) * (x_t - sq_ab*mu0)
    const double gain = sq_ab * var0 / (ab * var0 + one_m);
    const double inv_sq1m = 1.0 / std::sqrt(one_m);
    std::vector<T> out(x_t.size());
    for (size_t i = 0; i < x_t.size(); ++i) {
        double post_mean = mu0 + gain * (static_cast<double>(x_t[i]) - sq_ab * mu0);
        out[i] = static_cast<T>((static_cast<double>(x_t[i]) - sq_ab * post_mean) * inv_sq1m);
    }
    return out;
}

// Closed-form moments of the analytic-oracle sampling chain: the chain is
// affine-Gaussian, so mean/variance recurse exactly; this is the independent
// target the Monte-Carlo sampler test compares against.
inline std::pair<double, double> oracle_chain_moments(double mu0, double var0,
                                                      const NoiseSchedule& s) {
    double m = 0.0, v = 1.0;  // x_T ~ N(0,1)
    for (int t = s.T; t >= 1; --t) {
        const size_t ti = static_cast<size_t>(t - 1);
        const double ab = s.abar[ti];
        const double sq_ab = std::sqrt(ab);
        const double one_m = 1.0 - ab;
        const double gain = sq_ab * var0 / (ab * var0 + one_m);
        // eps* is affine in x_t: eps = c0 + c1 x_t
        const double c1 = (1.0 - sq_ab * gain) / std::sqrt(one_m);
        const double c0 = -sq_ab * (mu0 - gain * sq_ab * mu0) / std::sqrt(one_m);
        const double coef = (1.0 - s.alpha[ti]) / std::sqrt(one_m);
        const double inv_sqrt_a = 1.0 / std::sqrt(s.alpha[ti]);
        // x_{t-1} = inv_sqrt_a (x_t - coef (c0 + c1 x_t)) + sigma z
        const double A = inv_sqrt_a * (1.0 - coef * c1);
        const double B = -inv_sqrt_a * coef * c0;
        m = A * m + B;
        v = A * A * v + (t > 1 ? s.sigma[ti] * s.sigma[ti] : 0.0);
    }
    return {m, v};
}

// ---------------------------------------------------------------- training

struct DiffusionTrainConfig {
    int epochs = 40;
    int batch_size = 128;
    AdamWConfig opt{.lr = 2e-3, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 1e-6};
    double p_drop = 0.1;  // conditional label dropout
    int base = 20, emb = 32, mid_blocks = 2;
    bool verbose = false;
};

inline DiffusionTrainConfig default_cond_config() { return {}; }

inline DiffusionTrainConfig default_uncond_config() {
    DiffusionTrainConfig c;
    c.base = 12;
    c.emb = 24;
    c.mid_blocks = 1;
    return c;
}

// deterministic given seed; single-threaded
template <class T>
Denoiser<T> train_denoiser(const LabeledDataset& ds, bool conditional, const NoiseSchedule& s,
                           const DiffusionTrainConfig& cfg, uint64_t seed) {
    if (ds.size() == 0) throw ValueError("train_denoiser: empty dataset");
    Rng init_rng(Rng::derive(seed, 0xA11CE));
    Denoiser<T> m(conditional, s.T, cfg.base, cfg.emb, cfg.mid_blocks, init_rng);
    m.training_seed = seed;
    if (cfg.epochs == 0) return m;

    AdamW<T> opt(m.params(), cfg.opt);
    Rng rng(Rng::derive(seed, 0xB0B));
    const int64_t n = static_cast<int64_t>(ds.size());
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (int ep = 0; ep < cfg.epochs; ++ep) {
        // Fisher-Yates shuffle
        for (int64_t i = n - 1; i > 0; --i) {
            auto j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i + 1)));
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }
        double tot = 0;
        for (int64_t i0 = 0; i0 < n; i0 += cfg.batch_size) {
            std::vector<int64_t> idx(order.begin() + i0,
                                     order.begin() + std::min(n, i0 + cfg.batch_size));
            auto x0 = batch_to_tensor<T>(ds, idx);
            Tensor<T> loss;
            if (conditional) {
                std::vector<int> y;
                y.reserve(idx.size());
                for (int64_t j : idx) y.push_back(ds.labels[static_cast<size_t>(j)]);
                loss = diffusion_loss(m, x0, &y, s, rng, cfg.p_drop);
            } else {
                loss = diffusion_loss(m, x0, nullptr, s, rng, cfg.p_drop);
            }
            if (!std::isfinite(static_cast<double>(loss.item())))
                throw NumericError("train_denoiser: loss diverged (NaN/Inf)");
            backward(loss);
            opt.step();
            tot += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
        }
        m.epoch = ep + 1;
        if (cfg.verbose && (ep % 5 == 0 || ep == cfg.epochs - 1))
            std::fprintf(stderr, "[train-diffusion %s] epoch %d loss %.3f\n",
                         conditional ? "cond" : "uncond", ep, tot / static_cast<double>(n));
    }
    return m;
}

// deterministic held-out Eq. 3 loss: per-item (t, eps, dropout) derived from seed
template <class T>
double eval_diffusion_loss(const Denoiser<T>& m, const LabeledDataset& ds, const NoiseSchedule& s,
                           uint64_t seed, int batch_size = 128) {
    NoGradGuard ng;
    Rng rng(Rng::derive(seed, 0xE7A1));
    const int64_t n = static_cast<int64_t>(ds.size());
    double tot = 0;
    for (int64_t i0 = 0; i0 < n; i0 += batch_size) {
        std::vector<int64_t> idx;
        for (int64_t i = i0; i < std::min(n, i0 + batch_size); ++i) idx.push_back(i);
        auto x0 = batch_to_tensor<T>(ds, idx);
        Tensor<T> loss;
        if (m.conditional) {
            std::vector<int> y;
            for (int64_t j : idx) y.push_back(ds.labels[static_cast<size_t>(j)]);
            loss = diffusion_loss(m, x0, &y, s, rng, 0.1);
        } else {
            loss = diffusion_loss(m, x0, nullptr, s, rng, 0.1);
        }
        tot += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
    }
    return tot / static_cast<double>(n);
}

}  // namespace sda
