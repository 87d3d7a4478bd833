#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "sda/error.hpp"
#include "sda/tensor.hpp"

// Optimizers and learning-rate schedules.
//
// One-step semantics (documented here because tests pin them):
//   SGD   buf ← momentum·buf + g
//         p   ← p − lr·(buf + weight_decay·p)
//   AdamW m ← β1·m + (1−β1)·g         m̂ = m/(1−β1^k)
//         v ← β2·v + (1−β2)·g²        v̂ = v/(1−β2^k)
//         p ← p − lr·( m̂/(√v̂ + eps) + weight_decay·p )     (decoupled decay)
// Steps are pure functions of (params, grads, slots): bit-identical reruns.

namespace sda {

struct SgdConfig {
    double lr = 1e-2;
    double momentum = 0.0;
    double weight_decay = 0.0;
};

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

template <class T>
class Sgd {
public:
    Sgd(std::vector<Tensor<T>> params, SgdConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        if (!(cfg_.lr > 0)) throw ValueError("sgd: lr must be > 0");
        if (cfg_.momentum < 0 || cfg_.momentum >= 1) throw ValueError("sgd: momentum must be in [0,1)");
        buf_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i)
            buf_[i].assign(params_[i].data().size(), T(0));
    }

    void set_lr(double lr) {
        if (!(lr > 0)) throw ValueError("sgd: lr must be > 0");
        cfg_.lr = lr;
    }
    double lr() const { return cfg_.lr; }

    void step() {
        const T lr = static_cast<T>(cfg_.lr);
        const T mu = static_cast<T>(cfg_.momentum);
        const T wd = static_cast<T>(cfg_.weight_decay);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto g = params_[i].grad();  // throws if backward did not reach this param
            check_finite(std::vector<T>(g.begin(), g.end()), "sgd step (gradient)");
            auto p = params_[i].mutable_data();
            auto& b = buf_[i];
            for (size_t k = 0; k < p.size(); ++k) {
                b[k] = mu * b[k] + g[k];
                p[k] -= lr * (b[k] + wd * p[k]);
            }
        }
    }

private:
    std::vector<Tensor<T>> params_;
    SgdConfig cfg_;
    std::vector<std::vector<T>> buf_;
};

template <class T>
class AdamW {
public:
    AdamW(std::vector<Tensor<T>> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        if (!(cfg_.lr > 0)) throw ValueError("adamw: lr must be > 0");
        if (cfg_.beta1 < 0 || cfg_.beta1 >= 1 || cfg_.beta2 < 0 || cfg_.beta2 >= 1)
            throw ValueError("adamw: betas must be in [0,1)");
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].data().size(), T(0));
            v_[i].assign(params_[i].data().size(), T(0));
        }
    }

    void set_lr(double lr) {
        if (!(lr > 0)) throw ValueError("adamw: lr must be > 0");
        cfg_.lr = lr;
    }
    double lr() const { return cfg_.lr; }
    int64_t steps_taken() const { return t_; }

    void step() {
        ++t_;
        const T lr = static_cast<T>(cfg_.lr);
        const T b1 = static_cast<T>(cfg_.beta1);
        const T b2 = static_cast<T>(cfg_.beta2);
        const T eps = static_cast<T>(cfg_.eps);
        const T wd = static_cast<T>(cfg_.weight_decay);
        const T bc1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
        const T bc2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto g = params_[i].grad();
            check_finite(std::vector<T>(g.begin(), g.end()), "adamw step (gradient)");
            auto p = params_[i].mutable_data();
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t k = 0; k < p.size(); ++k) {
                m[k] = b1 * m[k] + (T(1) - b1) * g[k];
                v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
                T mh = m[k] / bc1;
                T vh = v[k] / bc2;
                p[k] -= lr * (mh / (std::sqrt(vh) + eps) + wd * p[k]);
            }
        }
    }

private:
    std::vector<Tensor<T>> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<T>> m_, v_;
    int64_t t_ = 0;
};

// ---------------------------------------------------------------- lr schedule

enum class LrKind { constant, step_decay, cosine };

struct LrSchedule {
    LrKind kind = LrKind::constant;
    double base_lr = 1e-3;
    int total_epochs = 1;
    int warmup_epochs = 0;  // linear ramp: lr(e) = base·(e+1)/warmup for e < warmup
    int step_epoch = 0;     // step_decay only
    double gamma = 0.1;     // step_decay only
};

inline double lr_at(const LrSchedule& s, int epoch) {
    if (epoch < 0 || epoch >= s.total_epochs) throw ValueError("lr_at: epoch out of range");
    if (!(s.base_lr > 0)) throw ValueError("lr_at: base_lr must be > 0");
    if (s.warmup_epochs < 0 || s.warmup_epochs >= s.total_epochs)
        throw ValueError("lr_at: warmup must fit inside total_epochs");
    if (epoch < s.warmup_epochs)
        return s.base_lr * (epoch + 1) / static_cast<double>(s.warmup_epochs);
    switch (s.kind) {
        case LrKind::constant:
            return s.base_lr;
        case LrKind::step_decay:
            return epoch >= s.step_epoch ? s.base_lr * s.gamma : s.base_lr;
        case LrKind::cosine: {
            // phase 0 at the first post-warmup epoch; would reach 0 exactly at total_epochs
            double span = static_cast<double>(s.total_epochs - s.warmup_epochs);
            double phase = (epoch - s.warmup_epochs) / span;
            return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * phase));
        }
    }
    throw ValueError("lr_at: unknown schedule kind");
}

}  // namespace sda
