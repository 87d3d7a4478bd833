#pragma once

// Test-time adaptation: diffusion-driven target->synthetic projection
// (DiffPure/DDA analogs), the prediction ensemble, and the Tent-style
// entropy-minimization baseline.

#include <array>
#include <string>
#include <vector>

#include "sda/classifiers.hpp"
#include "sda/data_forge.hpp"
#include "sda/diffusion_core.hpp"
#include "sda/models.hpp"
#include "sda/optim.hpp"
#include "sda/parallel.hpp"
#include "sda/tensor.hpp"

namespace sda {

// Box-downsample by `factor`, then nearest-upsample back. factor=1 is identity.
inline Image low_pass(const Image& img, int factor) {
  if (factor != 1 && factor != 2 && factor != 4 && factor != 8)
    throw ValueError("low_pass: factor must be one of {1,2,4,8}");
  if (factor == 1) return img;
  Image out;
  const int side = kImageH / factor;
  for (int by = 0; by < side; ++by)
    for (int bx = 0; bx < side; ++bx) {
      double acc = 0.0;
      for (int y = 0; y < factor; ++y)
        for (int x = 0; x < factor; ++x) acc += img.at(by * factor + y, bx * factor + x);
      const float mean = (float)(acc / (factor * factor));
      for (int y = 0; y < factor; ++y)
        for (int x = 0; x < factor; ++x) out.at(by * factor + y, bx * factor + x) = mean;
    }
  return out;
}

struct PurifyConfig {
  int t_star = 50;
  bool guidance = false;
  int lowpass_factor = 4;
  const NoiseSchedule* schedule = nullptr;
};

namespace detail {

inline void low_pass_mix_flat(std::vector<float>& x, const std::vector<float>& ref, int factor) {
  // x <- x - low_pass(x) + low_pass(ref), all in flat [-1,1] space
  const int side = kImageH / factor;
  for (int by = 0; by < side; ++by)
    for (int bx = 0; bx < side; ++bx) {
      double ax = 0.0, ar = 0.0;
      for (int y = 0; y < factor; ++y)
        for (int x2 = 0; x2 < factor; ++x2) {
          const int i = (by * factor + y) * kImageW + bx * factor + x2;
          ax += x[(size_t)i];
          ar += ref[(size_t)i];
        }
      const float delta = (float)((ar - ax) / (factor * factor));
      for (int y = 0; y < factor; ++y)
        for (int x2 = 0; x2 < factor; ++x2)
          x[(size_t)(by * factor + y) * kImageW + bx * factor + x2] += delta;
    }
}

inline std::vector<float> gauss_vec(Rng& rng, int n) {
  std::vector<float> v((size_t)n);
  for (auto& e : v) e = (float)rng.gaussian();
  return v;
}

}  // namespace detail

// Noise-and-denoise projection of a target image onto the diffusion model's
// domain; optional ILVR-style low-frequency anchoring to the input.
inline Image purify(const Image& x_trg, const Denoiser<float>& m, const PurifyConfig& cfg,
                    uint64_t seed) {
  if (cfg.schedule == nullptr) throw ValueError("purify: config has no schedule");
  const NoiseSchedule& s = *cfg.schedule;
  if (cfg.t_star < 0 || cfg.t_star > s.T) throw ValueError("purify: t_star out of range");
  if (kImageH % cfg.lowpass_factor != 0)
    throw ValueError("purify: lowpass_factor must divide the image side");
  if (m.conditional) throw ValueError("purify: requires an unconditional denoiser");
  if (cfg.t_star == 0) return x_trg;

  NoGradGuard ng;
  Rng rng(seed);
  std::vector<float> xr(kImagePixels);
  for (int i = 0; i < kImagePixels; ++i) xr[(size_t)i] = 2.0f * x_trg.px[(size_t)i] - 1.0f;

  auto x = forward_marginal(xr, cfg.t_star, detail::gauss_vec(rng, kImagePixels), s);
  for (int t = cfg.t_star; t >= 1; --t) {
    auto eps = denoiser_epsilon_flat(m, x, t, nullptr, 1.0);
    if (t > 1) {
      auto z = detail::gauss_vec(rng, kImagePixels);
      x = reverse_step(x, t, eps, s, &z);
    } else {
      x = reverse_step(x, t, eps, s, (const std::vector<float>*)nullptr);
    }
    if (cfg.guidance) {
      if (t - 1 >= 1) {
        auto ref = forward_marginal(xr, t - 1, detail::gauss_vec(rng, kImagePixels), s);
        detail::low_pass_mix_flat(x, ref, cfg.lowpass_factor);
      } else {
        detail::low_pass_mix_flat(x, xr, cfg.lowpass_factor);
      }
    }
  }

  Image out;
  for (int i = 0; i < kImagePixels; ++i)
    out.px[(size_t)i] = std::clamp((x[(size_t)i] + 1.0f) / 2.0f, 0.0f, 1.0f);
  return out;
}

enum class MethodKind { source_only, diffpure, dda, sda, tent };

inline const char* method_name(MethodKind k) {
  switch (k) {
    case MethodKind::source_only: return "source";
    case MethodKind::diffpure: return "diffpure";
    case MethodKind::dda: return "dda";
    case MethodKind::sda: return "sda";
    case MethodKind::tent: return "tent";
  }
  throw ValueError("method_name: unknown kind");
}

inline MethodKind method_from_name(const std::string& name) {
  if (name == "source" || name == "source_only") return MethodKind::source_only;
  if (name == "diffpure") return MethodKind::diffpure;
  if (name == "dda") return MethodKind::dda;
  if (name == "sda") return MethodKind::sda;
  if (name == "tent") return MethodKind::tent;
  throw ValueError("unknown method: " + name);
}

struct TTAMethod {
  MethodKind kind = MethodKind::source_only;
  const Classifier<float>* source = nullptr;     // f_theta
  const Classifier<float>* synthetic = nullptr;  // f_theta' (sda only)
  const Denoiser<float>* uncond = nullptr;       // eps_phi^u
  PurifyConfig purify_cfg;
};

inline TTAMethod source_method(const Classifier<float>& src) {
  return {MethodKind::source_only, &src, nullptr, nullptr, {}};
}

inline TTAMethod diffpure_method(const Classifier<float>& src, const Denoiser<float>& unc,
                                 const NoiseSchedule& s, int t_star = 50) {
  return {MethodKind::diffpure, &src, nullptr, &unc, {t_star, false, 4, &s}};
}

inline TTAMethod dda_method(const Classifier<float>& src, const Denoiser<float>& unc,
                            const NoiseSchedule& s, int t_star = 50, int lowpass_factor = 4) {
  return {MethodKind::dda, &src, nullptr, &unc, {t_star, true, lowpass_factor, &s}};
}

inline TTAMethod sda_method(const Classifier<float>& src, const Classifier<float>& synth,
                            const Denoiser<float>& unc, const NoiseSchedule& s, int t_star = 50,
                            int lowpass_factor = 4) {
  return {MethodKind::sda, &src, &synth, &unc, {t_star, true, lowpass_factor, &s}};
}

struct Prediction {
  int label = 0;
  std::array<float, kNumClasses> probs{};
};

namespace detail {

inline Prediction from_scores(const std::vector<float>& scores) {
  Prediction p;
  double tot = 0.0;
  for (float v : scores) tot += v;
  for (int k = 0; k < kNumClasses; ++k) {
    p.probs[(size_t)k] = (float)(scores[(size_t)k] / tot);
    if (scores[(size_t)k] > scores[(size_t)p.label]) p.label = k;  // ties: lowest index
  }
  return p;
}

}  // namespace detail

// Combination step given an already-purified image (nullptr for methods that
// don't use one). predict() routes through here, so drivers that compute one
// purified image and feed several methods stay bit-identical with predict().
inline Prediction predict_purified(const TTAMethod& method, const Image& x_trg,
                                   const Image* x_syn) {
  if (method.source == nullptr) throw ValueError("predict: missing source classifier");
  switch (method.kind) {
    case MethodKind::source_only:
      return detail::from_scores(classify(*method.source, x_trg));
    case MethodKind::diffpure: {
      if (x_syn == nullptr) throw ValueError("predict: diffpure needs a purified image");
      return detail::from_scores(classify(*method.source, *x_syn));
    }
    case MethodKind::dda: {
      if (x_syn == nullptr) throw ValueError("predict: dda needs a purified image");
      auto p1 = classify(*method.source, x_trg);
      auto p2 = classify(*method.source, *x_syn);
      for (int k = 0; k < kNumClasses; ++k) p1[(size_t)k] += p2[(size_t)k];
      return detail::from_scores(p1);
    }
    case MethodKind::sda: {
      if (x_syn == nullptr) throw ValueError("predict: sda needs a purified image");
      if (method.synthetic == nullptr)
        throw ValueError("predict: sda needs the fine-tuned classifier");
      auto p1 = classify(*method.source, x_trg);
      auto p2 = classify(*method.synthetic, *x_syn);
      for (int k = 0; k < kNumClasses; ++k) p1[(size_t)k] += p2[(size_t)k];
      return detail::from_scores(p1);
    }
    case MethodKind::tent:
      throw ValueError("predict: tent is stream-based; use tent_adapt_stream");
  }
  throw ValueError("predict: unknown method kind");
}

// One-sample prediction. Purification noise comes from `seed`; callers
// evaluating a stream derive per-sample seeds as Rng::derive(seed, index).
inline Prediction predict(const TTAMethod& method, const Image& x_trg, uint64_t seed) {
  if (method.source == nullptr) throw ValueError("predict: missing source classifier");
  if (method.kind == MethodKind::source_only) return predict_purified(method, x_trg, nullptr);
  if (method.kind == MethodKind::tent)
    throw ValueError("predict: tent is stream-based; use tent_adapt_stream");
  if (method.uncond == nullptr) throw ValueError("predict: method needs a denoiser");
  auto x_syn = purify(x_trg, *method.uncond, method.purify_cfg, seed);
  return predict_purified(method, x_trg, &x_syn);
}

// Parallel map of predict over a dataset; per-sample seeds Rng::derive(seed, i).
inline std::vector<Prediction> predict_dataset(const TTAMethod& method, const LabeledDataset& ds,
                                               uint64_t seed, int threads = 0) {
  std::vector<Prediction> out(ds.images.size());
  parallel_for((int64_t)ds.images.size(), [&](int64_t i) {
    out[(size_t)i] = predict(method, ds.images[(size_t)i], Rng::derive(seed, (uint64_t)i));
  }, threads);
  return out;
}

inline double accuracy_of(const std::vector<Prediction>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size() || preds.empty())
    throw ValueError("accuracy_of: size mismatch");
  int hits = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i].label == labels[i]) ++hits;
  return (double)hits / (double)preds.size();
}

// Entropy-minimization baseline: walks the stream in order, emits the
// prediction for each batch before updating the head's affine parameters.
// Inherently sequential; depends on stream order and batch size by design.
inline std::vector<Prediction> tent_adapt_stream(const Classifier<float>& source,
                                                 const std::vector<Image>& stream,
                                                 int batch_size, double lr,
                                                 double momentum = 0.9) {
  if (batch_size < 1) throw ValueError("tent_adapt_stream: batch_size must be >= 1");
  Classifier<float> model = clone_classifier(source);
  Sgd<float> opt({model.fc.w, model.fc.b}, {lr, momentum, 0.0});

  std::vector<Prediction> out;
  out.reserve(stream.size());
  const int n = (int)stream.size();
  for (int start = 0; start < n; start += batch_size) {
    const int len = std::min(batch_size, n - start);
    std::vector<float> data((size_t)len * kImagePixels);
    for (int i = 0; i < len; ++i)
      for (int p = 0; p < kImagePixels; ++p)
        data[(size_t)i * kImagePixels + p] =
            2.0f * stream[(size_t)(start + i)].px[(size_t)p] - 1.0f;
    auto x = TensorF::from({len, 1, kImageH, kImageW}, std::move(data));
    auto logits = model.logits(x);
    {
      const auto lp = logits.data();
      for (int i = 0; i < len; ++i) {
        std::vector<float> row(lp.begin() + i * kNumClasses, lp.begin() + (i + 1) * kNumClasses);
        float mx = *std::max_element(row.begin(), row.end());
        double tot = 0.0;
        for (auto& v : row) tot += std::exp((double)v - mx);
        Prediction pr;
        for (int k = 0; k < kNumClasses; ++k) {
          pr.probs[(size_t)k] = (float)(std::exp((double)row[(size_t)k] - mx) / tot);
          if (row[(size_t)k] > row[(size_t)pr.label]) pr.label = k;
        }
        out.push_back(pr);
      }
    }
    if (lr != 0.0) {
      auto p = softmax_rows(logits);
      auto lsm = log_softmax_rows(logits);
      auto loss = mul_scalar(sum_all(mul(p, lsm)), -1.0f / (float)len);
      backward(loss);
      opt.step();
    }
  }
  return out;
}

}  // namespace sda
