#pragma once

// Classifier training, synthetic-domain fine-tuning, and Grad-CAM saliency.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "sda/data_forge.hpp"
#include "sda/diffusion_core.hpp"
#include "sda/models.hpp"
#include "sda/optim.hpp"
#include "sda/tensor.hpp"

namespace sda {

struct ClassifierTrainConfig {
  int epochs = 30;
  int batch = 128;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double aug_noise = 0.0;  // optional input noise augmentation
  // L1 activity penalty on the last conv features; pushes class evidence onto
  // sparse on-object structure instead of dense background flatness, which is
  // what makes Grad-CAM maps localize
  double feat_l1 = 0.0;
  int width = 1;
  bool verbose = false;
};

struct FinetuneConfig {
  int epochs = 15;
  int batch = 128;            // Table-6 batch 512 scaled to desk size
  int batch_nominal = 512;
  double lr = 5e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int step_epoch = 10;
  double gamma = 0.1;
  bool verbose = false;
};

// Mean cross-entropy over a batch of logits.
inline TensorF cross_entropy(const TensorF& logits, const std::vector<int>& labels) {
  const int b = logits.shape()[0];
  if ((int)labels.size() != b) throw ShapeError("cross_entropy: batch size mismatch");
  auto picked = take_per_row(log_softmax_rows(logits), labels);
  return mul_scalar(sum_all(picked), -1.0f / (float)b);
}

namespace detail {

template <typename Step>
inline void sgd_epoch_loop(const LabeledDataset& ds, int epochs, int batch, Rng& rng,
                           Step&& step_fn) {
  const int n = (int)ds.images.size();
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[(int)rng.below((uint64_t)i + 1)]);
    for (int start = 0; start < n; start += batch) {
      const int len = std::min(batch, n - start);
      std::vector<int> idx(order.begin() + start, order.begin() + start + len);
      step_fn(epoch, idx);
    }
  }
}

}  // namespace detail

// Train a source classifier from scratch: SGD + cosine schedule, cross-entropy.
inline Classifier<float> train_classifier(const LabeledDataset& ds,
                                          const ClassifierTrainConfig& cfg, uint64_t seed) {
  if (ds.images.empty()) throw ValueError("train_classifier: empty dataset");
  if (cfg.epochs < 0 || cfg.batch <= 0) throw ValueError("train_classifier: bad config");
  Rng init_rng(Rng::derive(seed, 0xC1A55));
  Classifier<float> model(cfg.width, init_rng);
  model.domain_tag = "source";
  model.training_seed = seed;
  model.extra = {{"train", {{"epochs", cfg.epochs},
                            {"batch", cfg.batch},
                            {"optimizer", "sgd"},
                            {"lr", cfg.lr},
                            {"momentum", cfg.momentum},
                            {"weight_decay", cfg.weight_decay},
                            {"aug_noise", cfg.aug_noise},
                            {"feat_l1", cfg.feat_l1},
                            {"lr_schedule", "cosine"}}}};
  if (cfg.epochs == 0) return model;

  Sgd<float> opt(model.params(), {cfg.lr, cfg.momentum, cfg.weight_decay});
  LrSchedule sched{LrKind::cosine, cfg.lr, cfg.epochs, 0, 0, 0.0};
  Rng rng(Rng::derive(seed, 0x7EA1));
  detail::sgd_epoch_loop(ds, cfg.epochs, cfg.batch, rng, [&](int epoch, const std::vector<int>& idx) {
    opt.set_lr(lr_at(sched, epoch));
    auto x = batch_to_tensor<float>(ds, idx);
    if (cfg.aug_noise > 0.0)
      for (auto& v : x.mutable_data()) v += (float)(cfg.aug_noise * rng.gaussian());
    std::vector<int> ys;
    ys.reserve(idx.size());
    for (int i : idx) ys.push_back(ds.labels[(size_t)i]);
    auto feats = model.features(x);
    auto loss = cross_entropy(model.head(feats), ys);
    if (cfg.feat_l1 > 0.0) loss = add(loss, mul_scalar(mean_all(feats), (float)cfg.feat_l1));
    const float v = loss.item();
    if (!std::isfinite(v)) throw NumericError("train_classifier: loss diverged");
    backward(loss);
    opt.step();
    if (cfg.verbose && idx.front() == 0)
      std::fprintf(stderr, "[train-classifier] epoch %d loss %.4f\n", epoch, v);
  });
  model.epoch = cfg.epochs;
  return model;
}

// Fine-tune a copy of the source classifier on a synthetic dataset (Table-6 recipe).
// Never mutates `source`.
inline Classifier<float> finetune_classifier(const Classifier<float>& source,
                                             const LabeledDataset& ds,
                                             const FinetuneConfig& cfg) {
  if (ds.images.empty()) throw ValueError("finetune_classifier: empty dataset");
  if (cfg.epochs < 0 || cfg.batch <= 0) throw ValueError("finetune_classifier: bad config");
  if (ds.domain_tag != "synthetic_aligned" && ds.domain_tag != "synthetic_cond")
    std::fprintf(stderr,
                 "[finetune] warning: dataset domain_tag '%s' is not synthetic_aligned or "
                 "synthetic_cond\n",
                 ds.domain_tag.c_str());

  Classifier<float> model = clone_classifier(source);
  model.domain_tag = "synthetic";
  model.extra["finetune"] = {{"epochs", cfg.epochs},
                             {"batch", cfg.batch},
                             {"batch_nominal", cfg.batch_nominal},
                             {"optimizer", "sgd"},
                             {"lr", cfg.lr},
                             {"momentum", cfg.momentum},
                             {"weight_decay", cfg.weight_decay},
                             {"lr_schedule", "step_decay"},
                             {"step_epoch", cfg.step_epoch},
                             {"gamma", cfg.gamma},
                             {"data_domain_tag", ds.domain_tag}};
  if (cfg.epochs == 0 || cfg.lr == 0.0) return model;

  Sgd<float> opt(model.params(), {cfg.lr, cfg.momentum, cfg.weight_decay});
  LrSchedule sched{LrKind::step_decay, cfg.lr, cfg.epochs, 0, cfg.step_epoch, cfg.gamma};
  Rng rng(Rng::derive(source.training_seed, 0xF17E));
  detail::sgd_epoch_loop(ds, cfg.epochs, cfg.batch, rng, [&](int epoch, const std::vector<int>& idx) {
    opt.set_lr(lr_at(sched, epoch));
    auto x = batch_to_tensor<float>(ds, idx);
    std::vector<int> ys;
    ys.reserve(idx.size());
    for (int i : idx) ys.push_back(ds.labels[(size_t)i]);
    auto loss = cross_entropy(model.logits(x), ys);
    const float v = loss.item();
    if (!std::isfinite(v)) throw NumericError("finetune_classifier: loss diverged");
    backward(loss);
    opt.step();
    if (cfg.verbose && idx.front() == 0)
      std::fprintf(stderr, "[finetune] epoch %d loss %.4f\n", epoch, v);
  });
  model.epoch = source.epoch + cfg.epochs;
  return model;
}

// Softmax class probabilities for one image. Pure in (parameters, image).
inline std::vector<float> classify(const Classifier<float>& model, const Image& img) {
  NoGradGuard ng;
  auto logits = model.logits(image_to_tensor<float>(img));
  auto probs = softmax_rows(logits);
  const auto p = probs.data();
  return std::vector<float>(p.begin(), p.begin() + kNumClasses);
}

inline int predict_label(const std::vector<float>& probs) {
  int best = 0;
  for (int k = 1; k < (int)probs.size(); ++k)
    if (probs[(size_t)k] > probs[(size_t)best]) best = k;
  return best;
}

// Batched accuracy over a dataset (aggregate only; per-image paths use classify).
inline double evaluate_accuracy(const Classifier<float>& model, const LabeledDataset& ds,
                                int batch = 256) {
  NoGradGuard ng;
  const int n = (int)ds.images.size();
  if (n == 0) throw ValueError("evaluate_accuracy: empty dataset");
  int hits = 0;
  for (int start = 0; start < n; start += batch) {
    const int len = std::min(batch, n - start);
    std::vector<int> idx(len);
    for (int i = 0; i < len; ++i) idx[(size_t)i] = start + i;
    auto logits = model.logits(batch_to_tensor<float>(ds, idx));
    const auto lp = logits.data();
    for (int i = 0; i < len; ++i) {
      int best = 0;
      for (int k = 1; k < kNumClasses; ++k)
        if (lp[i * kNumClasses + k] > lp[i * kNumClasses + best]) best = k;
      if (best == ds.labels[(size_t)(start + i)]) ++hits;
    }
  }
  return (double)hits / (double)n;
}

// Grad-CAM on the last conv activation: weights are spatially averaged gradients
// of the class logit; heatmap = minmax(ReLU(sum_c w_c A_c)) upsampled to 16x16.
inline std::vector<float> gradcam(const Classifier<float>& model, const Image& img, int cls) {
  if (cls < 0 || cls >= kNumClasses) throw ValueError("gradcam: class out of range");
  auto x = image_to_tensor<float>(img);
  auto feats = model.features(x);  // [1, C, 8, 8]
  const auto& fs = feats.shape();
  const int c = fs[1], h = fs[2], w = fs[3];
  auto score = sum_all(take_per_row(model.head(feats), {cls}));
  backward(score);

  const auto a = feats.data();
  const auto g = feats.grad();
  std::vector<float> cam((size_t)h * w, 0.0f);
  for (int ch = 0; ch < c; ++ch) {
    double wsum = 0.0;
    for (int i = 0; i < h * w; ++i) wsum += g[ch * h * w + i];
    const float weight = (float)(wsum / (h * w));
    for (int i = 0; i < h * w; ++i) cam[(size_t)i] += weight * a[ch * h * w + i];
  }
  for (float& v : cam) v = std::max(v, 0.0f);
  const float lo = *std::min_element(cam.begin(), cam.end());
  const float hi = *std::max_element(cam.begin(), cam.end());
  std::vector<float> out((size_t)kImagePixels, 0.0f);
  if (hi > lo) {
    // nearest-neighbour upsample 8x8 -> 16x16 with minmax normalization
    for (int y = 0; y < kImageH; ++y)
      for (int xx = 0; xx < kImageW; ++xx)
        out[(size_t)(y * kImageW + xx)] = (cam[(size_t)((y / 2) * w + xx / 2)] - lo) / (hi - lo);
  }
  return out;
}

}  // namespace sda
