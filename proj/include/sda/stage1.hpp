#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "sda/adaptation.hpp"
#include "sda/classifiers.hpp"
#include "sda/data_forge.hpp"
#include "sda/diffusion_core.hpp"
#include "sda/error.hpp"
#include "sda/models.hpp"
#include "sda/parallel.hpp"
#include "sda/rng.hpp"

// Stage 1 of the two-stage pipeline: synthesize a labeled dataset from the
// conditional denoiser, align it through the unconditional denoiser (the same
// purify path stage 2 uses on target data), and fine-tune the source
// classifier on the result. Output is the synthetic-domain classifier plus a
// provenance record tying together every seed, config, and artifact hash.

namespace sda {

struct Stage1Config {
  int n_per_class = 50;
  double cfg_scale = 1.0;
  int t_star = 50;          // alignment strength, shared with stage-2 purify
  bool guidance = true;     // mirror purify's structural guidance
  int lowpass_factor = 4;
  bool skip_align = false;  // components ablation: fine-tune on raw synthetic_cond
  FinetuneConfig finetune;
  uint64_t synth_seed = 101;
  uint64_t align_seed = 202;

  void validate() const {
    if (n_per_class < 1) throw ValueError("stage1: n_per_class must be >= 1");
    if (cfg_scale < 0) throw ValueError("stage1: cfg_scale must be >= 0");
    if (t_star < 0) throw ValueError("stage1: t_star must be >= 0");
  }

  // the one purify configuration shared by alignment and stage-2 adaptation
  PurifyConfig purify_config(const NoiseSchedule& s) const {
    return PurifyConfig{t_star, guidance, lowpass_factor, &s};
  }
};

inline json stage1_config_json(const Stage1Config& c) {
  return {{"n_per_class", c.n_per_class},
          {"cfg_scale", c.cfg_scale},
          {"t_star", c.t_star},
          {"guidance", c.guidance},
          {"lowpass_factor", c.lowpass_factor},
          {"skip_align", c.skip_align},
          {"finetune",
           {{"epochs", c.finetune.epochs},
            {"batch", c.finetune.batch},
            {"batch_nominal", c.finetune.batch_nominal},
            {"lr", c.finetune.lr},
            {"momentum", c.finetune.momentum},
            {"weight_decay", c.finetune.weight_decay},
            {"step_epoch", c.finetune.step_epoch},
            {"gamma", c.finetune.gamma}}},
          {"synth_seed", c.synth_seed},
          {"align_seed", c.align_seed}};
}

inline Stage1Config stage1_config_from_json(const json& j) {
  Stage1Config c;
  c.n_per_class = j.value("n_per_class", c.n_per_class);
  c.cfg_scale = j.value("cfg_scale", c.cfg_scale);
  c.t_star = j.value("t_star", c.t_star);
  c.guidance = j.value("guidance", c.guidance);
  c.lowpass_factor = j.value("lowpass_factor", c.lowpass_factor);
  c.skip_align = j.value("skip_align", c.skip_align);
  if (j.contains("finetune")) {
    const json& f = j.at("finetune");
    c.finetune.epochs = f.value("epochs", c.finetune.epochs);
    c.finetune.batch = f.value("batch", c.finetune.batch);
    c.finetune.batch_nominal = f.value("batch_nominal", c.finetune.batch_nominal);
    c.finetune.lr = f.value("lr", c.finetune.lr);
    c.finetune.momentum = f.value("momentum", c.finetune.momentum);
    c.finetune.weight_decay = f.value("weight_decay", c.finetune.weight_decay);
    c.finetune.step_epoch = f.value("step_epoch", c.finetune.step_epoch);
    c.finetune.gamma = f.value("gamma", c.finetune.gamma);
  }
  c.synth_seed = j.value("synth_seed", c.synth_seed);
  c.align_seed = j.value("align_seed", c.align_seed);
  c.validate();
  return c;
}

// N samples per class from Gaussian noise, labels = generation conditions.
// Item i gets class i/N and seed derive(seed, i); deterministic and
// order-independent under any thread count.
inline LabeledDataset synthesize_labeled_dataset(const Denoiser<float>& cond,
                                                 const NoiseSchedule& s, int n_per_class,
                                                 double w, uint64_t seed, int threads = 0) {
  if (!cond.conditional) throw ValueError("synthesize: denoiser is not conditional");
  if (n_per_class < 1) throw ValueError("synthesize: n_per_class must be >= 1");
  if (w < 0) throw ValueError("synthesize: cfg scale must be >= 0");
  const int64_t n = static_cast<int64_t>(kNumClasses) * n_per_class;
  LabeledDataset ds;
  ds.domain_tag = "synthetic_cond";
  ds.seed = seed;
  ds.images.resize(static_cast<size_t>(n));
  ds.labels.resize(static_cast<size_t>(n));
  parallel_for(
      n,
      [&](int64_t i) {
        const int cls = static_cast<int>(i / n_per_class);
        ds.images[static_cast<size_t>(i)] = sample_image(cond, s, &cls, w, Rng::derive(seed, i));
        ds.labels[static_cast<size_t>(i)] = static_cast<uint16_t>(cls);
      },
      threads);
  return ds;
}

// re-noise to t_star and denoise back through the unconditional model — the
// stage-2 purify path verbatim — leaving labels untouched
inline LabeledDataset align_dataset(const LabeledDataset& ds, const Denoiser<float>& uncond,
                                    const PurifyConfig& cfg, uint64_t seed, int threads = 0) {
  if (uncond.conditional) throw ValueError("align: denoiser must be unconditional");
  LabeledDataset out = ds;
  out.domain_tag = "synthetic_aligned";
  out.seed = seed;
  parallel_for(
      static_cast<int64_t>(ds.size()),
      [&](int64_t i) {
        out.images[static_cast<size_t>(i)] =
            purify(ds.images[static_cast<size_t>(i)], uncond, cfg, Rng::derive(seed, i));
      },
      threads);
  return out;
}

struct Stage1Result {
  Classifier<float> model;
  LabeledDataset synthetic;  // synthetic_cond
  LabeledDataset finetune_data;  // aligned unless skip_align
  json provenance;
};

// synthesize -> align -> finetune. Any stage failure aborts with a
// stage-labeled diagnostic; provenance covers seeds, configs, and hashes of
// every artifact involved.
inline Stage1Result run_stage1(const Stage1Config& cfg, const Classifier<float>& source,
                               const Denoiser<float>& cond, const Denoiser<float>& uncond,
                               const NoiseSchedule& s, int threads = 0) {
  cfg.validate();
  auto run = [&](const char* stage, auto&& fn) {
    try {
      return fn();
    } catch (const std::exception& e) {
      throw Error(std::string("stage1[") + stage + "]: " + e.what());
    }
  };

  Stage1Result r;
  r.synthetic = run("synthesize", [&] {
    return synthesize_labeled_dataset(cond, s, cfg.n_per_class, cfg.cfg_scale, cfg.synth_seed,
                                      threads);
  });
  const PurifyConfig pcfg = cfg.purify_config(s);
  if (cfg.skip_align) {
    r.finetune_data = r.synthetic;
  } else {
    r.finetune_data =
        run("align", [&] { return align_dataset(r.synthetic, uncond, pcfg, cfg.align_seed, threads); });
  }
  r.model = run("finetune", [&] { return finetune_classifier(source, r.finetune_data, cfg.finetune); });
  if (cfg.skip_align) r.model.domain_tag = "synthetic_cond_only";

  r.provenance = {{"stage", "stage1"},
                  {"config", stage1_config_json(cfg)},
                  {"seeds",
                   {{"synth", cfg.synth_seed},
                    {"align", cfg.align_seed},
                    {"source_training", source.training_seed}}},
                  {"datasets",
                   {{"synthetic_cond", {{"hash", dataset_hash(r.synthetic)}, {"n", r.synthetic.size()}}},
                    {"finetune",
                     {{"hash", dataset_hash(r.finetune_data)},
                      {"n", r.finetune_data.size()},
                      {"domain_tag", r.finetune_data.domain_tag}}}}},
                  {"output", {{"domain_tag", r.model.domain_tag}}}};
  return r;
}

// checkpoint-path front end: loads inputs, runs the pipeline, saves the
// fine-tuned classifier, and writes `<out>.provenance.json` beside it
inline Stage1Result run_stage1_files(const Stage1Config& cfg,
                                     const std::filesystem::path& source_ckpt,
                                     const std::filesystem::path& cond_ckpt,
                                     const std::filesystem::path& uncond_ckpt,
                                     const std::filesystem::path& out_ckpt,
                                     const NoiseSchedule& s, int threads = 0) {
  auto source = load_classifier<float>(source_ckpt);
  auto cond = load_denoiser<float>(cond_ckpt);
  auto uncond = load_denoiser<float>(uncond_ckpt);
  auto r = run_stage1(cfg, source, cond, uncond, s, threads);
  r.provenance["inputs"] = {{"source", {{"file", source_ckpt.filename().string()},
                                        {"hash", checkpoint_hash<float>(source_ckpt)}}},
                            {"cond", {{"file", cond_ckpt.filename().string()},
                                      {"hash", checkpoint_hash<float>(cond_ckpt)}}},
                            {"uncond", {{"file", uncond_ckpt.filename().string()},
                                        {"hash", checkpoint_hash<float>(uncond_ckpt)}}}};
  save_classifier(out_ckpt, r.model);
  r.provenance["output"]["hash"] = checkpoint_hash<float>(out_ckpt);
  r.provenance["output"]["file"] = out_ckpt.filename().string();
  std::filesystem::path prov = out_ckpt;
  prov += ".provenance.json";
  write_text_file(prov, r.provenance.dump(2) + "\n");
  return r;
}

}  // namespace sda
