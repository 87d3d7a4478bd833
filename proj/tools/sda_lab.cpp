// sda-lab: command-line front end for dataset generation, model training,
// test-time adaptation, the stage-1 pipeline, and the experiment harness.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sda/adaptation.hpp"
#include "sda/bench.hpp"
#include "sda/classifiers.hpp"
#include "sda/data_forge.hpp"
#include "sda/diffusion_core.hpp"
#include "sda/models.hpp"
#include "sda/stage1.hpp"

namespace fs = std::filesystem;
using namespace sda;

namespace {

json read_json_file(const fs::path& path) {
    return json::parse(read_text_file(path));
}

// ------------------------------------------------------------------ gen-data

struct GenDataArgs {
    uint64_t seed = 42;
    int per_class = 100;
    std::string split = "train";
    std::string corrupt_kind;
    int severity = 5;
    std::string out;
};

int run_gen_data(const GenDataArgs& a) {
    Split split = a.split == "test" ? Split::test : Split::train;
    auto ds = build_split(a.seed, a.per_class, split);
    if (!a.corrupt_kind.empty())
        ds = corrupt_dataset(ds, corruption_from_name(a.corrupt_kind), a.severity,
                             Rng::derive(a.seed, 0xC0));
    save_dataset(a.out, ds);
    std::printf("wrote %s: %zu images, domain_tag=%s, hash=%s\n", a.out.c_str(), ds.size(),
                ds.domain_tag.c_str(), dataset_hash(ds).c_str());
    return 0;
}

// ------------------------------------------------------------ train-diffusion

struct TrainDiffArgs {
    bool cond = false;
    bool uncond = false;
    std::string data;
    std::string out;
    uint64_t seed = 7;
    int epochs = -1;
    bool verbose = false;
};

int run_train_diffusion(const TrainDiffArgs& a) {
    auto ds = load_dataset(a.data);
    auto s = make_schedule();
    DiffusionTrainConfig cfg = a.cond ? default_cond_config() : default_uncond_config();
    if (a.epochs >= 0) cfg.epochs = a.epochs;
    cfg.verbose = a.verbose;
    auto m = train_denoiser<float>(ds, a.cond, s, cfg, a.seed);
    save_denoiser(a.out, m);
    std::printf("wrote %s: %s denoiser, T=%d, epochs=%d, hash=%s\n", a.out.c_str(),
                a.cond ? "conditional" : "unconditional", m.T_steps, m.epoch,
                checkpoint_hash<float>(a.out).c_str());
    return 0;
}

// ----------------------------------------------------------- train-classifier

struct TrainClsArgs {
    std::string data;
    std::string out;
    uint64_t seed = 7;
    int epochs = 30;
    int width = 1;
    bool verbose = false;
};

int run_train_classifier(const TrainClsArgs& a) {
    auto ds = load_dataset(a.data);
    ClassifierTrainConfig cfg;
    cfg.epochs = a.epochs;
    cfg.width = a.width;
    cfg.verbose = a.verbose;
    auto m = train_classifier(ds, cfg, a.seed);
    save_classifier(a.out, m);
    std::printf("wrote %s: classifier width=%d, train acc=%.4f, hash=%s\n", a.out.c_str(),
                m.width, evaluate_accuracy(m, ds), checkpoint_hash<float>(a.out).c_str());
    return 0;
}

// -------------------------------------------------------------------- finetune

struct FinetuneArgs {
    std::string source;
    std::string data;
    std::string out;
    int epochs = -1;
    double lr = -1.0;
};

int run_finetune(const FinetuneArgs& a) {
    auto src = load_classifier<float>(a.source);
    auto ds = load_dataset(a.data);
    FinetuneConfig cfg;
    if (a.epochs >= 0) cfg.epochs = a.epochs;
    if (a.lr >= 0) cfg.lr = a.lr;
    auto m = finetune_classifier(src, ds, cfg);
    save_classifier(a.out, m);
    std::printf("wrote %s: domain_tag=%s, acc on finetune data=%.4f, hash=%s\n", a.out.c_str(),
                m.domain_tag.c_str(), evaluate_accuracy(m, ds),
                checkpoint_hash<float>(a.out).c_str());
    return 0;
}

// -------------------------------------------------------------------- gradcam

struct GradcamArgs {
    std::string ckpt;
    std::string data;
    int index = 0;
    int cls = -1;  // -1 = predicted class
    std::string out;
    std::string svg;
};

void write_pgm(const fs::path& path, const std::vector<float>& v) {
    std::string s = "P5\n16 16\n255\n";
    for (float f : v)
        s.push_back(static_cast<char>(static_cast<unsigned char>(
            std::clamp(f, 0.0f, 1.0f) * 255.0f + 0.5f)));
    write_text_file(path, s);
}

// input image and heatmap as side-by-side pixel grids
std::string gradcam_panel_svg(const Image& img, const std::vector<float>& cam, int cls) {
    const int px = 12, pad = 20, w = pad * 3 + px * 32, h = pad * 2 + px * 16 + 18;
    std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
         std::to_string(w) + "\" height=\"" + std::to_string(h) + "\">\n";
    s += "<rect width=\"" + std::to_string(w) + "\" height=\"" + std::to_string(h) +
         "\" fill=\"#ffffff\"/>\n";
    auto cell = [&](int gx, int gy, const std::string& fill) {
        s += "<rect x=\"" + std::to_string(gx) + "\" y=\"" + std::to_string(gy) + "\" width=\"" +
             std::to_string(px) + "\" height=\"" + std::to_string(px) + "\" fill=\"" + fill +
             "\"/>\n";
    };
    char buf[8];
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            int g = static_cast<int>(std::clamp(img.at(y, x), 0.0f, 1.0f) * 255.0f + 0.5f);
            std::snprintf(buf, sizeof(buf), "%02x", g);
            cell(pad + x * px, pad + y * px, std::string("#") + buf + buf + buf);
            float v = std::clamp(cam[static_cast<size_t>(y * 16 + x)], 0.0f, 1.0f);
            // blue->red ramp
            int rr = static_cast<int>(v * 255.0f + 0.5f);
            int bb = 255 - rr;
            char col[8];
            std::snprintf(col, sizeof(col), "#%02x20%02x", rr, bb);
            cell(pad * 2 + px * 16 + x * px, pad + y * px, col);
        }
    s += "<text x=\"" + std::to_string(pad) + "\" y=\"" + std::to_string(pad * 2 + px * 16) +
         "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#222222\">input | grad-cam class " +
         std::to_string(cls) + "</text>\n";
    s += "</svg>\n";
    return s;
}

int run_gradcam(const GradcamArgs& a) {
    auto m = load_classifier<float>(a.ckpt);
    auto ds = load_dataset(a.data);
    if (a.index < 0 || a.index >= static_cast<int>(ds.size()))
        throw ValueError("gradcam: index out of range");
    const Image& img = ds.images[static_cast<size_t>(a.index)];
    int cls = a.cls;
    if (cls < 0) cls = predict_label(classify(m, img));
    auto cam = gradcam(m, img, cls);
    write_pgm(a.out, cam);
    std::printf("wrote %s: class=%d (true=%d)\n", a.out.c_str(), cls,
                static_cast<int>(ds.labels[static_cast<size_t>(a.index)]));
    if (!a.svg.empty()) {
        write_text_file(a.svg, gradcam_panel_svg(img, cam, cls));
        std::printf("wrote %s\n", a.svg.c_str());
    }
    return 0;
}

// ---------------------------------------------------------------------- adapt

struct AdaptArgs {
    std::string method = "sda";
    std::string data;
    std::string source_ckpt;
    std::string synthetic_ckpt;
    std::string uncond_ckpt;
    uint64_t seed = 0;
    int t_star = 50;
    int lowpass = 4;
    int batch_size = 64;   // tent
    double lr = 1e-3;      // tent
    double momentum = 0.9; // tent
    std::string out;
};

std::string predictions_csv(const std::vector<Prediction>& preds,
                            const std::vector<uint16_t>& labels) {
    std::string out = "index,true_label,pred_label";
    for (int k = 0; k < kNumClasses; ++k) out += ",p" + std::to_string(k);
    out += "\n";
    char buf[32];
    for (size_t i = 0; i < preds.size(); ++i) {
        out += std::to_string(i) + "," + std::to_string(labels[i]) + "," +
               std::to_string(preds[i].label);
        for (int k = 0; k < kNumClasses; ++k) {
            std::snprintf(buf, sizeof(buf), ",%.8f", preds[i].probs[static_cast<size_t>(k)]);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

int run_adapt(const AdaptArgs& a) {
    auto ds = load_dataset(a.data);
    auto src = load_classifier<float>(a.source_ckpt);
    MethodKind kind = method_from_name(a.method);

    std::vector<Prediction> preds;
    if (kind == MethodKind::tent) {
        preds = tent_adapt_stream(src, ds.images, a.batch_size, a.lr, a.momentum);
    } else {
        auto s = make_schedule();
        Denoiser<float> uncond;
        Classifier<float> synth;
        TTAMethod m;
        switch (kind) {
            case MethodKind::source_only:
                m = source_method(src);
                break;
            case MethodKind::diffpure:
                uncond = load_denoiser<float>(a.uncond_ckpt);
                m = diffpure_method(src, uncond, s, a.t_star);
                break;
            case MethodKind::dda:
                uncond = load_denoiser<float>(a.uncond_ckpt);
                m = dda_method(src, uncond, s, a.t_star, a.lowpass);
                break;
            default:
                uncond = load_denoiser<float>(a.uncond_ckpt);
                synth = load_classifier<float>(a.synthetic_ckpt);
                m = sda_method(src, synth, uncond, s, a.t_star, a.lowpass);
                break;
        }
        preds = predict_dataset(m, ds, a.seed);
    }

    write_text_file(a.out, predictions_csv(preds, ds.labels));
    std::vector<int> labels(ds.labels.begin(), ds.labels.end());
    std::printf("wrote %s: method=%s, n=%zu, accuracy=%.4f\n", a.out.c_str(), a.method.c_str(),
                preds.size(), accuracy_of(preds, labels));
    return 0;
}

// --------------------------------------------------------------------- stage1

int run_stage1_cmd(const std::string& config_path, const std::string& out) {
    json j = read_json_file(config_path);
    Stage1Config cfg = stage1_config_from_json(j);
    if (!j.contains("checkpoints"))
        throw ValueError("stage1 config: missing checkpoints {source, cond, uncond}");
    const json& ck = j.at("checkpoints");
    auto s = make_schedule();
    auto r = run_stage1_files(cfg, ck.at("source").get<std::string>(),
                              ck.at("cond").get<std::string>(),
                              ck.at("uncond").get<std::string>(), out, s);
    std::printf("wrote %s: domain_tag=%s, finetune data n=%zu\n", out.c_str(),
                r.model.domain_tag.c_str(), r.finetune_data.size());
    std::printf("provenance: %s.provenance.json\n", out.c_str());
    return 0;
}

// -------------------------------------------------------- bench/ablate/sensit

int run_bench_cmd(const std::string& op, const std::string& config_path, const std::string& out,
                  const std::string& ablate_kind) {
    ExperimentConfig cfg = experiment_config_from_json(read_json_file(config_path));
    auto models = load_bench_models(cfg);
    Report r;
    if (op == "bench") {
        r = run_benchmark(cfg, models);
    } else if (op == "ablate") {
        std::string kind = ablate_kind;
        if (kind.empty()) throw ValueError("ablate: --kind is required");
        r = run_ablation(kind, cfg, models);
    } else {
        r = run_sensitivity(cfg, models);
    }
    auto files = emit_report(r, out);
    for (const auto& f : files) std::printf("wrote %s\n", f.string().c_str());
    for (const auto& m : report_methods(r))
        std::printf("mean %-14s %.4f\n", m.c_str(), mean_accuracy(r, m));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"diffusion-driven test-time adaptation lab"};
    app.require_subcommand(1);

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "generate (optionally corrupted) shape datasets");
    gen->add_option("--seed", gd.seed, "dataset seed");
    gen->add_option("--per-class", gd.per_class, "images per class");
    gen->add_option("--split", gd.split, "train|test")->check(CLI::IsMember({"train", "test"}));
    gen->add_option("--corrupt", gd.corrupt_kind, "corruption kind (omit for clean)");
    gen->add_option("--severity", gd.severity, "corruption severity 1..5")
        ->check(CLI::Range(0, 5));
    gen->add_option("--out", gd.out, "output SDAD path")->required();

    TrainDiffArgs td;
    auto* tdc = app.add_subcommand("train-diffusion", "train a denoiser");
    auto* cflag = tdc->add_flag("--cond", td.cond, "conditional model");
    tdc->add_flag("--uncond", td.uncond, "unconditional model")->excludes(cflag);
    tdc->add_option("--data", td.data, "training SDAD path")->required();
    tdc->add_option("--out", td.out, "output checkpoint")->required();
    tdc->add_option("--seed", td.seed, "training seed");
    tdc->add_option("--epochs", td.epochs, "override default epoch count");
    tdc->add_flag("--verbose", td.verbose, "per-epoch loss to stderr");

    TrainClsArgs tc;
    auto* tcc = app.add_subcommand("train-classifier", "train the source classifier");
    tcc->add_option("--data", tc.data, "training SDAD path")->required();
    tcc->add_option("--out", tc.out, "output checkpoint")->required();
    tcc->add_option("--seed", tc.seed, "training seed");
    tcc->add_option("--epochs", tc.epochs, "epoch count");
    tcc->add_option("--width", tc.width, "channel width multiplier");
    tcc->add_flag("--verbose", tc.verbose, "per-epoch loss to stderr");

    FinetuneArgs ft;
    auto* ftc = app.add_subcommand("finetune", "fine-tune a classifier on synthetic data");
    ftc->add_option("--source", ft.source, "source classifier checkpoint")->required();
    ftc->add_option("--data", ft.data, "synthetic SDAD path")->required();
    ftc->add_option("--out", ft.out, "output checkpoint")->required();
    ftc->add_option("--epochs", ft.epochs, "override epochs");
    ftc->add_option("--lr", ft.lr, "override learning rate");

    GradcamArgs gc;
    auto* gcc = app.add_subcommand("gradcam", "class-activation heatmap for one image");
    gcc->add_option("--ckpt", gc.ckpt, "classifier checkpoint")->required();
    gcc->add_option("--data", gc.data, "SDAD dataset")->required();
    gcc->add_option("--index", gc.index, "image index");
    gcc->add_option("--class", gc.cls, "target class (default: predicted)");
    gcc->add_option("--out", gc.out, "output PGM (P5) path")->required();
    gcc->add_option("--svg", gc.svg, "optional side-by-side SVG panel");

    AdaptArgs ad;
    auto* adc = app.add_subcommand("adapt", "run one TTA method over a dataset");
    adc->add_option("--method", ad.method, "source|diffpure|dda|sda|tent")->required();
    adc->add_option("--data", ad.data, "target SDAD path")->required();
    adc->add_option("--source-ckpt", ad.source_ckpt, "source classifier")->required();
    adc->add_option("--synthetic-ckpt", ad.synthetic_ckpt, "fine-tuned classifier (sda)");
    adc->add_option("--uncond-ckpt", ad.uncond_ckpt, "unconditional denoiser");
    adc->add_option("--seed", ad.seed, "prediction seed");
    adc->add_option("--t-star", ad.t_star, "purification depth");
    adc->add_option("--lowpass", ad.lowpass, "guidance low-pass factor");
    adc->add_option("--batch-size", ad.batch_size, "tent batch size");
    adc->add_option("--lr", ad.lr, "tent learning rate");
    adc->add_option("--momentum", ad.momentum, "tent momentum");
    adc->add_option("--out", ad.out, "predictions.csv path")->required();

    std::string s1_config, s1_out;
    auto* s1c = app.add_subcommand("stage1", "synthesize, align, fine-tune");
    s1c->add_option("--config", s1_config, "stage-1 config JSON")->required();
    s1c->add_option("--out", s1_out, "output classifier checkpoint")->required();

    std::string bench_config, bench_out, ablate_kind;
    auto* bc = app.add_subcommand("bench", "corruption-grid benchmark");
    bc->add_option("--config", bench_config, "experiment config JSON")->required();
    bc->add_option("--out", bench_out, "output directory")->required();
    auto* ac = app.add_subcommand("ablate", "components | n_images | cfg_scale ablation");
    ac->add_option("--config", bench_config, "experiment config JSON")->required();
    ac->add_option("--out", bench_out, "output directory")->required();
    ac->add_option("--kind", ablate_kind, "components|n_images|cfg_scale")->required();
    auto* sc = app.add_subcommand("sensitivity", "data-order sensitivity suite");
    sc->add_option("--config", bench_config, "experiment config JSON")->required();
    sc->add_option("--out", bench_out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return run_gen_data(gd);
        if (tdc->parsed()) {
            if (!td.cond && !td.uncond)
                throw ValueError("train-diffusion: pass --cond or --uncond");
            return run_train_diffusion(td);
        }
        if (tcc->parsed()) return run_train_classifier(tc);
        if (ftc->parsed()) return run_finetune(ft);
        if (gcc->parsed()) return run_gradcam(gc);
        if (adc->parsed()) return run_adapt(ad);
        if (s1c->parsed()) return run_stage1_cmd(s1_config, s1_out);
        if (bc->parsed()) return run_bench_cmd("bench", bench_config, bench_out, "");
        if (ac->parsed()) return run_bench_cmd("ablate", bench_config, bench_out, ablate_kind);
        if (sc->parsed()) return run_bench_cmd("sensitivity", bench_config, bench_out, "");
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
