#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "sda/adaptation.hpp"
#include "sda/classifiers.hpp"
#include "sda/data_forge.hpp"
#include "sda/error.hpp"
#include "sda/io.hpp"
#include "sda/models.hpp"
#include "sda/parallel.hpp"
#include "sda/rng.hpp"

// Experiment driver: benchmark grids over corruptions, the three ablations,
// the data-order sensitivity suite, and CSV/Markdown/SVG report emission.
// Every cell is deterministic given the config seeds; methods that share a
// purified image within a cell receive byte-identical results to running
// predict() per method, because the combination step is the same code path.

namespace sda {

// ------------------------------------------------------------------- config

constexpr int kBenchSchemaVersion = 1;

struct ExperimentConfig {
    int schema_version = kBenchSchemaVersion;
    std::vector<std::string> methods = {"source", "diffpure", "dda", "sda"};
    std::vector<Corruption> corruptions{kAllCorruptions.begin(), kAllCorruptions.end()};
    std::vector<int> severities = {5};
    int images_per_cell = 200;
    std::vector<uint64_t> seeds = {1, 2, 3};
    uint64_t data_seed = 4242;
    std::map<std::string, std::filesystem::path> checkpoints;
    int t_star = 50;
    int lowpass_factor = 4;
    double tent_lr = 1e-3;
    double tent_momentum = 0.9;
    std::vector<int> tent_batch_sizes = {1, 64};

    void validate() const {
        if (schema_version != kBenchSchemaVersion)
            throw ValueError("config: unsupported schema_version (expected " +
                             std::to_string(kBenchSchemaVersion) + ")");
        if (methods.empty()) throw ValueError("config: methods must be non-empty");
        for (const auto& m : methods) method_from_name(m);  // throws on unknown
        if (corruptions.empty()) throw ValueError("config: corruptions must be non-empty");
        for (int s : severities)
            if (s < 0 || s > 5) throw ValueError("config: severity out of range 0..5");
        if (severities.empty()) throw ValueError("config: severities must be non-empty");
        if (images_per_cell < 1) throw ValueError("config: images_per_cell must be >= 1");
        if (images_per_cell % kNumClasses != 0)
            throw ValueError("config: images_per_cell must be a multiple of the class count");
        if (seeds.empty()) throw ValueError("config: seeds must be non-empty");
        if (t_star < 0) throw ValueError("config: t_star must be >= 0");
        if (tent_lr < 0) throw ValueError("config: tent lr must be >= 0");
        for (int b : tent_batch_sizes)
            if (b < 1) throw ValueError("config: tent batch sizes must be >= 1");
    }
};

inline json experiment_config_json(const ExperimentConfig& c) {
    json ck = json::object();
    for (const auto& [k, v] : c.checkpoints) ck[k] = v.string();
    json kinds = json::array();
    for (Corruption k : c.corruptions) kinds.push_back(corruption_name(k));
    return {{"schema_version", c.schema_version},
            {"methods", c.methods},
            {"corruptions", kinds},
            {"severities", c.severities},
            {"images_per_cell", c.images_per_cell},
            {"seeds", c.seeds},
            {"data_seed", c.data_seed},
            {"checkpoints", ck},
            {"purify", {{"t_star", c.t_star}, {"lowpass_factor", c.lowpass_factor}}},
            {"tent",
             {{"lr", c.tent_lr},
              {"momentum", c.tent_momentum},
              {"batch_sizes", c.tent_batch_sizes}}}};
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig c;
    if (!j.contains("schema_version")) throw ValueError("config: missing schema_version");
    c.schema_version = j.at("schema_version").get<int>();
    if (j.contains("methods")) c.methods = j.at("methods").get<std::vector<std::string>>();
    if (j.contains("corruptions")) {
        c.corruptions.clear();
        for (const auto& s : j.at("corruptions"))
            c.corruptions.push_back(corruption_from_name(s.get<std::string>()));
    }
    if (j.contains("severities")) c.severities = j.at("severities").get<std::vector<int>>();
    c.images_per_cell = j.value("images_per_cell", c.images_per_cell);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    c.data_seed = j.value("data_seed", c.data_seed);
    if (j.contains("checkpoints"))
        for (const auto& [k, v] : j.at("checkpoints").items())
            c.checkpoints[k] = std::filesystem::path(v.get<std::string>());
    if (j.contains("purify")) {
        const json& p = j.at("purify");
        c.t_star = p.value("t_star", c.t_star);
        c.lowpass_factor = p.value("lowpass_factor", c.lowpass_factor);
    }
    if (j.contains("tent")) {
        const json& t = j.at("tent");
        c.tent_lr = t.value("lr", c.tent_lr);
        c.tent_momentum = t.value("momentum", c.tent_momentum);
        if (t.contains("batch_sizes"))
            c.tent_batch_sizes = t.at("batch_sizes").get<std::vector<int>>();
    }
    c.validate();
    return c;
}

// ------------------------------------------------------------------- report

struct ReportRow {
    std::string method;
    std::string corruption;  // corruption kind, or stream name for sensitivity
    int severity = 5;
    int n = 0;
    uint64_t seed = 0;
    double accuracy = 0.0;
};

struct Report {
    std::string name;  // benchmark | ablation_* | sensitivity
    std::vector<ReportRow> rows;
    json provenance = json::object();
};

inline double mean_accuracy(const Report& r, const std::string& method) {
    double sum = 0.0;
    int n = 0;
    for (const auto& row : r.rows)
        if (row.method == method) {
            sum += row.accuracy;
            ++n;
        }
    if (n == 0) throw ValueError("mean_accuracy: no rows for method '" + method + "'");
    return sum / n;
}

inline std::vector<std::string> report_methods(const Report& r) {
    std::vector<std::string> out;
    for (const auto& row : r.rows)
        if (std::find(out.begin(), out.end(), row.method) == out.end()) out.push_back(row.method);
    return out;
}

inline std::vector<std::string> report_corruptions(const Report& r) {
    std::vector<std::string> out;
    for (const auto& row : r.rows)
        if (std::find(out.begin(), out.end(), row.corruption) == out.end())
            out.push_back(row.corruption);
    return out;
}

// ------------------------------------------------------------------- models

// Checkpoints loaded and format-validated up front, before any evaluation.
struct BenchModels {
    Classifier<float> source;
    std::map<std::string, Classifier<float>> classifiers;  // non-source heads by config key
    Denoiser<float> uncond;
    bool has_uncond = false;
    NoiseSchedule schedule;
    json checkpoint_info = json::object();  // key -> {file, hash}
};

inline BenchModels load_bench_models(const ExperimentConfig& cfg) {
    BenchModels m;
    m.schedule = make_schedule();
    auto it = cfg.checkpoints.find("source");
    if (it == cfg.checkpoints.end()) throw ValueError("config: checkpoints.source is required");
    for (const auto& [key, path] : cfg.checkpoints) {
        if (!std::filesystem::exists(path))
            throw IoError("config: checkpoint '" + key + "' not found: " + path.string());
        Container c = load_container(path, "SDAC");
        const std::string kind = c.header.at("arch").at("kind").get<std::string>();
        if (kind == "classifier") {
            auto clf = load_classifier<float>(path);
            if (key == "source") {
                m.source = std::move(clf);
            } else {
                if (clf.domain_tag.rfind("synthetic", 0) != 0)
                    throw ValueError("config: checkpoint '" + key + "' must be a synthetic-domain " +
                                     "classifier, got domain_tag '" + clf.domain_tag + "'");
                m.classifiers.emplace(key, std::move(clf));
            }
        } else if (kind == "denoiser") {
            auto den = load_denoiser<float>(path);
            if (key == "uncond") {
                if (den.conditional)
                    throw ValueError("config: checkpoints.uncond must be unconditional");
                if (den.T_steps != m.schedule.T)
                    throw ValueError("config: uncond denoiser T does not match the schedule");
                m.uncond = std::move(den);
                m.has_uncond = true;
            }
            // a conditional denoiser is a stage-1 input, not a bench input; hash only
        } else {
            throw IoError("config: checkpoint '" + key + "' has unknown kind '" + kind + "'");
        }
        m.checkpoint_info[key] = {{"file", path.filename().string()},
                                  {"hash", file_hash_hex(path)}};
    }
    return m;
}

// classifier head lookup with graceful aliasing (sda_n50 / sda_w1.0 are the
// default synthetic checkpoint unless overridden)
inline const Classifier<float>& bench_head(const BenchModels& m, const std::string& key,
                                           const char* fallback = nullptr) {
    auto it = m.classifiers.find(key);
    if (it != m.classifiers.end()) return it->second;
    if (fallback != nullptr) {
        it = m.classifiers.find(fallback);
        if (it != m.classifiers.end()) return it->second;
    }
    throw ValueError("config: missing checkpoint '" + key + "'");
}

// -------------------------------------------------------------- evaluation

struct MethodHead {
    std::string label;  // CSV method column
    TTAMethod method;
};

namespace detail {

// Evaluate all heads on one dataset, purifying each image at most once per
// distinct purify config (plain / guided). Per-sample seeds derive(seed, i),
// identical to predict_dataset, so shared purifies change nothing.
inline std::vector<double> evaluate_heads(const std::vector<MethodHead>& heads,
                                          const LabeledDataset& ds, uint64_t seed,
                                          int threads = 0) {
    if (heads.empty()) throw ValueError("evaluate_heads: no methods");
    if (ds.size() == 0) throw ValueError("evaluate_heads: empty dataset");
    const TTAMethod* plain = nullptr;
    const TTAMethod* guided = nullptr;
    for (const auto& h : heads) {
        const TTAMethod& m = h.method;
        switch (m.kind) {
            case MethodKind::source_only:
                break;
            case MethodKind::diffpure:
            case MethodKind::dda:
            case MethodKind::sda: {
                const TTAMethod*& slot = m.purify_cfg.guidance ? guided : plain;
                if (slot == nullptr) {
                    slot = &m;
                } else if (slot->purify_cfg.t_star != m.purify_cfg.t_star ||
                           slot->purify_cfg.lowpass_factor != m.purify_cfg.lowpass_factor ||
                           slot->uncond != m.uncond) {
                    throw ValueError("evaluate_heads: heads disagree on purify config");
                }
                break;
            }
            case MethodKind::tent:
                throw ValueError("evaluate_heads: tent is stream-based");
        }
    }

    const size_t H = heads.size();
    const size_t N = ds.size();
    std::vector<uint8_t> hit(N * H, 0);
    parallel_for(
        static_cast<int64_t>(N),
        [&](int64_t i) {
            const Image& x = ds.images[static_cast<size_t>(i)];
            const uint64_t si = Rng::derive(seed, static_cast<uint64_t>(i));
            Image xp, xg;
            if (plain != nullptr) xp = purify(x, *plain->uncond, plain->purify_cfg, si);
            if (guided != nullptr) xg = purify(x, *guided->uncond, guided->purify_cfg, si);
            for (size_t h = 0; h < H; ++h) {
                const TTAMethod& m = heads[h].method;
                const Image* syn = nullptr;
                if (m.kind != MethodKind::source_only)
                    syn = m.purify_cfg.guidance ? &xg : &xp;
                Prediction pr = predict_purified(m, x, syn);
                hit[static_cast<size_t>(i) * H + h] =
                    pr.label == ds.labels[static_cast<size_t>(i)] ? 1 : 0;
            }
        },
        threads);

    std::vector<double> acc(H, 0.0);
    for (size_t i = 0; i < N; ++i)
        for (size_t h = 0; h < H; ++h) acc[h] += hit[i * H + h];
    for (auto& a : acc) a /= static_cast<double>(N);
    return acc;
}

// evaluation split + corruption for one grid cell; seeds keyed off the repeat
// seed so every repeat sees fresh images and fresh corruption draws
inline LabeledDataset cell_dataset(const ExperimentConfig& cfg, Corruption kind, int severity,
                                   uint64_t seed) {
    const int per_class = cfg.images_per_cell / kNumClasses;
    auto base = build_split(Rng::derive(cfg.data_seed, seed), per_class, Split::test);
    const uint64_t kind_idx = static_cast<uint64_t>(
        std::find(kAllCorruptions.begin(), kAllCorruptions.end(), kind) - kAllCorruptions.begin());
    if (severity == 0) return base;  // severity 0 = identity (clean row)
    return corrupt_dataset(base, kind, severity,
                           Rng::derive(seed, 0xC0 + kind_idx * 8 + static_cast<uint64_t>(severity)));
}

inline uint64_t cell_pred_seed(Corruption kind, int severity, uint64_t seed) {
    const uint64_t kind_idx = static_cast<uint64_t>(
        std::find(kAllCorruptions.begin(), kAllCorruptions.end(), kind) - kAllCorruptions.begin());
    return Rng::derive(seed, 0xE0 + kind_idx * 8 + static_cast<uint64_t>(severity));
}

inline json bench_provenance(const ExperimentConfig& cfg, const BenchModels& models,
                             const std::string& operation) {
    json grid = experiment_config_json(cfg);
    grid.erase("checkpoints");  // replaced by hash-bearing info block
    return {{"schema_version", kBenchSchemaVersion},
            {"operation", operation},
            {"config", grid},
            {"checkpoints", models.checkpoint_info}};
}

// grid sweep shared by benchmark and the grid-shaped ablations
inline Report run_grid(const std::string& name, const ExperimentConfig& cfg,
                       const BenchModels& models, const std::vector<MethodHead>& heads,
                       int threads) {
    Report r;
    r.name = name;
    r.provenance = bench_provenance(cfg, models, name);
    for (Corruption kind : cfg.corruptions)
        for (int sev : cfg.severities)
            for (uint64_t seed : cfg.seeds) {
                auto ds = cell_dataset(cfg, kind, sev, seed);
                auto acc = evaluate_heads(heads, ds, cell_pred_seed(kind, sev, seed), threads);
                for (size_t h = 0; h < heads.size(); ++h)
                    r.rows.push_back({heads[h].label, corruption_name(kind), sev,
                                      static_cast<int>(ds.size()), seed, acc[h]});
            }
    return r;
}

}  // namespace detail

// ---------------------------------------------------------------- benchmark

inline Report run_benchmark(const ExperimentConfig& cfg, const BenchModels& models,
                            int threads = 0) {
    cfg.validate();
    bool needs_uncond = false;
    std::vector<MethodHead> heads;
    for (const auto& name : cfg.methods) {
        MethodKind kind = method_from_name(name);
        switch (kind) {
            case MethodKind::source_only:
                heads.push_back({name, source_method(models.source)});
                break;
            case MethodKind::diffpure:
                needs_uncond = true;
                heads.push_back(
                    {name, diffpure_method(models.source, models.uncond, models.schedule,
                                           cfg.t_star)});
                break;
            case MethodKind::dda:
                needs_uncond = true;
                heads.push_back({name, dda_method(models.source, models.uncond, models.schedule,
                                                  cfg.t_star, cfg.lowpass_factor)});
                break;
            case MethodKind::sda:
                needs_uncond = true;
                heads.push_back({name, sda_method(models.source, bench_head(models, "synthetic"),
                                                  models.uncond, models.schedule, cfg.t_star,
                                                  cfg.lowpass_factor)});
                break;
            case MethodKind::tent:
                throw ValueError("run_benchmark: tent is stream-based; use run_sensitivity");
        }
    }
    if (needs_uncond && !models.has_uncond)
        throw ValueError("run_benchmark: config needs checkpoints.uncond");
    return detail::run_grid("benchmark", cfg, models, heads, threads);
}

// ---------------------------------------------------------------- ablations

// components: dda vs fine-tune-on-raw-synthesis vs fine-tune-on-aligned
// n_images:  sda trained from N in {1,10,50,100} synthetic images per class
// cfg_scale: sda trained from synthesis at w in {1.0, 1.5, 4.0}
inline Report run_ablation(const std::string& kind, const ExperimentConfig& cfg,
                           const BenchModels& models, int threads = 0) {
    cfg.validate();
    if (!models.has_uncond) throw ValueError("run_ablation: config needs checkpoints.uncond");
    const auto& src = models.source;
    const auto& unc = models.uncond;
    const auto& sch = models.schedule;
    auto sda_head = [&](const std::string& label, const std::string& key, const char* fb) {
        return MethodHead{label,
                          sda_method(src, bench_head(models, key, fb), unc, sch, cfg.t_star,
                                     cfg.lowpass_factor)};
    };
    std::vector<MethodHead> heads;
    if (kind == "components") {
        heads.push_back({"dda", dda_method(src, unc, sch, cfg.t_star, cfg.lowpass_factor)});
        heads.push_back(sda_head("sda_cond_only", "synthetic_cond_only", nullptr));
        heads.push_back(sda_head("sda_aligned", "synthetic", nullptr));
    } else if (kind == "n_images") {
        heads.push_back({"dda", dda_method(src, unc, sch, cfg.t_star, cfg.lowpass_factor)});
        heads.push_back(sda_head("sda_n1", "sda_n1", nullptr));
        heads.push_back(sda_head("sda_n10", "sda_n10", nullptr));
        heads.push_back(sda_head("sda_n50", "sda_n50", "synthetic"));
        heads.push_back(sda_head("sda_n100", "sda_n100", nullptr));
    } else if (kind == "cfg_scale") {
        heads.push_back(sda_head("sda_w1.0", "sda_w1.0", "synthetic"));
        heads.push_back(sda_head("sda_w1.5", "sda_w1.5", nullptr));
        heads.push_back(sda_head("sda_w4.0", "sda_w4.0", nullptr));
    } else {
        throw ValueError("run_ablation: unknown kind '" + kind + "'");
    }
    return detail::run_grid("ablation_" + kind, cfg, models, heads, threads);
}

// -------------------------------------------------------------- sensitivity

// Four orderings of one fixed multiset of corrupted images: batches that mix
// or sort classes crossed with batches that mix or sort corruption kinds.
// Per-item prediction seeds ride with the item, so order-independent methods
// must produce identical accuracy in every cell.
inline Report run_sensitivity(const ExperimentConfig& cfg, const BenchModels& models,
                              int threads = 0) {
    cfg.validate();
    if (!models.has_uncond) throw ValueError("run_sensitivity: config needs checkpoints.uncond");
    const int sev = cfg.severities.front();
    const auto sda = sda_method(models.source, bench_head(models, "synthetic"), models.uncond,
                                models.schedule, cfg.t_star, cfg.lowpass_factor);

    Report r;
    r.name = "sensitivity";
    r.provenance = detail::bench_provenance(cfg, models, "sensitivity");

    for (uint64_t seed : cfg.seeds) {
        const int per_class = cfg.images_per_cell / kNumClasses;
        auto base = build_split(Rng::derive(cfg.data_seed, seed), per_class, Split::test);
        const int n = static_cast<int>(base.size());

        // item i: corruption kind cycles through the config list; identity
        // seeds are keyed to i so they travel with the item across orderings
        std::vector<int> kind_of(static_cast<size_t>(n));
        std::vector<Image> corrupted(static_cast<size_t>(n));
        std::vector<uint64_t> item_seed(static_cast<size_t>(n));
        const uint64_t noise_seed = Rng::derive(seed, 0xA11);
        const uint64_t pred_seed = Rng::derive(seed, 0xA12);
        for (int i = 0; i < n; ++i) {
            kind_of[static_cast<size_t>(i)] = i % static_cast<int>(cfg.corruptions.size());
            Corruption k = cfg.corruptions[static_cast<size_t>(kind_of[static_cast<size_t>(i)])];
            corrupted[static_cast<size_t>(i)] =
                sev == 0 ? base.images[static_cast<size_t>(i)]
                         : corrupt(base.images[static_cast<size_t>(i)],
                                   {k, sev, Rng::derive(noise_seed, static_cast<uint64_t>(i))});
            item_seed[static_cast<size_t>(i)] = Rng::derive(pred_seed, static_cast<uint64_t>(i));
        }

        // stream orderings over the same multiset
        std::map<std::string, std::vector<int>> streams;
        std::vector<int> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        {
            auto shuffled = idx;
            Rng rng(Rng::derive(seed, 0xA13));
            for (int i = n - 1; i > 0; --i)
                std::swap(shuffled[static_cast<size_t>(i)],
                          shuffled[rng.below(static_cast<uint64_t>(i + 1))]);
            streams["iid"] = shuffled;
            // base order is class-major: classes sorted, kinds cycling
            streams["by_class"] = idx;
            auto by_kind = idx;
            std::stable_sort(by_kind.begin(), by_kind.end(), [&](int a, int b) {
                return kind_of[static_cast<size_t>(a)] < kind_of[static_cast<size_t>(b)];
            });
            streams["by_kind"] = by_kind;
            auto by_both = idx;
            std::stable_sort(by_both.begin(), by_both.end(), [&](int a, int b) {
                if (base.labels[static_cast<size_t>(a)] != base.labels[static_cast<size_t>(b)])
                    return base.labels[static_cast<size_t>(a)] < base.labels[static_cast<size_t>(b)];
                return kind_of[static_cast<size_t>(a)] < kind_of[static_cast<size_t>(b)];
            });
            streams["by_class_kind"] = by_both;
        }
        const char* stream_order[] = {"iid", "by_class", "by_kind", "by_class_kind"};

        // sda is per-sample; compute once per item and read accuracy off any
        // ordering (the multiset is the cell content)
        std::vector<uint8_t> sda_hit(static_cast<size_t>(n), 0);
        parallel_for(
            n,
            [&](int64_t i) {
                auto pr = predict(sda, corrupted[static_cast<size_t>(i)],
                                  item_seed[static_cast<size_t>(i)]);
                sda_hit[static_cast<size_t>(i)] =
                    pr.label == base.labels[static_cast<size_t>(i)] ? 1 : 0;
            },
            threads);
        double sda_acc = 0.0;
        for (uint8_t h : sda_hit) sda_acc += h;
        sda_acc /= n;

        for (const char* sname : stream_order) {
            const auto& order = streams[sname];
            std::vector<Image> stream_imgs;
            std::vector<int> stream_labels;
            stream_imgs.reserve(static_cast<size_t>(n));
            stream_labels.reserve(static_cast<size_t>(n));
            for (int i : order) {
                stream_imgs.push_back(corrupted[static_cast<size_t>(i)]);
                stream_labels.push_back(base.labels[static_cast<size_t>(i)]);
            }
            for (int batch : cfg.tent_batch_sizes) {
                auto preds =
                    tent_adapt_stream(models.source, stream_imgs, batch, cfg.tent_lr,
                                      cfg.tent_momentum);
                double tent_acc = accuracy_of(preds, stream_labels);
                r.rows.push_back({"tent_b" + std::to_string(batch), sname, sev, n, seed,
                                  tent_acc});
                r.rows.push_back({"sda_b" + std::to_string(batch), sname, sev, n, seed, sda_acc});
            }
        }
    }
    return r;
}

// ----------------------------------------------------------------- reports

namespace detail {

inline std::string fmt_acc(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10f", v);
    return buf;
}

}  // namespace detail

inline std::string report_csv(const Report& r) {
    std::string out = "method,corruption,severity,n,seed,accuracy\n";
    for (const auto& row : r.rows) {
        out += row.method;
        out += ',';
        out += row.corruption;
        out += ',';
        out += std::to_string(row.severity);
        out += ',';
        out += std::to_string(row.n);
        out += ',';
        out += std::to_string(row.seed);
        out += ',';
        out += detail::fmt_acc(row.accuracy);
        out += '\n';
    }
    return out;
}

inline std::vector<ReportRow> parse_report_csv(const std::string& text) {
    std::vector<ReportRow> rows;
    size_t pos = text.find('\n');
    if (pos == std::string::npos) throw IoError("csv: missing header");
    if (text.substr(0, pos) != "method,corruption,severity,n,seed,accuracy")
        throw IoError("csv: unexpected header");
    ++pos;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) continue;
        ReportRow row;
        size_t a = 0;
        auto next = [&]() {
            size_t b = line.find(',', a);
            if (b == std::string::npos) b = line.size();
            std::string f = line.substr(a, b - a);
            a = b + 1;
            return f;
        };
        row.method = next();
        row.corruption = next();
        row.severity = std::stoi(next());
        row.n = std::stoi(next());
        row.seed = std::stoull(next());
        row.accuracy = std::stod(next());
        rows.push_back(std::move(row));
    }
    return rows;
}

// per-(method, corruption) mean over severities and seeds — the cell aggregate
// used by both the Markdown table and the SVG bars
inline double cell_mean(const Report& r, const std::string& method, const std::string& corr) {
    double sum = 0.0;
    int n = 0;
    for (const auto& row : r.rows)
        if (row.method == method && row.corruption == corr) {
            sum += row.accuracy;
            ++n;
        }
    if (n == 0) throw ValueError("cell_mean: no rows for (" + method + ", " + corr + ")");
    return sum / n;
}

inline std::string report_markdown(const Report& r) {
    auto methods = report_methods(r);
    auto corrs = report_corruptions(r);
    std::string out = "# " + r.name + "\n\n";
    out += "| method |";
    for (const auto& c : corrs) out += " " + c + " |";
    out += " mean |\n|---|";
    for (size_t i = 0; i < corrs.size(); ++i) out += "---|";
    out += "---|\n";
    for (const auto& m : methods) {
        out += "| " + m + " |";
        for (const auto& c : corrs) out += " " + detail::fmt_acc(cell_mean(r, m, c)) + " |";
        out += " " + detail::fmt_acc(mean_accuracy(r, m)) + " |\n";
    }
    out += "\nprovenance: " + hex64(fnv1a64(r.provenance.dump().data(),
                                            r.provenance.dump().size())) +
           "\n";
    return out;
}

// grouped bar chart, plain SVG 1.1, no external assets
inline std::string report_svg(const Report& r) {
    auto methods = report_methods(r);
    auto corrs = report_corruptions(r);
    static const char* palette[] = {"#4878d0", "#ee854a", "#6acc64", "#d65f5f",
                                    "#956cb4", "#8c613c", "#dc7ec0", "#797979"};
    const int bar_w = 14, bar_gap = 2, group_gap = 22;
    const int ml = 56, mt = 46, mb = 96, plot_h = 240;
    const int group_w =
        static_cast<int>(methods.size()) * (bar_w + bar_gap) - bar_gap + group_gap;
    const int plot_w = static_cast<int>(corrs.size()) * group_w - group_gap;
    const int width = ml + plot_w + 160, height = mt + plot_h + mb;

    std::string s;
    s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
         std::to_string(width) + "\" height=\"" + std::to_string(height) + "\" viewBox=\"0 0 " +
         std::to_string(width) + " " + std::to_string(height) + "\">\n";
    s += "<rect x=\"0\" y=\"0\" width=\"" + std::to_string(width) + "\" height=\"" +
         std::to_string(height) + "\" fill=\"#ffffff\"/>\n";
    s += "<text x=\"" + std::to_string(ml) + "\" y=\"24\" font-family=\"sans-serif\" " +
         "font-size=\"15\" fill=\"#222222\">" + r.name + " — accuracy by corruption</text>\n";

    // axes and gridlines
    for (int i = 0; i <= 5; ++i) {
        const double frac = i / 5.0;
        const int y = mt + plot_h - static_cast<int>(frac * plot_h);
        s += "<line x1=\"" + std::to_string(ml) + "\" y1=\"" + std::to_string(y) + "\" x2=\"" +
             std::to_string(ml + plot_w) + "\" y2=\"" + std::to_string(y) +
             "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
        char lab[16];
        std::snprintf(lab, sizeof(lab), "%.1f", frac);
        s += "<text x=\"" + std::to_string(ml - 8) + "\" y=\"" + std::to_string(y + 4) +
             "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#444444\" " +
             "text-anchor=\"end\">" + lab + "</text>\n";
    }

    for (size_t ci = 0; ci < corrs.size(); ++ci) {
        const int gx = ml + static_cast<int>(ci) * group_w;
        for (size_t mi = 0; mi < methods.size(); ++mi) {
            const double v = cell_mean(r, methods[mi], corrs[ci]);
            const int h = static_cast<int>(v * plot_h + 0.5);
            const int x = gx + static_cast<int>(mi) * (bar_w + bar_gap);
            const int y = mt + plot_h - h;
            s += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) +
                 "\" width=\"" + std::to_string(bar_w) + "\" height=\"" + std::to_string(h) +
                 "\" fill=\"" + palette[mi % 8] + "\"/>\n";
        }
        const int lx = gx + (group_w - group_gap) / 2;
        const int ly = mt + plot_h + 14;
        s += "<text x=\"" + std::to_string(lx) + "\" y=\"" + std::to_string(ly) +
             "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#444444\" " +
             "text-anchor=\"end\" transform=\"rotate(-45 " + std::to_string(lx) + " " +
             std::to_string(ly) + ")\">" + corrs[ci] + "</text>\n";
    }

    // legend
    for (size_t mi = 0; mi < methods.size(); ++mi) {
        const int lx = ml + plot_w + 16;
        const int ly = mt + static_cast<int>(mi) * 20;
        s += "<rect x=\"" + std::to_string(lx) + "\" y=\"" + std::to_string(ly) +
             "\" width=\"12\" height=\"12\" fill=\"" + palette[mi % 8] + "\"/>\n";
        s += "<text x=\"" + std::to_string(lx + 18) + "\" y=\"" + std::to_string(ly + 10) +
             "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#222222\">" + methods[mi] +
             "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

// writes {name}.csv / {name}.md / {name}.svg / {name}.provenance.json
inline std::vector<std::filesystem::path> emit_report(const Report& r,
                                                      const std::filesystem::path& dir,
                                                      bool csv = true, bool md = true,
                                                      bool svg = true) {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> files;
    auto put = [&](const char* ext, const std::string& text) {
        auto p = dir / (r.name + ext);
        write_text_file(p, text);
        files.push_back(p);
    };
    if (csv) put(".csv", report_csv(r));
    if (md) put(".md", report_markdown(r));
    if (svg) put(".svg", report_svg(r));
    put(".provenance.json", r.provenance.dump(2) + "\n");
    return files;
}

}  // namespace sda
