#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "sda/error.hpp"
#include "sda/io.hpp"
#include "sda/rng.hpp"

// Procedural source-domain data (the ImageNet stand-in) and the corruption /
// watermark suites. Everything here is a pure function of its seeds.

namespace sda {

constexpr int kImageH = 16;
constexpr int kImageW = 16;
constexpr int kImagePixels = kImageH * kImageW;
constexpr int kNumClasses = 10;

struct Image {
    std::array<float, kImagePixels> px{};

    float& at(int y, int x) { return px[static_cast<size_t>(y) * kImageW + x]; }
    float at(int y, int x) const { return px[static_cast<size_t>(y) * kImageW + x]; }
};

// class ids: 0 disk, 1 square, 2 triangle, 3 cross, 4 ring,
//            5 h-stripes, 6 v-stripes, 7 checkerboard, 8 diagonal, 9 dot-grid
inline const char* class_name(int cls) {
    static constexpr std::array<const char*, kNumClasses> names = {
        "disk",      "square",    "triangle",     "cross",    "ring",
        "h_stripes", "v_stripes", "checkerboard", "diagonal", "dot_grid"};
    if (cls < 0 || cls >= kNumClasses) throw ValueError("class out of range");
    return names[static_cast<size_t>(cls)];
}

inline Image render_shape(int cls, uint64_t jitter_seed) {
    if (cls < 0 || cls >= kNumClasses) throw ValueError("render_shape: class out of range");
    Rng r(Rng::derive(jitter_seed, static_cast<uint64_t>(cls)));

    const double bg = r.uniform(0.08, 0.3);
    const double fg = bg + r.uniform(0.3, 0.5);  // contrast >= 0.3 by construction
    const double cx = 7.5 + r.uniform(-1.5, 1.5);
    const double cy = 7.5 + r.uniform(-1.5, 1.5);

    std::array<double, kImagePixels> img;
    img.fill(bg);
    auto paint = [&](auto&& mask) {
        for (int y = 0; y < kImageH; ++y)
            for (int x = 0; x < kImageW; ++x)
                if (mask(static_cast<double>(x), static_cast<double>(y), x, y))
                    img[static_cast<size_t>(y) * kImageW + x] = fg;
    };

    switch (cls) {
        case 0: {  // disk
            double rad = r.uniform(3.5, 5.5);
            paint([&](double x, double y, int, int) {
                return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= rad * rad;
            });
            break;
        }
        case 1: {  // square
            double s = r.uniform(3.0, 5.0);
            paint([&](double x, double y, int, int) {
                return std::abs(x - cx) <= s && std::abs(y - cy) <= s;
            });
            break;
        }
        case 2: {  // triangle, apex up
            double s = r.uniform(4.0, 6.0);
            paint([&](double x, double y, int, int) {
                return y >= cy - s / 2 && y <= cy + s / 2 &&
                       std::abs(x - cx) <= (y - (cy - s / 2)) * 0.8;
            });
            break;
        }
        case 3: {  // cross
            double w = r.uniform(1.0, 2.0), lng = r.uniform(4.5, 6.5);
            paint([&](double x, double y, int, int) {
                return (std::abs(x - cx) <= w && std::abs(y - cy) <= lng) ||
                       (std::abs(y - cy) <= w && std::abs(x - cx) <= lng);
            });
            break;
        }
        case 4: {  // ring
            double rad = r.uniform(4.0, 5.8), th = r.uniform(1.0, 1.8);
            paint([&](double x, double y, int, int) {
                double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                return d2 <= rad * rad && d2 >= (rad - th) * (rad - th);
            });
            break;
        }
        case 5: {  // horizontal stripes
            int p = static_cast<int>(r.below(2)) + 3;
            int ph = static_cast<int>(r.below(static_cast<uint64_t>(p)));
            paint([&](double, double, int, int yi) { return (yi + ph) % p < std::max(1, p / 2); });
            break;
        }
        case 6: {  // vertical stripes
            int p = static_cast<int>(r.below(2)) + 3;
            int ph = static_cast<int>(r.below(static_cast<uint64_t>(p)));
            paint([&](double, double, int xi, int) { return (xi + ph) % p < std::max(1, p / 2); });
            break;
        }
        case 7: {  // checkerboard
            int p = static_cast<int>(r.below(2)) + 2;
            int ph = static_cast<int>(r.below(2));
            paint([&](double, double, int xi, int yi) { return (xi / p + yi / p + ph) % 2 == 0; });
            break;
        }
        case 8: {  // diagonal band
            double w = r.uniform(1.5, 2.5), off = r.uniform(-2.0, 2.0);
            paint([&](double x, double y, int, int) {
                return std::abs((x - cx) - (y - cy) + off) <= w;
            });
            break;
        }
        case 9: {  // dot grid
            int p = static_cast<int>(r.below(2)) + 4;
            int ph = static_cast<int>(r.below(static_cast<uint64_t>(p)));
            int pv = static_cast<int>(r.below(static_cast<uint64_t>(p)));
            paint([&](double, double, int xi, int yi) {
                return (xi + ph) % p <= 1 && (yi + pv) % p <= 1;
            });
            break;
        }
    }

    Image out;
    for (int i = 0; i < kImagePixels; ++i)
        out.px[static_cast<size_t>(i)] = static_cast<float>(std::clamp(img[static_cast<size_t>(i)], 0.0, 1.0));
    return out;
}

// ---------------------------------------------------------------- datasets

enum class Split { train, test };

struct LabeledDataset {
    int num_classes = kNumClasses;
    std::vector<Image> images;
    std::vector<uint16_t> labels;
    std::string domain_tag = "source";
    uint64_t seed = 0;

    size_t size() const { return images.size(); }

    std::vector<int> class_counts() const {
        std::vector<int> c(static_cast<size_t>(num_classes), 0);
        for (uint16_t l : labels) {
            if (l >= num_classes) throw ValueError("dataset label out of range");
            ++c[l];
        }
        return c;
    }
};

// train/test draw from disjoint jitter-seed ranges derived from the split offset
inline LabeledDataset build_split(uint64_t seed, int n_per_class, Split split) {
    if (n_per_class < 1) throw ValueError("build_split: n_per_class must be >= 1");
    const uint64_t ofs = split == Split::train ? 0ull : 1'000'000'007ull;
    LabeledDataset ds;
    ds.seed = seed;
    ds.images.reserve(static_cast<size_t>(kNumClasses) * n_per_class);
    for (int c = 0; c < kNumClasses; ++c)
        for (int i = 0; i < n_per_class; ++i) {
            uint64_t s = seed * 1'000'003ull + ofs + static_cast<uint64_t>(c) * 131'071ull +
                         static_cast<uint64_t>(i);
            ds.images.push_back(render_shape(c, s));
            ds.labels.push_back(static_cast<uint16_t>(c));
        }
    return ds;
}

// ---------------------------------------------------------------- SDAD container

inline void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds) {
    if (ds.images.size() != ds.labels.size()) throw ValueError("dataset images/labels size mismatch");
    Container c;
    c.magic = "SDAD";
    c.version = 1;
    c.header = {{"K", ds.num_classes},
                {"counts", ds.class_counts()},
                {"domain_tag", ds.domain_tag},
                {"seed", ds.seed},
                {"n", ds.images.size()},
                {"height", kImageH},
                {"width", kImageW}};
    for (const Image& im : ds.images) append_f32(c.payload, im.px.data(), im.px.size());
    append_u16(c.payload, ds.labels.data(), ds.labels.size());
    save_container(path, c);
}

inline LabeledDataset load_dataset(const std::filesystem::path& path) {
    Container c = load_container(path, "SDAD");
    if (c.version != 1) throw IoError("unsupported SDAD version");
    LabeledDataset ds;
    try {
        ds.num_classes = c.header.at("K").get<int>();
        ds.domain_tag = c.header.at("domain_tag").get<std::string>();
        ds.seed = c.header.at("seed").get<uint64_t>();
        size_t n = c.header.at("n").get<size_t>();
        if (c.header.at("height").get<int>() != kImageH || c.header.at("width").get<int>() != kImageW)
            throw IoError("unsupported image dimensions in SDAD header");
        size_t want = n * kImagePixels * 4 + n * 2;
        if (c.payload.size() != want) throw IoError("SDAD payload size mismatch");
        ds.images.resize(n);
        for (size_t i = 0; i < n; ++i)
            std::memcpy(ds.images[i].px.data(), c.payload.data() + i * kImagePixels * 4, kImagePixels * 4);
        ds.labels.resize(n);
        std::memcpy(ds.labels.data(), c.payload.data() + n * kImagePixels * 4, n * 2);
    } catch (const json::exception& e) {
        throw IoError(std::string("SDAD header missing field: ") + e.what());
    }
    for (uint16_t l : ds.labels)
        if (l >= ds.num_classes) throw IoError("SDAD label out of range");
    return ds;
}

inline std::string dataset_hash(const LabeledDataset& ds) {
    Container c;
    c.magic = "SDAD";
    c.version = 1;
    c.header = {{"K", ds.num_classes},
                {"counts", ds.class_counts()},
                {"domain_tag", ds.domain_tag},
                {"seed", ds.seed},
                {"n", ds.images.size()},
                {"height", kImageH},
                {"width", kImageW}};
    for (const Image& im : ds.images) append_f32(c.payload, im.px.data(), im.px.size());
    append_u16(c.payload, ds.labels.data(), ds.labels.size());
    auto bytes = serialize_container(c);
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

// ---------------------------------------------------------------- corruptions

enum class Corruption {
    gaussian_noise,
    impulse_noise,
    gaussian_blur,
    shuffle_blur,
    contrast,
    fog,
    pixelate,
    quantize,
    watermark,
};

constexpr std::array<Corruption, 9> kAllCorruptions = {
    Corruption::gaussian_noise, Corruption::impulse_noise, Corruption::gaussian_blur,
    Corruption::shuffle_blur,   Corruption::contrast,      Corruption::fog,
    Corruption::pixelate,       Corruption::quantize,      Corruption::watermark,
};

inline const char* corruption_name(Corruption k) {
    switch (k) {
        case Corruption::gaussian_noise: return "gaussian_noise";
        case Corruption::impulse_noise: return "impulse_noise";
        case Corruption::gaussian_blur: return "gaussian_blur";
        case Corruption::shuffle_blur: return "shuffle_blur";
        case Corruption::contrast: return "contrast";
        case Corruption::fog: return "fog";
        case Corruption::pixelate: return "pixelate";
        case Corruption::quantize: return "quantize";
        case Corruption::watermark: return "watermark";
    }
    throw ValueError("unknown corruption kind");
}

inline Corruption corruption_from_name(const std::string& s) {
    for (Corruption k : kAllCorruptions)
        if (s == corruption_name(k)) return k;
    throw ValueError("unknown corruption kind '" + s + "'");
}

struct CorruptionSpec {
    Corruption kind = Corruption::gaussian_noise;
    int severity = 5;  // 1..5; 0 = identity extension
    uint64_t seed = 0;
};

// severity-to-parameter tables; tuned once via the distortion-monotonicity
// sweep and frozen — do not edit without re-running the degradation gate
namespace severity_tables {
constexpr std::array<double, 5> gauss_sigma = {0.04, 0.08, 0.12, 0.18, 0.26};
constexpr std::array<double, 5> impulse_p = {0.03, 0.06, 0.12, 0.2, 0.3};
constexpr std::array<double, 5> blur_sigma = {0.5, 0.8, 1.2, 1.8, 2.6};
constexpr std::array<int, 5> shuffle_radius = {1, 1, 2, 2, 3};
constexpr std::array<double, 5> contrast_c = {0.6, 0.45, 0.3, 0.2, 0.1};
constexpr std::array<double, 5> fog_t = {0.25, 0.4, 0.55, 0.7, 0.85};
constexpr std::array<int, 5> pixelate_f = {2, 2, 4, 4, 8};
constexpr std::array<double, 5> quantize_q = {0.12, 0.3, 0.6, 1.4, 3.0};
constexpr std::array<double, 5> watermark_alpha = {0.3, 0.45, 0.6, 0.75, 0.9};
}  // namespace severity_tables

// 6x10 watermark glyph, committed constant
constexpr std::array<uint8_t, 60> kWatermarkGlyph = {
    1, 1, 0, 1, 1, 0, 1, 1, 0, 1,  //
    1, 0, 1, 1, 0, 1, 1, 0, 1, 1,  //
    0, 1, 1, 0, 1, 1, 0, 1, 1, 0,  //
    1, 1, 0, 1, 1, 0, 1, 1, 0, 1,  //
    1, 0, 1, 1, 0, 1, 1, 0, 1, 1,  //
    0, 1, 1, 0, 1, 1, 0, 1, 1, 0,
};

namespace detail {

// reflect-pad index (numpy 'reflect': edge not repeated)
inline int reflect_index(int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
}

inline std::vector<double> gauss_kernel(double sigma) {
    int rad = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
    std::vector<double> k(static_cast<size_t>(2 * rad + 1));
    double sum = 0;
    for (int i = -rad; i <= rad; ++i) {
        double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
        k[static_cast<size_t>(i + rad)] = v;
        sum += v;
    }
    for (double& v : k) v /= sum;
    return k;
}

inline void conv_separable(std::array<double, kImagePixels>& img, const std::vector<double>& k) {
    const int rad = static_cast<int>(k.size() / 2);
    std::array<double, kImagePixels> tmp;
    for (int y = 0; y < kImageH; ++y)
        for (int x = 0; x < kImageW; ++x) {
            double acc = 0;
            for (int i = -rad; i <= rad; ++i)
                acc += k[static_cast<size_t>(i + rad)] *
                       img[static_cast<size_t>(y) * kImageW + reflect_index(x + i, kImageW)];
            tmp[static_cast<size_t>(y) * kImageW + x] = acc;
        }
    for (int y = 0; y < kImageH; ++y)
        for (int x = 0; x < kImageW; ++x) {
            double acc = 0;
            for (int i = -rad; i <= rad; ++i)
                acc += k[static_cast<size_t>(i + rad)] *
                       tmp[static_cast<size_t>(reflect_index(y + i, kImageH)) * kImageW + x];
            img[static_cast<size_t>(y) * kImageW + x] = acc;
        }
}

// orthonormal DCT-II basis, n x n
inline const std::array<double, 64>& dct8() {
    static const std::array<double, 64> m = [] {
        std::array<double, 64> d;
        for (int k = 0; k < 8; ++k)
            for (int j = 0; j < 8; ++j)
                d[static_cast<size_t>(k) * 8 + j] = std::sqrt((k == 0 ? 1.0 : 2.0) / 8.0) *
                                                    std::cos(std::numbers::pi * (2 * j + 1) * k / 16.0);
        return d;
    }();
    return m;
}

}  // namespace detail

// Alpha-blend the glyph toward intensity 1 at a seed-jittered position.
// The corruption table restricts alpha to [0.3,0.9]; this extension accepts [0,1].
inline Image watermark(const Image& in, double alpha, uint64_t seed) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValueError("watermark: alpha must be in [0,1]");
    Rng r(seed);
    const int oy = static_cast<int>(r.below(static_cast<uint64_t>(kImageH - 6 - 2 - 2))) + 2;
    const int ox = static_cast<int>(r.below(static_cast<uint64_t>(kImageW - 10 - 1 - 1))) + 1;
    Image out = in;
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 10; ++x) {
            double g = kWatermarkGlyph[static_cast<size_t>(y) * 10 + x];
            double p = in.px[static_cast<size_t>(oy + y) * kImageW + ox + x];
            p = p * (1 - alpha * g) + alpha * g;  // blend toward glyph intensity 1
            out.px[static_cast<size_t>(oy + y) * kImageW + ox + x] =
                static_cast<float>(std::clamp(p, 0.0, 1.0));
        }
    return out;
}

inline Image corrupt(const Image& in, const CorruptionSpec& spec) {
    if (spec.severity < 0 || spec.severity > 5) throw ValueError("corrupt: severity must be in 0..5");
    if (spec.severity == 0) return in;  // identity extension
    const size_t si = static_cast<size_t>(spec.severity - 1);
    namespace tab = severity_tables;

    std::array<double, kImagePixels> img;
    for (int i = 0; i < kImagePixels; ++i) img[static_cast<size_t>(i)] = in.px[static_cast<size_t>(i)];
    Rng r(spec.seed);

    switch (spec.kind) {
        case Corruption::gaussian_noise: {
            for (double& p : img) p += r.gaussian() * tab::gauss_sigma[si];
            break;
        }
        case Corruption::impulse_noise: {
            for (double& p : img)
                if (r.uniform() < tab::impulse_p[si]) p = r.uniform() < 0.5 ? 1.0 : 0.0;
            break;
        }
        case Corruption::gaussian_blur: {
            detail::conv_separable(img, detail::gauss_kernel(tab::blur_sigma[si]));
            break;
        }
        case Corruption::shuffle_blur: {
            const int rad = tab::shuffle_radius[si];
            std::array<double, kImagePixels> src = img;
            for (int y = 0; y < kImageH; ++y)
                for (int x = 0; x < kImageW; ++x) {
                    int dy = r.range(-rad, rad), dx = r.range(-rad, rad);
                    int sy = std::clamp(y + dy, 0, kImageH - 1);
                    int sx = std::clamp(x + dx, 0, kImageW - 1);
                    img[static_cast<size_t>(y) * kImageW + x] = src[static_cast<size_t>(sy) * kImageW + sx];
                }
            detail::conv_separable(img, detail::gauss_kernel(0.5));
            break;
        }
        case Corruption::contrast: {
            for (double& p : img) p = 0.5 + tab::contrast_c[si] * (p - 0.5);
            break;
        }
        case Corruption::fog: {
            const double t = tab::fog_t[si];
            for (int y = 0; y < kImageH; ++y)
                for (int x = 0; x < kImageW; ++x) {
                    double haze = 0.75 + 0.25 * std::sin(static_cast<double>(x) / kImageW * 2 * std::numbers::pi +
                                                         static_cast<double>(y) / kImageH * std::numbers::pi);
                    double& p = img[static_cast<size_t>(y) * kImageW + x];
                    p = p * (1 - t) + t * haze;
                }
            break;
        }
        case Corruption::pixelate: {
            const int f = tab::pixelate_f[si];
            for (int by = 0; by < kImageH; by += f)
                for (int bx = 0; bx < kImageW; bx += f) {
                    double acc = 0;
                    for (int y = 0; y < f; ++y)
                        for (int x = 0; x < f; ++x)
                            acc += img[static_cast<size_t>(by + y) * kImageW + bx + x];
                    acc /= f * f;
                    for (int y = 0; y < f; ++y)
                        for (int x = 0; x < f; ++x)
                            img[static_cast<size_t>(by + y) * kImageW + bx + x] = acc;
                }
            break;
        }
        case Corruption::quantize: {
            // JPEG-style: 8x8 DCT, coefficient quantization coarser at high frequency
            const double q = tab::quantize_q[si];
            const auto& D = detail::dct8();
            for (int by = 0; by < kImageH; by += 8)
                for (int bx = 0; bx < kImageW; bx += 8) {
                    double blk[64], co[64], tmp2[64];
                    for (int y = 0; y < 8; ++y)
                        for (int x = 0; x < 8; ++x)
                            blk[y * 8 + x] = img[static_cast<size_t>(by + y) * kImageW + bx + x] - 0.5;
                    // co = D * blk * D^T
                    for (int i = 0; i < 8; ++i)
                        for (int j = 0; j < 8; ++j) {
                            double acc = 0;
                            for (int k = 0; k < 8; ++k) acc += D[static_cast<size_t>(i) * 8 + k] * blk[k * 8 + j];
                            tmp2[i * 8 + j] = acc;
                        }
                    for (int i = 0; i < 8; ++i)
                        for (int j = 0; j < 8; ++j) {
                            double acc = 0;
                            for (int k = 0; k < 8; ++k) acc += tmp2[i * 8 + k] * D[static_cast<size_t>(j) * 8 + k];
                            double step = q * (0.05 + 0.15 * (i + j));
                            co[i * 8 + j] = std::round(acc / step) * step;
                        }
                    // blk = D^T * co * D
                    for (int i = 0; i < 8; ++i)
                        for (int j = 0; j < 8; ++j) {
                            double acc = 0;
                            for (int k = 0; k < 8; ++k) acc += D[static_cast<size_t>(k) * 8 + i] * co[k * 8 + j];
                            tmp2[i * 8 + j] = acc;
                        }
                    for (int i = 0; i < 8; ++i)
                        for (int j = 0; j < 8; ++j) {
                            double acc = 0;
                            for (int k = 0; k < 8; ++k) acc += tmp2[i * 8 + k] * D[static_cast<size_t>(k) * 8 + j];
                            img[static_cast<size_t>(by + i) * kImageW + bx + j] = acc + 0.5;
                        }
                }
            break;
        }
        case Corruption::watermark:
            return watermark(in, tab::watermark_alpha[si], spec.seed);
        default:
            throw ValueError("corrupt: unknown kind");
    }

    Image out;
    for (int i = 0; i < kImagePixels; ++i)
        out.px[static_cast<size_t>(i)] = static_cast<float>(std::clamp(img[static_cast<size_t>(i)], 0.0, 1.0));
    return out;
}

// whole-dataset corruption; per-item seeds derived from (seed, index)
inline LabeledDataset corrupt_dataset(const LabeledDataset& ds, Corruption kind, int severity,
                                      uint64_t seed) {
    LabeledDataset out;
    out.num_classes = ds.num_classes;
    out.labels = ds.labels;
    out.seed = seed;
    out.domain_tag = std::string("target(") + corruption_name(kind) + "," + std::to_string(severity) + ")";
    out.images.reserve(ds.images.size());
    for (size_t i = 0; i < ds.images.size(); ++i)
        out.images.push_back(corrupt(ds.images[i], {kind, severity, Rng::derive(seed, i)}));
    return out;
}

}  // namespace sda
