#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "sda/data_forge.hpp"
#include "test_support.hpp"

using namespace sda;

namespace {

bool same_pixels(const Image& a, const Image& b) {
    return std::memcmp(a.px.data(), b.px.data(), sizeof(a.px)) == 0;
}

double mean_abs_diff(const Image& a, const Image& b) {
    double d = 0;
    for (int i = 0; i < kImagePixels; ++i)
        d += std::abs(static_cast<double>(a.px[static_cast<size_t>(i)]) - b.px[static_cast<size_t>(i)]);
    return d / kImagePixels;
}

double variance(const Image& im) {
    double m = 0;
    for (float p : im.px) m += p;
    m /= kImagePixels;
    double v = 0;
    for (float p : im.px) v += (p - m) * (p - m);
    return v / kImagePixels;
}

}  // namespace

// ---------------------------------------------------------------- render_shape

TEST_CASE("render_shape is deterministic per (class, seed)") {
    for (int cls = 0; cls < kNumClasses; ++cls) {
        Image a = render_shape(cls, 12345);
        Image b = render_shape(cls, 12345);
        REQUIRE(same_pixels(a, b));
    }
    // the worked example: (class=0, seed=s) twice
    REQUIRE(same_pixels(render_shape(0, 777), render_shape(0, 777)));
}

TEST_CASE("render_shape pixels stay in [0,1] for every class") {
    for (int cls = 0; cls < kNumClasses; ++cls)
        for (uint64_t s = 0; s < 25; ++s) {
            Image im = render_shape(cls, s * 31 + 5);
            for (float p : im.px) {
                REQUIRE(p >= 0.0f);
                REQUIRE(p <= 1.0f);
            }
        }
}

TEST_CASE("render_shape foreground/background contrast >= 0.3") {
    // fg = bg + U(0.3, 0.5) and both values appear un-clamped, so
    // max - min == fg - bg >= 0.3 up to float rounding
    for (int cls = 0; cls < kNumClasses; ++cls)
        for (uint64_t s = 0; s < 50; ++s) {
            Image im = render_shape(cls, 1000 + s);
            float lo = 1, hi = 0;
            for (float p : im.px) {
                lo = std::min(lo, p);
                hi = std::max(hi, p);
            }
            REQUIRE(hi - lo >= 0.3f - 1e-6f);
        }
}

TEST_CASE("render_shape rejects out-of-range classes") {
    REQUIRE_THROWS_AS(render_shape(-1, 0), ValueError);
    REQUIRE_THROWS_AS(render_shape(kNumClasses, 0), ValueError);
    REQUIRE_THROWS_AS(class_name(-1), ValueError);
    REQUIRE_THROWS_AS(class_name(kNumClasses), ValueError);
    REQUIRE(std::string(class_name(0)) == "disk");
    REQUIRE(std::string(class_name(9)) == "dot_grid");
}

TEST_CASE("different jitter seeds give different renders") {
    int distinct = 0;
    for (uint64_t s = 0; s < 30; ++s)
        distinct += !same_pixels(render_shape(0, s), render_shape(0, s + 1));
    REQUIRE(distinct >= 28);  // jitter moves position/scale/intensity almost surely
}

// ---------------------------------------------------------------- build_split

TEST_CASE("build_split counting: n_per_class=50 gives 500 balanced items") {
    LabeledDataset ds = build_split(42, 50, Split::train);
    REQUIRE(ds.size() == 500);
    REQUIRE(ds.num_classes == kNumClasses);
    REQUIRE(ds.domain_tag == "source");
    auto counts = ds.class_counts();
    for (int c : counts) REQUIRE(c == 50);
}

TEST_CASE("build_split validates n_per_class") {
    REQUIRE_THROWS_AS(build_split(1, 0, Split::train), ValueError);
    REQUIRE_THROWS_AS(build_split(1, -3, Split::test), ValueError);
}

TEST_CASE("train and test splits share zero images") {
    LabeledDataset tr = build_split(7, 20, Split::train);
    LabeledDataset te = build_split(7, 20, Split::test);
    std::set<std::string> seen;
    for (const Image& im : tr.images)
        seen.insert(std::string(reinterpret_cast<const char*>(im.px.data()), sizeof(im.px)));
    for (const Image& im : te.images)
        REQUIRE(seen.count(std::string(reinterpret_cast<const char*>(im.px.data()), sizeof(im.px))) == 0);
}

TEST_CASE("same seed gives identical dataset hash, different seed differs") {
    LabeledDataset a = build_split(11, 10, Split::train);
    LabeledDataset b = build_split(11, 10, Split::train);
    LabeledDataset c = build_split(12, 10, Split::train);
    REQUIRE(dataset_hash(a) == dataset_hash(b));
    REQUIRE(dataset_hash(a) != dataset_hash(c));
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(same_pixels(a.images[i], b.images[i]));
        REQUIRE(a.labels[i] == b.labels[i]);
    }
}

// ---------------------------------------------------------------- corrupt

TEST_CASE("severity tables are the frozen constants") {
    namespace tab = severity_tables;
    REQUIRE(tab::gauss_sigma == std::array<double, 5>{0.04, 0.08, 0.12, 0.18, 0.26});
    REQUIRE(tab::contrast_c[4] == 0.1);  // severity 5 is the smallest entry
    for (size_t i = 1; i < 5; ++i) REQUIRE(tab::contrast_c[i] < tab::contrast_c[i - 1]);
    REQUIRE(tab::watermark_alpha.front() == 0.3);
    REQUIRE(tab::watermark_alpha.back() == 0.9);
}

TEST_CASE("severity 0 is the identity extension for every kind") {
    Image im = render_shape(3, 99);
    for (Corruption k : kAllCorruptions) {
        Image out = corrupt(im, {k, 0, 555});
        REQUIRE(same_pixels(out, im));
    }
}

TEST_CASE("corrupt validates severity and output stays in [0,1]") {
    Image im = render_shape(4, 1);
    REQUIRE_THROWS_AS(corrupt(im, {Corruption::fog, 6, 0}), ValueError);
    REQUIRE_THROWS_AS(corrupt(im, {Corruption::fog, -1, 0}), ValueError);
    for (Corruption k : kAllCorruptions)
        for (int sev = 1; sev <= 5; ++sev) {
            Image out = corrupt(im, {k, sev, 31337});
            for (float p : out.px) {
                REQUIRE(p >= 0.0f);
                REQUIRE(p <= 1.0f);
            }
        }
}

TEST_CASE("corrupt is a pure function of its seed") {
    Image im = render_shape(7, 4);
    for (Corruption k : kAllCorruptions) {
        Image a = corrupt(im, {k, 5, 11});
        Image b = corrupt(im, {k, 5, 11});
        REQUIRE(same_pixels(a, b));
    }
    // stochastic kinds actually consume the seed
    for (Corruption k : {Corruption::gaussian_noise, Corruption::impulse_noise, Corruption::shuffle_blur})
        REQUIRE(!same_pixels(corrupt(im, {k, 5, 11}), corrupt(im, {k, 5, 12})));
}

TEST_CASE("gaussian_noise adds N(0, sigma_s^2): sample std matches the table") {
    // mid-gray input keeps clamping negligible at the lower severities
    Image gray;
    gray.px.fill(0.5f);
    for (int sev = 1; sev <= 3; ++sev) {
        double sum = 0, sum2 = 0;
        int n = 0;
        for (uint64_t s = 0; s < 200; ++s) {
            Image out = corrupt(gray, {Corruption::gaussian_noise, sev, s});
            for (float p : out.px) {
                double d = p - 0.5;
                sum += d;
                sum2 += d * d;
                ++n;
            }
        }
        double mean = sum / n;
        double sd = std::sqrt(sum2 / n - mean * mean);
        double sigma = severity_tables::gauss_sigma[static_cast<size_t>(sev - 1)];
        REQUIRE(std::abs(mean) < 0.005);
        REQUIRE(sd == doctest::Approx(sigma).epsilon(0.05));
    }
}

TEST_CASE("contrast severity 5 contracts toward 0.5 and shrinks variance") {
    for (int cls = 0; cls < kNumClasses; ++cls) {
        Image im = render_shape(cls, 2024);
        Image out = corrupt(im, {Corruption::contrast, 5, 0});
        for (int i = 0; i < kImagePixels; ++i) {
            double want = 0.5 + 0.1 * (im.px[static_cast<size_t>(i)] - 0.5);
            REQUIRE(out.px[static_cast<size_t>(i)] == doctest::Approx(want).epsilon(1e-6));
        }
        REQUIRE(variance(out) < variance(im));
    }
}

TEST_CASE("impulse severity 5 flips roughly 30% of pixels") {
    Image gray;
    gray.px.fill(0.5f);
    int changed = 0, total = 0;
    for (uint64_t s = 0; s < 100; ++s) {
        Image out = corrupt(gray, {Corruption::impulse_noise, 5, 100 + s});
        for (float p : out.px) {
            changed += p != 0.5f;
            ++total;
        }
    }
    double frac = static_cast<double>(changed) / total;
    REQUIRE(frac > 0.25);
    REQUIRE(frac < 0.35);
}

TEST_CASE("mean distortion is non-decreasing in severity for every kind") {
    // the sweep that froze the severity tables, rerun over 100 images;
    // per-image seeds are held fixed across severities so kinds whose
    // parameter repeats between adjacent severities compare equal, not noisy
    std::vector<Image> imgs;
    for (int cls = 0; cls < kNumClasses; ++cls)
        for (uint64_t s = 0; s < 10; ++s) imgs.push_back(render_shape(cls, 50 + s));
    REQUIRE(imgs.size() == 100);

    for (Corruption k : kAllCorruptions) {
        double prev = 0;
        for (int sev = 1; sev <= 5; ++sev) {
            double d = 0;
            for (size_t i = 0; i < imgs.size(); ++i)
                d += mean_abs_diff(imgs[i], corrupt(imgs[i], {k, sev, Rng::derive(777, i)}));
            d /= static_cast<double>(imgs.size());
            INFO(corruption_name(k), " severity ", sev, ": distortion ", d, " (prev ", prev, ")");
            REQUIRE(d >= prev - 1e-12);
            prev = d;
        }
        REQUIRE(prev > 0);  // severity 5 actually distorts
    }
}

// ---------------------------------------------------------------- watermark

TEST_CASE("watermark alpha=0 is the identity") {
    Image im = render_shape(2, 8);
    REQUIRE(same_pixels(watermark(im, 0.0, 13), im));
}

TEST_CASE("watermark alpha=1 drives masked pixels to glyph intensity 1") {
    Image zero;
    zero.px.fill(0.0f);
    Image out = watermark(zero, 1.0, 4242);
    int ones = 0, zeros = 0;
    for (float p : out.px) {
        if (p == 1.0f) ++ones;
        else if (p == 0.0f) ++zeros;
        else REQUIRE(false);  // blend with alpha=1 leaves no intermediate values
    }
    int glyph_on = 0;
    for (uint8_t g : kWatermarkGlyph) glyph_on += g;
    REQUIRE(ones == glyph_on);
    REQUIRE(zeros == kImagePixels - glyph_on);
}

TEST_CASE("watermark validates alpha and leaves unmasked pixels untouched") {
    Image im = render_shape(5, 3);
    REQUIRE_THROWS_AS(watermark(im, -0.1, 0), ValueError);
    REQUIRE_THROWS_AS(watermark(im, 1.1, 0), ValueError);
    Image out = watermark(im, 0.9, 7);
    int changed = 0;
    for (int i = 0; i < kImagePixels; ++i)
        changed += out.px[static_cast<size_t>(i)] != im.px[static_cast<size_t>(i)];
    int glyph_on = 0;
    for (uint8_t g : kWatermarkGlyph) glyph_on += g;
    REQUIRE(changed <= glyph_on);  // only glyph-on cells inside the 6x10 box may move
    REQUIRE(changed > 0);
}

TEST_CASE("watermark severity 3 placement is deterministic and matches the table") {
    Image im = render_shape(6, 21);
    Image a = corrupt(im, {Corruption::watermark, 3, 909});
    Image b = corrupt(im, {Corruption::watermark, 3, 909});
    REQUIRE(same_pixels(a, b));
    REQUIRE(same_pixels(a, watermark(im, severity_tables::watermark_alpha[2], 909)));
    // placement is seed-jittered: across a handful of seeds the glyph moves
    int moved = 0;
    for (uint64_t s = 910; s < 920; ++s)
        moved += !same_pixels(a, corrupt(im, {Corruption::watermark, 3, s}));
    REQUIRE(moved > 0);
}

// ---------------------------------------------------------------- corrupt_dataset

TEST_CASE("corrupt_dataset tags the domain and keeps labels") {
    LabeledDataset ds = build_split(3, 5, Split::test);
    LabeledDataset out = corrupt_dataset(ds, Corruption::fog, 5, 88);
    REQUIRE(out.domain_tag == "target(fog,5)");
    REQUIRE(out.size() == ds.size());
    REQUIRE(out.labels == ds.labels);
    LabeledDataset again = corrupt_dataset(ds, Corruption::fog, 5, 88);
    REQUIRE(dataset_hash(out) == dataset_hash(again));
    // per-item seeds differ: corrupted images differ from the originals
    int changed = 0;
    for (size_t i = 0; i < ds.size(); ++i) changed += !same_pixels(ds.images[i], out.images[i]);
    REQUIRE(changed == static_cast<int>(ds.size()));
}

TEST_CASE("corruption kind names round-trip") {
    for (Corruption k : kAllCorruptions) REQUIRE(corruption_from_name(corruption_name(k)) == k);
    REQUIRE_THROWS_AS(corruption_from_name("melt"), ValueError);
}
