#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sda/data_forge.hpp"
#include "sda/error.hpp"
#include "sda/io.hpp"
#include "sda/rng.hpp"
#include "sda/tensor.hpp"

// The two model families: a small conv classifier (source / synthetic-domain
// instances) and the ε-predicting denoiser (conditional / unconditional
// instances). Parameters are plain trainable tensors; the declared parameter
// order is the checkpoint blob order, so keep constructors and params() in
// sync.

namespace sda {

// torch-style default init: weights U(−k,k) with k=1/√fan_in, biases likewise
template <class T>
Tensor<T> init_uniform(Shape shape, int fan_in, Rng& rng) {
    double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
    auto t = Tensor<T>::zeros(shape, true);
    auto d = t.mutable_data();
    for (auto& v : d) v = static_cast<T>(rng.uniform(-k, k));
    return t;
}

template <class T>
struct Linear {
    Tensor<T> w;  // [in, out]
    Tensor<T> b;  // [out]

    Linear() = default;
    Linear(int in, int out, Rng& rng)
        : w(init_uniform<T>({in, out}, in, rng)), b(init_uniform<T>({out}, in, rng)) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return add_row_bias(matmul(x, w), b); }
};

template <class T>
struct Conv {
    Tensor<T> w;  // [out, in, k, k]
    Tensor<T> b;  // [out]
    int stride = 1;
    int pad = 1;
    bool replicate = false;  // replicate-pad instead of zero-pad

    Conv() = default;
    Conv(int in, int out, int k, Rng& rng, int stride_ = 1, int pad_ = 1)
        : w(init_uniform<T>({out, in, k, k}, in * k * k, rng)),
          b(init_uniform<T>({out}, in * k * k, rng)),
          stride(stride_),
          pad(pad_) {}

    Tensor<T> operator()(const Tensor<T>& x) const {
        return add_channel_bias(conv2d(x, w, stride, pad, replicate), b);
    }
};

// embedding table init N(0,1), torch-style
template <class T>
Tensor<T> init_normal(Shape shape, Rng& rng) {
    auto t = Tensor<T>::zeros(shape, true);
    auto d = t.mutable_data();
    for (auto& v : d) v = static_cast<T>(rng.gaussian());
    return t;
}

// ---------------------------------------------------------------- classifier

// conv1(1->16) relu pool conv2(16->32) relu [gradcam target, 8x8] pool fc(512->K)
template <class T>
struct Classifier {
    int width = 1;
    std::string domain_tag = "source";
    uint64_t training_seed = 0;
    int epoch = 0;
    json extra;  // fine-tune config echo etc.

    Conv<T> conv1, conv2;
    Linear<T> fc;

    Classifier() = default;

    Classifier(int width_, Rng& rng) : width(width_) {
        int c1 = 16 * width, c2 = 32 * width;
        conv1 = Conv<T>(1, c1, 3, rng);
        conv2 = Conv<T>(c1, c2, 3, rng);
        // replicate padding: zero-pad borders otherwise dominate Grad-CAM maps
        conv1.replicate = conv2.replicate = true;
        fc = Linear<T>(c2, kNumClasses, rng);
    }

    std::vector<Tensor<T>> params() const {
        return {conv1.w, conv1.b, conv2.w, conv2.b, fc.w, fc.b};
    }

    json arch() const { return {{"kind", "classifier"}, {"width", width}, {"K", kNumClasses}}; }

    // last conv activation (relu'd), [B, 32w, 8, 8]; inputs are centered per
    // sample so conv zero-padding sits near the background level
    Tensor<T> features(const Tensor<T>& x) const {
        auto h = relu(conv1(center_per_sample(x)));
        h = avg_pool2x2(h);
        return relu(conv2(h));
    }

    // global-average-pool head: Grad-CAM's averaged-gradient weights are exact
    // for GAP, so saliency maps reflect the head's true spatial evidence
    Tensor<T> head(const Tensor<T>& feats) const {
        auto h = avg_pool2x2(avg_pool2x2(avg_pool2x2(feats)));  // [B,C,1,1]
        int B = feats.shape()[0];
        return fc(reshape(h, {B, static_cast<int>(h.numel() / B)}));
    }

    // x: [B,1,16,16] in [-1,1]; returns logits [B,K]
    Tensor<T> logits(const Tensor<T>& x) const { return head(features(x)); }
};

// ---------------------------------------------------------------- denoiser

// conv encoder/decoder with additive time (and optionally class) embeddings;
// the conditional and unconditional instances intentionally differ in width
// and depth (see arch fields base/mid_blocks)
template <class T>
struct Denoiser {
    bool conditional = true;
    int T_steps = 100;
    int base = 20;
    int emb = 32;
    int mid_blocks = 2;
    uint64_t training_seed = 0;
    int epoch = 0;
    std::string domain_tag = "diffusion";

    Tensor<T> t_emb;  // [T, emb]
    Tensor<T> y_emb;  // [K+1, emb], row K = null label; conditional only
    Linear<T> fc_e;
    Linear<T> proj1, proj2, proj3;
    Conv<T> ci, c1, down, up, d1, co;
    std::vector<Conv<T>> mids;

    Denoiser() = default;

    Denoiser(bool conditional_, int t_steps, int base_, int emb_, int mid_blocks_, Rng& rng)
        : conditional(conditional_), T_steps(t_steps), base(base_), emb(emb_), mid_blocks(mid_blocks_) {
        t_emb = init_normal<T>({T_steps, emb}, rng);
        if (conditional) y_emb = init_normal<T>({kNumClasses + 1, emb}, rng);
        fc_e = Linear<T>(emb, emb, rng);
        int C = base;
        proj1 = Linear<T>(emb, C, rng);
        proj2 = Linear<T>(emb, 2 * C, rng);
        proj3 = Linear<T>(emb, C, rng);
        ci = Conv<T>(1, C, 3, rng);
        c1 = Conv<T>(C, C, 3, rng);
        down = Conv<T>(C, 2 * C, 3, rng, /*stride=*/2);
        for (int i = 0; i < mid_blocks; ++i) mids.emplace_back(2 * C, 2 * C, 3, rng);
        up = Conv<T>(2 * C, C, 3, rng);
        d1 = Conv<T>(C, C, 3, rng);
        co = Conv<T>(C, 1, 3, rng);
    }

    std::vector<Tensor<T>> params() const {
        std::vector<Tensor<T>> p;
        p.push_back(t_emb);
        if (conditional) p.push_back(y_emb);
        auto lin = [&](const Linear<T>& l) {
            p.push_back(l.w);
            p.push_back(l.b);
        };
        auto cv = [&](const Conv<T>& c) {
            p.push_back(c.w);
            p.push_back(c.b);
        };
        lin(fc_e);
        lin(proj1);
        lin(proj2);
        lin(proj3);
        cv(ci);
        cv(c1);
        cv(down);
        for (const auto& m : mids) cv(m);
        cv(up);
        cv(d1);
        cv(co);
        return p;
    }

    json arch() const {
        return {{"kind", "denoiser"}, {"conditional", conditional}, {"T", T_steps},
                {"base", base},       {"emb", emb},                 {"mid_blocks", mid_blocks},
                {"K", kNumClasses}};
    }

    // x: [B,1,16,16] in noised [-1,1] space; t: per-item steps 1..T;
    // y: per-item labels 0..K (K = null), required iff conditional
    Tensor<T> epsilon(const Tensor<T>& x, const std::vector<int>& t, const std::vector<int>* y) const {
        const int B = x.shape()[0];
        if (static_cast<int>(t.size()) != B) throw ShapeError("denoiser: t count != batch");
        if (conditional != (y != nullptr))
            throw ValueError(conditional ? "conditional denoiser requires labels"
                                         : "unconditional denoiser rejects labels");
        std::vector<int> t_idx(t.size());
        for (size_t i = 0; i < t.size(); ++i) {
            if (t[i] < 1 || t[i] > T_steps) throw ValueError("denoiser: t out of range 1..T");
            t_idx[i] = t[i] - 1;
        }
        auto e = embedding(t_emb, t_idx);
        if (conditional) {
            for (int yi : *y)
                if (yi < 0 || yi > kNumClasses) throw ValueError("denoiser: label out of range 0..K");
            e = add(e, embedding(y_emb, *y));
        }
        e = silu(fc_e(e));
        auto h = silu(ci(x));
        h = add_sample_channel_bias(h, proj1(e));
        h = silu(c1(h));
        auto s = h;
        h = silu(down(h));
        h = add_sample_channel_bias(h, proj2(e));
        for (const auto& m : mids) h = silu(m(h));
        h = upsample_nearest2x(h);
        h = silu(up(h));
        h = add(h, s);
        h = add_sample_channel_bias(h, proj3(e));
        h = silu(d1(h));
        return co(h);
    }
};

// ---------------------------------------------------------------- checkpoints

namespace detail {

template <class T>
std::vector<std::byte> param_blob(const std::vector<Tensor<T>>& params) {
    std::vector<std::byte> blob;
    for (const auto& p : params) {
        std::vector<float> f(p.data().begin(), p.data().end());
        append_f32(blob, f.data(), f.size());
    }
    return blob;
}

template <class T>
void load_params(std::vector<Tensor<T>> params, const std::vector<std::byte>& blob) {
    size_t total = 0;
    for (const auto& p : params) total += p.data().size();
    if (blob.size() != total * 4) throw IoError("checkpoint parameter blob size mismatch");
    size_t off = 0;
    for (auto& p : params) {
        auto d = p.mutable_data();
        for (auto& v : d) {
            float f;
            std::memcpy(&f, blob.data() + off, 4);
            v = static_cast<T>(f);
            off += 4;
        }
    }
}

}  // namespace detail

template <class T>
void save_classifier(const std::filesystem::path& path, const Classifier<T>& m) {
    Container c;
    c.magic = "SDAC";
    c.version = 1;
    c.header = {{"arch", m.arch()},
                {"domain_tag", m.domain_tag},
                {"training_seed", m.training_seed},
                {"epoch", m.epoch},
                {"extra", m.extra.is_null() ? json::object() : m.extra}};
    c.payload = detail::param_blob(m.params());
    save_container(path, c);
}

template <class T>
Classifier<T> load_classifier(const std::filesystem::path& path) {
    Container c = load_container(path, "SDAC");
    if (c.version != 1) throw IoError("unsupported SDAC version");
    json arch = c.header.at("arch");
    if (arch.at("kind") != "classifier") throw IoError("checkpoint is not a classifier");
    Rng rng(0);  // placeholder init, immediately overwritten
    Classifier<T> m(arch.at("width").get<int>(), rng);
    m.domain_tag = c.header.at("domain_tag").get<std::string>();
    m.training_seed = c.header.at("training_seed").get<uint64_t>();
    m.epoch = c.header.at("epoch").get<int>();
    m.extra = c.header.value("extra", json::object());
    detail::load_params(m.params(), c.payload);
    return m;
}

template <class T>
void save_denoiser(const std::filesystem::path& path, const Denoiser<T>& m) {
    Container c;
    c.magic = "SDAC";
    c.version = 1;
    c.header = {{"arch", m.arch()},
                {"domain_tag", m.domain_tag},
                {"training_seed", m.training_seed},
                {"epoch", m.epoch},
                {"extra", json::object()}};
    c.payload = detail::param_blob(m.params());
    save_container(path, c);
}

template <class T>
Denoiser<T> load_denoiser(const std::filesystem::path& path) {
    Container c = load_container(path, "SDAC");
    if (c.version != 1) throw IoError("unsupported SDAC version");
    json arch = c.header.at("arch");
    if (arch.at("kind") != "denoiser") throw IoError("checkpoint is not a denoiser");
    Rng rng(0);
    Denoiser<T> m(arch.at("conditional").get<bool>(), arch.at("T").get<int>(),
                  arch.at("base").get<int>(), arch.at("emb").get<int>(),
                  arch.at("mid_blocks").get<int>(), rng);
    m.domain_tag = c.header.at("domain_tag").get<std::string>();
    m.training_seed = c.header.at("training_seed").get<uint64_t>();
    m.epoch = c.header.at("epoch").get<int>();
    detail::load_params(m.params(), c.payload);
    return m;
}

template <class T>
std::string checkpoint_hash(const std::filesystem::path& path) {
    return file_hash_hex(path);
}

// deep copy with fresh leaf tensors (fine-tuning must not mutate the source)
template <class T>
Classifier<T> clone_classifier(const Classifier<T>& m) {
    Classifier<T> out = m;
    auto copy = [](Tensor<T>& t) {
        t = Tensor<T>::from(t.shape(), std::vector<T>(t.data().begin(), t.data().end()), true);
    };
    copy(out.conv1.w);
    copy(out.conv1.b);
    copy(out.conv2.w);
    copy(out.conv2.b);
    copy(out.fc.w);
    copy(out.fc.b);
    return out;
}

// batch assembly: dataset images ([0,1]) -> [B,1,16,16] tensor in [-1,1]
template <class T>
Tensor<T> batch_to_tensor(const LabeledDataset& ds, const std::vector<int64_t>& idx) {
    std::vector<T> data(idx.size() * kImagePixels);
    for (size_t i = 0; i < idx.size(); ++i) {
        const auto& im = ds.images.at(static_cast<size_t>(idx[i]));
        for (int p = 0; p < kImagePixels; ++p)
            data[i * kImagePixels + p] = static_cast<T>(2.0f * im.px[static_cast<size_t>(p)] - 1.0f);
    }
    return Tensor<T>::from({static_cast<int>(idx.size()), 1, kImageH, kImageW}, std::move(data));
}

template <class T>
Tensor<T> batch_to_tensor(const LabeledDataset& ds, const std::vector<int>& idx) {
    return batch_to_tensor<T>(ds, std::vector<int64_t>(idx.begin(), idx.end()));
}

template <class T>
Tensor<T> image_to_tensor(const Image& im) {
    std::vector<T> data(kImagePixels);
    for (int p = 0; p < kImagePixels; ++p)
        data[static_cast<size_t>(p)] = static_cast<T>(2.0f * im.px[static_cast<size_t>(p)] - 1.0f);
    return Tensor<T>::from({1, 1, kImageH, kImageW}, std::move(data));
}

}  // namespace sda
