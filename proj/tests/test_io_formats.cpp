#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "sda/data_forge.hpp"
#include "sda/io.hpp"
#include "sda/models.hpp"
#include "test_support.hpp"

using namespace sda;
namespace fs = std::filesystem;

namespace {

fs::path tmp_path(const std::string& name) {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "sda_io_tests";
        fs::create_directories(d);
        return d;
    }();
    return dir / name;
}

uint32_t u32_at(const std::vector<std::byte>& b, size_t off) {
    uint32_t v;
    std::memcpy(&v, b.data() + off, 4);
    return v;  // host is little-endian (asserted below)
}

}  // namespace

TEST_CASE("host is little-endian, as the f32/u16 payloads assume") {
    uint32_t probe = 1;
    unsigned char first;
    std::memcpy(&first, &probe, 1);
    REQUIRE(first == 1);
}

// ---------------------------------------------------------------- container

TEST_CASE("container layout: magic | version u32 LE | header_len u32 LE | JSON | payload") {
    Container c;
    c.magic = "SDAD";
    c.version = 1;
    c.header = {{"k", 3}};
    c.payload = {std::byte{0xAA}, std::byte{0xBB}};
    auto bytes = serialize_container(c);

    const std::string hdr = c.header.dump();
    REQUIRE(bytes.size() == 4 + 4 + 4 + hdr.size() + 2);
    REQUIRE(std::memcmp(bytes.data(), "SDAD", 4) == 0);
    REQUIRE(u32_at(bytes, 4) == 1);
    REQUIRE(u32_at(bytes, 8) == hdr.size());
    REQUIRE(std::memcmp(bytes.data() + 12, hdr.data(), hdr.size()) == 0);
    REQUIRE(bytes[bytes.size() - 2] == std::byte{0xAA});
    REQUIRE(bytes.back() == std::byte{0xBB});

    Container back = parse_container(bytes, "SDAD");
    REQUIRE(back.magic == "SDAD");
    REQUIRE(back.version == 1);
    REQUIRE(back.header == c.header);
    REQUIRE(back.payload == c.payload);
}

TEST_CASE("container parse rejects bad magic and truncated buffers") {
    Container c;
    c.magic = "SDAC";
    c.header = json::object();
    auto bytes = serialize_container(c);
    REQUIRE_THROWS_AS(parse_container(bytes, "SDAD"), IoError);

    std::vector<std::byte> tiny(bytes.begin(), bytes.begin() + 6);
    REQUIRE_THROWS_AS(parse_container(tiny, "SDAC"), IoError);

    auto lying = bytes;
    uint32_t huge = 1u << 30;
    std::memcpy(lying.data() + 8, &huge, 4);  // header_len beyond the buffer
    REQUIRE_THROWS_AS(parse_container(lying, "SDAC"), IoError);
}

TEST_CASE("fnv1a64 matches the reference vectors") {
    REQUIRE(fnv1a64(nullptr, 0) == 0xcbf29ce484222325ULL);
    REQUIRE(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cULL);
    REQUIRE(hex64(0xcbf29ce484222325ULL) == "cbf29ce484222325");
    REQUIRE(hex64(0x1ULL) == "0000000000000001");
}

TEST_CASE("text file helpers round-trip") {
    fs::path p = tmp_path("note.txt");
    write_text_file(p, "line one\nline two\n");
    REQUIRE(read_text_file(p) == "line one\nline two\n");
    REQUIRE_THROWS_AS(read_text_file(tmp_path("missing.txt")), IoError);
}

// ---------------------------------------------------------------- SDAD

TEST_CASE("SDAD save/load round-trips every field byte-identically") {
    LabeledDataset ds = build_split(77, 4, Split::test);
    ds.domain_tag = "target(fog,5)";
    fs::path p = tmp_path("ds.sdad");
    save_dataset(p, ds);

    LabeledDataset back = load_dataset(p);
    REQUIRE(back.num_classes == ds.num_classes);
    REQUIRE(back.domain_tag == ds.domain_tag);
    REQUIRE(back.seed == ds.seed);
    REQUIRE(back.labels == ds.labels);
    REQUIRE(back.size() == ds.size());
    for (size_t i = 0; i < ds.size(); ++i)
        REQUIRE(std::memcmp(back.images[i].px.data(), ds.images[i].px.data(),
                            sizeof(ds.images[i].px)) == 0);

    // save(load(x)) reproduces the file bytes exactly
    fs::path p2 = tmp_path("ds2.sdad");
    save_dataset(p2, back);
    REQUIRE(read_file_bytes(p) == read_file_bytes(p2));
    REQUIRE(file_hash_hex(p) == file_hash_hex(p2));
}

TEST_CASE("SDAD header carries K, counts, domain_tag, seed") {
    LabeledDataset ds = build_split(5, 3, Split::train);
    fs::path p = tmp_path("hdr.sdad");
    save_dataset(p, ds);
    Container c = load_container(p, "SDAD");
    REQUIRE(c.version == 1);
    REQUIRE(c.header.at("K").get<int>() == kNumClasses);
    REQUIRE(c.header.at("seed").get<uint64_t>() == 5);
    REQUIRE(c.header.at("domain_tag").get<std::string>() == "source");
    auto counts = c.header.at("counts").get<std::vector<int>>();
    REQUIRE(counts.size() == static_cast<size_t>(kNumClasses));
    for (int n : counts) REQUIRE(n == 3);
}

TEST_CASE("SDAD load rejects tampered files") {
    LabeledDataset ds = build_split(9, 2, Split::train);
    fs::path p = tmp_path("bad.sdad");
    save_dataset(p, ds);
    auto bytes = read_file_bytes(p);

    // truncated payload
    std::vector<std::byte> cut(bytes.begin(), bytes.end() - 8);
    fs::path pc = tmp_path("cut.sdad");
    write_file_bytes(pc, cut.data(), cut.size());
    REQUIRE_THROWS_AS(load_dataset(pc), IoError);

    // out-of-range label in the trailing u16 block
    auto evil = bytes;
    uint16_t big = 999;
    std::memcpy(evil.data() + evil.size() - 2, &big, 2);
    fs::path pe = tmp_path("evil.sdad");
    write_file_bytes(pe, evil.data(), evil.size());
    REQUIRE_THROWS_AS(load_dataset(pe), IoError);

    // unsupported version
    auto vbad = bytes;
    uint32_t v2 = 2;
    std::memcpy(vbad.data() + 4, &v2, 4);
    fs::path pv = tmp_path("v2.sdad");
    write_file_bytes(pv, vbad.data(), vbad.size());
    REQUIRE_THROWS_AS(load_dataset(pv), IoError);
}

TEST_CASE("dataset_hash agrees with the serialized container bytes") {
    LabeledDataset ds = build_split(13, 2, Split::train);
    fs::path p = tmp_path("hash.sdad");
    save_dataset(p, ds);
    REQUIRE(dataset_hash(ds) == file_hash_hex(p));
}

// ---------------------------------------------------------------- SDAC

TEST_CASE("classifier checkpoint round-trips bitwise for float params") {
    Rng rng(5);
    Classifier<float> m(1, rng);
    m.domain_tag = "synthetic_aligned";
    m.training_seed = 1234;
    m.epoch = 17;
    m.extra = {{"lr", 0.001}};
    fs::path p = tmp_path("cls.sdac");
    save_classifier(p, m);

    Classifier<float> back = load_classifier<float>(p);
    REQUIRE(back.width == m.width);
    REQUIRE(back.domain_tag == "synthetic_aligned");
    REQUIRE(back.training_seed == 1234);
    REQUIRE(back.epoch == 17);
    REQUIRE(back.extra.at("lr").get<double>() == 0.001);
    auto pa = m.params(), pb = back.params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        auto da = pa[i].data(), db = pb[i].data();
        REQUIRE(da.size() == db.size());
        REQUIRE(std::memcmp(da.data(), db.data(), da.size() * sizeof(float)) == 0);
    }

    fs::path p2 = tmp_path("cls2.sdac");
    save_classifier(p2, back);
    REQUIRE(read_file_bytes(p) == read_file_bytes(p2));
}

TEST_CASE("double-precision checkpoints are stable after one f32 cast") {
    Rng rng(6);
    Classifier<double> m(1, rng);
    fs::path a = tmp_path("d1.sdac"), b = tmp_path("d2.sdac");
    save_classifier(a, m);
    save_classifier(b, load_classifier<double>(a));
    REQUIRE(read_file_bytes(a) == read_file_bytes(b));
}

TEST_CASE("checkpoint loaders reject wrong kinds and wrong magic") {
    Rng rng(7);
    Classifier<float> m(1, rng);
    fs::path p = tmp_path("kind.sdac");
    save_classifier(p, m);
    REQUIRE_THROWS_AS(load_denoiser<float>(p), IoError);

    LabeledDataset ds = build_split(1, 1, Split::train);
    fs::path pd = tmp_path("notckpt.sdad");
    save_dataset(pd, ds);
    REQUIRE_THROWS_AS(load_classifier<float>(pd), IoError);
    REQUIRE_THROWS_AS(load_dataset(p), IoError);
}

TEST_CASE("checkpoint_hash is the container file hash") {
    Rng rng(8);
    Classifier<float> m(1, rng);
    fs::path p = tmp_path("h.sdac");
    save_classifier(p, m);
    REQUIRE(checkpoint_hash<float>(p) == file_hash_hex(p));
    REQUIRE(checkpoint_hash<float>(p).size() == 16);
}
