#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "meow/audio.hpp"
#include "meow/checkpoint.hpp"
#include "meow/rng.hpp"
#include "meow/tensor_io.hpp"

using namespace meow;
namespace fs = std::filesystem;

namespace {

std::string temp_dir() {
    static const std::string dir = [] {
        auto d = fs::temp_directory_path() / "meow_io_test";
        fs::create_directories(d);
        return d.string();
    }();
    return dir;
}

std::string tmp(const std::string& name) { return temp_dir() + "/" + name; }

void truncate_file(const std::string& path, size_t drop_bytes) {
    auto bytes = data::read_file_bytes(path);
    bytes.resize(bytes.size() - drop_bytes);
    data::write_file_bytes(path, bytes.data(), bytes.size());
}

}  // namespace

TEST_CASE("crc32 matches the standard check value") {
    // CRC-32 of "123456789" is the classic conformance vector.
    CHECK(data::crc32("123456789", 9) == 0xCBF43926u);
    // Running form.
    const uint32_t part = data::crc32("12345", 5);
    CHECK(data::crc32("6789", 4, part) == 0xCBF43926u);
}

TEST_CASE("tensor container round-trips bitwise") {
    Rng rng(5);
    data::TensorData t;
    t.dtype = data::Dtype::f32;
    t.dims = {10, 768};
    t.f32.resize(10 * 768);
    for (auto& x : t.f32) x = static_cast<float>(rng.normal());
    const std::string path = tmp("tensor.meowtn");
    data::write_tensor(path, t);
    const data::TensorData r = data::read_tensor(path);
    CHECK(r.dims == t.dims);
    CHECK(r.f32 == t.f32);  // bitwise
}

TEST_CASE("tensor header declares the written shape") {
    MatF m(10, 768);
    const std::string path = tmp("feat.meowtn");
    data::write_tensor_f32(path, m);
    const data::TensorData r = data::read_tensor(path);
    REQUIRE(r.dims.size() == 2);
    CHECK(r.dims[0] == 10);
    CHECK(r.dims[1] == 768);
}

TEST_CASE("tensor container rejects corruption") {
    data::TensorData t;
    t.dtype = data::Dtype::i32;
    t.dims = {4};
    t.i32 = {1, 2, 3, 4};
    const std::string path = tmp("corrupt.meowtn");
    data::write_tensor(path, t);

    SUBCASE("truncated payload") {
        truncate_file(path, 3);
        CHECK_THROWS_AS(data::read_tensor(path), ChecksumError);
    }
    SUBCASE("flipped byte") {
        auto bytes = data::read_file_bytes(path);
        bytes[12] ^= 0x40;
        data::write_file_bytes(path, bytes.data(), bytes.size());
        CHECK_THROWS_AS(data::read_tensor(path), ChecksumError);
    }
    SUBCASE("magic mismatch") {
        auto bytes = data::read_file_bytes(path);
        bytes[0] = 'X';
        data::write_file_bytes(path, bytes.data(), bytes.size());
        CHECK_THROWS_AS(data::read_tensor(path), ValidationError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(data::read_tensor(tmp("nope.meowtn")), IoError);
    }
}

TEST_CASE("wav io round-trips within 16-bit quantization") {
    Rng rng(9);
    audio::Waveform w;
    w.sample_rate = 16000;
    w.samples.resize(16000);
    for (auto& s : w.samples) s = static_cast<float>(0.8 * std::sin(rng.uniform() * 6.28));
    const std::string path = tmp("clip.wav");
    audio::write_wav(path, w);
    const audio::Waveform r = audio::read_wav(path);
    REQUIRE(r.samples.size() == w.samples.size());
    CHECK(r.sample_rate == 16000);
    for (size_t i = 0; i < w.samples.size(); ++i) {
        CHECK(std::abs(r.samples[i] - w.samples[i]) < 1.0f / 32000.0f);
    }
}

TEST_CASE("codebook container round-trips and validates") {
    const char magic[8] = {'M', 'E', 'O', 'W', 'C', 'B', '1', '\0'};
    data::CodebookFile cb;
    cb.n_levels = 2;
    cb.vocab_size = 3;
    cb.frame_size = 4;
    cb.centroids.resize(24);
    for (size_t i = 0; i < cb.centroids.size(); ++i) cb.centroids[i] = float(i) * 0.5f;
    const std::string path = tmp("books.meowcb");
    data::write_codebook_file(path, magic, cb);
    const data::CodebookFile r = data::read_codebook_file(path, magic);
    CHECK(r.n_levels == 2);
    CHECK(r.centroids == cb.centroids);

    const char wrong[8] = {'M', 'E', 'O', 'W', 'S', 'C', '1', '\0'};
    CHECK_THROWS_AS(data::read_codebook_file(path, wrong), ValidationError);
    truncate_file(path, 4);
    CHECK_THROWS_AS(data::read_codebook_file(path, magic), ChecksumError);
}

TEST_CASE("checkpoint round-trips every parameter bitwise") {
    tfm::TransformerConfig cfg;
    cfg.arch = tfm::Arch::encoder_decoder;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.vocab_size = 11;
    cfg.max_len = 64;
    auto w = tfm::init_weights<float>(cfg, 77);
    w.metadata["stage"] = "1";
    w.tensors.emplace("adaptor.clip-like.w", MatF(16, 8));

    const std::string path = tmp("model.meowck");
    tfm::save_checkpoint(w, path);
    const auto r = tfm::load_checkpoint(path);
    CHECK(r.config.arch == cfg.arch);
    CHECK(r.config.d_model == cfg.d_model);
    CHECK(r.metadata.at("stage") == "1");
    REQUIRE(r.tensors.size() == w.tensors.size());
    for (const auto& [name, t] : w.tensors) {
        const auto& rt = r.tensors.at(name);
        REQUIRE(rt.same_shape(t));
        CHECK(rt.v == t.v);  // bitwise
    }
}

TEST_CASE("checkpoint rejects truncation without partial weights") {
    tfm::TransformerConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.vocab_size = 7;
    auto w = tfm::init_weights<float>(cfg, 3);
    const std::string path = tmp("trunc.meowck");
    tfm::save_checkpoint(w, path);
    truncate_file(path, 17);
    CHECK_THROWS_AS(tfm::load_checkpoint(path), ChecksumError);
}

TEST_CASE("checkpoint cross-config load names the offending tensor") {
    tfm::TransformerConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.vocab_size = 7;
    auto w = tfm::init_weights<float>(cfg, 3);
    // Lie about d_model in the stored config.
    auto bad = w;
    bad.config.d_model = 16;
    bad.config.n_heads = 4;
    // Replace tensors with ones matching the original (8-wide) shapes so the
    // config and payload disagree.
    const std::string path = tmp("shape.meowck");
    tfm::save_checkpoint(bad, path);
    try {
        tfm::load_checkpoint(path);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        // First mismatch in name order is the relative-bias table (2 heads
        // stored, 4 implied by the doctored config).
        CHECK(std::string(e.what()).find("dec.L0.attn.relbias") != std::string::npos);
        CHECK(std::string(e.what()).find("2x32") != std::string::npos);
        CHECK(std::string(e.what()).find("4x32") != std::string::npos);
    }
}
