#include "meow/checkpoint.hpp"

#include <cstring>

#include "meow/error.hpp"
#include "meow/tensor_io.hpp"

namespace meow::tfm {

namespace {

constexpr char kMagic[8] = {'M', 'E', 'O', 'W', 'C', 'K', '1', '\0'};
constexpr const char* kConfigKeys[] = {
    "config.arch",       "config.n_layers", "config.n_heads",
    "config.d_model",    "config.d_ff",     "config.vocab_size",
    "config.max_len",    "config.rel_buckets", "config.rel_max_distance",
};

void append(std::string& out, const void* p, size_t n) {
    out.append(static_cast<const char*>(p), n);
}

void append_u32(std::string& out, uint32_t v) {
    uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
    append(out, b, 4);
}

void append_u64(std::string& out, uint64_t v) {
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = uint8_t(v >> (8 * i));
    append(out, b, 8);
}

void append_str(std::string& out, const std::string& s) {
    append_u32(out, static_cast<uint32_t>(s.size()));
    append(out, s.data(), s.size());
}

struct Reader {
    const uint8_t* p;
    size_t n;
    size_t pos = 0;
    const std::string& path;

    void need(size_t k) const {
        if (pos + k > n) throw ChecksumError("checkpoint truncated: " + path);
    }
    uint8_t u8() {
        need(1);
        return p[pos++];
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str() {
        const uint32_t len = u32();
        need(len);
        std::string s(reinterpret_cast<const char*>(p + pos), len);
        pos += len;
        return s;
    }
};

std::map<std::string, std::string> config_to_meta(const TransformerConfig& c) {
    return {
        {"config.arch", arch_name(c.arch)},
        {"config.n_layers", std::to_string(c.n_layers)},
        {"config.n_heads", std::to_string(c.n_heads)},
        {"config.d_model", std::to_string(c.d_model)},
        {"config.d_ff", std::to_string(c.d_ff)},
        {"config.vocab_size", std::to_string(c.vocab_size)},
        {"config.max_len", std::to_string(c.max_len)},
        {"config.rel_buckets", std::to_string(c.rel_buckets)},
        {"config.rel_max_distance", std::to_string(c.rel_max_distance)},
    };
}

size_t meta_size_t(const std::map<std::string, std::string>& meta,
                   const std::string& key, const std::string& path) {
    const auto it = meta.find(key);
    if (it == meta.end()) {
        throw ValidationError("checkpoint missing config key '" + key + "': " + path);
    }
    return static_cast<size_t>(std::stoull(it->second));
}

}  // namespace

void save_checkpoint(const ModelWeights<float>& w, const std::string& path) {
    std::string out;
    append(out, kMagic, 8);

    std::map<std::string, std::string> meta = w.metadata;
    for (const auto& [k, v] : config_to_meta(w.config)) meta[k] = v;

    append_u32(out, static_cast<uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
        append_str(out, k);
        append_str(out, v);
    }
    append_u32(out, static_cast<uint32_t>(w.tensors.size()));
    for (const auto& [name, t] : w.tensors) {
        append_str(out, name);
        const uint8_t rank = 2;
        append(out, &rank, 1);
        append_u64(out, t.rows);
        append_u64(out, t.cols);
        append(out, t.v.data(), t.v.size() * 4);
    }
    append_u32(out, data::crc32(out.data(), out.size()));
    data::write_file_bytes(path, out.data(), out.size());
}

ModelWeights<float> load_checkpoint(const std::string& path) {
    const auto bytes = data::read_file_bytes(path);
    if (bytes.size() < 8 + 4 + 4 + 4) {
        throw ChecksumError("checkpoint too short: " + path);
    }
    if (std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw ValidationError("checkpoint magic mismatch: " + path);
    }
    uint32_t stored = 0;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    const uint32_t actual = data::crc32(bytes.data(), bytes.size() - 4);
    if (stored != actual) throw ChecksumError("checkpoint CRC mismatch: " + path);

    Reader r{bytes.data(), bytes.size() - 4, 8, path};
    ModelWeights<float> w;
    const uint32_t n_meta = r.u32();
    for (uint32_t i = 0; i < n_meta; ++i) {
        const std::string k = r.str();
        w.metadata[k] = r.str();
    }

    TransformerConfig c;
    c.arch = arch_from_name(w.metadata.at("config.arch"));
    c.n_layers = meta_size_t(w.metadata, "config.n_layers", path);
    c.n_heads = meta_size_t(w.metadata, "config.n_heads", path);
    c.d_model = meta_size_t(w.metadata, "config.d_model", path);
    c.d_ff = meta_size_t(w.metadata, "config.d_ff", path);
    c.vocab_size = meta_size_t(w.metadata, "config.vocab_size", path);
    c.max_len = meta_size_t(w.metadata, "config.max_len", path);
    c.rel_buckets = meta_size_t(w.metadata, "config.rel_buckets", path);
    c.rel_max_distance = meta_size_t(w.metadata, "config.rel_max_distance", path);
    w.config = c;
    for (const char* key : kConfigKeys) w.metadata.erase(key);

    const uint32_t n_tensors = r.u32();
    for (uint32_t i = 0; i < n_tensors; ++i) {
        const std::string name = r.str();
        const uint8_t rank = r.u8();
        if (rank != 2) throw ValidationError("checkpoint tensor rank != 2: " + name);
        const uint64_t rows = r.u64();
        const uint64_t cols = r.u64();
        Mat<float> t(static_cast<size_t>(rows), static_cast<size_t>(cols));
        r.need(t.size() * 4);
        std::memcpy(t.v.data(), r.p + r.pos, t.size() * 4);
        r.pos += t.size() * 4;
        w.tensors.emplace(name, std::move(t));
    }
    if (r.pos != r.n) throw ChecksumError("checkpoint has trailing bytes: " + path);

    for (const auto& [name, shape] : expected_shapes(c)) {
        const auto it = w.tensors.find(name);
        if (it == w.tensors.end()) {
            throw ShapeError("checkpoint missing tensor '" + name + "': " + path);
        }
        if (it->second.rows != shape.first || it->second.cols != shape.second) {
            throw ShapeError("checkpoint tensor '" + name + "' has shape " +
                             std::to_string(it->second.rows) + "x" +
                             std::to_string(it->second.cols) + ", config implies " +
                             std::to_string(shape.first) + "x" +
                             std::to_string(shape.second) + ": " + path);
        }
    }
    return w;
}

}  // namespace meow::tfm
