#include "meow/tensor_io.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace meow::data {

uint32_t crc32(const void* bytes, size_t len, uint32_t crc) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    const uint8_t* p = static_cast<const uint8_t*>(bytes);
    uint32_t c = crc ^ 0xffffffffu;
    for (size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

namespace {

constexpr char kTensorMagic[8] = {'M', 'E', 'O', 'W', 'T', 'N', '1', '\0'};

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

uint32_t get_u32(const uint8_t* p) {
    return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
           uint32_t(p[3]) << 24;
}

uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
    return v;
}

}  // namespace

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, const void* bytes, size_t len) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(len));
    if (!f) throw IoError("write failed: " + path);
}

void write_tensor(const std::string& path, const TensorData& t) {
    const uint64_t n = t.elem_count();
    if (t.dtype == Dtype::f32 && t.f32.size() != n) {
        throw ShapeError("write_tensor: f32 payload size does not match dims");
    }
    if (t.dtype == Dtype::i32 && t.i32.size() != n) {
        throw ShapeError("write_tensor: i32 payload size does not match dims");
    }
    std::string out;
    append(out, kTensorMagic, 8);
    const uint8_t dtype = static_cast<uint8_t>(t.dtype);
    const uint8_t rank = static_cast<uint8_t>(t.dims.size());
    append(out, &dtype, 1);
    append(out, &rank, 1);
    for (uint64_t d : t.dims) append_u64(out, d);
    if (t.dtype == Dtype::f32) {
        append(out, t.f32.data(), t.f32.size() * 4);
    } else {
        append(out, t.i32.data(), t.i32.size() * 4);
    }
    append_u32(out, crc32(out.data(), out.size()));
    write_file_bytes(path, out.data(), out.size());
}

TensorData read_tensor(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() < 8 + 2 + 4) throw ChecksumError("tensor file too short: " + path);
    if (std::memcmp(bytes.data(), kTensorMagic, 8) != 0) {
        throw ValidationError("tensor magic mismatch: " + path);
    }
    const uint32_t stored = get_u32(bytes.data() + bytes.size() - 4);
    const uint32_t actual = crc32(bytes.data(), bytes.size() - 4);
    if (stored != actual) throw ChecksumError("tensor CRC mismatch: " + path);

    TensorData t;
    const uint8_t dtype = bytes[8];
    const uint8_t rank = bytes[9];
    if (dtype > 1) throw ValidationError("tensor dtype code unknown: " + path);
    t.dtype = static_cast<Dtype>(dtype);
    size_t pos = 10;
    if (pos + 8ull * rank > bytes.size() - 4) {
        throw ChecksumError("tensor header truncated: " + path);
    }
    t.dims.resize(rank);
    for (size_t i = 0; i < rank; ++i) {
        t.dims[i] = get_u64(bytes.data() + pos);
        pos += 8;
    }
    const uint64_t n = t.elem_count();
    if (pos + n * 4 != bytes.size() - 4) {
        throw ChecksumError("tensor payload size inconsistent with dims: " + path);
    }
    if (t.dtype == Dtype::f32) {
        t.f32.resize(n);
        std::memcpy(t.f32.data(), bytes.data() + pos, n * 4);
    } else {
        t.i32.resize(n);
        std::memcpy(t.i32.data(), bytes.data() + pos, n * 4);
    }
    return t;
}

void write_tensor_f32(const std::string& path, const MatF& m) {
    TensorData t;
    t.dtype = Dtype::f32;
    t.dims = {m.rows, m.cols};
    t.f32 = m.v;
    write_tensor(path, t);
}

MatF read_tensor_f32_2d(const std::string& path) {
    const TensorData t = read_tensor(path);
    if (t.dtype != Dtype::f32 || t.dims.size() != 2) {
        throw ShapeError("expected rank-2 f32 tensor: " + path);
    }
    MatF m(static_cast<size_t>(t.dims[0]), static_cast<size_t>(t.dims[1]));
    m.v = t.f32;
    return m;
}

void write_codebook_file(const std::string& path, const char magic[8],
                         const CodebookFile& cb) {
    const size_t n = size_t(cb.n_levels) * cb.vocab_size * cb.frame_size;
    if (cb.centroids.size() != n) {
        throw ShapeError("codebook payload size does not match header fields");
    }
    std::string out;
    append(out, magic, 8);
    append_u32(out, cb.n_levels);
    append_u32(out, cb.vocab_size);
    append_u32(out, cb.frame_size);
    append(out, cb.centroids.data(), cb.centroids.size() * 4);
    write_file_bytes(path, out.data(), out.size());
}

CodebookFile read_codebook_file(const std::string& path, const char magic[8]) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() < 20) throw ChecksumError("codebook file too short: " + path);
    if (std::memcmp(bytes.data(), magic, 8) != 0) {
        throw ValidationError("codebook magic mismatch: " + path);
    }
    CodebookFile cb;
    cb.n_levels = get_u32(bytes.data() + 8);
    cb.vocab_size = get_u32(bytes.data() + 12);
    cb.frame_size = get_u32(bytes.data() + 16);
    const uint64_t n = uint64_t(cb.n_levels) * cb.vocab_size * cb.frame_size;
    if (20 + n * 4 != bytes.size()) {
        throw ChecksumError("codebook payload size inconsistent with header: " + path);
    }
    cb.centroids.resize(n);
    std::memcpy(cb.centroids.data(), bytes.data() + 20, n * 4);
    return cb;
}

}  // namespace meow::data
