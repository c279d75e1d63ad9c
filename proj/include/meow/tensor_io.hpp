#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meow/error.hpp"
#include "meow/mat.hpp"

namespace meow::data {

// CRC-32 (IEEE, reflected, poly 0xEDB88320). Pass the previous return value
// as `crc` to continue a running checksum.
uint32_t crc32(const void* bytes, size_t len, uint32_t crc = 0);

enum class Dtype : uint8_t { f32 = 0, i32 = 1 };

// On-disk layout ("MEOWTN1\0" container):
//   magic[8] | dtype u8 | rank u8 | dims u64-le x rank | payload | crc32 u32-le
// The checksum covers every preceding byte including the magic.
struct TensorData {
    Dtype dtype = Dtype::f32;
    std::vector<uint64_t> dims;
    std::vector<float> f32;
    std::vector<int32_t> i32;

    uint64_t elem_count() const {
        uint64_t n = 1;
        for (uint64_t d : dims) n *= d;
        return dims.empty() ? 0 : n;
    }
};

void write_tensor(const std::string& path, const TensorData& t);
TensorData read_tensor(const std::string& path);

// Convenience wrappers for the common 2-D float case.
void write_tensor_f32(const std::string& path, const MatF& m);
MatF read_tensor_f32_2d(const std::string& path);

// Shared container for codec and semantic codebooks: the spec'd fixed layout
//   magic[8] | n_levels u32-le | vocab_size u32-le | frame_size u32-le |
//   centroids f32-le row-major [n_levels x vocab_size x frame_size]
struct CodebookFile {
    uint32_t n_levels = 0;
    uint32_t vocab_size = 0;
    uint32_t frame_size = 0;
    std::vector<float> centroids;
};

void write_codebook_file(const std::string& path, const char magic[8],
                         const CodebookFile& cb);
CodebookFile read_codebook_file(const std::string& path, const char magic[8]);

// Raw file helpers shared by the binary containers.
std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const void* bytes, size_t len);

}  // namespace meow::data
