#pragma once

#include <string>

#include "meow/transformer.hpp"

namespace meow::tfm {

// "MEOWCK1\0" container:
//   magic[8]
//   u32 n_meta    { u32 klen, key, u32 vlen, value } ...   (sorted by key)
//   u32 n_tensors { u32 nlen, name, u8 rank=2, u64 rows, u64 cols, f32 data } ...
//   u32 crc32 over every preceding byte
// Config fields are stored in the metadata block alongside caller metadata.
// load() rebuilds the config, checks the CRC, and validates every core tensor
// shape against the config (extra tensors such as conditioning adaptors are
// kept as-is). Bitwise round trip for float weights.
void save_checkpoint(const ModelWeights<float>& w, const std::string& path);
ModelWeights<float> load_checkpoint(const std::string& path);

}  // namespace meow::tfm
