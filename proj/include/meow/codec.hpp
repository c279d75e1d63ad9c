#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meow/audio.hpp"
#include "meow/dsp.hpp"
#include "meow/mat.hpp"

namespace meow::codec {

struct CodecConfig {
    size_t frame_size = 320;  // 50 frames/s at 16 kHz
    size_t n_levels = 8;
    size_t n_coarse = 4;
    size_t n_fine = 4;
    size_t vocab_size = 256;
    int sample_rate = audio::kDefaultSampleRate;

    void validate() const;
    double frames_per_second() const {
        return static_cast<double>(sample_rate) / static_cast<double>(frame_size);
    }
};

struct Codebook {
    size_t level = 0;
    MatF centroids;  // [vocab_size x frame_size]
};

struct AcousticTokenGrid {
    size_t n_frames = 0;
    size_t n_levels = 0;
    size_t vocab_size = 0;
    std::vector<int32_t> tokens;  // [n_frames x n_levels] row-major

    int32_t at(size_t t, size_t l) const { return tokens[t * n_levels + l]; }
    int32_t& at(size_t t, size_t l) { return tokens[t * n_levels + l]; }
    void validate() const;
};

// Sequential residual k-means. Level 0 clusters the DCT coefficients, level
// l > 0 clusters the residual left by levels < l. For levels >= 1 the
// minimum-norm centroid is snapped to the zero vector, which makes
// reconstruction error non-increasing in levels_used for any input, not just
// training data. Throws InsufficientDataError with fewer frames than
// vocab_size.
std::vector<Codebook> train_codebooks(const MatF& frames, const CodecConfig& cfg,
                                      uint64_t seed);

// Greedy per-level nearest-centroid encoding of the running residual.
AcousticTokenGrid encode_frames(const MatF& coeffs,
                                const std::vector<Codebook>& codebooks,
                                const CodecConfig& cfg);
AcousticTokenGrid encode(const audio::Waveform& w,
                         const std::vector<Codebook>& codebooks,
                         const CodecConfig& cfg);

// Sum of the first levels_used centroids per frame, then inverse transform.
MatF decode_frames(const AcousticTokenGrid& grid, size_t levels_used,
                   const std::vector<Codebook>& codebooks, const CodecConfig& cfg);
audio::Waveform decode(const AcousticTokenGrid& grid, size_t levels_used,
                       const std::vector<Codebook>& codebooks,
                       const CodecConfig& cfg);

// Column-wise split into the first n_coarse and remaining n_fine levels.
std::pair<AcousticTokenGrid, AcousticTokenGrid> split_coarse_fine(
    const AcousticTokenGrid& grid, const CodecConfig& cfg);
AcousticTokenGrid concat_levels(const AcousticTokenGrid& coarse,
                                const AcousticTokenGrid& fine);

// Bundles a trained codec for the pipeline; save/load use the "MEOWCB1\0"
// container.
class RvqCodec {
public:
    RvqCodec(CodecConfig cfg, std::vector<Codebook> codebooks);

    static RvqCodec train(const MatF& frames, const CodecConfig& cfg, uint64_t seed);
    static RvqCodec load(const std::string& path);
    void save(const std::string& path) const;

    const CodecConfig& config() const { return cfg_; }
    const std::vector<Codebook>& codebooks() const { return codebooks_; }

    // The codebook container does not record the coarse/fine split; callers
    // that load a codec restore it from their own manifest.
    void set_coarse_fine(size_t n_coarse, size_t n_fine);

    AcousticTokenGrid encode(const audio::Waveform& w) const;
    audio::Waveform decode(const AcousticTokenGrid& grid, size_t levels_used) const;

private:
    CodecConfig cfg_;
    std::vector<Codebook> codebooks_;
    dsp::FrameDct dct_;
};

}  // namespace meow::codec
