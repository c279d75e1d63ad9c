#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meow/audio.hpp"
#include "meow/mat.hpp"

namespace meow::semantic {

struct SemanticConfig {
    int sample_rate = audio::kDefaultSampleRate;
    size_t frame_rate = 25;  // tokens per second
    size_t n_bands = 64;     // embedding dimension
    size_t vocab_size = 1024;
    // Per-band mean/variance normalization over the clip. Disabled by the
    // concatenation property test, which needs a purely per-window extractor.
    bool per_clip_normalize = true;

    void validate() const;
    size_t window() const { return static_cast<size_t>(sample_rate) / frame_rate; }
};

struct FrameEmbeddingSequence {
    MatF embeddings;  // [T x n_bands]
    size_t frame_rate = 25;
};

struct SemanticCodebook {
    MatF centroids;  // [vocab_size x n_bands]
};

struct SemanticTokenSequence {
    std::vector<int32_t> tokens;
    size_t frame_rate = 25;
};

// Log mel filterbank energies at the semantic frame rate, optionally
// normalized per band over the clip. Exactly floor(duration * frame_rate)
// frames; throws DomainError if the clip is shorter than one window.
FrameEmbeddingSequence extract_frame_embeddings(const audio::Waveform& w,
                                                const SemanticConfig& cfg);

// k-means over the concatenated frames of all sequences.
SemanticCodebook train_semantic_codebook(
    const std::vector<FrameEmbeddingSequence>& sequences, size_t k, uint64_t seed);

// Nearest-centroid index per frame, ties to the lowest index.
SemanticTokenSequence tokenize_embeddings(const FrameEmbeddingSequence& emb,
                                          const SemanticCodebook& codebook);
SemanticTokenSequence tokenize(const audio::Waveform& w,
                               const SemanticCodebook& codebook,
                               const SemanticConfig& cfg);

// "MEOWSC1\0" container (same layout as codec codebooks, n_levels = 1).
void save_semantic_codebook(const std::string& path, const SemanticCodebook& cb);
SemanticCodebook load_semantic_codebook(const std::string& path);

}  // namespace meow::semantic
