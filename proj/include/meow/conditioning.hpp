#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "meow/mat.hpp"

namespace meow::cond {

enum class FeatureKind { clip_like, flow_like };

const char* kind_name(FeatureKind k);
FeatureKind kind_from_name(const std::string& name);
size_t default_dim(FeatureKind k);  // 768 clip-like, 1024 flow-like

constexpr size_t kStyleDim = 128;
constexpr size_t kDefaultGridVocab = 8192;

struct VisualEmbeddingSequence {
    FeatureKind kind = FeatureKind::clip_like;
    MatF vectors;           // [T x dim]
    size_t frame_rate = 1;  // frames per second of video
};

struct VisualTokenGrid {
    size_t n_frames = 0;
    size_t tokens_per_frame = 0;  // (H/Dq) * (W/Dq)
    size_t vocab = kDefaultGridVocab;
    std::vector<int32_t> tokens;  // [T x tokens_per_frame]

    int32_t at(size_t t, size_t g) const { return tokens[t * tokens_per_frame + g]; }
};

struct StyleEmbedding {
    std::vector<float> v;  // kStyleDim, unit norm
};

struct ConditioningBundle {
    std::vector<VisualEmbeddingSequence> embeddings;
    std::optional<VisualTokenGrid> token_grid;
    std::optional<StyleEmbedding> style;
    double duration_s = 0.0;
};

// Mean over segment embeddings, then L2 normalization.
StyleEmbedding average_segment_embeddings(const std::vector<std::vector<float>>& segments);

// Per frame, the mean embedding of that frame's tokens: [T x table_cols].
MatF pool_token_grid(const VisualTokenGrid& grid, const MatF& embedding_table);

// Per-kind affine maps into the model dimension. Keys: the kind names plus
// "grid" and "style". The grid key also needs the token embedding table.
struct LinearAdaptor {
    MatF w;                // [d_model x d_in]
    std::vector<float> b;  // d_model
};

struct AdaptorSet {
    std::map<std::string, LinearAdaptor> maps;
    std::optional<MatF> grid_embedding_table;  // [vocab x d_grid]

    size_t d_model() const;  // inferred; ConfigError if adaptors disagree
};

// Stream layout: [style (one position, if present)] ++ per-frame positions.
// Multiple feature kinds at one frame are projected and summed position-wise.
MatF assemble_encoder_stream(const ConditioningBundle& bundle, const AdaptorSet& adaptors);

struct Violation {
    std::string code;
    std::string message;
};

// Reports every invariant violation; never mutates or throws.
std::vector<Violation> validate_bundle(const ConditioningBundle& bundle,
                                       size_t expected_fps = 1);

// Frame-aligned sub-bundle covering [start_s, start_s + len_s) seconds.
ConditioningBundle crop_bundle(const ConditioningBundle& bundle, size_t start_s,
                               size_t len_s);

}  // namespace meow::cond
