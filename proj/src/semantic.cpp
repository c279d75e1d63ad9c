#include "meow/semantic.hpp"

#include <cmath>

#include "meow/dsp.hpp"
#include "meow/kmeans.hpp"
#include "meow/tensor_io.hpp"

namespace meow::semantic {

namespace {
constexpr char kSemanticMagic[8] = {'M', 'E', 'O', 'W', 'S', 'C', '1', '\0'};
}

void SemanticConfig::validate() const {
    if (frame_rate == 0) throw ConfigError("semantic: frame_rate must be > 0");
    if (sample_rate <= 0) throw ConfigError("semantic: sample_rate must be > 0");
    if (static_cast<size_t>(sample_rate) % frame_rate != 0) {
        throw ConfigError("semantic: sample_rate must be divisible by frame_rate");
    }
    if (n_bands == 0) throw ConfigError("semantic: n_bands must be > 0");
    if (vocab_size < 2) throw ConfigError("semantic: vocab_size must be >= 2");
}

FrameEmbeddingSequence extract_frame_embeddings(const audio::Waveform& w,
                                                const SemanticConfig& cfg) {
    cfg.validate();
    if (w.sample_rate != cfg.sample_rate) {
        throw DomainError("extract_frame_embeddings: waveform sample rate mismatch");
    }
    dsp::MelConfig mel;
    mel.sample_rate = cfg.sample_rate;
    mel.n_bands = cfg.n_bands;
    mel.win = cfg.window();
    mel.hop = cfg.window();
    const dsp::MelFilterbank bank(mel);

    FrameEmbeddingSequence out;
    out.frame_rate = cfg.frame_rate;
    out.embeddings = bank.log_mel_frames(w);

    if (cfg.per_clip_normalize) {
        MatF& e = out.embeddings;
        for (size_t b = 0; b < e.cols; ++b) {
            double mean = 0.0;
            for (size_t t = 0; t < e.rows; ++t) mean += e.at(t, b);
            mean /= static_cast<double>(e.rows);
            double var = 0.0;
            for (size_t t = 0; t < e.rows; ++t) {
                const double d = e.at(t, b) - mean;
                var += d * d;
            }
            var /= static_cast<double>(e.rows);
            const double inv = 1.0 / std::sqrt(var + 1e-8);
            for (size_t t = 0; t < e.rows; ++t) {
                e.at(t, b) = static_cast<float>((e.at(t, b) - mean) * inv);
            }
        }
    }
    return out;
}

SemanticCodebook train_semantic_codebook(
    const std::vector<FrameEmbeddingSequence>& sequences, size_t k, uint64_t seed) {
    size_t total = 0;
    size_t dim = 0;
    for (const auto& s : sequences) {
        total += s.embeddings.rows;
        if (dim == 0) {
            dim = s.embeddings.cols;
        } else if (s.embeddings.cols != dim) {
            throw ShapeError("train_semantic_codebook: embedding dim mismatch");
        }
    }
    if (total < k) {
        throw InsufficientDataError(
            "train_semantic_codebook: need at least k frames, have " +
            std::to_string(total));
    }
    MatF all(total, dim);
    size_t row = 0;
    for (const auto& s : sequences) {
        std::copy(s.embeddings.v.begin(), s.embeddings.v.end(), all.row(row));
        row += s.embeddings.rows;
    }
    SemanticCodebook cb;
    cb.centroids = kmeans(all, k, seed).centroids;
    return cb;
}

SemanticTokenSequence tokenize_embeddings(const FrameEmbeddingSequence& emb,
                                          const SemanticCodebook& codebook) {
    if (emb.embeddings.cols != codebook.centroids.cols) {
        throw ShapeError("tokenize: embedding dim != codebook dim");
    }
    if (codebook.centroids.rows == 0) {
        throw StateError("tokenize: codebook is untrained");
    }
    SemanticTokenSequence out;
    out.frame_rate = emb.frame_rate;
    out.tokens.resize(emb.embeddings.rows);
    for (size_t t = 0; t < emb.embeddings.rows; ++t) {
        out.tokens[t] = static_cast<int32_t>(
            nearest_centroid(emb.embeddings.row(t), codebook.centroids));
    }
    return out;
}

SemanticTokenSequence tokenize(const audio::Waveform& w,
                               const SemanticCodebook& codebook,
                               const SemanticConfig& cfg) {
    return tokenize_embeddings(extract_frame_embeddings(w, cfg), codebook);
}

void save_semantic_codebook(const std::string& path, const SemanticCodebook& cb) {
    data::CodebookFile file;
    file.n_levels = 1;
    file.vocab_size = static_cast<uint32_t>(cb.centroids.rows);
    file.frame_size = static_cast<uint32_t>(cb.centroids.cols);
    file.centroids = cb.centroids.v;
    data::write_codebook_file(path, kSemanticMagic, file);
}

SemanticCodebook load_semantic_codebook(const std::string& path) {
    const data::CodebookFile file = data::read_codebook_file(path, kSemanticMagic);
    if (file.n_levels != 1) {
        throw ValidationError("semantic codebook must have n_levels == 1: " + path);
    }
    SemanticCodebook cb;
    cb.centroids = MatF(file.vocab_size, file.frame_size);
    cb.centroids.v = file.centroids;
    return cb;
}

}  // namespace meow::semantic
