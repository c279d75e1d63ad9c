#include "meow/codec.hpp"

#include <cmath>
#include <cstring>

#include "meow/kernels.hpp"
#include "meow/kmeans.hpp"
#include "meow/tensor_io.hpp"

namespace meow::codec {

namespace {
constexpr char kCodecMagic[8] = {'M', 'E', 'O', 'W', 'C', 'B', '1', '\0'};
}

void CodecConfig::validate() const {
    if (frame_size < 1) throw ConfigError("codec: frame_size must be >= 1");
    if (vocab_size < 2) throw ConfigError("codec: vocab_size must be >= 2");
    if (n_levels < 1) throw ConfigError("codec: n_levels must be >= 1");
    // A single-level codec is plain k-means quantization; the coarse/fine
    // split only exists from two levels up.
    if (n_levels == 1) {
        if (n_coarse != 1 || n_fine != 0) {
            throw ConfigError("codec: n_levels == 1 requires n_coarse=1, n_fine=0");
        }
    } else {
        if (n_coarse < 1 || n_fine < 1) {
            throw ConfigError("codec: n_coarse and n_fine must be >= 1");
        }
        if (n_coarse + n_fine != n_levels) {
            throw ConfigError("codec: n_coarse + n_fine must equal n_levels");
        }
    }
    if (sample_rate <= 0) throw ConfigError("codec: sample_rate must be > 0");
}

void AcousticTokenGrid::validate() const {
    if (tokens.size() != n_frames * n_levels) {
        throw ShapeError("token grid is not rectangular");
    }
    for (int32_t t : tokens) {
        if (t < 0 || static_cast<size_t>(t) >= vocab_size) {
            throw ValidationError("token out of range [0, vocab_size)");
        }
    }
}

std::vector<Codebook> train_codebooks(const MatF& frames, const CodecConfig& cfg,
                                      uint64_t seed) {
    cfg.validate();
    if (frames.rows < cfg.vocab_size) {
        throw InsufficientDataError(
            "train_codebooks: need at least vocab_size frames, have " +
            std::to_string(frames.rows));
    }
    if (frames.cols != cfg.frame_size) {
        throw ShapeError("train_codebooks: frame width != frame_size");
    }

    const Rng base(seed);
    MatF residual = frames;
    std::vector<Codebook> books;
    books.reserve(cfg.n_levels);

    for (size_t level = 0; level < cfg.n_levels; ++level) {
        KMeansResult km =
            kmeans(residual, cfg.vocab_size, base.fork(level).seed());
        if (level > 0) {
            // Snap the smallest centroid to zero so a quantizer can always
            // leave the residual untouched.
            size_t jmin = 0;
            float nmin = kernels::dot(km.centroids.row(0), km.centroids.row(0),
                                      km.centroids.cols);
            for (size_t j = 1; j < km.centroids.rows; ++j) {
                const float nj = kernels::dot(km.centroids.row(j),
                                              km.centroids.row(j), km.centroids.cols);
                if (nj < nmin) {
                    nmin = nj;
                    jmin = j;
                }
            }
            std::fill_n(km.centroids.row(jmin), km.centroids.cols, 0.0f);
        }
        books.push_back(Codebook{level, std::move(km.centroids)});

        // Residual for the next level under the final (possibly snapped)
        // centroids.
        const MatF& cents = books.back().centroids;
        kernels::parallel_for(residual.rows, [&](size_t b, size_t e) {
            for (size_t i = b; i < e; ++i) {
                float* r = residual.row(i);
                const size_t j = nearest_centroid(r, cents);
                const float* c = cents.row(j);
                for (size_t d = 0; d < residual.cols; ++d) r[d] -= c[d];
            }
        });
    }
    return books;
}

namespace {

void check_codebooks(const std::vector<Codebook>& codebooks, const CodecConfig& cfg) {
    if (codebooks.size() != cfg.n_levels) {
        throw StateError("codec: codebooks missing or level count mismatch (have " +
                         std::to_string(codebooks.size()) + ", config wants " +
                         std::to_string(cfg.n_levels) + ")");
    }
    for (const auto& cb : codebooks) {
        if (cb.centroids.rows != cfg.vocab_size || cb.centroids.cols != cfg.frame_size) {
            throw StateError("codec: codebook shape does not match config");
        }
    }
}

}  // namespace

AcousticTokenGrid encode_frames(const MatF& coeffs,
                                const std::vector<Codebook>& codebooks,
                                const CodecConfig& cfg) {
    cfg.validate();
    check_codebooks(codebooks, cfg);
    AcousticTokenGrid grid;
    grid.n_frames = coeffs.rows;
    grid.n_levels = cfg.n_levels;
    grid.vocab_size = cfg.vocab_size;
    grid.tokens.assign(coeffs.rows * cfg.n_levels, 0);

    kernels::parallel_for(coeffs.rows, [&](size_t b, size_t e) {
        std::vector<float> residual(cfg.frame_size);
        for (size_t t = b; t < e; ++t) {
            std::memcpy(residual.data(), coeffs.row(t), cfg.frame_size * sizeof(float));
            for (size_t level = 0; level < cfg.n_levels; ++level) {
                const MatF& cents = codebooks[level].centroids;
                const size_t j = nearest_centroid(residual.data(), cents);
                grid.at(t, level) = static_cast<int32_t>(j);
                const float* c = cents.row(j);
                for (size_t d = 0; d < cfg.frame_size; ++d) residual[d] -= c[d];
            }
        }
    });
    return grid;
}

AcousticTokenGrid encode(const audio::Waveform& w,
                         const std::vector<Codebook>& codebooks,
                         const CodecConfig& cfg) {
    return encode_frames(dsp::FrameDct(cfg.frame_size).forward(w), codebooks, cfg);
}

MatF decode_frames(const AcousticTokenGrid& grid, size_t levels_used,
                   const std::vector<Codebook>& codebooks, const CodecConfig& cfg) {
    cfg.validate();
    check_codebooks(codebooks, cfg);
    if (levels_used < 1 || levels_used > cfg.n_levels) {
        throw DomainError("decode: levels_used must be in [1, n_levels]");
    }
    if (grid.n_levels != cfg.n_levels) {
        throw ShapeError("decode: grid level count != config n_levels");
    }
    grid.validate();

    MatF coeffs(grid.n_frames, cfg.frame_size);
    kernels::parallel_for(grid.n_frames, [&](size_t b, size_t e) {
        for (size_t t = b; t < e; ++t) {
            float* row = coeffs.row(t);
            for (size_t level = 0; level < levels_used; ++level) {
                const float* c =
                    codebooks[level].centroids.row(static_cast<size_t>(grid.at(t, level)));
                kernels::axpy(1.0f, c, row, cfg.frame_size);
            }
        }
    });
    return coeffs;
}

audio::Waveform decode(const AcousticTokenGrid& grid, size_t levels_used,
                       const std::vector<Codebook>& codebooks,
                       const CodecConfig& cfg) {
    const MatF coeffs = decode_frames(grid, levels_used, codebooks, cfg);
    audio::Waveform w;
    w.sample_rate = cfg.sample_rate;
    w.samples = dsp::FrameDct(cfg.frame_size).inverse(coeffs);
    return w;
}

std::pair<AcousticTokenGrid, AcousticTokenGrid> split_coarse_fine(
    const AcousticTokenGrid& grid, const CodecConfig& cfg) {
    cfg.validate();
    if (cfg.n_fine == 0) {
        throw ConfigError("split_coarse_fine: single-level codec has no fine levels");
    }
    if (grid.n_levels != cfg.n_levels) {
        throw ShapeError("split_coarse_fine: grid level count != config n_levels");
    }
    AcousticTokenGrid coarse, fine;
    coarse.n_frames = fine.n_frames = grid.n_frames;
    coarse.vocab_size = fine.vocab_size = grid.vocab_size;
    coarse.n_levels = cfg.n_coarse;
    fine.n_levels = cfg.n_fine;
    coarse.tokens.resize(grid.n_frames * cfg.n_coarse);
    fine.tokens.resize(grid.n_frames * cfg.n_fine);
    for (size_t t = 0; t < grid.n_frames; ++t) {
        for (size_t l = 0; l < cfg.n_coarse; ++l) coarse.at(t, l) = grid.at(t, l);
        for (size_t l = 0; l < cfg.n_fine; ++l) fine.at(t, l) = grid.at(t, cfg.n_coarse + l);
    }
    return {std::move(coarse), std::move(fine)};
}

AcousticTokenGrid concat_levels(const AcousticTokenGrid& coarse,
                                const AcousticTokenGrid& fine) {
    if (coarse.n_frames != fine.n_frames) {
        throw ShapeError("concat_levels: frame count mismatch");
    }
    if (coarse.vocab_size != fine.vocab_size) {
        throw ShapeError("concat_levels: vocab mismatch");
    }
    AcousticTokenGrid out;
    out.n_frames = coarse.n_frames;
    out.n_levels = coarse.n_levels + fine.n_levels;
    out.vocab_size = coarse.vocab_size;
    out.tokens.resize(out.n_frames * out.n_levels);
    for (size_t t = 0; t < out.n_frames; ++t) {
        for (size_t l = 0; l < coarse.n_levels; ++l) out.at(t, l) = coarse.at(t, l);
        for (size_t l = 0; l < fine.n_levels; ++l) {
            out.at(t, coarse.n_levels + l) = fine.at(t, l);
        }
    }
    return out;
}

RvqCodec::RvqCodec(CodecConfig cfg, std::vector<Codebook> codebooks)
    : cfg_(cfg), codebooks_(std::move(codebooks)), dct_(cfg.frame_size) {
    cfg_.validate();
    check_codebooks(codebooks_, cfg_);
}

RvqCodec RvqCodec::train(const MatF& frames, const CodecConfig& cfg, uint64_t seed) {
    return RvqCodec(cfg, train_codebooks(frames, cfg, seed));
}

void RvqCodec::set_coarse_fine(size_t n_coarse, size_t n_fine) {
    CodecConfig next = cfg_;
    next.n_coarse = n_coarse;
    next.n_fine = n_fine;
    next.validate();
    cfg_ = next;
}

AcousticTokenGrid RvqCodec::encode(const audio::Waveform& w) const {
    return encode_frames(dct_.forward(w), codebooks_, cfg_);
}

audio::Waveform RvqCodec::decode(const AcousticTokenGrid& grid,
                                 size_t levels_used) const {
    const MatF coeffs = decode_frames(grid, levels_used, codebooks_, cfg_);
    audio::Waveform w;
    w.sample_rate = cfg_.sample_rate;
    w.samples = dct_.inverse(coeffs);
    return w;
}

void RvqCodec::save(const std::string& path) const {
    data::CodebookFile file;
    file.n_levels = static_cast<uint32_t>(cfg_.n_levels);
    file.vocab_size = static_cast<uint32_t>(cfg_.vocab_size);
    file.frame_size = static_cast<uint32_t>(cfg_.frame_size);
    file.centroids.reserve(cfg_.n_levels * cfg_.vocab_size * cfg_.frame_size);
    for (const auto& cb : codebooks_) {
        file.centroids.insert(file.centroids.end(), cb.centroids.v.begin(),
                              cb.centroids.v.end());
    }
    data::write_codebook_file(path, kCodecMagic, file);
}

RvqCodec RvqCodec::load(const std::string& path) {
    const data::CodebookFile file = data::read_codebook_file(path, kCodecMagic);
    CodecConfig cfg;
    cfg.n_levels = file.n_levels;
    cfg.vocab_size = file.vocab_size;
    cfg.frame_size = file.frame_size;
    // The container does not carry the coarse/fine split; default to an even
    // split and let the pipeline manifest override.
    cfg.n_coarse = file.n_levels > 1 ? file.n_levels / 2 : 1;
    cfg.n_fine = file.n_levels - cfg.n_coarse;
    std::vector<Codebook> books(file.n_levels);
    const size_t stride = size_t(file.vocab_size) * file.frame_size;
    for (size_t l = 0; l < file.n_levels; ++l) {
        books[l].level = l;
        books[l].centroids = MatF(file.vocab_size, file.frame_size);
        std::copy_n(file.centroids.begin() + l * stride, stride,
                    books[l].centroids.v.begin());
    }
    RvqCodec codec(cfg, std::move(books));
    return codec;
}

}  // namespace meow::codec
