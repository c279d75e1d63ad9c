#include "meow/conditioning.hpp"

#include <cmath>

#include "meow/error.hpp"
#include "meow/kernels.hpp"

namespace meow::cond {

const char* kind_name(FeatureKind k) {
    return k == FeatureKind::clip_like ? "clip-like" : "flow-like";
}

FeatureKind kind_from_name(const std::string& name) {
    if (name == "clip-like" || name == "clip") return FeatureKind::clip_like;
    if (name == "flow-like" || name == "flow") return FeatureKind::flow_like;
    throw ConfigError("unknown feature kind: " + name);
}

size_t default_dim(FeatureKind k) {
    return k == FeatureKind::clip_like ? 768 : 1024;
}

StyleEmbedding average_segment_embeddings(
    const std::vector<std::vector<float>>& segments) {
    if (segments.empty()) {
        throw DomainError("average_segment_embeddings: empty segment list");
    }
    for (const auto& s : segments) {
        if (s.size() != kStyleDim) {
            throw ShapeError("average_segment_embeddings: segment dim != 128");
        }
    }
    std::vector<double> mean(kStyleDim, 0.0);
    for (const auto& s : segments) {
        for (size_t i = 0; i < kStyleDim; ++i) mean[i] += s[i];
    }
    double norm2 = 0.0;
    for (auto& m : mean) {
        m /= static_cast<double>(segments.size());
        norm2 += m * m;
    }
    if (norm2 <= 0.0) {
        throw DomainError("average_segment_embeddings: mean embedding has zero norm");
    }
    const double inv = 1.0 / std::sqrt(norm2);
    StyleEmbedding out;
    out.v.resize(kStyleDim);
    for (size_t i = 0; i < kStyleDim; ++i) out.v[i] = static_cast<float>(mean[i] * inv);
    return out;
}

MatF pool_token_grid(const VisualTokenGrid& grid, const MatF& embedding_table) {
    if (grid.tokens.size() != grid.n_frames * grid.tokens_per_frame) {
        throw ShapeError("pool_token_grid: grid is not rectangular");
    }
    if (grid.tokens_per_frame == 0) {
        throw ShapeError("pool_token_grid: empty frames");
    }
    if (embedding_table.rows < grid.vocab) {
        throw ValidationError("pool_token_grid: embedding table smaller than vocab");
    }
    MatF out(grid.n_frames, embedding_table.cols);
    const double inv = 1.0 / static_cast<double>(grid.tokens_per_frame);
    for (size_t t = 0; t < grid.n_frames; ++t) {
        std::vector<double> acc(embedding_table.cols, 0.0);
        for (size_t g = 0; g < grid.tokens_per_frame; ++g) {
            const int32_t tok = grid.at(t, g);
            if (tok < 0 || static_cast<size_t>(tok) >= grid.vocab) {
                throw ValidationError("pool_token_grid: token out of vocab range");
            }
            const float* row = embedding_table.row(static_cast<size_t>(tok));
            for (size_t d = 0; d < embedding_table.cols; ++d) acc[d] += row[d];
        }
        for (size_t d = 0; d < embedding_table.cols; ++d) {
            out.at(t, d) = static_cast<float>(acc[d] * inv);
        }
    }
    return out;
}

size_t AdaptorSet::d_model() const {
    size_t d = 0;
    for (const auto& [name, lin] : maps) {
        if (d == 0) {
            d = lin.w.rows;
        } else if (lin.w.rows != d) {
            throw ConfigError("adaptor output dims disagree at '" + name + "'");
        }
        if (!lin.b.empty() && lin.b.size() != lin.w.rows) {
            throw ConfigError("adaptor bias size mismatch at '" + name + "'");
        }
    }
    if (d == 0) throw ConfigError("adaptor set is empty");
    return d;
}

namespace {

const LinearAdaptor& adaptor_for(const AdaptorSet& set, const std::string& key) {
    const auto it = set.maps.find(key);
    if (it == set.maps.end()) {
        throw ConfigError("missing adaptor for feature kind '" + key + "'");
    }
    return it->second;
}

// y += W x + b for one frame vector.
void apply_affine(const LinearAdaptor& lin, const float* x, size_t d_in, float* y) {
    if (lin.w.cols != d_in) {
        throw ShapeError("adaptor input dim mismatch: expected " +
                         std::to_string(lin.w.cols) + ", got " + std::to_string(d_in));
    }
    for (size_t i = 0; i < lin.w.rows; ++i) {
        float acc = kernels::dot(lin.w.row(i), x, d_in);
        if (!lin.b.empty()) acc += lin.b[i];
        y[i] += acc;
    }
}

}  // namespace

MatF assemble_encoder_stream(const ConditioningBundle& bundle,
                             const AdaptorSet& adaptors) {
    const size_t d_model = adaptors.d_model();

    size_t n_frames = 0;
    bool have_frames = false;
    auto check_frames = [&](size_t t, const char* what) {
        if (!have_frames) {
            n_frames = t;
            have_frames = true;
        } else if (t != n_frames) {
            throw ValidationError(std::string("frame-count mismatch among feature kinds at ") +
                                  what);
        }
    };
    for (const auto& seq : bundle.embeddings) check_frames(seq.vectors.rows, kind_name(seq.kind));
    if (bundle.token_grid) check_frames(bundle.token_grid->n_frames, "token grid");
    if (!have_frames) {
        throw ValidationError("bundle has no visual features");
    }

    const bool styled = bundle.style.has_value();
    MatF stream(n_frames + (styled ? 1 : 0), d_model);

    if (styled) {
        const auto& lin = adaptor_for(adaptors, "style");
        apply_affine(lin, bundle.style->v.data(), bundle.style->v.size(), stream.row(0));
    }
    const size_t frame0 = styled ? 1 : 0;

    for (const auto& seq : bundle.embeddings) {
        const auto& lin = adaptor_for(adaptors, kind_name(seq.kind));
        for (size_t t = 0; t < n_frames; ++t) {
            apply_affine(lin, seq.vectors.row(t), seq.vectors.cols, stream.row(frame0 + t));
        }
    }
    if (bundle.token_grid) {
        const auto& lin = adaptor_for(adaptors, "grid");
        if (!adaptors.grid_embedding_table) {
            throw ConfigError("bundle has a token grid but no grid embedding table");
        }
        const MatF pooled = pool_token_grid(*bundle.token_grid, *adaptors.grid_embedding_table);
        for (size_t t = 0; t < n_frames; ++t) {
            apply_affine(lin, pooled.row(t), pooled.cols, stream.row(frame0 + t));
        }
    }
    return stream;
}

std::vector<Violation> validate_bundle(const ConditioningBundle& bundle,
                                       size_t expected_fps) {
    std::vector<Violation> out;
    const auto expected_frames =
        static_cast<size_t>(bundle.duration_s * static_cast<double>(expected_fps));

    for (size_t i = 0; i < bundle.embeddings.size(); ++i) {
        const auto& seq = bundle.embeddings[i];
        const std::string where = std::string(kind_name(seq.kind)) + "[" +
                                  std::to_string(i) + "]";
        if (seq.frame_rate != expected_fps) {
            out.push_back({"frame-rate", where + ": frame_rate " +
                                             std::to_string(seq.frame_rate) +
                                             " != expected " +
                                             std::to_string(expected_fps)});
        }
        if (seq.vectors.rows != expected_frames) {
            out.push_back({"duration-mismatch",
                           where + ": " + std::to_string(seq.vectors.rows) +
                               " frames, expected " + std::to_string(expected_frames)});
        }
        for (float v : seq.vectors.v) {
            if (!std::isfinite(v)) {
                out.push_back({"non-finite", where + ": non-finite value"});
                break;
            }
        }
    }
    if (bundle.token_grid) {
        const auto& g = *bundle.token_grid;
        if (g.tokens.size() != g.n_frames * g.tokens_per_frame) {
            out.push_back({"grid-shape", "token grid is not rectangular"});
        } else {
            if (g.n_frames != expected_frames) {
                out.push_back({"duration-mismatch",
                               "token grid: " + std::to_string(g.n_frames) +
                                   " frames, expected " +
                                   std::to_string(expected_frames)});
            }
            for (int32_t t : g.tokens) {
                if (t < 0 || static_cast<size_t>(t) >= g.vocab) {
                    out.push_back({"token-range",
                                   "token grid: token " + std::to_string(t) +
                                       " outside [0, " + std::to_string(g.vocab) + ")"});
                    break;
                }
            }
        }
    }
    if (bundle.style) {
        const auto& v = bundle.style->v;
        if (v.size() != kStyleDim) {
            out.push_back({"style-dim", "style embedding dim " +
                                            std::to_string(v.size()) + " != 128"});
        }
        double norm2 = 0.0;
        bool finite = true;
        for (float x : v) {
            if (!std::isfinite(x)) finite = false;
            norm2 += double(x) * x;
        }
        if (!finite) {
            out.push_back({"non-finite", "style embedding has non-finite value"});
        } else if (std::abs(norm2 - 1.0) > 1e-3) {
            out.push_back({"style-norm", "style embedding is not unit normalized"});
        }
    }
    return out;
}

ConditioningBundle crop_bundle(const ConditioningBundle& bundle, size_t start_s,
                               size_t len_s) {
    ConditioningBundle out;
    out.duration_s = static_cast<double>(len_s);
    out.style = bundle.style;
    for (const auto& seq : bundle.embeddings) {
        const size_t fps = seq.frame_rate;
        const size_t begin = start_s * fps;
        const size_t count = len_s * fps;
        if (begin + count > seq.vectors.rows) {
            throw DomainError("crop_bundle: crop exceeds feature length");
        }
        VisualEmbeddingSequence c;
        c.kind = seq.kind;
        c.frame_rate = fps;
        c.vectors = MatF(count, seq.vectors.cols);
        std::copy_n(seq.vectors.row(begin), count * seq.vectors.cols, c.vectors.v.begin());
        out.embeddings.push_back(std::move(c));
    }
    if (bundle.token_grid) {
        const auto& g = *bundle.token_grid;
        if (start_s + len_s > g.n_frames) {
            throw DomainError("crop_bundle: crop exceeds token grid length");
        }
        VisualTokenGrid c;
        c.n_frames = len_s;
        c.tokens_per_frame = g.tokens_per_frame;
        c.vocab = g.vocab;
        c.tokens.assign(g.tokens.begin() + start_s * g.tokens_per_frame,
                        g.tokens.begin() + (start_s + len_s) * g.tokens_per_frame);
        out.token_grid = std::move(c);
    }
    return out;
}

}  // namespace meow::cond
