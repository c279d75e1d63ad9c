#include "meow/pipeline.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "json.hpp"
#include "meow/kernels.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace meow::pipeline {

const char* stage_name(StageKind k) {
    switch (k) {
        case StageKind::s1: return "1";
        case StageKind::s2a: return "2a";
        case StageKind::s2b: return "2b";
        case StageKind::s3: return "3";
    }
    return "?";
}

StageKind stage_from_name(const std::string& s) {
    if (s == "1") return StageKind::s1;
    if (s == "2a") return StageKind::s2a;
    if (s == "2b") return StageKind::s2b;
    if (s == "3") return StageKind::s3;
    throw ConfigError("unknown stage: " + s);
}

size_t TokenLayout::bos(StageKind k) const {
    switch (k) {
        case StageKind::s1: return k_s;
        case StageKind::s2a: return k_s + n_coarse * k_a;
        case StageKind::s2b: return n_coarse * k_a;
        case StageKind::s3: return (n_coarse + n_fine) * k_a;
    }
    throw ConfigError("bad stage");
}

TokenLayout make_layout(const codec::CodecConfig& codec_cfg,
                        const semantic::SemanticConfig& sem_cfg) {
    codec_cfg.validate();
    sem_cfg.validate();
    if (codec_cfg.sample_rate % static_cast<int>(codec_cfg.frame_size) != 0) {
        throw ConfigError(
            "pipeline requires an integral acoustic frame rate "
            "(sample_rate divisible by frame_size)");
    }
    TokenLayout l;
    l.k_s = sem_cfg.vocab_size;
    l.k_a = codec_cfg.vocab_size;
    l.n_coarse = codec_cfg.n_coarse;
    l.n_fine = codec_cfg.n_fine;
    l.sem_rate = sem_cfg.frame_rate;
    l.ac_rate = static_cast<size_t>(codec_cfg.sample_rate) / codec_cfg.frame_size;
    return l;
}

std::vector<int32_t> flatten_grid(const codec::AcousticTokenGrid& grid, size_t levels) {
    if (levels != grid.n_levels) {
        throw ShapeError("flatten_grid: levels argument != grid level count");
    }
    grid.validate();
    std::vector<int32_t> flat;
    flat.reserve(grid.n_frames * levels);
    for (size_t t = 0; t < grid.n_frames; ++t) {
        for (size_t l = 0; l < levels; ++l) {
            flat.push_back(grid.at(t, l) +
                           static_cast<int32_t>(l * grid.vocab_size));
        }
    }
    return flat;
}

codec::AcousticTokenGrid unflatten_grid(std::span<const int32_t> flat, size_t levels,
                                        size_t vocab_per_level) {
    if (levels == 0) throw ShapeError("unflatten_grid: levels must be >= 1");
    if (flat.size() % levels != 0) {
        throw ShapeError("unflatten_grid: flat length not divisible by level count");
    }
    codec::AcousticTokenGrid grid;
    grid.n_frames = flat.size() / levels;
    grid.n_levels = levels;
    grid.vocab_size = vocab_per_level;
    grid.tokens.resize(flat.size());
    for (size_t t = 0; t < grid.n_frames; ++t) {
        for (size_t l = 0; l < levels; ++l) {
            const int32_t id = flat[t * levels + l];
            const auto lo = static_cast<int32_t>(l * vocab_per_level);
            const auto hi = static_cast<int32_t>((l + 1) * vocab_per_level);
            if (id < lo || id >= hi) {
                throw ValidationError("unflatten_grid: id " + std::to_string(id) +
                                      " outside level " + std::to_string(l) +
                                      " range");
            }
            grid.at(t, l) = id - lo;
        }
    }
    return grid;
}

BuiltSequence build_lm_sequence(std::span<const int32_t> payload, int32_t bos_id) {
    if (payload.empty()) throw DomainError("build_lm_sequence: empty payload");
    BuiltSequence s;
    s.tokens.reserve(payload.size());
    s.tokens.push_back(bos_id);
    s.tokens.insert(s.tokens.end(), payload.begin(), payload.end() - 1);
    s.targets.assign(payload.begin(), payload.end());
    s.mask.assign(payload.size(), 1);
    return s;
}

BuiltSequence build_span_sequence(std::span<const int32_t> cond,
                                  std::span<const int32_t> target, int32_t bos_id) {
    if (target.empty()) throw DomainError("build_span_sequence: empty target span");
    BuiltSequence s;
    const size_t total = cond.size() + target.size();
    s.tokens.reserve(total);
    s.tokens.push_back(bos_id);
    s.tokens.insert(s.tokens.end(), cond.begin(), cond.end());
    s.tokens.insert(s.tokens.end(), target.begin(), target.end() - 1);
    s.targets.reserve(total);
    s.targets.insert(s.targets.end(), cond.begin(), cond.end());
    s.targets.insert(s.targets.end(), target.begin(), target.end());
    s.mask.assign(total, 0);
    for (size_t t = cond.size(); t < total; ++t) s.mask[t] = 1;
    return s;
}

StageSpec make_stage_spec(StageKind kind, const TokenLayout& layout,
                          const ModelDims& dims) {
    StageSpec spec;
    spec.stage = kind;
    spec.model.n_layers = dims.n_layers;
    spec.model.n_heads = dims.n_heads;
    spec.model.d_model = dims.d_model;
    spec.model.d_ff = dims.d_ff;
    spec.model.rel_buckets = dims.rel_buckets;
    spec.model.rel_max_distance = dims.rel_max_distance;

    size_t dec_len = 0;
    size_t enc_len = 0;
    switch (kind) {
        case StageKind::s1:
            spec.model.arch = tfm::Arch::encoder_decoder;
            spec.crop_seconds = 10.0;
            spec.temperature = 1.0;
            spec.model.vocab_size = layout.s1_vocab();
            dec_len = 10 * layout.sem_rate;
            enc_len = 11;
            break;
        case StageKind::s2a:
            spec.model.arch = tfm::Arch::decoder_only;
            spec.crop_seconds = 10.0;
            spec.temperature = 0.95;
            spec.model.vocab_size = layout.s2a_vocab();
            dec_len = 10 * (layout.sem_rate + layout.ac_rate * layout.n_coarse);
            break;
        case StageKind::s2b:
            spec.model.arch = tfm::Arch::encoder_decoder;
            spec.crop_seconds = 10.0;
            spec.temperature = 0.95;
            spec.model.vocab_size = layout.s2b_vocab();
            dec_len = 10 * layout.ac_rate * layout.n_coarse;
            enc_len = 11 + 10 * layout.sem_rate;
            break;
        case StageKind::s3:
            spec.model.arch = tfm::Arch::decoder_only;
            spec.crop_seconds = 3.0;
            spec.temperature = 0.4;
            spec.model.vocab_size = layout.s3_vocab();
            dec_len = 3 * layout.ac_rate * (layout.n_coarse + layout.n_fine);
            break;
    }
    spec.model.max_len = std::max(dec_len, enc_len) + 8;
    return spec;
}

std::vector<ClipData> prepare_clips(const data::DatasetManifest& manifest,
                                    const codec::RvqCodec& codec,
                                    const semantic::SemanticCodebook& sem_cb,
                                    const semantic::SemanticConfig& sem_cfg,
                                    bool need_bundles) {
    std::vector<ClipData> clips(manifest.entries.size());
    for (size_t i = 0; i < manifest.entries.size(); ++i) {
        const auto& e = manifest.entries[i];
        ClipData& c = clips[i];
        c.id = e.clip_id;
        c.duration_s = e.duration_s;
        const audio::Waveform w =
            audio::read_wav(data::resolve_path(manifest, e.audio_path));
        c.sem_tokens = semantic::tokenize(w, sem_cb, sem_cfg).tokens;
        c.grid = codec.encode(w);
        if (need_bundles) {
            c.bundle = data::load_bundle(manifest, e);
            if (c.bundle.embeddings.empty() && !c.bundle.token_grid) {
                throw DatasetError("clip " + e.clip_id +
                                   " has no visual features for paired training");
            }
        }
    }
    return clips;
}

namespace {

constexpr size_t kSemEmbedDim = 64;

struct AdaptorNeeds {
    bool clip = false, flow = false, grid = false, style = false, sem = false;
};

AdaptorNeeds scan_needs(const std::vector<ClipData>& clips, bool with_sem) {
    AdaptorNeeds n;
    n.sem = with_sem;
    for (const auto& c : clips) {
        for (const auto& seq : c.bundle.embeddings) {
            if (seq.kind == cond::FeatureKind::clip_like) n.clip = true;
            if (seq.kind == cond::FeatureKind::flow_like) n.flow = true;
        }
        if (c.bundle.token_grid) n.grid = true;
        if (c.bundle.style) n.style = true;
    }
    return n;
}

size_t bundle_dim(const std::vector<ClipData>& clips, cond::FeatureKind kind) {
    for (const auto& c : clips) {
        for (const auto& seq : c.bundle.embeddings) {
            if (seq.kind == kind) return seq.vectors.cols;
        }
    }
    return 0;
}

void add_adaptor(tfm::ModelWeights<float>& w, const std::string& key, size_t d_model,
                 size_t d_in, Rng& rng) {
    Mat<float> lin = randn_mat<float>(d_model, d_in, rng,
                                      1.0 / std::sqrt(static_cast<double>(d_in)));
    w.tensors.emplace("adaptor." + key + ".w", std::move(lin));
    w.tensors.emplace("adaptor." + key + ".b", Mat<float>(1, d_model));
}

void init_stage_adaptors(tfm::ModelWeights<float>& w, const std::vector<ClipData>& clips,
                         const TokenLayout& layout, bool with_sem, uint64_t seed) {
    const AdaptorNeeds needs = scan_needs(clips, with_sem);
    const size_t d = w.config.d_model;
    Rng rng(splitmix64(seed ^ 0xada7708));
    if (needs.clip) {
        add_adaptor(w, "clip-like", d, bundle_dim(clips, cond::FeatureKind::clip_like),
                    rng);
    }
    if (needs.flow) {
        add_adaptor(w, "flow-like", d, bundle_dim(clips, cond::FeatureKind::flow_like),
                    rng);
    }
    if (needs.grid) {
        size_t vocab = 0;
        for (const auto& c : clips) {
            if (c.bundle.token_grid) vocab = std::max(vocab, c.bundle.token_grid->vocab);
        }
        add_adaptor(w, "grid", d, kSemEmbedDim, rng);
        w.tensors.emplace("grid.table",
                          randn_mat<float>(vocab, kSemEmbedDim, rng, 1.0));
    }
    if (needs.style) add_adaptor(w, "style", d, cond::kStyleDim, rng);
    if (needs.sem) {
        add_adaptor(w, "sem", d, kSemEmbedDim, rng);
        w.tensors.emplace("sem_embed.table",
                          randn_mat<float>(layout.k_s, kSemEmbedDim, rng, 1.0));
    }
}

cond::AdaptorSet adaptor_set_from_weights(const tfm::ModelWeights<float>& w) {
    cond::AdaptorSet set;
    for (const auto& [name, t] : w.tensors) {
        if (!name.starts_with("adaptor.") || !name.ends_with(".w")) continue;
        const std::string key = name.substr(8, name.size() - 10);
        if (key == "sem") continue;  // handled outside assemble
        cond::LinearAdaptor lin;
        lin.w = t;
        const auto bit = w.tensors.find("adaptor." + key + ".b");
        if (bit != w.tensors.end()) lin.b = bit->second.v;
        set.maps.emplace(key, std::move(lin));
    }
    const auto git = w.tensors.find("grid.table");
    if (git != w.tensors.end()) set.grid_embedding_table = git->second;
    return set;
}

// Drops bundle parts the model has no adaptor for only in the one sanctioned
// case: a style embedding fed to a model trained without style control is a
// configuration error, but a model trained WITH style accepts bundles that
// lack it (the style position is simply absent).
MatF visual_stream(const tfm::ModelWeights<float>& w,
                   const cond::ConditioningBundle& crop) {
    return cond::assemble_encoder_stream(crop, adaptor_set_from_weights(w));
}

}  // namespace

MatF build_encoder_stream(const tfm::ModelWeights<float>& w,
                          const cond::ConditioningBundle& crop,
                          const std::vector<int32_t>* sem_tokens) {
    MatF stream = visual_stream(w, crop);
    if (!sem_tokens) return stream;

    const Mat<float>& table = w.at("sem_embed.table");
    const Mat<float>& sw = w.at("adaptor.sem.w");
    const Mat<float>& sb = w.at("adaptor.sem.b");
    MatF out(stream.rows + sem_tokens->size(), stream.cols);
    std::copy(stream.v.begin(), stream.v.end(), out.v.begin());
    for (size_t t = 0; t < sem_tokens->size(); ++t) {
        const auto tok = static_cast<size_t>((*sem_tokens)[t]);
        if (tok >= table.rows) {
            throw DomainError("semantic token out of range for encoder embedding");
        }
        float* row = out.row(stream.rows + t);
        for (size_t i = 0; i < sw.rows; ++i) {
            row[i] = kernels::dot(sw.row(i), table.row(tok), sw.cols) + sb.v[i];
        }
    }
    return out;
}

namespace {

// Mirror of build_encoder_stream: distributes d_stream into adaptor (and
// token table) gradients.
void encoder_stream_backward(const tfm::ModelWeights<float>& w,
                             const cond::ConditioningBundle& crop,
                             const std::vector<int32_t>* sem_tokens,
                             const MatF& d_stream, tfm::GradMap<float>& grads) {
    const size_t d_model = w.config.d_model;
    const bool styled = crop.style.has_value();
    size_t n_frames = 0;
    for (const auto& seq : crop.embeddings) n_frames = seq.vectors.rows;
    if (crop.token_grid) n_frames = crop.token_grid->n_frames;
    const size_t frame0 = styled ? 1 : 0;

    auto slot = [&](const std::string& name, size_t r, size_t c) -> Mat<float>& {
        auto it = grads.find(name);
        if (it == grads.end()) it = grads.emplace(name, Mat<float>(r, c)).first;
        return it->second;
    };

    if (styled) {
        const auto& sw = w.at("adaptor.style.w");
        Mat<float>& dw = slot("adaptor.style.w", sw.rows, sw.cols);
        Mat<float>& db = slot("adaptor.style.b", 1, d_model);
        const float* d0 = d_stream.row(0);
        for (size_t i = 0; i < d_model; ++i) {
            kernels::axpy(d0[i], crop.style->v.data(), dw.row(i), sw.cols);
            db.v[i] += d0[i];
        }
    }

    // Per-frame slice of the stream gradient, shared by every visual kind.
    MatF d_frames(n_frames, d_model);
    std::copy_n(d_stream.row(frame0), n_frames * d_model, d_frames.v.begin());

    for (const auto& seq : crop.embeddings) {
        const std::string key = cond::kind_name(seq.kind);
        const auto& aw = w.at("adaptor." + key + ".w");
        Mat<float>& dw = slot("adaptor." + key + ".w", aw.rows, aw.cols);
        Mat<float>& db = slot("adaptor." + key + ".b", 1, d_model);
        Mat<float> tmp(aw.rows, aw.cols);
        kernels::matmul_tn(d_frames.v.data(), seq.vectors.v.data(), tmp.v.data(),
                           d_model, n_frames, seq.vectors.cols);
        kernels::axpy(1.0f, tmp.v.data(), dw.v.data(), dw.size());
        for (size_t t = 0; t < n_frames; ++t) {
            kernels::axpy(1.0f, d_frames.row(t), db.row(0), d_model);
        }
    }

    if (crop.token_grid) {
        const auto& gw = w.at("adaptor.grid.w");
        const auto& table = w.at("grid.table");
        const MatF pooled = cond::pool_token_grid(*crop.token_grid, table);
        Mat<float>& dw = slot("adaptor.grid.w", gw.rows, gw.cols);
        Mat<float>& db = slot("adaptor.grid.b", 1, d_model);
        Mat<float> tmp(gw.rows, gw.cols);
        kernels::matmul_tn(d_frames.v.data(), pooled.v.data(), tmp.v.data(), d_model,
                           n_frames, pooled.cols);
        kernels::axpy(1.0f, tmp.v.data(), dw.v.data(), dw.size());
        for (size_t t = 0; t < n_frames; ++t) {
            kernels::axpy(1.0f, d_frames.row(t), db.row(0), d_model);
        }
        MatF d_pooled(n_frames, gw.cols);
        kernels::matmul_nn(d_frames.v.data(), gw.v.data(), d_pooled.v.data(), n_frames,
                           d_model, gw.cols);
        Mat<float>& dtable = slot("grid.table", table.rows, table.cols);
        const auto& grid = *crop.token_grid;
        const float inv_g = 1.0f / static_cast<float>(grid.tokens_per_frame);
        for (size_t t = 0; t < n_frames; ++t) {
            for (size_t g = 0; g < grid.tokens_per_frame; ++g) {
                kernels::axpy(inv_g, d_pooled.row(t),
                              dtable.row(static_cast<size_t>(grid.at(t, g))),
                              table.cols);
            }
        }
    }

    if (sem_tokens) {
        const auto& sw = w.at("adaptor.sem.w");
        const auto& table = w.at("sem_embed.table");
        const size_t sem0 = frame0 + n_frames;
        const size_t n_sem = sem_tokens->size();
        MatF embedded(n_sem, table.cols);
        for (size_t t = 0; t < n_sem; ++t) {
            std::copy_n(table.row(static_cast<size_t>((*sem_tokens)[t])), table.cols,
                        embedded.row(t));
        }
        MatF d_sem(n_sem, d_model);
        std::copy_n(d_stream.row(sem0), n_sem * d_model, d_sem.v.begin());
        Mat<float>& dw = slot("adaptor.sem.w", sw.rows, sw.cols);
        Mat<float>& db = slot("adaptor.sem.b", 1, d_model);
        Mat<float> tmp(sw.rows, sw.cols);
        kernels::matmul_tn(d_sem.v.data(), embedded.v.data(), tmp.v.data(), d_model,
                           n_sem, table.cols);
        kernels::axpy(1.0f, tmp.v.data(), dw.v.data(), dw.size());
        for (size_t t = 0; t < n_sem; ++t) {
            kernels::axpy(1.0f, d_sem.row(t), db.row(0), d_model);
        }
        MatF d_embedded(n_sem, table.cols);
        kernels::matmul_nn(d_sem.v.data(), sw.v.data(), d_embedded.v.data(), n_sem,
                           d_model, sw.cols);
        Mat<float>& dtable = slot("sem_embed.table", table.rows, table.cols);
        for (size_t t = 0; t < n_sem; ++t) {
            kernels::axpy(1.0f, d_embedded.row(t),
                          dtable.row(static_cast<size_t>((*sem_tokens)[t])), table.cols);
        }
    }
}

std::vector<int32_t> slice_tokens(const std::vector<int32_t>& tokens, size_t begin,
                                  size_t count) {
    if (begin + count > tokens.size()) {
        throw DatasetError("token slice exceeds clip length");
    }
    return {tokens.begin() + begin, tokens.begin() + begin + count};
}

codec::AcousticTokenGrid slice_grid(const codec::AcousticTokenGrid& grid, size_t f0,
                                    size_t count) {
    if (f0 + count > grid.n_frames) throw DatasetError("grid slice exceeds clip length");
    codec::AcousticTokenGrid out;
    out.n_frames = count;
    out.n_levels = grid.n_levels;
    out.vocab_size = grid.vocab_size;
    out.tokens.assign(grid.tokens.begin() + f0 * grid.n_levels,
                      grid.tokens.begin() + (f0 + count) * grid.n_levels);
    return out;
}

codec::AcousticTokenGrid coarse_part(const codec::AcousticTokenGrid& grid,
                                     const TokenLayout& lay) {
    codec::AcousticTokenGrid out;
    out.n_frames = grid.n_frames;
    out.n_levels = lay.n_coarse;
    out.vocab_size = grid.vocab_size;
    out.tokens.resize(out.n_frames * out.n_levels);
    for (size_t t = 0; t < grid.n_frames; ++t) {
        for (size_t l = 0; l < lay.n_coarse; ++l) out.at(t, l) = grid.at(t, l);
    }
    return out;
}

codec::AcousticTokenGrid fine_part(const codec::AcousticTokenGrid& grid,
                                   const TokenLayout& lay) {
    codec::AcousticTokenGrid out;
    out.n_frames = grid.n_frames;
    out.n_levels = lay.n_fine;
    out.vocab_size = grid.vocab_size;
    out.tokens.resize(out.n_frames * out.n_levels);
    for (size_t t = 0; t < grid.n_frames; ++t) {
        for (size_t l = 0; l < lay.n_fine; ++l) {
            out.at(t, l) = grid.at(t, lay.n_coarse + l);
        }
    }
    return out;
}

struct StageExample {
    tfm::SequenceExample<float> seq;
    std::optional<cond::ConditioningBundle> crop;  // set when an encoder is used
    std::optional<std::vector<int32_t>> sem_for_encoder;
};

StageExample make_example(const tfm::ModelWeights<float>& w, StageKind kind,
                          const ClipData& clip, size_t start_s,
                          const TokenLayout& lay, double crop_seconds,
                          bool conditioned) {
    const auto crop_len = static_cast<size_t>(crop_seconds);
    StageExample ex;
    switch (kind) {
        case StageKind::s1: {
            const auto sem = slice_tokens(clip.sem_tokens, start_s * lay.sem_rate,
                                          crop_len * lay.sem_rate);
            const BuiltSequence b = build_lm_sequence(
                sem, static_cast<int32_t>(lay.bos(StageKind::s1)));
            ex.seq.decoder_tokens = b.tokens;
            ex.seq.targets = b.targets;
            ex.seq.loss_mask = b.mask;
            if (conditioned) {
                ex.crop = cond::crop_bundle(clip.bundle, start_s, crop_len);
                ex.seq.encoder_input = build_encoder_stream(w, *ex.crop, nullptr);
            }
            break;
        }
        case StageKind::s2a: {
            const auto sem = slice_tokens(clip.sem_tokens, start_s * lay.sem_rate,
                                          crop_len * lay.sem_rate);
            const auto grid = slice_grid(clip.grid, start_s * lay.ac_rate,
                                         crop_len * lay.ac_rate);
            auto coarse = flatten_grid(coarse_part(grid, lay), lay.n_coarse);
            for (auto& t : coarse) t += static_cast<int32_t>(lay.s2a_coarse_offset());
            const BuiltSequence b = build_span_sequence(
                sem, coarse, static_cast<int32_t>(lay.bos(StageKind::s2a)));
            ex.seq.decoder_tokens = b.tokens;
            ex.seq.targets = b.targets;
            ex.seq.loss_mask = b.mask;
            break;
        }
        case StageKind::s2b: {
            const auto sem = slice_tokens(clip.sem_tokens, start_s * lay.sem_rate,
                                          crop_len * lay.sem_rate);
            const auto grid = slice_grid(clip.grid, start_s * lay.ac_rate,
                                         crop_len * lay.ac_rate);
            const auto coarse = flatten_grid(coarse_part(grid, lay), lay.n_coarse);
            const BuiltSequence b = build_lm_sequence(
                coarse, static_cast<int32_t>(lay.bos(StageKind::s2b)));
            ex.seq.decoder_tokens = b.tokens;
            ex.seq.targets = b.targets;
            ex.seq.loss_mask = b.mask;
            ex.crop = cond::crop_bundle(clip.bundle, start_s, crop_len);
            ex.sem_for_encoder = sem;
            ex.seq.encoder_input = build_encoder_stream(w, *ex.crop, &sem);
            break;
        }
        case StageKind::s3: {
            const auto grid = slice_grid(clip.grid, start_s * lay.ac_rate,
                                         crop_len * lay.ac_rate);
            const auto coarse = flatten_grid(coarse_part(grid, lay), lay.n_coarse);
            auto fine = flatten_grid(fine_part(grid, lay), lay.n_fine);
            for (auto& t : fine) t += static_cast<int32_t>(lay.s3_fine_offset());
            const BuiltSequence b = build_span_sequence(
                coarse, fine, static_cast<int32_t>(lay.bos(StageKind::s3)));
            ex.seq.decoder_tokens = b.tokens;
            ex.seq.targets = b.targets;
            ex.seq.loss_mask = b.mask;
            break;
        }
    }
    return ex;
}

TrainResult train_generic(StageKind kind, const std::vector<ClipData>& clips,
                          const TokenLayout& layout, const ModelDims& dims,
                          const TrainParams& params, bool conditioned) {
    if (clips.empty()) throw DatasetError("training requires at least one clip");
    const bool needs_bundles =
        (kind == StageKind::s1 && conditioned) || kind == StageKind::s2b;
    if (needs_bundles) {
        for (const auto& c : clips) {
            if (c.bundle.embeddings.empty() && !c.bundle.token_grid) {
                throw ConfigError("stage " + std::string(stage_name(kind)) +
                                  " needs paired visual features, clip " + c.id +
                                  " is audio-only");
            }
        }
    }
    if (params.heldout_clips >= clips.size()) {
        throw ConfigError("heldout_clips must leave at least one training clip");
    }
    const size_t n_train = clips.size() - params.heldout_clips;

    StageSpec spec = make_stage_spec(kind, layout, dims);
    if (kind == StageKind::s1 && !conditioned) {
        spec.model.arch = tfm::Arch::decoder_only;
    }
    for (const auto& c : clips) {
        if (c.duration_s < spec.crop_seconds) {
            throw DatasetError("clip " + c.id + " shorter than the stage crop");
        }
    }

    TrainResult res;
    res.weights = tfm::init_weights<float>(spec.model, params.seed);
    if (needs_bundles || kind == StageKind::s2b) {
        init_stage_adaptors(res.weights, clips, layout, kind == StageKind::s2b,
                            params.seed);
    }
    store_layout_metadata(res.weights, layout, kind);
    res.weights.metadata["crop_seconds"] = std::to_string(spec.crop_seconds);
    res.weights.metadata["temperature"] = std::to_string(spec.temperature);
    if (kind == StageKind::s1 && !conditioned) {
        res.weights.metadata["stage"] = "baseline";
    }

    tfm::AdamState<float> opt;
    tfm::AdamParams adam;
    adam.lr = params.lr;
    Rng rng(params.seed);
    double last_loss = 0.0;

    for (size_t step = 0; step < params.steps; ++step) {
        tfm::GradMap<float> grads;
        double loss = 0.0;
        for (size_t b = 0; b < params.batch_size; ++b) {
            const size_t ci = static_cast<size_t>(rng.below(n_train));
            const size_t start = data::draw_crop_start(clips[ci].duration_s,
                                                       spec.crop_seconds, rng);
            const StageExample ex = make_example(res.weights, kind, clips[ci], start,
                                                 layout, spec.crop_seconds, conditioned);
            if (ex.seq.encoder_input) {
                Mat<float> d_enc(ex.seq.encoder_input->rows,
                                 ex.seq.encoder_input->cols);
                loss += tfm::loss_and_grads(res.weights, ex.seq, grads, &d_enc);
                encoder_stream_backward(
                    res.weights, *ex.crop,
                    ex.sem_for_encoder ? &*ex.sem_for_encoder : nullptr, d_enc, grads);
            } else {
                loss += tfm::loss_and_grads(res.weights, ex.seq, grads);
            }
        }
        loss /= static_cast<double>(params.batch_size);
        if (!std::isfinite(loss)) {
            throw DivergenceError("stage " + std::string(stage_name(kind)) +
                                  " training diverged at step " + std::to_string(step) +
                                  " (loss=" + std::to_string(loss) + ")");
        }
        const float inv_b = 1.0f / static_cast<float>(params.batch_size);
        for (auto& [name, g] : grads) kernels::scale(inv_b, g.v.data(), g.size());
        tfm::adam_step(res.weights, grads, opt, adam);
        last_loss = loss;
        if (params.log_every && step % params.log_every == 0 && params.on_log) {
            params.on_log(step, loss);
        }
    }
    res.final_train_loss = last_loss;

    res.heldout_loss = std::numeric_limits<double>::quiet_NaN();
    if (params.heldout_clips > 0) {
        double total = 0.0;
        for (size_t i = n_train; i < clips.size(); ++i) {
            const StageExample ex = make_example(res.weights, kind, clips[i], 0, layout,
                                                 spec.crop_seconds, conditioned);
            total += tfm::loss_only(res.weights, ex.seq);
        }
        res.heldout_loss = total / static_cast<double>(params.heldout_clips);
    }
    return res;
}

}  // namespace

TrainResult train_stage1(const std::vector<ClipData>& clips, const TokenLayout& layout,
                         const ModelDims& dims, const TrainParams& params) {
    return train_generic(StageKind::s1, clips, layout, dims, params, true);
}

TrainResult train_stage2(const std::vector<ClipData>& clips, StageKind variant,
                         const TokenLayout& layout, const ModelDims& dims,
                         const TrainParams& params) {
    if (variant != StageKind::s2a && variant != StageKind::s2b) {
        throw ConfigError("train_stage2: variant must be 2a or 2b");
    }
    return train_generic(variant, clips, layout, dims, params, true);
}

TrainResult train_stage3(const std::vector<ClipData>& clips, const TokenLayout& layout,
                         const ModelDims& dims, const TrainParams& params) {
    return train_generic(StageKind::s3, clips, layout, dims, params, true);
}

TrainResult train_semantic_lm_baseline(const std::vector<ClipData>& clips,
                                       const TokenLayout& layout, const ModelDims& dims,
                                       const TrainParams& params) {
    return train_generic(StageKind::s1, clips, layout, dims, params, false);
}

double stage1_heldout_loss(const tfm::ModelWeights<float>& w,
                           const std::vector<ClipData>& clips,
                           const TokenLayout& layout, bool conditioned) {
    if (clips.empty()) throw DatasetError("no clips for evaluation");
    double total = 0.0;
    for (const auto& c : clips) {
        const StageExample ex =
            make_example(w, StageKind::s1, c, 0, layout, 10.0, conditioned);
        total += tfm::loss_only(w, ex.seq);
    }
    return total / static_cast<double>(clips.size());
}

double stage_heldout_loss(const tfm::ModelWeights<float>& w, StageKind kind,
                          const std::vector<ClipData>& clips,
                          const TokenLayout& layout) {
    if (clips.empty()) throw DatasetError("no clips for evaluation");
    const double crop = kind == StageKind::s3 ? 3.0 : 10.0;
    double total = 0.0;
    for (const auto& c : clips) {
        const StageExample ex = make_example(w, kind, c, 0, layout, crop, true);
        total += tfm::loss_only(w, ex.seq);
    }
    return total / static_cast<double>(clips.size());
}

void store_layout_metadata(tfm::ModelWeights<float>& w, const TokenLayout& layout,
                           StageKind stage) {
    w.metadata["stage"] = stage_name(stage);
    w.metadata["layout.k_s"] = std::to_string(layout.k_s);
    w.metadata["layout.k_a"] = std::to_string(layout.k_a);
    w.metadata["layout.n_coarse"] = std::to_string(layout.n_coarse);
    w.metadata["layout.n_fine"] = std::to_string(layout.n_fine);
    w.metadata["layout.sem_rate"] = std::to_string(layout.sem_rate);
    w.metadata["layout.ac_rate"] = std::to_string(layout.ac_rate);
}

TokenLayout layout_from_metadata(const std::map<std::string, std::string>& meta) {
    auto get = [&](const char* key) {
        const auto it = meta.find(key);
        if (it == meta.end()) {
            throw ConfigError(std::string("checkpoint metadata missing ") + key);
        }
        return static_cast<size_t>(std::stoull(it->second));
    };
    TokenLayout l;
    l.k_s = get("layout.k_s");
    l.k_a = get("layout.k_a");
    l.n_coarse = get("layout.n_coarse");
    l.n_fine = get("layout.n_fine");
    l.sem_rate = get("layout.sem_rate");
    l.ac_rate = get("layout.ac_rate");
    return l;
}

namespace {

bool same_layout(const TokenLayout& a, const TokenLayout& b) {
    return a.k_s == b.k_s && a.k_a == b.k_a && a.n_coarse == b.n_coarse &&
           a.n_fine == b.n_fine && a.sem_rate == b.sem_rate && a.ac_rate == b.ac_rate;
}

double meta_temperature(const tfm::ModelWeights<float>& w, double fallback) {
    const auto it = w.metadata.find("temperature");
    return it == w.metadata.end() ? fallback : std::stod(it->second);
}

// Constrained autoregressive sampling over an existing session.
std::vector<int32_t> sample_ranged(
    tfm::DecodeSession<float>& session, std::span<const int32_t> prefix, size_t n_new,
    double temperature, uint64_t seed,
    const std::function<std::pair<int32_t, int32_t>(size_t)>& range_for) {
    Rng rng(seed);
    for (size_t i = 0; i + 1 < prefix.size(); ++i) session.step(prefix[i]);
    const std::vector<float>* logits = &session.step(prefix.back());
    std::vector<int32_t> out;
    out.reserve(n_new);
    for (size_t i = 0; i < n_new; ++i) {
        const auto [lo, hi] = range_for(i);
        const int32_t tok = tfm::sample_from_logits<float>(
            std::span<const float>(logits->data(), logits->size()), temperature, rng,
            lo, hi);
        out.push_back(tok);
        if (i + 1 < n_new) logits = &session.step(tok);
    }
    return out;
}

}  // namespace

codec::AcousticTokenGrid complete_fine_grid(const tfm::ModelWeights<float>& s3,
                                            const codec::AcousticTokenGrid& coarse,
                                            const TokenLayout& lay,
                                            double temperature, uint64_t seed) {
    if (coarse.n_levels != lay.n_coarse) {
        throw ShapeError("complete_fine_grid: coarse grid level count mismatch");
    }
    std::vector<int32_t> prefix;
    prefix.reserve(1 + coarse.n_frames * lay.n_coarse);
    prefix.push_back(static_cast<int32_t>(lay.bos(StageKind::s3)));
    for (int32_t t : flatten_grid(coarse, lay.n_coarse)) prefix.push_back(t);

    tfm::DecodeSession<float> session(s3, nullptr);
    const auto offset = static_cast<int32_t>(lay.s3_fine_offset());
    std::vector<int32_t> fine_flat = sample_ranged(
        session, prefix, coarse.n_frames * lay.n_fine, temperature, seed,
        [&](size_t p) {
            const auto lvl = static_cast<int32_t>(p % lay.n_fine);
            const auto lo = offset + lvl * static_cast<int32_t>(lay.k_a);
            return std::pair<int32_t, int32_t>(lo, lo + static_cast<int32_t>(lay.k_a));
        });
    for (auto& t : fine_flat) t -= offset;
    const codec::AcousticTokenGrid fine = unflatten_grid(fine_flat, lay.n_fine, lay.k_a);
    return codec::concat_levels(coarse, fine);
}

audio::Waveform generate(const cond::ConditioningBundle& bundle,
                         const tfm::ModelWeights<float>& s1,
                         const tfm::ModelWeights<float>& s2,
                         const tfm::ModelWeights<float>& s3,
                         const codec::RvqCodec& codec, size_t duration_s,
                         const GenerateSeeds& seeds) {
    const TokenLayout lay = layout_from_metadata(s1.metadata);
    if (!same_layout(lay, layout_from_metadata(s2.metadata)) ||
        !same_layout(lay, layout_from_metadata(s3.metadata))) {
        throw ConfigError("stage checkpoints have incompatible token layouts");
    }
    const auto& ccfg = codec.config();
    if (ccfg.vocab_size != lay.k_a || ccfg.n_levels != lay.n_coarse + lay.n_fine ||
        ccfg.n_coarse != lay.n_coarse) {
        throw ConfigError("codec configuration does not match checkpoint layout");
    }
    if (static_cast<size_t>(ccfg.sample_rate) != lay.ac_rate * ccfg.frame_size) {
        throw ConfigError("codec frame rate does not match checkpoint layout");
    }
    const auto s2_stage = s2.metadata.count("stage") ? s2.metadata.at("stage") : "2a";
    if (s2_stage != "2a" && s2_stage != "2b") {
        throw ConfigError("second checkpoint is not a stage-2 model");
    }
    const double crop_s = std::stod(s1.metadata.at("crop_seconds"));
    if (duration_s == 0 || static_cast<double>(duration_s) > crop_s) {
        throw DomainError("duration must be in [1, trained crop length] seconds");
    }
    if (bundle.duration_s < static_cast<double>(duration_s)) {
        throw DomainError("conditioning bundle shorter than requested duration");
    }

    const cond::ConditioningBundle crop = cond::crop_bundle(bundle, 0, duration_s);

    // Stage 1: visual features -> semantic tokens.
    const MatF enc1 = build_encoder_stream(s1, crop, nullptr);
    std::vector<int32_t> sem;
    {
        tfm::DecodeSession<float> session(s1, &enc1);
        const int32_t bos = static_cast<int32_t>(lay.bos(StageKind::s1));
        sem = sample_ranged(session, std::span<const int32_t>(&bos, 1),
                            duration_s * lay.sem_rate, meta_temperature(s1, 1.0),
                            seeds.stage1, [&](size_t) {
                                return std::pair<int32_t, int32_t>(
                                    0, static_cast<int32_t>(lay.k_s));
                            });
    }

    // Stage 2: semantic tokens (-> visual features) -> coarse grid.
    const size_t n_cframes = duration_s * lay.ac_rate;
    std::vector<int32_t> coarse_flat;
    if (s2_stage == "2a") {
        std::vector<int32_t> prefix;
        prefix.reserve(1 + sem.size());
        prefix.push_back(static_cast<int32_t>(lay.bos(StageKind::s2a)));
        for (int32_t t : sem) prefix.push_back(t);
        tfm::DecodeSession<float> session(s2, nullptr);
        const auto offset = static_cast<int32_t>(lay.s2a_coarse_offset());
        coarse_flat = sample_ranged(
            session, prefix, n_cframes * lay.n_coarse, meta_temperature(s2, 0.95),
            seeds.stage2, [&](size_t p) {
                const auto lvl = static_cast<int32_t>(p % lay.n_coarse);
                const auto lo = offset + lvl * static_cast<int32_t>(lay.k_a);
                return std::pair<int32_t, int32_t>(lo,
                                                   lo + static_cast<int32_t>(lay.k_a));
            });
        for (auto& t : coarse_flat) t -= offset;
    } else {
        const MatF enc2 = build_encoder_stream(s2, crop, &sem);
        tfm::DecodeSession<float> session(s2, &enc2);
        const int32_t bos = static_cast<int32_t>(lay.bos(StageKind::s2b));
        coarse_flat = sample_ranged(
            session, std::span<const int32_t>(&bos, 1), n_cframes * lay.n_coarse,
            meta_temperature(s2, 0.95), seeds.stage2, [&](size_t p) {
                const auto lvl = static_cast<int32_t>(p % lay.n_coarse);
                const auto lo = lvl * static_cast<int32_t>(lay.k_a);
                return std::pair<int32_t, int32_t>(lo,
                                                   lo + static_cast<int32_t>(lay.k_a));
            });
    }
    const codec::AcousticTokenGrid coarse =
        unflatten_grid(coarse_flat, lay.n_coarse, lay.k_a);

    // Stage 3: fine completion in crop-sized windows over the coarse grid.
    codec::AcousticTokenGrid full;
    full.n_frames = n_cframes;
    full.n_levels = lay.n_coarse + lay.n_fine;
    full.vocab_size = lay.k_a;
    full.tokens.resize(full.n_frames * full.n_levels);
    const double s3_crop = std::stod(s3.metadata.at("crop_seconds"));
    const auto window_s = static_cast<size_t>(s3_crop);
    const Rng s3_base(seeds.stage3);
    size_t window_index = 0;
    for (size_t w0 = 0; w0 < duration_s; w0 += window_s, ++window_index) {
        const size_t w1 = std::min(duration_s, w0 + window_s);
        const size_t f0 = w0 * lay.ac_rate;
        const size_t frames = (w1 - w0) * lay.ac_rate;

        codec::AcousticTokenGrid cwin;
        cwin.n_frames = frames;
        cwin.n_levels = lay.n_coarse;
        cwin.vocab_size = lay.k_a;
        cwin.tokens.assign(coarse.tokens.begin() + f0 * lay.n_coarse,
                           coarse.tokens.begin() + (f0 + frames) * lay.n_coarse);

        const codec::AcousticTokenGrid fwin =
            complete_fine_grid(s3, cwin, lay, meta_temperature(s3, 0.4),
                               s3_base.fork(window_index).seed());
        std::copy(fwin.tokens.begin(), fwin.tokens.end(),
                  full.tokens.begin() + f0 * full.n_levels);
    }

    audio::Waveform wav = codec.decode(full, full.n_levels);
    wav.samples.resize(duration_s * static_cast<size_t>(wav.sample_rate), 0.0f);
    return wav;
}

void write_pipeline_manifest(const std::string& path, const PipelineManifest& m) {
    json j;
    j["stage1"] = m.stage1;
    j["stage2"] = m.stage2;
    j["stage3"] = m.stage3;
    j["codec"] = m.codec_path;
    j["semantic_codebook"] = m.semantic_path;
    std::ofstream f(path);
    if (!f) throw IoError("cannot write pipeline manifest: " + path);
    f << j.dump(2) << '\n';
}

PipelineManifest read_pipeline_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open pipeline manifest: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ValidationError("pipeline manifest parse error: " + std::string(e.what()));
    }
    PipelineManifest m;
    const fs::path base = fs::path(path).parent_path();
    auto resolve = [&](const std::string& p) {
        return fs::path(p).is_absolute() ? p : (base / p).string();
    };
    try {
        m.stage1 = resolve(j.at("stage1").get<std::string>());
        m.stage2 = resolve(j.at("stage2").get<std::string>());
        m.stage3 = resolve(j.at("stage3").get<std::string>());
        m.codec_path = resolve(j.at("codec").get<std::string>());
        m.semantic_path = resolve(j.at("semantic_codebook").get<std::string>());
    } catch (const json::exception& e) {
        throw ValidationError("pipeline manifest missing field: " +
                              std::string(e.what()));
    }
    return m;
}

}  // namespace meow::pipeline
