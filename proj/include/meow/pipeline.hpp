#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "meow/codec.hpp"
#include "meow/conditioning.hpp"
#include "meow/datagen.hpp"
#include "meow/semantic.hpp"
#include "meow/transformer.hpp"

namespace meow::pipeline {

enum class StageKind { s1, s2a, s2b, s3 };

const char* stage_name(StageKind k);
StageKind stage_from_name(const std::string& s);

// Token-space bookkeeping shared by all stages. Decoder id layout:
//   stage 1 : semantic ids [0, k_s), BOS = k_s
//   stage 2A: semantic ids [0, k_s), coarse flat ids + k_s, BOS last
//   stage 2B: coarse flat ids [0, n_coarse*k_a), BOS last
//   stage 3 : coarse flat ids as-is, fine flat ids + n_coarse*k_a, BOS last
// Flat ids inside a grid follow the frame-major, level-minor scheme
// id(t, l) = grid[t][l] + l * k_a.
struct TokenLayout {
    size_t k_s = 0;
    size_t k_a = 0;
    size_t n_coarse = 0;
    size_t n_fine = 0;
    size_t sem_rate = 0;  // semantic tokens per second
    size_t ac_rate = 0;   // acoustic frames per second

    size_t s1_vocab() const { return k_s + 1; }
    size_t s2a_vocab() const { return k_s + n_coarse * k_a + 1; }
    size_t s2b_vocab() const { return n_coarse * k_a + 1; }
    size_t s3_vocab() const { return (n_coarse + n_fine) * k_a + 1; }
    size_t s2a_coarse_offset() const { return k_s; }
    size_t s3_fine_offset() const { return n_coarse * k_a; }
    size_t bos(StageKind k) const;
};

TokenLayout make_layout(const codec::CodecConfig& codec_cfg,
                        const semantic::SemanticConfig& sem_cfg);

// ---- flattening ----

std::vector<int32_t> flatten_grid(const codec::AcousticTokenGrid& grid, size_t levels);
codec::AcousticTokenGrid unflatten_grid(std::span<const int32_t> flat, size_t levels,
                                        size_t vocab_per_level);

// ---- teacher-forcing sequence construction ----

struct BuiltSequence {
    std::vector<int32_t> tokens;   // decoder input, starts with BOS
    std::vector<int32_t> targets;  // next-token targets
    std::vector<uint8_t> mask;     // 1 where the loss applies
};

// Loss over every position.
BuiltSequence build_lm_sequence(std::span<const int32_t> payload, int32_t bos_id);
// Loss restricted to the target span; decoder length |cond| + |target|.
BuiltSequence build_span_sequence(std::span<const int32_t> cond,
                                  std::span<const int32_t> target, int32_t bos_id);

// ---- stage specs & training ----

struct ModelDims {
    size_t n_layers = 2;
    size_t n_heads = 8;
    size_t d_model = 128;
    size_t d_ff = 512;
    size_t rel_buckets = 32;
    size_t rel_max_distance = 128;
};

struct StageSpec {
    StageKind stage = StageKind::s1;
    tfm::TransformerConfig model;
    double crop_seconds = 10.0;  // 10 for stages 1-2, 3 for stage 3
    double temperature = 1.0;    // 1.0 / 0.95 / 0.4 for stages 1 / 2 / 3
};

StageSpec make_stage_spec(StageKind kind, const TokenLayout& layout,
                          const ModelDims& dims);

// One fully tokenized clip, ready for crop sampling.
struct ClipData {
    std::string id;
    cond::ConditioningBundle bundle;  // empty for audio-only corpora
    std::vector<int32_t> sem_tokens;  // full clip at sem_rate
    codec::AcousticTokenGrid grid;    // full clip at ac_rate
    double duration_s = 0.0;
};

// Tokenizes every manifest entry once (semantic tokens + acoustic grid).
// need_bundles = false skips feature loading for audio-only training.
std::vector<ClipData> prepare_clips(const data::DatasetManifest& manifest,
                                    const codec::RvqCodec& codec,
                                    const semantic::SemanticCodebook& sem_cb,
                                    const semantic::SemanticConfig& sem_cfg,
                                    bool need_bundles);

struct TrainParams {
    size_t steps = 1000;
    size_t batch_size = 8;
    double lr = 3e-4;
    uint64_t seed = 0;
    size_t heldout_clips = 0;  // taken from the tail of the clip list
    size_t log_every = 0;      // 0 = silent
    std::function<void(size_t, double)> on_log;
};

struct TrainResult {
    tfm::ModelWeights<float> weights;
    double final_train_loss = 0.0;
    double heldout_loss = 0.0;  // NaN when no held-out clips
};

TrainResult train_stage1(const std::vector<ClipData>& clips, const TokenLayout& layout,
                         const ModelDims& dims, const TrainParams& params);
TrainResult train_stage2(const std::vector<ClipData>& clips, StageKind variant,
                         const TokenLayout& layout, const ModelDims& dims,
                         const TrainParams& params);
TrainResult train_stage3(const std::vector<ClipData>& clips, const TokenLayout& layout,
                         const ModelDims& dims, const TrainParams& params);

// Decoder-only LM over semantic tokens with no conditioning; the ablation
// baseline that stage 1 must beat on held-out cross-entropy.
TrainResult train_semantic_lm_baseline(const std::vector<ClipData>& clips,
                                       const TokenLayout& layout, const ModelDims& dims,
                                       const TrainParams& params);

// Mean held-out cross-entropy of a stage-1-shaped model (crop start 0).
double stage1_heldout_loss(const tfm::ModelWeights<float>& w,
                           const std::vector<ClipData>& clips,
                           const TokenLayout& layout, bool conditioned);

// Mean cross-entropy of any stage's model over fixed (start 0) crops of the
// given clips; the masked span matches that stage's training objective.
double stage_heldout_loss(const tfm::ModelWeights<float>& w, StageKind kind,
                          const std::vector<ClipData>& clips,
                          const TokenLayout& layout);

// Argmax/temperature completion of the fine levels for a coarse grid window
// using a stage-3 checkpoint; returns the full (coarse + fine) grid.
codec::AcousticTokenGrid complete_fine_grid(const tfm::ModelWeights<float>& s3,
                                            const codec::AcousticTokenGrid& coarse,
                                            const TokenLayout& layout,
                                            double temperature, uint64_t seed);

// ---- encoder stream plumbing shared by training and generation ----

MatF build_encoder_stream(const tfm::ModelWeights<float>& w,
                          const cond::ConditioningBundle& crop,
                          const std::vector<int32_t>* sem_tokens);

// ---- generation ----

struct GenerateSeeds {
    uint64_t stage1 = 1;
    uint64_t stage2 = 2;
    uint64_t stage3 = 3;
};

// bundle -> semantic tokens -> coarse grid -> fine grid (3 s windows) ->
// waveform of exactly duration_s * sample_rate samples.
audio::Waveform generate(const cond::ConditioningBundle& bundle,
                         const tfm::ModelWeights<float>& s1,
                         const tfm::ModelWeights<float>& s2,
                         const tfm::ModelWeights<float>& s3,
                         const codec::RvqCodec& codec, size_t duration_s,
                         const GenerateSeeds& seeds);

// Layout stored in checkpoint metadata at train time; generate() checks that
// all three stages agree.
TokenLayout layout_from_metadata(const std::map<std::string, std::string>& meta);
void store_layout_metadata(tfm::ModelWeights<float>& w, const TokenLayout& layout,
                           StageKind stage);

// ---- pipeline manifest (JSON) ----

struct PipelineManifest {
    std::string stage1, stage2, stage3;
    std::string codec_path;
    std::string semantic_path;
};

void write_pipeline_manifest(const std::string& path, const PipelineManifest& m);
PipelineManifest read_pipeline_manifest(const std::string& path);

}  // namespace meow::pipeline
