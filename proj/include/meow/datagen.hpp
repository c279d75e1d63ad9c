#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meow/audio.hpp"
#include "meow/conditioning.hpp"
#include "meow/mat.hpp"
#include "meow/rng.hpp"

namespace meow::data {

// One manifest line, tab separated:
//   clip_id  duration_s  audio_path  style_path|-  kind:dim:path ...
struct FeatureDesc {
    std::string kind;  // "clip-like" | "flow-like"
    size_t dim = 0;
    std::string path;
};

struct ManifestEntry {
    std::string clip_id;
    double duration_s = 0.0;
    std::string audio_path;
    std::string style_path;  // empty when absent
    std::vector<FeatureDesc> features;
};

struct DatasetManifest {
    std::string base_dir;  // directory of the manifest file; paths resolve against it
    std::vector<ManifestEntry> entries;
};

DatasetManifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const DatasetManifest& manifest);
std::string resolve_path(const DatasetManifest& m, const std::string& rel);

// Opens every referenced file; throws DatasetError on duplicate ids, missing
// files, undersized durations, or feature frame counts != duration_s.
void validate_manifest(const DatasetManifest& manifest, double min_duration_s = 0.0);

// Loads one entry into a bundle (features at 1 fps).
cond::ConditioningBundle load_bundle(const DatasetManifest& m, const ManifestEntry& e);

// ---- synthetic paired corpus ----

struct SyntheticSpec {
    size_t n_clips = 200;
    double duration_s = 12.0;
    double tempo_min_bpm = 60.0;
    double tempo_max_bpm = 180.0;
    size_t n_timbre_classes = 4;
    double noise_level = 0.02;
    uint64_t seed = 0;
    size_t feature_dim = 64;
    int sample_rate = audio::kDefaultSampleRate;

    void validate() const;  // tempo range within [40, 240], classes >= 2
};

struct SyntheticLabels {
    double tempo_bpm = 0.0;
    size_t timbre_class = 0;
};

struct SyntheticClip {
    audio::Waveform audio;
    cond::ConditioningBundle bundle;
    SyntheticLabels labels;
};

// The fixed generating maps, exposed so tests can invert them.
MatF synthetic_feature_map(size_t feature_dim, size_t n_classes);  // [dim x (1+C)]
std::vector<float> synthetic_class_style(size_t timbre_class);     // unit 128-d
void synthetic_class_recipe(size_t timbre_class, double* base_freq_hz,
                            std::vector<double>* partial_amps);
// z = [normalized tempo over the spec-wide range [40,240]; one-hot class]
std::vector<float> synthetic_feature_code(double tempo_bpm, size_t timbre_class,
                                          size_t n_classes);

SyntheticClip generate_synthetic_pair(const SyntheticSpec& spec, size_t clip_index);

// Writes wav/, feat/, style/ files plus manifest.tsv and labels.tsv under dir.
DatasetManifest write_synthetic_corpus(const SyntheticSpec& spec,
                                       const std::string& dir);

// labels.tsv: clip_id, tempo_bpm, timbre_class
std::vector<std::pair<std::string, SyntheticLabels>> read_labels(
    const std::string& path);

// ---- crops ----

// Start drawn uniformly over integer seconds in [0, duration - crop].
size_t draw_crop_start(double duration_s, double crop_seconds, Rng& rng);
audio::Waveform crop_audio(const audio::Waveform& w, size_t start_s, size_t len_s);

struct CropPair {
    audio::Waveform audio;
    cond::ConditioningBundle bundle;
    size_t start_s = 0;
};

CropPair random_crop(const audio::Waveform& audio, const cond::ConditioningBundle& bundle,
                     double crop_seconds, Rng& rng);

}  // namespace meow::data
