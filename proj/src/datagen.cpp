#include "meow/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "meow/tensor_io.hpp"

namespace fs = std::filesystem;

namespace meow::data {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest: " + path);
    DatasetManifest m;
    m.base_dir = fs::path(path).parent_path().string();
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto fields = split(line, '\t');
        if (fields.size() < 5) {
            throw DatasetError("manifest line " + std::to_string(lineno) +
                               ": expected at least 5 tab-separated fields");
        }
        ManifestEntry e;
        e.clip_id = fields[0];
        try {
            e.duration_s = std::stod(fields[1]);
        } catch (const std::exception&) {
            throw DatasetError("manifest line " + std::to_string(lineno) +
                               ": bad duration '" + fields[1] + "'");
        }
        e.audio_path = fields[2];
        e.style_path = fields[3] == "-" ? "" : fields[3];
        for (size_t i = 4; i < fields.size(); ++i) {
            const auto parts = split(fields[i], ':');
            if (parts.size() != 3) {
                throw DatasetError("manifest line " + std::to_string(lineno) +
                                   ": bad feature descriptor '" + fields[i] + "'");
            }
            FeatureDesc d;
            d.kind = parts[0];
            d.dim = static_cast<size_t>(std::stoul(parts[1]));
            d.path = parts[2];
            e.features.push_back(std::move(d));
        }
        m.entries.push_back(std::move(e));
    }
    return m;
}

void write_manifest(const std::string& path, const DatasetManifest& manifest) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open manifest for writing: " + path);
    for (const auto& e : manifest.entries) {
        f << e.clip_id << '\t' << e.duration_s << '\t' << e.audio_path << '\t'
          << (e.style_path.empty() ? "-" : e.style_path);
        for (const auto& d : e.features) {
            f << '\t' << d.kind << ':' << d.dim << ':' << d.path;
        }
        f << '\n';
    }
    if (!f) throw IoError("manifest write failed: " + path);
}

std::string resolve_path(const DatasetManifest& m, const std::string& rel) {
    const fs::path p(rel);
    if (p.is_absolute() || m.base_dir.empty()) return rel;
    return (fs::path(m.base_dir) / p).string();
}

void validate_manifest(const DatasetManifest& manifest, double min_duration_s) {
    std::set<std::string> ids;
    for (const auto& e : manifest.entries) {
        if (!ids.insert(e.clip_id).second) {
            throw DatasetError("duplicate clip id: " + e.clip_id);
        }
        if (e.duration_s < min_duration_s) {
            throw DatasetError("clip " + e.clip_id + " shorter than required " +
                               std::to_string(min_duration_s) + " s");
        }
        const audio::Waveform w = audio::read_wav(resolve_path(manifest, e.audio_path));
        if (std::abs(w.duration_s() - e.duration_s) > 0.05) {
            throw DatasetError("clip " + e.clip_id + " audio duration " +
                               std::to_string(w.duration_s()) +
                               " disagrees with manifest " +
                               std::to_string(e.duration_s));
        }
        const auto expected_frames = static_cast<uint64_t>(e.duration_s);
        for (const auto& d : e.features) {
            const TensorData t = read_tensor(resolve_path(manifest, d.path));
            if (t.dims.size() != 2 || t.dtype != Dtype::f32) {
                throw DatasetError("clip " + e.clip_id + ": feature file " + d.path +
                                   " is not a rank-2 f32 tensor");
            }
            if (t.dims[0] != expected_frames) {
                throw DatasetError("clip " + e.clip_id + ": feature frame count " +
                                   std::to_string(t.dims[0]) + " != duration " +
                                   std::to_string(expected_frames));
            }
            if (t.dims[1] != d.dim) {
                throw DatasetError("clip " + e.clip_id + ": feature dim " +
                                   std::to_string(t.dims[1]) +
                                   " != declared " + std::to_string(d.dim));
            }
        }
        if (!e.style_path.empty()) {
            const TensorData t = read_tensor(resolve_path(manifest, e.style_path));
            if (t.elem_count() != cond::kStyleDim) {
                throw DatasetError("clip " + e.clip_id + ": style embedding must have " +
                                   std::to_string(cond::kStyleDim) + " values");
            }
        }
    }
}

cond::ConditioningBundle load_bundle(const DatasetManifest& m, const ManifestEntry& e) {
    cond::ConditioningBundle b;
    b.duration_s = e.duration_s;
    for (const auto& d : e.features) {
        cond::VisualEmbeddingSequence seq;
        seq.kind = cond::kind_from_name(d.kind);
        seq.frame_rate = 1;
        seq.vectors = read_tensor_f32_2d(resolve_path(m, d.path));
        if (seq.vectors.cols != d.dim) {
            throw DatasetError("clip " + e.clip_id + ": feature dim mismatch");
        }
        b.embeddings.push_back(std::move(seq));
    }
    if (!e.style_path.empty()) {
        const TensorData t = read_tensor(resolve_path(m, e.style_path));
        cond::StyleEmbedding s;
        s.v.assign(t.f32.begin(), t.f32.end());
        b.style = std::move(s);
    }
    return b;
}

// ---- synthetic corpus ----

void SyntheticSpec::validate() const {
    if (n_timbre_classes < 2) {
        throw ConfigError("synthetic: n_timbre_classes must be >= 2");
    }
    if (tempo_min_bpm < 40.0 || tempo_max_bpm > 240.0 || tempo_min_bpm > tempo_max_bpm) {
        throw ConfigError("synthetic: tempo range must lie within [40, 240] BPM");
    }
    if (duration_s <= 0.0 || n_clips == 0) {
        throw ConfigError("synthetic: need positive duration and clip count");
    }
    if (noise_level < 0.0) throw ConfigError("synthetic: noise_level must be >= 0");
    if (feature_dim == 0) throw ConfigError("synthetic: feature_dim must be > 0");
}

namespace {
constexpr uint64_t kRecipeSeed = 0xC1A55E00u;
constexpr uint64_t kFeatureMapSeed = 0xFEA70000u;
constexpr uint64_t kStyleSeed = 0x57E1E000u;
}  // namespace

void synthetic_class_recipe(size_t timbre_class, double* base_freq_hz,
                            std::vector<double>* partial_amps) {
    Rng rng(kRecipeSeed + timbre_class);
    // Quarter-octave spacing keeps fundamentals apart; partial weights give
    // each class its own spectral tilt.
    *base_freq_hz = 180.0 * std::pow(2.0, static_cast<double>(timbre_class % 8) / 4.0 +
                                              0.1 * rng.uniform());
    partial_amps->resize(4);
    double sum = 0.0;
    for (size_t h = 0; h < 4; ++h) {
        (*partial_amps)[h] = 0.2 + 0.8 * rng.uniform();
        sum += (*partial_amps)[h];
    }
    for (auto& a : *partial_amps) a /= sum;
}

MatF synthetic_feature_map(size_t feature_dim, size_t n_classes) {
    Rng rng(kFeatureMapSeed);
    return randn_mat<float>(feature_dim, 1 + n_classes, rng);
}

std::vector<float> synthetic_class_style(size_t timbre_class) {
    Rng rng(kStyleSeed + timbre_class);
    std::vector<float> v(cond::kStyleDim);
    double norm2 = 0.0;
    for (auto& x : v) {
        x = static_cast<float>(rng.normal());
        norm2 += double(x) * x;
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(norm2));
    for (auto& x : v) x *= inv;
    return v;
}

std::vector<float> synthetic_feature_code(double tempo_bpm, size_t timbre_class,
                                          size_t n_classes) {
    std::vector<float> z(1 + n_classes, 0.0f);
    z[0] = static_cast<float>((tempo_bpm - 40.0) / 200.0);
    z[1 + timbre_class] = 1.0f;
    return z;
}

SyntheticClip generate_synthetic_pair(const SyntheticSpec& spec, size_t clip_index) {
    spec.validate();
    if (clip_index >= spec.n_clips) {
        throw DomainError("generate_synthetic_pair: clip_index out of range");
    }
    const Rng base(spec.seed);
    Rng rng = base.fork(clip_index);

    SyntheticClip clip;
    clip.labels.tempo_bpm = rng.uniform(spec.tempo_min_bpm, spec.tempo_max_bpm);
    clip.labels.timbre_class = static_cast<size_t>(rng.below(spec.n_timbre_classes));

    double f0 = 0.0;
    std::vector<double> amps;
    synthetic_class_recipe(clip.labels.timbre_class, &f0, &amps);

    const auto n = static_cast<size_t>(spec.duration_s * spec.sample_rate);
    clip.audio.sample_rate = spec.sample_rate;
    clip.audio.samples.assign(n, 0.0f);

    // Note events on the beat grid: short attack, exponential decay.
    const double beat_s = 60.0 / clip.labels.tempo_bpm;
    const double note_len = std::min(0.25, beat_s * 0.8);
    for (double onset = 0.0; onset < spec.duration_s; onset += beat_s) {
        const auto start = static_cast<size_t>(onset * spec.sample_rate);
        const auto len = static_cast<size_t>(note_len * spec.sample_rate);
        for (size_t i = 0; i < len && start + i < n; ++i) {
            const double t = static_cast<double>(i) / spec.sample_rate;
            const double attack = std::min(1.0, t / 0.004);
            // Short release ramp so the note ends without a truncation click.
            const double release =
                std::min(1.0, double(len - i) / (0.005 * spec.sample_rate));
            const double env = attack * release * std::exp(-t / 0.05);
            double s = 0.0;
            for (size_t h = 0; h < amps.size(); ++h) {
                s += amps[h] * std::sin(2.0 * M_PI * f0 * double(h + 1) * t);
            }
            clip.audio.samples[start + i] += static_cast<float>(0.6 * env * s);
        }
    }
    if (spec.noise_level > 0.0) {
        for (auto& s : clip.audio.samples) {
            s += static_cast<float>(spec.noise_level * rng.normal());
        }
    }
    for (auto& s : clip.audio.samples) s = std::clamp(s, -1.0f, 1.0f);

    // Visual features: fixed linear map of (tempo, class), fresh per-frame noise.
    const MatF map = synthetic_feature_map(spec.feature_dim, spec.n_timbre_classes);
    const std::vector<float> z = synthetic_feature_code(
        clip.labels.tempo_bpm, clip.labels.timbre_class, spec.n_timbre_classes);
    const auto n_frames = static_cast<size_t>(spec.duration_s);
    cond::VisualEmbeddingSequence seq;
    seq.kind = cond::FeatureKind::clip_like;
    seq.frame_rate = 1;
    seq.vectors = MatF(n_frames, spec.feature_dim);
    for (size_t t = 0; t < n_frames; ++t) {
        for (size_t d = 0; d < spec.feature_dim; ++d) {
            double v = 0.0;
            for (size_t j = 0; j < z.size(); ++j) v += double(map.at(d, j)) * z[j];
            seq.vectors.at(t, d) =
                static_cast<float>(v + spec.noise_level * rng.normal());
        }
    }
    clip.bundle.duration_s = spec.duration_s;
    clip.bundle.embeddings.push_back(std::move(seq));
    clip.bundle.style = cond::StyleEmbedding{
        synthetic_class_style(clip.labels.timbre_class)};
    return clip;
}

DatasetManifest write_synthetic_corpus(const SyntheticSpec& spec,
                                       const std::string& dir) {
    spec.validate();
    fs::create_directories(fs::path(dir) / "wav");
    fs::create_directories(fs::path(dir) / "feat");
    fs::create_directories(fs::path(dir) / "style");

    DatasetManifest m;
    m.base_dir = dir;
    std::ofstream labels(fs::path(dir) / "labels.tsv");
    if (!labels) throw IoError("cannot write labels.tsv under " + dir);

    for (size_t i = 0; i < spec.n_clips; ++i) {
        const SyntheticClip clip = generate_synthetic_pair(spec, i);
        char id[32];
        std::snprintf(id, sizeof id, "clip%05zu", i);

        ManifestEntry e;
        e.clip_id = id;
        e.duration_s = spec.duration_s;
        e.audio_path = std::string("wav/") + id + ".wav";
        e.style_path = std::string("style/") + id + ".meowtn";
        audio::write_wav(resolve_path(m, e.audio_path), clip.audio);

        const auto& seq = clip.bundle.embeddings.front();
        FeatureDesc d;
        d.kind = cond::kind_name(seq.kind);
        d.dim = seq.vectors.cols;
        d.path = std::string("feat/") + id + ".meowtn";
        write_tensor_f32(resolve_path(m, d.path), seq.vectors);
        e.features.push_back(d);

        MatF style(1, cond::kStyleDim);
        std::copy(clip.bundle.style->v.begin(), clip.bundle.style->v.end(),
                  style.v.begin());
        write_tensor_f32(resolve_path(m, e.style_path), style);

        labels << id << '\t' << clip.labels.tempo_bpm << '\t'
               << clip.labels.timbre_class << '\n';
        m.entries.push_back(std::move(e));
    }
    write_manifest((fs::path(dir) / "manifest.tsv").string(), m);
    return m;
}

std::vector<std::pair<std::string, SyntheticLabels>> read_labels(
    const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open labels: " + path);
    std::vector<std::pair<std::string, SyntheticLabels>> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto fields = split(line, '\t');
        if (fields.size() != 3) throw DatasetError("bad labels line: " + line);
        SyntheticLabels l;
        l.tempo_bpm = std::stod(fields[1]);
        l.timbre_class = static_cast<size_t>(std::stoul(fields[2]));
        out.emplace_back(fields[0], l);
    }
    return out;
}

// ---- crops ----

size_t draw_crop_start(double duration_s, double crop_seconds, Rng& rng) {
    if (duration_s < crop_seconds) {
        throw DatasetError("clip shorter than the requested crop");
    }
    const auto span = static_cast<uint64_t>(duration_s - crop_seconds);
    return static_cast<size_t>(rng.below(span + 1));
}

audio::Waveform crop_audio(const audio::Waveform& w, size_t start_s, size_t len_s) {
    const size_t begin = start_s * static_cast<size_t>(w.sample_rate);
    const size_t count = len_s * static_cast<size_t>(w.sample_rate);
    if (begin + count > w.samples.size()) {
        throw DomainError("crop_audio: crop exceeds waveform length");
    }
    audio::Waveform out;
    out.sample_rate = w.sample_rate;
    out.samples.assign(w.samples.begin() + begin, w.samples.begin() + begin + count);
    return out;
}

CropPair random_crop(const audio::Waveform& audio_in,
                     const cond::ConditioningBundle& bundle, double crop_seconds,
                     Rng& rng) {
    const auto len = static_cast<size_t>(crop_seconds);
    if (std::abs(crop_seconds - double(len)) > 1e-9) {
        throw DomainError("random_crop: crop_seconds must be a whole number of seconds");
    }
    CropPair out;
    out.start_s = draw_crop_start(bundle.duration_s, crop_seconds, rng);
    out.audio = crop_audio(audio_in, out.start_s, len);
    out.bundle = cond::crop_bundle(bundle, out.start_s, len);
    return out;
}

}  // namespace meow::data
