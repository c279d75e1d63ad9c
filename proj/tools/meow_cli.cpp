// Command-line driver: data synthesis, tokenizer/codec training, stage
// training, generation and evaluation as reproducible batch commands.
//
// Every run resolves its configuration (JSON file + flag overrides), hashes
// it, and writes all outputs under <out-root>/<hash8>/.

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"

#include "meow/checkpoint.hpp"
#include "meow/evalsuite.hpp"
#include "meow/kernels.hpp"
#include "meow/kmeans.hpp"
#include "meow/pipeline.hpp"
#include "meow/tensor_io.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;
using namespace meow;

namespace {

json default_config() {
    return json{
        {"seed", 42},
        {"codec",
         {{"frame_size", 320},
          {"n_levels", 8},
          {"n_coarse", 4},
          {"n_fine", 4},
          {"vocab_size", 256}}},
        {"semantic", {{"frame_rate", 25}, {"n_bands", 64}, {"vocab_size", 1024}}},
        {"model",
         {{"n_layers", 4},
          {"n_heads", 8},
          {"d_model", 256},
          {"d_ff", 1024},
          {"rel_buckets", 32},
          {"rel_max_distance", 128}}},
        {"train",
         {{"steps", 1000},
          {"batch_size", 4},
          {"lr", 1e-3},
          {"heldout_clips", 0},
          {"max_codec_frames", 60000}}},
        {"synth",
         {{"n_clips", 200},
          {"duration_s", 12.0},
          {"tempo_min", 60.0},
          {"tempo_max", 180.0},
          {"classes", 4},
          {"noise", 0.02},
          {"feature_dim", 64}}},
        {"evaluate", {{"beat_tolerance_s", 0.07}, {"classes", 8}}},
        {"generate", {{"duration_s", 10}, {"seeds", {1, 2, 3}}}},
    };
}

void reject_unknown_keys(const json& cfg, const json& schema, const std::string& path) {
    if (!cfg.is_object()) return;
    for (const auto& [key, value] : cfg.items()) {
        if (!schema.contains(key)) {
            throw ConfigError("unknown config key: " +
                              (path.empty() ? key : path + "." + key));
        }
        if (value.is_object()) {
            reject_unknown_keys(value, schema.at(key),
                                path.empty() ? key : path + "." + key);
        }
    }
}

json load_config(const std::string& path) {
    json cfg = default_config();
    if (path.empty()) return cfg;
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path);
    json user;
    try {
        f >> user;
    } catch (const json::exception& e) {
        throw ConfigError("config parse error: " + std::string(e.what()));
    }
    reject_unknown_keys(user, cfg, "");
    cfg.merge_patch(user);
    return cfg;
}

std::string config_hash(const json& cfg) {
    const std::string dump = cfg.dump();  // keys are sorted
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08x", data::crc32(dump.data(), dump.size()));
    return buf;
}

// Resolved run directory; writes config.json and logs the hash.
fs::path open_run_dir(const json& cfg, const std::string& out_root) {
    const std::string hash = config_hash(cfg);
    const fs::path dir = fs::path(out_root) / hash;
    fs::create_directories(dir);
    std::ofstream f(dir / "config.json");
    f << cfg.dump(2) << '\n';
    std::printf("config hash: %s\nrun dir: %s\n", hash.c_str(), dir.string().c_str());
    return dir;
}

codec::CodecConfig codec_config(const json& cfg) {
    codec::CodecConfig c;
    c.frame_size = cfg["codec"]["frame_size"].get<size_t>();
    c.n_levels = cfg["codec"]["n_levels"].get<size_t>();
    c.n_coarse = cfg["codec"]["n_coarse"].get<size_t>();
    c.n_fine = cfg["codec"]["n_fine"].get<size_t>();
    c.vocab_size = cfg["codec"]["vocab_size"].get<size_t>();
    c.validate();
    return c;
}

semantic::SemanticConfig semantic_config(const json& cfg) {
    semantic::SemanticConfig s;
    s.frame_rate = cfg["semantic"]["frame_rate"].get<size_t>();
    s.n_bands = cfg["semantic"]["n_bands"].get<size_t>();
    s.vocab_size = cfg["semantic"]["vocab_size"].get<size_t>();
    s.validate();
    return s;
}

pipeline::ModelDims model_dims(const json& cfg) {
    pipeline::ModelDims d;
    d.n_layers = cfg["model"]["n_layers"].get<size_t>();
    d.n_heads = cfg["model"]["n_heads"].get<size_t>();
    d.d_model = cfg["model"]["d_model"].get<size_t>();
    d.d_ff = cfg["model"]["d_ff"].get<size_t>();
    d.rel_buckets = cfg["model"]["rel_buckets"].get<size_t>();
    d.rel_max_distance = cfg["model"]["rel_max_distance"].get<size_t>();
    return d;
}

pipeline::TrainParams train_params(const json& cfg) {
    pipeline::TrainParams p;
    p.steps = cfg["train"]["steps"].get<size_t>();
    p.batch_size = cfg["train"]["batch_size"].get<size_t>();
    p.lr = cfg["train"]["lr"].get<double>();
    p.heldout_clips = cfg["train"]["heldout_clips"].get<size_t>();
    p.seed = cfg["seed"].get<uint64_t>();
    p.log_every = 100;
    p.on_log = [](size_t step, double loss) {
        std::printf("step %zu loss %.4f\n", step, loss);
        std::fflush(stdout);
    };
    return p;
}

data::SyntheticSpec synth_spec(const json& cfg) {
    data::SyntheticSpec s;
    s.n_clips = cfg["synth"]["n_clips"].get<size_t>();
    s.duration_s = cfg["synth"]["duration_s"].get<double>();
    s.tempo_min_bpm = cfg["synth"]["tempo_min"].get<double>();
    s.tempo_max_bpm = cfg["synth"]["tempo_max"].get<double>();
    s.n_timbre_classes = cfg["synth"]["classes"].get<size_t>();
    s.noise_level = cfg["synth"]["noise"].get<double>();
    s.feature_dim = cfg["synth"]["feature_dim"].get<size_t>();
    s.seed = cfg["seed"].get<uint64_t>();
    s.validate();
    return s;
}

struct LoadedCorpus {
    data::DatasetManifest manifest;
    std::vector<audio::Waveform> waves;
};

LoadedCorpus load_corpus(const std::string& manifest_path, double min_duration) {
    LoadedCorpus c;
    c.manifest = data::read_manifest(manifest_path);
    data::validate_manifest(c.manifest, min_duration);
    if (c.manifest.entries.empty()) throw DatasetError("manifest has no entries");
    c.waves.reserve(c.manifest.entries.size());
    for (const auto& e : c.manifest.entries) {
        c.waves.push_back(audio::read_wav(data::resolve_path(c.manifest, e.audio_path)));
    }
    return c;
}

int cmd_synth_data(const json& cfg, const std::string& out_root) {
    const fs::path dir = open_run_dir(cfg, out_root);
    const data::SyntheticSpec spec = synth_spec(cfg);
    const fs::path corpus = dir / "corpus";
    data::write_synthetic_corpus(spec, corpus.string());
    std::printf("wrote %zu clips under %s\n", spec.n_clips, corpus.string().c_str());
    std::printf("manifest: %s\n", (corpus / "manifest.tsv").string().c_str());
    return 0;
}

int cmd_train_codec(const json& cfg, const std::string& out_root,
                    const std::string& data_path) {
    const fs::path dir = open_run_dir(cfg, out_root);
    const codec::CodecConfig ccfg = codec_config(cfg);
    const LoadedCorpus corpus = load_corpus(data_path, 0.0);

    size_t total = 0;
    std::vector<MatF> frame_list;
    for (const auto& w : corpus.waves) {
        frame_list.push_back(dsp::frame_transform(w, ccfg.frame_size));
        total += frame_list.back().rows;
    }
    MatF frames(total, ccfg.frame_size);
    size_t row = 0;
    for (const auto& f : frame_list) {
        std::copy(f.v.begin(), f.v.end(), frames.row(row));
        row += f.rows;
    }
    // Deterministic subsampling keeps codebook training affordable on large
    // corpora.
    const auto max_frames = cfg["train"]["max_codec_frames"].get<size_t>();
    if (frames.rows > max_frames) {
        const size_t stride = (frames.rows + max_frames - 1) / max_frames;
        MatF sub((frames.rows + stride - 1) / stride, ccfg.frame_size);
        for (size_t i = 0, j = 0; i < frames.rows; i += stride, ++j) {
            std::copy_n(frames.row(i), ccfg.frame_size, sub.row(j));
        }
        frames = std::move(sub);
        std::printf("subsampled codec training set to %zu frames\n", frames.rows);
    }
    const auto codec_obj =
        codec::RvqCodec::train(frames, ccfg, cfg["seed"].get<uint64_t>());
    const fs::path out = dir / "codec.meowcb";
    codec_obj.save(out.string());
    std::printf("codec: %s\n", out.string().c_str());
    return 0;
}

int cmd_train_semantic(const json& cfg, const std::string& out_root,
                       const std::string& data_path) {
    const fs::path dir = open_run_dir(cfg, out_root);
    const semantic::SemanticConfig scfg = semantic_config(cfg);
    const LoadedCorpus corpus = load_corpus(data_path, 0.0);
    std::vector<semantic::FrameEmbeddingSequence> embs;
    embs.reserve(corpus.waves.size());
    for (const auto& w : corpus.waves) {
        embs.push_back(semantic::extract_frame_embeddings(w, scfg));
    }
    const auto cb = semantic::train_semantic_codebook(embs, scfg.vocab_size,
                                                      cfg["seed"].get<uint64_t>());
    const fs::path out = dir / "semantic.meowsc";
    semantic::save_semantic_codebook(out.string(), cb);
    std::printf("semantic codebook: %s\n", out.string().c_str());
    return 0;
}

codec::RvqCodec load_codec_with_split(const json& cfg, const std::string& path) {
    auto codec_obj = codec::RvqCodec::load(path);
    const codec::CodecConfig ccfg = codec_config(cfg);
    if (codec_obj.config().n_levels != ccfg.n_levels ||
        codec_obj.config().vocab_size != ccfg.vocab_size ||
        codec_obj.config().frame_size != ccfg.frame_size) {
        throw ConfigError("codec file does not match the configured codec shape");
    }
    codec_obj.set_coarse_fine(ccfg.n_coarse, ccfg.n_fine);
    return codec_obj;
}

int cmd_train_stage(const json& cfg, const std::string& out_root,
                    const std::string& stage_name_arg, const std::string& data_path,
                    const std::string& codec_path, const std::string& semantic_path) {
    const fs::path dir = open_run_dir(cfg, out_root);
    const pipeline::StageKind kind = pipeline::stage_from_name(stage_name_arg);
    const auto codec_obj = load_codec_with_split(cfg, codec_path);
    const auto sem_cb = semantic::load_semantic_codebook(semantic_path);
    const semantic::SemanticConfig scfg = semantic_config(cfg);
    if (sem_cb.centroids.rows != scfg.vocab_size) {
        throw ConfigError("semantic codebook vocab does not match config");
    }

    const pipeline::TokenLayout layout = pipeline::make_layout(codec_obj.config(), scfg);
    const LoadedCorpus corpus = load_corpus(data_path, 0.0);
    const bool need_bundles =
        kind == pipeline::StageKind::s1 || kind == pipeline::StageKind::s2b;
    const auto clips =
        pipeline::prepare_clips(corpus.manifest, codec_obj, sem_cb, scfg, need_bundles);

    const pipeline::TrainParams params = train_params(cfg);
    const pipeline::ModelDims dims = model_dims(cfg);

    pipeline::TrainResult res;
    switch (kind) {
        case pipeline::StageKind::s1:
            res = pipeline::train_stage1(clips, layout, dims, params);
            break;
        case pipeline::StageKind::s2a:
        case pipeline::StageKind::s2b:
            res = pipeline::train_stage2(clips, kind, layout, dims, params);
            break;
        case pipeline::StageKind::s3:
            res = pipeline::train_stage3(clips, layout, dims, params);
            break;
    }
    const fs::path out = dir / ("stage" + stage_name_arg + ".meowck");
    tfm::save_checkpoint(res.weights, out.string());
    std::printf("final train loss: %.4f\n", res.final_train_loss);
    if (params.heldout_clips > 0) {
        std::printf("held-out loss: %.4f\n", res.heldout_loss);
    }
    std::printf("checkpoint: %s\n", out.string().c_str());
    return 0;
}

int cmd_generate(const json& cfg, const std::string& out_root,
                 const std::string& pipeline_path, const std::string& stage1_path,
                 const std::string& stage2_path, const std::string& stage3_path,
                 const std::string& codec_path, const std::string& data_path,
                 const std::string& clip_id, const std::string& style_path,
                 bool no_style, std::vector<uint64_t> seeds, size_t duration_s,
                 const std::string& out_name) {
    const fs::path dir = open_run_dir(cfg, out_root);

    std::string s1p = stage1_path, s2p = stage2_path, s3p = stage3_path,
                cdp = codec_path;
    if (!pipeline_path.empty()) {
        const auto m = pipeline::read_pipeline_manifest(pipeline_path);
        s1p = m.stage1;
        s2p = m.stage2;
        s3p = m.stage3;
        cdp = m.codec_path;
    }
    const std::pair<const char*, const std::string*> required[] = {
        {"stage1", &s1p}, {"stage2", &s2p}, {"stage3", &s3p}, {"codec", &cdp}};
    for (const auto& [what, p] : required) {
        if (p->empty()) {
            throw ConfigError(std::string("generate: missing ") + what +
                              " (use --pipeline or the explicit path flags)");
        }
    }

    const auto s1 = tfm::load_checkpoint(s1p);
    const auto s2 = tfm::load_checkpoint(s2p);
    const auto s3 = tfm::load_checkpoint(s3p);
    auto codec_obj = codec::RvqCodec::load(cdp);
    const auto layout = pipeline::layout_from_metadata(s1.metadata);
    codec_obj.set_coarse_fine(layout.n_coarse, layout.n_fine);

    if (data_path.empty() || clip_id.empty()) {
        throw ConfigError("generate: needs --data <manifest> and --clip <id>");
    }
    const auto manifest = data::read_manifest(data_path);
    const data::ManifestEntry* entry = nullptr;
    for (const auto& e : manifest.entries) {
        if (e.clip_id == clip_id) {
            entry = &e;
            break;
        }
    }
    if (!entry) throw DatasetError("clip id not found in manifest: " + clip_id);
    cond::ConditioningBundle bundle = data::load_bundle(manifest, *entry);
    if (no_style) bundle.style.reset();
    if (!style_path.empty()) {
        const auto t = data::read_tensor(style_path);
        if (t.elem_count() != cond::kStyleDim) {
            throw ValidationError("style file must hold a 128-d embedding");
        }
        cond::StyleEmbedding s;
        s.v.assign(t.f32.begin(), t.f32.end());
        bundle.style = std::move(s);
    }

    pipeline::GenerateSeeds gs;
    if (!seeds.empty()) {
        if (seeds.size() != 3) throw ConfigError("--seeds wants three values");
        gs.stage1 = seeds[0];
        gs.stage2 = seeds[1];
        gs.stage3 = seeds[2];
    } else {
        const auto& js = cfg["generate"]["seeds"];
        gs.stage1 = js.at(0).get<uint64_t>();
        gs.stage2 = js.at(1).get<uint64_t>();
        gs.stage3 = js.at(2).get<uint64_t>();
    }
    if (duration_s == 0) duration_s = cfg["generate"]["duration_s"].get<size_t>();

    const audio::Waveform wav =
        pipeline::generate(bundle, s1, s2, s3, codec_obj, duration_s, gs);
    const fs::path out = dir / (out_name.empty() ? clip_id + ".gen.wav" : out_name);
    audio::write_wav(out.string(), wav);
    std::printf("wav: %s (%zu samples)\n", out.string().c_str(), wav.samples.size());
    return 0;
}

std::vector<fs::path> wav_files_sorted(const std::string& dir) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() == ".wav") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw DatasetError("no .wav files in " + dir);
    return out;
}

int cmd_evaluate(const json& cfg, const std::string& out_root,
                 const std::string& ref_dir, const std::string& gen_dir) {
    const fs::path dir = open_run_dir(cfg, out_root);
    const auto ref_files = wav_files_sorted(ref_dir);
    const auto gen_files = wav_files_sorted(gen_dir);
    if (ref_files.size() != gen_files.size()) {
        throw ValidationError("ref and gen directories hold different clip counts");
    }
    for (size_t i = 0; i < ref_files.size(); ++i) {
        if (ref_files[i].filename() != gen_files[i].filename()) {
            throw ValidationError("clip pairing mismatch at " +
                                  ref_files[i].filename().string());
        }
    }

    std::vector<audio::Waveform> ref(ref_files.size()), gen(gen_files.size());
    for (size_t i = 0; i < ref_files.size(); ++i) {
        ref[i] = audio::read_wav(ref_files[i].string());
        gen[i] = audio::read_wav(gen_files[i].string());
    }

    const std::string hash = config_hash(cfg);
    std::ofstream report(dir / "metrics.txt");
    auto record = [&](const std::string& name, double value, const std::string& clip) {
        report << "metric=" << name << " value=" << value << " clip=" << clip
               << " config=" << hash << '\n';
    };

    const metrics::ClipEmbedder embedder;
    const metrics::EmbeddingSet ref_set{embedder.embed_all(ref), "ref"};
    const metrics::EmbeddingSet gen_set{embedder.embed_all(gen), "gen"};

    const double fad = metrics::frechet_distance(ref_set, gen_set);
    record("fad", fad, "-");

    // Soft class probabilities over anchors fitted to the reference set.
    const auto n_classes =
        std::min<size_t>(cfg["evaluate"]["classes"].get<size_t>(), ref.size());
    const auto km = kmeans(ref_set.vectors, n_classes, 1234);
    double tau2 = 0.0;
    for (size_t i = 0; i < ref_set.vectors.rows; ++i) {
        const size_t a = nearest_centroid(ref_set.vectors.row(i), km.centroids);
        tau2 += kernels::l2sq(ref_set.vectors.row(i), km.centroids.row(a),
                              km.centroids.cols);
    }
    tau2 = tau2 / double(ref_set.vectors.rows) + 1e-9;
    const auto ref_probs =
        metrics::soft_class_probabilities(ref_set.vectors, km.centroids, tau2);
    const auto gen_probs =
        metrics::soft_class_probabilities(gen_set.vectors, km.centroids, tau2);
    const double kld = metrics::kl_divergence(ref_probs, gen_probs);
    record("kld", kld, "-");

    const double mcc = metrics::cycle_consistency(gen_set.vectors, ref_set.vectors);
    record("mcc", mcc, "-");

    const double tol = cfg["evaluate"]["beat_tolerance_s"].get<double>();
    double bcs = 0, bhs = 0, f1 = 0;
    size_t scored = 0;
    for (size_t i = 0; i < ref.size(); ++i) {
        const std::string clip = ref_files[i].stem().string();
        const auto ref_beats = metrics::detect_beats(ref[i]);
        const auto gen_beats = metrics::detect_beats(gen[i]);
        if (ref_beats.times_s.empty()) continue;  // undefined for this pair
        const auto s = metrics::beat_alignment(gen_beats, ref_beats, tol);
        record("bcs", s.bcs, clip);
        record("bhs", s.bhs, clip);
        record("f1", s.f1, clip);
        bcs += s.bcs;
        bhs += s.bhs;
        f1 += s.f1;
        ++scored;
    }
    if (scored > 0) {
        bcs /= double(scored);
        bhs /= double(scored);
        f1 /= double(scored);
        record("bcs_mean", bcs, "-");
        record("bhs_mean", bhs, "-");
        record("f1_mean", f1, "-");
    }

    std::printf("\n%-22s %10s %10s %10s\n", "", "FAD", "KL Div.", "MCC");
    std::printf("%-22s %10.4f %10.4f %10.4f\n", "gen vs ref", fad, kld, mcc);
    std::printf("\n%-22s %10s %10s %10s\n", "", "Coverage", "Hit", "F1");
    if (scored > 0) {
        std::printf("%-22s %10.1f %10.1f %10.1f   (over %zu clips)\n", "beat alignment",
                    bcs, bhs, f1, scored);
    } else {
        std::printf("%-22s %10s %10s %10s\n", "beat alignment", "n/a", "n/a", "n/a");
    }
    std::printf("\nreport: %s\n", (dir / "metrics.txt").string().c_str());
    return 0;
}

int exit_code_for(ErrorClass cls) {
    switch (cls) {
        case ErrorClass::io:
            return 2;
        case ErrorClass::divergence:
            return 4;
        default:
            return 3;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"video-conditioned music generation pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_root = "runs";
    app.add_option("--config", config_path, "JSON config file");
    app.add_option("--out-root", out_root, "directory that holds run directories");

    // Flag overrides applied on top of the config file.
    std::map<std::string, std::string> overrides;
    auto add_override = [&overrides](CLI::App* cmd, const char* flag, const char* key,
                                     const char* help) {
        cmd->add_option_function<std::string>(
            flag, [&overrides, key](const std::string& v) { overrides[key] = v; }, help);
    };

    auto* synth = app.add_subcommand("synth-data", "write a synthetic paired corpus");
    add_override(synth, "--clips", "/synth/n_clips", "number of clips");
    add_override(synth, "--duration", "/synth/duration_s", "clip length in seconds");
    add_override(synth, "--classes", "/synth/classes", "timbre classes");
    add_override(synth, "--tempo-min", "/synth/tempo_min", "min tempo BPM");
    add_override(synth, "--tempo-max", "/synth/tempo_max", "max tempo BPM");
    add_override(synth, "--noise", "/synth/noise", "noise level");
    add_override(synth, "--feature-dim", "/synth/feature_dim", "visual feature dim");
    add_override(synth, "--seed", "/seed", "global seed");

    std::string data_path, codec_path, semantic_path;
    auto* tcodec = app.add_subcommand("train-codec", "train the RVQ codec");
    tcodec->add_option("--data", data_path, "dataset manifest")->required();
    add_override(tcodec, "--frame-size", "/codec/frame_size", "samples per frame");
    add_override(tcodec, "--levels", "/codec/n_levels", "quantizer levels");
    add_override(tcodec, "--coarse", "/codec/n_coarse", "coarse levels");
    add_override(tcodec, "--fine", "/codec/n_fine", "fine levels");
    add_override(tcodec, "--vocab", "/codec/vocab_size", "centroids per level");
    add_override(tcodec, "--seed", "/seed", "global seed");

    auto* tsem = app.add_subcommand("train-semantic", "train the semantic codebook");
    tsem->add_option("--data", data_path, "dataset manifest")->required();
    add_override(tsem, "--vocab", "/semantic/vocab_size", "semantic vocabulary");
    add_override(tsem, "--seed", "/seed", "global seed");

    std::string stage_arg;
    auto* tstage = app.add_subcommand("train-stage", "train one modeling stage");
    tstage->add_option("stage", stage_arg, "1 | 2a | 2b | 3")->required();
    tstage->add_option("--data", data_path, "dataset manifest")->required();
    tstage->add_option("--codec", codec_path, "codec file")->required();
    tstage->add_option("--semantic", semantic_path, "semantic codebook")->required();
    add_override(tstage, "--steps", "/train/steps", "optimizer steps");
    add_override(tstage, "--batch", "/train/batch_size", "batch size");
    add_override(tstage, "--lr", "/train/lr", "learning rate");
    add_override(tstage, "--heldout", "/train/heldout_clips", "held-out clips");
    add_override(tstage, "--layers", "/model/n_layers", "transformer layers");
    add_override(tstage, "--heads", "/model/n_heads", "attention heads");
    add_override(tstage, "--d-model", "/model/d_model", "model width");
    add_override(tstage, "--d-ff", "/model/d_ff", "feed-forward width");
    add_override(tstage, "--seed", "/seed", "global seed");

    std::string pipeline_path, stage1_path, stage2_path, stage3_path, clip_id,
        style_path, out_name;
    std::vector<uint64_t> seed_list;
    size_t duration_s = 0;
    bool no_style = false;
    auto* gen = app.add_subcommand("generate", "bundle -> waveform");
    gen->add_option("--pipeline", pipeline_path, "pipeline manifest JSON");
    gen->add_option("--stage1", stage1_path, "stage 1 checkpoint");
    gen->add_option("--stage2", stage2_path, "stage 2 checkpoint");
    gen->add_option("--stage3", stage3_path, "stage 3 checkpoint");
    gen->add_option("--codec", codec_path, "codec file");
    gen->add_option("--data", data_path, "dataset manifest holding the clip");
    gen->add_option("--clip", clip_id, "clip id to condition on");
    gen->add_option("--style", style_path, "128-d style embedding tensor file");
    gen->add_flag("--no-style", no_style, "drop the style embedding");
    gen->add_option("--seeds", seed_list, "three sampling seeds");
    gen->add_option("--duration", duration_s, "seconds to generate");
    gen->add_option("--out", out_name, "output wav name inside the run dir");

    std::string ref_dir, gen_dir;
    auto* eval = app.add_subcommand("evaluate", "score generated audio against refs");
    eval->add_option("--ref", ref_dir, "reference wav directory")->required();
    eval->add_option("--gen", gen_dir, "generated wav directory")->required();
    add_override(eval, "--beat-tolerance", "/evaluate/beat_tolerance_s",
                 "beat matching tolerance in seconds");
    add_override(eval, "--classes", "/evaluate/classes", "soft-class anchors");

    CLI11_PARSE(app, argc, argv);

    try {
        json cfg = load_config(config_path);
        for (const auto& [pointer, value] : overrides) {
            const json::json_pointer ptr(pointer);
            json& slot = cfg.at(ptr);
            // Preserve the original JSON type of the overridden key.
            if (slot.is_number_float()) {
                slot = std::stod(value);
            } else if (slot.is_number()) {
                slot = static_cast<int64_t>(std::stoll(value));
            } else {
                slot = value;
            }
        }

        if (synth->parsed()) return cmd_synth_data(cfg, out_root);
        if (tcodec->parsed()) return cmd_train_codec(cfg, out_root, data_path);
        if (tsem->parsed()) return cmd_train_semantic(cfg, out_root, data_path);
        if (tstage->parsed()) {
            return cmd_train_stage(cfg, out_root, stage_arg, data_path, codec_path,
                                   semantic_path);
        }
        if (gen->parsed()) {
            return cmd_generate(cfg, out_root, pipeline_path, stage1_path, stage2_path,
                                stage3_path, codec_path, data_path, clip_id, style_path,
                                no_style, seed_list, duration_s, out_name);
        }
        if (eval->parsed()) return cmd_evaluate(cfg, out_root, ref_dir, gen_dir);
        throw ConfigError("no subcommand");
    } catch (const Error& e) {
        std::fprintf(stderr, "error class=%s msg=\"%s\"\n",
                     error_class_name(e.error_class()), e.what());
        return exit_code_for(e.error_class());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error class=internal msg=\"%s\"\n", e.what());
        return 3;
    }
}
