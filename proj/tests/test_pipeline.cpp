#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "meow/checkpoint.hpp"
#include "meow/pipeline.hpp"

using namespace meow;
using namespace meow::pipeline;
namespace fs = std::filesystem;

namespace {

codec::CodecConfig tiny_codec_cfg() {
    codec::CodecConfig cfg;
    cfg.frame_size = 640;  // 25 acoustic frames/s
    cfg.n_levels = 2;
    cfg.n_coarse = 1;
    cfg.n_fine = 1;
    cfg.vocab_size = 8;
    return cfg;
}

semantic::SemanticConfig tiny_sem_cfg() {
    semantic::SemanticConfig cfg;
    cfg.vocab_size = 8;
    return cfg;
}

ModelDims tiny_dims() {
    ModelDims d;
    d.n_layers = 1;
    d.n_heads = 2;
    d.d_model = 32;
    d.d_ff = 64;
    return d;
}

struct TinyWorld {
    data::SyntheticSpec spec;
    codec::RvqCodec codec_obj;
    semantic::SemanticCodebook sem_cb;
    semantic::SemanticConfig sem_cfg;
    TokenLayout layout;
    std::vector<ClipData> clips;
};

TinyWorld make_world(bool with_bundles = true) {
    data::SyntheticSpec spec;
    spec.n_clips = 10;
    spec.duration_s = 12.0;
    spec.n_timbre_classes = 2;
    spec.noise_level = 0.01;
    spec.seed = 5;
    spec.feature_dim = 16;

    const auto ccfg = tiny_codec_cfg();
    const auto scfg = tiny_sem_cfg();

    // Train codec + semantic codebook on the corpus itself.
    std::vector<audio::Waveform> waves;
    std::vector<semantic::FrameEmbeddingSequence> embs;
    MatF frames;
    for (size_t i = 0; i < spec.n_clips; ++i) {
        waves.push_back(data::generate_synthetic_pair(spec, i).audio);
        const MatF f = dsp::frame_transform(waves.back(), ccfg.frame_size);
        if (frames.rows == 0) {
            frames = f;
        } else {
            MatF merged(frames.rows + f.rows, f.cols);
            std::copy(frames.v.begin(), frames.v.end(), merged.v.begin());
            std::copy(f.v.begin(), f.v.end(), merged.v.begin() + frames.size());
            frames = std::move(merged);
        }
        embs.push_back(semantic::extract_frame_embeddings(waves.back(), scfg));
    }
    TinyWorld world{
        spec,
        codec::RvqCodec::train(frames, ccfg, 7),
        semantic::train_semantic_codebook(embs, scfg.vocab_size, 8),
        scfg,
        make_layout(ccfg, scfg),
        {},
    };
    for (size_t i = 0; i < spec.n_clips; ++i) {
        ClipData c;
        c.id = "clip" + std::to_string(i);
        c.duration_s = spec.duration_s;
        c.sem_tokens = semantic::tokenize(waves[i], world.sem_cb, scfg).tokens;
        c.grid = world.codec_obj.encode(waves[i]);
        if (with_bundles) {
            c.bundle = data::generate_synthetic_pair(spec, i).bundle;
        }
        world.clips.push_back(std::move(c));
    }
    return world;
}

codec::AcousticTokenGrid grid_from(std::initializer_list<std::initializer_list<int32_t>> rows,
                                   size_t vocab) {
    codec::AcousticTokenGrid g;
    g.n_frames = rows.size();
    g.n_levels = rows.begin()->size();
    g.vocab_size = vocab;
    for (const auto& r : rows) {
        for (int32_t t : r) g.tokens.push_back(t);
    }
    return g;
}

}  // namespace

TEST_CASE("flatten applies the level-offset rule") {
    // 2 frames x 2 levels, vocab 4, grid [[1,2],[3,0]] -> [1, 6, 3, 4].
    const auto g = grid_from({{1, 2}, {3, 0}}, 4);
    const auto flat = flatten_grid(g, 2);
    CHECK(flat == std::vector<int32_t>{1, 6, 3, 4});
}

TEST_CASE("unflatten(flatten(g)) is the identity and ids stay under levels*K_a") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        codec::AcousticTokenGrid g;
        g.n_frames = 1 + rng.below(12);
        g.n_levels = 1 + rng.below(4);
        g.vocab_size = 2 + rng.below(14);
        g.tokens.resize(g.n_frames * g.n_levels);
        for (auto& t : g.tokens) t = static_cast<int32_t>(rng.below(g.vocab_size));

        const auto flat = flatten_grid(g, g.n_levels);
        for (int32_t id : flat) {
            CHECK(id >= 0);
            CHECK(id < static_cast<int32_t>(g.n_levels * g.vocab_size));
        }
        const auto back = unflatten_grid(flat, g.n_levels, g.vocab_size);
        CHECK(back.tokens == g.tokens);
        CHECK(back.n_frames == g.n_frames);
    }
}

TEST_CASE("unflatten rejects wrong lengths and out-of-level ids") {
    const std::vector<int32_t> flat = {1, 6, 3};
    CHECK_THROWS_AS(unflatten_grid(flat, 2, 4), ShapeError);
    const std::vector<int32_t> bad = {1, 2, 3, 4};  // 2 is not in level-1 range [4,8)
    CHECK_THROWS_AS(unflatten_grid(bad, 2, 4), ValidationError);
}

TEST_CASE("sequence arithmetic at paper-scale defaults") {
    const TokenLayout lay = make_layout(codec::CodecConfig{}, semantic::SemanticConfig{});
    CHECK(lay.sem_rate == 25);
    CHECK(lay.ac_rate == 50);
    CHECK(lay.k_s == 1024);

    // Stage 1: 10 s crop at 25 tokens/s -> 250 targets.
    std::vector<int32_t> sem(10 * lay.sem_rate, 1);
    const auto s1 = build_lm_sequence(sem, static_cast<int32_t>(lay.bos(StageKind::s1)));
    CHECK(s1.tokens.size() == 250);
    CHECK(s1.targets.size() == 250);
    CHECK(s1.tokens[0] == static_cast<int32_t>(lay.k_s));

    // Stage 2A: 250 semantic + 500 * N_c coarse tokens.
    std::vector<int32_t> coarse(10 * lay.ac_rate * lay.n_coarse, 0);
    const auto s2 = build_span_sequence(sem, coarse,
                                        static_cast<int32_t>(lay.bos(StageKind::s2a)));
    CHECK(s2.tokens.size() == 250 + 500 * lay.n_coarse);

    // Stage 3: 3 s crop -> 150 * N_c coarse span, 150 * N_f fine span.
    std::vector<int32_t> c3(3 * lay.ac_rate * lay.n_coarse, 0);
    std::vector<int32_t> f3(3 * lay.ac_rate * lay.n_fine, 0);
    const auto s3 = build_span_sequence(c3, f3,
                                        static_cast<int32_t>(lay.bos(StageKind::s3)));
    CHECK(s3.tokens.size() == 150 * lay.n_coarse + 150 * lay.n_fine);
    size_t masked = 0;
    for (uint8_t m : s3.mask) masked += m;
    CHECK(masked == 150 * lay.n_fine);
}

TEST_CASE("span masking: conditioning-span targets never touch loss or grads") {
    tfm::TransformerConfig cfg;
    cfg.arch = tfm::Arch::decoder_only;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.vocab_size = 12;
    cfg.max_len = 32;
    auto w = tfm::init_weights<float>(cfg, 9);
    Rng rng(10);
    for (auto& x : w.at("head.w").v) x = static_cast<float>(rng.normal() * 0.2);

    std::vector<int32_t> cond = {1, 2, 3, 4};
    std::vector<int32_t> target = {5, 6, 7};
    const auto built = build_span_sequence(cond, target, 11);

    tfm::SequenceExample<float> ex;
    ex.decoder_tokens = built.tokens;
    ex.targets = built.targets;
    ex.loss_mask = built.mask;

    tfm::GradMap<float> g1;
    const double l1 = tfm::loss_and_grads(w, ex, g1);

    // Scramble the targets inside the conditioning span.
    for (size_t t = 0; t < cond.size(); ++t) ex.targets[t] = 9;
    tfm::GradMap<float> g2;
    const double l2 = tfm::loss_and_grads(w, ex, g2);

    CHECK(l1 == l2);  // bitwise
    for (const auto& [name, g] : g1) {
        CHECK(g2.at(name).v == g.v);  // bitwise
    }
}

TEST_CASE("stage training smoke: all four stages run, checkpoint, and generate") {
    const TinyWorld world = make_world();
    const ModelDims dims = tiny_dims();
    TrainParams params;
    params.steps = 8;
    params.batch_size = 2;
    params.lr = 1e-3;
    params.seed = 13;
    params.heldout_clips = 2;

    const auto s1 = train_stage1(world.clips, world.layout, dims, params);
    CHECK(std::isfinite(s1.final_train_loss));
    CHECK(std::isfinite(s1.heldout_loss));
    CHECK(s1.weights.metadata.at("stage") == "1");
    CHECK(s1.weights.tensors.count("adaptor.clip-like.w") == 1);
    CHECK(s1.weights.tensors.count("adaptor.style.w") == 1);

    const auto s2 = train_stage2(world.clips, StageKind::s2a, world.layout, dims, params);
    CHECK(s2.weights.config.arch == tfm::Arch::decoder_only);

    const auto s3 = train_stage3(world.clips, world.layout, dims, params);
    CHECK(s3.weights.config.vocab_size == world.layout.s3_vocab());

    // Round-trip every stage through the checkpoint container.
    const std::string dir = (fs::temp_directory_path() / "meow_pipe_test").string();
    fs::create_directories(dir);
    tfm::save_checkpoint(s1.weights, dir + "/s1.meowck");
    tfm::save_checkpoint(s2.weights, dir + "/s2.meowck");
    tfm::save_checkpoint(s3.weights, dir + "/s3.meowck");
    const auto r1 = tfm::load_checkpoint(dir + "/s1.meowck");
    const auto r2 = tfm::load_checkpoint(dir + "/s2.meowck");
    const auto r3 = tfm::load_checkpoint(dir + "/s3.meowck");

    const auto& bundle = world.clips[0].bundle;
    GenerateSeeds seeds{101, 102, 103};
    const audio::Waveform wav =
        generate(bundle, r1, r2, r3, world.codec_obj, 10, seeds);
    CHECK(wav.samples.size() == 160000);
    CHECK(wav.sample_rate == 16000);

    // Bitwise determinism across repeat runs.
    const audio::Waveform wav2 =
        generate(bundle, r1, r2, r3, world.codec_obj, 10, seeds);
    CHECK(wav.samples == wav2.samples);

    // Different seeds change the output.
    GenerateSeeds other{201, 202, 203};
    const audio::Waveform wav3 =
        generate(bundle, r1, r2, r3, world.codec_obj, 10, other);
    CHECK(wav.samples != wav3.samples);

    // Style present at train time, absent at inference: generation still runs.
    cond::ConditioningBundle unstyle = bundle;
    unstyle.style.reset();
    const audio::Waveform wav4 =
        generate(unstyle, r1, r2, r3, world.codec_obj, 10, seeds);
    CHECK(wav4.samples.size() == 160000);

    // Shorter durations give exactly duration * sample_rate samples.
    const audio::Waveform wav5 =
        generate(bundle, r1, r2, r3, world.codec_obj, 4, seeds);
    CHECK(wav5.samples.size() == 64000);
}

TEST_CASE("variant B trains with paired data and rejects audio-only corpora") {
    const TinyWorld world = make_world();
    const ModelDims dims = tiny_dims();
    TrainParams params;
    params.steps = 4;
    params.batch_size = 2;
    params.lr = 1e-3;
    params.seed = 17;

    const auto s2b = train_stage2(world.clips, StageKind::s2b, world.layout, dims, params);
    CHECK(s2b.weights.config.arch == tfm::Arch::encoder_decoder);
    CHECK(s2b.weights.tensors.count("sem_embed.table") == 1);
    CHECK(s2b.weights.metadata.at("stage") == "2b");

    const TinyWorld audio_only = make_world(false);
    CHECK_THROWS_AS(
        train_stage2(audio_only.clips, StageKind::s2b, world.layout, dims, params),
        ConfigError);
    // Variant A is fine on audio-only data.
    const auto s2a =
        train_stage2(audio_only.clips, StageKind::s2a, world.layout, dims, params);
    CHECK(std::isfinite(s2a.final_train_loss));
}

TEST_CASE("generate validates checkpoint layout compatibility") {
    const TinyWorld world = make_world();
    const ModelDims dims = tiny_dims();
    TrainParams params;
    params.steps = 2;
    params.batch_size = 1;
    params.seed = 19;

    auto s1 = train_stage1(world.clips, world.layout, dims, params);
    auto s2 = train_stage2(world.clips, StageKind::s2a, world.layout, dims, params);
    auto s3 = train_stage3(world.clips, world.layout, dims, params);

    // Tamper with the stage-2 layout metadata.
    s2.weights.metadata["layout.k_s"] = "9999";
    CHECK_THROWS_AS(generate(world.clips[0].bundle, s1.weights, s2.weights, s3.weights,
                             world.codec_obj, 4, GenerateSeeds{}),
                    ConfigError);
}

TEST_CASE("unconditional baseline trains and evaluates on the same targets") {
    const TinyWorld world = make_world();
    const ModelDims dims = tiny_dims();
    TrainParams params;
    params.steps = 6;
    params.batch_size = 2;
    params.seed = 23;
    params.heldout_clips = 2;
    const auto base = train_semantic_lm_baseline(world.clips, world.layout, dims, params);
    CHECK(base.weights.config.arch == tfm::Arch::decoder_only);
    CHECK(std::isfinite(base.heldout_loss));

    const std::vector<ClipData> tail(world.clips.end() - 2, world.clips.end());
    const double uncond = stage1_heldout_loss(base.weights, tail, world.layout, false);
    CHECK(uncond == doctest::Approx(base.heldout_loss));
}

TEST_CASE("trained variant A beats an untrained model on held-out perplexity") {
    const TinyWorld world = make_world(false);
    const ModelDims dims = tiny_dims();
    TrainParams params;
    params.steps = 60;
    params.batch_size = 2;
    params.lr = 2e-3;
    params.seed = 29;
    params.heldout_clips = 3;
    const auto trained =
        train_stage2(world.clips, StageKind::s2a, world.layout, dims, params);

    auto untrained = tfm::init_weights<float>(
        make_stage_spec(StageKind::s2a, world.layout, dims).model, params.seed);
    store_layout_metadata(untrained, world.layout, StageKind::s2a);

    const std::vector<ClipData> tail(world.clips.end() - 3, world.clips.end());
    const double trained_ce =
        stage_heldout_loss(trained.weights, StageKind::s2a, tail, world.layout);
    const double untrained_ce =
        stage_heldout_loss(untrained, StageKind::s2a, tail, world.layout);
    INFO("trained ", trained_ce, " vs untrained ", untrained_ce);
    CHECK(trained_ce < untrained_ce);
}

TEST_CASE("converged stage 3: argmax fine completion beats coarse-only decode") {
    const TinyWorld world = make_world(false);
    const ModelDims dims = tiny_dims();
    TrainParams params;
    params.steps = 250;
    params.batch_size = 4;
    params.lr = 2e-3;
    params.seed = 31;
    const auto s3 = train_stage3(world.clips, world.layout, dims, params);

    double mse_completed = 0.0, mse_coarse_only = 0.0;
    for (size_t ci = 0; ci < 3; ++ci) {
        const auto& clip = world.clips[ci];
        // Ground-truth coarse tokens over one 3 s window.
        codec::AcousticTokenGrid coarse;
        coarse.n_frames = 3 * world.layout.ac_rate;
        coarse.n_levels = world.layout.n_coarse;
        coarse.vocab_size = world.layout.k_a;
        coarse.tokens.resize(coarse.n_frames * coarse.n_levels);
        codec::AcousticTokenGrid truth = coarse;
        truth.n_levels = clip.grid.n_levels;
        truth.tokens.resize(coarse.n_frames * truth.n_levels);
        for (size_t t = 0; t < coarse.n_frames; ++t) {
            for (size_t l = 0; l < world.layout.n_coarse; ++l) {
                coarse.at(t, l) = clip.grid.at(t, l);
            }
            for (size_t l = 0; l < truth.n_levels; ++l) {
                truth.at(t, l) = clip.grid.at(t, l);
            }
        }
        const auto completed =
            complete_fine_grid(s3.weights, coarse, world.layout, 0.0, 1);

        const auto wav_completed =
            world.codec_obj.decode(completed, completed.n_levels);
        const auto wav_coarse = world.codec_obj.decode(truth, world.layout.n_coarse);
        const size_t n = wav_completed.samples.size();
        const audio::Waveform original = data::crop_audio(
            data::generate_synthetic_pair(world.spec, ci).audio, 0, 3);
        REQUIRE(original.samples.size() == n);
        for (size_t i = 0; i < n; ++i) {
            const double dc = double(wav_completed.samples[i]) - original.samples[i];
            const double dq = double(wav_coarse.samples[i]) - original.samples[i];
            mse_completed += dc * dc;
            mse_coarse_only += dq * dq;
        }
    }
    INFO("completed ", mse_completed, " vs coarse-only ", mse_coarse_only);
    CHECK(mse_completed <= mse_coarse_only);
}

TEST_CASE("stage 1 trains through a visual token grid and its embedding table") {
    TinyWorld world = make_world();
    // Replace embeddings with a small token grid per clip.
    Rng rng(33);
    for (auto& c : world.clips) {
        c.bundle.embeddings.clear();
        cond::VisualTokenGrid grid;
        grid.n_frames = static_cast<size_t>(c.duration_s);
        grid.tokens_per_frame = 9;
        grid.vocab = 32;
        grid.tokens.resize(grid.n_frames * grid.tokens_per_frame);
        for (auto& t : grid.tokens) t = static_cast<int32_t>(rng.below(32));
        c.bundle.token_grid = std::move(grid);
    }
    const ModelDims dims = tiny_dims();
    TrainParams params;
    params.steps = 5;
    params.batch_size = 2;
    params.lr = 1e-3;
    params.seed = 35;
    const auto res = train_stage1(world.clips, world.layout, dims, params);
    CHECK(std::isfinite(res.final_train_loss));
    CHECK(res.weights.tensors.count("adaptor.grid.w") == 1);
    CHECK(res.weights.tensors.count("grid.table") == 1);

    // A zero-step run reproduces the initialization; training must have moved
    // the token embedding table (gradient flows through the pooled grid).
    TrainParams init_only = params;
    init_only.steps = 0;
    const auto initial = train_stage1(world.clips, world.layout, dims, init_only);
    CHECK(res.weights.at("grid.table").v != initial.weights.at("grid.table").v);
}

TEST_CASE("pipeline manifest JSON round-trips with path resolution") {
    const std::string dir = (fs::temp_directory_path() / "meow_pm_test").string();
    fs::create_directories(dir);
    PipelineManifest m;
    m.stage1 = "s1.meowck";
    m.stage2 = "s2.meowck";
    m.stage3 = "s3.meowck";
    m.codec_path = "codec.meowcb";
    m.semantic_path = "sem.meowsc";
    write_pipeline_manifest(dir + "/pipeline.json", m);
    const PipelineManifest r = read_pipeline_manifest(dir + "/pipeline.json");
    CHECK(r.stage1 == dir + "/s1.meowck");
    CHECK(r.codec_path == dir + "/codec.meowcb");
}
