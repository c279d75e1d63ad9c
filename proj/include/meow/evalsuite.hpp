#pragma once

#include <string>
#include <vector>

#include "meow/audio.hpp"
#include "meow/mat.hpp"

namespace meow::metrics {

struct EmbeddingSet {
    MatF vectors;  // [M x D], M >= 2
    std::string label;
};

// Frechet distance between Gaussians fitted to the two sets:
// |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), covariances regularized with
// 1e-6 I, matrix square roots by symmetric eigendecomposition with negative
// eigenvalues clamped to zero.
double frechet_distance(const EmbeddingSet& ref, const EmbeddingSet& gen);

using ClassProbabilities = std::vector<std::vector<double>>;

// Mean over paired clips of KL(ref || gen) with probabilities floored at 1e-9
// and renormalized.
double kl_divergence(const ClassProbabilities& ref, const ClassProbabilities& gen);

// Mean cosine similarity over paired rows.
double cycle_consistency(const MatF& gen, const MatF& ref);

struct BeatList {
    std::vector<double> times_s;  // strictly increasing
};

struct BeatConfig {
    size_t n_bands = 64;
    size_t win = 640;
    size_t hop = 160;  // 100 envelope frames per second
    double min_gap_s = 0.25;
    double local_window_s = 0.5;
    // Peak threshold above the local mean, as a fraction of the envelope peak.
    double delta_frac = 0.2;
    // Higher floor than the tokenizer's: keeps near-silence wiggles from
    // dominating the log-domain flux.
    double log_floor = 1e-6;
    // Moving-average width for the envelope; quantized audio carries
    // frame-boundary texture flux that smoothing suppresses.
    size_t smooth_frames = 5;
};

// Spectral-flux onset envelope over the log-mel filterbank with
// adaptive-threshold peak picking. Silence gives an empty list; a clip
// shorter than one second is a DomainError.
BeatList detect_beats(const audio::Waveform& w, const BeatConfig& cfg = {});

// Exposed for tests: half-wave-rectified per-frame spectral flux.
std::vector<double> onset_envelope(const audio::Waveform& w, const BeatConfig& cfg = {});

struct BeatScores {
    double bcs = 0.0;           // 100 * |gen| / |ref|, capped at 100
    double bhs = 0.0;           // 100 * matched / |ref|
    double f1 = 0.0;            // harmonic mean of bcs and bhs
    double raw_coverage = 0.0;  // uncapped 100 * |gen| / |ref|
    size_t matched = 0;
};

// Harmonic mean of coverage and hit scores; 0 when both are 0.
double harmonic_f1(double bcs, double bhs);

// Greedy one-to-one matching of generated beats to the nearest unmatched
// reference beat within tolerance. Empty reference is an UndefinedMetricError.
BeatScores beat_alignment(const BeatList& gen, const BeatList& ref,
                          double tolerance_s = 0.07);

// Median inter-beat interval folded into [fold_lo, 2*fold_lo*...) octaves;
// returns 0 when fewer than two beats are found.
double estimate_tempo_bpm(const audio::Waveform& w, double fold_lo = 50.0,
                          double fold_hi = 200.0, const BeatConfig& cfg = {});

// Clip-level embedding for FAD / cycle consistency: mean log-mel vector
// projected to 128 dims by a fixed seeded random orthonormal map.
class ClipEmbedder {
public:
    static constexpr size_t kDim = 128;
    ClipEmbedder();
    std::vector<float> embed(const audio::Waveform& w) const;
    MatF embed_all(const std::vector<audio::Waveform>& clips) const;

private:
    MatF projection_;  // [kDim x n_bands], orthonormal columns
};

// Soft class probabilities from squared distances to anchor embeddings
// (softmax of -d^2 / tau2); plumbing for the KLD metric over audio sets.
ClassProbabilities soft_class_probabilities(const MatF& embeddings, const MatF& anchors,
                                            double tau2);

// Pearson correlation of two equal-length series.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace meow::metrics
