#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "meow/mat.hpp"
#include "meow/rng.hpp"

namespace meow::tfm {

enum class Arch { encoder_decoder, decoder_only };

const char* arch_name(Arch a);
Arch arch_from_name(const std::string& s);

struct TransformerConfig {
    Arch arch = Arch::decoder_only;
    size_t n_layers = 4;
    size_t n_heads = 8;
    size_t d_model = 256;
    size_t d_ff = 1024;
    size_t vocab_size = 0;
    size_t max_len = 2048;
    size_t rel_buckets = 32;
    size_t rel_max_distance = 128;

    void validate() const;
    size_t head_dim() const { return d_model / n_heads; }
};

// All parameters keyed by deterministic names ("dec.L0.attn.wq", ...). Extra
// caller-owned tensors (conditioning adaptors) live in the same map and ride
// along through the optimizer and checkpoints.
template <typename Real>
struct ModelWeights {
    TransformerConfig config;
    std::map<std::string, Mat<Real>> tensors;
    std::map<std::string, std::string> metadata;

    Mat<Real>& at(const std::string& name);
    const Mat<Real>& at(const std::string& name) const;
};

template <typename Real>
using GradMap = std::map<std::string, Mat<Real>>;

// Core tensor names and shapes implied by a config.
std::map<std::string, std::pair<size_t, size_t>> expected_shapes(
    const TransformerConfig& cfg);

template <typename Real>
ModelWeights<Real> init_weights(const TransformerConfig& cfg, uint64_t seed);

// T5-style bucketed relative position; rel_pos = key_pos - query_pos.
size_t rel_bucket(long rel_pos, bool bidirectional, size_t n_buckets,
                  size_t max_distance);

// ---- forward ----

template <typename Real>
struct NormTrace {
    Mat<Real> input;   // pre-norm
    Mat<Real> normed;  // post-norm
    std::vector<Real> mean, inv_sigma;
};

template <typename Real>
struct AttnTrace {
    NormTrace<Real> ln;
    Mat<Real> q, k, v;             // [T x d_model]; cross-attn k/v cover encoder rows
    std::vector<Mat<Real>> probs;  // per head, [Tq x Tk]
    Mat<Real> attnout;             // pre output-projection
};

template <typename Real>
struct FfnTrace {
    NormTrace<Real> ln;
    Mat<Real> z1;   // pre-activation [T x d_ff]
    Mat<Real> act;  // gelu(z1)
};

template <typename Real>
struct LayerTrace {
    AttnTrace<Real> self;
    std::optional<AttnTrace<Real>> cross;
    FfnTrace<Real> ffn;
};

template <typename Real>
struct StackTrace {
    std::vector<LayerTrace<Real>> layers;
    NormTrace<Real> final_ln;
};

template <typename Real>
struct ForwardTrace {
    std::optional<StackTrace<Real>> enc;
    Mat<Real> enc_out;
    StackTrace<Real> dec;
    Mat<Real> logits;
};

// Logits are [len(dec_tokens) x vocab]; decoder self-attention is strictly
// causal. encoder_input is required iff the architecture is encoder-decoder.
template <typename Real>
Mat<Real> forward(const ModelWeights<Real>& w, const Mat<Real>* encoder_input,
                  std::span<const int32_t> dec_tokens,
                  ForwardTrace<Real>* trace = nullptr);

// ---- training ----

template <typename Real>
struct SequenceExample {
    std::optional<Mat<Real>> encoder_input;
    std::vector<int32_t> decoder_tokens;  // length T
    std::vector<int32_t> targets;         // length T, target[t] predicted at t
    std::vector<uint8_t> loss_mask;       // length T or empty (= all positions)
};

// Mean cross-entropy over masked positions; gradients are accumulated into
// `grads` (created as needed). If d_encoder_input is non-null it receives the
// gradient w.r.t. the encoder input rows so callers can train upstream maps.
template <typename Real>
double loss_and_grads(const ModelWeights<Real>& w, const SequenceExample<Real>& ex,
                      GradMap<Real>& grads, Mat<Real>* d_encoder_input = nullptr);

template <typename Real>
double loss_only(const ModelWeights<Real>& w, const SequenceExample<Real>& ex);

struct AdamParams {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename Real>
struct AdamState {
    size_t step = 0;
    std::map<std::string, Mat<Real>> m, v;
};

// lr == 0 leaves weights bitwise untouched.
template <typename Real>
void adam_step(ModelWeights<Real>& w, const GradMap<Real>& grads,
               AdamState<Real>& state, const AdamParams& p);

// One teacher-forced step over a batch; returns mean loss. Throws
// DivergenceError if the loss is not finite.
template <typename Real>
double train_step(ModelWeights<Real>& w, const std::vector<SequenceExample<Real>>& batch,
                  AdamState<Real>& state, const AdamParams& p);

// ---- sampling ----

struct SamplingParams {
    double temperature = 1.0;
    uint64_t seed = 0;
    size_t max_new_tokens = 0;
};

// Incremental decoder with per-layer KV caches. step() appends one token and
// returns the logits row predicting its successor, bitwise identical to the
// corresponding row of a full forward pass.
template <typename Real>
class DecodeSession {
public:
    DecodeSession(const ModelWeights<Real>& w, const Mat<Real>* encoder_input);

    const std::vector<Real>& step(int32_t token);
    size_t length() const { return n_steps_; }
    const TransformerConfig& config() const { return w_.config; }

private:
    struct LayerCache {
        Mat<Real> self_k, self_v;    // grown row by row
        Mat<Real> cross_k, cross_v;  // fixed, from encoder output
    };

    const ModelWeights<Real>& w_;
    Mat<Real> enc_out_;
    std::vector<LayerCache> layers_;
    std::vector<Real> logits_;
    size_t n_steps_ = 0;
};

// Draw from softmax(logits / temperature) restricted to ids [lo, hi);
// temperature 0 is argmax with lowest-index ties.
template <typename Real>
int32_t sample_from_logits(std::span<const Real> logits, double temperature, Rng& rng,
                           int32_t lo = 0, int32_t hi = -1);

// Autoregressive continuation of `prefix` (which must be non-empty; its first
// token is normally a BOS the caller reserves). Returns only the new tokens.
template <typename Real>
std::vector<int32_t> sample(const ModelWeights<Real>& w, const Mat<Real>* encoder_input,
                            std::span<const int32_t> prefix, const SamplingParams& params);

using ModelWeightsF = ModelWeights<float>;
using ModelWeightsD = ModelWeights<double>;

}  // namespace meow::tfm
