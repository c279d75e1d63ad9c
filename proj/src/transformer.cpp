#include "meow/transformer.hpp"

#include <algorithm>
#include <cmath>

#include "meow/error.hpp"
#include "meow/kernels.hpp"

namespace meow::tfm {

const char* arch_name(Arch a) {
    return a == Arch::encoder_decoder ? "encoder-decoder" : "decoder-only";
}

Arch arch_from_name(const std::string& s) {
    if (s == "encoder-decoder") return Arch::encoder_decoder;
    if (s == "decoder-only") return Arch::decoder_only;
    throw ConfigError("unknown architecture: " + s);
}

void TransformerConfig::validate() const {
    if (n_layers == 0) throw ConfigError("transformer: n_layers must be >= 1");
    if (n_heads == 0 || d_model % n_heads != 0) {
        throw ConfigError("transformer: d_model must be divisible by n_heads");
    }
    if (vocab_size < 2) throw ConfigError("transformer: vocab_size must be >= 2");
    if (d_ff == 0) throw ConfigError("transformer: d_ff must be >= 1");
    if (max_len == 0) throw ConfigError("transformer: max_len must be >= 1");
    if (rel_buckets < 2) throw ConfigError("transformer: rel_buckets must be >= 2");
    if (rel_max_distance == 0) {
        throw ConfigError("transformer: rel_max_distance must be >= 1");
    }
}

size_t rel_bucket(long rel_pos, bool bidirectional, size_t n_buckets,
                  size_t max_distance) {
    size_t bucket = 0;
    size_t buckets = n_buckets;
    long pos = rel_pos;
    if (bidirectional) {
        buckets /= 2;
        if (pos > 0) bucket += buckets;
        pos = std::labs(pos);
    } else {
        pos = -std::min(pos, 0L);
    }
    const long max_exact = static_cast<long>(buckets) / 2;
    if (pos < max_exact) return bucket + static_cast<size_t>(pos);
    const double log_ratio =
        std::log(static_cast<double>(pos) / static_cast<double>(max_exact)) /
        std::log(static_cast<double>(max_distance) / static_cast<double>(max_exact));
    const long large =
        max_exact + static_cast<long>(log_ratio * static_cast<double>(
                                                      static_cast<long>(buckets) - max_exact));
    return bucket + static_cast<size_t>(std::min(large, static_cast<long>(buckets) - 1));
}

namespace {

std::string layer_prefix(const std::string& stack, size_t i) {
    return stack + ".L" + std::to_string(i) + ".";
}

void add_attn_shapes(std::map<std::string, std::pair<size_t, size_t>>& s,
                     const std::string& p, const TransformerConfig& c,
                     bool with_relbias) {
    s[p + "wq"] = {c.d_model, c.d_model};
    s[p + "wk"] = {c.d_model, c.d_model};
    s[p + "wv"] = {c.d_model, c.d_model};
    s[p + "wo"] = {c.d_model, c.d_model};
    if (with_relbias) s[p + "relbias"] = {c.n_heads, c.rel_buckets};
}

void add_stack_shapes(std::map<std::string, std::pair<size_t, size_t>>& s,
                      const std::string& stack, const TransformerConfig& c,
                      bool cross) {
    for (size_t i = 0; i < c.n_layers; ++i) {
        const std::string p = layer_prefix(stack, i);
        s[p + "ln_attn.g"] = {1, c.d_model};
        s[p + "ln_attn.b"] = {1, c.d_model};
        add_attn_shapes(s, p + "attn.", c, true);
        if (cross) {
            s[p + "ln_cross.g"] = {1, c.d_model};
            s[p + "ln_cross.b"] = {1, c.d_model};
            add_attn_shapes(s, p + "xattn.", c, false);
        }
        s[p + "ln_ffn.g"] = {1, c.d_model};
        s[p + "ln_ffn.b"] = {1, c.d_model};
        s[p + "ffn.w1"] = {c.d_ff, c.d_model};
        s[p + "ffn.b1"] = {1, c.d_ff};
        s[p + "ffn.w2"] = {c.d_model, c.d_ff};
        s[p + "ffn.b2"] = {1, c.d_model};
    }
    s[stack + ".final_ln.g"] = {1, c.d_model};
    s[stack + ".final_ln.b"] = {1, c.d_model};
}

}  // namespace

std::map<std::string, std::pair<size_t, size_t>> expected_shapes(
    const TransformerConfig& cfg) {
    cfg.validate();
    std::map<std::string, std::pair<size_t, size_t>> s;
    s["dec.embed"] = {cfg.vocab_size, cfg.d_model};
    s["head.w"] = {cfg.vocab_size, cfg.d_model};
    s["head.b"] = {1, cfg.vocab_size};
    add_stack_shapes(s, "dec", cfg, cfg.arch == Arch::encoder_decoder);
    if (cfg.arch == Arch::encoder_decoder) add_stack_shapes(s, "enc", cfg, false);
    return s;
}

template <typename Real>
Mat<Real>& ModelWeights<Real>::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ShapeError("missing tensor: " + name);
    return it->second;
}

template <typename Real>
const Mat<Real>& ModelWeights<Real>::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ShapeError("missing tensor: " + name);
    return it->second;
}

template <typename Real>
ModelWeights<Real> init_weights(const TransformerConfig& cfg, uint64_t seed) {
    ModelWeights<Real> w;
    w.config = cfg;
    Rng rng(seed);
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const double ffn2_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
    for (const auto& [name, shape] : expected_shapes(cfg)) {
        Mat<Real> t(shape.first, shape.second);
        const bool is_gain = name.ends_with(".g");
        const bool is_zero = name.ends_with(".b") || name.ends_with("relbias") ||
                             name.starts_with("head.");
        if (is_gain) {
            t.fill(Real(1));
        } else if (!is_zero) {
            // Biases, relative-position tables and the output head stay zero;
            // the zeroed head makes the initial loss exactly ln(vocab).
            const double std = name.ends_with("ffn.w2") ? ffn2_std : proj_std;
            for (auto& x : t.v) x = static_cast<Real>(rng.normal() * std);
        }
        w.tensors.emplace(name, std::move(t));
    }
    return w;
}

namespace {

constexpr double kLnEps = 1e-5;

template <typename Real>
void softmax_row(Real* s, size_t n) {
    Real mx = s[0];
    for (size_t i = 1; i < n; ++i) mx = std::max(mx, s[i]);
    Real sum = Real(0);
    for (size_t i = 0; i < n; ++i) {
        s[i] = std::exp(s[i] - mx);
        sum += s[i];
    }
    const Real inv = Real(1) / sum;
    for (size_t i = 0; i < n; ++i) s[i] *= inv;
}

template <typename Real>
Real gelu_fn(Real x) {
    return Real(0.5) * x * (Real(1) + std::erf(x * Real(M_SQRT1_2)));
}

template <typename Real>
Real gelu_grad(Real x) {
    const Real phi = Real(0.5) * (Real(1) + std::erf(x * Real(M_SQRT1_2)));
    const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.3989422804014327);
    return phi + x * pdf;
}

// y = x . W^T (+ bias row); W stored [out x in].
template <typename Real>
Mat<Real> linear(const Mat<Real>& x, const Mat<Real>& w, const Mat<Real>* b = nullptr) {
    Mat<Real> y(x.rows, w.rows);
    kernels::matmul_nt(x.v.data(), w.v.data(), y.v.data(), x.rows, x.cols, w.rows);
    if (b) {
        for (size_t t = 0; t < y.rows; ++t) {
            kernels::axpy(Real(1), b->row(0), y.row(t), y.cols);
        }
    }
    return y;
}

template <typename Real>
void accumulate(Mat<Real>& dst, const Mat<Real>& src) {
    kernels::axpy(Real(1), src.v.data(), dst.v.data(), dst.size());
}

template <typename Real>
Mat<Real>& grad_slot(GradMap<Real>& grads, const std::string& name, size_t rows,
                     size_t cols) {
    auto it = grads.find(name);
    if (it == grads.end()) it = grads.emplace(name, Mat<Real>(rows, cols)).first;
    return it->second;
}

// dy [T x out], x [T x in], W [out x in].
template <typename Real>
void linear_backward(const Mat<Real>& x, const Mat<Real>& w, const Mat<Real>& dy,
                     GradMap<Real>& grads, const std::string& wname,
                     const std::string& bname, Mat<Real>* dx_accum) {
    Mat<Real>& dw = grad_slot(grads, wname, w.rows, w.cols);
    Mat<Real> tmp(w.rows, w.cols);
    kernels::matmul_tn(dy.v.data(), x.v.data(), tmp.v.data(), dy.cols, dy.rows, x.cols);
    accumulate(dw, tmp);
    if (!bname.empty()) {
        Mat<Real>& db = grad_slot(grads, bname, 1, dy.cols);
        for (size_t t = 0; t < dy.rows; ++t) {
            kernels::axpy(Real(1), dy.row(t), db.row(0), dy.cols);
        }
    }
    if (dx_accum) {
        Mat<Real> dx(x.rows, x.cols);
        kernels::matmul_nn(dy.v.data(), w.v.data(), dx.v.data(), dy.rows, dy.cols,
                           w.cols);
        accumulate(*dx_accum, dx);
    }
}

template <typename Real>
Mat<Real> layernorm(const Mat<Real>& x, const Mat<Real>& g, const Mat<Real>& b,
                    NormTrace<Real>* tr) {
    Mat<Real> y(x.rows, x.cols);
    std::vector<Real> means(x.rows), inv_sigmas(x.rows);
    for (size_t t = 0; t < x.rows; ++t) {
        const Real* row = x.row(t);
        double mu = 0.0;
        for (size_t i = 0; i < x.cols; ++i) mu += row[i];
        mu /= static_cast<double>(x.cols);
        double var = 0.0;
        for (size_t i = 0; i < x.cols; ++i) {
            const double d = row[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(x.cols);
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        means[t] = static_cast<Real>(mu);
        inv_sigmas[t] = static_cast<Real>(inv);
        Real* out = y.row(t);
        for (size_t i = 0; i < x.cols; ++i) {
            out[i] = static_cast<Real>((double(row[i]) - mu) * inv) * g.v[i] + b.v[i];
        }
    }
    if (tr) {
        tr->input = x;
        tr->normed = y;
        tr->mean = std::move(means);
        tr->inv_sigma = std::move(inv_sigmas);
    }
    return y;
}

template <typename Real>
void layernorm_backward(const NormTrace<Real>& tr, const Mat<Real>& g,
                        const Mat<Real>& dy, GradMap<Real>& grads,
                        const std::string& gname, const std::string& bname,
                        Mat<Real>& dx_accum) {
    const size_t n = tr.input.cols;
    Mat<Real>& dg = grad_slot(grads, gname, 1, n);
    Mat<Real>& db = grad_slot(grads, bname, 1, n);
    for (size_t t = 0; t < tr.input.rows; ++t) {
        const Real* xr = tr.input.row(t);
        const Real* dyr = dy.row(t);
        const double mu = tr.mean[t];
        const double inv = tr.inv_sigma[t];
        double sum_dxhat = 0.0;
        double sum_dxhat_xhat = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double xhat = (double(xr[i]) - mu) * inv;
            const double dxhat = double(dyr[i]) * double(g.v[i]);
            dg.v[i] += static_cast<Real>(double(dyr[i]) * xhat);
            db.v[i] += dyr[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        Real* dxr = dx_accum.row(t);
        for (size_t i = 0; i < n; ++i) {
            const double xhat = (double(xr[i]) - mu) * inv;
            const double dxhat = double(dyr[i]) * double(g.v[i]);
            dxr[i] += static_cast<Real>(
                inv * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat));
        }
    }
}

// Bucket index per (key_pos - query_pos), shifted by tq - 1.
std::vector<size_t> bucket_offsets(size_t tq, size_t tk, bool bidirectional,
                                   const TransformerConfig& cfg) {
    std::vector<size_t> idx(tq + tk - 1);
    for (size_t i = 0; i < idx.size(); ++i) {
        const long rel = static_cast<long>(i) - static_cast<long>(tq - 1);
        idx[i] = rel_bucket(rel, bidirectional, cfg.rel_buckets, cfg.rel_max_distance);
    }
    return idx;
}

struct AttnNames {
    std::string ln_g, ln_b, wq, wk, wv, wo, relbias;  // relbias empty for cross
};

AttnNames self_attn_names(const std::string& lp) {
    return {lp + "ln_attn.g", lp + "ln_attn.b", lp + "attn.wq", lp + "attn.wk",
            lp + "attn.wv",   lp + "attn.wo",   lp + "attn.relbias"};
}

AttnNames cross_attn_names(const std::string& lp) {
    return {lp + "ln_cross.g", lp + "ln_cross.b", lp + "xattn.wq", lp + "xattn.wk",
            lp + "xattn.wv",   lp + "xattn.wo",   ""};
}

// One attention sublayer; returns the output added to the residual stream.
// kv_src == nullptr means self-attention over the normed input.
template <typename Real>
Mat<Real> attn_forward(const ModelWeights<Real>& w, const AttnNames& names,
                       const Mat<Real>& x, const Mat<Real>* kv_src, bool causal,
                       AttnTrace<Real>& tr) {
    const auto& cfg = w.config;
    const size_t dh = cfg.head_dim();
    const Real scale = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));

    const Mat<Real> normed = layernorm(x, w.at(names.ln_g), w.at(names.ln_b), &tr.ln);
    const Mat<Real>& kv_in = kv_src ? *kv_src : tr.ln.normed;

    tr.q = linear(normed, w.at(names.wq));
    tr.k = linear(kv_in, w.at(names.wk));
    tr.v = linear(kv_in, w.at(names.wv));

    const size_t tq = tr.q.rows;
    const size_t tk = tr.k.rows;
    const bool with_bias = !names.relbias.empty();
    const Mat<Real>* relbias = with_bias ? &w.at(names.relbias) : nullptr;
    std::vector<size_t> buckets;
    if (with_bias) buckets = bucket_offsets(tq, tk, !causal, cfg);

    tr.probs.assign(cfg.n_heads, Mat<Real>(tq, tk));
    tr.attnout = Mat<Real>(tq, cfg.d_model);

    kernels::parallel_for(tq, [&](size_t rb, size_t re) {
        std::vector<Real> scores(tk);
        for (size_t t = rb; t < re; ++t) {
            const size_t limit = causal ? t + 1 : tk;
            for (size_t h = 0; h < cfg.n_heads; ++h) {
                const Real* qh = tr.q.row(t) + h * dh;
                for (size_t j = 0; j < limit; ++j) {
                    Real s = kernels::dot(qh, tr.k.row(j) + h * dh, dh) * scale;
                    if (with_bias) s += relbias->at(h, buckets[j + (tq - 1) - t]);
                    scores[j] = s;
                }
                softmax_row(scores.data(), limit);
                Real* prow = tr.probs[h].row(t);
                std::copy_n(scores.data(), limit, prow);
                Real* out = tr.attnout.row(t) + h * dh;
                for (size_t j = 0; j < limit; ++j) {
                    kernels::axpy(prow[j], tr.v.row(j) + h * dh, out, dh);
                }
            }
        }
    });
    return linear(tr.attnout, w.at(names.wo));
}

// d_out: gradient of the sublayer output. Accumulates into dx (the residual
// stream entering the sublayer) and, for cross-attention, into *d_kv.
template <typename Real>
void attn_backward(const ModelWeights<Real>& w, const AttnNames& names,
                   const AttnTrace<Real>& tr, const Mat<Real>* kv_src,
                   const Mat<Real>& d_out, bool causal, GradMap<Real>& grads,
                   Mat<Real>& dx, Mat<Real>* d_kv) {
    const auto& cfg = w.config;
    const size_t dh = cfg.head_dim();
    const Real scale = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));
    const size_t tq = tr.q.rows;
    const size_t tk = tr.k.rows;
    const bool with_bias = !names.relbias.empty();
    std::vector<size_t> buckets;
    if (with_bias) buckets = bucket_offsets(tq, tk, !causal, cfg);

    Mat<Real> d_attnout(tq, cfg.d_model);
    {
        Mat<Real>& dw = grad_slot(grads, names.wo, cfg.d_model, cfg.d_model);
        Mat<Real> tmp(cfg.d_model, cfg.d_model);
        kernels::matmul_tn(d_out.v.data(), tr.attnout.v.data(), tmp.v.data(),
                           cfg.d_model, tq, cfg.d_model);
        accumulate(dw, tmp);
        kernels::matmul_nn(d_out.v.data(), w.at(names.wo).v.data(), d_attnout.v.data(),
                           tq, cfg.d_model, cfg.d_model);
    }

    Mat<Real> dq(tq, cfg.d_model), dk(tk, cfg.d_model), dv(tk, cfg.d_model);
    Mat<Real>* drel =
        with_bias ? &grad_slot(grads, names.relbias, cfg.n_heads, cfg.rel_buckets)
                  : nullptr;

    // Heads own disjoint column slices, so the per-head loop can parallelize
    // while keeping the per-key accumulation order fixed.
    kernels::parallel_for(cfg.n_heads, [&](size_t hb, size_t he) {
        std::vector<Real> dp(tk), ds(tk);
        for (size_t h = hb; h < he; ++h) {
            const Mat<Real>& probs = tr.probs[h];
            for (size_t t = 0; t < tq; ++t) {
                const size_t limit = causal ? t + 1 : tk;
                const Real* dout_h = d_attnout.row(t) + h * dh;
                const Real* prow = probs.row(t);
                double dot_pd = 0.0;
                for (size_t j = 0; j < limit; ++j) {
                    dp[j] = kernels::dot(dout_h, tr.v.row(j) + h * dh, dh);
                    kernels::axpy(prow[j], dout_h, dv.row(j) + h * dh, dh);
                    dot_pd += double(prow[j]) * double(dp[j]);
                }
                for (size_t j = 0; j < limit; ++j) {
                    ds[j] = prow[j] * static_cast<Real>(double(dp[j]) - dot_pd);
                }
                if (with_bias) {
                    for (size_t j = 0; j < limit; ++j) {
                        drel->at(h, buckets[j + (tq - 1) - t]) += ds[j];
                    }
                }
                const Real* qh = tr.q.row(t) + h * dh;
                Real* dqh = dq.row(t) + h * dh;
                for (size_t j = 0; j < limit; ++j) {
                    const Real s = ds[j] * scale;
                    kernels::axpy(s, tr.k.row(j) + h * dh, dqh, dh);
                    kernels::axpy(s, qh, dk.row(j) + h * dh, dh);
                }
            }
        }
    });

    const Mat<Real>& kv_in = kv_src ? *kv_src : tr.ln.normed;
    Mat<Real> d_normed(tq, cfg.d_model);
    linear_backward(tr.ln.normed, w.at(names.wq), dq, grads, names.wq, "", &d_normed);
    if (kv_src) {
        linear_backward(kv_in, w.at(names.wk), dk, grads, names.wk, "", d_kv);
        linear_backward(kv_in, w.at(names.wv), dv, grads, names.wv, "", d_kv);
    } else {
        linear_backward(kv_in, w.at(names.wk), dk, grads, names.wk, "", &d_normed);
        linear_backward(kv_in, w.at(names.wv), dv, grads, names.wv, "", &d_normed);
    }
    layernorm_backward(tr.ln, w.at(names.ln_g), d_normed, grads, names.ln_g,
                       names.ln_b, dx);
}

template <typename Real>
Mat<Real> ffn_forward(const ModelWeights<Real>& w, const std::string& lp,
                      const Mat<Real>& x, FfnTrace<Real>& tr) {
    const Mat<Real> normed =
        layernorm(x, w.at(lp + "ln_ffn.g"), w.at(lp + "ln_ffn.b"), &tr.ln);
    tr.z1 = linear(normed, w.at(lp + "ffn.w1"), &w.at(lp + "ffn.b1"));
    tr.act = Mat<Real>(tr.z1.rows, tr.z1.cols);
    for (size_t i = 0; i < tr.z1.size(); ++i) tr.act.v[i] = gelu_fn(tr.z1.v[i]);
    return linear(tr.act, w.at(lp + "ffn.w2"), &w.at(lp + "ffn.b2"));
}

template <typename Real>
void ffn_backward(const ModelWeights<Real>& w, const std::string& lp,
                  const FfnTrace<Real>& tr, const Mat<Real>& d_out,
                  GradMap<Real>& grads, Mat<Real>& dx) {
    Mat<Real> d_act(tr.act.rows, tr.act.cols);
    linear_backward(tr.act, w.at(lp + "ffn.w2"), d_out, grads, lp + "ffn.w2",
                    lp + "ffn.b2", &d_act);
    Mat<Real> d_z1(tr.z1.rows, tr.z1.cols);
    for (size_t i = 0; i < tr.z1.size(); ++i) {
        d_z1.v[i] = d_act.v[i] * gelu_grad(tr.z1.v[i]);
    }
    Mat<Real> d_normed(tr.ln.normed.rows, tr.ln.normed.cols);
    linear_backward(tr.ln.normed, w.at(lp + "ffn.w1"), d_z1, grads, lp + "ffn.w1",
                    lp + "ffn.b1", &d_normed);
    layernorm_backward(tr.ln, w.at(lp + "ln_ffn.g"), d_normed, grads,
                       lp + "ln_ffn.g", lp + "ln_ffn.b", dx);
}

// Pre-norm residual stack ending in a final layer norm.
template <typename Real>
Mat<Real> run_stack(const ModelWeights<Real>& w, const std::string& stack,
                    const Mat<Real>& input, bool causal, const Mat<Real>* cross_src,
                    StackTrace<Real>& tr) {
    const auto& cfg = w.config;
    tr.layers.resize(cfg.n_layers);
    Mat<Real> x = input;
    for (size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string lp = layer_prefix(stack, i);
        LayerTrace<Real>& lt = tr.layers[i];
        {
            const Mat<Real> out =
                attn_forward<Real>(w, self_attn_names(lp), x, nullptr, causal, lt.self);
            accumulate(x, out);
        }
        if (cross_src) {
            lt.cross.emplace();
            const Mat<Real> out = attn_forward(w, cross_attn_names(lp), x, cross_src,
                                               false, *lt.cross);
            accumulate(x, out);
        }
        {
            const Mat<Real> out = ffn_forward(w, lp, x, lt.ffn);
            accumulate(x, out);
        }
    }
    return layernorm(x, w.at(stack + ".final_ln.g"), w.at(stack + ".final_ln.b"),
                     &tr.final_ln);
}

// d_out: gradient of the stack output. Returns gradient of the stack input;
// cross-attention gradients are accumulated into *d_cross.
template <typename Real>
Mat<Real> backward_stack(const ModelWeights<Real>& w, const std::string& stack,
                         const StackTrace<Real>& tr, const Mat<Real>& d_out,
                         bool causal, const Mat<Real>* cross_src,
                         GradMap<Real>& grads, Mat<Real>* d_cross) {
    const auto& cfg = w.config;
    Mat<Real> dx(d_out.rows, d_out.cols);
    layernorm_backward(tr.final_ln, w.at(stack + ".final_ln.g"), d_out, grads,
                       stack + ".final_ln.g", stack + ".final_ln.b", dx);
    for (size_t i = cfg.n_layers; i-- > 0;) {
        const std::string lp = layer_prefix(stack, i);
        const LayerTrace<Real>& lt = tr.layers[i];
        // Residual: gradient flows both straight through and into the sublayer.
        ffn_backward(w, lp, lt.ffn, dx, grads, dx);
        if (lt.cross) {
            attn_backward<Real>(w, cross_attn_names(lp), *lt.cross, cross_src, dx,
                                false, grads, dx, d_cross);
        }
        attn_backward<Real>(w, self_attn_names(lp), lt.self, nullptr, dx, causal,
                            grads, dx, nullptr);
    }
    return dx;
}

template <typename Real>
Mat<Real> embed_tokens(const ModelWeights<Real>& w, std::span<const int32_t> tokens) {
    const auto& cfg = w.config;
    const Mat<Real>& table = w.at("dec.embed");
    Mat<Real> x(tokens.size(), cfg.d_model);
    for (size_t t = 0; t < tokens.size(); ++t) {
        const int32_t tok = tokens[t];
        if (tok < 0 || static_cast<size_t>(tok) >= cfg.vocab_size) {
            throw DomainError("decoder token out of vocab range: " + std::to_string(tok));
        }
        std::copy_n(table.row(static_cast<size_t>(tok)), cfg.d_model, x.row(t));
    }
    return x;
}

template <typename Real>
void check_forward_args(const ModelWeights<Real>& w, const Mat<Real>* encoder_input,
                        size_t dec_len) {
    const auto& cfg = w.config;
    cfg.validate();
    if (dec_len == 0) throw DomainError("decoder token sequence is empty");
    if (dec_len > cfg.max_len) {
        throw DomainError("decoder sequence length " + std::to_string(dec_len) +
                          " exceeds max_len " + std::to_string(cfg.max_len));
    }
    if (cfg.arch == Arch::encoder_decoder) {
        if (!encoder_input) {
            throw ConfigError("encoder-decoder model requires encoder_input");
        }
        if (encoder_input->cols != cfg.d_model) {
            throw ShapeError("encoder input width != d_model");
        }
        if (encoder_input->rows == 0) {
            throw DomainError("encoder input is empty");
        }
        if (encoder_input->rows > cfg.max_len) {
            throw DomainError("encoder sequence exceeds max_len");
        }
    } else if (encoder_input) {
        throw ConfigError("decoder-only model does not take encoder_input");
    }
}

}  // namespace

template <typename Real>
Mat<Real> forward(const ModelWeights<Real>& w, const Mat<Real>* encoder_input,
                  std::span<const int32_t> dec_tokens, ForwardTrace<Real>* trace) {
    check_forward_args(w, encoder_input, dec_tokens.size());
    ForwardTrace<Real> local;
    ForwardTrace<Real>& tr = trace ? *trace : local;

    const Mat<Real>* cross = nullptr;
    if (w.config.arch == Arch::encoder_decoder) {
        tr.enc.emplace();
        tr.enc_out = run_stack<Real>(w, "enc", *encoder_input, false, nullptr, *tr.enc);
        cross = &tr.enc_out;
    }
    Mat<Real> x = embed_tokens(w, dec_tokens);
    const Mat<Real> dec_out = run_stack(w, "dec", x, true, cross, tr.dec);
    tr.logits = linear(dec_out, w.at("head.w"), &w.at("head.b"));
    return tr.logits;
}

template <typename Real>
double loss_and_grads(const ModelWeights<Real>& w, const SequenceExample<Real>& ex,
                      GradMap<Real>& grads, Mat<Real>* d_encoder_input) {
    const auto& cfg = w.config;
    const size_t T = ex.decoder_tokens.size();
    if (ex.targets.size() != T) {
        throw ShapeError("targets length != decoder_tokens length");
    }
    if (!ex.loss_mask.empty() && ex.loss_mask.size() != T) {
        throw ShapeError("loss_mask length != decoder_tokens length");
    }
    for (int32_t t : ex.targets) {
        if (t < 0 || static_cast<size_t>(t) >= cfg.vocab_size) {
            throw DomainError("target token out of vocab range");
        }
    }
    size_t count = 0;
    for (size_t t = 0; t < T; ++t) {
        if (ex.loss_mask.empty() || ex.loss_mask[t]) ++count;
    }
    if (count == 0) throw DomainError("loss mask selects no positions");

    const Mat<Real>* enc_in =
        ex.encoder_input.has_value() ? &*ex.encoder_input : nullptr;
    ForwardTrace<Real> tr;
    forward(w, enc_in, ex.decoder_tokens, &tr);

    // Mean cross entropy over unmasked positions; dlogits = softmax - onehot.
    const size_t V = cfg.vocab_size;
    Mat<Real> dlogits(T, V);
    double loss = 0.0;
    const double inv_count = 1.0 / static_cast<double>(count);
    std::vector<double> p(V);
    for (size_t t = 0; t < T; ++t) {
        if (!(ex.loss_mask.empty() || ex.loss_mask[t])) continue;
        const Real* row = tr.logits.row(t);
        double mx = row[0];
        for (size_t i = 1; i < V; ++i) mx = std::max(mx, double(row[i]));
        double sum = 0.0;
        for (size_t i = 0; i < V; ++i) {
            p[i] = std::exp(double(row[i]) - mx);
            sum += p[i];
        }
        const double lse = mx + std::log(sum);
        const auto target = static_cast<size_t>(ex.targets[t]);
        loss += (lse - double(row[target])) * inv_count;
        Real* dl = dlogits.row(t);
        const double inv_sum = 1.0 / sum;
        for (size_t i = 0; i < V; ++i) {
            dl[i] = static_cast<Real>(p[i] * inv_sum * inv_count);
        }
        dl[target] -= static_cast<Real>(inv_count);
    }

    // Head, decoder stack, embedding, then (optionally) the encoder.
    const Mat<Real>& dec_out = tr.dec.final_ln.normed;
    Mat<Real> d_dec_out(T, cfg.d_model);
    linear_backward(dec_out, w.at("head.w"), dlogits, grads, "head.w", "head.b",
                    &d_dec_out);

    const Mat<Real>* cross = tr.enc.has_value() ? &tr.enc_out : nullptr;
    Mat<Real> d_enc_out;
    if (tr.enc) d_enc_out = Mat<Real>(tr.enc_out.rows, tr.enc_out.cols);

    const Mat<Real> d_embedded =
        backward_stack<Real>(w, "dec", tr.dec, d_dec_out, true, cross, grads,
                             tr.enc ? &d_enc_out : nullptr);

    Mat<Real>& d_embed = grad_slot(grads, "dec.embed", cfg.vocab_size, cfg.d_model);
    for (size_t t = 0; t < T; ++t) {
        kernels::axpy(Real(1), d_embedded.row(t),
                      d_embed.row(static_cast<size_t>(ex.decoder_tokens[t])),
                      cfg.d_model);
    }

    if (tr.enc) {
        const Mat<Real> d_enc_in = backward_stack<Real>(w, "enc", *tr.enc, d_enc_out,
                                                        false, nullptr, grads, nullptr);
        if (d_encoder_input) {
            if (d_encoder_input->rows != d_enc_in.rows ||
                d_encoder_input->cols != d_enc_in.cols) {
                *d_encoder_input = Mat<Real>(d_enc_in.rows, d_enc_in.cols);
            }
            accumulate(*d_encoder_input, d_enc_in);
        }
    }
    return loss;
}

template <typename Real>
double loss_only(const ModelWeights<Real>& w, const SequenceExample<Real>& ex) {
    const auto& cfg = w.config;
    const size_t T = ex.decoder_tokens.size();
    if (ex.targets.size() != T) {
        throw ShapeError("targets length != decoder_tokens length");
    }
    const Mat<Real>* enc_in =
        ex.encoder_input.has_value() ? &*ex.encoder_input : nullptr;
    const Mat<Real> logits = forward(w, enc_in, ex.decoder_tokens);
    const size_t V = cfg.vocab_size;
    double loss = 0.0;
    size_t count = 0;
    for (size_t t = 0; t < T; ++t) {
        if (!(ex.loss_mask.empty() || ex.loss_mask[t])) continue;
        const Real* row = logits.row(t);
        double mx = row[0];
        for (size_t i = 1; i < V; ++i) mx = std::max(mx, double(row[i]));
        double sum = 0.0;
        for (size_t i = 0; i < V; ++i) sum += std::exp(double(row[i]) - mx);
        loss += mx + std::log(sum) - double(row[static_cast<size_t>(ex.targets[t])]);
        ++count;
    }
    if (count == 0) throw DomainError("loss mask selects no positions");
    return loss / static_cast<double>(count);
}

template <typename Real>
void adam_step(ModelWeights<Real>& w, const GradMap<Real>& grads,
               AdamState<Real>& state, const AdamParams& p) {
    ++state.step;
    const double b1t = 1.0 - std::pow(p.beta1, static_cast<double>(state.step));
    const double b2t = 1.0 - std::pow(p.beta2, static_cast<double>(state.step));
    for (auto& [name, tensor] : w.tensors) {
        auto mit = state.m.find(name);
        if (mit == state.m.end()) {
            mit = state.m.emplace(name, Mat<Real>(tensor.rows, tensor.cols)).first;
            state.v.emplace(name, Mat<Real>(tensor.rows, tensor.cols));
        }
        Mat<Real>& m = mit->second;
        Mat<Real>& v = state.v.at(name);
        const auto git = grads.find(name);
        const Mat<Real>* g = git != grads.end() ? &git->second : nullptr;
        if (g && !g->same_shape(tensor)) {
            throw ShapeError("gradient shape mismatch for tensor: " + name);
        }
        for (size_t i = 0; i < tensor.size(); ++i) {
            const double gi = g ? double(g->v[i]) : 0.0;
            m.v[i] = static_cast<Real>(p.beta1 * double(m.v[i]) + (1.0 - p.beta1) * gi);
            v.v[i] =
                static_cast<Real>(p.beta2 * double(v.v[i]) + (1.0 - p.beta2) * gi * gi);
            if (p.lr != 0.0) {
                const double mhat = double(m.v[i]) / b1t;
                const double vhat = double(v.v[i]) / b2t;
                tensor.v[i] = static_cast<Real>(
                    double(tensor.v[i]) - p.lr * mhat / (std::sqrt(vhat) + p.eps));
            }
        }
    }
}

template <typename Real>
double train_step(ModelWeights<Real>& w, const std::vector<SequenceExample<Real>>& batch,
                  AdamState<Real>& state, const AdamParams& p) {
    if (batch.empty()) throw DomainError("train_step: empty batch");
    GradMap<Real> grads;
    double total = 0.0;
    for (const auto& ex : batch) {
        total += loss_and_grads<Real>(w, ex, grads, nullptr);
    }
    const double loss = total / static_cast<double>(batch.size());
    if (!std::isfinite(loss)) {
        throw DivergenceError("training loss is not finite at optimizer step " +
                              std::to_string(state.step + 1) +
                              " (loss=" + std::to_string(loss) + ")");
    }
    const Real inv_b = Real(1) / static_cast<Real>(batch.size());
    for (auto& [name, g] : grads) kernels::scale(inv_b, g.v.data(), g.size());
    adam_step(w, grads, state, p);
    return loss;
}

// ---- incremental decoding ----

template <typename Real>
DecodeSession<Real>::DecodeSession(const ModelWeights<Real>& w,
                                   const Mat<Real>* encoder_input)
    : w_(w) {
    check_forward_args(w, encoder_input, 1);
    const auto& cfg = w.config;
    if (cfg.arch == Arch::encoder_decoder) {
        StackTrace<Real> tr;
        enc_out_ = run_stack<Real>(w, "enc", *encoder_input, false, nullptr, tr);
    }
    layers_.resize(cfg.n_layers);
    for (size_t i = 0; i < cfg.n_layers; ++i) {
        LayerCache& lc = layers_[i];
        lc.self_k = Mat<Real>(cfg.max_len, cfg.d_model);
        lc.self_v = Mat<Real>(cfg.max_len, cfg.d_model);
        if (cfg.arch == Arch::encoder_decoder) {
            const std::string lp = layer_prefix("dec", i);
            lc.cross_k = linear(enc_out_, w.at(lp + "xattn.wk"));
            lc.cross_v = linear(enc_out_, w.at(lp + "xattn.wv"));
        }
    }
    logits_.resize(cfg.vocab_size);
}

template <typename Real>
const std::vector<Real>& DecodeSession<Real>::step(int32_t token) {
    const auto& cfg = w_.config;
    if (n_steps_ >= cfg.max_len) throw DomainError("decode session exceeded max_len");
    const size_t t = n_steps_;
    const size_t dh = cfg.head_dim();
    const Real scale = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));

    Mat<Real> x = embed_tokens(w_, std::span<const int32_t>(&token, 1));

    std::vector<Real> scores(std::max(cfg.max_len, enc_out_.rows));
    for (size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string lp = layer_prefix("dec", i);
        LayerCache& lc = layers_[i];
        {
            const AttnNames names = self_attn_names(lp);
            const Mat<Real> a =
                layernorm<Real>(x, w_.at(names.ln_g), w_.at(names.ln_b), nullptr);
            const Mat<Real> q = linear(a, w_.at(names.wq));
            const Mat<Real> k = linear(a, w_.at(names.wk));
            const Mat<Real> v = linear(a, w_.at(names.wv));
            std::copy_n(k.row(0), cfg.d_model, lc.self_k.row(t));
            std::copy_n(v.row(0), cfg.d_model, lc.self_v.row(t));

            const Mat<Real>& relbias = w_.at(names.relbias);
            Mat<Real> attnout(1, cfg.d_model);
            for (size_t h = 0; h < cfg.n_heads; ++h) {
                const Real* qh = q.row(0) + h * dh;
                for (size_t j = 0; j <= t; ++j) {
                    const long rel = static_cast<long>(j) - static_cast<long>(t);
                    const size_t bucket = rel_bucket(rel, false, cfg.rel_buckets,
                                                     cfg.rel_max_distance);
                    scores[j] = kernels::dot(qh, lc.self_k.row(j) + h * dh, dh) * scale +
                                relbias.at(h, bucket);
                }
                softmax_row(scores.data(), t + 1);
                Real* out = attnout.row(0) + h * dh;
                for (size_t j = 0; j <= t; ++j) {
                    kernels::axpy(scores[j], lc.self_v.row(j) + h * dh, out, dh);
                }
            }
            const Mat<Real> y = linear(attnout, w_.at(names.wo));
            accumulate(x, y);
        }
        if (cfg.arch == Arch::encoder_decoder) {
            const AttnNames names = cross_attn_names(lp);
            const Mat<Real> a =
                layernorm<Real>(x, w_.at(names.ln_g), w_.at(names.ln_b), nullptr);
            const Mat<Real> q = linear(a, w_.at(names.wq));
            Mat<Real> attnout(1, cfg.d_model);
            const size_t tk = enc_out_.rows;
            for (size_t h = 0; h < cfg.n_heads; ++h) {
                const Real* qh = q.row(0) + h * dh;
                for (size_t j = 0; j < tk; ++j) {
                    scores[j] = kernels::dot(qh, lc.cross_k.row(j) + h * dh, dh) * scale;
                }
                softmax_row(scores.data(), tk);
                Real* out = attnout.row(0) + h * dh;
                for (size_t j = 0; j < tk; ++j) {
                    kernels::axpy(scores[j], lc.cross_v.row(j) + h * dh, out, dh);
                }
            }
            const Mat<Real> y = linear(attnout, w_.at(names.wo));
            accumulate(x, y);
        }
        {
            FfnTrace<Real> ft;
            const Mat<Real> y = ffn_forward(w_, lp, x, ft);
            accumulate(x, y);
        }
    }
    const Mat<Real> h =
        layernorm<Real>(x, w_.at("dec.final_ln.g"), w_.at("dec.final_ln.b"), nullptr);
    const Mat<Real> logits = linear(h, w_.at("head.w"), &w_.at("head.b"));
    std::copy_n(logits.row(0), cfg.vocab_size, logits_.begin());
    ++n_steps_;
    return logits_;
}

template <typename Real>
int32_t sample_from_logits(std::span<const Real> logits, double temperature, Rng& rng,
                           int32_t lo, int32_t hi) {
    if (temperature < 0.0) throw DomainError("temperature must be >= 0");
    const int32_t n = static_cast<int32_t>(logits.size());
    if (hi < 0) hi = n;
    if (lo < 0 || hi > n || lo >= hi) throw DomainError("bad logit range restriction");
    if (temperature == 0.0) {
        int32_t best = lo;
        for (int32_t i = lo + 1; i < hi; ++i) {
            if (logits[i] > logits[best]) best = i;
        }
        return best;
    }
    double mx = double(logits[lo]);
    for (int32_t i = lo + 1; i < hi; ++i) mx = std::max(mx, double(logits[i]));
    std::vector<double> p(hi - lo);
    double sum = 0.0;
    for (int32_t i = lo; i < hi; ++i) {
        p[i - lo] = std::exp((double(logits[i]) - mx) / temperature);
        sum += p[i - lo];
    }
    const double r = rng.uniform() * sum;
    double acc = 0.0;
    for (int32_t i = lo; i < hi; ++i) {
        acc += p[i - lo];
        if (acc >= r) return i;
    }
    return hi - 1;
}

template <typename Real>
std::vector<int32_t> sample(const ModelWeights<Real>& w, const Mat<Real>* encoder_input,
                            std::span<const int32_t> prefix, const SamplingParams& params) {
    if (params.temperature < 0.0) throw DomainError("temperature must be >= 0");
    if (prefix.empty()) throw DomainError("sample: prefix must be non-empty");
    if (prefix.size() + params.max_new_tokens > w.config.max_len) {
        throw DomainError("sample: prefix plus max_new_tokens exceeds max_len");
    }
    Rng rng(params.seed);
    DecodeSession<Real> session(w, encoder_input);
    for (size_t i = 0; i + 1 < prefix.size(); ++i) session.step(prefix[i]);
    const std::vector<Real>* logits = &session.step(prefix.back());

    std::vector<int32_t> out;
    out.reserve(params.max_new_tokens);
    for (size_t i = 0; i < params.max_new_tokens; ++i) {
        const int32_t tok = sample_from_logits<Real>(
            std::span<const Real>(logits->data(), logits->size()), params.temperature,
            rng);
        out.push_back(tok);
        if (i + 1 < params.max_new_tokens) logits = &session.step(tok);
    }
    return out;
}

// explicit instantiations
template struct ModelWeights<float>;
template struct ModelWeights<double>;
template ModelWeights<float> init_weights<float>(const TransformerConfig&, uint64_t);
template ModelWeights<double> init_weights<double>(const TransformerConfig&, uint64_t);
template Mat<float> forward<float>(const ModelWeights<float>&, const Mat<float>*,
                                   std::span<const int32_t>, ForwardTrace<float>*);
template Mat<double> forward<double>(const ModelWeights<double>&, const Mat<double>*,
                                     std::span<const int32_t>, ForwardTrace<double>*);
template double loss_and_grads<float>(const ModelWeights<float>&,
                                      const SequenceExample<float>&, GradMap<float>&,
                                      Mat<float>*);
template double loss_and_grads<double>(const ModelWeights<double>&,
                                       const SequenceExample<double>&, GradMap<double>&,
                                       Mat<double>*);
template double loss_only<float>(const ModelWeights<float>&, const SequenceExample<float>&);
template double loss_only<double>(const ModelWeights<double>&,
                                  const SequenceExample<double>&);
template void adam_step<float>(ModelWeights<float>&, const GradMap<float>&,
                               AdamState<float>&, const AdamParams&);
template void adam_step<double>(ModelWeights<double>&, const GradMap<double>&,
                                AdamState<double>&, const AdamParams&);
template double train_step<float>(ModelWeights<float>&,
                                  const std::vector<SequenceExample<float>>&,
                                  AdamState<float>&, const AdamParams&);
template double train_step<double>(ModelWeights<double>&,
                                   const std::vector<SequenceExample<double>>&,
                                   AdamState<double>&, const AdamParams&);
template class DecodeSession<float>;
template class DecodeSession<double>;
template int32_t sample_from_logits<float>(std::span<const float>, double, Rng&,
                                           int32_t, int32_t);
template int32_t sample_from_logits<double>(std::span<const double>, double, Rng&,
                                            int32_t, int32_t);
template std::vector<int32_t> sample<float>(const ModelWeights<float>&, const Mat<float>*,
                                            std::span<const int32_t>,
                                            const SamplingParams&);
template std::vector<int32_t> sample<double>(const ModelWeights<double>&,
                                             const Mat<double>*,
                                             std::span<const int32_t>,
                                             const SamplingParams&);

}  // namespace meow::tfm
