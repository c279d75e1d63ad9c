#include "meow/evalsuite.hpp"

#include <algorithm>
#include <cmath>

#include "meow/dsp.hpp"
#include "meow/error.hpp"
#include "meow/kernels.hpp"
#include "meow/rng.hpp"

namespace meow::metrics {

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric matrix (double, row-major).
// Small dimensions only (<= a few hundred); plenty for 128-d embeddings.
void jacobi_eigh(MatD a, std::vector<double>& eigenvalues, MatD* eigenvectors) {
    const size_t n = a.rows;
    MatD v(n, n);
    for (size_t i = 0; i < n; ++i) v.at(i, i) = 1.0;

    for (size_t sweep = 0; sweep < 128; ++sweep) {
        double off = 0.0;
        for (size_t p = 0; p < n; ++p) {
            for (size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        }
        if (off < 1e-24) break;
        for (size_t p = 0; p < n; ++p) {
            for (size_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double app = a.at(p, p);
                const double aqq = a.at(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (size_t i = 0; i < n; ++i) {
                    const double aip = a.at(i, p);
                    const double aiq = a.at(i, q);
                    a.at(i, p) = c * aip - s * aiq;
                    a.at(i, q) = s * aip + c * aiq;
                }
                for (size_t i = 0; i < n; ++i) {
                    const double api = a.at(p, i);
                    const double aqi = a.at(q, i);
                    a.at(p, i) = c * api - s * aqi;
                    a.at(q, i) = s * api + c * aqi;
                }
                for (size_t i = 0; i < n; ++i) {
                    const double vip = v.at(i, p);
                    const double viq = v.at(i, q);
                    v.at(i, p) = c * vip - s * viq;
                    v.at(i, q) = s * vip + c * viq;
                }
            }
        }
    }
    eigenvalues.resize(n);
    for (size_t i = 0; i < n; ++i) eigenvalues[i] = a.at(i, i);
    if (eigenvectors) *eigenvectors = std::move(v);
}

// B = V diag(sqrt(max(lambda, 0))) V^T
MatD psd_sqrt(const MatD& a) {
    std::vector<double> lam;
    MatD v;
    jacobi_eigh(a, lam, &v);
    const size_t n = a.rows;
    MatD scaled(n, n);  // V * diag(sqrt(lam))
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < n; ++j) {
            scaled.at(i, j) = v.at(i, j) * std::sqrt(std::max(lam[j], 0.0));
        }
    }
    MatD out(n, n);
    kernels::matmul_nt(scaled.v.data(), v.v.data(), out.v.data(), n, n, n);
    return out;
}

struct Gaussian {
    std::vector<double> mean;
    MatD cov;
};

Gaussian fit_gaussian(const EmbeddingSet& set) {
    const size_t m = set.vectors.rows;
    const size_t d = set.vectors.cols;
    if (m < 2) {
        throw DomainError("frechet_distance: need at least 2 vectors per set");
    }
    Gaussian g;
    g.mean.assign(d, 0.0);
    for (size_t i = 0; i < m; ++i) {
        const float* row = set.vectors.row(i);
        for (size_t j = 0; j < d; ++j) g.mean[j] += row[j];
    }
    for (auto& x : g.mean) x /= static_cast<double>(m);
    g.cov = MatD(d, d);
    MatD centered(m, d);
    for (size_t i = 0; i < m; ++i) {
        const float* row = set.vectors.row(i);
        for (size_t j = 0; j < d; ++j) centered.at(i, j) = double(row[j]) - g.mean[j];
    }
    kernels::matmul_tn(centered.v.data(), centered.v.data(), g.cov.v.data(), d, m, d);
    const double inv = 1.0 / static_cast<double>(m - 1);
    for (auto& x : g.cov.v) x *= inv;
    for (size_t j = 0; j < d; ++j) g.cov.at(j, j) += 1e-6;
    return g;
}

}  // namespace

double frechet_distance(const EmbeddingSet& ref, const EmbeddingSet& gen) {
    if (ref.vectors.cols != gen.vectors.cols) {
        throw ShapeError("frechet_distance: embedding dimensions differ");
    }
    const size_t d = ref.vectors.cols;
    const Gaussian a = fit_gaussian(ref);
    const Gaussian b = fit_gaussian(gen);

    double mean_term = 0.0;
    for (size_t j = 0; j < d; ++j) {
        const double diff = a.mean[j] - b.mean[j];
        mean_term += diff * diff;
    }
    double trace_a = 0.0, trace_b = 0.0;
    for (size_t j = 0; j < d; ++j) {
        trace_a += a.cov.at(j, j);
        trace_b += b.cov.at(j, j);
    }

    // Tr((S1 S2)^1/2) via the symmetric form sqrt(sqrt(S1) S2 sqrt(S1)).
    const MatD sqrt_a = psd_sqrt(a.cov);
    MatD tmp(d, d), inner(d, d);
    kernels::matmul_nn(sqrt_a.v.data(), b.cov.v.data(), tmp.v.data(), d, d, d);
    kernels::matmul_nn(tmp.v.data(), sqrt_a.v.data(), inner.v.data(), d, d, d);
    // Symmetrize against round-off before the eigen solve.
    for (size_t i = 0; i < d; ++i) {
        for (size_t j = i + 1; j < d; ++j) {
            const double s = 0.5 * (inner.at(i, j) + inner.at(j, i));
            inner.at(i, j) = s;
            inner.at(j, i) = s;
        }
    }
    std::vector<double> lam;
    jacobi_eigh(inner, lam, nullptr);
    double trace_sqrt = 0.0;
    for (double l : lam) trace_sqrt += std::sqrt(std::max(l, 0.0));

    return mean_term + trace_a + trace_b - 2.0 * trace_sqrt;
}

double kl_divergence(const ClassProbabilities& ref, const ClassProbabilities& gen) {
    if (ref.size() != gen.size()) {
        throw ShapeError("kl_divergence: ref and gen clip counts differ");
    }
    if (ref.empty()) throw DomainError("kl_divergence: no clips");
    double total = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) {
        const auto& p_raw = ref[i];
        const auto& q_raw = gen[i];
        if (p_raw.size() != q_raw.size()) {
            throw ShapeError("kl_divergence: class counts differ at clip " +
                             std::to_string(i));
        }
        auto floor_renorm = [](const std::vector<double>& in) {
            std::vector<double> out(in.size());
            double sum = 0.0;
            for (size_t c = 0; c < in.size(); ++c) {
                if (in[c] < 0.0) {
                    throw ValidationError("kl_divergence: negative probability");
                }
                out[c] = std::max(in[c], 1e-9);
                sum += out[c];
            }
            for (auto& x : out) x /= sum;
            return out;
        };
        const auto p = floor_renorm(p_raw);
        const auto q = floor_renorm(q_raw);
        double kl = 0.0;
        for (size_t c = 0; c < p.size(); ++c) kl += p[c] * std::log(p[c] / q[c]);
        total += kl;
    }
    return total / static_cast<double>(ref.size());
}

double cycle_consistency(const MatF& gen, const MatF& ref) {
    if (gen.rows != ref.rows || gen.cols != ref.cols) {
        throw ShapeError("cycle_consistency: paired lists must match in shape");
    }
    if (gen.rows == 0) throw DomainError("cycle_consistency: empty lists");
    double total = 0.0;
    for (size_t i = 0; i < gen.rows; ++i) {
        const double dot = kernels::dot(gen.row(i), ref.row(i), gen.cols);
        const double na = std::sqrt(double(kernels::dot(gen.row(i), gen.row(i), gen.cols)));
        const double nb = std::sqrt(double(kernels::dot(ref.row(i), ref.row(i), ref.cols)));
        if (na == 0.0 || nb == 0.0) {
            throw DomainError("cycle_consistency: zero-norm embedding at pair " +
                              std::to_string(i));
        }
        total += dot / (na * nb);
    }
    return total / static_cast<double>(gen.rows);
}

std::vector<double> onset_envelope(const audio::Waveform& w, const BeatConfig& cfg) {
    dsp::MelConfig mel;
    mel.sample_rate = w.sample_rate;
    mel.n_bands = cfg.n_bands;
    mel.win = cfg.win;
    mel.hop = cfg.hop;
    mel.log_floor = cfg.log_floor;
    const dsp::MelFilterbank bank(mel);
    const MatF frames = bank.log_mel_frames(w);
    std::vector<double> flux(frames.rows, 0.0);
    for (size_t t = 1; t < frames.rows; ++t) {
        double f = 0.0;
        for (size_t b = 0; b < frames.cols; ++b) {
            f += std::max(0.0, double(frames.at(t, b)) - double(frames.at(t - 1, b)));
        }
        flux[t] = f / static_cast<double>(frames.cols);
    }
    if (cfg.smooth_frames > 1) {
        std::vector<double> smoothed(flux.size(), 0.0);
        const long half = static_cast<long>(cfg.smooth_frames / 2);
        for (long t = 0; t < static_cast<long>(flux.size()); ++t) {
            double acc = 0.0;
            size_t n = 0;
            for (long j = t - half; j <= t + half; ++j) {
                if (j < 0 || j >= static_cast<long>(flux.size())) continue;
                acc += flux[j];
                ++n;
            }
            smoothed[t] = acc / static_cast<double>(n);
        }
        flux = std::move(smoothed);
    }
    return flux;
}

BeatList detect_beats(const audio::Waveform& w, const BeatConfig& cfg) {
    if (w.duration_s() < 1.0) {
        throw DomainError("detect_beats: clip must be at least 1 s long");
    }
    const std::vector<double> flux = onset_envelope(w, cfg);
    const double fps = static_cast<double>(w.sample_rate) / cfg.hop;

    double peak = 0.0;
    for (double f : flux) peak = std::max(peak, f);
    BeatList beats;
    if (peak <= 0.0) return beats;

    const double delta = cfg.delta_frac * peak;
    const auto half_win = static_cast<size_t>(cfg.local_window_s * fps / 2.0);
    const auto min_gap = cfg.min_gap_s;

    double last_beat = -1e9;
    for (size_t t = 1; t + 1 < flux.size(); ++t) {
        if (flux[t] < flux[t - 1] || flux[t] < flux[t + 1]) continue;
        const size_t lo = t > half_win ? t - half_win : 0;
        const size_t hi = std::min(flux.size(), t + half_win + 1);
        double local_mean = 0.0;
        for (size_t i = lo; i < hi; ++i) local_mean += flux[i];
        local_mean /= static_cast<double>(hi - lo);
        if (flux[t] <= local_mean + delta) continue;
        const double time =
            (static_cast<double>(t) * cfg.hop + cfg.win / 2.0) / w.sample_rate;
        if (time - last_beat < min_gap) continue;
        beats.times_s.push_back(time);
        last_beat = time;
    }
    return beats;
}

double harmonic_f1(double bcs, double bhs) {
    return (bcs + bhs) > 0.0 ? 2.0 * bcs * bhs / (bcs + bhs) : 0.0;
}

BeatScores beat_alignment(const BeatList& gen, const BeatList& ref,
                          double tolerance_s) {
    if (tolerance_s <= 0.0) throw DomainError("beat_alignment: tolerance must be > 0");
    if (ref.times_s.empty()) {
        throw UndefinedMetricError("beat_alignment: reference beat list is empty");
    }
    std::vector<bool> used(ref.times_s.size(), false);
    size_t matched = 0;
    for (const double g : gen.times_s) {
        long best = -1;
        double best_d = tolerance_s;
        for (size_t r = 0; r < ref.times_s.size(); ++r) {
            if (used[r]) continue;
            const double d = std::abs(ref.times_s[r] - g);
            if (d <= best_d) {
                best_d = d;
                best = static_cast<long>(r);
            }
        }
        if (best >= 0) {
            used[static_cast<size_t>(best)] = true;
            ++matched;
        }
    }
    BeatScores s;
    s.matched = matched;
    s.raw_coverage = 100.0 * static_cast<double>(gen.times_s.size()) /
                     static_cast<double>(ref.times_s.size());
    s.bcs = std::min(100.0, s.raw_coverage);
    s.bhs = 100.0 * static_cast<double>(matched) /
            static_cast<double>(ref.times_s.size());
    s.f1 = harmonic_f1(s.bcs, s.bhs);
    return s;
}

double estimate_tempo_bpm(const audio::Waveform& w, double fold_lo, double fold_hi,
                          const BeatConfig& cfg) {
    const BeatList beats = detect_beats(w, cfg);
    if (beats.times_s.size() < 2) return 0.0;
    std::vector<double> intervals;
    intervals.reserve(beats.times_s.size() - 1);
    for (size_t i = 1; i < beats.times_s.size(); ++i) {
        intervals.push_back(beats.times_s[i] - beats.times_s[i - 1]);
    }
    std::sort(intervals.begin(), intervals.end());
    const double median = intervals[intervals.size() / 2];
    double bpm = 60.0 / median;
    while (bpm < fold_lo) bpm *= 2.0;
    while (bpm >= fold_hi) bpm *= 0.5;
    return bpm;
}

ClipEmbedder::ClipEmbedder() {
    // Random Gaussian matrix with Gram-Schmidt orthonormalized columns; the
    // projection is fixed across runs.
    Rng rng(0x0e5bedde);
    const size_t n_bands = 64;
    projection_ = MatF(kDim, n_bands);
    MatD cols(n_bands, kDim);  // work column-major as rows
    for (auto& x : cols.v) x = rng.normal();
    for (size_t c = 0; c < n_bands; ++c) {
        double* col = cols.row(c);
        for (size_t p = 0; p < c; ++p) {
            const double* prev = cols.row(p);
            const double proj = kernels::dot(col, prev, kDim);
            for (size_t i = 0; i < kDim; ++i) col[i] -= proj * prev[i];
        }
        const double norm = std::sqrt(kernels::dot(col, col, kDim));
        for (size_t i = 0; i < kDim; ++i) col[i] /= norm;
    }
    for (size_t i = 0; i < kDim; ++i) {
        for (size_t c = 0; c < n_bands; ++c) {
            projection_.at(i, c) = static_cast<float>(cols.at(c, i));
        }
    }
}

std::vector<float> ClipEmbedder::embed(const audio::Waveform& w) const {
    dsp::MelConfig mel;
    mel.sample_rate = w.sample_rate;
    mel.n_bands = projection_.cols;
    mel.win = 640;
    mel.hop = 640;
    const dsp::MelFilterbank bank(mel);
    const MatF frames = bank.log_mel_frames(w);
    std::vector<float> mean(projection_.cols, 0.0f);
    for (size_t t = 0; t < frames.rows; ++t) {
        kernels::axpy(1.0f, frames.row(t), mean.data(), mean.size());
    }
    kernels::scale(1.0f / static_cast<float>(frames.rows), mean.data(), mean.size());
    std::vector<float> out(kDim);
    for (size_t i = 0; i < kDim; ++i) {
        out[i] = kernels::dot(projection_.row(i), mean.data(), mean.size());
    }
    return out;
}

MatF ClipEmbedder::embed_all(const std::vector<audio::Waveform>& clips) const {
    MatF out(clips.size(), kDim);
    kernels::parallel_for(clips.size(), [&](size_t b, size_t e) {
        for (size_t i = b; i < e; ++i) {
            const auto v = embed(clips[i]);
            std::copy(v.begin(), v.end(), out.row(i));
        }
    });
    return out;
}

ClassProbabilities soft_class_probabilities(const MatF& embeddings, const MatF& anchors,
                                            double tau2) {
    if (embeddings.cols != anchors.cols) {
        throw ShapeError("soft_class_probabilities: dimension mismatch");
    }
    if (tau2 <= 0.0) throw DomainError("soft_class_probabilities: tau2 must be > 0");
    ClassProbabilities out(embeddings.rows);
    for (size_t i = 0; i < embeddings.rows; ++i) {
        std::vector<double> logit(anchors.rows);
        double mx = -1e300;
        for (size_t c = 0; c < anchors.rows; ++c) {
            logit[c] = -double(kernels::l2sq(embeddings.row(i), anchors.row(c),
                                             anchors.cols)) /
                       tau2;
            mx = std::max(mx, logit[c]);
        }
        double sum = 0.0;
        for (auto& l : logit) {
            l = std::exp(l - mx);
            sum += l;
        }
        for (auto& l : logit) l /= sum;
        out[i] = std::move(logit);
    }
    return out;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) {
        throw ShapeError("pearson: need two equal-length series of length >= 2");
    }
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) {
        throw DomainError("pearson: a series is constant");
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace meow::metrics
