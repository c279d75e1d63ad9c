#include "meow/dsp.hpp"

#include <cmath>

#include "meow/kernels.hpp"

namespace meow::dsp {

void fft(std::vector<std::complex<double>>& a) {
    const size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) {
        throw DomainError("fft size must be a power of two");
    }
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / static_cast<double>(len);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

FrameDct::FrameDct(size_t frame_size) : frame_size_(frame_size) {
    if (frame_size == 0) throw DomainError("frame_size must be >= 1");
    const double n = static_cast<double>(frame_size);
    basis_ = MatD(frame_size, frame_size);
    for (size_t k = 0; k < frame_size; ++k) {
        const double s = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        for (size_t j = 0; j < frame_size; ++j) {
            basis_.at(k, j) =
                s * std::cos(M_PI * (2.0 * j + 1.0) * k / (2.0 * n));
        }
    }
}

MatF FrameDct::forward(const audio::Waveform& w) const {
    if (w.samples.empty()) throw DomainError("frame_transform: empty waveform");
    if (w.samples.size() < frame_size_) {
        throw DomainError("frame_transform: waveform shorter than one frame");
    }
    const size_t n_frames = (w.samples.size() + frame_size_ - 1) / frame_size_;
    MatD frames(n_frames, frame_size_);
    for (size_t t = 0; t < n_frames; ++t) {
        for (size_t j = 0; j < frame_size_; ++j) {
            const size_t idx = t * frame_size_ + j;
            frames.at(t, j) = idx < w.samples.size() ? w.samples[idx] : 0.0;
        }
    }
    MatD coeffs(n_frames, frame_size_);
    kernels::matmul_nt(frames.v.data(), basis_.v.data(), coeffs.v.data(), n_frames,
                       frame_size_, frame_size_);
    MatF out(n_frames, frame_size_);
    for (size_t i = 0; i < coeffs.size(); ++i) out.v[i] = static_cast<float>(coeffs.v[i]);
    return out;
}

std::vector<float> FrameDct::inverse(const MatF& coeffs) const {
    if (coeffs.cols != frame_size_) {
        throw ShapeError("frame_inverse: coefficient width != frame_size");
    }
    MatD cd(coeffs.rows, coeffs.cols);
    for (size_t i = 0; i < coeffs.size(); ++i) cd.v[i] = coeffs.v[i];
    MatD samples(coeffs.rows, frame_size_);
    kernels::matmul_nn(cd.v.data(), basis_.v.data(), samples.v.data(), coeffs.rows,
                       frame_size_, frame_size_);
    std::vector<float> out(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) out[i] = static_cast<float>(samples.v[i]);
    return out;
}

MatF frame_transform(const audio::Waveform& w, size_t frame_size) {
    return FrameDct(frame_size).forward(w);
}

std::vector<float> frame_inverse(const MatF& coeffs, size_t frame_size) {
    return FrameDct(frame_size).inverse(coeffs);
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank::MelFilterbank(const MelConfig& cfg) : cfg_(cfg) {
    if (cfg.n_bands == 0 || cfg.win == 0 || cfg.hop == 0) {
        throw ConfigError("mel filterbank: n_bands, win and hop must be positive");
    }
    fft_size_ = 1;
    while (fft_size_ < cfg.win) fft_size_ <<= 1;
    window_.resize(cfg.win);
    for (size_t i = 0; i < cfg.win; ++i) {
        window_[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) /
                                          static_cast<double>(cfg.win - 1));
    }
    const size_t n_bins = fft_size_ / 2 + 1;
    weights_ = MatD(cfg.n_bands, n_bins);
    centers_hz_.resize(cfg.n_bands);

    const double mel_lo = hz_to_mel(cfg.fmin);
    const double mel_hi = hz_to_mel(cfg.fmax);
    std::vector<double> edges(cfg.n_bands + 2);
    for (size_t i = 0; i < edges.size(); ++i) {
        edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                          static_cast<double>(cfg.n_bands + 1));
    }
    for (size_t m = 0; m < cfg.n_bands; ++m) {
        const double f0 = edges[m], f1 = edges[m + 1], f2 = edges[m + 2];
        centers_hz_[m] = f1;
        for (size_t b = 0; b < n_bins; ++b) {
            const double f = static_cast<double>(b) * cfg.sample_rate /
                             static_cast<double>(fft_size_);
            double wgt = 0.0;
            if (f > f0 && f < f1) {
                wgt = (f - f0) / (f1 - f0);
            } else if (f >= f1 && f < f2) {
                wgt = (f2 - f) / (f2 - f1);
            }
            weights_.at(m, b) = wgt;
        }
    }
}

size_t MelFilterbank::frame_count(size_t n_samples) const {
    if (n_samples < cfg_.win) return 0;
    return (n_samples - cfg_.win) / cfg_.hop + 1;
}

MatF MelFilterbank::log_mel_frames(const audio::Waveform& w) const {
    const size_t n_frames = frame_count(w.samples.size());
    if (n_frames == 0) {
        throw DomainError("log_mel_frames: clip shorter than one analysis window");
    }
    const size_t n_bins = fft_size_ / 2 + 1;
    MatF out(n_frames, cfg_.n_bands);
    std::vector<std::complex<double>> buf(fft_size_);
    std::vector<double> power(n_bins);
    for (size_t t = 0; t < n_frames; ++t) {
        const float* x = w.samples.data() + t * cfg_.hop;
        for (size_t i = 0; i < cfg_.win; ++i) buf[i] = {x[i] * window_[i], 0.0};
        for (size_t i = cfg_.win; i < fft_size_; ++i) buf[i] = {0.0, 0.0};
        fft(buf);
        for (size_t b = 0; b < n_bins; ++b) power[b] = std::norm(buf[b]);
        for (size_t m = 0; m < cfg_.n_bands; ++m) {
            const double e =
                kernels::dot(weights_.row(m), power.data(), n_bins);
            out.at(t, m) = static_cast<float>(std::log(e + cfg_.log_floor));
        }
    }
    return out;
}

}  // namespace meow::dsp
