#pragma once

#include <complex>
#include <vector>

#include "meow/audio.hpp"
#include "meow/mat.hpp"

namespace meow::dsp {

// In-place iterative radix-2 FFT; size must be a power of two.
void fft(std::vector<std::complex<double>>& a);

// Orthonormal DCT-II over non-overlapping frames. The basis is built in
// double precision so forward followed by inverse is exact to well below the
// codec's 1e-5 round-trip budget.
class FrameDct {
public:
    explicit FrameDct(size_t frame_size);

    size_t frame_size() const { return frame_size_; }

    // [n_frames x frame_size] coefficients; a trailing partial frame is
    // zero-padded. Throws DomainError on an empty waveform or when the
    // waveform is shorter than one frame.
    MatF forward(const audio::Waveform& w) const;

    // Inverse of forward; returns n_frames * frame_size samples.
    std::vector<float> inverse(const MatF& coeffs) const;

private:
    size_t frame_size_;
    MatD basis_;  // basis_[k][n] = s(k) cos(pi (2n+1) k / (2N))
};

// Spec'd frame transform entry points (one-shot; codec holds a FrameDct).
MatF frame_transform(const audio::Waveform& w, size_t frame_size);
std::vector<float> frame_inverse(const MatF& coeffs, size_t frame_size);

struct MelConfig {
    int sample_rate = audio::kDefaultSampleRate;
    size_t n_bands = 64;
    size_t win = 640;  // 40 ms at 16 kHz
    size_t hop = 640;  // hop == win -> exactly 25 frames/s
    double fmin = 0.0;
    double fmax = 8000.0;
    double log_floor = 1e-10;
};

// Triangular mel-scale filterbank over Hann-windowed power spectra, log
// compressed. Frame count is floor((len - win) / hop) + 1.
class MelFilterbank {
public:
    explicit MelFilterbank(const MelConfig& cfg);

    const MelConfig& config() const { return cfg_; }
    size_t frame_count(size_t n_samples) const;
    double band_center_hz(size_t band) const { return centers_hz_[band]; }

    // [T x n_bands] log mel energies. Throws DomainError if the clip is
    // shorter than one window.
    MatF log_mel_frames(const audio::Waveform& w) const;

private:
    MelConfig cfg_;
    size_t fft_size_;
    std::vector<double> window_;
    MatD weights_;  // [n_bands x (fft_size/2 + 1)]
    std::vector<double> centers_hz_;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

}  // namespace meow::dsp
