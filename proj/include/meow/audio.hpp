#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "meow/error.hpp"

namespace meow::audio {

constexpr int kDefaultSampleRate = 16000;

// Mono audio in [-1, 1].
struct Waveform {
    std::vector<float> samples;
    int sample_rate = kDefaultSampleRate;

    Waveform() = default;
    Waveform(std::vector<float> s, int sr) : samples(std::move(s)), sample_rate(sr) {}

    size_t size() const { return samples.size(); }
    double duration_s() const {
        return static_cast<double>(samples.size()) / sample_rate;
    }
};

// Throws ValidationError on empty/non-finite samples or bad sample rate.
void validate(const Waveform& w);

// 16-bit PCM mono WAV. Values are clamped to [-1, 1] on write.
void write_wav(const std::string& path, const Waveform& w);
Waveform read_wav(const std::string& path);

}  // namespace meow::audio
