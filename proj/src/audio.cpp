#include "meow/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace meow::audio {

void validate(const Waveform& w) {
    if (w.samples.empty()) throw ValidationError("waveform is empty");
    if (w.sample_rate <= 0) throw ValidationError("waveform sample_rate must be > 0");
    for (float s : w.samples) {
        if (!std::isfinite(s)) throw ValidationError("waveform contains non-finite sample");
    }
}

namespace {

void put_u32(std::string& out, uint32_t v) {
    char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
                 char((v >> 24) & 0xff)};
    out.append(b, 4);
}

void put_u16(std::string& out, uint16_t v) {
    char b[2] = {char(v & 0xff), char((v >> 8) & 0xff)};
    out.append(b, 2);
}

uint32_t get_u32(const uint8_t* p) {
    return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
           uint32_t(p[3]) << 24;
}

uint16_t get_u16(const uint8_t* p) { return uint16_t(p[0]) | uint16_t(p[1]) << 8; }

}  // namespace

void write_wav(const std::string& path, const Waveform& w) {
    validate(w);
    const uint32_t n = static_cast<uint32_t>(w.samples.size());
    const uint32_t data_bytes = n * 2;
    std::string out;
    out.reserve(44 + data_bytes);
    out.append("RIFF");
    put_u32(out, 36 + data_bytes);
    out.append("WAVEfmt ");
    put_u32(out, 16);
    put_u16(out, 1);  // PCM
    put_u16(out, 1);  // mono
    put_u32(out, static_cast<uint32_t>(w.sample_rate));
    put_u32(out, static_cast<uint32_t>(w.sample_rate) * 2);
    put_u16(out, 2);   // block align
    put_u16(out, 16);  // bits per sample
    out.append("data");
    put_u32(out, data_bytes);
    for (float s : w.samples) {
        const float c = std::clamp(s, -1.0f, 1.0f);
        const int v = static_cast<int>(std::lrintf(c * 32767.0f));
        put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(v)));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed: " + path);
}

Waveform read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw IoError("not a RIFF/WAVE file: " + path);
    }
    size_t pos = 12;
    int sr = 0;
    int channels = 0;
    int bits = 0;
    bool fmt_seen = false;
    while (pos + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
        const uint32_t sz = get_u32(bytes.data() + pos + 4);
        const size_t body = pos + 8;
        if (body + sz > bytes.size()) throw IoError("truncated WAV chunk: " + path);
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (sz < 16) throw IoError("bad fmt chunk: " + path);
            const uint16_t format = get_u16(bytes.data() + body);
            channels = get_u16(bytes.data() + body + 2);
            sr = static_cast<int>(get_u32(bytes.data() + body + 4));
            bits = get_u16(bytes.data() + body + 14);
            if (format != 1) throw IoError("only PCM WAV supported: " + path);
            fmt_seen = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            if (!fmt_seen) throw IoError("data chunk before fmt: " + path);
            if (channels != 1) throw IoError("only mono WAV supported: " + path);
            if (bits != 16) throw IoError("only 16-bit WAV supported: " + path);
            const size_t n = sz / 2;
            Waveform w;
            w.sample_rate = sr;
            w.samples.resize(n);
            for (size_t i = 0; i < n; ++i) {
                const int16_t v =
                    static_cast<int16_t>(get_u16(bytes.data() + body + 2 * i));
                w.samples[i] = static_cast<float>(v) / 32767.0f;
            }
            return w;
        }
        pos = body + sz + (sz & 1);
    }
    throw IoError("no data chunk in WAV: " + path);
}

}  // namespace meow::audio
