#pragma once

// Minimal RIFF/WAVE reader and writer: mono, 16 kHz, PCM16 or IEEE float32.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "bnnser/errors.hpp"

namespace bnnser {

inline constexpr std::uint32_t kSampleRate = 16000;

enum class WavFormat { pcm16, float32 };

namespace detail {

static_assert(std::endian::native == std::endian::little, "WAV I/O assumes a little-endian host");

template <class T>
T read_le(const unsigned char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

template <class T>
void put_le(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

}  // namespace detail

inline void write_wav(const std::filesystem::path& path, std::span<const float> samples, WavFormat fmt = WavFormat::float32,
                      std::uint32_t rate = kSampleRate) {
    const std::uint16_t bits = fmt == WavFormat::pcm16 ? 16 : 32;
    const std::uint16_t tag = fmt == WavFormat::pcm16 ? 1 : 3;
    const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * (bits / 8));
    std::string out;
    out.reserve(44 + data_bytes);
    out += "RIFF";
    detail::put_le<std::uint32_t>(out, 36 + data_bytes);
    out += "WAVEfmt ";
    detail::put_le<std::uint32_t>(out, 16);
    detail::put_le<std::uint16_t>(out, tag);
    detail::put_le<std::uint16_t>(out, 1);
    detail::put_le<std::uint32_t>(out, rate);
    detail::put_le<std::uint32_t>(out, rate * (bits / 8));
    detail::put_le<std::uint16_t>(out, bits / 8);
    detail::put_le<std::uint16_t>(out, bits);
    out += "data";
    detail::put_le<std::uint32_t>(out, data_bytes);
    for (float s : samples) {
        if (fmt == WavFormat::float32) {
            detail::put_le<float>(out, s);
        } else {
            const double c = std::max(-1.0, std::min(1.0, static_cast<double>(s)));
            const long q = std::lround(c * 32768.0);
            detail::put_le<std::int16_t>(out, static_cast<std::int16_t>(std::max(-32768L, std::min(32767L, q))));
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("failed writing " + path.string());
}

/// Reads a mono 16 kHz PCM16 or float32 file; PCM16 is scaled by 1/32768.
inline std::vector<float> load_wav(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open wav file " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const std::string where = path.filename().string() + ": ";
    if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
        throw FormatError(where + "malformed header: not a RIFF/WAVE file");

    bool have_fmt = false;
    std::uint16_t tag = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    std::size_t pos = 12;
    while (pos + 8 <= buf.size()) {
        const std::string id(reinterpret_cast<const char*>(buf.data() + pos), 4);
        const std::uint32_t size = detail::read_le<std::uint32_t>(buf.data() + pos + 4);
        const std::size_t body = pos + 8;
        if (id == "fmt ") {
            if (size < 16 || body + size > buf.size()) throw FormatError(where + "malformed header: truncated fmt chunk");
            tag = detail::read_le<std::uint16_t>(buf.data() + body);
            channels = detail::read_le<std::uint16_t>(buf.data() + body + 2);
            rate = detail::read_le<std::uint32_t>(buf.data() + body + 4);
            bits = detail::read_le<std::uint16_t>(buf.data() + body + 14);
            if (tag == 0xFFFE) {  // WAVE_FORMAT_EXTENSIBLE: real tag opens the sub-format GUID
                if (size < 40) throw FormatError(where + "malformed header: short extensible fmt chunk");
                tag = detail::read_le<std::uint16_t>(buf.data() + body + 24);
            }
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw FormatError(where + "malformed header: data chunk before fmt chunk");
            if (channels != 1) throw FormatError(where + "expected 1 channel, found " + std::to_string(channels));
            if (rate != kSampleRate)
                throw FormatError(where + "expected sample rate " + std::to_string(kSampleRate) + " Hz, found " +
                                  std::to_string(rate) + " Hz (no resampling is done)");
            const bool pcm16 = tag == 1 && bits == 16, f32 = tag == 3 && bits == 32;
            if (!pcm16 && !f32)
                throw FormatError(where + "unsupported encoding (format tag " + std::to_string(tag) + ", " +
                                  std::to_string(bits) + " bits); need PCM16 or float32");
            if (body + size > buf.size()) throw FormatError(where + "malformed header: data chunk runs past end of file");
            const std::size_t width = bits / 8;
            std::vector<float> out(size / width);
            for (std::size_t i = 0; i < out.size(); ++i) {
                const unsigned char* p = buf.data() + body + i * width;
                out[i] = pcm16 ? static_cast<float>(detail::read_le<std::int16_t>(p) / 32768.0) : detail::read_le<float>(p);
            }
            return out;
        }
        pos = body + size + (size & 1);
    }
    throw FormatError(where + (have_fmt ? "malformed header: no data chunk" : "malformed header: no fmt chunk"));
}

}  // namespace bnnser
