#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "midialign/errors.hpp"
#include "midialign/features.hpp"

namespace midialign {

namespace {

std::uint32_t le32(const std::uint8_t* p) { return p[0] | p[1] << 8 | p[2] << 16 | static_cast<std::uint32_t>(p[3]) << 24; }
std::uint16_t le16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | p[1] << 8); }

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xfffe;

}  // namespace

AudioBuffer read_wav(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open WAV file " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        throw ParseError("not a RIFF/WAVE file", 0);

    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    const std::uint8_t* data = nullptr;
    std::size_t data_len = 0;
    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const std::uint8_t* chunk = bytes.data() + pos;
        std::size_t len = le32(chunk + 4);
        const std::size_t body = pos + 8;
        if (body + len > bytes.size()) {
            if (std::memcmp(chunk, "data", 4) != 0) throw ParseError("chunk overruns file", pos);
            len = bytes.size() - body;  // tolerate truncated streams
        }
        if (std::memcmp(chunk, "fmt ", 4) == 0) {
            if (len < 16) throw ParseError("fmt chunk too short", pos);
            format = le16(bytes.data() + body);
            channels = le16(bytes.data() + body + 2);
            rate = le32(bytes.data() + body + 4);
            bits = le16(bytes.data() + body + 14);
            if (format == kFormatExtensible) {
                if (len < 26) throw ParseError("extensible fmt chunk too short", pos);
                format = le16(bytes.data() + body + 24);
            }
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            data = bytes.data() + body;
            data_len = len;
        }
        pos = body + len + (len & 1);
    }
    if (!channels || !rate) throw ParseError("missing fmt chunk", 12);
    if (!data) throw ParseError("missing data chunk", 12);

    const bool pcm = format == kFormatPcm && (bits == 8 || bits == 16 || bits == 24 || bits == 32);
    const bool flt = format == kFormatFloat && bits == 32;
    if (!pcm && !flt)
        throw ParseError("unsupported WAV encoding (format " + std::to_string(format) + ", " + std::to_string(bits) + " bits)", 20);

    const std::size_t bytes_per_sample = bits / 8;
    const std::size_t frame_bytes = bytes_per_sample * channels;
    const std::size_t n_frames = data_len / frame_bytes;
    AudioBuffer audio;
    audio.sample_rate = rate;
    audio.samples.resize(n_frames);
    for (std::size_t f = 0; f < n_frames; ++f) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
            const std::uint8_t* p = data + f * frame_bytes + c * bytes_per_sample;
            double v = 0.0;
            if (flt) {
                float x;
                std::memcpy(&x, p, 4);
                v = x;
            } else if (bits == 8) {
                v = (static_cast<int>(p[0]) - 128) / 128.0;
            } else if (bits == 16) {
                v = static_cast<std::int16_t>(le16(p)) / 32768.0;
            } else if (bits == 24) {
                std::int32_t x = p[0] | p[1] << 8 | p[2] << 16;
                if (x & 0x800000) x -= 0x1000000;
                v = x / 8388608.0;
            } else {
                v = static_cast<std::int32_t>(le32(p)) / 2147483648.0;
            }
            acc += v;
        }
        const float s = static_cast<float>(acc / channels);
        audio.samples[f] = std::isfinite(s) ? s : 0.0f;
    }
    return audio;
}

void write_wav(const AudioBuffer& audio, const std::filesystem::path& path) {
    const std::uint32_t rate = static_cast<std::uint32_t>(std::lround(audio.sample_rate));
    const std::uint32_t data_len = static_cast<std::uint32_t>(audio.samples.size() * 2);
    std::vector<std::uint8_t> out;
    out.reserve(44 + data_len);
    auto put32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    };
    auto put16 = [&](std::uint16_t v) {
        out.push_back(static_cast<std::uint8_t>(v));
        out.push_back(static_cast<std::uint8_t>(v >> 8));
    };
    auto tag = [&](const char* t) { out.insert(out.end(), t, t + 4); };
    tag("RIFF");
    put32(36 + data_len);
    tag("WAVE");
    tag("fmt ");
    put32(16);
    put16(kFormatPcm);
    put16(1);
    put32(rate);
    put32(rate * 2);
    put16(2);
    put16(16);
    tag("data");
    put32(data_len);
    for (float s : audio.samples) {
        const long v = std::lround(std::clamp(static_cast<double>(s), -1.0, 1.0) * 32767.0);
        put16(static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write WAV file " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("error writing " + path.string());
}

}  // namespace midialign
