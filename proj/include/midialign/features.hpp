#pragma once

#include <filesystem>
#include <string_view>
#include <utility>
#include <vector>

#include "midialign/matrix.hpp"
#include "midialign/symbolic.hpp"

namespace midialign {

inline constexpr double kPipelineSampleRate = 16000.0;

struct AudioBuffer {
    std::vector<float> samples;
    double sample_rate = kPipelineSampleRate;

    double duration() const { return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0; }
};

enum class FeatureKind { cqt, mel, chroma, dlnco, roll };

std::string_view to_string(FeatureKind kind);
FeatureKind feature_kind_from_string(std::string_view name);

/// Frame x bin feature matrix. Frame r covers [r/fps, (r+1)/fps).
struct FeatureMatrix {
    Matrix<float> values;
    double fps = 100.0;
    FeatureKind kind = FeatureKind::cqt;

    std::size_t num_frames() const { return values.rows(); }
    std::size_t num_bins() const { return values.cols(); }
};

// --- WAV -------------------------------------------------------------------

/// PCM 16-bit or IEEE float 32-bit; multi-channel input is mixed to mono.
AudioBuffer read_wav(const std::filesystem::path& path);
/// Mono PCM 16-bit.
void write_wav(const AudioBuffer& audio, const std::filesystem::path& path);

// --- Signal processing -------------------------------------------------------

/// Windowed-sinc band-limited resampling.
AudioBuffer resample(const AudioBuffer& audio, double target_rate = kPipelineSampleRate);

struct CqtParams {
    std::size_t hop = 160;
    int bins = kPitchCount;
    int bins_per_octave = 12;
    double fmin = 27.5;
};

/// Center frequency of CQT bin k.
double cqt_center_frequency(const CqtParams& params, int bin);

/// Constant-Q magnitude spectrogram, ceil(len / hop) frames. Windows are
/// centered on the middle of each frame; audio is zero-extended as needed.
FeatureMatrix compute_cqt(const AudioBuffer& audio, const CqtParams& params = {});

namespace serial {
/// Single-threaded reference for compute_cqt.
FeatureMatrix compute_cqt(const AudioBuffer& audio, const CqtParams& params = {});
}  // namespace serial

struct MelParams {
    std::size_t hop = 160;
    int bands = kPitchCount;
    double fmin = 27.5;
    double fmax = 8000.0;
    std::size_t n_fft = 2048;
};

/// Mel-band magnitude spectrogram with the same frame grid as compute_cqt.
FeatureMatrix compute_mel(const AudioBuffer& audio, const MelParams& params = {});

inline constexpr double kLogScaleGamma = 10.0;

/// Elementwise log(1 + gamma * x). Throws ArgumentError on negative input.
FeatureMatrix log_scale(const FeatureMatrix& feat, double gamma = kLogScaleGamma);

/// Zero-pads both inputs at the end to a common frame count.
std::pair<PianoRoll, FeatureMatrix> pad_pair(const PianoRoll& roll, const FeatureMatrix& feat);

/// Binary roll as a real-valued matrix of kind `roll`.
FeatureMatrix roll_to_features(const PianoRoll& roll);

/// Averages groups of `factor` consecutive frames; a trailing partial group
/// is averaged over its own length.
FeatureMatrix downsample_frames(const FeatureMatrix& feat, std::size_t factor);

// --- Test synthesizer --------------------------------------------------------

struct SynthParams {
    int harmonics = 4;
    double decay_seconds = 0.3;
    double attack_seconds = 0.005;
    double release_seconds = 0.005;
    double peak = 0.5;
};

/// Deterministic additive piano stand-in: equal-tempered harmonics with an
/// exponential decay, amplitude proportional to velocity, peak-normalized.
AudioBuffer render_notes_to_audio(const NoteSequence& seq, double sample_rate = kPipelineSampleRate,
                                  const SynthParams& params = {});

}  // namespace midialign
