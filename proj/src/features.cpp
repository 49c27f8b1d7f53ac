#include "midialign/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <string>

#include "midialign/errors.hpp"

namespace midialign {

namespace {

constexpr double kPi = std::numbers::pi;

void check_audio(const AudioBuffer& audio, const char* who) {
    if (!(audio.sample_rate > 0)) throw ArgumentError(std::string(who) + ": sample rate must be positive");
}

std::size_t frames_for(std::size_t n_samples, std::size_t hop) { return (n_samples + hop - 1) / hop; }

double hann(double n, double len) { return 0.5 - 0.5 * std::cos(2.0 * kPi * n / len); }

}  // namespace

std::string_view to_string(FeatureKind kind) {
    switch (kind) {
        case FeatureKind::cqt: return "cqt";
        case FeatureKind::mel: return "mel";
        case FeatureKind::chroma: return "chroma";
        case FeatureKind::dlnco: return "dlnco";
        case FeatureKind::roll: return "roll";
    }
    return "?";
}

FeatureKind feature_kind_from_string(std::string_view name) {
    for (auto k : {FeatureKind::cqt, FeatureKind::mel, FeatureKind::chroma, FeatureKind::dlnco, FeatureKind::roll})
        if (to_string(k) == name) return k;
    throw ConfigError("unknown feature kind '" + std::string(name) + "' (expected cqt|mel|chroma|dlnco|roll)");
}

// --- resampling ----------------------------------------------------------------

AudioBuffer resample(const AudioBuffer& audio, double target_rate) {
    if (!(target_rate > 0)) throw ArgumentError("resample: target rate must be positive");
    check_audio(audio, "resample");
    if (audio.sample_rate == target_rate) return audio;

    const double ratio = target_rate / audio.sample_rate;
    const std::size_t n_in = audio.samples.size();
    const auto n_out = static_cast<std::size_t>(std::llround(static_cast<double>(n_in) * ratio));
    // Cutoff slightly below the lower Nyquist frequency; 16 zero crossings.
    const double cutoff = std::min(1.0, ratio) * 0.95;
    const double half_width = 16.0 / cutoff;

    AudioBuffer out;
    out.sample_rate = target_rate;
    out.samples.resize(n_out);
    const float* x = audio.samples.data();
#pragma omp parallel for schedule(static)
    for (std::size_t n = 0; n < n_out; ++n) {
        const double center = static_cast<double>(n) / ratio;
        const long lo = std::max(0L, static_cast<long>(std::ceil(center - half_width)));
        const long hi = std::min(static_cast<long>(n_in) - 1, static_cast<long>(std::floor(center + half_width)));
        double acc = 0.0;
        for (long m = lo; m <= hi; ++m) {
            const double t = center - static_cast<double>(m);
            const double arg = kPi * cutoff * t;
            const double sinc = std::abs(arg) < 1e-12 ? 1.0 : std::sin(arg) / arg;
            const double w = 0.5 + 0.5 * std::cos(kPi * t / half_width);
            acc += x[m] * cutoff * sinc * w;
        }
        out.samples[n] = static_cast<float>(acc);
    }
    return out;
}

// --- constant-Q transform --------------------------------------------------------

double cqt_center_frequency(const CqtParams& params, int bin) {
    return params.fmin * std::pow(2.0, static_cast<double>(bin) / params.bins_per_octave);
}

namespace {

struct CqtKernel {
    std::vector<float> re, im;  // windowed, normalized by window sum
    std::size_t length;
};

std::vector<CqtKernel> make_cqt_kernels(const CqtParams& p, double sr) {
    const double q = 1.0 / (std::pow(2.0, 1.0 / p.bins_per_octave) - 1.0);
    std::vector<CqtKernel> kernels(static_cast<std::size_t>(p.bins));
    for (int k = 0; k < p.bins; ++k) {
        const double f = cqt_center_frequency(p, k);
        const auto len = static_cast<std::size_t>(std::ceil(q * sr / f));
        CqtKernel& ker = kernels[static_cast<std::size_t>(k)];
        ker.length = len;
        ker.re.resize(len);
        ker.im.resize(len);
        double wsum = 0.0;
        for (std::size_t n = 0; n < len; ++n) wsum += hann(n + 0.5, static_cast<double>(len));
        for (std::size_t n = 0; n < len; ++n) {
            const double w = hann(n + 0.5, static_cast<double>(len)) / wsum;
            const double phase = 2.0 * kPi * f * (static_cast<double>(n) - 0.5 * static_cast<double>(len)) / sr;
            ker.re[n] = static_cast<float>(w * std::cos(phase));
            ker.im[n] = static_cast<float>(-w * std::sin(phase));
        }
    }
    return kernels;
}

void check_cqt(const AudioBuffer& audio, const CqtParams& params) {
    check_audio(audio, "compute_cqt");
    if (params.hop == 0 || params.bins <= 0 || params.bins_per_octave <= 0 || !(params.fmin > 0))
        throw ArgumentError("compute_cqt: invalid parameters");
    const double top = cqt_center_frequency(params, params.bins - 1);
    if (top >= audio.sample_rate / 2) throw ArgumentError("compute_cqt: highest bin exceeds Nyquist frequency");
}

}  // namespace

FeatureMatrix compute_cqt(const AudioBuffer& audio, const CqtParams& params) {
    check_cqt(audio, params);
    const auto kernels = make_cqt_kernels(params, audio.sample_rate);
    const std::size_t longest = kernels.front().length;
    const std::size_t n_frames = frames_for(audio.samples.size(), params.hop);

    // Zero margin on both sides so every window read stays in bounds.
    const std::size_t margin = longest / 2 + params.hop + 1;
    std::vector<float> padded(audio.samples.size() + 2 * margin, 0.0f);
    std::copy(audio.samples.begin(), audio.samples.end(), padded.begin() + static_cast<std::ptrdiff_t>(margin));

    FeatureMatrix out{Matrix<float>(n_frames, static_cast<std::size_t>(params.bins)),
                      audio.sample_rate / static_cast<double>(params.hop), FeatureKind::cqt};
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < n_frames; ++r) {
        const std::size_t center = margin + r * params.hop + params.hop / 2;
        for (std::size_t k = 0; k < kernels.size(); ++k) {
            const CqtKernel& ker = kernels[k];
            const float* x = padded.data() + (center - ker.length / 2);
            const float* kr = ker.re.data();
            const float* ki = ker.im.data();
            float sr = 0.0f, si = 0.0f;
#pragma omp simd reduction(+ : sr, si)
            for (std::size_t n = 0; n < ker.length; ++n) {
                sr += x[n] * kr[n];
                si += x[n] * ki[n];
            }
            out.values(r, k) = std::sqrt(sr * sr + si * si);
        }
    }
    return out;
}

FeatureMatrix serial::compute_cqt(const AudioBuffer& audio, const CqtParams& params) {
    check_cqt(audio, params);
    const double q = 1.0 / (std::pow(2.0, 1.0 / params.bins_per_octave) - 1.0);
    const std::size_t n_frames = frames_for(audio.samples.size(), params.hop);
    const double sr = audio.sample_rate;
    FeatureMatrix out{Matrix<float>(n_frames, static_cast<std::size_t>(params.bins)), sr / static_cast<double>(params.hop),
                      FeatureKind::cqt};
    for (std::size_t r = 0; r < n_frames; ++r) {
        const long center = static_cast<long>(r * params.hop + params.hop / 2);
        for (int k = 0; k < params.bins; ++k) {
            const double f = cqt_center_frequency(params, k);
            const auto len = static_cast<long>(std::ceil(q * sr / f));
            std::complex<double> acc = 0.0;
            double wsum = 0.0;
            for (long n = 0; n < len; ++n) {
                const double w = hann(n + 0.5, static_cast<double>(len));
                wsum += w;
                const long idx = center - len / 2 + n;
                if (idx < 0 || idx >= static_cast<long>(audio.samples.size())) continue;
                const double phase = 2.0 * kPi * f * (static_cast<double>(n) - 0.5 * static_cast<double>(len)) / sr;
                acc += audio.samples[static_cast<std::size_t>(idx)] * w * std::polar(1.0, -phase);
            }
            out.values(r, static_cast<std::size_t>(k)) = static_cast<float>(std::abs(acc) / wsum);
        }
    }
    return out;
}

// --- mel spectrogram ---------------------------------------------------------------

namespace {

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

}  // namespace

FeatureMatrix compute_mel(const AudioBuffer& audio, const MelParams& params) {
    check_audio(audio, "compute_mel");
    if (params.hop == 0 || params.bands <= 0 || params.n_fft < 16 || !(params.fmin > 0) || !(params.fmax > params.fmin))
        throw ArgumentError("compute_mel: invalid parameters");
    const std::size_t n_fft = params.n_fft;
    const std::size_t n_bins = n_fft / 2 + 1;
    const double sr = audio.sample_rate;

    // Triangular filters between band edges equally spaced on the mel scale;
    // a filter too narrow to contain a bin center falls back to its nearest bin.
    const auto n_bands = static_cast<std::size_t>(params.bands);
    std::vector<double> edges(n_bands + 2);
    const double m_lo = hz_to_mel(params.fmin), m_hi = hz_to_mel(params.fmax);
    for (std::size_t i = 0; i < edges.size(); ++i)
        edges[i] = mel_to_hz(m_lo + (m_hi - m_lo) * static_cast<double>(i) / static_cast<double>(n_bands + 1));
    Matrix<double> weights(n_bands, n_bins, 0.0);
    for (std::size_t b = 0; b < n_bands; ++b) {
        const double lo = edges[b], mid = edges[b + 1], hi = edges[b + 2];
        double total = 0.0;
        for (std::size_t k = 0; k < n_bins; ++k) {
            const double f = static_cast<double>(k) * sr / static_cast<double>(n_fft);
            double w = 0.0;
            if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
            else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
            weights(b, k) = w;
            total += w;
        }
        if (total <= 0.0) {
            const auto k = static_cast<std::size_t>(std::lround(mid * static_cast<double>(n_fft) / sr));
            weights(b, std::min(k, n_bins - 1)) = 1.0;
            total = 1.0;
        }
        for (std::size_t k = 0; k < n_bins; ++k) weights(b, k) /= total;
    }

    const std::size_t n_frames = frames_for(audio.samples.size(), params.hop);
    FeatureMatrix out{Matrix<float>(n_frames, n_bands), sr / static_cast<double>(params.hop), FeatureKind::mel};

    double* in = fftw_alloc_real(n_fft);
    fftw_complex* spec = fftw_alloc_complex(n_bins);
    fftw_plan plan;
    {
        std::lock_guard lock(fftw_planner_mutex());
        plan = fftw_plan_dft_r2c_1d(static_cast<int>(n_fft), in, spec, FFTW_ESTIMATE);
    }
    std::vector<double> window(n_fft), mag(n_bins);
    for (std::size_t n = 0; n < n_fft; ++n) window[n] = hann(n + 0.5, static_cast<double>(n_fft));

    for (std::size_t r = 0; r < n_frames; ++r) {
        const long start = static_cast<long>(r * params.hop + params.hop / 2) - static_cast<long>(n_fft / 2);
        for (std::size_t n = 0; n < n_fft; ++n) {
            const long idx = start + static_cast<long>(n);
            const double x = (idx >= 0 && idx < static_cast<long>(audio.samples.size())) ? audio.samples[static_cast<std::size_t>(idx)] : 0.0;
            in[n] = x * window[n];
        }
        fftw_execute(plan);
        for (std::size_t k = 0; k < n_bins; ++k) mag[k] = std::hypot(spec[k][0], spec[k][1]) * 2.0 / static_cast<double>(n_fft);
        for (std::size_t b = 0; b < n_bands; ++b) {
            double acc = 0.0;
            const auto w = weights.row(b);
            for (std::size_t k = 0; k < n_bins; ++k) acc += w[k] * mag[k];
            out.values(r, b) = static_cast<float>(acc);
        }
    }
    {
        std::lock_guard lock(fftw_planner_mutex());
        fftw_destroy_plan(plan);
    }
    fftw_free(in);
    fftw_free(spec);
    return out;
}

// --- scaling, padding, frame utilities ----------------------------------------------

FeatureMatrix log_scale(const FeatureMatrix& feat, double gamma) {
    FeatureMatrix out = feat;
    for (float& v : out.values.storage()) {
        if (!(v >= 0.0f)) throw ArgumentError("log_scale: negative or non-finite input");
        v = static_cast<float>(std::log1p(gamma * static_cast<double>(v)));
    }
    return out;
}

std::pair<PianoRoll, FeatureMatrix> pad_pair(const PianoRoll& roll, const FeatureMatrix& feat) {
    if (std::abs(roll.fps - feat.fps) > 1e-9) throw ArgumentError("pad_pair: frame rates differ");
    const std::size_t n = std::max(roll.num_frames(), feat.num_frames());
    std::pair<PianoRoll, FeatureMatrix> out{roll, feat};
    if (out.first.frames.cols() == 0) out.first.frames = Matrix<std::uint8_t>(0, kPitchCount);
    out.first.frames.resize_rows(n, 0);
    out.second.values.resize_rows(n, 0.0f);
    return out;
}

FeatureMatrix roll_to_features(const PianoRoll& roll) {
    FeatureMatrix out{Matrix<float>(roll.num_frames(), roll.frames.cols()), roll.fps, FeatureKind::roll};
    std::transform(roll.frames.storage().begin(), roll.frames.storage().end(), out.values.storage().begin(),
                   [](std::uint8_t v) { return static_cast<float>(v); });
    return out;
}

FeatureMatrix downsample_frames(const FeatureMatrix& feat, std::size_t factor) {
    if (factor == 0) throw ArgumentError("downsample_frames: factor must be positive");
    if (factor == 1) return feat;
    const std::size_t n = (feat.num_frames() + factor - 1) / factor;
    FeatureMatrix out{Matrix<float>(n, feat.num_bins()), feat.fps / static_cast<double>(factor), feat.kind};
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t lo = r * factor, hi = std::min(lo + factor, feat.num_frames());
        for (std::size_t c = 0; c < feat.num_bins(); ++c) {
            double acc = 0.0;
            for (std::size_t i = lo; i < hi; ++i) acc += feat.values(i, c);
            out.values(r, c) = static_cast<float>(acc / static_cast<double>(hi - lo));
        }
    }
    return out;
}

// --- synthesizer -----------------------------------------------------------------------

AudioBuffer render_notes_to_audio(const NoteSequence& seq, double sample_rate, const SynthParams& params) {
    if (!(sample_rate > 0)) throw ArgumentError("render_notes_to_audio: sample rate must be positive");
    AudioBuffer out;
    out.sample_rate = sample_rate;
    const auto n_samples = static_cast<std::size_t>(std::llround(std::max(seq.duration, seq.max_offset()) * sample_rate));
    std::vector<double> acc(n_samples, 0.0);

    for (const Note& note : seq.notes) {
        const double f0 = 440.0 * std::pow(2.0, (note.pitch - 69) / 12.0);
        const double amp = note.velocity / 127.0;
        const auto begin = static_cast<std::size_t>(std::llround(note.onset * sample_rate));
        const auto end = std::min(n_samples, static_cast<std::size_t>(std::llround(note.offset * sample_rate)) +
                                                 static_cast<std::size_t>(std::llround(params.release_seconds * sample_rate)));
        const double len = note.offset - note.onset;
        for (std::size_t s = begin; s < end; ++s) {
            const double t = static_cast<double>(s - begin) / sample_rate;
            double env = amp * std::exp(-t / params.decay_seconds);
            if (t < params.attack_seconds) env *= t / params.attack_seconds;
            if (t > len) env *= std::max(0.0, 1.0 - (t - len) / params.release_seconds);
            double v = 0.0;
            for (int h = 1; h <= params.harmonics; ++h) {
                const double fh = f0 * h;
                if (fh >= sample_rate / 2) break;
                v += std::sin(2.0 * kPi * fh * t) / h;
            }
            acc[s] += env * v;
        }
    }

    double peak = 0.0;
    for (double v : acc) peak = std::max(peak, std::abs(v));
    const double gain = peak > 0 ? params.peak / peak : 0.0;
    out.samples.resize(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) out.samples[i] = static_cast<float>(acc[i] * gain);
    return out;
}

}  // namespace midialign
