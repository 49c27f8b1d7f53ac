#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "midialign/features.hpp"
#include "midialign/symbolic.hpp"

namespace midialign {

using Rng = std::mt19937_64;

enum class ShiftDistribution {
    uniform,           ///< U[-max_dev, +max_dev]
    truncated_normal,  ///< N(0, (sigma_ratio * max_dev)^2) restricted to [-max_dev, +max_dev]
};

std::string_view to_string(ShiftDistribution d);
ShiftDistribution shift_distribution_from_string(std::string_view name);

struct AugmentConfig {
    double max_dev = 0.100;
    double max_tempo_factor = 0.0;
    std::uint64_t seed = 0;
    double min_duration = 0.010;
    ShiftDistribution distribution = ShiftDistribution::truncated_normal;
    double sigma_ratio = 0.36;
    double segment_seconds = 30.0;

    void validate() const;
};

/// Shifts one note's boundaries by explicit offsets, then applies the
/// non-negative-onset and minimum-duration clamps.
Note apply_shift(const Note& note, double onset_shift, double offset_shift, double min_duration);

/// Independent per-boundary shifts drawn from cfg.distribution.
NoteSequence perturb_timing(const NoteSequence& seq, const AugmentConfig& cfg, Rng& rng);

NoteSequence scale_tempo(const NoteSequence& seq, double factor);

/// Uniform on [1 - max_tempo_factor, 1 + max_tempo_factor].
double sample_tempo_factor(const AugmentConfig& cfg, Rng& rng);

/// Unaligned counterpart of an aligned sequence: grid quantization,
/// per-boundary jitter, then a global tempo factor (returned via `tempo`).
NoteSequence make_unaligned(const NoteSequence& aligned, const AugmentConfig& cfg, std::uint64_t seed,
                            double* tempo = nullptr);

/// Deterministic seed for segment `segment` of piece `piece`.
std::uint64_t segment_seed(std::uint64_t base, std::size_t piece, std::size_t segment);

// --- Dataset -----------------------------------------------------------------

enum class Split { train, valid, test };
std::string_view to_string(Split s);
Split split_from_string(std::string_view name);

using NoteIdMap = std::vector<std::pair<NoteId, NoteId>>;

struct DatasetTriplet {
    std::filesystem::path audio_path;
    std::filesystem::path aligned_midi_path;
    std::filesystem::path unaligned_midi_path;
    Split split = Split::train;
    std::string group;  // source-group tag used for split assignment
    std::string piece;
    std::size_t segment = 0;
    std::uint64_t seed = 0;
    double max_dev = 0.0;
    double tempo_factor = 1.0;
    NoteIdMap note_id_map;  // aligned id -> unaligned id
};

/// True when `map` pairs every id of `a` with exactly one id of `b` and back.
bool is_bijection(const NoteIdMap& map, const NoteSequence& a, const NoteSequence& b);

struct PieceInput {
    std::string name;
    std::string group;
    AudioBuffer audio;
    NoteSequence notes;
};

using SplitScheme = std::map<std::string, Split>;

/// MAPS: synthesized pianos train, ENSTDkAm validates, ENSTDkCl tests.
SplitScheme maps_split_scheme();

struct DatasetBuildResult {
    std::vector<DatasetTriplet> triplets;
    std::vector<std::string> failures;  // one message per failed item
};

/// Segments every piece at silences, writes audio slice plus aligned and
/// perturbed MIDI per segment, assigns splits and writes manifest.json.
DatasetBuildResult build_dataset(const std::vector<PieceInput>& pieces, const AugmentConfig& cfg,
                                 const std::filesystem::path& out_dir, const SplitScheme& scheme = {});

/// One split per triplet; throws ConfigError for a group missing from the scheme.
/// An empty scheme assigns everything to train.
std::vector<Split> split_dataset(const std::vector<DatasetTriplet>& triplets, const SplitScheme& scheme);

void write_manifest(const std::vector<DatasetTriplet>& triplets, const std::filesystem::path& path);
/// Paths in the result are resolved against the manifest's directory.
std::vector<DatasetTriplet> read_manifest(const std::filesystem::path& path);

// --- Synthetic corpus --------------------------------------------------------

struct RandomPieceParams {
    double duration = 30.0;
    int low_pitch = 40;
    int high_pitch = 88;
    int max_chord = 3;
    double phrase_min = 2.0, phrase_max = 6.0;
    double rest_min = 0.3, rest_max = 0.8;
    double repeat_probability = 0.15;
};

/// Random phrases of notes and chords separated by rests. Notes of one pitch
/// never overlap.
NoteSequence generate_random_piece(const RandomPieceParams& params, std::uint64_t seed);

}  // namespace midialign
