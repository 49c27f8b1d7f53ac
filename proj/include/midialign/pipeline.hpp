#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "midialign/augment.hpp"
#include "midialign/crnn.hpp"
#include "midialign/dtw.hpp"
#include "midialign/evaluate.hpp"
#include "midialign/features.hpp"
#include "midialign/symbolic.hpp"

namespace midialign {

enum class Method { none, dtw, crnn, dtw_then_crnn };
std::string_view to_string(Method m);
/// Throws ConfigError listing the valid names.
Method method_from_string(std::string_view name);
bool uses_crnn(Method m);

enum class FeatureScale { linear, log };
std::string_view to_string(FeatureScale s);
FeatureScale feature_scale_from_string(std::string_view name);

struct DtwSettings {
    CostConfig cost;
    std::size_t memory_budget = 1'000'000;
    std::size_t downsample = 2;  // 100 fps spectrogram -> 50 fps sync features
};

struct PipelineConfig {
    Method method = Method::dtw;
    FeatureKind feature = FeatureKind::cqt;  // cqt or mel
    FeatureScale scale = FeatureScale::log;
    double fps = 100.0;
    double threshold = 0.5;
    std::uint64_t seed = 0;
    /// dtw_then_crnn: train on DTW-prealigned input rolls (otherwise on the
    /// raw unaligned rolls).
    bool retrain_on_dtw_input = true;
    AugmentConfig augment;
    ModelConfig model;
    TrainConfig train;
    DtwSettings dtw;
    std::filesystem::path manifest;
    std::filesystem::path weights;
    std::filesystem::path output;

    /// Hop in samples at the pipeline sample rate.
    std::size_t hop() const;
    void validate() const;
    /// Copies `seed` into the augmentation and training seeds.
    void apply_seed(std::uint64_t s);
};

nlohmann::ordered_json to_json(const PipelineConfig& cfg);
/// Values present in `j` override those already in `base`.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig base = {});
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

// --- Data ----------------------------------------------------------------------------

/// A triplet held in memory, audio at the pipeline sample rate.
struct LoadedTriplet {
    std::string name;
    std::string piece;
    Split split = Split::train;
    AudioBuffer audio;
    NoteSequence aligned;
    NoteSequence unaligned;
    std::uint64_t seed = 0;
};

LoadedTriplet load_triplet(const DatasetTriplet& t);
std::vector<LoadedTriplet> load_dataset(const std::vector<DatasetTriplet>& triplets);
std::vector<LoadedTriplet> select_split(const std::vector<LoadedTriplet>& data, Split split);
/// Regenerates every unaligned sequence from its aligned one with `cfg`.
std::vector<LoadedTriplet> reaugment(const std::vector<LoadedTriplet>& data, const AugmentConfig& cfg);

/// Spectrogram used as network input, linear or log-compressed.
FeatureMatrix audio_features(const AudioBuffer& audio, const PipelineConfig& cfg);
/// Piano roll as float with exactly `frames` rows.
Matrix<float> roll_matrix(const NoteSequence& seq, double fps, std::size_t frames);

// --- Alignment -----------------------------------------------------------------------

/// Warps note times onto the audio with multiscale DTW on chroma + onset
/// features.
NoteSequence dtw_align(const NoteSequence& notes, const AudioBuffer& audio, const PipelineConfig& cfg,
                       WarpPath* path = nullptr);

/// Runs the network on (roll of `input`, spectrogram) and moves each note
/// to its matched activation block.
NoteSequence crnn_refine(const NoteSequence& input, const FeatureMatrix& features, const Crnn<float>& model,
                         double threshold = 0.5);

/// Estimated alignment of `triplet.unaligned` for cfg.method.
NoteSequence run_align(const PipelineConfig& cfg, const LoadedTriplet& triplet, const Crnn<float>* model = nullptr);

/// Network inputs and targets for a set of triplets; the input roll comes
/// from the unaligned notes or, when `dtw_input`, from their DTW alignment.
std::vector<TrainingExample> make_examples(const std::vector<LoadedTriplet>& data, const PipelineConfig& cfg,
                                           bool dtw_input);

/// Trains the network for cfg.method on the train/valid splits of `data`.
TrainResult train_model(const PipelineConfig& cfg, const std::vector<LoadedTriplet>& data,
                        const std::function<void(const EpochLog&)>& on_epoch = {});

// --- Evaluation ----------------------------------------------------------------------

struct PieceReport {
    std::string piece;
    AlignmentReport report;
};

struct DatasetReport {
    Method method = Method::none;
    AlignmentReport overall;
    std::vector<PieceReport> pieces;
};

/// Pools onset errors over all triplets (estimates in the same order).
DatasetReport evaluate_estimates(const std::vector<LoadedTriplet>& data, const std::vector<NoteSequence>& estimates,
                                 Method method);
DatasetReport evaluate_method(const PipelineConfig& cfg, const std::vector<LoadedTriplet>& data,
                              const Crnn<float>* model = nullptr);

/// Report document; `generated_at` is the only non-deterministic field.
nlohmann::ordered_json to_json(const DatasetReport& report, const std::string& generated_at = "");

// --- Experiments ---------------------------------------------------------------------

/// Cartesian grid over configuration axes. Empty axes keep the base value.
struct ExperimentGrid {
    std::vector<Method> method;
    std::vector<double> fps;
    std::vector<std::string> feature;  // "<cqt|mel>_<lin|log>"
    std::vector<RnnCell> rnn_cell;
    std::vector<double> max_dev;
    std::vector<double> max_tempo_factor;
};

ExperimentGrid experiment_grid_from_json(const nlohmann::json& j);

struct ExperimentPoint {
    std::size_t index = 0;
    std::string label;
    PipelineConfig config;
};

/// Points are validated when run_experiment reaches them.
std::vector<ExperimentPoint> expand_grid(const PipelineConfig& base, const ExperimentGrid& grid);

struct ExperimentRow {
    ExperimentPoint point;
    std::optional<AlignmentReport> report;
    std::string error;  // set when the point failed
    bool resumed = false;
};

/// Runs every grid point on `data` in its own directory under `out_dir`; a
/// completion marker lets an interrupted grid resume. Rows are written to
/// results.csv after each point. Per-point failures are recorded and the
/// grid continues.
std::vector<ExperimentRow> run_experiment(const PipelineConfig& base, const ExperimentGrid& grid,
                                          const std::vector<LoadedTriplet>& data, const std::filesystem::path& out_dir,
                                          const std::function<void(const ExperimentRow&)>& on_point = {});

std::string experiment_csv(const std::vector<ExperimentRow>& rows);

// --- Synthetic corpus ----------------------------------------------------------------

struct SynthCorpusConfig {
    std::size_t pieces = 10;
    double piece_seconds = 30.0;
    std::uint64_t seed = 0;
    double valid_fraction = 0.15;
    double test_fraction = 0.15;
    RandomPieceParams notes;
    SynthParams synth;
};

/// Random pieces rendered with the built-in synthesizer; groups are named
/// "train", "valid" and "test".
std::vector<PieceInput> synthesize_corpus(const SynthCorpusConfig& cfg);
SplitScheme synthetic_split_scheme();

}  // namespace midialign
