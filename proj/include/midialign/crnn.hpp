#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "midialign/matrix.hpp"
#include "midialign/symbolic.hpp"

namespace midialign {

enum class RnnCell { lstm, gru };
std::string_view to_string(RnnCell cell);
RnnCell rnn_cell_from_string(std::string_view name);

/// Pitch bins after the two pitch poolings (88 -> 44 -> 22).
inline constexpr std::size_t kPooledPitch = kPitchCount / 4;

struct ModelConfig {
    std::array<int, 3> conv_filters{16, 16, 32};
    int dense_embed = 256;
    int rnn_hidden = 256;
    RnnCell rnn_cell = RnnCell::lstm;
    double dropout = 0.5;
    bool bidirectional = true;
    bool blind_transcription = false;

    std::size_t embedding_size() const { return 2 * static_cast<std::size_t>(dense_embed); }
    std::size_t rnn_output_size() const {
        return (bidirectional ? 2 : 1) * static_cast<std::size_t>(rnn_hidden);
    }
    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::ordered_json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct TrainConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    int batch_size = 8;
    int max_epochs = 200;
    int min_epochs = 50;
    int patience = 10;
    std::uint64_t seed = 0;
    std::size_t sequence_crop = 3000;  // frames

    void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct NamedTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> data;
};

/// Model configuration plus every parameter and BatchNorm statistic.
struct WeightStore {
    static constexpr std::uint32_t kFormatVersion = 1;

    ModelConfig config;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(std::string_view name) const;
};

void save_weights(const WeightStore& store, const std::filesystem::path& path);
/// Throws LoadError naming the offending field; when `expected` is given a
/// differing config snapshot is rejected.
WeightStore load_weights(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

/// Trainable parameter count implied by a configuration.
std::size_t parameter_count(const ModelConfig& cfg);

/// B sequences of equal length N, each N x 88, stored batch-major.
template <typename T>
struct SequenceBatch {
    std::size_t batch = 0;
    std::size_t frames = 0;
    std::vector<T> roll;
    std::vector<T> features;
};

struct PassOptions {
    bool batch_statistics = false;  // BatchNorm from batch moments instead of running statistics
    bool update_running_stats = false;
    bool dropout = false;
    std::uint64_t dropout_seed = 0;
};

template <typename T>
struct ParameterView {
    std::string name;
    std::vector<std::size_t> shape;
    std::span<T> value;
    std::span<T> grad;
};

/// Two convolutional branches (piano roll, spectrogram), a recurrent layer
/// over their concatenated embeddings and a sigmoid pitch head.
template <typename T>
class Crnn {
public:
    struct Workspace;
    struct WorkspaceDeleter {
        void operator()(Workspace* ws) const;
    };
    using WorkspacePtr = std::unique_ptr<Workspace, WorkspaceDeleter>;

    explicit Crnn(const ModelConfig& cfg, std::uint64_t seed = 0);
    Crnn(const Crnn&);
    Crnn& operator=(const Crnn&);
    Crnn(Crnn&&) noexcept;
    Crnn& operator=(Crnn&&) noexcept;
    ~Crnn();

    static Crnn from_store(const WeightStore& store);
    WeightStore to_store() const;

    const ModelConfig& config() const { return cfg_; }
    std::size_t parameter_count() const;
    std::vector<ParameterView<T>> parameters();
    void zero_grad();

    /// Probabilities, B*N*88 batch-major. Activations needed by backward()
    /// are kept in `ws`.
    std::vector<T> forward(const SequenceBatch<T>& batch, const PassOptions& opts, Workspace& ws) const;
    /// Accumulates d(mean BCE)/d(parameter) for the pass recorded in `ws`
    /// and returns the loss.
    double backward(Workspace& ws, std::span<const T> target);

    /// Eval-mode forward of a single sequence.
    Matrix<T> infer(const Matrix<T>& roll, const Matrix<T>& features) const;
    /// Eval-mode concatenated branch embeddings, B*N rows of 2*dense_embed.
    std::vector<T> embeddings(const SequenceBatch<T>& batch) const;

    static WorkspacePtr make_workspace();

private:
    struct Params;
    ModelConfig cfg_;
    std::unique_ptr<Params> p_;
};

extern template class Crnn<float>;
extern template class Crnn<double>;

/// Mean binary cross entropy with predictions clamped to [1e-7, 1 - 1e-7].
double bce_loss(std::span<const float> pred, std::span<const float> target);
double bce_loss(std::span<const double> pred, std::span<const double> target);
double bce_loss(const Matrix<float>& pred, const Matrix<float>& target);

// --- Training ----------------------------------------------------------------

/// Input roll and spectrogram features with the aligned roll as target, all
/// N x 88 at the same frame rate.
struct TrainingExample {
    std::string name;
    Matrix<float> input_roll;
    Matrix<float> features;
    Matrix<float> target;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double valid_loss = 0.0;
};

struct TrainResult {
    WeightStore weights;  // best validation epoch
    std::vector<EpochLog> log;
    int best_epoch = 0;
    double best_valid_loss = 0.0;
};

/// Adam on mean BCE with early stopping on validation loss. Deterministic
/// for a fixed seed.
TrainResult train(const std::vector<TrainingExample>& train_set, const std::vector<TrainingExample>& valid_set,
                  const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

/// Mean BCE over a set of examples in eval mode, weighted by cell count.
double evaluate_loss(const Crnn<float>& model, const std::vector<TrainingExample>& examples,
                     std::size_t max_frames = 0);

/// epoch,train_loss,valid_loss
void write_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

Matrix<float> infer(const WeightStore& weights, const Matrix<float>& roll, const Matrix<float>& features);

}  // namespace midialign
