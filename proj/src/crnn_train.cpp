#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "midialign/augment.hpp"
#include "midialign/crnn.hpp"
#include "midialign/errors.hpp"

namespace midialign {

namespace {

void check_example(const TrainingExample& ex) {
    const std::size_t n = ex.input_roll.rows();
    if (n == 0) throw ArgumentError("training example '" + ex.name + "' is empty");
    if (ex.features.rows() != n || ex.target.rows() != n)
        throw ArgumentError("training example '" + ex.name + "' has inconsistent frame counts");
    if (ex.input_roll.cols() != kPitchCount || ex.features.cols() != kPitchCount || ex.target.cols() != kPitchCount)
        throw ArgumentError("training example '" + ex.name + "' must have 88 columns");
}

std::size_t uniform_index(Rng& rng, std::size_t n) { return n <= 1 ? 0 : static_cast<std::size_t>(rng() % n); }

void append_rows(std::vector<float>& dst, const Matrix<float>& m, std::size_t start, std::size_t len) {
    dst.insert(dst.end(), m.data() + start * m.cols(), m.data() + (start + len) * m.cols());
}

struct Adam {
    std::vector<std::vector<float>> m, v;
    long step = 0;

    explicit Adam(const std::vector<ParameterView<float>>& params) {
        for (const auto& p : params) {
            m.emplace_back(p.value.size(), 0.0f);
            v.emplace_back(p.value.size(), 0.0f);
        }
    }

    void update(std::vector<ParameterView<float>>& params, const TrainConfig& cfg) {
        ++step;
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
        const auto lr = static_cast<float>(cfg.lr / c1);
        const auto inv_c2 = static_cast<float>(1.0 / c2);
        const auto eps = static_cast<float>(cfg.adam_epsilon);
        for (std::size_t k = 0; k < params.size(); ++k) {
            float* w = params[k].value.data();
            const float* g = params[k].grad.data();
            float* mk = m[k].data();
            float* vk = v[k].data();
            const std::size_t n = params[k].value.size();
            for (std::size_t i = 0; i < n; ++i) {
                mk[i] = b1 * mk[i] + (1 - b1) * g[i];
                vk[i] = b2 * vk[i] + (1 - b2) * g[i] * g[i];
                w[i] -= lr * mk[i] / (std::sqrt(vk[i] * inv_c2) + eps);
            }
        }
    }
};

}  // namespace

double evaluate_loss(const Crnn<float>& model, const std::vector<TrainingExample>& examples, std::size_t max_frames) {
    double total = 0, cells = 0;
    auto ws = Crnn<float>::make_workspace();
    for (const auto& ex : examples) {
        check_example(ex);
        const std::size_t n = ex.input_roll.rows();
        const std::size_t chunk = max_frames > 0 ? std::min(max_frames, n) : n;
        for (std::size_t start = 0; start < n; start += chunk) {
            const std::size_t len = std::min(chunk, n - start);
            SequenceBatch<float> batch{1, len, {}, {}};
            append_rows(batch.roll, ex.input_roll, start, len);
            append_rows(batch.features, ex.features, start, len);
            const auto probs = model.forward(batch, PassOptions{}, *ws);
            const std::span<const float> target(ex.target.data() + start * kPitchCount, len * kPitchCount);
            const double c = static_cast<double>(len * kPitchCount);
            total += bce_loss(std::span<const float>(probs), target) * c;
            cells += c;
        }
    }
    return cells > 0 ? total / cells : 0.0;
}

TrainResult train(const std::vector<TrainingExample>& train_set, const std::vector<TrainingExample>& valid_set,
                  const ModelConfig& mcfg, const TrainConfig& tcfg, const std::function<void(const EpochLog&)>& on_epoch) {
    mcfg.validate();
    tcfg.validate();
    if (train_set.empty()) throw ConfigError("training split is empty");
    if (valid_set.empty()) throw ConfigError("validation split is empty");
    for (const auto& ex : train_set) check_example(ex);
    for (const auto& ex : valid_set) check_example(ex);

    Crnn<float> model(mcfg, tcfg.seed);
    auto params = model.parameters();
    Adam adam(params);
    Rng rng(segment_seed(tcfg.seed, 0x7261696eULL, 0));
    auto ws = Crnn<float>::make_workspace();

    TrainResult result;
    result.best_valid_loss = std::numeric_limits<double>::infinity();
    int since_best = 0;
    std::vector<std::size_t> order(train_set.size());
    const auto bs = static_cast<std::size_t>(tcfg.batch_size);

    for (int epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[uniform_index(rng, i + 1)]);

        double loss_sum = 0, cell_sum = 0;
        for (std::size_t first = 0; first < order.size(); first += bs) {
            const std::size_t last = std::min(order.size(), first + bs);
            std::size_t len = tcfg.sequence_crop;
            for (std::size_t k = first; k < last; ++k) len = std::min(len, train_set[order[k]].input_roll.rows());
            SequenceBatch<float> batch{last - first, len, {}, {}};
            std::vector<float> target;
            for (std::size_t k = first; k < last; ++k) {
                const auto& ex = train_set[order[k]];
                const std::size_t start = uniform_index(rng, ex.input_roll.rows() - len + 1);
                append_rows(batch.roll, ex.input_roll, start, len);
                append_rows(batch.features, ex.features, start, len);
                append_rows(target, ex.target, start, len);
            }
            PassOptions opts{true, true, true, rng()};
            model.forward(batch, opts, *ws);
            model.zero_grad();
            const double loss = model.backward(*ws, target);
            if (!std::isfinite(loss)) throw TrainingError("training diverged (non-finite loss) at epoch " + std::to_string(epoch));
            adam.update(params, tcfg);
            loss_sum += loss * static_cast<double>(target.size());
            cell_sum += static_cast<double>(target.size());
        }

        EpochLog entry{epoch, loss_sum / cell_sum, evaluate_loss(model, valid_set, tcfg.sequence_crop)};
        if (!std::isfinite(entry.valid_loss))
            throw TrainingError("training diverged (non-finite validation loss) at epoch " + std::to_string(epoch));
        result.log.push_back(entry);
        if (entry.valid_loss < result.best_valid_loss) {
            result.best_valid_loss = entry.valid_loss;
            result.best_epoch = epoch;
            result.weights = model.to_store();
            since_best = 0;
        } else {
            ++since_best;
        }
        if (on_epoch) on_epoch(entry);
        if (epoch >= tcfg.min_epochs && since_best >= tcfg.patience) break;
    }
    return result;
}

void write_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write training log " + path.string());
    out << "epoch,train_loss,valid_loss\n";
    char buf[96];
    for (const auto& e : log) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g\n", e.epoch, e.train_loss, e.valid_loss);
        out << buf;
    }
}

Matrix<float> infer(const WeightStore& weights, const Matrix<float>& roll, const Matrix<float>& features) {
    return Crnn<float>::from_store(weights).infer(roll, features);
}

}  // namespace midialign
