#include <cstring>
#include <fstream>

#include "midialign/crnn.hpp"
#include "midialign/errors.hpp"

namespace midialign {

namespace {

constexpr char kMagic[8] = {'M', 'A', 'C', 'R', 'N', 'N', 'W', '1'};
constexpr std::uint8_t kDtypeFloat32 = 1;

template <typename J>
void read_field(const J& j, const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("invalid value for '") + key + "'");
    }
}

class Writer {
public:
    explicit Writer(std::ostream& os) : os_(os) {}
    template <typename U>
    void pod(U v) {
        unsigned char buf[sizeof(U)];
        std::memcpy(buf, &v, sizeof(U));
        os_.write(reinterpret_cast<const char*>(buf), sizeof(U));
    }
    void bytes(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

private:
    std::ostream& os_;
};

class Reader {
public:
    explicit Reader(std::vector<char> data) : data_(std::move(data)) {}
    template <typename U>
    U pod(const std::string& field) {
        U v;
        need(sizeof(U), field);
        std::memcpy(&v, data_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }
    void bytes(void* out, std::size_t n, const std::string& field) {
        need(n, field);
        std::memcpy(out, data_.data() + pos_, n);
        pos_ += n;
    }
    bool at_end() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n, const std::string& field) const {
        if (data_.size() - pos_ < n) throw LoadError("weights: truncated file while reading " + field);
    }
    std::vector<char> data_;
    std::size_t pos_ = 0;
};

}  // namespace

void ModelConfig::validate() const {
    for (int f : conv_filters)
        if (f < 1) throw ConfigError("model: conv_filters must be positive");
    if (dense_embed < 1) throw ConfigError("model: dense_embed must be positive");
    if (rnn_hidden < 1) throw ConfigError("model: rnn_hidden must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must lie in [0, 1)");
}

nlohmann::ordered_json to_json(const ModelConfig& cfg) {
    nlohmann::ordered_json j;
    j["conv_filters"] = cfg.conv_filters;
    j["dense_embed"] = cfg.dense_embed;
    j["rnn_hidden"] = cfg.rnn_hidden;
    j["rnn_cell"] = std::string(to_string(cfg.rnn_cell));
    j["dropout"] = cfg.dropout;
    j["bidirectional"] = cfg.bidirectional;
    j["blind_transcription"] = cfg.blind_transcription;
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    read_field(j, "conv_filters", cfg.conv_filters);
    read_field(j, "dense_embed", cfg.dense_embed);
    read_field(j, "rnn_hidden", cfg.rnn_hidden);
    std::string cell(to_string(cfg.rnn_cell));
    read_field(j, "rnn_cell", cell);
    cfg.rnn_cell = rnn_cell_from_string(cell);
    read_field(j, "dropout", cfg.dropout);
    read_field(j, "bidirectional", cfg.bidirectional);
    read_field(j, "blind_transcription", cfg.blind_transcription);
    cfg.validate();
    return cfg;
}

void TrainConfig::validate() const {
    if (!(lr > 0)) throw ConfigError("train: lr must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train: Adam betas must lie in [0, 1)");
    if (!(adam_epsilon > 0)) throw ConfigError("train: adam_epsilon must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be at least 1");
    if (min_epochs < 0 || min_epochs > max_epochs) throw ConfigError("train: min_epochs must lie in [0, max_epochs]");
    if (patience < 1) throw ConfigError("train: patience must be at least 1");
    if (sequence_crop < 1) throw ConfigError("train: sequence_crop must be at least 1");
}

nlohmann::ordered_json to_json(const TrainConfig& cfg) {
    nlohmann::ordered_json j;
    j["lr"] = cfg.lr;
    j["beta1"] = cfg.beta1;
    j["beta2"] = cfg.beta2;
    j["adam_epsilon"] = cfg.adam_epsilon;
    j["batch_size"] = cfg.batch_size;
    j["max_epochs"] = cfg.max_epochs;
    j["min_epochs"] = cfg.min_epochs;
    j["patience"] = cfg.patience;
    j["seed"] = cfg.seed;
    j["sequence_crop"] = cfg.sequence_crop;
    return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    read_field(j, "lr", cfg.lr);
    read_field(j, "beta1", cfg.beta1);
    read_field(j, "beta2", cfg.beta2);
    read_field(j, "adam_epsilon", cfg.adam_epsilon);
    read_field(j, "batch_size", cfg.batch_size);
    read_field(j, "max_epochs", cfg.max_epochs);
    read_field(j, "min_epochs", cfg.min_epochs);
    read_field(j, "patience", cfg.patience);
    read_field(j, "seed", cfg.seed);
    read_field(j, "sequence_crop", cfg.sequence_crop);
    cfg.validate();
    return cfg;
}

std::size_t parameter_count(const ModelConfig& cfg) {
    const auto f1 = static_cast<std::size_t>(cfg.conv_filters[0]);
    const auto f2 = static_cast<std::size_t>(cfg.conv_filters[1]);
    const auto f3 = static_cast<std::size_t>(cfg.conv_filters[2]);
    const auto E = static_cast<std::size_t>(cfg.dense_embed);
    const auto H = static_cast<std::size_t>(cfg.rnn_hidden);
    const std::size_t gates = cfg.rnn_cell == RnnCell::lstm ? 4 : 3;
    const std::size_t conv = (9 * 1 * f1 + f1) + (9 * f1 * f2 + f2) + (9 * f2 * f3 + f3);
    const std::size_t bn = 2 * (f1 + f2 + f3);
    const std::size_t dense = f3 * kPooledPitch * E + E;
    const std::size_t branch = conv + bn + dense;
    const std::size_t direction = gates * H * (2 * E + H + 2);
    return 2 * branch + (cfg.bidirectional ? 2 : 1) * direction + kPitchCount * cfg.rnn_output_size() + kPitchCount;
}

const NamedTensor* WeightStore::find(std::string_view name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void save_weights(const WeightStore& store, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write weights file " + path.string());
    Writer w(os);
    w.bytes(kMagic, sizeof(kMagic));
    w.pod<std::uint32_t>(WeightStore::kFormatVersion);
    const std::string cfg = to_json(store.config).dump();
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(cfg.size()));
    w.bytes(cfg.data(), cfg.size());
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(store.tensors.size()));
    for (const auto& t : store.tensors) {
        std::size_t n = 1;
        for (auto d : t.shape) n *= d;
        if (n != t.data.size()) throw ArgumentError("weights: tensor '" + t.name + "' data does not match its shape");
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
        w.bytes(t.name.data(), t.name.size());
        w.pod<std::uint8_t>(kDtypeFloat32);
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) w.pod<std::uint64_t>(d);
        w.bytes(t.data.data(), t.data.size() * sizeof(float));
    }
    if (!os) throw IoError("failed writing weights file " + path.string());
}

WeightStore load_weights(const std::filesystem::path& path, const ModelConfig* expected) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open weights file " + path.string());
    Reader r(std::vector<char>(std::istreambuf_iterator<char>(is), {}));

    char magic[sizeof(kMagic)];
    r.bytes(magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw LoadError("weights: bad magic (not a weights file)");
    const auto version = r.pod<std::uint32_t>("version");
    if (version != WeightStore::kFormatVersion)
        throw LoadError("weights: unsupported format version " + std::to_string(version) + " (expected " +
                        std::to_string(WeightStore::kFormatVersion) + ")");

    WeightStore store;
    const auto cfg_len = r.pod<std::uint32_t>("config length");
    std::string cfg(cfg_len, '\0');
    r.bytes(cfg.data(), cfg_len, "config");
    try {
        store.config = model_config_from_json(nlohmann::json::parse(cfg));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("weights: unreadable config: ") + e.what());
    } catch (const ConfigError& e) {
        throw LoadError(std::string("weights: invalid config: ") + e.what());
    }
    if (expected && !(*expected == store.config))
        throw LoadError("weights: config snapshot " + to_json(store.config).dump() + " differs from expected " +
                        to_json(*expected).dump());

    const auto count = r.pod<std::uint32_t>("tensor count");
    for (std::uint32_t k = 0; k < count; ++k) {
        NamedTensor t;
        const auto name_len = r.pod<std::uint32_t>("tensor name length");
        t.name.resize(name_len);
        r.bytes(t.name.data(), name_len, "tensor name");
        const std::string field = "tensor '" + t.name + "'";
        if (r.pod<std::uint8_t>(field + " dtype") != kDtypeFloat32) throw LoadError("weights: " + field + " has unknown dtype");
        const auto ndim = r.pod<std::uint32_t>(field + " rank");
        if (ndim > 8) throw LoadError("weights: " + field + " has implausible rank");
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            t.shape.push_back(static_cast<std::size_t>(r.pod<std::uint64_t>(field + " shape")));
            n *= t.shape.back();
        }
        if (n > (std::size_t{1} << 32)) throw LoadError("weights: " + field + " has implausible size");
        t.data.resize(n);
        r.bytes(t.data.data(), n * sizeof(float), field + " data");
        store.tensors.push_back(std::move(t));
    }
    if (!r.at_end()) throw LoadError("weights: trailing bytes after last tensor");
    return store;
}

}  // namespace midialign
