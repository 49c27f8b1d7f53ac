#include "midialign/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "midialign/errors.hpp"
#include "midialign/postprocess.hpp"

namespace midialign {

namespace {

template <typename J, typename V>
void read_field(const J& j, const char* key, V& out) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("invalid value for '") + key + "'");
    }
}

std::string method_names() { return "none, dtw, crnn, dtw_then_crnn"; }

}  // namespace

std::string_view to_string(Method m) {
    switch (m) {
        case Method::none: return "none";
        case Method::dtw: return "dtw";
        case Method::crnn: return "crnn";
        case Method::dtw_then_crnn: return "dtw_then_crnn";
    }
    return "none";
}

Method method_from_string(std::string_view name) {
    for (Method m : {Method::none, Method::dtw, Method::crnn, Method::dtw_then_crnn})
        if (to_string(m) == name) return m;
    throw ConfigError("unknown method '" + std::string(name) + "' (expected one of: " + method_names() + ")");
}

bool uses_crnn(Method m) { return m == Method::crnn || m == Method::dtw_then_crnn; }

std::string_view to_string(FeatureScale s) { return s == FeatureScale::log ? "log" : "lin"; }

FeatureScale feature_scale_from_string(std::string_view name) {
    if (name == "log") return FeatureScale::log;
    if (name == "lin" || name == "linear") return FeatureScale::linear;
    throw ConfigError("unknown feature scale '" + std::string(name) + "' (expected lin or log)");
}

// --- configuration -------------------------------------------------------------------

std::size_t PipelineConfig::hop() const {
    return static_cast<std::size_t>(std::llround(kPipelineSampleRate / fps));
}

void PipelineConfig::validate() const {
    if (!(fps > 0)) throw ConfigError("fps must be positive");
    const std::size_t h = hop();
    if (h == 0 || std::abs(kPipelineSampleRate / static_cast<double>(h) - fps) > 1e-9)
        throw ConfigError("fps must divide the 16 kHz sample rate into a whole hop");
    if (feature != FeatureKind::cqt && feature != FeatureKind::mel) throw ConfigError("feature must be cqt or mel");
    if (!(threshold > 0 && threshold < 1)) throw ConfigError("threshold must lie in (0, 1)");
    if (dtw.downsample < 1) throw ConfigError("dtw.downsample must be at least 1");
    if (dtw.memory_budget < kMinMemoryBudget) throw ConfigError("dtw.memory_budget below 10^4 cells");
    augment.validate();
    model.validate();
    train.validate();
    dtw.cost.validate();
}

void PipelineConfig::apply_seed(std::uint64_t s) {
    seed = s;
    augment.seed = s;
    train.seed = s;
}

nlohmann::ordered_json to_json(const PipelineConfig& cfg) {
    nlohmann::ordered_json j;
    j["method"] = std::string(to_string(cfg.method));
    j["feature"] = std::string(to_string(cfg.feature));
    j["scale"] = std::string(to_string(cfg.scale));
    j["fps"] = cfg.fps;
    j["threshold"] = cfg.threshold;
    j["seed"] = cfg.seed;
    j["retrain_on_dtw_input"] = cfg.retrain_on_dtw_input;
    nlohmann::ordered_json a;
    a["max_dev"] = cfg.augment.max_dev;
    a["max_tempo_factor"] = cfg.augment.max_tempo_factor;
    a["seed"] = cfg.augment.seed;
    a["min_duration"] = cfg.augment.min_duration;
    a["distribution"] = std::string(to_string(cfg.augment.distribution));
    a["sigma_ratio"] = cfg.augment.sigma_ratio;
    a["segment_seconds"] = cfg.augment.segment_seconds;
    j["augment"] = a;
    j["model"] = to_json(cfg.model);
    j["train"] = to_json(cfg.train);
    nlohmann::ordered_json d;
    const bool classic = cfg.dtw.cost.steps.size() == 3 && cfg.dtw.cost.steps[1].di == 1 && cfg.dtw.cost.steps[1].dj == 0;
    d["steps"] = classic ? "classic" : "weighted";
    d["chroma_weight"] = cfg.dtw.cost.chroma_weight;
    d["onset_weight"] = cfg.dtw.cost.onset_weight;
    d["memory_budget"] = cfg.dtw.memory_budget;
    d["downsample"] = cfg.dtw.downsample;
    j["dtw"] = d;
    nlohmann::ordered_json p;
    p["manifest"] = cfg.manifest.generic_string();
    p["weights"] = cfg.weights.generic_string();
    p["output"] = cfg.output.generic_string();
    j["paths"] = p;
    return j;
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig cfg) {
    if (!j.is_object()) throw ConfigError("pipeline config must be a JSON object");
    std::string s;
    if (j.contains("method")) {
        read_field(j, "method", s);
        cfg.method = method_from_string(s);
    }
    if (j.contains("feature")) {
        read_field(j, "feature", s);
        if (s != "cqt" && s != "mel") throw ConfigError("unknown feature '" + s + "' (expected cqt or mel)");
        cfg.feature = feature_kind_from_string(s);
    }
    if (j.contains("scale")) {
        read_field(j, "scale", s);
        cfg.scale = feature_scale_from_string(s);
    }
    read_field(j, "fps", cfg.fps);
    read_field(j, "threshold", cfg.threshold);
    if (j.contains("seed")) {
        std::uint64_t seed = 0;
        read_field(j, "seed", seed);
        cfg.apply_seed(seed);
    }
    read_field(j, "retrain_on_dtw_input", cfg.retrain_on_dtw_input);
    if (j.contains("augment")) {
        const auto& a = j.at("augment");
        read_field(a, "max_dev", cfg.augment.max_dev);
        read_field(a, "max_tempo_factor", cfg.augment.max_tempo_factor);
        read_field(a, "seed", cfg.augment.seed);
        read_field(a, "min_duration", cfg.augment.min_duration);
        if (a.contains("distribution")) {
            read_field(a, "distribution", s);
            cfg.augment.distribution = shift_distribution_from_string(s);
        }
        read_field(a, "sigma_ratio", cfg.augment.sigma_ratio);
        read_field(a, "segment_seconds", cfg.augment.segment_seconds);
    }
    if (j.contains("model")) {
        nlohmann::json merged = to_json(cfg.model);
        merged.update(j.at("model"));
        cfg.model = model_config_from_json(merged);
    }
    if (j.contains("train")) {
        nlohmann::json merged = to_json(cfg.train);
        merged.update(j.at("train"));
        cfg.train = train_config_from_json(merged);
    }
    if (j.contains("dtw")) {
        const auto& d = j.at("dtw");
        if (d.contains("steps")) {
            read_field(d, "steps", s);
            if (s == "weighted")
                cfg.dtw.cost.steps = CostConfig::weighted_steps();
            else if (s == "classic")
                cfg.dtw.cost.steps = CostConfig::classic_steps();
            else
                throw ConfigError("unknown dtw steps '" + s + "' (expected weighted or classic)");
        }
        read_field(d, "chroma_weight", cfg.dtw.cost.chroma_weight);
        read_field(d, "onset_weight", cfg.dtw.cost.onset_weight);
        read_field(d, "memory_budget", cfg.dtw.memory_budget);
        read_field(d, "downsample", cfg.dtw.downsample);
    }
    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        if (p.contains("manifest")) cfg.manifest = p.at("manifest").get<std::string>();
        if (p.contains("weights")) cfg.weights = p.at("weights").get<std::string>();
        if (p.contains("output")) cfg.output = p.at("output").get<std::string>();
    }
    cfg.validate();
    return cfg;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    PipelineConfig cfg = pipeline_config_from_json(j);
    // Relative paths in a config file are relative to the file.
    const auto base = path.parent_path();
    for (auto* p : {&cfg.manifest, &cfg.weights, &cfg.output})
        if (!p->empty() && p->is_relative()) *p = base / *p;
    return cfg;
}

// --- data ----------------------------------------------------------------------------

LoadedTriplet load_triplet(const DatasetTriplet& t) {
    LoadedTriplet out;
    out.name = t.audio_path.stem().string();
    out.piece = t.piece.empty() ? out.name : t.piece;
    out.split = t.split;
    out.seed = t.seed;
    out.audio = read_wav(t.audio_path);
    if (out.audio.sample_rate != kPipelineSampleRate) out.audio = resample(out.audio, kPipelineSampleRate);
    out.aligned = read_midi(t.aligned_midi_path).notes;
    out.unaligned = read_midi(t.unaligned_midi_path).notes;
    return out;
}

std::vector<LoadedTriplet> load_dataset(const std::vector<DatasetTriplet>& triplets) {
    std::vector<LoadedTriplet> out(triplets.size());
    std::vector<std::string> errors(triplets.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < triplets.size(); ++i) {
        try {
            out[i] = load_triplet(triplets[i]);
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw IoError("loading dataset: " + e);
    return out;
}

std::vector<LoadedTriplet> select_split(const std::vector<LoadedTriplet>& data, Split split) {
    std::vector<LoadedTriplet> out;
    for (const auto& t : data)
        if (t.split == split) out.push_back(t);
    return out;
}

std::vector<LoadedTriplet> reaugment(const std::vector<LoadedTriplet>& data, const AugmentConfig& cfg) {
    cfg.validate();
    std::vector<LoadedTriplet> out = data;
    for (auto& t : out) t.unaligned = make_unaligned(t.aligned, cfg, t.seed);
    return out;
}

FeatureMatrix audio_features(const AudioBuffer& audio, const PipelineConfig& cfg) {
    FeatureMatrix f;
    if (cfg.feature == FeatureKind::mel) {
        MelParams p;
        p.hop = cfg.hop();
        f = compute_mel(audio, p);
    } else {
        CqtParams p;
        p.hop = cfg.hop();
        f = compute_cqt(audio, p);
    }
    return cfg.scale == FeatureScale::log ? log_scale(f) : f;
}

Matrix<float> roll_matrix(const NoteSequence& seq, double fps, std::size_t frames) {
    const PianoRoll roll = to_piano_roll(seq, fps);
    Matrix<float> out(frames, kPitchCount, 0.0f);
    const std::size_t n = std::min(frames, roll.num_frames());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < static_cast<std::size_t>(kPitchCount); ++c) out(r, c) = roll.frames(r, c);
    return out;
}

namespace {

FeatureMatrix pad_features(const FeatureMatrix& f, std::size_t frames) {
    FeatureMatrix out = f;
    out.values.resize_rows(frames, 0.0f);
    return out;
}

}  // namespace

// --- alignment -----------------------------------------------------------------------

NoteSequence dtw_align(const NoteSequence& notes, const AudioBuffer& audio, const PipelineConfig& cfg, WarpPath* path) {
    if (notes.empty()) return notes;
    CqtParams cq;
    cq.hop = 160;
    const FeatureMatrix spec = downsample_frames(log_scale(compute_cqt(audio, cq)), cfg.dtw.downsample);
    const FeatureMatrix roll = downsample_frames(roll_to_features(to_piano_roll(notes, 100.0)), cfg.dtw.downsample);
    const SyncFeatures a = sync_features(roll);
    const SyncFeatures b = sync_features(spec);
    const DtwResult r = mrmsdtw(a, b, cfg.dtw.cost, cfg.dtw.memory_budget);
    if (path) *path = r.path;
    return apply_warp(notes, r.path);
}

NoteSequence crnn_refine(const NoteSequence& input, const FeatureMatrix& features, const Crnn<float>& model,
                         double threshold) {
    if (input.empty()) return input;
    const std::size_t frames = std::max(features.num_frames(), frame_count(input.duration, features.fps));
    const Matrix<float> roll = roll_matrix(input, features.fps, frames);
    const Matrix<float> act = model.infer(roll, pad_features(features, frames).values);
    const auto blocks = threshold_and_segment(act, features.fps, threshold);
    return update_sequence(input, match_notes(blocks, input));
}

NoteSequence run_align(const PipelineConfig& cfg, const LoadedTriplet& t, const Crnn<float>* model) {
    if (uses_crnn(cfg.method) && !model)
        throw ConfigError("method " + std::string(to_string(cfg.method)) + " needs trained weights");
    switch (cfg.method) {
        case Method::none: return t.unaligned;
        case Method::dtw: return dtw_align(t.unaligned, t.audio, cfg);
        case Method::crnn: return crnn_refine(t.unaligned, audio_features(t.audio, cfg), *model, cfg.threshold);
        case Method::dtw_then_crnn:
            return crnn_refine(dtw_align(t.unaligned, t.audio, cfg), audio_features(t.audio, cfg), *model, cfg.threshold);
    }
    return t.unaligned;
}

std::vector<TrainingExample> make_examples(const std::vector<LoadedTriplet>& data, const PipelineConfig& cfg,
                                           bool dtw_input) {
    std::vector<TrainingExample> out(data.size());
    std::vector<std::string> errors(data.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < data.size(); ++i) {
        try {
            const auto& t = data[i];
            const FeatureMatrix feats = audio_features(t.audio, cfg);
            const NoteSequence input = dtw_input ? dtw_align(t.unaligned, t.audio, cfg) : t.unaligned;
            const std::size_t frames = std::max({feats.num_frames(), frame_count(input.duration, cfg.fps),
                                                 frame_count(t.aligned.duration, cfg.fps)});
            out[i].name = t.name;
            out[i].input_roll = roll_matrix(input, cfg.fps, frames);
            out[i].features = pad_features(feats, frames).values;
            out[i].target = roll_matrix(t.aligned, cfg.fps, frames);
        } catch (const std::exception& e) {
            errors[i] = data[i].name + ": " + e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw Error("preparing training data: " + e);
    return out;
}

TrainResult train_model(const PipelineConfig& cfg, const std::vector<LoadedTriplet>& data,
                        const std::function<void(const EpochLog&)>& on_epoch) {
    cfg.validate();
    if (!uses_crnn(cfg.method)) throw ConfigError("method " + std::string(to_string(cfg.method)) + " has no network to train");
    const bool dtw_input = cfg.method == Method::dtw_then_crnn && cfg.retrain_on_dtw_input;
    const auto train_set = make_examples(select_split(data, Split::train), cfg, dtw_input);
    const auto valid_set = make_examples(select_split(data, Split::valid), cfg, dtw_input);
    return train(train_set, valid_set, cfg.model, cfg.train, on_epoch);
}

// --- evaluation ----------------------------------------------------------------------

DatasetReport evaluate_estimates(const std::vector<LoadedTriplet>& data, const std::vector<NoteSequence>& estimates,
                                 Method method) {
    if (data.size() != estimates.size()) throw ArgumentError("evaluate: one estimate per triplet required");
    if (data.empty()) throw EvaluationError("evaluate: no triplets to evaluate");
    DatasetReport out;
    out.method = method;
    std::vector<NoteError> all;
    std::map<std::string, std::vector<NoteError>> by_piece;
    std::vector<std::string> order;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data[i].aligned.empty()) continue;
        const auto errors = onset_errors(estimates[i], data[i].aligned);
        all.insert(all.end(), errors.begin(), errors.end());
        auto [it, fresh] = by_piece.try_emplace(data[i].piece);
        if (fresh) order.push_back(data[i].piece);
        it->second.insert(it->second.end(), errors.begin(), errors.end());
    }
    if (all.empty()) throw EvaluationError("evaluate: no reference notes");
    out.overall = accuracy_report(all);
    for (const auto& p : order) out.pieces.push_back({p, accuracy_report(by_piece[p])});
    return out;
}

DatasetReport evaluate_method(const PipelineConfig& cfg, const std::vector<LoadedTriplet>& data, const Crnn<float>* model) {
    std::vector<NoteSequence> est(data.size());
    std::vector<std::string> errors(data.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < data.size(); ++i) {
        try {
            est[i] = run_align(cfg, data[i], model);
        } catch (const std::exception& e) {
            errors[i] = data[i].name + ": " + e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw Error("alignment failed for " + e);
    return evaluate_estimates(data, est, cfg.method);
}

nlohmann::ordered_json to_json(const DatasetReport& report, const std::string& generated_at) {
    nlohmann::ordered_json j;
    j["generated_at"] = generated_at;
    j["method"] = std::string(to_string(report.method));
    j["overall"] = to_json(report.overall);
    nlohmann::ordered_json pieces = nlohmann::ordered_json::array();
    for (const auto& p : report.pieces) {
        nlohmann::ordered_json e;
        e["piece"] = p.piece;
        e["summary"] = summary_json(p.report);
        pieces.push_back(e);
    }
    j["pieces"] = pieces;
    return j;
}

// --- experiments ---------------------------------------------------------------------

ExperimentGrid experiment_grid_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("experiment grid must be a JSON object");
    ExperimentGrid g;
    for (const auto& [key, value] : j.items()) {
        if (!value.is_array()) throw ConfigError("grid axis '" + key + "' must be an array");
        try {
            if (key == "method") {
                for (const auto& v : value) g.method.push_back(method_from_string(v.get<std::string>()));
            } else if (key == "fps") {
                g.fps = value.get<std::vector<double>>();
            } else if (key == "feature") {
                g.feature = value.get<std::vector<std::string>>();
            } else if (key == "rnn_cell") {
                for (const auto& v : value) g.rnn_cell.push_back(rnn_cell_from_string(v.get<std::string>()));
            } else if (key == "max_dev") {
                g.max_dev = value.get<std::vector<double>>();
            } else if (key == "max_tempo_factor") {
                g.max_tempo_factor = value.get<std::vector<double>>();
            } else {
                throw ConfigError("unknown grid axis '" + key +
                                  "' (expected method, fps, feature, rnn_cell, max_dev, max_tempo_factor)");
            }
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("invalid values for grid axis '" + key + "'");
        }
    }
    return g;
}

namespace {

std::string format_number(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

void apply_feature_name(PipelineConfig& cfg, const std::string& name) {
    const auto cut = name.find('_');
    if (cut == std::string::npos) throw ConfigError("feature axis value '" + name + "' must look like cqt_log");
    const std::string kind = name.substr(0, cut);
    if (kind != "cqt" && kind != "mel") throw ConfigError("unknown feature '" + kind + "' (expected cqt or mel)");
    cfg.feature = feature_kind_from_string(kind);
    cfg.scale = feature_scale_from_string(name.substr(cut + 1));
}

std::string feature_name(const PipelineConfig& cfg) {
    return std::string(to_string(cfg.feature)) + "_" + std::string(to_string(cfg.scale));
}

template <typename V>
std::vector<std::optional<V>> axis(const std::vector<V>& values) {
    if (values.empty()) return {std::nullopt};
    return {values.begin(), values.end()};
}

}  // namespace

std::vector<ExperimentPoint> expand_grid(const PipelineConfig& base, const ExperimentGrid& grid) {
    std::vector<ExperimentPoint> points;
    for (const auto& m : axis(grid.method))
        for (const auto& fps : axis(grid.fps))
            for (const auto& feat : axis(grid.feature))
                for (const auto& cell : axis(grid.rnn_cell))
                    for (const auto& dev : axis(grid.max_dev))
                        for (const auto& tempo : axis(grid.max_tempo_factor)) {
                            ExperimentPoint p;
                            p.index = points.size();
                            p.config = base;
                            std::vector<std::string> parts;
                            if (m) {
                                p.config.method = *m;
                                parts.push_back("method=" + std::string(to_string(*m)));
                            }
                            if (fps) {
                                p.config.fps = *fps;
                                parts.push_back("fps=" + format_number(*fps));
                            }
                            if (feat) {
                                apply_feature_name(p.config, *feat);
                                parts.push_back("feature=" + *feat);
                            }
                            if (cell) {
                                p.config.model.rnn_cell = *cell;
                                parts.push_back("rnn_cell=" + std::string(to_string(*cell)));
                            }
                            if (dev) {
                                p.config.augment.max_dev = *dev;
                                parts.push_back("max_dev=" + format_number(*dev));
                            }
                            if (tempo) {
                                p.config.augment.max_tempo_factor = *tempo;
                                parts.push_back("max_tempo_factor=" + format_number(*tempo));
                            }
                            std::string label;
                            for (const auto& s : parts) label += (label.empty() ? "" : ";") + s;
                            p.label = label.empty() ? "base" : label;
                            points.push_back(std::move(p));
                        }
    return points;
}

namespace {

nlohmann::ordered_json row_json(const AlignmentReport& r) {
    nlohmann::ordered_json j;
    j["notes"] = r.per_note.size();
    j["mean"] = r.mean;
    j["median"] = r.median;
    j["std"] = r.std;
    nlohmann::ordered_json acc = nlohmann::ordered_json::array();
    for (const auto& [tol, a] : r.accuracy) acc.push_back({tol, a});
    j["accuracy"] = acc;
    return j;
}

AlignmentReport row_from_json(const nlohmann::json& j) {
    AlignmentReport r;
    r.mean = j.at("mean").get<double>();
    r.median = j.at("median").get<double>();
    r.std = j.at("std").get<double>();
    for (const auto& a : j.at("accuracy")) r.accuracy.emplace_back(a.at(0).get<double>(), a.at(1).get<double>());
    return r;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
        if (!out) throw IoError("cannot write " + tmp);
        out << text;
        if (!out) throw IoError("failed writing " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

std::string point_dir_name(std::size_t index) {
    std::ostringstream os;
    os << "point_" << std::setw(3) << std::setfill('0') << index;
    return os.str();
}

bool augment_axis_set(const ExperimentGrid& g) { return !g.max_dev.empty() || !g.max_tempo_factor.empty(); }

}  // namespace

std::vector<ExperimentRow> run_experiment(const PipelineConfig& base, const ExperimentGrid& grid,
                                          const std::vector<LoadedTriplet>& data, const std::filesystem::path& out_dir,
                                          const std::function<void(const ExperimentRow&)>& on_point) {
    std::filesystem::create_directories(out_dir);
    const auto points = expand_grid(base, grid);
    std::vector<ExperimentRow> rows;
    for (const auto& point : points) {
        ExperimentRow row{point, std::nullopt, "", false};
        const auto dir = out_dir / point_dir_name(point.index);
        const auto marker = dir / "DONE";
        if (std::filesystem::exists(marker)) {
            std::ifstream in(dir / "row.json");
            row.report = row_from_json(nlohmann::json::parse(in));
            row.resumed = true;
        } else {
            try {
                std::filesystem::create_directories(dir);
                const PipelineConfig& cfg = point.config;
                cfg.validate();
                write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
                const auto point_data = augment_axis_set(grid) ? reaugment(data, cfg.augment) : data;
                const auto test = select_split(point_data, Split::test);
                if (test.empty()) throw ConfigError("dataset has no test split");
                std::optional<Crnn<float>> model;
                if (uses_crnn(cfg.method)) {
                    const TrainResult tr = train_model(cfg, point_data);
                    save_weights(tr.weights, dir / "weights.bin");
                    write_training_log(tr.log, dir / "train_log.csv");
                    model.emplace(Crnn<float>::from_store(tr.weights));
                }
                const DatasetReport rep = evaluate_method(cfg, test, model ? &*model : nullptr);
                write_text(dir / "report.json", to_json(rep).dump(2) + "\n");
                write_text(dir / "row.json", row_json(rep.overall).dump(2) + "\n");
                write_text(marker, point.label + "\n");
                row.report = rep.overall;
            } catch (const std::exception& e) {
                row.error = e.what();
            }
        }
        rows.push_back(row);
        write_text(out_dir / "results.csv", experiment_csv(rows));
        if (on_point) on_point(row);
    }
    return rows;
}

std::string experiment_csv(const std::vector<ExperimentRow>& rows) {
    std::ostringstream out;
    out << "point,label,method,fps,feature,rnn_cell,max_dev_ms,max_tempo_factor,mean_ms,median_ms,std_ms";
    for (double tol : kTolerances) out << ",acc_" << std::llround(tol * 1000) << "ms";
    out << ",status\n";
    auto fixed2 = [](double v) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.2f", v);
        return std::string(buf);
    };
    for (const auto& r : rows) {
        const auto& c = r.point.config;
        out << r.point.index << ',' << r.point.label << ',' << to_string(c.method) << ',' << format_number(c.fps) << ','
            << feature_name(c) << ',' << to_string(c.model.rnn_cell) << ',' << format_number(c.augment.max_dev * 1000)
            << ',' << format_number(c.augment.max_tempo_factor);
        if (r.report) {
            out << ',' << fixed2(r.report->mean * 1000) << ',' << fixed2(r.report->median * 1000) << ','
                << fixed2(r.report->std * 1000);
            for (double tol : kTolerances) out << ',' << fixed2(r.report->accuracy_at(tol));
            out << ",ok\n";
        } else {
            out << ",,,";
            for (std::size_t k = 0; k < kTolerances.size(); ++k) out << ',';
            std::string msg = r.error;
            std::replace(msg.begin(), msg.end(), ',', ';');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            out << ",failed: " << msg << '\n';
        }
    }
    return out.str();
}

// --- synthetic corpus ----------------------------------------------------------------

SplitScheme synthetic_split_scheme() {
    return {{"train", Split::train}, {"valid", Split::valid}, {"test", Split::test}};
}

std::vector<PieceInput> synthesize_corpus(const SynthCorpusConfig& cfg) {
    if (cfg.pieces == 0) throw ArgumentError("synthesize_corpus: no pieces requested");
    if (!(cfg.valid_fraction >= 0) || !(cfg.test_fraction >= 0) || cfg.valid_fraction + cfg.test_fraction >= 1)
        throw ArgumentError("synthesize_corpus: split fractions must be non-negative and sum below 1");
    const auto n = cfg.pieces;
    const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(n)));
    const auto n_valid = static_cast<std::size_t>(std::llround(cfg.valid_fraction * static_cast<double>(n)));
    std::vector<PieceInput> pieces(n);
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < n; ++i) {
        RandomPieceParams params = cfg.notes;
        params.duration = cfg.piece_seconds;
        std::ostringstream name;
        name << "piece_" << std::setw(3) << std::setfill('0') << i;
        pieces[i].name = name.str();
        pieces[i].group = i >= n - n_test ? "test" : i >= n - n_test - n_valid ? "valid" : "train";
        pieces[i].notes = generate_random_piece(params, segment_seed(cfg.seed, i, 0));
        pieces[i].audio = render_notes_to_audio(pieces[i].notes, kPipelineSampleRate, cfg.synth);
    }
    return pieces;
}

}  // namespace midialign
