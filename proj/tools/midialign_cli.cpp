#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "midialign/errors.hpp"
#include "midialign/pipeline.hpp"

namespace fs = std::filesystem;
using namespace midialign;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

/// 2-D little-endian float32 array in NumPy .npy format (version 1.0).
void write_npy(const Matrix<float>& m, const fs::path& path) {
    std::ostringstream header;
    header << "{'descr': '<f4', 'fortran_order': False, 'shape': (" << m.rows() << ", " << m.cols() << "), }";
    std::string h = header.str();
    const std::size_t unpadded = 10 + h.size() + 1;
    h.append((64 - unpadded % 64) % 64, ' ');
    h.push_back('\n');
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write("\x93NUMPY\x01\x00", 8);
    const auto len = static_cast<std::uint16_t>(h.size());
    const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
    out.write(len_bytes, 2);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char*>(m.storage().data()), static_cast<std::streamsize>(m.storage().size() * sizeof(float)));
    if (!out) throw IoError("write failed: " + path.string());
}

/// Flag values that override the configuration file.
struct Overrides {
    std::optional<std::string> method, feature, scale, rnn_cell, distribution, manifest, weights;
    std::optional<double> fps, threshold, max_dev, max_tempo_factor, lr, dropout;
    std::optional<int> epochs, min_epochs, patience, batch_size, crop, hidden, dense, filters;
    std::optional<bool> retrain;

    void add_pipeline(CLI::App* app) {
        app->add_option("--method", method, "none, dtw, crnn or dtw_then_crnn");
        app->add_option("--feature", feature, "cqt or mel");
        app->add_option("--scale", scale, "lin or log");
        app->add_option("--fps", fps, "Frame rate of rolls and spectrograms");
        app->add_option("--threshold", threshold, "Activation threshold");
        app->add_option("--weights", weights, "Model weight file");
    }
    void add_augment(CLI::App* app) {
        app->add_option("--max-dev", max_dev, "Maximum timing deviation in seconds");
        app->add_option("--max-tempo-factor", max_tempo_factor, "Tempo factor range around 1");
        app->add_option("--distribution", distribution, "uniform or truncated_normal");
    }
    void add_model(CLI::App* app) {
        app->add_option("--rnn-cell", rnn_cell, "lstm or gru");
        app->add_option("--hidden", hidden, "Recurrent units per direction");
        app->add_option("--dense", dense, "Embedding size per branch");
        app->add_option("--filters", filters, "Filters of the first two conv layers (third gets twice as many)");
        app->add_option("--dropout", dropout, "Dropout probability");
        app->add_option("--epochs", epochs, "Maximum epochs");
        app->add_option("--min-epochs", min_epochs, "Epochs before early stopping may trigger");
        app->add_option("--patience", patience, "Early stopping patience");
        app->add_option("--batch-size", batch_size, "Batch size");
        app->add_option("--crop", crop, "Training crop length in frames");
        app->add_option("--lr", lr, "Adam learning rate");
        app->add_option("--retrain-on-dtw-input", retrain, "dtw_then_crnn: train on DTW-aligned input rolls");
    }

    void apply(PipelineConfig& cfg) const {
        if (method) cfg.method = method_from_string(*method);
        if (feature) {
            const FeatureKind k = feature_kind_from_string(*feature);
            if (k != FeatureKind::cqt && k != FeatureKind::mel) throw ConfigError("--feature must be cqt or mel");
            cfg.feature = k;
        }
        if (scale) cfg.scale = feature_scale_from_string(*scale);
        if (fps) cfg.fps = *fps;
        if (threshold) cfg.threshold = *threshold;
        if (weights) cfg.weights = *weights;
        if (manifest) cfg.manifest = *manifest;
        if (max_dev) cfg.augment.max_dev = *max_dev;
        if (max_tempo_factor) cfg.augment.max_tempo_factor = *max_tempo_factor;
        if (distribution) cfg.augment.distribution = shift_distribution_from_string(*distribution);
        if (rnn_cell) cfg.model.rnn_cell = rnn_cell_from_string(*rnn_cell);
        if (hidden) cfg.model.rnn_hidden = *hidden;
        if (dense) cfg.model.dense_embed = *dense;
        if (filters) cfg.model.conv_filters = {*filters, *filters, 2 * *filters};
        if (dropout) cfg.model.dropout = *dropout;
        if (epochs) cfg.train.max_epochs = *epochs;
        if (min_epochs) cfg.train.min_epochs = *min_epochs;
        if (patience) cfg.train.patience = *patience;
        if (batch_size) cfg.train.batch_size = *batch_size;
        if (crop) cfg.train.sequence_crop = *crop;
        if (lr) cfg.train.lr = *lr;
        if (retrain) cfg.retrain_on_dtw_input = *retrain;
    }
};

struct Globals {
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
};

PipelineConfig resolve_config(const Globals& g, const Overrides& o) {
    PipelineConfig cfg = g.config ? load_pipeline_config(*g.config) : PipelineConfig{};
    o.apply(cfg);
    if (g.seed) cfg.apply_seed(*g.seed);
    cfg.validate();
    return cfg;
}

std::vector<LoadedTriplet> load_manifest_split(const PipelineConfig& cfg, const std::string& split) {
    if (cfg.manifest.empty()) throw ConfigError("no dataset manifest given (use --manifest or paths.manifest)");
    auto data = load_dataset(read_manifest(cfg.manifest));
    if (split == "all") return data;
    return select_split(data, split_from_string(split));
}

std::optional<Crnn<float>> load_model_if_needed(const PipelineConfig& cfg) {
    if (!uses_crnn(cfg.method)) return std::nullopt;
    if (cfg.weights.empty()) throw ConfigError("method '" + std::string(to_string(cfg.method)) + "' needs --weights");
    return Crnn<float>::from_store(load_weights(cfg.weights, nullptr));
}

// --- subcommands ----------------------------------------------------------------

struct SynthArgs {
    std::string out;
    std::size_t pieces = 10;
    double piece_seconds = 30.0;
    double valid_fraction = 0.15, test_fraction = 0.15;
};

int run_synth(const Globals& g, const SynthArgs& a) {
    SynthCorpusConfig sc;
    sc.pieces = a.pieces;
    sc.piece_seconds = a.piece_seconds;
    sc.valid_fraction = a.valid_fraction;
    sc.test_fraction = a.test_fraction;
    if (g.seed) sc.seed = *g.seed;
    const auto corpus = synthesize_corpus(sc);
    const fs::path out(a.out);
    fs::create_directories(out);
    nlohmann::ordered_json list = nlohmann::ordered_json::array();
    for (const auto& p : corpus) {
        write_wav(p.audio, out / (p.name + ".wav"));
        write_midi(p.notes, out / (p.name + ".mid"));
        list.push_back({{"name", p.name}, {"group", p.group}, {"audio", p.name + ".wav"}, {"midi", p.name + ".mid"}});
    }
    write_text(out / "corpus.json", list.dump(2) + "\n");
    if (!g.quiet) std::cout << "wrote " << corpus.size() << " pieces to " << out.string() << "\n";
    return 0;
}

struct AugmentArgs {
    std::string corpus, out, scheme = "synthetic";
    std::optional<double> segment_seconds;
};

int run_augment(const Globals& g, const Overrides& o, const AugmentArgs& a) {
    const PipelineConfig cfg = resolve_config(g, o);
    AugmentConfig ac = cfg.augment;
    if (a.segment_seconds) ac.segment_seconds = *a.segment_seconds;
    ac.validate();

    std::ifstream in(a.corpus);
    if (!in) throw IoError("cannot open " + a.corpus);
    nlohmann::json list;
    try {
        list = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(a.corpus + ": " + e.what());
    }
    const fs::path base = fs::path(a.corpus).parent_path();
    std::vector<PieceInput> pieces;
    for (const auto& item : list) {
        PieceInput p;
        p.name = item.at("name").get<std::string>();
        p.group = item.value("group", std::string("train"));
        p.audio = read_wav(base / item.at("audio").get<std::string>());
        if (p.audio.sample_rate != kPipelineSampleRate) p.audio = resample(p.audio, kPipelineSampleRate);
        p.notes = parse_midi(base / item.at("midi").get<std::string>());
        pieces.push_back(std::move(p));
    }
    SplitScheme scheme;
    if (a.scheme == "synthetic")
        scheme = synthetic_split_scheme();
    else if (a.scheme == "maps")
        scheme = maps_split_scheme();
    else if (a.scheme != "none")
        throw ConfigError("unknown split scheme '" + a.scheme + "' (expected synthetic, maps or none)");

    const auto result = build_dataset(pieces, ac, a.out, scheme);
    for (const auto& f : result.failures) std::cerr << "warning: " << f << "\n";
    if (!g.quiet)
        std::cout << "wrote " << result.triplets.size() << " triplets to " << (fs::path(a.out) / "manifest.json").string()
                  << "\n";
    return result.triplets.empty() ? kExitRuntime : 0;
}

struct FeaturesArgs {
    std::optional<std::string> audio, midi;
    std::string kind = "cqt", out;
    std::optional<double> duration;
};

int run_features(const Globals& g, const Overrides& o, const FeaturesArgs& a) {
    PipelineConfig cfg = resolve_config(g, o);
    const FeatureKind kind = feature_kind_from_string(a.kind);
    Matrix<float> values;
    if (kind == FeatureKind::roll) {
        if (!a.midi) throw ConfigError("--kind roll needs --midi");
        const NoteSequence seq = parse_midi(*a.midi);
        const double duration = a.duration ? *a.duration : seq.duration;
        values = roll_matrix(seq, cfg.fps, frame_count(duration, cfg.fps));
    } else {
        if (!a.audio) throw ConfigError("--kind " + a.kind + " needs --audio");
        AudioBuffer audio = read_wav(*a.audio);
        if (audio.sample_rate != kPipelineSampleRate) audio = resample(audio, kPipelineSampleRate);
        if (kind == FeatureKind::cqt || kind == FeatureKind::mel) {
            cfg.feature = kind;
            values = audio_features(audio, cfg).values;
        } else {
            cfg.feature = FeatureKind::cqt;
            cfg.scale = FeatureScale::log;
            const auto sync = sync_features(audio_features(audio, cfg));
            values = kind == FeatureKind::chroma ? sync.chroma.values : sync.dlnco.values;
        }
    }
    write_npy(values, a.out);
    if (!g.quiet) std::cout << a.out << ": " << values.rows() << " x " << values.cols() << "\n";
    return 0;
}

struct TrainArgs {
    std::string out, log;
};

int run_train(const Globals& g, const Overrides& o, const TrainArgs& a) {
    PipelineConfig cfg = resolve_config(g, o);
    if (!uses_crnn(cfg.method)) cfg.method = Method::crnn;
    const auto data = load_manifest_split(cfg, "all");
    const auto result = train_model(cfg, data, [&](const EpochLog& e) {
        if (!g.quiet) std::printf("epoch %d train %.5f valid %.5f\n", e.epoch, e.train_loss, e.valid_loss);
        std::fflush(stdout);
    });
    save_weights(result.weights, a.out);
    if (!a.log.empty()) write_training_log(result.log, a.log);
    if (!g.quiet) std::cout << "best epoch " << result.best_epoch << ", weights written to " << a.out << "\n";
    return 0;
}

struct AlignArgs {
    std::optional<std::string> audio, midi, out, out_dir;
    std::string split = "test";
};

fs::path estimate_path(const fs::path& dir, const std::string& name) { return dir / (name + ".est.mid"); }

int run_align(const Globals& g, const Overrides& o, const AlignArgs& a) {
    const PipelineConfig cfg = resolve_config(g, o);
    const auto model = load_model_if_needed(cfg);
    const Crnn<float>* mp = model ? &*model : nullptr;
    if (a.audio || a.midi) {
        if (!a.audio || !a.midi || !a.out) throw ConfigError("single-file alignment needs --audio, --midi and --out");
        LoadedTriplet t;
        t.name = fs::path(*a.midi).stem().string();
        t.audio = read_wav(*a.audio);
        if (t.audio.sample_rate != kPipelineSampleRate) t.audio = resample(t.audio, kPipelineSampleRate);
        t.unaligned = read_midi(*a.midi).notes;
        write_midi(run_align(cfg, t, mp), *a.out);
        return 0;
    }
    if (!a.out_dir) throw ConfigError("dataset alignment needs --out-dir");
    const auto data = load_manifest_split(cfg, a.split);
    const fs::path dir(*a.out_dir);
    fs::create_directories(dir);
    std::vector<std::string> errors(data.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < data.size(); ++i) {
        try {
            write_midi(midialign::run_align(cfg, data[i], mp), estimate_path(dir, data[i].name));
        } catch (const std::exception& e) {
            errors[i] = data[i].name + ": " + e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw Error(e);
    if (!g.quiet) std::cout << "aligned " << data.size() << " triplets into " << dir.string() << "\n";
    return 0;
}

struct EvaluateArgs {
    std::optional<std::string> estimates, est, ref, out, csv;
    std::string split = "test";
    bool no_timestamp = false;
};

int run_evaluate(const Globals& g, const Overrides& o, const EvaluateArgs& a) {
    const PipelineConfig cfg = resolve_config(g, o);
    if (a.est || a.ref) {
        if (!a.est || !a.ref) throw ConfigError("pairwise evaluation needs both --est and --ref");
        const auto est = read_midi(*a.est), ref = read_midi(*a.ref);
        const auto errors = est.has_ids && ref.has_ids ? onset_errors(est.notes, ref.notes)
                                                       : onset_errors_by_matching(est.notes, ref.notes);
        const auto report = accuracy_report(errors);
        const std::string text = to_json(report).dump(2) + "\n";
        if (a.out)
            write_text(*a.out, text);
        else
            std::cout << summary_json(report).dump(2) << "\n";
        return 0;
    }

    const auto data = load_manifest_split(cfg, a.split);
    DatasetReport report;
    if (a.estimates) {
        std::vector<NoteSequence> estimates;
        for (const auto& t : data) estimates.push_back(read_midi(estimate_path(*a.estimates, t.name)).notes);
        report = evaluate_estimates(data, estimates, cfg.method);
    } else {
        const auto model = load_model_if_needed(cfg);
        report = evaluate_method(cfg, data, model ? &*model : nullptr);
    }
    const std::string stamp = a.no_timestamp ? "" : utc_timestamp();
    const std::string text = to_json(report, stamp).dump(2) + "\n";
    if (a.out) write_text(*a.out, text);
    const std::string table = to_csv(compare_methods({{std::string(to_string(cfg.method)), report.overall}}));
    if (a.csv) write_text(*a.csv, table);
    if (!g.quiet) std::cout << table;
    return 0;
}

struct ExperimentArgs {
    std::string grid, out;
};

int run_experiment_cmd(const Globals& g, const Overrides& o, const ExperimentArgs& a) {
    const PipelineConfig cfg = resolve_config(g, o);
    std::ifstream in(a.grid);
    if (!in) throw IoError("cannot open " + a.grid);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(a.grid + ": " + e.what());
    }
    const ExperimentGrid grid = experiment_grid_from_json(j);
    const auto data = load_manifest_split(cfg, "all");
    const auto rows = run_experiment(cfg, grid, data, a.out, [&](const ExperimentRow& r) {
        if (g.quiet) return;
        std::cout << "[" << r.point.index << "] " << r.point.label << ": ";
        if (r.report)
            std::printf("mean %.2f ms, acc10 %.2f%%%s\n", r.report->mean * 1000, r.report->accuracy_at(0.010),
                        r.resumed ? " (resumed)" : "");
        else
            std::cout << "failed: " << r.error << "\n";
        std::fflush(stdout);
    });
    std::size_t failed = 0;
    for (const auto& r : rows) failed += r.report ? 0 : 1;
    if (!g.quiet) std::cout << "results: " << (fs::path(a.out) / "results.csv").string() << "\n";
    return failed == rows.size() && !rows.empty() ? kExitRuntime : 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Score-to-audio note alignment with DTW and a convolutional recurrent network"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "Pipeline configuration (JSON)");
    app.add_option("--seed", g.seed, "Seed for every stochastic component");
    app.add_flag("-q,--quiet", g.quiet, "Only report errors");

    Overrides o;

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "Render a random piano corpus");
    c_synth->add_option("--out", synth.out, "Output directory")->required();
    c_synth->add_option("--pieces", synth.pieces, "Number of pieces");
    c_synth->add_option("--piece-seconds", synth.piece_seconds, "Length of each piece");
    c_synth->add_option("--valid-fraction", synth.valid_fraction, "Share of pieces for validation");
    c_synth->add_option("--test-fraction", synth.test_fraction, "Share of pieces for testing");

    AugmentArgs aug;
    auto* c_aug = app.add_subcommand("augment", "Segment a corpus and write perturbed training triplets");
    c_aug->add_option("--corpus", aug.corpus, "corpus.json written by synth")->required();
    c_aug->add_option("--out", aug.out, "Dataset directory")->required();
    c_aug->add_option("--scheme", aug.scheme, "Split scheme: synthetic, maps or none");
    c_aug->add_option("--segment-seconds", aug.segment_seconds, "Target segment length");
    o.add_augment(c_aug);

    FeaturesArgs feat;
    auto* c_feat = app.add_subcommand("features", "Write a feature matrix as .npy");
    c_feat->add_option("--audio", feat.audio, "Input WAV");
    c_feat->add_option("--midi", feat.midi, "Input MIDI (for --kind roll)");
    c_feat->add_option("--duration", feat.duration, "Roll duration in seconds");
    c_feat->add_option("--kind", feat.kind, "cqt, mel, chroma, dlnco or roll");
    c_feat->add_option("--out", feat.out, "Output .npy")->required();
    o.add_pipeline(c_feat);

    TrainArgs train;
    auto* c_train = app.add_subcommand("train", "Train the network on a dataset manifest");
    c_train->add_option("--manifest", o.manifest, "Dataset manifest");
    c_train->add_option("--out", train.out, "Weight file")->required();
    c_train->add_option("--log", train.log, "Per-epoch loss CSV");
    o.add_pipeline(c_train);
    o.add_model(c_train);

    AlignArgs al;
    auto* c_align = app.add_subcommand("align", "Align MIDI to audio");
    c_align->add_option("--audio", al.audio, "Single audio file");
    c_align->add_option("--midi", al.midi, "Single unaligned MIDI file");
    c_align->add_option("--out", al.out, "Aligned MIDI output");
    c_align->add_option("--manifest", o.manifest, "Dataset manifest");
    c_align->add_option("--split", al.split, "train, valid, test or all");
    c_align->add_option("--out-dir", al.out_dir, "Directory for <name>.est.mid files");
    o.add_pipeline(c_align);

    EvaluateArgs ev;
    auto* c_eval = app.add_subcommand("evaluate", "Onset accuracy against the aligned reference");
    c_eval->add_option("--manifest", o.manifest, "Dataset manifest");
    c_eval->add_option("--split", ev.split, "train, valid, test or all");
    c_eval->add_option("--estimates", ev.estimates, "Directory written by align --out-dir");
    c_eval->add_option("--est", ev.est, "Single estimated MIDI");
    c_eval->add_option("--ref", ev.ref, "Single reference MIDI");
    c_eval->add_option("--out", ev.out, "Report JSON");
    c_eval->add_option("--csv", ev.csv, "Summary CSV");
    c_eval->add_flag("--no-timestamp", ev.no_timestamp, "Leave generated_at empty");
    o.add_pipeline(c_eval);

    ExperimentArgs ex;
    auto* c_exp = app.add_subcommand("experiment", "Train and evaluate every point of a configuration grid");
    c_exp->add_option("--grid", ex.grid, "Grid JSON")->required();
    c_exp->add_option("--manifest", o.manifest, "Dataset manifest");
    c_exp->add_option("--out", ex.out, "Output directory")->required();
    o.add_pipeline(c_exp);
    o.add_augment(c_exp);
    o.add_model(c_exp);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*c_synth) return run_synth(g, synth);
        if (*c_aug) return run_augment(g, o, aug);
        if (*c_feat) return run_features(g, o, feat);
        if (*c_train) return run_train(g, o, train);
        if (*c_align) return run_align(g, o, al);
        if (*c_eval) return run_evaluate(g, o, ev);
        if (*c_exp) return run_experiment_cmd(g, o, ex);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
