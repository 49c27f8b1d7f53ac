#include "midialign/augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "midialign/errors.hpp"

namespace midialign {

using nlohmann::json;

std::string_view to_string(ShiftDistribution d) {
    return d == ShiftDistribution::uniform ? "uniform" : "truncated_normal";
}

ShiftDistribution shift_distribution_from_string(std::string_view name) {
    if (name == "uniform") return ShiftDistribution::uniform;
    if (name == "truncated_normal") return ShiftDistribution::truncated_normal;
    throw ConfigError("unknown shift distribution '" + std::string(name) + "' (expected uniform|truncated_normal)");
}

void AugmentConfig::validate() const {
    if (!(max_dev >= 0.0 && max_dev <= 0.5)) throw ConfigError("max_dev must lie in [0, 0.5] seconds");
    if (!(max_tempo_factor >= 0.0 && max_tempo_factor < 1.0)) throw ConfigError("max_tempo_factor must lie in [0, 1)");
    if (!(min_duration > 0.0)) throw ConfigError("min_duration must be positive");
    if (!(sigma_ratio > 0.0)) throw ConfigError("sigma_ratio must be positive");
    if (!(segment_seconds > 0.0)) throw ConfigError("segment_seconds must be positive");
}

Note apply_shift(const Note& note, double onset_shift, double offset_shift, double min_duration) {
    Note out = note;
    out.onset = std::max(0.0, note.onset + onset_shift);
    out.offset = note.offset + offset_shift;
    if (out.offset - out.onset < min_duration) out.offset = out.onset + min_duration;
    return out;
}

namespace {

double draw_shift(const AugmentConfig& cfg, Rng& rng) {
    if (cfg.distribution == ShiftDistribution::uniform) {
        std::uniform_real_distribution<double> u(-cfg.max_dev, cfg.max_dev);
        return u(rng);
    }
    std::normal_distribution<double> g(0.0, cfg.sigma_ratio * cfg.max_dev);
    for (;;) {
        const double v = g(rng);
        if (std::abs(v) <= cfg.max_dev) return v;
    }
}

}  // namespace

NoteSequence perturb_timing(const NoteSequence& seq, const AugmentConfig& cfg, Rng& rng) {
    cfg.validate();
    if (cfg.max_dev == 0.0) return seq;
    NoteSequence out;
    out.duration = seq.duration;
    out.notes.reserve(seq.notes.size());
    for (const Note& n : seq.notes) {
        const double on = draw_shift(cfg, rng);
        const double off = draw_shift(cfg, rng);
        out.notes.push_back(apply_shift(n, on, off, cfg.min_duration));
    }
    out.normalize();
    return out;
}

NoteSequence scale_tempo(const NoteSequence& seq, double factor) {
    if (!(factor > 0.0)) throw ArgumentError("scale_tempo: factor must be positive");
    NoteSequence out = seq;
    if (factor == 1.0) return out;
    for (Note& n : out.notes) {
        n.onset *= factor;
        n.offset *= factor;
    }
    out.duration *= factor;
    out.normalize();
    return out;
}

double sample_tempo_factor(const AugmentConfig& cfg, Rng& rng) {
    if (cfg.max_tempo_factor == 0.0) return 1.0;
    std::uniform_real_distribution<double> u(1.0 - cfg.max_tempo_factor, 1.0 + cfg.max_tempo_factor);
    return u(rng);
}

std::uint64_t segment_seed(std::uint64_t base, std::size_t piece, std::size_t segment) {
    // splitmix64 over the three inputs
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(base) ^ piece) ^ (static_cast<std::uint64_t>(segment) << 1));
}

std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::valid: return "valid";
        case Split::test: return "test";
    }
    return "?";
}

Split split_from_string(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "valid") return Split::valid;
    if (name == "test") return Split::test;
    throw ConfigError("unknown split '" + std::string(name) + "' (expected train|valid|test)");
}

bool is_bijection(const NoteIdMap& map, const NoteSequence& a, const NoteSequence& b) {
    if (map.size() != a.size() || map.size() != b.size()) return false;
    std::set<NoteId> ids_a, ids_b, seen_a, seen_b;
    for (const Note& n : a.notes) ids_a.insert(n.id);
    for (const Note& n : b.notes) ids_b.insert(n.id);
    for (const auto& [x, y] : map) {
        if (!ids_a.count(x) || !ids_b.count(y)) return false;
        if (!seen_a.insert(x).second || !seen_b.insert(y).second) return false;
    }
    return true;
}

SplitScheme maps_split_scheme() {
    SplitScheme s;
    for (const char* g : {"AkPnBcht", "AkPnBsdf", "AkPnCGdD", "AkPnStgb", "SptkBGAm", "SptkBGCl", "StbgTGd2"})
        s[g] = Split::train;
    s["ENSTDkAm"] = Split::valid;
    s["ENSTDkCl"] = Split::test;
    return s;
}

std::vector<Split> split_dataset(const std::vector<DatasetTriplet>& triplets, const SplitScheme& scheme) {
    std::vector<Split> out;
    out.reserve(triplets.size());
    for (const auto& t : triplets) {
        if (scheme.empty()) {
            out.push_back(Split::train);
            continue;
        }
        auto it = scheme.find(t.group);
        if (it == scheme.end()) throw ConfigError("split scheme has no entry for group '" + t.group + "'");
        out.push_back(it->second);
    }
    return out;
}

NoteSequence make_unaligned(const NoteSequence& aligned, const AugmentConfig& cfg, std::uint64_t seed, double* tempo) {
    Rng rng(seed);
    NoteSequence out = perturb_timing(quantize_to_midi_grid(aligned), cfg, rng);
    const double factor = sample_tempo_factor(cfg, rng);
    if (tempo) *tempo = factor;
    return scale_tempo(out, factor);
}

DatasetBuildResult build_dataset(const std::vector<PieceInput>& pieces, const AugmentConfig& cfg,
                                 const std::filesystem::path& out_dir, const SplitScheme& scheme) {
    if (pieces.empty()) throw ArgumentError("build_dataset: no pieces given");
    cfg.validate();
    std::filesystem::create_directories(out_dir);

    std::vector<std::vector<DatasetTriplet>> per_piece(pieces.size());
    std::vector<std::vector<std::string>> failures(pieces.size());

#pragma omp parallel for schedule(dynamic)
    for (std::size_t p = 0; p < pieces.size(); ++p) {
        const PieceInput& piece = pieces[p];
        std::vector<Segment> segments;
        try {
            segments = segment_at_silence(piece.notes, piece.audio.duration(), cfg.segment_seconds);
        } catch (const std::exception& e) {
            failures[p].push_back(piece.name + ": " + e.what());
            continue;
        }
        for (std::size_t s = 0; s < segments.size(); ++s) {
            const Segment& seg = segments[s];
            std::ostringstream stem;
            stem << piece.name << '_' << std::setw(3) << std::setfill('0') << s;
            DatasetTriplet t;
            t.group = piece.group;
            t.piece = piece.name;
            t.segment = s;
            t.seed = segment_seed(cfg.seed, p, s);
            t.max_dev = cfg.max_dev;
            t.audio_path = out_dir / (stem.str() + ".wav");
            t.aligned_midi_path = out_dir / (stem.str() + ".aligned.mid");
            t.unaligned_midi_path = out_dir / (stem.str() + ".unaligned.mid");
            try {
                const NoteSequence aligned = quantize_to_midi_grid(seg.notes);
                const NoteSequence unaligned = make_unaligned(aligned, cfg, t.seed, &t.tempo_factor);

                const double sr = piece.audio.sample_rate;
                const auto a = std::min(piece.audio.samples.size(), static_cast<std::size_t>(std::llround(seg.start * sr)));
                const auto b = std::min(piece.audio.samples.size(), static_cast<std::size_t>(std::llround(seg.end * sr)));
                AudioBuffer slice;
                slice.sample_rate = sr;
                slice.samples.assign(piece.audio.samples.begin() + static_cast<std::ptrdiff_t>(a),
                                     piece.audio.samples.begin() + static_cast<std::ptrdiff_t>(b));

                write_wav(slice, t.audio_path);
                write_midi(aligned, t.aligned_midi_path);
                write_midi(unaligned, t.unaligned_midi_path);
                for (const Note& n : aligned.notes) t.note_id_map.emplace_back(n.id, n.id);
                per_piece[p].push_back(std::move(t));
            } catch (const std::exception& e) {
                failures[p].push_back(stem.str() + ": " + e.what());
            }
        }
    }

    DatasetBuildResult result;
    for (std::size_t p = 0; p < pieces.size(); ++p) {
        for (auto& t : per_piece[p]) result.triplets.push_back(std::move(t));
        for (auto& f : failures[p]) result.failures.push_back(std::move(f));
    }
    const auto splits = split_dataset(result.triplets, scheme);
    for (std::size_t i = 0; i < splits.size(); ++i) result.triplets[i].split = splits[i];
    write_manifest(result.triplets, out_dir / "manifest.json");
    return result;
}

namespace {

std::string relative_to(const std::filesystem::path& p, const std::filesystem::path& base) {
    const auto rel = std::filesystem::relative(p, base);
    return (rel.empty() ? p : rel).generic_string();
}

}  // namespace

void write_manifest(const std::vector<DatasetTriplet>& triplets, const std::filesystem::path& path) {
    const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    json arr = json::array();
    for (const auto& t : triplets) {
        arr.push_back({{"audio", relative_to(t.audio_path, base)},
                       {"aligned_midi", relative_to(t.aligned_midi_path, base)},
                       {"unaligned_midi", relative_to(t.unaligned_midi_path, base)},
                       {"split", std::string(to_string(t.split))},
                       {"seed", t.seed},
                       {"max_dev", t.max_dev},
                       {"tempo_factor", t.tempo_factor},
                       {"group", t.group},
                       {"piece", t.piece},
                       {"segment", t.segment}});
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << arr.dump(2) << '\n';
    if (!out) throw IoError("error writing " + path.string());
}

std::vector<DatasetTriplet> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    json arr;
    try {
        arr = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    if (!arr.is_array()) throw ConfigError("manifest " + path.string() + " must be a JSON array");
    const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    std::vector<DatasetTriplet> out;
    for (const auto& e : arr) {
        try {
            DatasetTriplet t;
            t.audio_path = base / e.at("audio").get<std::string>();
            t.aligned_midi_path = base / e.at("aligned_midi").get<std::string>();
            t.unaligned_midi_path = base / e.at("unaligned_midi").get<std::string>();
            t.split = split_from_string(e.at("split").get<std::string>());
            t.seed = e.value("seed", std::uint64_t{0});
            t.max_dev = e.value("max_dev", 0.0);
            t.tempo_factor = e.value("tempo_factor", 1.0);
            t.group = e.value("group", std::string{});
            t.piece = e.value("piece", std::string{});
            t.segment = e.value("segment", std::size_t{0});
            out.push_back(std::move(t));
        } catch (const json::exception& ex) {
            throw ConfigError("manifest entry " + std::to_string(out.size()) + ": " + ex.what());
        }
    }
    return out;
}

NoteSequence generate_random_piece(const RandomPieceParams& params, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * unit(rng); };
    auto pick = [&](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };

    NoteSequence seq;
    std::uint32_t next_id = 0;
    double t = uni(0.1, 0.5);
    std::map<int, std::size_t> sounding;  // pitch -> index of its latest note
    int center = pick(params.low_pitch + 6, params.high_pitch - 6);
    while (t < params.duration - 1.0) {
        const double phrase_end = std::min(params.duration - 0.5, t + uni(params.phrase_min, params.phrase_max));
        double last_offset = t;
        int last_pitch = -1;
        while (t < phrase_end - 0.1) {
            const int chord = pick(1, params.max_chord);
            std::set<int> used;
            for (int c = 0; c < chord; ++c) {
                int pitch;
                if (c == 0 && last_pitch > 0 && unit(rng) < params.repeat_probability) {
                    pitch = last_pitch;
                } else {
                    pitch = std::clamp(center + pick(-7, 7), params.low_pitch, params.high_pitch);
                }
                if (!used.insert(pitch).second) continue;
                Note n;
                n.id = NoteId{next_id++};
                n.pitch = pitch;
                n.onset = t;
                n.offset = std::min(phrase_end, t + uni(0.08, 0.7));
                if (n.offset - n.onset < 0.05) n.offset = n.onset + 0.05;
                n.velocity = pick(50, 110);
                last_offset = std::max(last_offset, n.offset);
                // A key is released before it is struck again.
                if (auto it = sounding.find(pitch); it != sounding.end()) {
                    Note& prev = seq.notes[it->second];
                    prev.offset = std::min(prev.offset, t - 0.03);
                }
                sounding[pitch] = seq.notes.size();
                seq.notes.push_back(n);
                if (c == 0) last_pitch = pitch;
            }
            t += uni(0.1, 0.45);
            center = std::clamp(center + pick(-2, 2), params.low_pitch + 6, params.high_pitch - 6);
        }
        t = last_offset + uni(params.rest_min, params.rest_max);
    }
    seq.duration = params.duration;
    seq.normalize();
    return seq;
}

}  // namespace midialign
