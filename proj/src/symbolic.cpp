#include "midialign/symbolic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>

#include "midialign/errors.hpp"

namespace midialign {

void NoteSequence::normalize() {
    std::sort(notes.begin(), notes.end(), [](const Note& a, const Note& b) {
        if (a.onset != b.onset) return a.onset < b.onset;
        if (a.pitch != b.pitch) return a.pitch < b.pitch;
        return a.id < b.id;
    });
    duration = std::max(duration, max_offset());
}

void NoteSequence::validate() const {
    std::set<NoteId> ids;
    for (std::size_t i = 0; i < notes.size(); ++i) {
        const Note& n = notes[i];
        const std::string where = "note " + std::to_string(n.id.value);
        if (n.pitch < kLowestPitch || n.pitch > kHighestPitch)
            throw ArgumentError(where + ": pitch " + std::to_string(n.pitch) + " outside 21..108");
        if (!(n.onset >= 0.0)) throw ArgumentError(where + ": negative onset");
        if (!(n.offset > n.onset)) throw ArgumentError(where + ": offset must exceed onset");
        if (n.velocity < 1 || n.velocity > 127) throw ArgumentError(where + ": velocity outside 1..127");
        if (!ids.insert(n.id).second) throw ArgumentError(where + ": duplicate id");
        if (n.offset > duration + 1e-9) throw ArgumentError(where + ": offset beyond sequence duration");
        if (i > 0) {
            const Note& p = notes[i - 1];
            if (p.onset > n.onset || (p.onset == n.onset && p.pitch > n.pitch))
                throw ArgumentError("notes not sorted by (onset, pitch)");
        }
    }
}

double NoteSequence::max_offset() const {
    double m = 0.0;
    for (const Note& n : notes) m = std::max(m, n.offset);
    return m;
}

const Note* NoteSequence::find(NoteId id) const {
    for (const Note& n : notes)
        if (n.id == id) return &n;
    return nullptr;
}

std::size_t frame_count(double duration, double fps) {
    if (duration <= 0.0) return 0;
    return static_cast<std::size_t>(std::ceil(duration * fps - 1e-9));
}

PianoRoll to_piano_roll(const NoteSequence& seq, double fps) {
    const std::size_t n_frames = frame_count(seq.duration, fps);
    PianoRoll roll{Matrix<std::uint8_t>(n_frames, kPitchCount, 0), fps};
    if (n_frames == 0) return roll;

    struct Span {
        int column;
        std::size_t begin, end;
    };
    std::vector<Span> spans;
    spans.reserve(seq.notes.size());
    for (const Note& n : seq.notes) {
        const int column = n.pitch - kLowestPitch;
        if (column < 0 || column >= kPitchCount) continue;
        auto to_frame = [&](double t) {
            const long long f = std::llround(t * fps);
            return static_cast<std::size_t>(std::clamp<long long>(f, 0, static_cast<long long>(n_frames)));
        };
        std::size_t begin = std::min(to_frame(n.onset), n_frames - 1);
        std::size_t end = std::max(to_frame(n.offset), begin + 1);
        end = std::min(end, n_frames);
        spans.push_back({column, begin, end});
    }

    Matrix<std::uint8_t> is_onset(n_frames, kPitchCount, 0);
    for (const Span& s : spans) {
        for (std::size_t r = s.begin; r < s.end; ++r) roll.frames(r, s.column) = 1;
        is_onset(s.begin, s.column) = 1;
    }
    // A frame directly before an onset that is lit by another note of the
    // same pitch is cleared, unless it is itself an onset frame.
    for (const Span& s : spans) {
        if (s.begin == 0) continue;
        const std::size_t prev = s.begin - 1;
        if (roll.frames(prev, s.column) && !is_onset(prev, s.column)) roll.frames(prev, s.column) = 0;
    }
    return roll;
}

namespace {

struct Gap {
    double begin, end;  // closed interval with no sounding note
};

std::vector<Gap> silent_gaps(const NoteSequence& seq, double end_time) {
    std::vector<std::pair<double, double>> iv;
    iv.reserve(seq.notes.size());
    for (const Note& n : seq.notes) iv.emplace_back(n.onset, n.offset);
    std::sort(iv.begin(), iv.end());
    std::vector<Gap> gaps;
    double cursor = 0.0;
    for (const auto& [a, b] : iv) {
        if (a >= cursor) gaps.push_back({cursor, a});
        cursor = std::max(cursor, b);
    }
    if (end_time >= cursor) gaps.push_back({cursor, end_time});
    return gaps;
}

}  // namespace

std::vector<Segment> segment_at_silence(const NoteSequence& seq, double audio_len, double target_len) {
    if (!(target_len > 0.0)) throw ArgumentError("segment_at_silence: target_len must be positive");
    const double end_time = std::max(audio_len, seq.max_offset());
    const auto gaps = silent_gaps(seq, end_time);

    std::vector<double> cuts{0.0};
    double start = 0.0;
    while (end_time - start > target_len) {
        const double ideal = start + target_len;
        const double lo = start + 0.5 * target_len;
        const double hi = start + 1.5 * target_len;
        double best = std::numeric_limits<double>::quiet_NaN();
        for (const Gap& g : gaps) {
            const double a = std::max(g.begin, lo), b = std::min(g.end, hi);
            if (a > b) continue;
            const double c = std::clamp(ideal, a, b);
            if (std::isnan(best) || std::abs(c - ideal) < std::abs(best - ideal)) best = c;
        }
        if (std::isnan(best)) {
            for (const Gap& g : gaps) {
                if (g.begin > hi) {
                    best = g.begin;
                    break;
                }
            }
        }
        if (std::isnan(best) || best >= end_time) break;
        cuts.push_back(best);
        start = best;
    }
    cuts.push_back(end_time);

    std::vector<Segment> segments;
    for (std::size_t s = 0; s + 1 < cuts.size(); ++s) {
        Segment seg;
        seg.start = cuts[s];
        seg.end = cuts[s + 1];
        const bool last = s + 2 == cuts.size();
        for (const Note& n : seq.notes) {
            const bool inside = n.onset >= seg.start && (last ? true : n.onset < seg.end);
            if (!inside) continue;
            Note m = n;
            m.onset -= seg.start;
            m.offset -= seg.start;
            seg.notes.notes.push_back(m);
        }
        seg.notes.duration = seg.end - seg.start;
        seg.notes.normalize();
        segments.push_back(std::move(seg));
    }
    return segments;
}

}  // namespace midialign
