#pragma once

#include <algorithm>
#include <cstdint>
#include <random>

#include "midialign/symbolic.hpp"

namespace midialign::testing {

/// Random valid sequence; same-pitch notes never overlap and are kept at
/// least `same_pitch_gap` seconds apart.
inline NoteSequence random_sequence(std::mt19937_64& rng, std::size_t max_notes = 40, double span = 10.0,
                                    double same_pitch_gap = 0.0, int low = kLowestPitch, int high = kHighestPitch) {
    std::uniform_int_distribution<std::size_t> count(1, max_notes);
    std::uniform_int_distribution<int> pitch(low, high);
    std::uniform_real_distribution<double> t(0.0, span);
    std::uniform_real_distribution<double> len(0.02, 1.0);
    std::uniform_int_distribution<int> vel(1, 127);
    NoteSequence seq;
    const std::size_t n = count(rng);
    std::uint32_t id = 0;
    for (std::size_t k = 0; k < n * 4 && seq.notes.size() < n; ++k) {
        Note note;
        note.pitch = pitch(rng);
        note.onset = t(rng);
        note.offset = note.onset + len(rng);
        note.velocity = vel(rng);
        const bool clash = std::any_of(seq.notes.begin(), seq.notes.end(), [&](const Note& o) {
            return o.pitch == note.pitch && note.onset < o.offset + same_pitch_gap && o.onset < note.offset + same_pitch_gap;
        });
        if (clash) continue;
        note.id = NoteId{id++};
        seq.notes.push_back(note);
    }
    seq.normalize();
    return seq;
}

}  // namespace midialign::testing
