#pragma once

#include <map>
#include <optional>
#include <vector>

#include "midialign/matrix.hpp"
#include "midialign/symbolic.hpp"

namespace midialign {

/// Maximal run of active frames in one pitch column, [start_frame, end_frame).
struct NoteBlock {
    int pitch = 60;
    std::size_t start_frame = 0;
    std::size_t end_frame = 1;
    double fps = 100.0;

    double start_seconds() const { return static_cast<double>(start_frame) / fps; }
    double end_seconds() const { return static_cast<double>(end_frame) / fps; }
    friend bool operator==(const NoteBlock&, const NoteBlock&) = default;
};

/// Binarizes at >= threshold; blocks sorted by (pitch, start_frame).
std::vector<NoteBlock> threshold_and_segment(const Matrix<float>& activation, double fps, double threshold = 0.5);

using NoteMatching = std::map<NoteId, std::optional<NoteBlock>>;

/// Per-pitch, order-preserving pairing of input notes with blocks. Equal
/// counts pair k-th with k-th; otherwise the pairing of maximal size that
/// minimizes total |onset - block start| is chosen.
NoteMatching match_notes(const std::vector<NoteBlock>& blocks, const NoteSequence& input);

/// Matched notes take their block's boundaries; unmatched notes keep their
/// original times. The note count is preserved.
NoteSequence update_sequence(const NoteSequence& input, const NoteMatching& matching);

}  // namespace midialign
