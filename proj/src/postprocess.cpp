#include "midialign/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace midialign {

std::vector<NoteBlock> threshold_and_segment(const Matrix<float>& activation, double fps, double threshold) {
    std::vector<NoteBlock> blocks;
    const std::size_t n = activation.rows();
    const std::size_t cols = std::min<std::size_t>(activation.cols(), kPitchCount);
    for (std::size_t c = 0; c < cols; ++c) {
        std::size_t r = 0;
        while (r < n) {
            if (!(activation(r, c) >= threshold)) {
                ++r;
                continue;
            }
            const std::size_t start = r;
            while (r < n && activation(r, c) >= threshold) ++r;
            blocks.push_back({static_cast<int>(c) + kLowestPitch, start, r, fps});
        }
    }
    return blocks;
}

namespace {

/// Order-preserving assignment of `notes` (by onset) to `blocks` (by start)
/// with min(n, m) pairs and minimal total onset distance.
std::vector<std::optional<std::size_t>> assign(const std::vector<const Note*>& notes, const std::vector<const NoteBlock*>& blocks) {
    const std::size_t n = notes.size(), m = blocks.size();
    std::vector<std::optional<std::size_t>> out(n);
    if (n == m) {
        for (std::size_t k = 0; k < n; ++k) out[k] = k;
        return out;
    }
    if (m == 0) return out;

    constexpr double kInf = std::numeric_limits<double>::infinity();
    // cost(a, b): best total over the first a notes and b blocks when the
    // surplus side may skip elements and the other side must all be paired.
    const bool skip_notes = n > m;
    Matrix<double> cost(n + 1, m + 1, kInf);
    Matrix<std::uint8_t> move(n + 1, m + 1, 0);  // 1 pair, 2 skip note, 3 skip block
    cost(0, 0) = 0.0;
    for (std::size_t a = 0; a <= n; ++a) {
        for (std::size_t b = 0; b <= m; ++b) {
            if (a == 0 && b == 0) continue;
            double best = kInf;
            std::uint8_t mv = 0;
            if (a > 0 && b > 0 && cost(a - 1, b - 1) < kInf) {
                best = cost(a - 1, b - 1) + std::abs(notes[a - 1]->onset - blocks[b - 1]->start_seconds());
                mv = 1;
            }
            if (skip_notes && a > 0 && cost(a - 1, b) < best) {
                best = cost(a - 1, b);
                mv = 2;
            }
            if (!skip_notes && b > 0 && cost(a, b - 1) < best) {
                best = cost(a, b - 1);
                mv = 3;
            }
            cost(a, b) = best;
            move(a, b) = mv;
        }
    }
    std::size_t a = n, b = m;
    while (a > 0 || b > 0) {
        switch (move(a, b)) {
            case 1: out[a - 1] = b - 1; --a; --b; break;
            case 2: --a; break;
            case 3: --b; break;
            default: return out;  // unreachable for feasible tables
        }
    }
    return out;
}

}  // namespace

NoteMatching match_notes(const std::vector<NoteBlock>& blocks, const NoteSequence& input) {
    NoteMatching result;
    for (const Note& n : input.notes) result[n.id] = std::nullopt;

    for (int pitch = kLowestPitch; pitch <= kHighestPitch; ++pitch) {
        std::vector<const Note*> notes;
        for (const Note& n : input.notes)
            if (n.pitch == pitch) notes.push_back(&n);
        std::vector<const NoteBlock*> cand;
        for (const NoteBlock& b : blocks)
            if (b.pitch == pitch) cand.push_back(&b);
        if (notes.empty() || cand.empty()) continue;
        std::stable_sort(notes.begin(), notes.end(), [](const Note* x, const Note* y) { return x->onset < y->onset; });
        std::stable_sort(cand.begin(), cand.end(), [](const NoteBlock* x, const NoteBlock* y) { return x->start_frame < y->start_frame; });
        const auto pairs = assign(notes, cand);
        for (std::size_t k = 0; k < notes.size(); ++k)
            if (pairs[k]) result[notes[k]->id] = *cand[*pairs[k]];
    }
    return result;
}

NoteSequence update_sequence(const NoteSequence& input, const NoteMatching& matching) {
    NoteSequence out = input;
    for (Note& n : out.notes) {
        auto it = matching.find(n.id);
        if (it == matching.end() || !it->second) continue;
        n.onset = it->second->start_seconds();
        n.offset = it->second->end_seconds();
    }
    out.normalize();
    return out;
}

}  // namespace midialign
