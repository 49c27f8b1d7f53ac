#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "midialign/matrix.hpp"

namespace midialign {

inline constexpr int kLowestPitch = 21;
inline constexpr int kHighestPitch = 108;
inline constexpr int kPitchCount = 88;

/// Stable note identity, carried unchanged through augmentation and alignment.
struct NoteId {
    std::uint32_t value = 0;
    friend auto operator<=>(const NoteId&, const NoteId&) = default;
};

struct Note {
    NoteId id;
    int pitch = 60;
    double onset = 0.0;   // seconds
    double offset = 0.0;  // seconds, > onset
    int velocity = 64;

    double duration() const { return offset - onset; }
    friend bool operator==(const Note&, const Note&) = default;
};

/// Notes sorted by (onset, pitch, id); `duration` covers every offset.
struct NoteSequence {
    std::vector<Note> notes;
    double duration = 0.0;

    std::size_t size() const { return notes.size(); }
    bool empty() const { return notes.empty(); }

    /// Restores the sort order and raises `duration` to the last offset.
    void normalize();
    /// Throws ArgumentError naming the first violated invariant.
    void validate() const;

    double max_offset() const;
    const Note* find(NoteId id) const;
};

/// Binary frame x pitch matrix; column c is MIDI pitch c + 21.
struct PianoRoll {
    Matrix<std::uint8_t> frames;
    double fps = 100.0;

    std::size_t num_frames() const { return frames.rows(); }
};

// --- MIDI ---------------------------------------------------------------

inline constexpr int kMidiWritePpq = 480;
inline constexpr double kMidiWriteBpm = 120.0;
inline constexpr double kMidiTicksPerSecond = kMidiWritePpq * kMidiWriteBpm / 60.0;

struct MidiReadResult {
    NoteSequence notes;
    std::size_t dropped_out_of_range = 0;
    /// True when every note carried an embedded identity marker.
    bool has_ids = false;
};

MidiReadResult read_midi_bytes(std::span<const std::uint8_t> bytes);
MidiReadResult read_midi(const std::filesystem::path& path);
NoteSequence parse_midi(const std::filesystem::path& path);

/// Format 0, 480 PPQ, 120 BPM. Each note-on is preceded by a text meta
/// event "note:<id>" so identities survive a round trip.
std::vector<std::uint8_t> write_midi_bytes(const NoteSequence& seq);
void write_midi(const NoteSequence& seq, const std::filesystem::path& path);

/// Snaps onsets/offsets to the grid used by write_midi.
NoteSequence quantize_to_midi_grid(const NoteSequence& seq);

// --- Piano roll -----------------------------------------------------------

/// round(time * fps) frame mapping with half-open occupancy, one-frame gaps
/// between consecutive notes of the same pitch.
PianoRoll to_piano_roll(const NoteSequence& seq, double fps = 100.0);

/// Number of frames for a duration, ceil(duration * fps) with a guard for
/// representation error.
std::size_t frame_count(double duration, double fps);

// --- Segmentation --------------------------------------------------------

struct Segment {
    NoteSequence notes;  // re-based to `start`
    double start = 0.0;
    double end = 0.0;
};

/// Cuts the piece into ~target_len parts at instants where no note sounds.
std::vector<Segment> segment_at_silence(const NoteSequence& seq, double audio_len,
                                        double target_len = 30.0);

}  // namespace midialign
