#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "midialign/errors.hpp"
#include "midialign/symbolic.hpp"
#include "support/generators.hpp"

using namespace midialign;

namespace {

/// Minimal SMF assembler used as an independent source of test files.
struct SmfBuilder {
    std::vector<std::vector<std::uint8_t>> tracks;
    std::uint16_t division = 480;
    std::uint16_t format = 0;

    static void vlq(std::vector<std::uint8_t>& out, std::uint32_t v) {
        std::uint8_t buf[5];
        int n = 0;
        buf[n++] = v & 0x7f;
        while (v >>= 7) buf[n++] = static_cast<std::uint8_t>(0x80 | (v & 0x7f));
        while (n) out.push_back(buf[--n]);
    }
    std::vector<std::uint8_t>& track() {
        if (tracks.empty()) tracks.emplace_back();
        return tracks.back();
    }
    void event(std::uint32_t delta, std::initializer_list<std::uint8_t> bytes) {
        vlq(track(), delta);
        track().insert(track().end(), bytes);
    }
    void tempo(std::uint32_t delta, std::uint32_t usec_per_quarter) {
        event(delta, {0xff, 0x51, 0x03, static_cast<std::uint8_t>(usec_per_quarter >> 16),
                      static_cast<std::uint8_t>(usec_per_quarter >> 8), static_cast<std::uint8_t>(usec_per_quarter)});
    }
    std::vector<std::uint8_t> bytes() const {
        std::vector<std::uint8_t> out{'M', 'T', 'h', 'd', 0, 0, 0, 6};
        auto u16 = [&](std::uint16_t v) {
            out.push_back(static_cast<std::uint8_t>(v >> 8));
            out.push_back(static_cast<std::uint8_t>(v));
        };
        u16(format);
        u16(static_cast<std::uint16_t>(tracks.size()));
        u16(division);
        for (auto t : tracks) {
            t.insert(t.end(), {0x00, 0xff, 0x2f, 0x00});
            out.insert(out.end(), {'M', 'T', 'r', 'k'});
            const auto len = static_cast<std::uint32_t>(t.size());
            for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(len >> s));
            out.insert(out.end(), t.begin(), t.end());
        }
        return out;
    }
};

/// Per-column maximal runs of active frames.
std::size_t count_runs(const PianoRoll& roll) {
    std::size_t runs = 0;
    for (std::size_t c = 0; c < roll.frames.cols(); ++c)
        for (std::size_t r = 0; r < roll.num_frames(); ++r)
            if (roll.frames(r, c) && (r == 0 || !roll.frames(r - 1, c))) ++runs;
    return runs;
}

}  // namespace

TEST_SUITE("symbolic") {

TEST_CASE("parse a single note at 120 bpm") {
    SmfBuilder b;
    b.event(480, {0x90, 60, 100});
    b.event(480, {0x80, 60, 0});
    const auto res = read_midi_bytes(b.bytes());
    REQUIRE(res.notes.size() == 1);
    const Note& n = res.notes.notes[0];
    CHECK(n.pitch == 60);
    CHECK(n.onset == doctest::Approx(0.5));
    CHECK(n.offset == doctest::Approx(1.0));
    CHECK(n.velocity == 100);
    CHECK(res.dropped_out_of_range == 0);
}

TEST_CASE("velocity zero note-on ends a note; running status") {
    SmfBuilder b;
    b.event(0, {0x90, 64, 90});
    b.event(240, {64, 0});  // running status, velocity 0
    const auto res = read_midi_bytes(b.bytes());
    REQUIRE(res.notes.size() == 1);
    CHECK(res.notes.notes[0].offset == doctest::Approx(0.25));
}

TEST_CASE("out-of-range pitches are dropped and counted") {
    SmfBuilder b;
    b.event(0, {0x90, 109, 90});
    b.event(0, {0x90, 60, 90});
    b.event(480, {0x80, 109, 0});
    b.event(0, {0x80, 60, 0});
    const auto res = read_midi_bytes(b.bytes());
    CHECK(res.notes.size() == 1);
    CHECK(res.dropped_out_of_range == 1);
}

TEST_CASE("tempo map in a format 1 conductor track") {
    SmfBuilder b;
    b.format = 1;
    b.tracks.emplace_back();
    b.tempo(0, 500000);
    b.tempo(480, 1000000);  // 60 bpm from 0.5 s
    b.tracks.emplace_back();
    b.event(960, {0x90, 60, 80});  // tick 960: 0.5 + 1.0 = 1.5 s
    b.event(480, {0x80, 60, 0});   // tick 1440: 2.5 s
    const auto res = read_midi_bytes(b.bytes());
    REQUIRE(res.notes.size() == 1);
    CHECK(res.notes.notes[0].onset == doctest::Approx(1.5));
    CHECK(res.notes.notes[0].offset == doctest::Approx(2.5));
}

TEST_CASE("malformed input names a byte offset") {
    std::vector<std::uint8_t> junk{'M', 'T', 'h', 'x'};
    CHECK_THROWS_AS(read_midi_bytes(junk), ParseError);
    SmfBuilder b;
    b.event(0, {0x90, 60, 90});
    auto bytes = b.bytes();
    bytes[bytes.size() - 8] = 0xf4;  // undefined system message inside the track
    try {
        read_midi_bytes(bytes);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
    CHECK_THROWS_AS(read_midi("/nonexistent/file.mid"), IoError);
}

TEST_CASE("write/read round trip within one tick, ids preserved") {
    std::mt19937_64 rng(7);
    const double tick = 1.0 / kMidiTicksPerSecond;
    for (int trial = 0; trial < 50; ++trial) {
        const NoteSequence seq = testing::random_sequence(rng, 100);
        const auto res = read_midi_bytes(write_midi_bytes(seq));
        REQUIRE(res.has_ids);
        REQUIRE(res.notes.size() == seq.size());
        for (const Note& n : seq.notes) {
            const Note* m = res.notes.find(n.id);
            REQUIRE(m != nullptr);
            CHECK(m->pitch == n.pitch);
            CHECK(std::abs(m->onset - n.onset) <= tick / 2 + 1e-12);
            CHECK(std::abs(m->offset - n.offset) <= tick / 2 + 1e-12);
        }
    }
    const Note single{NoteId{0}, 60, 0.5, 1.0, 64};
    const auto one = read_midi_bytes(write_midi_bytes(NoteSequence{{single}, 1.0}));
    CHECK(std::abs(one.notes.notes[0].onset - 0.5) <= 1.05e-3);
}

TEST_CASE("empty sequence writes a valid file") {
    const auto path = std::filesystem::temp_directory_path() / "midialign_empty.mid";
    write_midi(NoteSequence{}, path);
    CHECK(parse_midi(path).empty());
    std::filesystem::remove(path);
}

TEST_CASE("quantize_to_midi_grid is a fixed point of the writer") {
    std::mt19937_64 rng(3);
    const NoteSequence q = quantize_to_midi_grid(testing::random_sequence(rng, 60));
    const auto back = read_midi_bytes(write_midi_bytes(q)).notes;
    for (const Note& n : q.notes) CHECK(std::abs(back.find(n.id)->onset - n.onset) < 1e-9);
}

TEST_CASE("piano roll frame mapping") {
    NoteSequence seq{{Note{NoteId{0}, 60, 0.30, 1.05, 80}}, 1.2};
    const PianoRoll roll = to_piano_roll(seq, 100);
    CHECK(roll.frames.cols() == 88);
    CHECK(roll.num_frames() == 120);
    for (std::size_t r = 0; r < roll.num_frames(); ++r) CHECK(roll.frames(r, 39) == (r >= 30 && r <= 104 ? 1 : 0));
}

TEST_CASE("gap inserted between back-to-back notes") {
    NoteSequence seq{{Note{NoteId{0}, 60, 0.0, 1.0, 80}, Note{NoteId{1}, 60, 1.0, 2.0, 80}}, 2.0};
    const PianoRoll roll = to_piano_roll(seq, 100);
    for (std::size_t r = 0; r < 200; ++r) CHECK(roll.frames(r, 39) == (r == 99 ? 0 : 1));
}

TEST_CASE("empty sequence gives an all-zero roll") {
    NoteSequence seq;
    seq.duration = 1.0;
    const PianoRoll roll = to_piano_roll(seq, 100);
    CHECK(roll.num_frames() == 100);
    CHECK(std::all_of(roll.frames.storage().begin(), roll.frames.storage().end(), [](auto v) { return v == 0; }));
}

TEST_CASE("zero-width note keeps its onset frame") {
    NoteSequence seq{{Note{NoteId{0}, 70, 0.501, 0.503, 80}}, 1.0};
    const PianoRoll roll = to_piano_roll(seq, 25);
    CHECK(roll.frames(13, 70 - 21) == 1);
}

TEST_CASE("property: roll row count is ceil(duration * fps)") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> d(0.0, 100.0);
    for (int k = 0; k < 1000; ++k) {
        const double duration = std::round(d(rng) * 1000) / 1000;
        for (double fps : {25.0, 50.0, 100.0, 200.0}) {
            // Integer oracle: duration in ms times fps, rounded up to a multiple of 1000.
            const auto ms = static_cast<long long>(std::llround(duration * 1000));
            const auto expect = static_cast<std::size_t>((ms * static_cast<long long>(fps) + 999) / 1000);
            CHECK(frame_count(duration, fps) == expect);
        }
    }
}

TEST_CASE("property: onset frames survive and separated notes stay separable") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 300; ++trial) {
        for (double fps : {25.0, 50.0, 100.0, 200.0}) {
            const NoteSequence seq = testing::random_sequence(rng, 40, 10.0, 2.5 / fps);
            const PianoRoll roll = to_piano_roll(seq, fps);
            for (const Note& n : seq.notes)
                CHECK(roll.frames(static_cast<std::size_t>(std::llround(n.onset * fps)), n.pitch - 21) == 1);
            CHECK(count_runs(roll) == seq.size());
        }
    }
}

TEST_CASE("segmentation at silences") {
    NoteSequence seq{{Note{NoteId{0}, 60, 0.0, 29.0, 80}, Note{NoteId{1}, 62, 29.0, 61.0, 80},
                      Note{NoteId{2}, 64, 61.0, 90.0, 80}},
                     90.0};
    const auto segs = segment_at_silence(seq, 90.0, 30.0);
    REQUIRE(segs.size() == 3);
    CHECK(segs[0].end - segs[0].start == doctest::Approx(29.0));
    CHECK(segs[1].end - segs[1].start == doctest::Approx(32.0));
    CHECK(segs[2].end - segs[2].start == doctest::Approx(29.0));
    CHECK(segs[1].notes.notes[0].onset == doctest::Approx(0.0));

    NoteSequence shorter{{Note{NoteId{0}, 60, 1.0, 2.0, 80}}, 10.0};
    CHECK(segment_at_silence(shorter, 10.0, 30.0).size() == 1);

    NoteSequence held{{Note{NoteId{0}, 60, 0.0, 90.0, 80}}, 90.0};
    const auto one = segment_at_silence(held, 90.0, 30.0);
    REQUIRE(one.size() == 1);
    CHECK(one[0].end == doctest::Approx(90.0));
}

TEST_CASE("property: segments are ordered, disjoint, cover the piece and cut only in silence") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        const NoteSequence seq = testing::random_sequence(rng, 80, 120.0);
        const double len = seq.max_offset() + 1.0;
        const auto segs = segment_at_silence(seq, len, 20.0);
        REQUIRE(!segs.empty());
        CHECK(segs.front().start == 0.0);
        CHECK(segs.back().end == doctest::Approx(len));
        std::size_t total = 0;
        for (std::size_t s = 0; s < segs.size(); ++s) {
            total += segs[s].notes.size();
            if (s > 0) CHECK(segs[s].start == segs[s - 1].end);
            if (s > 0)
                for (const Note& n : seq.notes) CHECK(!(n.onset < segs[s].start && n.offset > segs[s].start));
        }
        CHECK(total == seq.size());
    }
}

TEST_CASE("validate reports violated invariants") {
    NoteSequence bad{{Note{NoteId{0}, 60, 1.0, 0.5, 80}}, 2.0};
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    NoteSequence dup{{Note{NoteId{0}, 60, 0.0, 0.5, 80}, Note{NoteId{0}, 62, 0.0, 0.5, 80}}, 2.0};
    CHECK_THROWS_AS(dup.validate(), ArgumentError);
    NoteSequence high{{Note{NoteId{0}, 109, 0.0, 0.5, 80}}, 2.0};
    CHECK_THROWS_AS(high.validate(), ArgumentError);
}

}
