#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "midialign/postprocess.hpp"
#include "support/generators.hpp"

using namespace midialign;

namespace {

/// Exhaustive order-preserving assignment of maximal size with minimal cost.
double best_cost(const std::vector<double>& onsets, const std::vector<double>& starts) {
    const std::size_t want = std::min(onsets.size(), starts.size());
    double best = std::numeric_limits<double>::infinity();
    std::function<void(std::size_t, std::size_t, std::size_t, double)> rec = [&](std::size_t i, std::size_t j,
                                                                                  std::size_t used, double c) {
        if (used == want) {
            best = std::min(best, c);
            return;
        }
        if (i == onsets.size() || j == starts.size()) return;
        rec(i + 1, j + 1, used + 1, c + std::abs(onsets[i] - starts[j]));
        rec(i + 1, j, used, c);
        rec(i, j + 1, used, c);
    };
    rec(0, 0, 0, 0.0);
    return best;
}

Matrix<float> empty_activation(std::size_t frames) { return Matrix<float>(frames, 88, 0.0f); }

}  // namespace

TEST_SUITE("postprocess") {

TEST_CASE("threshold and segment") {
    CHECK(threshold_and_segment(empty_activation(50), 100).empty());

    auto act = empty_activation(200);
    for (std::size_t r = 30; r <= 104; ++r) act(r, 39) = 0.9f;
    auto blocks = threshold_and_segment(act, 100);
    REQUIRE(blocks.size() == 1);
    CHECK(blocks[0] == NoteBlock{60, 30, 105, 100.0});

    auto edge = empty_activation(10);
    edge(3, 0) = 0.5f;
    edge(4, 0) = 0.4999f;
    edge(9, 87) = 1.0f;
    blocks = threshold_and_segment(edge, 100);
    REQUIRE(blocks.size() == 2);
    CHECK(blocks[0] == NoteBlock{21, 3, 4, 100.0});
    CHECK(blocks[1] == NoteBlock{108, 9, 10, 100.0});
}

TEST_CASE("property: blocks equal the run-length decomposition") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (int trial = 0; trial < 200; ++trial) {
        auto act = empty_activation(60);
        for (float& v : act.storage()) v = u(rng) < 0.3f ? 1.0f : 0.0f;
        const auto blocks = threshold_and_segment(act, 50);
        std::vector<NoteBlock> expect;
        for (int c = 0; c < 88; ++c) {
            std::size_t r = 0;
            while (r < 60) {
                if (act(r, c) < 0.5f) {
                    ++r;
                    continue;
                }
                std::size_t e = r;
                while (e < 60 && act(e, c) >= 0.5f) ++e;
                expect.push_back({c + 21, r, e, 50.0});
                r = e;
            }
        }
        CHECK(blocks == expect);
    }
}

TEST_CASE("matching examples") {
    NoteSequence in{{Note{NoteId{0}, 60, 1.0, 1.5, 64}, Note{NoteId{1}, 60, 2.0, 2.5, 64}}, 3.0};
    auto m = match_notes({NoteBlock{60, 198, 230, 100.0}}, in);
    CHECK(!m.at(NoteId{0}).has_value());
    REQUIRE(m.at(NoteId{1}).has_value());
    CHECK(m.at(NoteId{1})->start_frame == 198);

    m = match_notes({NoteBlock{60, 120, 130, 100.0}, NoteBlock{60, 150, 160, 100.0}}, in);
    CHECK(m.at(NoteId{0})->start_frame == 120);
    CHECK(m.at(NoteId{1})->start_frame == 150);

    m = match_notes({}, in);
    CHECK(!m.at(NoteId{0}).has_value());
    CHECK(!m.at(NoteId{1}).has_value());

    const auto out = update_sequence(in, match_notes({NoteBlock{60, 198, 230, 100.0}}, in));
    REQUIRE(out.size() == 2);
    CHECK(*out.find(NoteId{0}) == in.notes[0]);
    CHECK(out.find(NoteId{1})->onset == doctest::Approx(1.98));
    CHECK(out.find(NoteId{1})->offset == doctest::Approx(2.30));
}

TEST_CASE("property: matching is order preserving and cost minimal") {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> count(0, 6);
    std::uniform_int_distribution<std::size_t> frame(0, 499);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<std::size_t> onset_frames(static_cast<std::size_t>(count(rng))), starts(static_cast<std::size_t>(count(rng)));
        for (auto& f : onset_frames) f = frame(rng);
        for (auto& f : starts) f = frame(rng);
        std::sort(onset_frames.begin(), onset_frames.end());
        std::sort(starts.begin(), starts.end());
        starts.erase(std::unique(starts.begin(), starts.end()), starts.end());
        NoteSequence in;
        for (std::size_t k = 0; k < onset_frames.size(); ++k)
            in.notes.push_back(Note{NoteId{std::uint32_t(k)}, 64, onset_frames[k] / 100.0, onset_frames[k] / 100.0 + 0.005, 64});
        in.normalize();
        std::vector<NoteBlock> blocks;
        for (auto s : starts) blocks.push_back({64, s, s + 1, 100.0});
        const auto m = match_notes(blocks, in);

        double cost = 0.0;
        std::size_t matched = 0;
        std::optional<std::size_t> last;
        for (const Note& n : in.notes) {  // onset order
            const auto& b = m.at(n.id);
            if (!b) continue;
            ++matched;
            cost += std::abs(n.onset - b->start_seconds());
            if (last) CHECK(b->start_frame > *last);
            last = b->start_frame;
        }
        std::vector<double> on, st;
        for (const Note& n : in.notes) on.push_back(n.onset);
        for (auto s : starts) st.push_back(s / 100.0);
        CHECK(matched == std::min(on.size(), st.size()));
        CHECK(cost == doctest::Approx(best_cost(on, st)).epsilon(1e-9));
        if (on.size() == st.size())
            for (std::size_t k = 0; k < on.size(); ++k) CHECK(m.at(in.notes[k].id)->start_frame == starts[k]);

        CHECK(update_sequence(in, m).size() == in.size());
    }
}

TEST_CASE("round trip through the roll reproduces onsets") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 100; ++trial) {
        const NoteSequence seq = testing::random_sequence(rng, 60, 20.0);
        const PianoRoll roll = to_piano_roll(seq, 100);
        Matrix<float> act(roll.num_frames(), 88);
        for (std::size_t i = 0; i < act.storage().size(); ++i) act.storage()[i] = roll.frames.storage()[i];
        const auto out = update_sequence(seq, match_notes(threshold_and_segment(act, 100), seq));
        REQUIRE(out.size() == seq.size());
        for (const Note& n : seq.notes) CHECK(std::abs(out.find(n.id)->onset - n.onset) <= 0.01 + 1e-9);
    }
}

TEST_CASE("identity when blocks sit at the input times") {
    NoteSequence in{{Note{NoteId{4}, 70, 0.5, 0.8, 64}, Note{NoteId{5}, 72, 1.0, 1.25, 64}}, 2.0};
    const std::vector<NoteBlock> blocks{{70, 50, 80, 100.0}, {72, 100, 125, 100.0}};
    const auto out = update_sequence(in, match_notes(blocks, in));
    for (const Note& n : in.notes) {
        CHECK(out.find(n.id)->onset == doctest::Approx(n.onset));
        CHECK(out.find(n.id)->offset == doctest::Approx(n.offset));
    }
}

}
