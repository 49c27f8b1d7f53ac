#include <algorithm>
#include <charconv>
#include <cmath>
#include <deque>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>

#include "midialign/errors.hpp"
#include "midialign/symbolic.hpp"

namespace midialign {

namespace {

constexpr std::string_view kIdPrefix = "note:";

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t pos() const { return pos_; }
    bool at_end() const { return pos_ >= bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    std::uint8_t u8() {
        need(1);
        return bytes_[pos_++];
    }
    std::uint8_t peek() const {
        need(1);
        return bytes_[pos_];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] << 8 | bytes_[pos_ + 1]);
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = v << 8 | bytes_[pos_ + i];
        pos_ += 4;
        return v;
    }
    std::uint32_t vlq() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            const std::uint8_t b = u8();
            v = v << 7 | (b & 0x7f);
            if (!(b & 0x80)) return v;
        }
        throw ParseError("variable-length quantity longer than 4 bytes", pos_);
    }
    std::span<const std::uint8_t> take(std::size_t n) {
        need(n);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::string_view tag() {
        need(4);
        std::string_view s(reinterpret_cast<const char*>(bytes_.data() + pos_), 4);
        pos_ += 4;
        return s;
    }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw ParseError("unexpected end of MIDI data", pos_);
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

struct RawNote {
    std::uint64_t on_tick;
    std::uint64_t off_tick;
    int pitch;
    int velocity;
    std::optional<std::uint32_t> id;
    std::size_t order;
};

struct TempoChange {
    std::uint64_t tick;
    std::uint32_t us_per_quarter;
};

class TickClock {
public:
    TickClock(std::vector<TempoChange> tempi, std::uint16_t division) {
        if (division & 0x8000) {
            const int fps = -static_cast<std::int8_t>(division >> 8);
            const int sub = division & 0xff;
            smpte_seconds_per_tick_ = 1.0 / (static_cast<double>(fps == 29 ? 29.97 : fps) * sub);
            return;
        }
        ppq_ = division;
        std::stable_sort(tempi.begin(), tempi.end(),
                         [](const TempoChange& a, const TempoChange& b) { return a.tick < b.tick; });
        segments_.push_back({0, 0.0, 500000});
        for (const auto& t : tempi) {
            auto& last = segments_.back();
            const double at = last.seconds + seconds_between(last, t.tick);
            if (t.tick == last.tick)
                last.us_per_quarter = t.us_per_quarter;
            else
                segments_.push_back({t.tick, at, t.us_per_quarter});
        }
    }

    double seconds(std::uint64_t tick) const {
        if (smpte_seconds_per_tick_ > 0) return static_cast<double>(tick) * smpte_seconds_per_tick_;
        auto it = std::upper_bound(segments_.begin(), segments_.end(), tick,
                                   [](std::uint64_t t, const Seg& s) { return t < s.tick; });
        const Seg& s = *std::prev(it);
        return s.seconds + seconds_between(s, tick);
    }

private:
    struct Seg {
        std::uint64_t tick;
        double seconds;
        std::uint32_t us_per_quarter;
    };
    double seconds_between(const Seg& s, std::uint64_t tick) const {
        return static_cast<double>(tick - s.tick) * s.us_per_quarter * 1e-6 / ppq_;
    }

    std::vector<Seg> segments_;
    double ppq_ = 480;
    double smpte_seconds_per_tick_ = 0.0;
};

std::optional<std::uint32_t> parse_id_marker(std::span<const std::uint8_t> text) {
    std::string_view s(reinterpret_cast<const char*>(text.data()), text.size());
    if (!s.starts_with(kIdPrefix)) return std::nullopt;
    s.remove_prefix(kIdPrefix.size());
    std::uint32_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
    return v;
}

void parse_track(ByteReader& r, std::size_t track_end, std::vector<RawNote>& notes,
                 std::vector<TempoChange>& tempi, std::uint64_t& last_tick, std::size_t& order) {
    std::uint64_t tick = 0;
    std::uint8_t running = 0;
    std::optional<std::uint32_t> pending_id;
    std::uint64_t pending_tick = 0;
    // Open notes per (channel, pitch), first-in first-out.
    std::map<int, std::deque<std::size_t>> open;

    while (r.pos() < track_end) {
        tick += r.vlq();
        const std::size_t event_pos = r.pos();
        std::uint8_t status = r.peek();
        if (status & 0x80) {
            r.u8();
        } else {
            if (!running) throw ParseError("data byte without running status", event_pos);
            status = running;
        }

        if (status == 0xff) {
            const std::uint8_t type = r.u8();
            const std::uint32_t len = r.vlq();
            auto data = r.take(len);
            if (type == 0x51) {
                if (len != 3) throw ParseError("tempo meta event with length " + std::to_string(len), event_pos);
                tempi.push_back({tick, static_cast<std::uint32_t>(data[0] << 16 | data[1] << 8 | data[2])});
            } else if (type == 0x01) {
                pending_id = parse_id_marker(data);
                pending_tick = tick;
            } else if (type == 0x2f) {
                break;
            }
            continue;
        }
        if (status == 0xf0 || status == 0xf7) {
            r.take(r.vlq());
            running = 0;
            continue;
        }
        if (status >= 0xf0) throw ParseError("unsupported system message", event_pos);

        running = status;
        const int kind = status & 0xf0;
        const int channel = status & 0x0f;
        const int data_len = (kind == 0xc0 || kind == 0xd0) ? 1 : 2;
        const std::uint8_t a = r.u8();
        const std::uint8_t b = data_len == 2 ? r.u8() : 0;
        if ((a & 0x80) || (b & 0x80)) throw ParseError("data byte with high bit set", event_pos);

        const int key = channel << 8 | a;
        if (kind == 0x90 && b > 0) {
            RawNote n{tick, tick, a, b, std::nullopt, order++};
            if (pending_id && pending_tick == tick) n.id = pending_id;
            pending_id.reset();
            open[key].push_back(notes.size());
            notes.push_back(n);
        } else if (kind == 0x80 || (kind == 0x90 && b == 0)) {
            auto it = open.find(key);
            if (it != open.end() && !it->second.empty()) {
                notes[it->second.front()].off_tick = tick;
                it->second.pop_front();
            }
        }
    }
    if (r.pos() != track_end) throw ParseError("track length does not match its events", r.pos());
    last_tick = std::max(last_tick, tick);
    for (auto& [key, q] : open)
        for (std::size_t idx : q) notes[idx].off_tick = tick;
}

}  // namespace

MidiReadResult read_midi_bytes(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    if (r.remaining() < 14 || r.tag() != "MThd") throw ParseError("missing MThd header", 0);
    const std::uint32_t header_len = r.u32();
    if (header_len < 6) throw ParseError("MThd chunk too short", 4);
    const std::uint16_t format = r.u16();
    const std::uint16_t n_tracks = r.u16();
    const std::uint16_t division = r.u16();
    if (format > 1) throw ParseError("unsupported SMF format " + std::to_string(format), 8);
    if (division == 0) throw ParseError("zero time division", 12);
    r.take(header_len - 6);

    std::vector<RawNote> raw;
    std::vector<TempoChange> tempi;
    std::uint64_t last_tick = 0;
    std::size_t order = 0;
    for (int t = 0; t < n_tracks; ++t) {
        const std::size_t chunk_pos = r.pos();
        const std::string_view tag = r.tag();
        const std::uint32_t len = r.u32();
        if (len > r.remaining()) throw ParseError("chunk length exceeds file size", chunk_pos);
        if (tag != "MTrk") {
            r.take(len);
            --t;
            if (r.at_end()) break;
            continue;
        }
        parse_track(r, r.pos() + len, raw, tempi, last_tick, order);
    }

    TickClock clock(std::move(tempi), division);
    MidiReadResult result;
    const bool all_ids = !raw.empty() && std::all_of(raw.begin(), raw.end(), [](const RawNote& n) { return n.id.has_value(); });
    std::set<std::uint32_t> seen;
    bool unique = true;
    if (all_ids)
        for (const auto& n : raw) unique = unique && seen.insert(*n.id).second;
    result.has_ids = all_ids && unique;

    std::sort(raw.begin(), raw.end(), [](const RawNote& a, const RawNote& b) {
        if (a.on_tick != b.on_tick) return a.on_tick < b.on_tick;
        if (a.pitch != b.pitch) return a.pitch < b.pitch;
        return a.order < b.order;
    });
    std::uint32_t next_id = 0;
    for (const RawNote& n : raw) {
        if (n.pitch < kLowestPitch || n.pitch > kHighestPitch) {
            ++result.dropped_out_of_range;
            continue;
        }
        Note note;
        note.id = NoteId{result.has_ids ? *n.id : next_id++};
        note.pitch = n.pitch;
        note.velocity = n.velocity;
        note.onset = clock.seconds(n.on_tick);
        // A zero-length note keeps one tick so that offset > onset.
        note.offset = clock.seconds(std::max(n.off_tick, n.on_tick + 1));
        result.notes.notes.push_back(note);
    }
    result.notes.duration = clock.seconds(last_tick);
    result.notes.normalize();
    return result;
}

MidiReadResult read_midi(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open MIDI file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("error reading " + path.string());
    return read_midi_bytes(bytes);
}

NoteSequence parse_midi(const std::filesystem::path& path) { return read_midi(path).notes; }

namespace {

std::uint64_t to_tick(double seconds) {
    return static_cast<std::uint64_t>(std::llround(std::max(0.0, seconds) * kMidiTicksPerSecond));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void put_vlq(std::vector<std::uint8_t>& out, std::uint32_t v) {
    std::uint8_t buf[5];
    int n = 0;
    buf[n++] = v & 0x7f;
    while (v >>= 7) buf[n++] = static_cast<std::uint8_t>(0x80 | (v & 0x7f));
    while (n) out.push_back(buf[--n]);
}

}  // namespace

NoteSequence quantize_to_midi_grid(const NoteSequence& seq) {
    NoteSequence out = seq;
    for (Note& n : out.notes) {
        const std::uint64_t on = to_tick(n.onset);
        const std::uint64_t off = std::max(to_tick(n.offset), on + 1);
        n.onset = static_cast<double>(on) / kMidiTicksPerSecond;
        n.offset = static_cast<double>(off) / kMidiTicksPerSecond;
    }
    out.duration = static_cast<double>(to_tick(seq.duration)) / kMidiTicksPerSecond;
    out.duration = std::max(out.duration, out.max_offset());
    out.normalize();
    return out;
}

std::vector<std::uint8_t> write_midi_bytes(const NoteSequence& seq) {
    struct Event {
        std::uint64_t tick;
        int rank;  // note-off before id marker before note-on at equal ticks
        std::size_t seq_index;
        std::vector<std::uint8_t> bytes;
    };
    std::vector<Event> events;
    for (std::size_t i = 0; i < seq.notes.size(); ++i) {
        const Note& n = seq.notes[i];
        const std::uint64_t on = to_tick(n.onset);
        const std::uint64_t off = std::max(to_tick(n.offset), on + 1);
        const auto pitch = static_cast<std::uint8_t>(std::clamp(n.pitch, 0, 127));
        const auto vel = static_cast<std::uint8_t>(std::clamp(n.velocity, 1, 127));
        std::string marker = std::string(kIdPrefix) + std::to_string(n.id.value);
        std::vector<std::uint8_t> meta{0xff, 0x01};
        put_vlq(meta, static_cast<std::uint32_t>(marker.size()));
        meta.insert(meta.end(), marker.begin(), marker.end());
        events.push_back({on, 1, i, std::move(meta)});
        events.push_back({on, 2, i, {0x90, pitch, vel}});
        events.push_back({off, 0, i, {0x80, pitch, 0x40}});
    }
    std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
        if (a.tick != b.tick) return a.tick < b.tick;
        if (a.rank == 0 || b.rank == 0) return a.rank < b.rank;
        return a.seq_index != b.seq_index ? a.seq_index < b.seq_index : a.rank < b.rank;
    });

    std::vector<std::uint8_t> track;
    // Tempo: 500000 us per quarter = 120 BPM.
    track.insert(track.end(), {0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20});
    std::uint64_t now = 0;
    for (const Event& e : events) {
        put_vlq(track, static_cast<std::uint32_t>(e.tick - now));
        now = e.tick;
        track.insert(track.end(), e.bytes.begin(), e.bytes.end());
    }
    const std::uint64_t end_tick = std::max(now, to_tick(seq.duration));
    put_vlq(track, static_cast<std::uint32_t>(end_tick - now));
    track.insert(track.end(), {0xff, 0x2f, 0x00});

    std::vector<std::uint8_t> out{'M', 'T', 'h', 'd'};
    put_u32(out, 6);
    out.insert(out.end(), {0x00, 0x00, 0x00, 0x01, static_cast<std::uint8_t>(kMidiWritePpq >> 8),
                           static_cast<std::uint8_t>(kMidiWritePpq & 0xff)});
    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    put_u32(out, static_cast<std::uint32_t>(track.size()));
    out.insert(out.end(), track.begin(), track.end());
    return out;
}

void write_midi(const NoteSequence& seq, const std::filesystem::path& path) {
    const auto bytes = write_midi_bytes(seq);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write MIDI file " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("error writing " + path.string());
}

}  // namespace midialign
