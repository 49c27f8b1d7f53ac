#include "midialign/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include "midialign/errors.hpp"

namespace midialign {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// Absorbs representation error when tick-quantized times sit exactly on a
// tolerance boundary.
constexpr double kToleranceSlack = 1e-9;

std::string fixed2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string tolerance_label(double tol) { return std::to_string(static_cast<int>(std::lround(tol * 1000))); }

}  // namespace

double AlignmentReport::accuracy_at(double tolerance) const {
    for (const auto& [tol, acc] : accuracy)
        if (std::abs(tol - tolerance) < 1e-12) return acc;
    throw ArgumentError("no accuracy recorded for tolerance " + std::to_string(tolerance));
}

std::vector<NoteError> onset_errors(const NoteSequence& est, const NoteSequence& ref) {
    std::map<NoteId, double> est_onsets;
    for (const Note& n : est.notes) est_onsets.emplace(n.id, n.onset);
    std::vector<NoteError> out;
    out.reserve(ref.size());
    std::size_t shared = 0;
    for (const Note& n : ref.notes) {
        auto it = est_onsets.find(n.id);
        if (it == est_onsets.end()) {
            out.push_back({n.id, kInf});
        } else {
            ++shared;
            out.push_back({n.id, std::abs(it->second - n.onset)});
        }
    }
    if (shared == 0) throw EvaluationError("estimate and reference share no note ids");
    return out;
}

std::vector<NoteError> onset_errors_by_matching(const NoteSequence& est, const NoteSequence& ref, double window) {
    struct Candidate {
        double dist;
        std::size_t r, e;
    };
    std::vector<Candidate> cands;
    for (std::size_t r = 0; r < ref.size(); ++r)
        for (std::size_t e = 0; e < est.size(); ++e) {
            if (est.notes[e].pitch != ref.notes[r].pitch) continue;
            const double d = std::abs(est.notes[e].onset - ref.notes[r].onset);
            if (d <= window + kToleranceSlack) cands.push_back({d, r, e});
        }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.dist < b.dist; });
    std::vector<double> err(ref.size(), kInf);
    std::vector<bool> used(est.size(), false), done(ref.size(), false);
    for (const auto& c : cands) {
        if (done[c.r] || used[c.e]) continue;
        done[c.r] = used[c.e] = true;
        err[c.r] = c.dist;
    }
    std::vector<NoteError> out;
    for (std::size_t r = 0; r < ref.size(); ++r) out.push_back({ref.notes[r].id, err[r]});
    return out;
}

AlignmentReport accuracy_report(const std::vector<NoteError>& errors, const std::vector<double>& tolerances) {
    if (errors.empty()) throw ArgumentError("accuracy_report: no errors given");
    AlignmentReport rep;
    rep.per_note = errors;

    std::vector<double> finite;
    for (const auto& e : errors)
        if (std::isfinite(e.error)) finite.push_back(e.error);
    if (!finite.empty()) {
        std::sort(finite.begin(), finite.end());
        double sum = 0.0;
        for (double v : finite) sum += v;
        rep.mean = sum / static_cast<double>(finite.size());
        const std::size_t m = finite.size() / 2;
        rep.median = finite.size() % 2 ? finite[m] : 0.5 * (finite[m - 1] + finite[m]);
        double ss = 0.0;
        for (double v : finite) ss += (v - rep.mean) * (v - rep.mean);
        rep.std = std::sqrt(ss / static_cast<double>(finite.size()));
    } else {
        rep.mean = rep.median = rep.std = kInf;
    }

    std::vector<double> tols = tolerances;
    std::sort(tols.begin(), tols.end(), std::greater<>());
    for (double tol : tols) {
        std::size_t hit = 0;
        for (const auto& e : errors)
            if (e.error <= tol + kToleranceSlack) ++hit;
        rep.accuracy.emplace_back(tol, 100.0 * static_cast<double>(hit) / static_cast<double>(errors.size()));
    }
    return rep;
}

ComparisonTable compare_methods(std::vector<ComparisonRow> rows) {
    if (rows.empty()) throw ArgumentError("compare_methods: no reports given");
    ComparisonTable table;
    for (const auto& [tol, acc] : rows.front().report.accuracy) table.tolerances.push_back(tol);
    table.rows = std::move(rows);
    return table;
}

std::string to_csv(const ComparisonTable& table) {
    std::ostringstream out;
    out << "method,mean_ms,median_ms,std_ms";
    for (double tol : table.tolerances) out << ",acc_" << tolerance_label(tol) << "ms";
    out << '\n';
    for (const auto& row : table.rows) {
        const auto& r = row.report;
        out << row.method << ',' << fixed2(r.mean * 1000) << ',' << fixed2(r.median * 1000) << ',' << fixed2(r.std * 1000);
        for (double tol : table.tolerances) out << ',' << fixed2(r.accuracy_at(tol));
        out << '\n';
    }
    return out.str();
}

nlohmann::ordered_json summary_json(const AlignmentReport& r) {
    nlohmann::ordered_json j;
    j["notes"] = r.per_note.size();
    j["mean_ms"] = r.mean * 1000;
    j["median_ms"] = r.median * 1000;
    j["std_ms"] = r.std * 1000;
    nlohmann::ordered_json acc;
    for (const auto& [tol, a] : r.accuracy) acc[tolerance_label(tol) + "ms"] = a;
    j["accuracy"] = acc;
    return j;
}

nlohmann::ordered_json to_json(const ComparisonTable& table) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& row : table.rows) {
        auto j = summary_json(row.report);
        j["method"] = row.method;
        rows.push_back(j);
    }
    return rows;
}

nlohmann::ordered_json to_json(const AlignmentReport& report) {
    auto j = summary_json(report);
    nlohmann::ordered_json notes = nlohmann::ordered_json::array();
    for (const auto& e : report.per_note) {
        nlohmann::ordered_json n;
        n["id"] = e.id.value;
        if (std::isfinite(e.error))
            n["error_ms"] = e.error * 1000;
        else
            n["error_ms"] = nullptr;
        notes.push_back(n);
    }
    j["per_note"] = notes;
    return j;
}

}  // namespace midialign
