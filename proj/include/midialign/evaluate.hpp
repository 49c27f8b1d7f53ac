#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "midialign/symbolic.hpp"

namespace midialign {

inline constexpr std::array<double, 4> kTolerances{0.100, 0.050, 0.025, 0.010};

/// Absolute onset error in seconds; +inf when the reference note has no
/// estimate.
struct NoteError {
    NoteId id;
    double error = 0.0;
};

struct AlignmentReport {
    std::vector<NoteError> per_note;
    double mean = 0.0, median = 0.0, std = 0.0;  // over finite errors, seconds
    std::vector<std::pair<double, double>> accuracy;  // (tolerance s, percent), descending tolerance

    double accuracy_at(double tolerance) const;
};

/// Errors by shared note id; offsets are ignored.
std::vector<NoteError> onset_errors(const NoteSequence& est, const NoteSequence& ref);

/// Fallback for sequences without shared ids: each reference note takes the
/// nearest unused estimate of the same pitch within `window` seconds.
std::vector<NoteError> onset_errors_by_matching(const NoteSequence& est, const NoteSequence& ref, double window = 0.050);

/// Percent of errors <= tolerance; statistics over finite errors only.
AlignmentReport accuracy_report(const std::vector<NoteError>& errors,
                                const std::vector<double>& tolerances = {kTolerances.begin(), kTolerances.end()});

struct ComparisonRow {
    std::string method;
    AlignmentReport report;
};

struct ComparisonTable {
    std::vector<double> tolerances;
    std::vector<ComparisonRow> rows;
};

ComparisonTable compare_methods(std::vector<ComparisonRow> rows);

/// method,mean_ms,median_ms,std_ms,acc_<tol>ms... with two decimals.
std::string to_csv(const ComparisonTable& table);
nlohmann::ordered_json to_json(const ComparisonTable& table);
/// Aggregate statistics only.
nlohmann::ordered_json summary_json(const AlignmentReport& report);
/// Aggregate statistics plus per-note detail.
nlohmann::ordered_json to_json(const AlignmentReport& report);

}  // namespace midialign
