#pragma once

#include <filesystem>
#include <utility>
#include <vector>

#include "midialign/features.hpp"
#include "midialign/matrix.hpp"
#include "midialign/symbolic.hpp"

namespace midialign {

/// Admissible DTW step (di, dj) with the weight applied to the local cost
/// of the cell it enters.
struct Step {
    int di = 1;
    int dj = 1;
    double weight = 1.0;
};

enum class Metric { cosine, euclidean };

struct CostConfig {
    std::vector<Step> steps = weighted_steps();
    Metric metric = Metric::cosine;  // used for plain feature matrices
    double chroma_weight = 1.0;
    double onset_weight = 1.0;

    /// {(1,1):2, (1,2):1.5, (2,1):1.5}
    static std::vector<Step> weighted_steps();
    /// {(1,1):1, (1,0):1, (0,1):1}
    static std::vector<Step> classic_steps();
    void validate() const;
};

/// Monotone list of (source frame, target frame) pairs from (0,0) to
/// (N-1, M-1).
struct WarpPath {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    double source_fps = 50.0;
    double target_fps = 50.0;
};

struct DtwResult {
    WarpPath path;
    double cost = 0.0;  // accumulated weighted cost at (N-1, M-1)
};

/// Chroma plus decaying onset features at a common frame rate.
struct SyncFeatures {
    FeatureMatrix chroma;
    FeatureMatrix dlnco;

    std::size_t num_frames() const { return chroma.num_frames(); }
};

struct DlncoParams {
    double window_seconds = 1.0;
    double epsilon = 1e-4;
    std::vector<double> kernel{1.0, 0.8, 0.6, 0.4, 0.2};
};

/// Folds 88 pitch bins into 12 L2-normalized pitch classes (class of bin b is
/// (b + 21) mod 12). All-zero frames become the uniform vector 1/sqrt(12).
FeatureMatrix chroma_from_features(const FeatureMatrix& feat);

/// Rectified temporal difference per bin, folded to pitch classes, divided by
/// the local maximum frame norm (floored at epsilon), then smeared forward in
/// time with a decaying kernel.
FeatureMatrix dlnco_from_features(const FeatureMatrix& feat, const DlncoParams& params = {});

/// Chroma and onset features of an 88-bin input.
SyncFeatures sync_features(const FeatureMatrix& feat, const DlncoParams& params = {});

/// Local cost between every pair of frames, rows = frames of `a`.
Matrix<double> local_cost_matrix(const FeatureMatrix& a, const FeatureMatrix& b, const CostConfig& cfg);
Matrix<double> local_cost_matrix(const SyncFeatures& a, const SyncFeatures& b, const CostConfig& cfg);

namespace serial {
Matrix<double> local_cost_matrix(const FeatureMatrix& a, const FeatureMatrix& b, const CostConfig& cfg);
Matrix<double> local_cost_matrix(const SyncFeatures& a, const SyncFeatures& b, const CostConfig& cfg);
}  // namespace serial

/// Globally optimal warping of a precomputed cost matrix. Ties prefer the
/// diagonal step. Throws ArgumentError when no admissible path exists.
DtwResult dtw_from_cost(const Matrix<double>& cost, const std::vector<Step>& steps);

DtwResult dtw_full(const FeatureMatrix& a, const FeatureMatrix& b, const CostConfig& cfg);
DtwResult dtw_full(const SyncFeatures& a, const SyncFeatures& b, const CostConfig& cfg);

inline constexpr std::size_t kMinMemoryBudget = 10000;
inline constexpr std::size_t kRefinementRadius = 25;

/// Memory-restricted multiscale DTW: coarse DTW on averaged features sized to
/// the budget, then banded refinement (radius 25 frames) around the projected
/// path at each finer level. Identical to dtw_full when N*M fits the budget.
DtwResult mrmsdtw(const FeatureMatrix& a, const FeatureMatrix& b, const CostConfig& cfg, std::size_t memory_budget);
DtwResult mrmsdtw(const SyncFeatures& a, const SyncFeatures& b, const CostConfig& cfg, std::size_t memory_budget);

/// Weighted cost of `path` under `cost` and the step set; throws if the path
/// uses a step outside the set.
double path_cost(const WarpPath& path, const Matrix<double>& cost, const std::vector<Step>& steps);

/// Maps note boundaries through the path by piecewise-linear interpolation
/// (plateaus map to their mean target frame). `clamped` receives the number of
/// boundaries that fell outside the path span.
NoteSequence apply_warp(const NoteSequence& seq, const WarpPath& path, std::size_t* clamped = nullptr);

/// "i,j" rows with a header, for debugging.
void write_path_csv(const WarpPath& path, const std::filesystem::path& file);

}  // namespace midialign
