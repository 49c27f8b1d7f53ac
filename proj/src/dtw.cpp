#include "midialign/dtw.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include "midialign/errors.hpp"

namespace midialign {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::size_t kChroma = 12;

double cosine_distance(std::span<const float> a, std::span<const float> b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        ab += static_cast<double>(a[k]) * b[k];
        aa += static_cast<double>(a[k]) * a[k];
        bb += static_cast<double>(b[k]) * b[k];
    }
    if (aa == 0 && bb == 0) return 0.0;
    if (aa == 0 || bb == 0) return 1.0;
    return 1.0 - ab / std::sqrt(aa * bb);
}

double euclidean_distance(std::span<const float> a, std::span<const float> b) {
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = static_cast<double>(a[k]) - b[k];
        s += d * d;
    }
    return std::sqrt(s);
}

void check_pair(const FeatureMatrix& a, const FeatureMatrix& b) {
    if (a.num_frames() == 0 || b.num_frames() == 0) throw ArgumentError("DTW: empty feature sequence");
    if (a.num_bins() != b.num_bins()) throw ArgumentError("DTW: feature dimensions differ");
}

void check_pair(const SyncFeatures& a, const SyncFeatures& b) {
    check_pair(a.chroma, b.chroma);
    check_pair(a.dlnco, b.dlnco);
    if (a.chroma.num_frames() != a.dlnco.num_frames() || b.chroma.num_frames() != b.dlnco.num_frames())
        throw ArgumentError("DTW: chroma and onset features have different lengths");
}

struct PlainCost {
    const FeatureMatrix& a;
    const FeatureMatrix& b;
    Metric metric;
    double operator()(std::size_t i, std::size_t j) const {
        return metric == Metric::cosine ? cosine_distance(a.values.row(i), b.values.row(j))
                                        : euclidean_distance(a.values.row(i), b.values.row(j));
    }
};

struct SyncCost {
    const SyncFeatures& a;
    const SyncFeatures& b;
    double chroma_weight, onset_weight;
    double operator()(std::size_t i, std::size_t j) const {
        double c = 0;
        if (chroma_weight != 0) c += chroma_weight * cosine_distance(a.chroma.values.row(i), b.chroma.values.row(j));
        if (onset_weight != 0) c += onset_weight * euclidean_distance(a.dlnco.values.row(i), b.dlnco.values.row(j));
        return c;
    }
};

/// Per-row column interval [lo, hi] of admissible cells.
struct Band {
    std::vector<std::size_t> lo, hi;
    std::vector<std::size_t> offset;  // start of row i in flat storage
    std::size_t cols = 0;

    static Band full(std::size_t n, std::size_t m) {
        Band b;
        b.lo.assign(n, 0);
        b.hi.assign(n, m - 1);
        b.cols = m;
        b.finish();
        return b;
    }
    void finish() {
        offset.resize(lo.size() + 1);
        offset[0] = 0;
        for (std::size_t i = 0; i < lo.size(); ++i) offset[i + 1] = offset[i] + (hi[i] - lo[i] + 1);
    }
    std::size_t cells() const { return offset.back(); }
    bool contains(std::size_t i, std::size_t j) const { return j >= lo[i] && j <= hi[i]; }
    std::size_t index(std::size_t i, std::size_t j) const { return offset[i] + (j - lo[i]); }
};

template <typename CostFn>
std::vector<double> band_costs(const Band& band, const CostFn& fn) {
    std::vector<double> c(band.cells());
    const auto n = static_cast<long>(band.lo.size());
#pragma omp parallel for schedule(dynamic, 16)
    for (long il = 0; il < n; ++il) {
        const auto i = static_cast<std::size_t>(il);
        for (std::size_t j = band.lo[i]; j <= band.hi[i]; ++j) c[band.index(i, j)] = fn(i, j);
    }
    return c;
}

std::vector<Step> diagonal_first(std::vector<Step> steps) {
    std::stable_partition(steps.begin(), steps.end(), [](const Step& s) { return s.di == 1 && s.dj == 1; });
    return steps;
}

/// Dynamic program over a band; returns infinite cost when the end cell is
/// unreachable.
DtwResult dtw_banded(const Band& band, const std::vector<double>& cost, const std::vector<Step>& raw_steps) {
    const auto steps = diagonal_first(raw_steps);
    const std::size_t n = band.lo.size(), m = band.cols;
    std::vector<double> acc(band.cells(), kInf);
    std::vector<std::uint8_t> from(band.cells(), 0xff);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = band.lo[i]; j <= band.hi[i]; ++j) {
            const std::size_t idx = band.index(i, j);
            if (i == 0 && j == 0) {
                acc[idx] = cost[idx];
                continue;
            }
            double best = kInf;
            std::uint8_t arg = 0xff;
            for (std::size_t s = 0; s < steps.size(); ++s) {
                const auto di = static_cast<std::size_t>(steps[s].di), dj = static_cast<std::size_t>(steps[s].dj);
                if (di > i || dj > j) continue;
                const std::size_t pi = i - di, pj = j - dj;
                if (!band.contains(pi, pj)) continue;
                const double prev = acc[band.index(pi, pj)];
                if (prev == kInf) continue;
                const double v = prev + steps[s].weight * cost[idx];
                if (v < best) {
                    best = v;
                    arg = static_cast<std::uint8_t>(s);
                }
            }
            acc[idx] = best;
            from[idx] = arg;
        }
    }
    DtwResult r;
    if (!band.contains(n - 1, m - 1)) {
        r.cost = kInf;
        return r;
    }
    r.cost = acc[band.index(n - 1, m - 1)];
    if (r.cost == kInf) return r;
    std::size_t i = n - 1, j = m - 1;
    r.path.pairs.emplace_back(i, j);
    while (i != 0 || j != 0) {
        const Step& s = steps[from[band.index(i, j)]];
        i -= static_cast<std::size_t>(s.di);
        j -= static_cast<std::size_t>(s.dj);
        r.path.pairs.emplace_back(i, j);
    }
    std::reverse(r.path.pairs.begin(), r.path.pairs.end());
    return r;
}

DtwResult require_path(DtwResult r) {
    if (r.cost == kInf) throw ArgumentError("DTW: no admissible warping path for the configured step set");
    return r;
}

template <typename CostFn>
DtwResult full_dtw(std::size_t n, std::size_t m, const CostFn& fn, const std::vector<Step>& steps, double fps_a,
                   double fps_b) {
    const Band band = Band::full(n, m);
    DtwResult r = require_path(dtw_banded(band, band_costs(band, fn), steps));
    r.path.source_fps = fps_a;
    r.path.target_fps = fps_b;
    return r;
}

}  // namespace

std::vector<Step> CostConfig::weighted_steps() { return {{1, 1, 2.0}, {1, 2, 1.5}, {2, 1, 1.5}}; }
std::vector<Step> CostConfig::classic_steps() { return {{1, 1, 1.0}, {1, 0, 1.0}, {0, 1, 1.0}}; }

void CostConfig::validate() const {
    if (steps.empty()) throw ConfigError("DTW step set is empty");
    for (const Step& s : steps) {
        if (s.di < 0 || s.dj < 0 || (s.di == 0 && s.dj == 0)) throw ConfigError("DTW steps must advance monotonically");
        if (!(s.weight >= 0)) throw ConfigError("DTW step weights must be non-negative");
    }
    if (!(chroma_weight >= 0) || !(onset_weight >= 0)) throw ConfigError("cost weights must be non-negative");
    if (chroma_weight == 0 && onset_weight == 0) throw ConfigError("cost weights must not all be zero");
}

// --- features --------------------------------------------------------------------

FeatureMatrix chroma_from_features(const FeatureMatrix& feat) {
    FeatureMatrix out{Matrix<float>(feat.num_frames(), kChroma), feat.fps, FeatureKind::chroma};
    const float uniform = static_cast<float>(1.0 / std::sqrt(12.0));
    for (std::size_t r = 0; r < feat.num_frames(); ++r) {
        double acc[kChroma] = {};
        for (std::size_t b = 0; b < feat.num_bins(); ++b) acc[(b + kLowestPitch) % kChroma] += feat.values(r, b);
        double norm = 0;
        for (double v : acc) norm += v * v;
        norm = std::sqrt(norm);
        for (std::size_t c = 0; c < kChroma; ++c)
            out.values(r, c) = norm > 0 ? static_cast<float>(acc[c] / norm) : uniform;
    }
    return out;
}

FeatureMatrix dlnco_from_features(const FeatureMatrix& feat, const DlncoParams& params) {
    const std::size_t n = feat.num_frames();
    Matrix<double> onset(n, kChroma, 0.0);
    for (std::size_t r = 1; r < n; ++r)
        for (std::size_t b = 0; b < feat.num_bins(); ++b) {
            const double d = static_cast<double>(feat.values(r, b)) - feat.values(r - 1, b);
            if (d > 0) onset(r, (b + kLowestPitch) % kChroma) += d;
        }

    std::vector<double> norms(n);
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < kChroma; ++c) s += onset(r, c) * onset(r, c);
        norms[r] = std::sqrt(s);
    }
    const auto half = static_cast<std::size_t>(std::lround(0.5 * params.window_seconds * feat.fps));
    Matrix<double> normalized(n, kChroma, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t lo = r > half ? r - half : 0, hi = std::min(n - 1, r + half);
        const double local = std::max(params.epsilon, *std::max_element(norms.begin() + static_cast<std::ptrdiff_t>(lo),
                                                                       norms.begin() + static_cast<std::ptrdiff_t>(hi) + 1));
        for (std::size_t c = 0; c < kChroma; ++c) normalized(r, c) = onset(r, c) / local;
    }

    FeatureMatrix out{Matrix<float>(n, kChroma, 0.0f), feat.fps, FeatureKind::dlnco};
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < kChroma; ++c) {
            double acc = 0;
            for (std::size_t k = 0; k < params.kernel.size() && k <= r; ++k) acc += params.kernel[k] * normalized(r - k, c);
            out.values(r, c) = static_cast<float>(acc);
        }
    return out;
}

SyncFeatures sync_features(const FeatureMatrix& feat, const DlncoParams& params) {
    return {chroma_from_features(feat), dlnco_from_features(feat, params)};
}

// --- cost matrices -------------------------------------------------------------------

Matrix<double> local_cost_matrix(const FeatureMatrix& a, const FeatureMatrix& b, const CostConfig& cfg) {
    check_pair(a, b);
    const Band band = Band::full(a.num_frames(), b.num_frames());
    auto flat = band_costs(band, PlainCost{a, b, cfg.metric});
    Matrix<double> out(a.num_frames(), b.num_frames());
    out.storage() = std::move(flat);
    return out;
}

Matrix<double> local_cost_matrix(const SyncFeatures& a, const SyncFeatures& b, const CostConfig& cfg) {
    check_pair(a, b);
    const Band band = Band::full(a.num_frames(), b.num_frames());
    auto flat = band_costs(band, SyncCost{a, b, cfg.chroma_weight, cfg.onset_weight});
    Matrix<double> out(a.num_frames(), b.num_frames());
    out.storage() = std::move(flat);
    return out;
}

Matrix<double> serial::local_cost_matrix(const FeatureMatrix& a, const FeatureMatrix& b, const CostConfig& cfg) {
    check_pair(a, b);
    Matrix<double> out(a.num_frames(), b.num_frames());
    for (std::size_t i = 0; i < a.num_frames(); ++i)
        for (std::size_t j = 0; j < b.num_frames(); ++j) {
            double ab = 0, aa = 0, bb = 0, sq = 0;
            for (std::size_t k = 0; k < a.num_bins(); ++k) {
                const double x = a.values(i, k), y = b.values(j, k);
                ab += x * y;
                aa += x * x;
                bb += y * y;
                sq += (x - y) * (x - y);
            }
            if (cfg.metric == Metric::euclidean)
                out(i, j) = std::sqrt(sq);
            else
                out(i, j) = (aa == 0 && bb == 0) ? 0.0 : (aa == 0 || bb == 0) ? 1.0 : 1.0 - ab / std::sqrt(aa * bb);
        }
    return out;
}

Matrix<double> serial::local_cost_matrix(const SyncFeatures& a, const SyncFeatures& b, const CostConfig& cfg) {
    CostConfig cos_cfg = cfg, euc_cfg = cfg;
    cos_cfg.metric = Metric::cosine;
    euc_cfg.metric = Metric::euclidean;
    const auto c = serial::local_cost_matrix(a.chroma, b.chroma, cos_cfg);
    const auto o = serial::local_cost_matrix(a.dlnco, b.dlnco, euc_cfg);
    Matrix<double> out(c.rows(), c.cols());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = cfg.chroma_weight * c.data()[i] + cfg.onset_weight * o.data()[i];
    return out;
}

// --- dynamic programming -------------------------------------------------------------

DtwResult dtw_from_cost(const Matrix<double>& cost, const std::vector<Step>& steps) {
    if (cost.empty()) throw ArgumentError("DTW: empty cost matrix");
    const Band band = Band::full(cost.rows(), cost.cols());
    return require_path(dtw_banded(band, cost.storage(), steps));
}

DtwResult dtw_full(const FeatureMatrix& a, const FeatureMatrix& b, const CostConfig& cfg) {
    cfg.validate();
    check_pair(a, b);
    return full_dtw(a.num_frames(), b.num_frames(), PlainCost{a, b, cfg.metric}, cfg.steps, a.fps, b.fps);
}

DtwResult dtw_full(const SyncFeatures& a, const SyncFeatures& b, const CostConfig& cfg) {
    cfg.validate();
    check_pair(a, b);
    return full_dtw(a.num_frames(), b.num_frames(), SyncCost{a, b, cfg.chroma_weight, cfg.onset_weight}, cfg.steps,
                    a.chroma.fps, b.chroma.fps);
}

namespace {

FeatureMatrix coarsen(const FeatureMatrix& f, std::size_t factor) {
    FeatureMatrix out = downsample_frames(f, factor);
    if (f.kind == FeatureKind::chroma) {
        const float uniform = static_cast<float>(1.0 / std::sqrt(12.0));
        for (std::size_t r = 0; r < out.num_frames(); ++r) {
            auto row = out.values.row(r);
            double n = 0;
            for (float v : row) n += static_cast<double>(v) * v;
            n = std::sqrt(n);
            for (float& v : row) v = n > 0 ? static_cast<float>(v / n) : uniform;
        }
    }
    return out;
}

SyncFeatures coarsen(const SyncFeatures& f, std::size_t factor) { return {coarsen(f.chroma, factor), coarsen(f.dlnco, factor)}; }

std::size_t frames_of(const FeatureMatrix& f) { return f.num_frames(); }
std::size_t frames_of(const SyncFeatures& f) { return f.num_frames(); }
double fps_of(const FeatureMatrix& f) { return f.fps; }
double fps_of(const SyncFeatures& f) { return f.chroma.fps; }

/// Band around the coarse path scaled by `factor`, widened by `radius`.
Band project_band(const WarpPath& coarse, std::size_t factor, std::size_t n, std::size_t m, std::size_t radius) {
    Band band;
    band.cols = m;
    band.lo.assign(n, std::numeric_limits<std::size_t>::max());
    band.hi.assign(n, 0);
    auto cover = [&](std::size_t ci, std::size_t cj) {
        const std::size_t r0 = ci * factor, r1 = std::min(n, (ci + 1) * factor);
        const std::size_t c0 = cj * factor, c1 = std::min(m, (cj + 1) * factor) - 1;
        for (std::size_t r = r0; r < r1; ++r) {
            band.lo[r] = std::min(band.lo[r], c0);
            band.hi[r] = std::max(band.hi[r], c1);
        }
    };
    const auto& p = coarse.pairs;
    for (std::size_t k = 0; k < p.size(); ++k) {
        cover(p[k].first, p[k].second);
        if (k + 1 < p.size())
            for (std::size_t ci = p[k].first; ci <= p[k + 1].first; ++ci)
                for (std::size_t cj = p[k].second; cj <= p[k + 1].second; ++cj) cover(ci, cj);
    }
    for (std::size_t r = 0; r < n; ++r) {
        band.lo[r] = band.lo[r] > radius ? band.lo[r] - radius : 0;
        band.hi[r] = std::min(m - 1, band.hi[r] + radius);
    }
    // Each row's interval may only move forward.
    for (std::size_t r = 1; r < n; ++r) band.lo[r] = std::max(band.lo[r], band.lo[r - 1]);
    for (std::size_t r = n - 1; r-- > 0;) band.hi[r] = std::min(band.hi[r], band.hi[r + 1]);
    for (std::size_t r = 0; r < n; ++r) band.lo[r] = std::min(band.lo[r], band.hi[r]);
    band.finish();
    return band;
}

template <typename Features, typename MakeCost>
DtwResult multiscale(const Features& a, const Features& b, const CostConfig& cfg, std::size_t budget,
                     const MakeCost& make_cost) {
    const std::size_t n = frames_of(a), m = frames_of(b);
    if (n * m <= budget) {
        return full_dtw(n, m, make_cost(a, b), cfg.steps, fps_of(a), fps_of(b));
    }
    const auto factor = std::max<std::size_t>(
        2, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n) * static_cast<double>(m) / static_cast<double>(budget)))));
    const Features ca = coarsen(a, factor), cb = coarsen(b, factor);
    const DtwResult coarse = multiscale(ca, cb, cfg, budget, make_cost);

    for (std::size_t radius = kRefinementRadius;; radius *= 2) {
        const Band band = project_band(coarse.path, factor, n, m, radius);
        const auto fn = make_cost(a, b);
        DtwResult r = dtw_banded(band, band_costs(band, fn), cfg.steps);
        if (r.cost != kInf) {
            r.path.source_fps = fps_of(a);
            r.path.target_fps = fps_of(b);
            return r;
        }
        if (radius > std::max(n, m)) throw ArgumentError("DTW: no admissible warping path for the configured step set");
    }
}

}  // namespace

DtwResult mrmsdtw(const FeatureMatrix& a, const FeatureMatrix& b, const CostConfig& cfg, std::size_t memory_budget) {
    cfg.validate();
    if (memory_budget < kMinMemoryBudget) throw ConfigError("mrmsdtw: memory budget below 10^4 cells");
    check_pair(a, b);
    return multiscale(a, b, cfg, memory_budget,
                      [&](const FeatureMatrix& x, const FeatureMatrix& y) { return PlainCost{x, y, cfg.metric}; });
}

DtwResult mrmsdtw(const SyncFeatures& a, const SyncFeatures& b, const CostConfig& cfg, std::size_t memory_budget) {
    cfg.validate();
    if (memory_budget < kMinMemoryBudget) throw ConfigError("mrmsdtw: memory budget below 10^4 cells");
    check_pair(a, b);
    return multiscale(a, b, cfg, memory_budget, [&](const SyncFeatures& x, const SyncFeatures& y) {
        return SyncCost{x, y, cfg.chroma_weight, cfg.onset_weight};
    });
}

double path_cost(const WarpPath& path, const Matrix<double>& cost, const std::vector<Step>& steps) {
    if (path.pairs.empty()) throw ArgumentError("path_cost: empty path");
    double total = cost(path.pairs[0].first, path.pairs[0].second);
    for (std::size_t k = 1; k < path.pairs.size(); ++k) {
        const auto di = static_cast<long>(path.pairs[k].first) - static_cast<long>(path.pairs[k - 1].first);
        const auto dj = static_cast<long>(path.pairs[k].second) - static_cast<long>(path.pairs[k - 1].second);
        auto it = std::find_if(steps.begin(), steps.end(), [&](const Step& s) { return s.di == di && s.dj == dj; });
        if (it == steps.end()) throw ArgumentError("path_cost: path uses a step outside the step set");
        total += it->weight * cost(path.pairs[k].first, path.pairs[k].second);
    }
    return total;
}

// --- applying a path ---------------------------------------------------------------

NoteSequence apply_warp(const NoteSequence& seq, const WarpPath& path, std::size_t* clamped) {
    if (path.pairs.empty()) throw ArgumentError("apply_warp: empty path");
    std::map<std::size_t, std::pair<double, std::size_t>> sums;
    for (const auto& [i, j] : path.pairs) {
        auto& s = sums[i];
        s.first += static_cast<double>(j);
        ++s.second;
    }
    std::vector<double> xs, ys;
    for (const auto& [i, s] : sums) {
        xs.push_back(static_cast<double>(i));
        ys.push_back(s.first / static_cast<double>(s.second));
    }
    std::size_t n_clamped = 0;
    auto map_time = [&](double t) {
        double x = t * path.source_fps;
        if (x < xs.front() || x > xs.back()) {
            ++n_clamped;
            x = std::clamp(x, xs.front(), xs.back());
        }
        const auto it = std::upper_bound(xs.begin(), xs.end(), x);
        double y;
        if (it == xs.end()) {
            y = ys.back();
        } else {
            const std::size_t k = static_cast<std::size_t>(it - xs.begin());
            if (k == 0) {
                y = ys.front();
            } else {
                const double u = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
                y = ys[k - 1] + u * (ys[k] - ys[k - 1]);
            }
        }
        return y / path.target_fps;
    };

    constexpr double kMinDuration = 0.010;
    NoteSequence out;
    out.notes.reserve(seq.notes.size());
    for (const Note& n : seq.notes) {
        Note w = n;
        w.onset = std::max(0.0, map_time(n.onset));
        w.offset = map_time(n.offset);
        if (w.offset - w.onset < kMinDuration) w.offset = w.onset + kMinDuration;
        out.notes.push_back(w);
    }
    out.duration = std::max(static_cast<double>(path.pairs.back().second + 1) / path.target_fps, 0.0);
    out.normalize();
    if (clamped) *clamped = n_clamped;
    return out;
}

void write_path_csv(const WarpPath& path, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw IoError("cannot write path file " + file.string());
    out << "i,j\n";
    for (const auto& [i, j] : path.pairs) out << i << ',' << j << '\n';
}

}  // namespace midialign
