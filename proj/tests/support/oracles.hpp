#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <random>
#include <vector>

namespace midialign::testing {

/// Index of the largest-magnitude bin of a direct O(n^2) DFT over the
/// first n samples, excluding DC.
inline std::size_t dominant_dft_bin(const std::vector<float>& x, std::size_t offset, std::size_t n) {
    std::size_t best = 1;
    double best_mag = -1.0;
    for (std::size_t k = 1; k < n / 2; ++k) {
        std::complex<double> acc{0.0, 0.0};
        for (std::size_t t = 0; t < n; ++t) {
            const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * t / n);
            acc += w * x[offset + t] * std::polar(1.0, -2.0 * std::numbers::pi * double(k * t % n) / double(n));
        }
        if (std::abs(acc) > best_mag) {
            best_mag = std::abs(acc);
            best = k;
        }
    }
    return best;
}

inline std::vector<float> sine(double freq, double rate, std::size_t n, double amp = 0.5) {
    std::vector<float> out(n);
    for (std::size_t t = 0; t < n; ++t) out[t] = static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * freq * t / rate));
    return out;
}

}  // namespace midialign::testing

#include <algorithm>
#include <limits>
#include <map>
#include <utility>

#include "midialign/dtw.hpp"

namespace midialign::testing {

/// Top-down memoized recursion over the accumulated cost, written
/// independently of the bottom-up table in dtw_from_cost.
class MemoDtw {
public:
    MemoDtw(const Matrix<double>& cost, std::vector<Step> steps) : cost_(cost), steps_(std::move(steps)) {}

    double total() { return at(static_cast<long>(cost_.rows()) - 1, static_cast<long>(cost_.cols()) - 1); }

private:
    double at(long i, long j) {
        if (i < 0 || j < 0) return std::numeric_limits<double>::infinity();
        if (i == 0 && j == 0) return cost_(0, 0);
        const auto key = std::make_pair(i, j);
        if (auto it = memo_.find(key); it != memo_.end()) return it->second;
        double best = std::numeric_limits<double>::infinity();
        for (const Step& s : steps_) best = std::min(best, at(i - s.di, j - s.dj) + s.weight * cost_(std::size_t(i), std::size_t(j)));
        memo_[key] = best;
        return best;
    }

    const Matrix<double>& cost_;
    std::vector<Step> steps_;
    std::map<std::pair<long, long>, double> memo_;
};

inline FeatureMatrix random_features(std::mt19937_64& rng, std::size_t frames, std::size_t bins = 12) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    FeatureMatrix f{Matrix<float>(frames, bins), 50.0, FeatureKind::chroma};
    for (float& v : f.values.storage()) v = u(rng);
    return f;
}

}  // namespace midialign::testing
