#include "midialign/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace midialign::kernels {

namespace {

// Register tile: kRows rows of C by one vector-friendly strip of columns.
constexpr std::size_t kRows = 4;
template <typename T>
constexpr std::size_t kStrip = 128 / sizeof(T);  // 32 floats, 16 doubles
constexpr std::size_t kDepthBlock = 256;

template <typename T>
void pack(Transpose t, std::size_t rows, std::size_t cols, const T* src, std::size_t ld, std::vector<T>& dst) {
    // Produces a rows x cols row-major copy of op(src).
    dst.resize(rows * cols);
    if (t == Transpose::no) {
        for (std::size_t r = 0; r < rows; ++r) std::memcpy(dst.data() + r * cols, src + r * ld, cols * sizeof(T));
    } else {
        for (std::size_t c = 0; c < cols; ++c)
            for (std::size_t r = 0; r < rows; ++r) dst[r * cols + c] = src[c * ld + r];
    }
}

template <typename T>
inline void full_tile(std::size_t i0, std::size_t j0, std::size_t p0, std::size_t p1, T alpha, const T* a,
                      std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc) {
    constexpr std::size_t S = kStrip<T>;
    T acc[kRows][S] = {};
    for (std::size_t p = p0; p < p1; ++p) {
        const T* brow = b + p * ldb + j0;
        for (std::size_t r = 0; r < kRows; ++r) {
            const T av = a[(i0 + r) * lda + p];
#pragma omp simd
            for (std::size_t j = 0; j < S; ++j) acc[r][j] += av * brow[j];
        }
    }
    for (std::size_t r = 0; r < kRows; ++r) {
        T* crow = c + (i0 + r) * ldc + j0;
#pragma omp simd
        for (std::size_t j = 0; j < S; ++j) crow[j] += alpha * acc[r][j];
    }
}

template <typename T>
inline void edge_tile(std::size_t i0, std::size_t i1, std::size_t j0, std::size_t j1, std::size_t p0, std::size_t p1,
                      T alpha, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc) {
    for (std::size_t i = i0; i < i1; ++i) {
        T* crow = c + i * ldc;
        for (std::size_t p = p0; p < p1; ++p) {
            const T av = alpha * a[i * lda + p];
            const T* brow = b + p * ldb;
#pragma omp simd
            for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
    if (m == 0 || n == 0) return;
    if (beta == T(0)) {
        for (std::size_t i = 0; i < m; ++i) std::fill_n(c + i * ldc, n, T(0));
    } else if (beta != T(1)) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] *= beta;
    }
    if (k == 0 || alpha == T(0)) return;

    std::vector<T> a_packed, b_packed;
    if (ta == Transpose::yes) {
        pack(ta, m, k, a, lda, a_packed);
        a = a_packed.data();
        lda = k;
    }
    if (tb == Transpose::yes) {
        pack(tb, k, n, b, ldb, b_packed);
        b = b_packed.data();
        ldb = n;
    }

    constexpr std::size_t S = kStrip<T>;
    const std::size_t m_full = m - m % kRows;
    const std::size_t n_full = n - n % S;
    const auto row_tiles = static_cast<long>(m_full / kRows);
    for (std::size_t p0 = 0; p0 < k; p0 += kDepthBlock) {
        const std::size_t p1 = std::min(k, p0 + kDepthBlock);
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
        for (long t = 0; t < row_tiles; ++t) {
            const std::size_t i0 = static_cast<std::size_t>(t) * kRows;
            for (std::size_t j0 = 0; j0 < n_full; j0 += S) full_tile(i0, j0, p0, p1, alpha, a, lda, b, ldb, c, ldc);
            if (n_full < n) edge_tile(i0, i0 + kRows, n_full, n, p0, p1, alpha, a, lda, b, ldb, c, ldc);
        }
        if (m_full < m) edge_tile(m_full, m, std::size_t{0}, n, p0, p1, alpha, a, lda, b, ldb, c, ldc);
    }
}

namespace {

/// Zero-pads each channel plane by one row/column on every side.
template <typename T>
std::vector<T> pad_planes(const T* in, std::size_t channels, std::size_t h, std::size_t w) {
    const std::size_t hp = h + 2, wp = w + 2;
    std::vector<T> out(channels * hp * wp, T(0));
    for (std::size_t ch = 0; ch < channels; ++ch)
        for (std::size_t r = 0; r < h; ++r)
            std::memcpy(out.data() + (ch * hp + r + 1) * wp + 1, in + (ch * h + r) * w, w * sizeof(T));
    return out;
}

template <typename T>
void conv_padded(const T* padded, std::size_t cin, std::size_t h, std::size_t w, const T* weight, const T* bias,
                 std::size_t cout, T* out, bool accumulate) {
    const std::size_t wp = w + 2, plane = (h + 2) * wp;
#pragma omp parallel for schedule(static)
    for (long co_l = 0; co_l < static_cast<long>(cout); ++co_l) {
        const auto co = static_cast<std::size_t>(co_l);
        std::vector<T> acc(w);
        for (std::size_t t = 0; t < h; ++t) {
            T* dst = out + (co * h + t) * w;
            if (accumulate)
                std::copy(dst, dst + w, acc.begin());
            else
                std::fill(acc.begin(), acc.end(), bias ? bias[co] : T(0));
            T* ap = acc.data();
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const T* wk = weight + (co * cin + ci) * 9;
                for (std::size_t kt = 0; kt < 3; ++kt) {
                    const T* x = padded + ci * plane + (t + kt) * wp;
                    const T w0 = wk[kt * 3], w1 = wk[kt * 3 + 1], w2 = wk[kt * 3 + 2];
#pragma omp simd
                    for (std::size_t p = 0; p < w; ++p) ap[p] += w0 * x[p] + w1 * x[p + 1] + w2 * x[p + 2];
                }
            }
            std::copy(acc.begin(), acc.end(), dst);
        }
    }
}

}  // namespace

template <typename T>
void conv3x3_forward(const T* in, std::size_t cin, std::size_t h, std::size_t w, const T* weight, const T* bias,
                     std::size_t cout, T* out) {
    const auto padded = pad_planes(in, cin, h, w);
    conv_padded(padded.data(), cin, h, w, weight, bias, cout, out, false);
}

template <typename T>
void conv3x3_backward_input(const T* d_out, std::size_t cout, std::size_t h, std::size_t w, const T* weight,
                            std::size_t cin, T* d_in) {
    // The input gradient is a same-convolution of d_out with the channel-
    // swapped, spatially flipped kernel.
    std::vector<T> flipped(cin * cout * 9);
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t q = 0; q < 9; ++q) flipped[(ci * cout + co) * 9 + q] = weight[(co * cin + ci) * 9 + (8 - q)];
    const auto padded = pad_planes(d_out, cout, h, w);
    conv_padded(padded.data(), cout, h, w, flipped.data(), static_cast<const T*>(nullptr), cin, d_in, true);
}

template <typename T>
void conv3x3_backward_weights(const T* d_out, std::size_t cout, std::size_t h, std::size_t w, const T* in,
                              std::size_t cin, T* d_weight, T* d_bias) {
    const auto padded = pad_planes(in, cin, h, w);
    const std::size_t wp = w + 2, plane = (h + 2) * wp;
#pragma omp parallel for schedule(static)
    for (long co_l = 0; co_l < static_cast<long>(cout); ++co_l) {
        const auto co = static_cast<std::size_t>(co_l);
        const T* g = d_out + co * h * w;
        T bsum = 0;
        for (std::size_t i = 0; i < h * w; ++i) bsum += g[i];
        d_bias[co] += bsum;
        // Elementwise partial sums across time; one horizontal reduction per tap.
        std::vector<T> part(9 * w);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            std::fill(part.begin(), part.end(), T(0));
            for (std::size_t t = 0; t < h; ++t) {
                const T* grow = g + t * w;
                for (std::size_t kt = 0; kt < 3; ++kt) {
                    const T* x = padded.data() + ci * plane + (t + kt) * wp;
                    T* p0 = part.data() + (kt * 3) * w;
                    T* p1 = p0 + w;
                    T* p2 = p1 + w;
#pragma omp simd
                    for (std::size_t p = 0; p < w; ++p) {
                        p0[p] += grow[p] * x[p];
                        p1[p] += grow[p] * x[p + 1];
                        p2[p] += grow[p] * x[p + 2];
                    }
                }
            }
            T* dw = d_weight + (co * cin + ci) * 9;
            for (std::size_t q = 0; q < 9; ++q) {
                T sum = 0;
                for (std::size_t p = 0; p < w; ++p) sum += part[q * w + p];
                dw[q] += sum;
            }
        }
    }
}

// --- serial reference ------------------------------------------------------------

namespace serial {

template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = ta == Transpose::no ? a[i * lda + p] : a[p * lda + i];
                const T bv = tb == Transpose::no ? b[p * ldb + j] : b[j * ldb + p];
                acc += av * bv;
            }
            c[i * ldc + j] = alpha * acc + (beta == T(0) ? T(0) : beta * c[i * ldc + j]);
        }
}

template <typename T>
void conv3x3_forward(const T* in, std::size_t cin, std::size_t h, std::size_t w, const T* weight, const T* bias,
                     std::size_t cout, T* out) {
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t t = 0; t < h; ++t)
            for (std::size_t p = 0; p < w; ++p) {
                T acc = bias ? bias[co] : T(0);
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (int dt = -1; dt <= 1; ++dt)
                        for (int dp = -1; dp <= 1; ++dp) {
                            const long tt = static_cast<long>(t) + dt, pp = static_cast<long>(p) + dp;
                            if (tt < 0 || pp < 0 || tt >= static_cast<long>(h) || pp >= static_cast<long>(w)) continue;
                            acc += weight[((co * cin + ci) * 3 + static_cast<std::size_t>(dt + 1)) * 3 + static_cast<std::size_t>(dp + 1)] *
                                   in[(ci * h + static_cast<std::size_t>(tt)) * w + static_cast<std::size_t>(pp)];
                        }
                out[(co * h + t) * w + p] = acc;
            }
}

template <typename T>
void conv3x3_backward_input(const T* d_out, std::size_t cout, std::size_t h, std::size_t w, const T* weight,
                            std::size_t cin, T* d_in) {
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t t = 0; t < h; ++t)
            for (std::size_t p = 0; p < w; ++p) {
                const T g = d_out[(co * h + t) * w + p];
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (int dt = -1; dt <= 1; ++dt)
                        for (int dp = -1; dp <= 1; ++dp) {
                            const long tt = static_cast<long>(t) + dt, pp = static_cast<long>(p) + dp;
                            if (tt < 0 || pp < 0 || tt >= static_cast<long>(h) || pp >= static_cast<long>(w)) continue;
                            d_in[(ci * h + static_cast<std::size_t>(tt)) * w + static_cast<std::size_t>(pp)] +=
                                g * weight[((co * cin + ci) * 3 + static_cast<std::size_t>(dt + 1)) * 3 + static_cast<std::size_t>(dp + 1)];
                        }
            }
}

template <typename T>
void conv3x3_backward_weights(const T* d_out, std::size_t cout, std::size_t h, std::size_t w, const T* in,
                              std::size_t cin, T* d_weight, T* d_bias) {
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t t = 0; t < h; ++t)
            for (std::size_t p = 0; p < w; ++p) {
                const T g = d_out[(co * h + t) * w + p];
                d_bias[co] += g;
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (int dt = -1; dt <= 1; ++dt)
                        for (int dp = -1; dp <= 1; ++dp) {
                            const long tt = static_cast<long>(t) + dt, pp = static_cast<long>(p) + dp;
                            if (tt < 0 || pp < 0 || tt >= static_cast<long>(h) || pp >= static_cast<long>(w)) continue;
                            d_weight[((co * cin + ci) * 3 + static_cast<std::size_t>(dt + 1)) * 3 + static_cast<std::size_t>(dp + 1)] +=
                                g * in[(ci * h + static_cast<std::size_t>(tt)) * w + static_cast<std::size_t>(pp)];
                        }
            }
}

}  // namespace serial

#define MIDIALIGN_INSTANTIATE(T)                                                                                       \
    template void gemm<T>(Transpose, Transpose, std::size_t, std::size_t, std::size_t, T, const T*, std::size_t,       \
                          const T*, std::size_t, T, T*, std::size_t);                                                  \
    template void conv3x3_forward<T>(const T*, std::size_t, std::size_t, std::size_t, const T*, const T*, std::size_t, \
                                     T*);                                                                              \
    template void conv3x3_backward_input<T>(const T*, std::size_t, std::size_t, std::size_t, const T*, std::size_t,   \
                                            T*);                                                                       \
    template void conv3x3_backward_weights<T>(const T*, std::size_t, std::size_t, std::size_t, const T*, std::size_t, \
                                              T*, T*);                                                                 \
    template void serial::gemm<T>(Transpose, Transpose, std::size_t, std::size_t, std::size_t, T, const T*,           \
                                  std::size_t, const T*, std::size_t, T, T*, std::size_t);                             \
    template void serial::conv3x3_forward<T>(const T*, std::size_t, std::size_t, std::size_t, const T*, const T*,     \
                                             std::size_t, T*);                                                         \
    template void serial::conv3x3_backward_input<T>(const T*, std::size_t, std::size_t, std::size_t, const T*,        \
                                                    std::size_t, T*);                                                  \
    template void serial::conv3x3_backward_weights<T>(const T*, std::size_t, std::size_t, std::size_t, const T*,      \
                                                      std::size_t, T*, T*);

MIDIALIGN_INSTANTIATE(float)
MIDIALIGN_INSTANTIATE(double)

}  // namespace midialign::kernels
