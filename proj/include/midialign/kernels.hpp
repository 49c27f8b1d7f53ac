#pragma once

#include <cstddef>

/// Dense compute kernels shared by the feature, alignment and network code.
/// The top-level functions are OpenMP-parallel and cache-blocked; the
/// `serial` namespace holds straightforward reference versions with the
/// same contracts, used by tests and the benchmark.
namespace midialign::kernels {

enum class Transpose { no, yes };

/// C = alpha * op(A) * op(B) + beta * C, row-major. op(A) is m x k,
/// op(B) is k x n. Instantiated for float and double.
template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

/// 3x3 "same" convolution of one sample. Layouts: in [cin][h][w],
/// weight [cout][cin][3][3], bias [cout], out [cout][h][w].
template <typename T>
void conv3x3_forward(const T* in, std::size_t cin, std::size_t h, std::size_t w, const T* weight, const T* bias,
                     std::size_t cout, T* out);

/// d_in += conv^T(d_out)
template <typename T>
void conv3x3_backward_input(const T* d_out, std::size_t cout, std::size_t h, std::size_t w, const T* weight,
                            std::size_t cin, T* d_in);

/// d_weight += correlation of d_out with in; d_bias += sum of d_out.
template <typename T>
void conv3x3_backward_weights(const T* d_out, std::size_t cout, std::size_t h, std::size_t w, const T* in,
                              std::size_t cin, T* d_weight, T* d_bias);

namespace serial {

template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

template <typename T>
void conv3x3_forward(const T* in, std::size_t cin, std::size_t h, std::size_t w, const T* weight, const T* bias,
                     std::size_t cout, T* out);

template <typename T>
void conv3x3_backward_input(const T* d_out, std::size_t cout, std::size_t h, std::size_t w, const T* weight,
                            std::size_t cin, T* d_in);

template <typename T>
void conv3x3_backward_weights(const T* d_out, std::size_t cout, std::size_t h, std::size_t w, const T* in,
                              std::size_t cin, T* d_weight, T* d_bias);

}  // namespace serial
}  // namespace midialign::kernels
