#pragma once

// Data-parallel inner loops. Each kernel has an OpenMP version (the default
// namespace) and a single-threaded reference in `serial`. Both visit every
// output element with the same summation order, so their results agree
// bitwise; tests rely on that.

#include <cstddef>
#include <span>

namespace flowseg::kernels {

/// C(m x n) (+)= A(m x k) * B(k x n)
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
/// C(m x n) (+)= A(m x k) * B(n x k)^T
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
/// C(m x n) (+)= A(k x m)^T * B(k x n)
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);

/// Exact squared Euclidean distance to the nearest feature cell (feature[i] != 0)
/// on a rows x cols grid. Cells have +inf distance when no feature exists.
void squared_edt(std::span<const unsigned char> feature, std::span<double> out,
                 std::size_t rows, std::size_t cols);

namespace serial {
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void squared_edt(std::span<const unsigned char> feature, std::span<double> out,
                 std::size_t rows, std::size_t cols);
}  // namespace serial

}  // namespace flowseg::kernels
