#pragma once

#include <cstddef>
#include <span>

// Dense GEMM kernels. Every kernel exists twice: a serial reference and an
// OpenMP version that splits output rows across threads. Each output element
// is accumulated in the same order in both, so results are bitwise equal.
namespace spurmem::kernels {

// C[m x n] = A[m x k] * B[k x n]
// C[m x n] = A^T * B   with A[k x m], B[k x n]
// C[m x n] = A * B^T   with A[m x k], B[n x k]
// When `accumulate` is set, results are added into C instead of overwriting.
namespace serial {
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate = false);
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false);
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false);
}  // namespace serial

namespace parallel {
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate = false);
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false);
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false);
}  // namespace parallel

// Dispatching entry points: parallel above `parallel_threshold()` multiply-adds.
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate = false);
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false);
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false);

std::size_t parallel_threshold();
void set_parallel_threshold(std::size_t flops);

}  // namespace spurmem::kernels
