#include "spurmem/kernels.hpp"

#include <atomic>
#include <cstdint>

namespace spurmem::kernels {

namespace {

std::atomic<std::size_t> g_threshold{1u << 16};

// Row kernels shared by both variants. Row i of C depends only on row i of the
// inputs (or column i of A for the transposed case), so the parallel versions
// only differ in how rows are scheduled.
inline void matmul_row(const double* a, const double* b, double* c, std::size_t i, std::size_t k,
                       std::size_t n, bool accumulate) {
  double* ci = c + i * n;
  if (!accumulate)
    for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
  const double* ai = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const double av = ai[p];
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
  }
}

inline void matmul_tn_row(const double* a, const double* b, double* c, std::size_t i, std::size_t m,
                          std::size_t k, std::size_t n, bool accumulate) {
  double* ci = c + i * n;
  if (!accumulate)
    for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a[p * m + i];
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
  }
}

inline void matmul_nt_row(const double* a, const double* b, double* c, std::size_t i, std::size_t k,
                          std::size_t n, bool accumulate) {
  const double* ai = a + i * k;
  double* ci = c + i * n;
  for (std::size_t j = 0; j < n; ++j) {
    const double* bj = b + j * k;
    double acc = 0.0;
    for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
    ci[j] = accumulate ? ci[j] + acc : acc;
  }
}

}  // namespace

namespace serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) matmul_row(a.data(), b.data(), c.data(), i, k, n, accumulate);
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) matmul_tn_row(a.data(), b.data(), c.data(), i, m, k, n, accumulate);
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) matmul_nt_row(a.data(), b.data(), c.data(), i, k, n, accumulate);
}

}  // namespace serial

namespace parallel {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i)
    matmul_row(a.data(), b.data(), c.data(), static_cast<std::size_t>(i), k, n, accumulate);
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i)
    matmul_tn_row(a.data(), b.data(), c.data(), static_cast<std::size_t>(i), m, k, n, accumulate);
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i)
    matmul_nt_row(a.data(), b.data(), c.data(), static_cast<std::size_t>(i), k, n, accumulate);
}

}  // namespace parallel

std::size_t parallel_threshold() { return g_threshold.load(std::memory_order_relaxed); }
void set_parallel_threshold(std::size_t flops) { g_threshold.store(flops, std::memory_order_relaxed); }

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate) {
  if (m * k * n >= parallel_threshold())
    parallel::matmul(a, b, c, m, k, n, accumulate);
  else
    serial::matmul(a, b, c, m, k, n, accumulate);
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  if (m * k * n >= parallel_threshold())
    parallel::matmul_tn(a, b, c, m, k, n, accumulate);
  else
    serial::matmul_tn(a, b, c, m, k, n, accumulate);
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  if (m * k * n >= parallel_threshold())
    parallel::matmul_nt(a, b, c, m, k, n, accumulate);
  else
    serial::matmul_nt(a, b, c, m, k, n, accumulate);
}

}  // namespace spurmem::kernels
