#include "msct/kernels.hpp"

#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace msct::kern {

namespace {

std::atomic<bool> g_parallel{true};

// Work below this many multiply-adds is not worth a parallel region.
constexpr int64_t kParallelThreshold = 1 << 16;

inline void matmul_rows(const double* a, const double* b, double* c, int64_t k, int64_t n,
                        int64_t i) {
    double* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = a + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
        const double aik = arow[kk];
        const double* brow = b + kk * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
}

inline void matmul_nt_rows(const double* a, const double* b, double* c, int64_t k, int64_t n,
                           int64_t i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double s = 0.0;
        for (int64_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
        crow[j] = s;
    }
}

inline void matmul_tn_rows(const double* a, const double* b, double* c, int64_t m, int64_t k,
                           int64_t n, int64_t i) {
    double* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) crow[j] = 0.0;
    for (int64_t kk = 0; kk < k; ++kk) {
        const double aki = a[kk * m + i];
        const double* brow = b + kk * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
}

}  // namespace

namespace serial {

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) matmul_rows(a, b, c, k, n, i);
}

void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) matmul_nt_rows(a, b, c, k, n, i);
}

void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) matmul_tn_rows(a, b, c, m, k, n, i);
}

}  // namespace serial

namespace par {

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) matmul_rows(a, b, c, k, n, i);
}

void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) matmul_nt_rows(a, b, c, k, n, i);
}

void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) matmul_tn_rows(a, b, c, m, k, n, i);
}

}  // namespace par

void set_parallel(bool enabled) { g_parallel.store(enabled, std::memory_order_relaxed); }

bool parallel_enabled() {
#ifdef _OPENMP
    return g_parallel.load(std::memory_order_relaxed);
#else
    return false;
#endif
}

namespace {
inline bool go_parallel(int64_t m, int64_t k, int64_t n) {
    return parallel_enabled() && m > 1 && m * k * n >= kParallelThreshold;
}
}  // namespace

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    if (go_parallel(m, k, n))
        par::matmul(a, b, c, m, k, n);
    else
        serial::matmul(a, b, c, m, k, n);
}

void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    if (go_parallel(m, k, n))
        par::matmul_nt(a, b, c, m, k, n);
    else
        serial::matmul_nt(a, b, c, m, k, n);
}

void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    if (go_parallel(m, k, n))
        par::matmul_tn(a, b, c, m, k, n);
    else
        serial::matmul_tn(a, b, c, m, k, n);
}

}  // namespace msct::kern
