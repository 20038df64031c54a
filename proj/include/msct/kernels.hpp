#pragma once

#include <cstdint>

namespace msct::kern {

// Dense f64 matmul kernels, row-major. The serial variants are the reference
// implementations; the parallel variants split the row loop across OpenMP
// threads with an identical per-element accumulation order, so results are
// bitwise equal regardless of thread count.

namespace serial {
// c[m x n] = a[m x k] * b[k x n]
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// c[m x n] = a[k x m]^T * b[k x n]
void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
}  // namespace serial

namespace par {
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
}  // namespace par

// Global switch plus a size threshold below which the dispatcher stays
// serial; tiny matrices lose more to fork/join than they gain.
void set_parallel(bool enabled);
bool parallel_enabled();

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

}  // namespace msct::kern
