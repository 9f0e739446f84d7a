#include "streamrec/kernels.hpp"

#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace streamrec::kernels {

Config& config() {
    static Config cfg;
    return cfg;
}

bool openmp_compiled() {
#ifdef _OPENMP
    return true;
#else
    return false;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace {

inline void zero_out(real* c, std::size_t m, std::size_t n, bool accumulate) {
    if (!accumulate) std::memset(c, 0, m * n * sizeof(real));
}

// c[i][j] += sum_k a[i][k] * b[k][j]
inline void row_nn(const real* a, const real* b, real* c,
                   std::size_t i, std::size_t k, std::size_t n) {
    const real* arow = a + i * k;
    real* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
        const real aik = arow[kk];
        if (aik == real(0)) continue;
        const real* brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
}

// c[i][j] += sum_k a[i][k] * b[j][k]   (b given as n x k)
inline void row_nt(const real* a, const real* b, real* c,
                   std::size_t i, std::size_t k, std::size_t n) {
    const real* arow = a + i * k;
    real* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
        const real* brow = b + j * k;
        real acc = 0;
        for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
        crow[j] += acc;
    }
}

// c[i][j] += sum_k a[k][i] * b[k][j]   (a given as k x m)
inline void row_tn(const real* a, const real* b, real* c,
                   std::size_t i, std::size_t k, std::size_t n,
                   std::size_t m) {
    real* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
        const real aki = a[kk * m + i];
        if (aki == real(0)) continue;
        const real* brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
}

} // namespace

void matmul_serial(const real* a, const real* b, real* c,
                   std::size_t m, std::size_t k, std::size_t n,
                   bool trans_a, bool trans_b, bool accumulate) {
    if (trans_a && trans_b)
        raise(ErrorCode::Usage, "matmul: trans_a && trans_b unsupported");
    zero_out(c, m, n, accumulate);
    for (std::size_t i = 0; i < m; ++i) {
        if (trans_a) row_tn(a, b, c, i, k, n, m);
        else if (trans_b) row_nt(a, b, c, i, k, n);
        else row_nn(a, b, c, i, k, n);
    }
}

void matmul(const real* a, const real* b, real* c,
            std::size_t m, std::size_t k, std::size_t n,
            bool trans_a, bool trans_b, bool accumulate) {
#ifdef _OPENMP
    const Config& cfg = config();
    const std::size_t flops = m * k * n;
    if (cfg.parallel && m >= 2 && flops >= cfg.parallel_min_flops &&
        omp_get_max_threads() > 1) {
        if (trans_a && trans_b)
            raise(ErrorCode::Usage, "matmul: trans_a && trans_b unsupported");
        zero_out(c, m, n, accumulate);
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(m); ++i) {
            const std::size_t row = static_cast<std::size_t>(i);
            if (trans_a) row_tn(a, b, c, row, k, n, m);
            else if (trans_b) row_nt(a, b, c, row, k, n);
            else row_nn(a, b, c, row, k, n);
        }
        return;
    }
#endif
    matmul_serial(a, b, c, m, k, n, trans_a, trans_b, accumulate);
}

} // namespace streamrec::kernels
