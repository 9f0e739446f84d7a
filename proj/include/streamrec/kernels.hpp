#pragma once

#include <cstddef>

#include "streamrec/common.hpp"

namespace streamrec::kernels {

/// Runtime switches for the parallel kernel paths. Row-partitioned matmul is
/// bit-deterministic regardless of thread count (each output cell is reduced
/// serially by one thread), so toggling parallelism never changes results.
struct Config {
    bool parallel = true;
    // Minimum m*k*n before the OpenMP path engages.
    std::size_t parallel_min_flops = 1u << 18;
};

Config& config();

/// c = (accumulate ? c : 0) + op(a) * op(b) where op transposes when the
/// corresponding flag is set. Logical dims after transposition: a is m x k,
/// b is k x n, c is m x n. trans_a && trans_b is unsupported.
void matmul(const real* a, const real* b, real* c,
            std::size_t m, std::size_t k, std::size_t n,
            bool trans_a, bool trans_b, bool accumulate);

/// Serial reference for the same contract; the parallel path must agree
/// with it exactly.
void matmul_serial(const real* a, const real* b, real* c,
                   std::size_t m, std::size_t k, std::size_t n,
                   bool trans_a, bool trans_b, bool accumulate);

bool openmp_compiled();
int max_threads();

} // namespace streamrec::kernels
