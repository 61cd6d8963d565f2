#pragma once

// Data-parallel inner loops behind the network, losses and optimizer.
//
// Every kernel has a portable scalar reference and, where the host supports
// it, an AVX2+FMA variant. The variant is picked once at first use from CPUID;
// setting DEHAZE_KERNELS=scalar in the environment (or calling select()) pins
// the reference path. The two variants agree to rounding, not bit-for-bit:
// FMA contraction and lane-wise reductions change the summation order.

#include <cstddef>
#include <string_view>

namespace dehaze::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
    const char* name;

    /// C = alpha * op(A) * op(B) + beta * C, all row-major. op(A) is M x K,
    /// op(B) is K x N. beta == 0 ignores the prior contents of C (NaN-safe).
    void (*gemm)(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 double alpha, const double* a, std::size_t lda, const double* b, std::size_t ldb,
                 double beta, double* c, std::size_t ldc);

    /// y += alpha * x
    void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
    double (*dot)(std::size_t n, const double* x, const double* y);

    /// y = max(x, 0)
    void (*relu_forward)(std::size_t n, const double* x, double* y);
    /// dx += dy where y > 0
    void (*relu_backward)(std::size_t n, const double* y, const double* dy, double* dx);

    /// One Adam step over n parameters. bias1/bias2 are 1 - beta^t.
    void (*adam_update)(std::size_t n, double* param, const double* grad, double* m, double* v,
                        double lr, double beta1, double beta2, double eps, double bias1,
                        double bias2);

    /// Sum of the smooth-L1 penalty over pred - target. When grad is non-null
    /// it receives grad_scale * h'(pred - target) (overwrites, not accumulates).
    double (*smooth_l1)(std::size_t n, const double* pred, const double* target, double* grad,
                        double grad_scale);
};

const KernelTable& scalar_table();
/// Null when the binary was built without AVX2 support.
const KernelTable* avx2_table();

bool available(Isa isa);
/// Forces a variant; throws ConfigError when the host cannot run it.
void select(Isa isa);
Isa selected();
const KernelTable& active();

std::string_view name(Isa isa);

inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
                 const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
                 double* c, std::size_t ldc) {
    active().gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
inline void axpy(std::size_t n, double alpha, const double* x, double* y) { active().axpy(n, alpha, x, y); }
inline double dot(std::size_t n, const double* x, const double* y) { return active().dot(n, x, y); }

}  // namespace dehaze::kernels
