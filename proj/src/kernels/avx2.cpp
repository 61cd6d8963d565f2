// AVX2 + FMA kernels. This translation unit is compiled with -mavx2 -mfma
// and -ffp-contract=off; it is only entered after CPUID confirms support.
//
// The GEMM follows the usual packed-panel layout: op(A) is packed into
// MR-row panels and op(B) into NR-column panels per (KC, NC) block, and a
// 4x8 register-tile micro-kernel does the rank-1 updates.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dehaze/kernels.hpp"

namespace dehaze::kernels {
namespace {

constexpr std::size_t kMr = 4;
constexpr std::size_t kNr = 8;
constexpr std::size_t kKc = 256;
constexpr std::size_t kMc = 128;
constexpr std::size_t kNc = 2048;

inline double load_a(bool ta, const double* a, std::size_t lda, std::size_t i, std::size_t p) {
    return ta ? a[p * lda + i] : a[i * lda + p];
}

// Packs rows [i0, i0+mc) x cols [p0, p0+kc) of op(A) into MR-row panels,
// k-major inside each panel, zero-filling the ragged last panel.
void pack_a(bool ta, const double* a, std::size_t lda, std::size_t i0, std::size_t mc,
            std::size_t p0, std::size_t kc, double* out) {
    for (std::size_t ir = 0; ir < mc; ir += kMr) {
        const std::size_t rows = std::min(kMr, mc - ir);
        for (std::size_t p = 0; p < kc; ++p) {
            for (std::size_t r = 0; r < kMr; ++r) {
                *out++ = r < rows ? load_a(ta, a, lda, i0 + ir + r, p0 + p) : 0.0;
            }
        }
    }
}

void pack_b(bool tb, const double* b, std::size_t ldb, std::size_t p0, std::size_t kc,
            std::size_t j0, std::size_t nc, double* out) {
    for (std::size_t jr = 0; jr < nc; jr += kNr) {
        const std::size_t cols = std::min(kNr, nc - jr);
        if (tb) {
            // Walk each source row contiguously; the panel is written strided.
            for (std::size_t c = 0; c < kNr; ++c) {
                const double* src = b + (j0 + jr + c) * ldb + p0;
                for (std::size_t p = 0; p < kc; ++p) out[p * kNr + c] = c < cols ? src[p] : 0.0;
            }
            out += kc * kNr;
            continue;
        }
        for (std::size_t p = 0; p < kc; ++p) {
            if (cols == kNr) {
                const double* src = b + (p0 + p) * ldb + j0 + jr;
                _mm256_storeu_pd(out, _mm256_loadu_pd(src));
                _mm256_storeu_pd(out + 4, _mm256_loadu_pd(src + 4));
                out += kNr;
                continue;
            }
            for (std::size_t c = 0; c < kNr; ++c) {
                double v = 0.0;
                if (c < cols) v = b[(p0 + p) * ldb + j0 + jr + c];
                *out++ = v;
            }
        }
    }
}

// acc(4x8) = sum_p ap[p][0..4) (x) bp[p][0..8); then C_tile += alpha * acc.
// With `overwrite` the tile is stored as alpha * acc, ignoring C's contents.
void micro_kernel(std::size_t kc, const double* ap, const double* bp, double alpha, double* c,
                  std::size_t ldc, std::size_t rows, std::size_t cols, bool overwrite) {
    __m256d c00 = _mm256_setzero_pd(), c01 = _mm256_setzero_pd();
    __m256d c10 = _mm256_setzero_pd(), c11 = _mm256_setzero_pd();
    __m256d c20 = _mm256_setzero_pd(), c21 = _mm256_setzero_pd();
    __m256d c30 = _mm256_setzero_pd(), c31 = _mm256_setzero_pd();
    for (std::size_t p = 0; p < kc; ++p) {
        const __m256d b0 = _mm256_loadu_pd(bp);
        const __m256d b1 = _mm256_loadu_pd(bp + 4);
        __m256d a = _mm256_broadcast_sd(ap);
        c00 = _mm256_fmadd_pd(a, b0, c00);
        c01 = _mm256_fmadd_pd(a, b1, c01);
        a = _mm256_broadcast_sd(ap + 1);
        c10 = _mm256_fmadd_pd(a, b0, c10);
        c11 = _mm256_fmadd_pd(a, b1, c11);
        a = _mm256_broadcast_sd(ap + 2);
        c20 = _mm256_fmadd_pd(a, b0, c20);
        c21 = _mm256_fmadd_pd(a, b1, c21);
        a = _mm256_broadcast_sd(ap + 3);
        c30 = _mm256_fmadd_pd(a, b0, c30);
        c31 = _mm256_fmadd_pd(a, b1, c31);
        ap += kMr;
        bp += kNr;
    }
    const __m256d va = _mm256_set1_pd(alpha);
    if (rows == kMr && cols == kNr) {
        const __m256d acc[4][2] = {{c00, c01}, {c10, c11}, {c20, c21}, {c30, c31}};
        for (std::size_t r = 0; r < kMr; ++r) {
            double* crow = c + r * ldc;
            if (overwrite) {
                _mm256_storeu_pd(crow, _mm256_mul_pd(va, acc[r][0]));
                _mm256_storeu_pd(crow + 4, _mm256_mul_pd(va, acc[r][1]));
                continue;
            }
            _mm256_storeu_pd(crow, _mm256_fmadd_pd(va, acc[r][0], _mm256_loadu_pd(crow)));
            _mm256_storeu_pd(crow + 4, _mm256_fmadd_pd(va, acc[r][1], _mm256_loadu_pd(crow + 4)));
        }
        return;
    }
    alignas(32) double tile[kMr][kNr];
    _mm256_store_pd(tile[0], c00);
    _mm256_store_pd(tile[0] + 4, c01);
    _mm256_store_pd(tile[1], c10);
    _mm256_store_pd(tile[1] + 4, c11);
    _mm256_store_pd(tile[2], c20);
    _mm256_store_pd(tile[2] + 4, c21);
    _mm256_store_pd(tile[3], c30);
    _mm256_store_pd(tile[3] + 4, c31);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t col = 0; col < cols; ++col) {
            c[r * ldc + col] = overwrite ? alpha * tile[r][col] : std::fma(alpha, tile[r][col], c[r * ldc + col]);
        }
    }
}

void scale_c(std::size_t m, std::size_t n, double beta, double* c, std::size_t ldc) {
    if (beta == 1.0) return;
    for (std::size_t i = 0; i < m; ++i) {
        double* row = c + i * ldc;
        if (beta == 0.0) {
            std::fill(row, row + n, 0.0);
        } else {
            for (std::size_t j = 0; j < n; ++j) row[j] *= beta;
        }
    }
}

void gemm_avx2(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
               const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
               double* c, std::size_t ldc) {
    if (m == 0 || n == 0 || k == 0 || alpha == 0.0) {
        scale_c(m, n, beta, c, ldc);
        return;
    }
    const bool first_overwrites = beta == 0.0;
    if (!first_overwrites) scale_c(m, n, beta, c, ldc);

    thread_local std::vector<double> a_pack;
    thread_local std::vector<double> b_pack;
    // Grow only: shrinking and regrowing would re-zero megabytes per call.
    const std::size_t a_need = ((std::min(kMc, m) + kMr - 1) / kMr) * kMr * kKc;
    const std::size_t b_need = ((std::min(kNc, n) + kNr - 1) / kNr) * kNr * kKc;
    if (a_pack.size() < a_need) a_pack.resize(a_need);
    if (b_pack.size() < b_need) b_pack.resize(b_need);

    for (std::size_t j0 = 0; j0 < n; j0 += kNc) {
        const std::size_t nc = std::min(kNc, n - j0);
        for (std::size_t p0 = 0; p0 < k; p0 += kKc) {
            const std::size_t kc = std::min(kKc, k - p0);
            pack_b(tb, b, ldb, p0, kc, j0, nc, b_pack.data());
            for (std::size_t i0 = 0; i0 < m; i0 += kMc) {
                const std::size_t mc = std::min(kMc, m - i0);
                pack_a(ta, a, lda, i0, mc, p0, kc, a_pack.data());
                for (std::size_t jr = 0; jr < nc; jr += kNr) {
                    const double* bp = b_pack.data() + (jr / kNr) * kNr * kc;
                    const std::size_t cols = std::min(kNr, nc - jr);
                    for (std::size_t ir = 0; ir < mc; ir += kMr) {
                        const double* ap = a_pack.data() + (ir / kMr) * kMr * kc;
                        const std::size_t rows = std::min(kMr, mc - ir);
                        micro_kernel(kc, ap, bp, alpha, c + (i0 + ir) * ldc + j0 + jr, ldc, rows, cols,
                                     first_overwrites && p0 == 0);
                    }
                }
            }
        }
    }
}

double hsum(__m256d v) {
    const __m128d lo = _mm256_castpd256_pd128(v);
    const __m128d hi = _mm256_extractf128_pd(v, 1);
    const __m128d s = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

void axpy_avx2(std::size_t n, double alpha, const double* x, double* y) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    }
    for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

double dot_avx2(std::size_t n, const double* x, const double* y) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
    }
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s = std::fma(x[i], y[i], s);
    return s;
}

void relu_forward_avx2(std::size_t n, const double* x, double* y) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d v = _mm256_loadu_pd(x + i);
        // max_pd(v, 0) returns 0 for NaN in the first operand, so use a mask.
        const __m256d keep = _mm256_cmp_pd(v, zero, _CMP_GT_OQ);
        _mm256_storeu_pd(y + i, _mm256_and_pd(v, keep));
    }
    for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward_avx2(std::size_t n, const double* y, const double* dy, double* dx) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d keep = _mm256_cmp_pd(_mm256_loadu_pd(y + i), zero, _CMP_GT_OQ);
        const __m256d g = _mm256_and_pd(_mm256_loadu_pd(dy + i), keep);
        _mm256_storeu_pd(dx + i, _mm256_add_pd(_mm256_loadu_pd(dx + i), g));
    }
    for (; i < n; ++i) {
        if (y[i] > 0.0) dx[i] += dy[i];
    }
}

// Mirrors the scalar arithmetic operation-for-operation (no FMA), so the two
// variants produce bit-identical parameters.
void adam_update_avx2(std::size_t n, double* param, const double* grad, double* m, double* v,
                      double lr, double beta1, double beta2, double eps, double bias1,
                      double bias2) {
    const __m256d b1 = _mm256_set1_pd(beta1), ob1 = _mm256_set1_pd(1.0 - beta1);
    const __m256d b2 = _mm256_set1_pd(beta2), ob2 = _mm256_set1_pd(1.0 - beta2);
    const __m256d vlr = _mm256_set1_pd(lr), veps = _mm256_set1_pd(eps);
    const __m256d c1 = _mm256_set1_pd(bias1), c2 = _mm256_set1_pd(bias2);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d g = _mm256_loadu_pd(grad + i);
        const __m256d mi = _mm256_add_pd(_mm256_mul_pd(b1, _mm256_loadu_pd(m + i)), _mm256_mul_pd(ob1, g));
        const __m256d vi = _mm256_add_pd(_mm256_mul_pd(b2, _mm256_loadu_pd(v + i)),
                                         _mm256_mul_pd(ob2, _mm256_mul_pd(g, g)));
        _mm256_storeu_pd(m + i, mi);
        _mm256_storeu_pd(v + i, vi);
        const __m256d mhat = _mm256_div_pd(mi, c1);
        const __m256d vhat = _mm256_div_pd(vi, c2);
        const __m256d step = _mm256_div_pd(_mm256_mul_pd(vlr, mhat), _mm256_add_pd(_mm256_sqrt_pd(vhat), veps));
        _mm256_storeu_pd(param + i, _mm256_sub_pd(_mm256_loadu_pd(param + i), step));
    }
    for (; i < n; ++i) {
        const double g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g);
        param[i] -= lr * (m[i] / bias1) / (std::sqrt(v[i] / bias2) + eps);
    }
}

double smooth_l1_avx2(std::size_t n, const double* pred, const double* target, double* grad,
                      double grad_scale) {
    const __m256d one = _mm256_set1_pd(1.0);
    const __m256d half = _mm256_set1_pd(0.5);
    const __m256d sign_mask = _mm256_set1_pd(-0.0);
    const __m256d vs = _mm256_set1_pd(grad_scale);
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d e = _mm256_sub_pd(_mm256_loadu_pd(pred + i), _mm256_loadu_pd(target + i));
        const __m256d ae = _mm256_andnot_pd(sign_mask, e);
        const __m256d quad = _mm256_cmp_pd(ae, one, _CMP_LT_OQ);
        const __m256d val = _mm256_blendv_pd(_mm256_sub_pd(ae, half), _mm256_mul_pd(half, _mm256_mul_pd(e, e)), quad);
        acc = _mm256_add_pd(acc, val);
        if (grad) {
            const __m256d sgn = _mm256_or_pd(one, _mm256_and_pd(sign_mask, e));
            const __m256d d = _mm256_blendv_pd(sgn, e, quad);
            _mm256_storeu_pd(grad + i, _mm256_mul_pd(vs, d));
        }
    }
    double s = hsum(acc);
    for (; i < n; ++i) {
        const double e = pred[i] - target[i];
        const double ae = std::abs(e);
        if (ae < 1.0) {
            s += 0.5 * e * e;
            if (grad) grad[i] = grad_scale * e;
        } else {
            s += ae - 0.5;
            if (grad) grad[i] = grad_scale * (e > 0.0 ? 1.0 : -1.0);
        }
    }
    return s;
}

}  // namespace

const KernelTable* avx2_table() {
    static const KernelTable table{
        "avx2",          gemm_avx2,          axpy_avx2,        dot_avx2,
        relu_forward_avx2, relu_backward_avx2, adam_update_avx2, smooth_l1_avx2,
    };
    return &table;
}

}  // namespace dehaze::kernels
