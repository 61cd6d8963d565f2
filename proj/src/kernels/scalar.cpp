// Reference kernels. Plain loops in a fixed order; everything else is
// validated against these.

#include <algorithm>
#include <cmath>
#include <vector>

#include "dehaze/kernels.hpp"

namespace dehaze::kernels {
namespace {

void gemm_scalar(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
                 const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
                 double* c, std::size_t ldc) {
    std::vector<double> row(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(row.begin(), row.end(), 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ta ? a[p * lda + i] : a[i * lda + p];
            if (tb) {
                for (std::size_t j = 0; j < n; ++j) row[j] += av * b[j * ldb + p];
            } else {
                const double* brow = b + p * ldb;
                for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
            }
        }
        double* crow = c + i * ldc;
        if (beta == 0.0) {
            for (std::size_t j = 0; j < n; ++j) crow[j] = alpha * row[j];
        } else {
            for (std::size_t j = 0; j < n; ++j) crow[j] = alpha * row[j] + beta * crow[j];
        }
    }
}

void axpy_scalar(std::size_t n, double alpha, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double dot_scalar(std::size_t n, const double* x, const double* y) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

void relu_forward_scalar(std::size_t n, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward_scalar(std::size_t n, const double* y, const double* dy, double* dx) {
    for (std::size_t i = 0; i < n; ++i) {
        if (y[i] > 0.0) dx[i] += dy[i];
    }
}

void adam_update_scalar(std::size_t n, double* param, const double* grad, double* m, double* v,
                        double lr, double beta1, double beta2, double eps, double bias1,
                        double bias2) {
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g);
        const double mhat = m[i] / bias1;
        const double vhat = v[i] / bias2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

double smooth_l1_scalar(std::size_t n, const double* pred, const double* target, double* grad,
                        double grad_scale) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
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

const KernelTable& scalar_table() {
    static const KernelTable table{
        "scalar",          gemm_scalar,        axpy_scalar,        dot_scalar,
        relu_forward_scalar, relu_backward_scalar, adam_update_scalar, smooth_l1_scalar,
    };
    return table;
}

}  // namespace dehaze::kernels
