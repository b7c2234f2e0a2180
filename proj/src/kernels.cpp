#include "hulm/kernels.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace hulm::kernels {

namespace {
bool g_parallel = true;
// Below this many output elements the omp fork costs more than it saves.
constexpr long kParallelCutoff = 4096;

inline bool use_parallel(long out_elems) {
#ifdef _OPENMP
    return g_parallel && out_elems >= kParallelCutoff && omp_get_max_threads() > 1;
#else
    (void)out_elems;
    return false;
#endif
}
}  // namespace

void set_parallel(bool enabled) { g_parallel = enabled; }
bool parallel_enabled() { return g_parallel; }

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// ----------------------------------------------------------------------------
// serial reference
// ----------------------------------------------------------------------------

namespace ref {

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<size_t>(i) * n;
        std::fill(crow, crow + n, 0.0);
        const double* arow = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    // c[i][j] += sum_p a[i][p] * b[j][p]
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    // c[p][j] += sum_i a[i][p] * b[i][j]
    for (int p = 0; p < k; ++p) {
        double* crow = c + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = a[static_cast<size_t>(i) * k + p];
            const double* brow = b + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void softmax_rows(const double* x, double* out, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + static_cast<size_t>(r) * cols;
        double* yr = out + static_cast<size_t>(r) * cols;
        double mx = xr[0];
        for (int j = 1; j < cols; ++j) {
            mx = std::max(mx, xr[j]);
        }
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < cols; ++j) {
            yr[j] *= inv;
        }
    }
}

void softmax_rows_backward(const double* y, const double* d_out, double* d_x, int rows, int cols) {
    // d_x = y * (d_out - dot(y, d_out)) per row
    for (int r = 0; r < rows; ++r) {
        const double* yr = y + static_cast<size_t>(r) * cols;
        const double* gr = d_out + static_cast<size_t>(r) * cols;
        double* dr = d_x + static_cast<size_t>(r) * cols;
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) {
            dot += yr[j] * gr[j];
        }
        for (int j = 0; j < cols; ++j) {
            dr[j] += yr[j] * (gr[j] - dot);
        }
    }
}

void layer_norm_rows(const double* x, const double* gain, const double* bias, double* y,
                     double* mean, double* rstd, int rows, int cols, double eps) {
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + static_cast<size_t>(r) * cols;
        double* yr = y + static_cast<size_t>(r) * cols;
        double mu = 0.0;
        for (int j = 0; j < cols; ++j) {
            mu += xr[j];
        }
        mu /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double d = xr[j] - mu;
            var += d * d;
        }
        var /= cols;
        const double rs = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        rstd[r] = rs;
        for (int j = 0; j < cols; ++j) {
            yr[j] = (xr[j] - mu) * rs * gain[j] + bias[j];
        }
    }
}

void layer_norm_rows_backward(const double* x, const double* gain, const double* mean,
                              const double* rstd, const double* d_y, double* d_x,
                              double* d_gain, double* d_bias, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + static_cast<size_t>(r) * cols;
        const double* gr = d_y + static_cast<size_t>(r) * cols;
        double* dxr = d_x + static_cast<size_t>(r) * cols;
        const double mu = mean[r];
        const double rs = rstd[r];
        double sum_g = 0.0;
        double sum_gx = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double xhat = (xr[j] - mu) * rs;
            const double gg = gr[j] * gain[j];
            sum_g += gg;
            sum_gx += gg * xhat;
        }
        const double inv_n = 1.0 / cols;
        for (int j = 0; j < cols; ++j) {
            const double xhat = (xr[j] - mu) * rs;
            const double gg = gr[j] * gain[j];
            dxr[j] += rs * (gg - inv_n * sum_g - xhat * inv_n * sum_gx);
        }
    }
    // gain/bias grads reduce over rows; kept serial and row-ordered so the
    // parallel wrapper can reuse it unchanged.
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + static_cast<size_t>(r) * cols;
        const double* gr = d_y + static_cast<size_t>(r) * cols;
        const double mu = mean[r];
        const double rs = rstd[r];
        for (int j = 0; j < cols; ++j) {
            d_gain[j] += gr[j] * (xr[j] - mu) * rs;
            d_bias[j] += gr[j];
        }
    }
}

}  // namespace ref

// ----------------------------------------------------------------------------
// OpenMP-parallel paths
// ----------------------------------------------------------------------------

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
    if (!use_parallel(static_cast<long>(m) * n)) {
        ref::matmul(a, b, c, m, k, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        ref::matmul(a + static_cast<size_t>(i) * k, b, c + static_cast<size_t>(i) * n, 1, k, n);
    }
}

void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    if (!use_parallel(static_cast<long>(m) * n)) {
        ref::matmul_nt_acc(a, b, c, m, k, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        ref::matmul_nt_acc(a + static_cast<size_t>(i) * k, b, c + static_cast<size_t>(i) * n, 1, k, n);
    }
}

void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    if (!use_parallel(static_cast<long>(k) * n)) {
        ref::matmul_tn_acc(a, b, c, m, k, n);
        return;
    }
    // Parallel over rows of c (columns p of a); every thread scans all of a/b
    // but writes a disjoint c row with the same i-ordered accumulation.
#pragma omp parallel for schedule(static)
    for (int p = 0; p < k; ++p) {
        double* crow = c + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = a[static_cast<size_t>(i) * k + p];
            const double* brow = b + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void softmax_rows(const double* x, double* out, int rows, int cols) {
    if (!use_parallel(static_cast<long>(rows) * cols)) {
        ref::softmax_rows(x, out, rows, cols);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        ref::softmax_rows(x + static_cast<size_t>(r) * cols, out + static_cast<size_t>(r) * cols, 1, cols);
    }
}

void softmax_rows_backward(const double* y, const double* d_out, double* d_x, int rows, int cols) {
    if (!use_parallel(static_cast<long>(rows) * cols)) {
        ref::softmax_rows_backward(y, d_out, d_x, rows, cols);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const size_t off = static_cast<size_t>(r) * cols;
        ref::softmax_rows_backward(y + off, d_out + off, d_x + off, 1, cols);
    }
}

void layer_norm_rows(const double* x, const double* gain, const double* bias, double* y,
                     double* mean, double* rstd, int rows, int cols, double eps) {
    if (!use_parallel(static_cast<long>(rows) * cols)) {
        ref::layer_norm_rows(x, gain, bias, y, mean, rstd, rows, cols, eps);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const size_t off = static_cast<size_t>(r) * cols;
        ref::layer_norm_rows(x + off, gain, bias, y + off, mean + r, rstd + r, 1, cols, eps);
    }
}

void layer_norm_rows_backward(const double* x, const double* gain, const double* mean,
                              const double* rstd, const double* d_y, double* d_x,
                              double* d_gain, double* d_bias, int rows, int cols) {
    if (!use_parallel(static_cast<long>(rows) * cols)) {
        ref::layer_norm_rows_backward(x, gain, mean, rstd, d_y, d_x, d_gain, d_bias, rows, cols);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const size_t off = static_cast<size_t>(r) * cols;
        double sum_g = 0.0;
        double sum_gx = 0.0;
        const double mu = mean[r];
        const double rs = rstd[r];
        for (int j = 0; j < cols; ++j) {
            const double xhat = (x[off + j] - mu) * rs;
            const double gg = d_y[off + j] * gain[j];
            sum_g += gg;
            sum_gx += gg * xhat;
        }
        const double inv_n = 1.0 / cols;
        for (int j = 0; j < cols; ++j) {
            const double xhat = (x[off + j] - mu) * rs;
            const double gg = d_y[off + j] * gain[j];
            d_x[off + j] += rs * (gg - inv_n * sum_g - xhat * inv_n * sum_gx);
        }
    }
    // The d_gain/d_bias reduction stays serial in row order: it is O(rows*cols)
    // against the O(rows*cols) main loop and must keep a fixed addition order.
    for (int r = 0; r < rows; ++r) {
        const size_t off = static_cast<size_t>(r) * cols;
        const double mu = mean[r];
        const double rs = rstd[r];
        for (int j = 0; j < cols; ++j) {
            d_gain[j] += d_y[off + j] * (x[off + j] - mu) * rs;
            d_bias[j] += d_y[off + j];
        }
    }
}

}  // namespace hulm::kernels
