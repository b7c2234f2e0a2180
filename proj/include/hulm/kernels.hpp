#pragma once

#include <cstddef>

namespace hulm::kernels {

// Dense numeric kernels behind the tensor ops. Every kernel exists twice:
// a plain serial reference under kernels::ref and an OpenMP-parallel version
// in this namespace. The parallel versions split work across independent
// output rows/elements while keeping the per-element accumulation order of
// the reference, so the two paths produce bitwise-identical results for any
// thread count. Tests and the bench_kernels tool compare them.

namespace ref {

// c[m x n] = a[m x k] * b[k x n]
void matmul(const double* a, const double* b, double* c, int m, int k, int n);
// c[m x n] += a[m x k] * b[n x k]^T
void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n);
// c[k x n] += a[m x k]^T * b[m x n]
void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n);
// row-wise softmax with max subtraction, in place semantics via out
void softmax_rows(const double* x, double* out, int rows, int cols);
// d_x from d_out for a row-softmax whose forward output is y
void softmax_rows_backward(const double* y, const double* d_out, double* d_x, int rows, int cols);
// y = gain * (x - mean) / sqrt(var + eps) + bias, per row over cols
void layer_norm_rows(const double* x, const double* gain, const double* bias, double* y,
                     double* mean, double* rstd, int rows, int cols, double eps);
void layer_norm_rows_backward(const double* x, const double* gain, const double* mean,
                              const double* rstd, const double* d_y, double* d_x,
                              double* d_gain, double* d_bias, int rows, int cols);

}  // namespace ref

// Runtime switch. Parallel dispatch is on by default when compiled with
// OpenMP; turning it off forces every call through kernels::ref.
void set_parallel(bool enabled);
bool parallel_enabled();
int max_threads();

void matmul(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n);
void softmax_rows(const double* x, double* out, int rows, int cols);
void softmax_rows_backward(const double* y, const double* d_out, double* d_x, int rows, int cols);
void layer_norm_rows(const double* x, const double* gain, const double* bias, double* y,
                     double* mean, double* rstd, int rows, int cols, double eps);
void layer_norm_rows_backward(const double* x, const double* gain, const double* mean,
                              const double* rstd, const double* d_y, double* d_x,
                              double* d_gain, double* d_bias, int rows, int cols);

}  // namespace hulm::kernels
