// Benchmark comparing the serial reference kernels against the OpenMP paths.
// The two must agree bitwise; the table reports timings and the max delta.

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "hulm/kernels.hpp"
#include "hulm/rng.hpp"

using namespace hulm;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::vector<double> random_vec(size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (double& x : v) {
        x = rng.uniform(-1.0, 1.0);
    }
    return v;
}

double max_delta(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        d = std::max(d, std::abs(a[i] - b[i]));
    }
    return d;
}

template <typename F>
double time_best_of(int reps, F&& fn) {
    double best = 1e300;
    for (int i = 0; i < reps; ++i) {
        const auto t0 = Clock::now();
        fn();
        best = std::min(best, ms_since(t0));
    }
    return best;
}

}  // namespace

int main() {
    Rng rng(7);
    std::printf("threads available: %d\n", kernels::max_threads());
    std::printf("%-28s %10s %10s %9s %10s\n", "kernel", "serial ms", "omp ms", "speedup", "max|d|");

    for (int n : {128, 256, 512}) {
        auto a = random_vec(static_cast<size_t>(n) * n, rng);
        auto b = random_vec(static_cast<size_t>(n) * n, rng);
        std::vector<double> c_ref(static_cast<size_t>(n) * n);
        std::vector<double> c_par(c_ref.size());

        const double t_ref =
            time_best_of(3, [&] { kernels::ref::matmul(a.data(), b.data(), c_ref.data(), n, n, n); });
        kernels::set_parallel(true);
        const double t_par =
            time_best_of(3, [&] { kernels::matmul(a.data(), b.data(), c_par.data(), n, n, n); });
        std::printf("%-28s %10.2f %10.2f %8.2fx %10.3g\n",
                    ("matmul " + std::to_string(n) + "^3").c_str(), t_ref, t_par, t_ref / t_par,
                    max_delta(c_ref, c_par));
    }

    {
        const int rows = 4096;
        const int cols = 512;
        auto x = random_vec(static_cast<size_t>(rows) * cols, rng);
        std::vector<double> y_ref(x.size());
        std::vector<double> y_par(x.size());
        const double t_ref = time_best_of(
            3, [&] { kernels::ref::softmax_rows(x.data(), y_ref.data(), rows, cols); });
        const double t_par =
            time_best_of(3, [&] { kernels::softmax_rows(x.data(), y_par.data(), rows, cols); });
        std::printf("%-28s %10.2f %10.2f %8.2fx %10.3g\n", "softmax 4096x512", t_ref, t_par,
                    t_ref / t_par, max_delta(y_ref, y_par));
    }

    {
        const int rows = 4096;
        const int cols = 512;
        auto x = random_vec(static_cast<size_t>(rows) * cols, rng);
        auto gain = random_vec(cols, rng);
        auto bias = random_vec(cols, rng);
        std::vector<double> y_ref(x.size());
        std::vector<double> y_par(x.size());
        std::vector<double> mu(rows);
        std::vector<double> rs(rows);
        const double t_ref = time_best_of(3, [&] {
            kernels::ref::layer_norm_rows(x.data(), gain.data(), bias.data(), y_ref.data(), mu.data(),
                                          rs.data(), rows, cols, 1e-5);
        });
        const double t_par = time_best_of(3, [&] {
            kernels::layer_norm_rows(x.data(), gain.data(), bias.data(), y_par.data(), mu.data(),
                                     rs.data(), rows, cols, 1e-5);
        });
        std::printf("%-28s %10.2f %10.2f %8.2fx %10.3g\n", "layer_norm 4096x512", t_ref, t_par,
                    t_ref / t_par, max_delta(y_ref, y_par));
    }
    return 0;
}
