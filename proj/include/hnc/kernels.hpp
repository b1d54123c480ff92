#pragma once
// Dense double-precision inner loops used by the loss and the toy decoder.
//
// Every kernel has a scalar reference implementation. An AVX2/FMA variant is
// compiled when the toolchain supports it and is picked at runtime when the
// CPU does. Set HNC_KERNELS=scalar|avx2 to force a variant.

#include <cstddef>
#include <span>
#include <string_view>

namespace hnc::kernels {

enum class Isa { Scalar, Avx2 };

struct KernelTable {
    Isa isa;
    const char* name;
    double (*dot)(const double* x, const double* y, std::size_t n);
    double (*squared_distance)(const double* x, const double* y, std::size_t n);
    // y += a * x
    void (*axpy)(double a, const double* x, double* y, std::size_t n);
    // y[r] += sum_c A[r, c] * x[c], A row-major rows x cols
    void (*gemv)(const double* a, std::size_t rows, std::size_t cols, const double* x, double* y);
};

const KernelTable& scalar_table() noexcept;
// nullptr when not compiled in or not supported by this CPU.
const KernelTable* avx2_table() noexcept;

// Currently selected table. Chosen once from HNC_KERNELS / CPU features.
const KernelTable& active() noexcept;
// Overrides the selection for the rest of the process (tests, benchmarks).
// Returns false if the requested variant is unavailable.
bool select(Isa isa) noexcept;
std::string_view active_name() noexcept;

// Span front-ends over active(). Sizes must agree.
double dot(std::span<const double> x, std::span<const double> y);
double squared_distance(std::span<const double> x, std::span<const double> y);
void axpy(double a, std::span<const double> x, std::span<double> y);
// y += A x for row-major A (rows = y.size(), cols = x.size()).
void gemv(std::span<const double> a, std::span<const double> x, std::span<double> y);
// x_grad += A^T g for row-major A (rows = g.size(), cols = x_grad.size()).
void gemv_transposed(std::span<const double> a, std::span<const double> g, std::span<double> x_grad);
// A += alpha * g x^T for row-major A.
void rank1_update(std::span<double> a, double alpha, std::span<const double> g, std::span<const double> x);

namespace detail {
double dot_scalar(const double* x, const double* y, std::size_t n);
double squared_distance_scalar(const double* x, const double* y, std::size_t n);
void axpy_scalar(double a, const double* x, double* y, std::size_t n);
void gemv_scalar(const double* a, std::size_t rows, std::size_t cols, const double* x, double* y);
#ifdef HNC_HAVE_AVX2
double dot_avx2(const double* x, const double* y, std::size_t n);
double squared_distance_avx2(const double* x, const double* y, std::size_t n);
void axpy_avx2(double a, const double* x, double* y, std::size_t n);
void gemv_avx2(const double* a, std::size_t rows, std::size_t cols, const double* x, double* y);
#endif
}  // namespace detail

}  // namespace hnc::kernels
