#include "hnc/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace hnc::kernels {

namespace {

const KernelTable kScalar{Isa::Scalar, "scalar", detail::dot_scalar, detail::squared_distance_scalar,
                          detail::axpy_scalar, detail::gemv_scalar};

#ifdef HNC_HAVE_AVX2
const KernelTable kAvx2{Isa::Avx2, "avx2", detail::dot_avx2, detail::squared_distance_avx2,
                        detail::axpy_avx2, detail::gemv_avx2};

bool cpu_has_avx2() noexcept {
#if defined(__GNUC__) || defined(__clang__)
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}
#endif

const KernelTable* initial_table() noexcept {
    const char* env = std::getenv("HNC_KERNELS");
    const std::string want = env ? env : "auto";
    if (want == "scalar") return &kScalar;
    if (const KernelTable* t = avx2_table()) return t;
    return &kScalar;
}

std::atomic<const KernelTable*>& slot() noexcept {
    static std::atomic<const KernelTable*> table{initial_table()};
    return table;
}

void check_same(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw std::invalid_argument(std::string("kernel size mismatch in ") + what);
}

}  // namespace

const KernelTable& scalar_table() noexcept { return kScalar; }

const KernelTable* avx2_table() noexcept {
#ifdef HNC_HAVE_AVX2
    static const bool ok = cpu_has_avx2();
    return ok ? &kAvx2 : nullptr;
#else
    return nullptr;
#endif
}

const KernelTable& active() noexcept { return *slot().load(std::memory_order_relaxed); }

bool select(Isa isa) noexcept {
    const KernelTable* t = isa == Isa::Scalar ? &kScalar : avx2_table();
    if (!t) return false;
    slot().store(t, std::memory_order_relaxed);
    return true;
}

std::string_view active_name() noexcept { return active().name; }

double dot(std::span<const double> x, std::span<const double> y) {
    check_same(x.size(), y.size(), "dot");
    return active().dot(x.data(), y.data(), x.size());
}

double squared_distance(std::span<const double> x, std::span<const double> y) {
    check_same(x.size(), y.size(), "squared_distance");
    return active().squared_distance(x.data(), y.data(), x.size());
}

void axpy(double a, std::span<const double> x, std::span<double> y) {
    check_same(x.size(), y.size(), "axpy");
    active().axpy(a, x.data(), y.data(), x.size());
}

void gemv(std::span<const double> a, std::span<const double> x, std::span<double> y) {
    check_same(a.size(), x.size() * y.size(), "gemv");
    active().gemv(a.data(), y.size(), x.size(), x.data(), y.data());
}

void gemv_transposed(std::span<const double> a, std::span<const double> g, std::span<double> x_grad) {
    check_same(a.size(), g.size() * x_grad.size(), "gemv_transposed");
    const KernelTable& k = active();
    const std::size_t cols = x_grad.size();
    for (std::size_t r = 0; r < g.size(); ++r)
        if (g[r] != 0.0) k.axpy(g[r], a.data() + r * cols, x_grad.data(), cols);
}

void rank1_update(std::span<double> a, double alpha, std::span<const double> g, std::span<const double> x) {
    check_same(a.size(), g.size() * x.size(), "rank1_update");
    const KernelTable& k = active();
    const std::size_t cols = x.size();
    for (std::size_t r = 0; r < g.size(); ++r)
        if (g[r] != 0.0) k.axpy(alpha * g[r], x.data(), a.data() + r * cols, cols);
}

}  // namespace hnc::kernels
