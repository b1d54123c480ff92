#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "hnc/kernels.hpp"

using namespace hnc;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = normal(rng);
    return v;
}

// FMA and lane-wise partial sums reorder the additions.
double tol(std::size_t n) { return 1e-13 * static_cast<double>(n + 1); }

}  // namespace

TEST_CASE("scalar kernels match naive loops") {
    const auto& s = kernels::scalar_table();
    std::mt19937_64 rng(1);
    for (std::size_t n : {0u, 1u, 3u, 4u, 7u, 16u, 33u}) {
        const auto x = random_vec(n, rng), y = random_vec(n, rng);
        double dot = 0.0, sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            dot += x[i] * y[i];
            sq += (x[i] - y[i]) * (x[i] - y[i]);
        }
        CHECK(s.dot(x.data(), y.data(), n) == doctest::Approx(dot).epsilon(1e-14));
        CHECK(s.squared_distance(x.data(), y.data(), n) == doctest::Approx(sq).epsilon(1e-14));
    }
}

TEST_CASE("avx2 kernels agree with the scalar reference") {
    const kernels::KernelTable* v = kernels::avx2_table();
    if (!v) {
        MESSAGE("AVX2 kernels not available here, skipping");
        return;
    }
    const auto& s = kernels::scalar_table();
    std::mt19937_64 rng(2);
    for (std::size_t n = 0; n <= 67; ++n) {
        const auto x = random_vec(n, rng), y = random_vec(n, rng);
        CHECK(std::abs(v->dot(x.data(), y.data(), n) - s.dot(x.data(), y.data(), n)) <= tol(n));
        CHECK(std::abs(v->squared_distance(x.data(), y.data(), n) - s.squared_distance(x.data(), y.data(), n)) <=
              tol(n));
        auto ya = y, yb = y;
        v->axpy(0.7, x.data(), ya.data(), n);
        s.axpy(0.7, x.data(), yb.data(), n);
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(ya[i] - yb[i]) <= 1e-14);
    }
    for (std::size_t rows : {1u, 4u, 9u}) {
        for (std::size_t cols : {1u, 5u, 8u, 36u, 64u}) {
            const auto a = random_vec(rows * cols, rng), x = random_vec(cols, rng);
            std::vector<double> ya(rows, 0.5), yb(rows, 0.5);
            v->gemv(a.data(), rows, cols, x.data(), ya.data());
            s.gemv(a.data(), rows, cols, x.data(), yb.data());
            for (std::size_t r = 0; r < rows; ++r) CHECK(std::abs(ya[r] - yb[r]) <= tol(cols));
        }
    }
}

TEST_CASE("select switches the active table") {
    REQUIRE(kernels::select(kernels::Isa::Scalar));
    CHECK(kernels::active().isa == kernels::Isa::Scalar);
    CHECK(kernels::active_name() == "scalar");
    if (kernels::avx2_table()) {
        CHECK(kernels::select(kernels::Isa::Avx2));
        CHECK(kernels::active().isa == kernels::Isa::Avx2);
    } else {
        CHECK_FALSE(kernels::select(kernels::Isa::Avx2));
    }
}

TEST_CASE("transposed gemv and rank-1 update") {
    std::mt19937_64 rng(3);
    const std::size_t rows = 5, cols = 7;
    const auto a = random_vec(rows * cols, rng), g = random_vec(rows, rng), x = random_vec(cols, rng);
    std::vector<double> xg(cols, 0.0);
    kernels::gemv_transposed(a, g, xg);
    for (std::size_t c = 0; c < cols; ++c) {
        double e = 0.0;
        for (std::size_t r = 0; r < rows; ++r) e += a[r * cols + c] * g[r];
        CHECK(xg[c] == doctest::Approx(e).epsilon(1e-13));
    }
    auto b = a;
    kernels::rank1_update(b, -0.5, g, x);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            CHECK(b[r * cols + c] == doctest::Approx(a[r * cols + c] - 0.5 * g[r] * x[c]).epsilon(1e-13));
}
