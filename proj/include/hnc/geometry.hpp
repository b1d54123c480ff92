#pragma once
// Fixed class-prototype geometry: simplex equiangular tight frames (ETF) and
// general orthogonal frames (GOF), plus orthogonal extension of a GOF when
// new classes arrive.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace hnc {

enum class FrameKind { Etf, Gof };

std::string to_string(FrameKind kind);
FrameKind frame_kind_from_string(const std::string& s);

/// A d x K matrix whose columns are class prototypes.
///
/// For a GOF, column i has length counts[i] / norm_constant and all columns
/// are mutually orthogonal. norm_constant is fixed at first construction and
/// never recomputed when the frame is extended. ETF frames carry unit counts
/// and norm_constant 1.
struct PrototypeFrame {
    FrameKind kind = FrameKind::Gof;
    Eigen::MatrixXd vectors;  // column-major, columns are prototypes
    std::vector<std::int64_t> counts;
    double norm_constant = 1.0;
    std::uint64_t seed = 0;

    std::size_t dim() const noexcept { return static_cast<std::size_t>(vectors.rows()); }
    std::size_t size() const noexcept { return static_cast<std::size_t>(vectors.cols()); }

    std::span<const double> column(std::size_t k) const noexcept {
        return {vectors.data() + k * dim(), dim()};
    }
};

// d x K matrix with orthonormal columns (QR of a seeded Gaussian matrix, sign
// fixed so R has a positive diagonal). Deterministic in (d, K, seed).
Eigen::MatrixXd sample_orthonormal(std::size_t d, std::size_t k, std::uint64_t seed);

PrototypeFrame build_simplex_etf(std::size_t k, std::size_t d, std::uint64_t seed);
// Same construction with a caller-supplied orthonormal basis.
PrototypeFrame simplex_etf_from_basis(const Eigen::MatrixXd& basis, std::uint64_t seed = 0);

PrototypeFrame build_gof(std::span<const std::int64_t> counts, std::size_t d, std::uint64_t seed);
PrototypeFrame gof_from_basis(std::span<const std::int64_t> counts, const Eigen::MatrixXd& basis,
                              std::uint64_t seed = 0);

// Appends one column per new count, orthogonal to every existing and new
// column, with length new_count / frame.norm_constant. Existing columns are
// copied bit for bit.
PrototypeFrame extend_gof(const PrototypeFrame& frame, std::span<const std::int64_t> new_counts,
                          std::uint64_t seed);

Eigen::MatrixXd gram(const PrototypeFrame& frame);

struct Violation {
    std::string check;  // "dim", "norm", "angle", "orthogonality"
    std::size_t i = 0;
    std::size_t j = 0;
    double magnitude = 0.0;
};

struct ValidationReport {
    bool pass = true;
    double worst = 0.0;
    std::vector<Violation> violations;

    void record(Violation v, double tol);
    std::string summary() const;
};

// ETF: |squared norm - 1| and |G_ij + 1/(K-1)| per entry.
// GOF: |cos(m_i, m_j)| for i != j and |norm_i * Z - count_i| / count_i.
ValidationReport verify_frame(const PrototypeFrame& frame, double tol);

nlohmann::json to_json(const PrototypeFrame& frame);
PrototypeFrame frame_from_json(const nlohmann::json& j);

}  // namespace hnc
