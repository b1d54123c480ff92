#include "hnc/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "hnc/errors.hpp"
#include "hnc/kernels.hpp"

namespace hnc {

namespace {

constexpr int kMaxResample = 16;

void require_positive(std::span<const std::int64_t> counts) {
    for (std::size_t i = 0; i < counts.size(); ++i)
        if (counts[i] <= 0)
            throw Error(ErrorKind::NonPositiveCount,
                        "count at position " + std::to_string(i) + " is " + std::to_string(counts[i]));
}

Eigen::MatrixXd gaussian_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd g(rows, cols);
    // column by column so the leading columns do not depend on cols
    for (std::size_t c = 0; c < cols; ++c)
        for (std::size_t r = 0; r < rows; ++r) g(r, c) = normal(rng);
    return g;
}

}  // namespace

std::string to_string(FrameKind kind) { return kind == FrameKind::Etf ? "ETF" : "GOF"; }

FrameKind frame_kind_from_string(const std::string& s) {
    if (s == "ETF") return FrameKind::Etf;
    if (s == "GOF") return FrameKind::Gof;
    throw Error(ErrorKind::Parse, "unknown frame kind '" + s + "'");
}

Eigen::MatrixXd sample_orthonormal(std::size_t d, std::size_t k, std::uint64_t seed) {
    if (d < k)
        throw Error(ErrorKind::DimensionTooSmall,
                    "need d >= K, got d=" + std::to_string(d) + " K=" + std::to_string(k));
    std::mt19937_64 rng(seed);
    const Eigen::MatrixXd g = gaussian_matrix(d, k, rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d),
                                                                        static_cast<Eigen::Index>(k));
    const Eigen::MatrixXd& r = qr.matrixQR();
    for (Eigen::Index c = 0; c < q.cols(); ++c)
        if (r(c, c) < 0.0) q.col(c) = -q.col(c);
    return q;
}

PrototypeFrame simplex_etf_from_basis(const Eigen::MatrixXd& basis, std::uint64_t seed) {
    const auto k = basis.cols();
    const auto d = basis.rows();
    if (k < 2) throw Error(ErrorKind::InvalidClassCount, "ETF needs K >= 2, got " + std::to_string(k));
    if (d < k)
        throw Error(ErrorKind::DimensionTooSmall,
                    "need d >= K, got d=" + std::to_string(d) + " K=" + std::to_string(k));
    const double kd = static_cast<double>(k);
    const Eigen::MatrixXd centering =
        Eigen::MatrixXd::Identity(k, k) - Eigen::MatrixXd::Constant(k, k, 1.0 / kd);
    PrototypeFrame f;
    f.kind = FrameKind::Etf;
    f.vectors = std::sqrt(kd / (kd - 1.0)) * basis * centering;
    f.counts.assign(static_cast<std::size_t>(k), 1);
    f.norm_constant = 1.0;
    f.seed = seed;
    return f;
}

PrototypeFrame build_simplex_etf(std::size_t k, std::size_t d, std::uint64_t seed) {
    if (k < 2) throw Error(ErrorKind::InvalidClassCount, "ETF needs K >= 2, got " + std::to_string(k));
    return simplex_etf_from_basis(sample_orthonormal(d, k, seed), seed);
}

PrototypeFrame gof_from_basis(std::span<const std::int64_t> counts, const Eigen::MatrixXd& basis,
                              std::uint64_t seed) {
    if (counts.empty()) throw Error(ErrorKind::InvalidClassCount, "GOF needs K >= 1");
    require_positive(counts);
    if (static_cast<std::size_t>(basis.cols()) != counts.size())
        throw Error(ErrorKind::InvalidClassCount, "basis has " + std::to_string(basis.cols()) +
                                                      " columns for " + std::to_string(counts.size()) +
                                                      " counts");
    if (basis.rows() < basis.cols())
        throw Error(ErrorKind::DimensionTooSmall, "need d >= K, got d=" + std::to_string(basis.rows()) +
                                                      " K=" + std::to_string(basis.cols()));
    double sq = 0.0;
    for (auto c : counts) sq += static_cast<double>(c) * static_cast<double>(c);
    const double z = std::sqrt(sq);

    PrototypeFrame f;
    f.kind = FrameKind::Gof;
    f.vectors = basis;
    for (std::size_t i = 0; i < counts.size(); ++i)
        f.vectors.col(static_cast<Eigen::Index>(i)) *= static_cast<double>(counts[i]) / z;
    f.counts.assign(counts.begin(), counts.end());
    f.norm_constant = z;
    f.seed = seed;
    return f;
}

PrototypeFrame build_gof(std::span<const std::int64_t> counts, std::size_t d, std::uint64_t seed) {
    if (counts.empty()) throw Error(ErrorKind::InvalidClassCount, "GOF needs K >= 1");
    require_positive(counts);
    return gof_from_basis(counts, sample_orthonormal(d, counts.size(), seed), seed);
}

PrototypeFrame extend_gof(const PrototypeFrame& frame, std::span<const std::int64_t> new_counts,
                          std::uint64_t seed) {
    if (frame.kind != FrameKind::Gof) throw Error(ErrorKind::WrongFrameKind, "extend_gof needs a GOF frame");
    require_positive(new_counts);
    const std::size_t d = frame.dim();
    const std::size_t k_old = frame.size();
    const std::size_t k_total = k_old + new_counts.size();
    if (d < k_total)
        throw Error(ErrorKind::Capacity, "dimension " + std::to_string(d) + " cannot hold " +
                                             std::to_string(k_total) + " orthogonal prototypes");
    PrototypeFrame out = frame;
    if (new_counts.empty()) return out;

    // Unit directions spanned so far; projections run against these.
    Eigen::MatrixXd basis(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k_total));
    for (std::size_t c = 0; c < k_old; ++c) {
        const auto col = frame.vectors.col(static_cast<Eigen::Index>(c));
        basis.col(static_cast<Eigen::Index>(c)) = col / col.norm();
    }

    out.vectors.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(k_total));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd v(static_cast<Eigen::Index>(d));
    for (std::size_t n = 0; n < new_counts.size(); ++n) {
        const std::size_t filled = k_old + n;
        bool ok = false;
        for (int attempt = 0; attempt < kMaxResample && !ok; ++attempt) {
            for (std::size_t r = 0; r < d; ++r) v(static_cast<Eigen::Index>(r)) = normal(rng);
            const double start = v.norm();
            // two Gram-Schmidt passes against the filled directions
            for (int pass = 0; pass < 2; ++pass)
                for (std::size_t c = 0; c < filled; ++c) {
                    const auto b = basis.col(static_cast<Eigen::Index>(c));
                    v -= b.dot(v) * b;
                }
            const double left = v.norm();
            if (left > 1e-8 * start) {
                basis.col(static_cast<Eigen::Index>(filled)) = v / left;
                ok = true;
            }
        }
        if (!ok) throw Error(ErrorKind::Degenerate, "could not draw an orthogonal direction");
        out.vectors.col(static_cast<Eigen::Index>(filled)) =
            basis.col(static_cast<Eigen::Index>(filled)) * (static_cast<double>(new_counts[n]) / frame.norm_constant);
        out.counts.push_back(new_counts[n]);
    }
    return out;
}

Eigen::MatrixXd gram(const PrototypeFrame& frame) {
    const std::size_t k = frame.size();
    Eigen::MatrixXd g(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i; j < k; ++j) {
            const double v = kernels::dot(frame.column(i), frame.column(j));
            g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
            g(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = v;
        }
    return g;
}

void ValidationReport::record(Violation v, double tol) {
    worst = std::max(worst, v.magnitude);
    if (!(v.magnitude < tol)) {
        pass = false;
        violations.push_back(std::move(v));
    }
}

std::string ValidationReport::summary() const {
    std::ostringstream os;
    os << (pass ? "pass" : "FAIL") << " worst=" << worst;
    if (!violations.empty()) {
        const auto& w = *std::max_element(violations.begin(), violations.end(),
                                          [](const auto& a, const auto& b) { return a.magnitude < b.magnitude; });
        os << " (" << violations.size() << " violations, largest " << w.check << " at (" << w.i << "," << w.j
           << ") = " << w.magnitude << ")";
    }
    return os.str();
}

ValidationReport verify_frame(const PrototypeFrame& frame, double tol) {
    ValidationReport rep;
    const std::size_t k = frame.size();
    if (frame.dim() < k) rep.record({"dim", frame.dim(), k, static_cast<double>(k - frame.dim())}, tol);
    if (frame.counts.size() != k) rep.record({"counts", frame.counts.size(), k, 1.0}, tol);
    const Eigen::MatrixXd g = gram(frame);
    if (frame.kind == FrameKind::Etf) {
        const double target = k > 1 ? -1.0 / static_cast<double>(k - 1) : 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            rep.record({"norm", i, i, std::abs(g(ii, ii) - 1.0)}, tol);
            for (std::size_t j = i + 1; j < k; ++j)
                rep.record({"angle", i, j, std::abs(g(ii, static_cast<Eigen::Index>(j)) - target)}, tol);
        }
    } else {
        for (std::size_t i = 0; i < k && i < frame.counts.size(); ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            const double ni = std::sqrt(g(ii, ii));
            const double c = static_cast<double>(frame.counts[i]);
            rep.record({"norm", i, i, std::abs(ni * frame.norm_constant - c) / c}, tol);
            for (std::size_t j = i + 1; j < k; ++j) {
                const auto jj = static_cast<Eigen::Index>(j);
                const double denom = ni * std::sqrt(g(jj, jj));
                const double cosine = denom > 0.0 ? std::abs(g(ii, jj)) / denom : std::abs(g(ii, jj));
                rep.record({"orthogonality", i, j, cosine}, tol);
            }
        }
    }
    return rep;
}

nlohmann::json to_json(const PrototypeFrame& frame) {
    nlohmann::json j;
    j["kind"] = to_string(frame.kind);
    j["dim"] = frame.dim();
    j["counts"] = frame.counts;
    j["norm_constant"] = frame.norm_constant;
    j["seed"] = frame.seed;
    std::vector<double> row_major;
    row_major.reserve(frame.dim() * frame.size());
    for (Eigen::Index r = 0; r < frame.vectors.rows(); ++r)
        for (Eigen::Index c = 0; c < frame.vectors.cols(); ++c) row_major.push_back(frame.vectors(r, c));
    j["vectors"] = std::move(row_major);
    return j;
}

PrototypeFrame frame_from_json(const nlohmann::json& j) {
    try {
        PrototypeFrame f;
        f.kind = frame_kind_from_string(j.at("kind").get<std::string>());
        const auto d = j.at("dim").get<std::size_t>();
        f.counts = j.at("counts").get<std::vector<std::int64_t>>();
        f.norm_constant = j.at("norm_constant").get<double>();
        f.seed = j.at("seed").get<std::uint64_t>();
        const auto flat = j.at("vectors").get<std::vector<double>>();
        const std::size_t k = f.counts.size();
        if (flat.size() != d * k)
            throw Error(ErrorKind::Parse, "vectors has " + std::to_string(flat.size()) + " entries, expected " +
                                              std::to_string(d * k));
        f.vectors.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t c = 0; c < k; ++c)
                f.vectors(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = flat[r * k + c];
        return f;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Parse, std::string("prototype frame: ") + e.what());
    }
}

}  // namespace hnc
