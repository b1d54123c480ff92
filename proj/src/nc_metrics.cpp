#include <algorithm>
#include <cmath>

#include "hnc/errors.hpp"
#include "hnc/trainer.hpp"

namespace hnc {

NCReport nc_metrics(const std::vector<std::vector<std::vector<double>>>& features_by_class,
                    const Eigen::MatrixXd& classifier) {
    const auto K = static_cast<Eigen::Index>(features_by_class.size());
    if (classifier.cols() != K)
        throw Error(ErrorKind::DimensionMismatch, "classifier has " + std::to_string(classifier.cols()) +
                                                      " columns for " + std::to_string(K) + " classes");
    const Eigen::Index d = classifier.rows();

    std::vector<Eigen::Index> present;
    std::size_t n = 0;
    for (Eigen::Index k = 0; k < K; ++k) {
        const auto& fs = features_by_class[static_cast<std::size_t>(k)];
        if (fs.empty()) continue;
        present.push_back(k);
        n += fs.size();
        for (const auto& f : fs)
            if (static_cast<Eigen::Index>(f.size()) != d)
                throw Error(ErrorKind::DimensionMismatch, "feature dimension does not match classifier");
    }
    if (present.size() < 2) throw Error(ErrorKind::DegenerateClass, "need samples in at least 2 classes");

    Eigen::MatrixXd means = Eigen::MatrixXd::Zero(d, K);
    Eigen::VectorXd global = Eigen::VectorXd::Zero(d);
    for (auto k : present) {
        const auto& fs = features_by_class[static_cast<std::size_t>(k)];
        for (const auto& f : fs) means.col(k) += Eigen::Map<const Eigen::VectorXd>(f.data(), d);
        means.col(k) /= static_cast<double>(fs.size());
        global += means.col(k);
    }
    // h_G as the mean of class means, so imbalance does not tilt the frame.
    global /= static_cast<double>(present.size());

    NCReport r;
    double scatter = 0.0;
    std::size_t agree = 0;
    for (auto k : present) {
        for (const auto& f : features_by_class[static_cast<std::size_t>(k)]) {
            const Eigen::Map<const Eigen::VectorXd> h(f.data(), d);
            scatter += (h - means.col(k)).squaredNorm();
            Eigen::Index best_w = present[0], best_m = present[0];
            double top = -std::numeric_limits<double>::infinity(), near = std::numeric_limits<double>::infinity();
            for (auto c : present) {
                const double s = h.dot(classifier.col(c));
                if (s > top) {
                    top = s;
                    best_w = c;
                }
                const double dist = (h - means.col(c)).squaredNorm();
                if (dist < near) {
                    near = dist;
                    best_m = c;
                }
            }
            if (best_w == best_m) ++agree;
        }
    }
    r.nc1 = scatter / static_cast<double>(n);
    r.nc4_agreement = static_cast<double>(agree) / static_cast<double>(n);

    std::vector<Eigen::VectorXd> centered, cols;
    for (auto k : present) {
        Eigen::VectorXd c = means.col(k) - global;
        const double cn = c.norm();
        const double wn = classifier.col(k).norm();
        if (cn == 0.0 || wn == 0.0)
            throw Error(ErrorKind::DegenerateClass, "class " + std::to_string(k) + " has a zero centered mean");
        centered.push_back(c / cn);
        cols.push_back(classifier.col(k) / wn);
    }
    for (std::size_t a = 0; a < centered.size(); ++a) {
        const double cosw = std::clamp(centered[a].dot(cols[a]), -1.0, 1.0);
        r.nc3 = std::max(r.nc3, std::acos(cosw));
        for (std::size_t b = 0; b < centered.size(); ++b)
            r.nc2 = std::max(r.nc2, std::abs(centered[a].dot(centered[b]) - cols[a].dot(cols[b])));
    }
    return r;
}

}  // namespace hnc
