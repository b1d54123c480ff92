#include "hnc/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "hnc/errors.hpp"

namespace hnc {

CostMatrix::CostMatrix(std::size_t queries, std::size_t objects, std::vector<double> values)
    : n_queries(queries), n_objects(objects), entries(std::move(values)) {
    if (entries.empty()) entries.assign(queries * objects, 0.0);
    if (entries.size() != queries * objects)
        throw Error(ErrorKind::Size, "cost matrix expects " + std::to_string(queries * objects) + " entries, got " +
                                         std::to_string(entries.size()));
}

double tie_tolerance(const CostMatrix& cost) {
    double scale = 1.0;
    for (double v : cost.entries) scale = std::max(scale, std::abs(v));
    return 1e-12 * scale * static_cast<double>(std::max<std::size_t>(1, cost.n_objects));
}

double assignment_cost(const CostMatrix& cost, const std::vector<std::size_t>& query_of_object) {
    double s = 0.0;
    for (std::size_t j = 0; j < query_of_object.size(); ++j) s += cost(query_of_object[j], j);
    return s;
}

namespace {

void validate(const CostMatrix& cost) {
    if (cost.entries.size() != cost.n_queries * cost.n_objects)
        throw Error(ErrorKind::Size, "cost matrix entry count does not match its shape");
    if (cost.n_objects > cost.n_queries)
        throw Error(ErrorKind::InfeasibleShape, std::to_string(cost.n_objects) + " objects cannot be covered by " +
                                                    std::to_string(cost.n_queries) + " queries");
    for (double v : cost.entries)
        if (!std::isfinite(v)) throw Error(ErrorKind::InvalidRange, "cost matrix has a non-finite entry");
}

// Shortest augmenting path with potentials. rows = objects (n), cols =
// queries (m), n <= m. Returns the query for each object.
std::vector<std::size_t> solve(const std::vector<std::size_t>& objects, const std::vector<std::size_t>& queries,
                               const CostMatrix& cost) {
    const std::size_t n = objects.size();
    const std::size_t m = queries.size();
    std::vector<std::size_t> result(n, 0);
    if (n == 0) return result;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    std::vector<double> minv(m + 1);
    std::vector<char> used(m + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(queries[j - 1], objects[i0 - 1]) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j] != 0) result[p[j] - 1] = queries[j - 1];
    return result;
}

}  // namespace

Assignment hungarian(const CostMatrix& cost) {
    validate(cost);
    const std::size_t n = cost.n_objects;
    Assignment out;
    if (n == 0) return out;

    std::vector<std::size_t> all_objects(n), all_queries(cost.n_queries);
    for (std::size_t j = 0; j < n; ++j) all_objects[j] = j;
    for (std::size_t q = 0; q < cost.n_queries; ++q) all_queries[q] = q;
    std::vector<std::size_t> current = solve(all_objects, all_queries, cost);
    const double optimum = assignment_cost(cost, current);
    const double tol = tie_tolerance(cost);

    // Walk objects in order; at each one try smaller free queries than the
    // current optimal completion uses and keep the first that stays optimal.
    std::vector<char> taken(cost.n_queries, 0);
    double fixed = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        std::vector<std::size_t> rest_objects(all_objects.begin() + static_cast<std::ptrdiff_t>(j) + 1,
                                              all_objects.end());
        for (std::size_t q = 0; q < current[j]; ++q) {
            if (taken[q]) continue;
            std::vector<std::size_t> rest_queries;
            for (std::size_t r = 0; r < cost.n_queries; ++r)
                if (!taken[r] && r != q) rest_queries.push_back(r);
            const auto completion = solve(rest_objects, rest_queries, cost);
            double total = fixed + cost(q, j);
            for (std::size_t k = 0; k < completion.size(); ++k) total += cost(completion[k], j + 1 + k);
            if (total <= optimum + tol) {
                current[j] = q;
                std::copy(completion.begin(), completion.end(), current.begin() + static_cast<std::ptrdiff_t>(j) + 1);
                break;
            }
        }
        taken[current[j]] = 1;
        fixed += cost(current[j], j);
    }
    out.query_of_object = std::move(current);
    out.cost = assignment_cost(cost, out.query_of_object);
    return out;
}

Assignment brute_force_assignment(const CostMatrix& cost) {
    validate(cost);
    const std::size_t n = cost.n_objects;
    if (n > 8) throw Error(ErrorKind::Size, "brute force supports at most 8 objects, got " + std::to_string(n));
    Assignment out;
    if (n == 0) return out;

    std::vector<std::size_t> pick(n);
    std::vector<char> taken(cost.n_queries, 0);
    // visit(f) calls f on every injection in lexicographic order; f returns
    // true to stop.
    auto enumerate = [&](auto&& f) {
        auto rec = [&](auto&& self, std::size_t j) -> bool {
            if (j == n) return f();
            for (std::size_t q = 0; q < cost.n_queries; ++q) {
                if (taken[q]) continue;
                taken[q] = 1;
                pick[j] = q;
                const bool stop = self(self, j + 1);
                taken[q] = 0;
                if (stop) return true;
            }
            return false;
        };
        rec(rec, 0);
    };
    double best = std::numeric_limits<double>::infinity();
    enumerate([&] {
        best = std::min(best, assignment_cost(cost, pick));
        return false;
    });
    const double tol = tie_tolerance(cost);
    enumerate([&] {
        if (assignment_cost(cost, pick) <= best + tol) {
            out.query_of_object = pick;
            return true;
        }
        return false;
    });
    out.cost = assignment_cost(cost, out.query_of_object);
    return out;
}

void check_box(const Box& b) {
    for (double v : b)
        if (!(v >= 0.0 && v <= 1.0))
            throw Error(ErrorKind::BoxRange, "box component " + std::to_string(v) + " outside [0, 1]");
}

CostMatrix build_cost(const std::vector<QueryPrediction>& preds, const std::vector<GroundTruth>& gts,
                      double lambda_cls, double lambda_box) {
    CostMatrix c(preds.size(), gts.size());
    c.lambda_cls = lambda_cls;
    c.lambda_box = lambda_box;
    for (const auto& g : gts) check_box(g.box);
    for (std::size_t q = 0; q < preds.size(); ++q) {
        check_box(preds[q].box);
        for (std::size_t o = 0; o < gts.size(); ++o) {
            const auto& scores = preds[q].class_scores;
            if (gts[o].leaf >= scores.size())
                throw Error(ErrorKind::InvalidRange, "ground-truth class " + std::to_string(gts[o].leaf) +
                                                         " has no score");
            double l1 = 0.0;
            for (std::size_t k = 0; k < 4; ++k) l1 += std::abs(preds[q].box[k] - gts[o].box[k]);
            c(q, o) = lambda_cls * (1.0 - scores[gts[o].leaf]) + lambda_box * l1;
        }
    }
    return c;
}

double instability(const std::vector<AssignmentRecord>& prev, const std::vector<AssignmentRecord>& curr) {
    if (prev.size() != curr.size())
        throw Error(ErrorKind::MismatchedScenes, "record sets cover " + std::to_string(prev.size()) + " and " +
                                                     std::to_string(curr.size()) + " scenes");
    std::map<std::string, const AssignmentRecord*> by_id;
    for (const auto& r : prev)
        if (!by_id.emplace(r.scene_id, &r).second)
            throw Error(ErrorKind::MismatchedScenes, "scene '" + r.scene_id + "' recorded twice");
    std::size_t changed = 0, total = 0;
    for (const auto& r : curr) {
        auto it = by_id.find(r.scene_id);
        if (it == by_id.end())
            throw Error(ErrorKind::MismatchedScenes, "scene '" + r.scene_id + "' missing from previous records");
        const auto& before = it->second->assigned_query;
        if (before.size() != r.assigned_query.size())
            throw Error(ErrorKind::MismatchedScenes, "scene '" + r.scene_id + "' has a different object count");
        for (std::size_t o = 0; o < before.size(); ++o) changed += before[o] != r.assigned_query[o];
        total += before.size();
    }
    return total == 0 ? 0.0 : static_cast<double>(changed) / static_cast<double>(total);
}

void write_assignment_csv(std::ostream& out, const std::vector<AssignmentRecord>& records, bool header) {
    if (header) out << kAssignmentCsvHeader << '\n';
    for (const auto& r : records)
        for (std::size_t o = 0; o < r.assigned_query.size(); ++o)
            out << r.scene_id << ',' << r.epoch << ',' << o << ',' << r.assigned_query[o] << '\n';
}

std::vector<AssignmentRecord> read_assignment_csv(std::istream& in) {
    std::vector<AssignmentRecord> out;
    std::map<std::pair<std::int64_t, std::string>, std::size_t> slot;
    std::string line;
    if (!std::getline(in, line) || line != kAssignmentCsvHeader)
        throw Error(ErrorKind::Parse, "assignment CSV must start with '" + std::string(kAssignmentCsvHeader) + "'");
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string scene, epoch, object, query;
        if (!std::getline(ss, scene, ',') || !std::getline(ss, epoch, ',') || !std::getline(ss, object, ',') ||
            !std::getline(ss, query))
            throw Error(ErrorKind::Parse, "assignment CSV line " + std::to_string(lineno) + " is malformed");
        std::int64_t e = 0;
        std::size_t o = 0, q = 0;
        try {
            e = std::stoll(epoch);
            o = std::stoul(object);
            q = std::stoul(query);
        } catch (const std::exception&) {
            throw Error(ErrorKind::Parse, "assignment CSV line " + std::to_string(lineno) + " has a bad number");
        }
        auto [it, fresh] = slot.try_emplace({e, scene}, out.size());
        if (fresh) out.push_back({scene, e, {}});
        auto& rec = out[it->second];
        if (o != rec.assigned_query.size())
            throw Error(ErrorKind::Parse, "assignment CSV line " + std::to_string(lineno) + " skips an object index");
        rec.assigned_query.push_back(q);
    }
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.epoch < b.epoch; });
    return out;
}

}  // namespace hnc
