#pragma once
// Query-to-object assignment and the matching instability metric.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace hnc {

using Box = std::array<double, 4>;  // normalized cx, cy, w, h

/// Row-major n_queries x n_objects matrix.
struct CostMatrix {
    std::size_t n_queries = 0;
    std::size_t n_objects = 0;
    std::vector<double> entries;
    double lambda_cls = 0.0;
    double lambda_box = 0.0;

    CostMatrix() = default;
    CostMatrix(std::size_t queries, std::size_t objects, std::vector<double> values = {});

    double operator()(std::size_t q, std::size_t o) const { return entries[q * n_objects + o]; }
    double& operator()(std::size_t q, std::size_t o) { return entries[q * n_objects + o]; }
};

struct Assignment {
    std::vector<std::size_t> query_of_object;  // object j -> query
    double cost = 0.0;                         // summed in object order
};

// Assignments whose cost is within this of the optimum count as ties.
double tie_tolerance(const CostMatrix& cost);
// Sum of cost(query_of_object[j], j) over j in ascending order.
double assignment_cost(const CostMatrix& cost, const std::vector<std::size_t>& query_of_object);

// Minimum-cost injection objects -> queries. Among (near-)optimal assignments
// the lexicographically smallest query_of_object vector is returned.
Assignment hungarian(const CostMatrix& cost);
// Exhaustive search with the same tie rule; n_objects <= 8.
Assignment brute_force_assignment(const CostMatrix& cost);

struct QueryPrediction {
    std::vector<double> class_scores;  // normalized similarity in [0, 1] per leaf
    Box box{};
};

struct GroundTruth {
    std::size_t leaf = 0;
    Box box{};
};

// lambda_cls * (1 - score of the object's class) + lambda_box * L1(box_q, box_o)
CostMatrix build_cost(const std::vector<QueryPrediction>& preds, const std::vector<GroundTruth>& gts,
                      double lambda_cls, double lambda_box);

void check_box(const Box& b);

struct AssignmentRecord {
    std::string scene_id;
    std::int64_t epoch = 0;
    std::vector<std::size_t> assigned_query;  // per ground-truth object
};

// Fraction of ground-truth objects whose matched query differs between the
// two record sets. Scenes are paired by id.
double instability(const std::vector<AssignmentRecord>& prev, const std::vector<AssignmentRecord>& curr);

// CSV with header scene_id,epoch,object_idx,query_idx
inline constexpr const char* kAssignmentCsvHeader = "scene_id,epoch,object_idx,query_idx";
void write_assignment_csv(std::ostream& out, const std::vector<AssignmentRecord>& records, bool header = true);
// Groups rows back into records, ordered by (epoch, first appearance).
std::vector<AssignmentRecord> read_assignment_csv(std::istream& in);

}  // namespace hnc
