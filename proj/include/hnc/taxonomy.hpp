#pragma once
// Class hierarchy and the hierarchical prototype tree built on top of it.
//
// Level numbering is 1-based in files and in the public API: level 1 holds
// the leaf classes, level m the root. Internally levels()[0] is level 1.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hnc/geometry.hpp"

namespace hnc {

struct NodeSpec {
    std::string id;
    std::string name;
    int level = 1;
    std::string parent;      // empty for top-level nodes
    std::int64_t count = 0;  // leaves only
};

class ClassTaxonomy {
public:
    ClassTaxonomy() = default;

    // Validates: contiguous non-empty levels, unique ids, every non-top node
    // has a parent exactly one level up, every internal node has a child,
    // every leaf has a positive count.
    static ClassTaxonomy from_nodes(std::vector<NodeSpec> nodes);

    std::size_t depth() const noexcept { return levels_.size(); }
    std::size_t num_leaves() const noexcept { return levels_.empty() ? 0 : levels_[0].size(); }
    // level is 1-based
    const std::vector<std::string>& level(std::size_t level) const { return levels_.at(level - 1); }
    const std::vector<std::vector<std::string>>& levels() const noexcept { return levels_; }

    bool contains(const std::string& id) const { return index_.count(id) != 0; }
    int level_of(const std::string& id) const;
    std::size_t column_of(const std::string& id) const;  // position within its level
    const std::string& parent_of(const std::string& id) const;
    const std::string& name_of(const std::string& id) const;
    std::int64_t leaf_count(const std::string& id) const;
    const std::vector<std::string>& children_of(const std::string& id) const;

    // Ancestor of `id` at `level` (>= level_of(id)); the node itself when equal.
    const std::string& ancestor(const std::string& id, int level) const;
    // Sum of leaf counts below a node.
    std::int64_t aggregated_count(const std::string& id) const;

    std::vector<NodeSpec> nodes() const;

    // Copy with leaf counts replaced; ids missing from `counts` keep theirs.
    ClassTaxonomy with_leaf_counts(const std::map<std::string, std::int64_t>& counts) const;

private:
    struct Entry {
        NodeSpec spec;
        std::size_t column = 0;
        std::vector<std::string> children;
    };
    std::vector<std::vector<std::string>> levels_;
    std::map<std::string, Entry> index_;

    const Entry& entry(const std::string& id) const;
};

ClassTaxonomy load_taxonomy(const std::string& document);
ClassTaxonomy load_taxonomy_file(const std::string& path);
nlohmann::json to_json(const ClassTaxonomy& taxonomy);

// Random hierarchy for property sweeps: `depth` levels (>= 2, root included),
// `leaves` leaves, intermediate fan-out drawn from the seed.
ClassTaxonomy random_taxonomy(std::size_t leaves, std::size_t depth, std::uint64_t seed);

/// One prototype frame per taxonomy level. Column c of layers[i] is the
/// prototype of levels()[i][c].
struct HNCTree {
    ClassTaxonomy taxonomy;
    std::vector<PrototypeFrame> layers;
    std::size_t dim = 0;
    std::uint64_t seed = 0;
    // ancestor_columns[leaf column][level - 1] = column of the leaf's ancestor
    std::vector<std::vector<std::size_t>> ancestor_columns;

    std::size_t depth() const noexcept { return layers.size(); }
    const PrototypeFrame& level_frame(std::size_t level) const { return layers.at(level - 1); }
    std::size_t ancestor_column(std::size_t leaf_column, std::size_t level) const {
        return ancestor_columns.at(leaf_column).at(level - 1);
    }
};

HNCTree build_hnc(const ClassTaxonomy& taxonomy, std::size_t d, std::uint64_t seed);

// Adds new nodes (leaves with counts, plus any new internal nodes they hang
// from). Leaf prototypes are extended orthogonally; all coarser levels are
// rebuilt from the updated leaf frame.
HNCTree add_classes(const HNCTree& tree, std::span<const NodeSpec> new_nodes, std::uint64_t seed);

// Rebuilds levels 2..m from layers[0] using the current taxonomy counts.
void rebuild_parent_levels(HNCTree& tree);

// Pairwise |cos| at every level > 1, reconstruction of each parent from its
// children, and the GOF checks of the leaf level.
ValidationReport verify_hierarchy(const HNCTree& tree, double tol);

// Decoder layer j (0-based index) -> taxonomy level (1-based). Levels below
// the root are spread over contiguous layer groups, coarsest first; surplus
// layers go to finer levels and, when there are more levels than layers, the
// coarsest levels are dropped.
std::vector<std::size_t> map_layers(std::size_t tree_levels, std::size_t decoder_layers);

nlohmann::json to_json(const HNCTree& tree);
HNCTree tree_from_json(const nlohmann::json& j);

}  // namespace hnc
