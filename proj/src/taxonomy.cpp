#include "hnc/taxonomy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "hnc/errors.hpp"
#include "hnc/kernels.hpp"

namespace hnc {

ClassTaxonomy ClassTaxonomy::from_nodes(std::vector<NodeSpec> nodes) {
    ClassTaxonomy t;
    int max_level = 0;
    for (const auto& n : nodes) {
        if (n.id.empty()) throw Error(ErrorKind::Parse, "node with empty id");
        if (n.level < 1) throw Error(ErrorKind::Parse, "node '" + n.id + "' has level < 1");
        max_level = std::max(max_level, n.level);
    }
    if (nodes.empty()) throw Error(ErrorKind::EmptyLevel, "taxonomy has no nodes");
    t.levels_.resize(static_cast<std::size_t>(max_level));
    for (auto& n : nodes) {
        if (t.index_.count(n.id)) throw Error(ErrorKind::DuplicateId, "node id '" + n.id + "' appears twice");
        if (n.name.empty()) n.name = n.id;
        auto& lvl = t.levels_[static_cast<std::size_t>(n.level - 1)];
        Entry e;
        e.column = lvl.size();
        lvl.push_back(n.id);
        if (n.level > 1) n.count = 0;
        e.spec = std::move(n);
        t.index_.emplace(e.spec.id, std::move(e));
    }
    for (std::size_t i = 0; i < t.levels_.size(); ++i)
        if (t.levels_[i].empty())
            throw Error(ErrorKind::EmptyLevel, "level " + std::to_string(i + 1) + " has no nodes");

    for (auto& [id, e] : t.index_) {
        const auto& s = e.spec;
        if (s.level == max_level) {
            if (!s.parent.empty())
                throw Error(ErrorKind::Parse, "top-level node '" + id + "' must not have a parent");
        } else {
            if (s.parent.empty()) throw Error(ErrorKind::OrphanNode, "node '" + id + "' has no parent");
            auto p = t.index_.find(s.parent);
            if (p == t.index_.end())
                throw Error(ErrorKind::OrphanNode, "node '" + id + "' refers to unknown parent '" + s.parent + "'");
            if (p->second.spec.level != s.level + 1)
                throw Error(ErrorKind::OrphanNode, "parent '" + s.parent + "' of '" + id + "' is not one level up");
        }
        if (s.level == 1 && s.count <= 0)
            throw Error(ErrorKind::NonPositiveCount, "leaf '" + id + "' has count " + std::to_string(s.count));
    }
    // children in level order so parent means are summed deterministically
    for (const auto& lvl : t.levels_)
        for (const auto& id : lvl) {
            const auto& parent = t.index_.at(id).spec.parent;
            if (!parent.empty()) t.index_.at(parent).children.push_back(id);
        }
    for (std::size_t i = 1; i < t.levels_.size(); ++i)
        for (const auto& id : t.levels_[i])
            if (t.index_.at(id).children.empty())
                throw Error(ErrorKind::OrphanNode, "internal node '" + id + "' has no children");
    return t;
}

const ClassTaxonomy::Entry& ClassTaxonomy::entry(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw Error(ErrorKind::UnknownParent, "unknown node '" + id + "'");
    return it->second;
}

int ClassTaxonomy::level_of(const std::string& id) const { return entry(id).spec.level; }
std::size_t ClassTaxonomy::column_of(const std::string& id) const { return entry(id).column; }
const std::string& ClassTaxonomy::parent_of(const std::string& id) const { return entry(id).spec.parent; }
const std::string& ClassTaxonomy::name_of(const std::string& id) const { return entry(id).spec.name; }
std::int64_t ClassTaxonomy::leaf_count(const std::string& id) const { return entry(id).spec.count; }
const std::vector<std::string>& ClassTaxonomy::children_of(const std::string& id) const {
    return entry(id).children;
}

const std::string& ClassTaxonomy::ancestor(const std::string& id, int level) const {
    const std::string* cur = &entry(id).spec.id;
    while (level_of(*cur) < level) {
        const std::string& p = parent_of(*cur);
        if (p.empty())
            throw Error(ErrorKind::MissingAncestor, "'" + id + "' has no ancestor at level " + std::to_string(level));
        cur = &p;
    }
    if (level_of(*cur) != level)
        throw Error(ErrorKind::MissingAncestor, "'" + id + "' has no ancestor at level " + std::to_string(level));
    return *cur;
}

std::int64_t ClassTaxonomy::aggregated_count(const std::string& id) const {
    const Entry& e = entry(id);
    if (e.spec.level == 1) return e.spec.count;
    std::int64_t total = 0;
    for (const auto& c : e.children) total += aggregated_count(c);
    return total;
}

std::vector<NodeSpec> ClassTaxonomy::nodes() const {
    std::vector<NodeSpec> out;
    for (const auto& lvl : levels_)
        for (const auto& id : lvl) out.push_back(index_.at(id).spec);
    return out;
}

ClassTaxonomy ClassTaxonomy::with_leaf_counts(const std::map<std::string, std::int64_t>& counts) const {
    auto specs = nodes();
    for (auto& s : specs)
        if (auto it = counts.find(s.id); it != counts.end() && s.level == 1) s.count = it->second;
    return from_nodes(std::move(specs));
}

ClassTaxonomy load_taxonomy(const std::string& document) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(document);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Parse, std::string("taxonomy: ") + e.what());
    }
    std::vector<NodeSpec> nodes;
    try {
        for (const auto& n : j.at("nodes")) {
            NodeSpec s;
            s.id = n.at("id").get<std::string>();
            s.name = n.value("name", s.id);
            s.level = n.at("level").get<int>();
            if (n.contains("parent") && !n.at("parent").is_null()) s.parent = n.at("parent").get<std::string>();
            s.count = n.value("count", std::int64_t{0});
            nodes.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Parse, std::string("taxonomy: ") + e.what());
    }
    return ClassTaxonomy::from_nodes(std::move(nodes));
}

ClassTaxonomy load_taxonomy_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open taxonomy file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return load_taxonomy(ss.str());
}

nlohmann::json to_json(const ClassTaxonomy& taxonomy) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& s : taxonomy.nodes()) {
        nlohmann::json n{{"id", s.id}, {"name", s.name}, {"level", s.level}};
        n["parent"] = s.parent.empty() ? nlohmann::json(nullptr) : nlohmann::json(s.parent);
        if (s.level == 1) n["count"] = s.count;
        nodes.push_back(std::move(n));
    }
    return {{"nodes", std::move(nodes)}};
}

ClassTaxonomy random_taxonomy(std::size_t leaves, std::size_t depth, std::uint64_t seed) {
    if (depth < 2) throw Error(ErrorKind::InvalidRange, "random taxonomy needs depth >= 2");
    if (leaves < 1) throw Error(ErrorKind::InvalidRange, "random taxonomy needs at least one leaf");
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> sizes(depth);
    sizes[0] = leaves;
    sizes[depth - 1] = 1;
    for (std::size_t i = 1; i + 1 < depth; ++i) {
        std::uniform_int_distribution<std::size_t> pick(1, sizes[i - 1]);
        sizes[i] = pick(rng);
    }
    std::uniform_int_distribution<std::int64_t> count(1, 1000);
    std::vector<std::vector<NodeSpec>> levels(depth);
    for (std::size_t i = 0; i < depth; ++i)
        for (std::size_t k = 0; k < sizes[i]; ++k) {
            NodeSpec s;
            s.id = "n" + std::to_string(i + 1) + "_" + std::to_string(k);
            s.level = static_cast<int>(i + 1);
            if (i == 0) s.count = count(rng);
            levels[i].push_back(std::move(s));
        }
    for (std::size_t i = 0; i + 1 < depth; ++i) {
        const std::size_t parents = sizes[i + 1];
        std::vector<std::size_t> order(sizes[i]);
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
        std::shuffle(order.begin(), order.end(), rng);
        std::uniform_int_distribution<std::size_t> any(0, parents - 1);
        for (std::size_t r = 0; r < order.size(); ++r) {
            const std::size_t p = r < parents ? r : any(rng);
            levels[i][order[r]].parent = levels[i + 1][p].id;
        }
    }
    std::vector<NodeSpec> flat;
    for (auto& lvl : levels)
        for (auto& s : lvl) flat.push_back(std::move(s));
    return ClassTaxonomy::from_nodes(std::move(flat));
}

namespace {

void fill_ancestor_columns(HNCTree& tree) {
    const auto& tax = tree.taxonomy;
    tree.ancestor_columns.assign(tax.num_leaves(), {});
    for (std::size_t c = 0; c < tax.num_leaves(); ++c) {
        const std::string& leaf = tax.level(1)[c];
        auto& row = tree.ancestor_columns[c];
        row.resize(tax.depth());
        for (std::size_t lvl = 1; lvl <= tax.depth(); ++lvl)
            row[lvl - 1] = tax.column_of(tax.ancestor(leaf, static_cast<int>(lvl)));
    }
}

Eigen::VectorXd parent_direction(const HNCTree& tree, std::size_t level, const std::string& id) {
    const auto& tax = tree.taxonomy;
    const auto& below = tree.layers[level - 2];
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(tree.dim));
    const auto& kids = tax.children_of(id);
    for (const auto& c : kids) sum += below.vectors.col(static_cast<Eigen::Index>(tax.column_of(c)));
    const Eigen::VectorXd mean = sum / static_cast<double>(kids.size());
    return mean / mean.norm();
}

}  // namespace

void rebuild_parent_levels(HNCTree& tree) {
    const auto& tax = tree.taxonomy;
    tree.layers.resize(tax.depth());
    for (std::size_t level = 2; level <= tax.depth(); ++level) {
        const auto& ids = tax.level(level);
        std::vector<std::int64_t> counts;
        double sq = 0.0;
        for (const auto& id : ids) {
            counts.push_back(tax.aggregated_count(id));
            sq += static_cast<double>(counts.back()) * static_cast<double>(counts.back());
        }
        const double z = std::sqrt(sq);
        PrototypeFrame f;
        f.kind = FrameKind::Gof;
        f.vectors.resize(static_cast<Eigen::Index>(tree.dim), static_cast<Eigen::Index>(ids.size()));
        for (std::size_t c = 0; c < ids.size(); ++c)
            f.vectors.col(static_cast<Eigen::Index>(c)) =
                parent_direction(tree, level, ids[c]) * (static_cast<double>(counts[c]) / z);
        f.counts = std::move(counts);
        f.norm_constant = z;
        f.seed = tree.seed;
        tree.layers[level - 1] = std::move(f);
    }
    fill_ancestor_columns(tree);
}

HNCTree build_hnc(const ClassTaxonomy& taxonomy, std::size_t d, std::uint64_t seed) {
    if (taxonomy.depth() == 0) throw Error(ErrorKind::EmptyLevel, "taxonomy has no levels");
    std::vector<std::int64_t> counts;
    for (const auto& id : taxonomy.level(1)) counts.push_back(taxonomy.leaf_count(id));
    HNCTree tree;
    tree.taxonomy = taxonomy;
    tree.dim = d;
    tree.seed = seed;
    tree.layers.push_back(build_gof(counts, d, seed));
    rebuild_parent_levels(tree);
    return tree;
}

HNCTree add_classes(const HNCTree& tree, std::span<const NodeSpec> new_nodes, std::uint64_t seed) {
    if (new_nodes.empty()) return tree;
    std::set<std::string> known;
    for (const auto& s : tree.taxonomy.nodes()) known.insert(s.id);
    for (const auto& s : new_nodes) known.insert(s.id);
    std::vector<std::int64_t> new_counts;
    for (const auto& s : new_nodes) {
        if (s.level < 1 || static_cast<std::size_t>(s.level) > tree.taxonomy.depth())
            throw Error(ErrorKind::InvalidRange, "new node '" + s.id + "' has level outside the tree");
        if (!s.parent.empty() && !known.count(s.parent))
            throw Error(ErrorKind::UnknownParent, "new node '" + s.id + "' refers to unknown parent '" + s.parent + "'");
        if (s.level == 1) new_counts.push_back(s.count);
    }
    const std::size_t total = tree.taxonomy.num_leaves() + new_counts.size();
    if (tree.dim < total)
        throw Error(ErrorKind::Capacity, "dimension " + std::to_string(tree.dim) + " cannot hold " +
                                             std::to_string(total) + " leaf prototypes");
    auto specs = tree.taxonomy.nodes();
    specs.insert(specs.end(), new_nodes.begin(), new_nodes.end());
    HNCTree out;
    out.taxonomy = ClassTaxonomy::from_nodes(std::move(specs));
    out.dim = tree.dim;
    out.seed = tree.seed;
    out.layers.push_back(extend_gof(tree.layers.at(0), new_counts, seed));
    rebuild_parent_levels(out);
    return out;
}

ValidationReport verify_hierarchy(const HNCTree& tree, double tol) {
    ValidationReport rep = verify_frame(tree.layers.at(0), tol);
    const auto& tax = tree.taxonomy;
    for (std::size_t level = 2; level <= tree.depth(); ++level) {
        const auto& f = tree.level_frame(level);
        const auto& ids = tax.level(level);
        double sq = 0.0;
        for (const auto& id : ids) {
            const double c = static_cast<double>(tax.aggregated_count(id));
            sq += c * c;
        }
        const double z = std::sqrt(sq);
        for (std::size_t a = 0; a < f.size(); ++a) {
            const double na = std::sqrt(kernels::dot(f.column(a), f.column(a)));
            for (std::size_t b = a + 1; b < f.size(); ++b) {
                const double nb = std::sqrt(kernels::dot(f.column(b), f.column(b)));
                rep.record({"level" + std::to_string(level) + ":orthogonality", a, b,
                            std::abs(kernels::dot(f.column(a), f.column(b))) / (na * nb)},
                           tol);
            }
            const double scale = static_cast<double>(tax.aggregated_count(ids[a])) / z;
            const Eigen::VectorXd expected = parent_direction(tree, level, ids[a]) * scale;
            rep.record({"level" + std::to_string(level) + ":reconstruction", a, a,
                        (expected - f.vectors.col(static_cast<Eigen::Index>(a))).norm()},
                       tol);
        }
    }
    return rep;
}

std::vector<std::size_t> map_layers(std::size_t tree_levels, std::size_t decoder_layers) {
    std::vector<std::size_t> out;
    if (decoder_layers == 0) return out;
    const std::size_t usable = tree_levels > 1 ? tree_levels - 1 : 1;
    if (usable >= decoder_layers) {
        for (std::size_t j = 0; j < decoder_layers; ++j) out.push_back(decoder_layers - j);
        return out;
    }
    const std::size_t base = decoder_layers / usable;
    const std::size_t extra = decoder_layers % usable;
    for (std::size_t g = 0; g < usable; ++g) {
        const std::size_t level = usable - g;
        const std::size_t size = base + (g >= usable - extra ? 1 : 0);
        out.insert(out.end(), size, level);
    }
    return out;
}

nlohmann::json to_json(const HNCTree& tree) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& f : tree.layers) layers.push_back(to_json(f));
    return {{"dim", tree.dim}, {"seed", tree.seed}, {"taxonomy", to_json(tree.taxonomy)}, {"layers", layers}};
}

HNCTree tree_from_json(const nlohmann::json& j) {
    HNCTree tree;
    try {
        tree.dim = j.at("dim").get<std::size_t>();
        tree.seed = j.at("seed").get<std::uint64_t>();
        tree.taxonomy = load_taxonomy(j.at("taxonomy").dump());
        for (const auto& f : j.at("layers")) tree.layers.push_back(frame_from_json(f));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Parse, std::string("tree: ") + e.what());
    }
    if (tree.layers.size() != tree.taxonomy.depth())
        throw Error(ErrorKind::Parse, "tree has " + std::to_string(tree.layers.size()) + " layers for a depth-" +
                                          std::to_string(tree.taxonomy.depth()) + " taxonomy");
    fill_ancestor_columns(tree);
    return tree;
}

}  // namespace hnc
