#include "partmix/cluster.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include "json.hpp"

#include "partmix/error.hpp"

namespace partmix {

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

// Splits `members` in two. Returns false when no split with two nonempty
// sides exists (e.g. all points coincide).
bool two_means(std::span<const std::vector<double>> x, const std::vector<int>& members,
               std::mt19937_64& rng, std::vector<int>& left, std::vector<int>& right) {
  const std::size_t n = members.size();
  std::vector<std::vector<double>> center(2);
  center[0] = x[members[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)]];

  std::vector<double> d2(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += d2[i] = sq_dist(x[members[i]], center[0]);
  if (total <= 0.0) return false;
  double r = std::uniform_real_distribution<double>(0.0, total)(rng);
  std::size_t pick = n - 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (d2[i] > 0.0 && r < d2[i]) {
      pick = i;
      break;
    }
    r -= d2[i];
  }
  while (d2[pick] == 0.0) --pick;  // r landed past the end through rounding
  center[1] = x[members[pick]];

  std::vector<int> assign(n, -1);
  const std::size_t dim = center[0].size();
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const int a = sq_dist(x[members[i]], center[1]) < sq_dist(x[members[i]], center[0]) ? 1 : 0;
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
    }
    if (!changed) break;
    for (int c = 0; c < 2; ++c) {
      std::vector<double> sum(dim, 0.0);
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (assign[i] == c) {
          for (std::size_t k = 0; k < dim; ++k) sum[k] += x[members[i]][k];
          ++count;
        }
      if (count == 0) continue;  // keep the old center
      for (auto& v : sum) v /= static_cast<double>(count);
      center[c] = std::move(sum);
    }
  }
  left.clear();
  right.clear();
  for (std::size_t i = 0; i < n; ++i) (assign[i] == 0 ? left : right).push_back(members[i]);
  return !left.empty() && !right.empty();
}

void collect_dfs(const ClusterTree& t, int id, const std::function<bool(int)>& take,
                 std::vector<int>& out) {
  if (take(id)) {
    out.push_back(id);
    return;
  }
  for (int c : t.nodes[id].children) collect_dfs(t, c, take, out);
}

}  // namespace

std::vector<int> ClusterTree::leaves() const {
  std::vector<int> out;
  if (nodes.empty()) return out;
  collect_dfs(*this, 0, [&](int id) { return nodes[id].children.empty(); }, out);
  return out;
}

std::vector<int> ClusterTree::level(int d) const {
  std::vector<int> out;
  if (nodes.empty()) return out;
  collect_dfs(
      *this, 0, [&](int id) { return nodes[id].depth == d || nodes[id].children.empty(); }, out);
  return out;
}

ClusterTree hierarchical_kmeans(std::span<const std::vector<double>> descriptors, int depth,
                                std::uint64_t seed) {
  if (depth < 0) throw DomainError("hierarchical_kmeans: negative depth");
  if (depth >= 31 || descriptors.size() < (std::size_t{1} << depth))
    throw SizeError("hierarchical_kmeans: need at least 2^depth = " +
                    std::to_string(std::size_t{1} << std::min(depth, 62)) + " descriptors, got " +
                    std::to_string(descriptors.size()));
  for (const auto& d : descriptors)
    if (d.size() != descriptors.front().size())
      throw ValidationError("hierarchical_kmeans: inconsistent descriptor lengths");

  ClusterTree tree;
  tree.depth = depth;
  ClusterNode root;
  root.members.resize(descriptors.size());
  std::iota(root.members.begin(), root.members.end(), 0);
  tree.nodes.push_back(std::move(root));

  std::mt19937_64 rng(seed);
  // Breadth-first so the draw order depends only on the tree shape.
  for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
    if (tree.nodes[id].depth >= depth || tree.nodes[id].members.size() < 2) continue;
    std::vector<int> left, right;
    if (!two_means(descriptors, tree.nodes[id].members, rng, left, right)) continue;
    for (auto* side : {&left, &right}) {
      ClusterNode child;
      child.members = std::move(*side);
      child.parent = static_cast<int>(id);
      child.depth = tree.nodes[id].depth + 1;
      tree.nodes[id].children.push_back(static_cast<int>(tree.nodes.size()));
      tree.nodes.push_back(std::move(child));
    }
  }
  return tree;
}

std::vector<std::vector<int>> leaf_members(const ClusterTree& tree) {
  std::vector<std::vector<int>> out;
  for (int id : tree.leaves()) out.push_back(tree.nodes[id].members);
  return out;
}

PartitionFamily partitioned_sample(const std::vector<std::vector<int>>& leaf_clusters,
                                   std::span<const std::size_t> sizes, std::uint64_t seed) {
  if (sizes.empty()) throw ValidationError("partitioned_sample: no sizes given");
  std::size_t total = 0;
  for (const auto& c : leaf_clusters) total += c.size();
  if (sizes[0] != total)
    throw ValidationError("partitioned_sample: sizes[0] = " + std::to_string(sizes[0]) +
                          " but the leaves hold " + std::to_string(total) + " examples");
  for (std::size_t n = 1; n < sizes.size(); ++n)
    if (sizes[n] >= sizes[n - 1])
      throw ValidationError("partitioned_sample: sizes must strictly decrease, got " +
                            std::to_string(sizes[n - 1]) + " then " + std::to_string(sizes[n]));

  PartitionFamily fam;
  fam.seed = seed;
  fam.sizes.assign(sizes.begin(), sizes.end());
  fam.levels.push_back({0, total, leaf_clusters});

  std::mt19937_64 rng(seed);
  for (std::size_t n = 1; n < sizes.size(); ++n) {
    const auto& prev = fam.levels.back().clusters;
    const std::size_t k = prev.size();
    // Positions into prev[i] not drawn yet.
    std::vector<std::vector<std::size_t>> remaining(k);
    std::vector<std::vector<char>> taken(k);
    std::size_t left = 0;
    for (std::size_t i = 0; i < k; ++i) {
      remaining[i].resize(prev[i].size());
      std::iota(remaining[i].begin(), remaining[i].end(), 0);
      taken[i].assign(prev[i].size(), 0);
      left += prev[i].size();
    }
    for (std::size_t t = 0; t < sizes[n]; ++t) {
      std::size_t r = std::uniform_int_distribution<std::size_t>(0, left - 1)(rng);
      std::size_t z = 0;
      while (r >= remaining[z].size()) r -= remaining[z++].size();
      auto& pool = remaining[z];
      const std::size_t j = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng);
      taken[z][pool[j]] = 1;
      pool[j] = pool.back();
      pool.pop_back();
      --left;
    }
    SampledPartition part{static_cast<int>(n), sizes[n], std::vector<std::vector<int>>(k)};
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < prev[i].size(); ++j)
        if (taken[i][j]) part.clusters[i].push_back(prev[i][j]);
    fam.levels.push_back(std::move(part));
  }
  return fam;
}

ConsistentSets refine_consistency(const ClusterTree& tree, const PartitionFamily& family) {
  const auto leaves = tree.leaves();
  if (family.levels.empty() || family.levels[0].clusters.size() != leaves.size())
    throw ValidationError("refine_consistency: partitions were not drawn from this tree's leaves");
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    auto a = family.levels[0].clusters[i];
    std::sort(a.begin(), a.end());
    if (a != tree.nodes[leaves[i]].members)
      throw ValidationError("refine_consistency: leaf " + std::to_string(i) +
                            " does not match the partition family");
  }

  ConsistentSets out;
  out.sizes = family.sizes;
  const int max_depth = std::max(tree.depth, [&] {
    int d = 0;
    for (const auto& n : tree.nodes) d = std::max(d, n.depth);
    return d;
  }());
  for (int d = 0; d <= max_depth; ++d) {
    // Cluster index at depth d of every leaf.
    const auto groups = tree.level(d);
    std::vector<int> owner(tree.nodes.size(), -1);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      std::vector<int> stack{groups[g]};
      while (!stack.empty()) {
        const int id = stack.back();
        stack.pop_back();
        owner[id] = static_cast<int>(g);
        for (int c : tree.nodes[id].children) stack.push_back(c);
      }
    }
    std::vector<std::vector<std::vector<int>>> per_level;
    for (const auto& lvl : family.levels) {
      std::vector<std::vector<int>> clusters(groups.size());
      for (std::size_t i = 0; i < leaves.size(); ++i) {
        auto& dst = clusters[owner[leaves[i]]];
        dst.insert(dst.end(), lvl.clusters[i].begin(), lvl.clusters[i].end());
      }
      for (auto& c : clusters) std::sort(c.begin(), c.end());
      per_level.push_back(std::move(clusters));
    }
    out.depths.push_back(d);
    out.sets.push_back(std::move(per_level));
  }
  return out;
}

ClusterTree merge_clusters(const ClusterTree& tree, const std::vector<std::vector<int>>& merge_map) {
  const auto leaves = tree.leaves();
  const int L = static_cast<int>(leaves.size());
  std::vector<int> group_of(L, -1);
  for (std::size_t g = 0; g < merge_map.size(); ++g) {
    if (merge_map[g].empty()) throw ValidationError("merge_clusters: empty group " + std::to_string(g));
    for (int i : merge_map[g]) {
      if (i < 0 || i >= L)
        throw ValidationError("merge_clusters: leaf index " + std::to_string(i) + " out of range");
      if (group_of[i] != -1)
        throw ValidationError("merge_clusters: leaf " + std::to_string(i) + " in two groups");
      group_of[i] = static_cast<int>(g);
    }
  }
  for (int i = 0; i < L; ++i)
    if (group_of[i] == -1)
      throw ValidationError("merge_clusters: leaf " + std::to_string(i) + " in no group");

  // Leaf-index set under every original node.
  std::vector<int> leaf_index(tree.nodes.size(), -1);
  for (int i = 0; i < L; ++i) leaf_index[leaves[i]] = i;
  std::vector<std::vector<int>> under(tree.nodes.size());
  for (int id = static_cast<int>(tree.nodes.size()) - 1; id >= 0; --id) {
    if (leaf_index[id] >= 0) under[id] = {leaf_index[id]};
    for (int c : tree.nodes[id].children)
      under[id].insert(under[id].end(), under[c].begin(), under[c].end());
    std::sort(under[id].begin(), under[id].end());
  }

  // Surviving sets: whole-group unions among original nodes, plus the groups.
  std::map<std::vector<int>, bool> sets;
  for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
    std::vector<int> count(merge_map.size(), 0);
    for (int i : under[id]) ++count[group_of[i]];
    bool whole = true;
    for (std::size_t g = 0; g < merge_map.size(); ++g)
      if (count[g] != 0 && count[g] != static_cast<int>(merge_map[g].size())) whole = false;
    if (whole) sets.emplace(under[id], false);
  }
  for (const auto& g : merge_map) {
    auto s = g;
    std::sort(s.begin(), s.end());
    sets[s] = true;  // a leaf of the merged tree
  }

  std::vector<std::vector<int>> entries;
  std::vector<bool> is_leaf;
  for (const auto& [s, leaf] : sets) {
    entries.push_back(s);
    is_leaf.push_back(leaf);
  }
  const std::size_t E = entries.size();
  auto contains = [](const std::vector<int>& big, const std::vector<int>& small) {
    return big.size() > small.size() && std::includes(big.begin(), big.end(), small.begin(), small.end());
  };
  std::vector<int> parent(E, -1);
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t f = 0; f < E; ++f)
      if (contains(entries[f], entries[e]) &&
          (parent[e] < 0 || entries[f].size() < entries[parent[e]].size()))
        parent[e] = static_cast<int>(f);

  std::vector<std::vector<int>> kids(E);
  int root = -1;
  for (std::size_t e = 0; e < E; ++e) {
    if (parent[e] < 0) root = static_cast<int>(e);
    else if (!is_leaf[parent[e]]) kids[parent[e]].push_back(static_cast<int>(e));
  }
  for (auto& k : kids)
    std::sort(k.begin(), k.end(), [&](int a, int b) { return entries[a].front() < entries[b].front(); });

  ClusterTree out;
  std::vector<std::pair<int, int>> queue{{root, -1}};
  for (std::size_t q = 0; q < queue.size(); ++q) {
    const auto [e, par] = queue[q];
    ClusterNode node;
    for (int i : entries[e]) {
      const auto& m = tree.nodes[leaves[i]].members;
      node.members.insert(node.members.end(), m.begin(), m.end());
    }
    std::sort(node.members.begin(), node.members.end());
    node.parent = par;
    node.depth = par < 0 ? 0 : out.nodes[par].depth + 1;
    const int id = static_cast<int>(out.nodes.size());
    if (par >= 0) out.nodes[par].children.push_back(id);
    out.depth = std::max(out.depth, node.depth);
    out.nodes.push_back(std::move(node));
    if (!is_leaf[e])
      for (int k : kids[e]) queue.emplace_back(k, id);
  }
  return out;
}

std::string partitions_to_json(const PartitionFamily& family) {
  nlohmann::json j;
  j["seed"] = family.seed;
  j["sizes"] = family.sizes;
  j["levels"] = nlohmann::json::array();
  for (const auto& lvl : family.levels) j["levels"].push_back({{"N", lvl.N}, {"clusters", lvl.clusters}});
  return j.dump(1);
}

PartitionFamily partitions_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    PartitionFamily fam;
    fam.seed = j.at("seed").get<std::uint64_t>();
    fam.sizes = j.at("sizes").get<std::vector<std::size_t>>();
    int n = 0;
    for (const auto& lvl : j.at("levels"))
      fam.levels.push_back({n++, lvl.at("N").get<std::size_t>(),
                            lvl.at("clusters").get<std::vector<std::vector<int>>>()});
    return fam;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("partitions json: ") + e.what());
  }
}

}  // namespace partmix
