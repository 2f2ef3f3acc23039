#pragma once

// Hierarchical 2-means over example descriptors and the nested subsampling
// that keeps cluster partitions consistent across training-set sizes.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace partmix {

struct ClusterNode {
  std::vector<int> members;  // example ids, ascending
  int parent = -1;
  std::vector<int> children;
  int depth = 0;
};

// nodes[0] is the root. Leaves normally sit at `depth`; a branch that could
// not be split further ends early in a short leaf.
struct ClusterTree {
  std::vector<ClusterNode> nodes;
  int depth = 0;

  // Leaves, left to right.
  std::vector<int> leaves() const;
  // Clusters seen at depth d: nodes of that depth plus shallower leaves,
  // left to right. level(0) is {root}.
  std::vector<int> level(int d) const;
  std::size_t num_examples() const { return nodes.empty() ? 0 : nodes[0].members.size(); }
};

// Recursive 2-means (k-means++ seeding, at most 100 Lloyd iterations, ties to
// the lower center). Throws SizeError when there are fewer than 2^depth
// descriptors.
ClusterTree hierarchical_kmeans(std::span<const std::vector<double>> descriptors, int depth,
                                std::uint64_t seed);

struct SampledPartition {
  int level_n = 0;
  std::size_t N = 0;
  std::vector<std::vector<int>> clusters;  // one per leaf, same order as the input

  int K() const { return static_cast<int>(clusters.size()); }
};

struct PartitionFamily {
  std::uint64_t seed = 0;
  std::vector<std::size_t> sizes;
  std::vector<SampledPartition> levels;  // levels[n] has N = sizes[n]
};

// Draws each level from the previous one: pick cluster z with probability
// proportional to its remaining members, then a member of z uniformly
// without replacement. sizes[0] must equal the total leaf membership and the
// sizes must strictly decrease (ValidationError otherwise).
PartitionFamily partitioned_sample(const std::vector<std::vector<int>>& leaf_clusters,
                                   std::span<const std::size_t> sizes, std::uint64_t seed);

// Member sets of the tree's leaves, in leaves() order.
std::vector<std::vector<int>> leaf_members(const ClusterTree& tree);

// Training sets indexed by tree depth (K = 2^depth nominal) and level n.
struct ConsistentSets {
  std::vector<int> depths;
  std::vector<std::size_t> sizes;
  // sets[d][n] = clusters at depth d for sample level n; a cluster can be
  // empty when all of its sampled leaves are.
  std::vector<std::vector<std::vector<std::vector<int>>>> sets;

  const std::vector<std::vector<int>>& at(int depth, std::size_t level_n) const {
    return sets.at(depth).at(level_n);
  }
};

// Groups sampled leaves by their ancestor at every depth. ValidationError if
// the family's full level does not match the tree's leaves.
ConsistentSets refine_consistency(const ClusterTree& tree, const PartitionFamily& family);

// Replaces the leaves by groups of leaves (indices into tree.leaves()).
// Internal nodes that are unions of whole groups survive; every other node
// is dropped. ValidationError unless the groups partition the leaf indices.
ClusterTree merge_clusters(const ClusterTree& tree, const std::vector<std::vector<int>>& merge_map);

std::string partitions_to_json(const PartitionFamily& family);
PartitionFamily partitions_from_json(const std::string& text);

}  // namespace partmix
