#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "treekv/fraction.hpp"
#include "treekv/tensor.hpp"

namespace treekv {

/// A contiguous token subsequence with its absolute offset in the raw input.
struct TokenChunk {
  std::vector<TokenId> tokens;
  std::int64_t offset = 0;

  std::int64_t length() const { return static_cast<std::int64_t>(tokens.size()); }
  std::span<const TokenId> span() const { return tokens; }
};

/// A node of the binary context tree: a token interval at some depth.
/// level 0 is the root (the whole chunk); levels increase downward.
struct TreeNode {
  std::int64_t start = 0;   // absolute token offset
  std::int64_t length = 0;  // token count
  int level = 0;

  std::int64_t end() const { return start + length; }
};

struct PreservedNode {
  TreeNode node;
  Fraction keep_fraction{1, 1};
  std::int64_t kept_length = 0;
};

/// Per-level keep fractions, indexed by level 1..height. Built by
/// make_schedule (each level above the leaves halves the keep fraction) or
/// flat_schedule (every level identical, the fallback for small global
/// ratios where the halving rule cannot fit).
struct CompressionSchedule {
  std::vector<Fraction> keep_fractions;

  int height() const { return static_cast<int>(keep_fractions.size()); }
  const Fraction& at_level(int level) const;  // level in [1, height]
};

CompressionSchedule make_schedule(int height, Fraction leaf_keep);
CompressionSchedule flat_schedule(int height, Fraction keep);

enum class Side { left, right };
inline const char* side_name(Side s) { return s == Side::left ? "left" : "right"; }

struct ContextTreeResult {
  TokenChunk chunk;
  std::vector<PreservedNode> preserved;  // ordered by token offset
  int height = 0;
  std::vector<Side> selected_path;  // one decision per non-final level

  std::int64_t total_kept() const;
};

// Decides which child the depth-first search continues into, given the two
// children's token content. The query, when any, is captured by the closure.
using SplitPolicy = std::function<Side(std::span<const TokenId> left, std::span<const TokenId> right)>;

/// The language-modeling policy: always expand the right child.
Side policy_deterministic();
SplitPolicy deterministic_policy();

/// The instruction-task policy: argmax of cosine similarity between each
/// child's representation and the query representation; ties go right.
Side policy_query_aware(std::span<const double> h_left, std::span<const double> h_right,
                        std::span<const double> h_query);

// Which length the splitting noise stddev is derived from: sigma = base / gamma.
enum class SigmaBase { node_length, half_length };

struct TreeBuildConfig {
  int height = 3;
  double gamma = 5.0;
  SigmaBase sigma_base = SigmaBase::node_length;
  bool noise = true;  // when false, epsilon is fixed to zero
};

/// Splits a node at b = floor(length/2 - epsilon), clamped so both children
/// are non-empty. Children sit one level below the parent.
std::pair<TreeNode, TreeNode> split_node(const TreeNode& node, double epsilon);

/// Depth-first construction and search over one chunk: at each non-final
/// level the policy selects the child to expand and the sibling is preserved
/// with that level's keep fraction; at the final level both children are
/// preserved. Deterministic given the seed.
ContextTreeResult build_and_search(const TokenChunk& chunk, const TreeBuildConfig& cfg,
                                   const CompressionSchedule& schedule, const SplitPolicy& policy,
                                   std::uint64_t seed);

/// Chunk length over total kept positions, exact.
Fraction effective_beta(const ContextTreeResult& result);

/// Uniform downsampling positions: the last index of each of
/// max(1, floor(length * keep_fraction)) equal blocks; strictly increasing.
std::vector<std::int64_t> downsample_indices(std::int64_t length, const Fraction& keep_fraction);

/// JSON dump used by the inspect-tree command (includes effective beta).
std::string tree_to_json(const ContextTreeResult& result);

}  // namespace treekv
