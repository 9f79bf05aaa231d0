#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "treekv/params.hpp"
#include "treekv/tensor.hpp"
#include "treekv/tree.hpp"

namespace treekv {

/// Per-layer key/value states for one token span, before or after
/// downsampling. keys[m] and values[m] are [positions, heads, head_dim];
/// layer_tags pins which decoder injection slot each layer feeds.
struct LayeredKV {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  std::vector<int> layer_tags;
  TreeNode source_node;
  bool compressed = false;

  int layers() const { return static_cast<int>(keys.size()); }
  std::int64_t positions() const { return keys.empty() ? 0 : keys[0].dim(0); }
  // {M, positions, heads, head_dim}
  Shape shape4() const;
};

/// Causal encoding of one preserved node's tokens through all M compressor
/// layers, from position 0. Records the post-rotary keys and the value
/// projections of every layer.
LayeredKV encode_preserved(std::span<const TokenId> tokens, const ModelParams& params,
                           const CompressorConfig& cfg);

/// Uniform position downsampling applied identically to keys and values on
/// every layer.
LayeredKV compress_kv(const LayeredKV& kv, const Fraction& keep_fraction);

struct EncodedChunk {
  ContextTreeResult tree;
  std::vector<LayeredKV> nodes;  // compressed, ordered by token offset
  std::int64_t total_kept() const;
};

/// Full per-chunk pipeline: build-and-search, then encode + compress each
/// preserved node. Deterministic given the seed.
EncodedChunk encode_chunk(const TokenChunk& chunk, const TreeBuildConfig& tree_cfg,
                          const CompressionSchedule& schedule, const SplitPolicy& policy,
                          const ModelParams& params, const CompressorConfig& cfg,
                          std::uint64_t seed);

/// One-layer forward pass: the hidden state at the last position after the
/// first compressor layer. Feeds the query-aware policy's similarity scores.
std::vector<double> short_forward_repr(std::span<const TokenId> tokens, const ModelParams& params,
                                       const CompressorConfig& cfg);

/// Same, through the decoder's first layer (cross-attention skipped); used
/// for the query side of the policy.
std::vector<double> decoder_short_forward_repr(std::span<const TokenId> tokens,
                                               const ModelParams& params, int num_heads,
                                               int head_dim, double rope_base);

}  // namespace treekv
