#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "treekv/compressor.hpp"
#include "treekv/params.hpp"
#include "treekv/tensor.hpp"

namespace treekv {

/// Ordered, concatenated compressed KV states for all chunks, plus their
/// chunk-level position indices. keys[m]/values[m]: [total_kept, H, dh].
struct InjectionBundle {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  std::vector<int> layer_tags;
  std::vector<std::int64_t> chunk_ids;  // P_K: non-decreasing, in [0, num_chunks)
  std::int64_t num_chunks = 0;

  bool empty() const { return num_chunks == 0; }
  std::int64_t total_kept() const { return keys.empty() ? 0 : keys[0].dim(0); }
  int layers() const { return static_cast<int>(keys.size()); }
};

struct ChunkPositions {
  std::vector<std::int64_t> p_q;
  std::vector<std::int64_t> p_k;
};

/// Chunk-level positional indices: keys get their chunk's index 0..n-1, the
/// running text is treated as one final chunk with the largest index n.
ChunkPositions assign_chunk_positions(std::span<const std::int64_t> kept_lengths_per_chunk,
                                      std::int64_t running_len);

/// Concatenates per-chunk compressed KV states (chunk order preserved) into
/// the bundle the decoder's injection layers consume.
InjectionBundle build_bundle(std::span<const EncodedChunk> chunks);

/// Cross-attention + MLP half of an injection layer, applied to the hidden
/// state that already went through the layer's self-attention sub-layer.
Tensor injection_layer_forward(const Tensor& hidden_after_self, const InjectionBundle& bundle,
                               int slot, std::span<const std::int64_t> p_q,
                               const ModelParams& params, int layer_1indexed,
                               const DecoderConfig& cfg);

/// Full upper-model forward: embeddings, N layers (injection layers consume
/// the bundle when present), final norm, vocabulary projection.
/// Returns logits [len(tokens), vocab].
Tensor decoder_forward(std::span<const TokenId> tokens, const InjectionBundle* bundle,
                       const ModelParams& params, const DecoderConfig& cfg);

/// Greedy decoding with the bundle fixed throughout; ties break to the
/// lowest token id. Returns only the newly generated tokens.
std::vector<TokenId> generate(std::span<const TokenId> prompt_tokens,
                              const InjectionBundle* bundle, const ModelParams& params,
                              const DecoderConfig& cfg, int max_new);

}  // namespace treekv
