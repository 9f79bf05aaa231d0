#include "treekv/compressor.hpp"

#include <numeric>
#include <stdexcept>

namespace treekv {

Shape LayeredKV::shape4() const {
  if (keys.empty()) return {0, 0, 0, 0};
  return {static_cast<std::int64_t>(keys.size()), keys[0].dim(0), keys[0].dim(1), keys[0].dim(2)};
}

LayeredKV encode_preserved(std::span<const TokenId> tokens, const ModelParams& params,
                           const CompressorConfig& cfg) {
  if (tokens.empty()) throw std::invalid_argument("encode_preserved: empty token sequence");
  const std::int64_t L = static_cast<std::int64_t>(tokens.size());
  std::vector<std::int64_t> positions(static_cast<std::size_t>(L));
  std::iota(positions.begin(), positions.end(), 0);

  LayeredKV out;
  out.keys.reserve(static_cast<std::size_t>(cfg.num_layers));
  out.values.reserve(static_cast<std::size_t>(cfg.num_layers));
  Tensor hidden = embedding(params.get("compressor.embed"), tokens);
  for (int m = 0; m < cfg.num_layers; ++m) {
    const LayerWeights w = layer_weights(params, "compressor.layer" + std::to_string(m));
    SelfAttnOut attn =
        self_attention_sublayer(hidden, w, positions, cfg.num_heads, cfg.head_dim, cfg.rope_base);
    hidden = mlp_sublayer(attn.hidden, w);
    out.keys.push_back(attn.k_rot);
    out.values.push_back(attn.v);
    out.layer_tags.push_back(m);
  }
  return out;
}

LayeredKV compress_kv(const LayeredKV& kv, const Fraction& keep_fraction) {
  if (kv.compressed) throw std::invalid_argument("compress_kv: input already compressed");
  if (kv.keys.empty()) throw std::invalid_argument("compress_kv: empty input");
  const auto idx = downsample_indices(kv.positions(), keep_fraction);
  LayeredKV out;
  out.layer_tags = kv.layer_tags;
  out.source_node = kv.source_node;
  out.compressed = true;
  for (int m = 0; m < kv.layers(); ++m) {
    out.keys.push_back(gather_rows(kv.keys[static_cast<std::size_t>(m)], idx));
    out.values.push_back(gather_rows(kv.values[static_cast<std::size_t>(m)], idx));
  }
  return out;
}

std::int64_t EncodedChunk::total_kept() const {
  std::int64_t n = 0;
  for (const auto& kv : nodes) n += kv.positions();
  return n;
}

EncodedChunk encode_chunk(const TokenChunk& chunk, const TreeBuildConfig& tree_cfg,
                          const CompressionSchedule& schedule, const SplitPolicy& policy,
                          const ModelParams& params, const CompressorConfig& cfg,
                          std::uint64_t seed) {
  EncodedChunk out;
  out.tree = build_and_search(chunk, tree_cfg, schedule, policy, seed);
  out.nodes.reserve(out.tree.preserved.size());
  for (const PreservedNode& p : out.tree.preserved) {
    const auto rel = static_cast<std::size_t>(p.node.start - chunk.offset);
    const std::span<const TokenId> node_tokens =
        std::span<const TokenId>(chunk.tokens).subspan(rel, static_cast<std::size_t>(p.node.length));
    LayeredKV kv = encode_preserved(node_tokens, params, cfg);
    kv.source_node = p.node;
    LayeredKV compressed = compress_kv(kv, p.keep_fraction);
    if (compressed.positions() != p.kept_length)
      throw std::logic_error("encode_chunk: kept length disagrees with the tree accounting");
    out.nodes.push_back(std::move(compressed));
  }
  return out;
}

namespace {

std::vector<double> last_hidden_row(const Tensor& hidden) {
  const std::int64_t L = hidden.dim(0), d = hidden.dim(1);
  const double* data = hidden.data().data() + (L - 1) * d;
  return std::vector<double>(data, data + d);
}

}  // namespace

std::vector<double> short_forward_repr(std::span<const TokenId> tokens, const ModelParams& params,
                                       const CompressorConfig& cfg) {
  if (tokens.empty()) throw std::invalid_argument("short_forward_repr: empty token sequence");
  TapeSuspend no_grad;
  const std::int64_t L = static_cast<std::int64_t>(tokens.size());
  std::vector<std::int64_t> positions(static_cast<std::size_t>(L));
  std::iota(positions.begin(), positions.end(), 0);
  Tensor hidden = embedding(params.get("compressor.embed"), tokens);
  const LayerWeights w = layer_weights(params, "compressor.layer0");
  SelfAttnOut attn =
      self_attention_sublayer(hidden, w, positions, cfg.num_heads, cfg.head_dim, cfg.rope_base);
  return last_hidden_row(mlp_sublayer(attn.hidden, w));
}

std::vector<double> decoder_short_forward_repr(std::span<const TokenId> tokens,
                                               const ModelParams& params, int num_heads,
                                               int head_dim, double rope_base) {
  if (tokens.empty())
    throw std::invalid_argument("decoder_short_forward_repr: empty token sequence");
  TapeSuspend no_grad;
  const std::int64_t L = static_cast<std::int64_t>(tokens.size());
  std::vector<std::int64_t> positions(static_cast<std::size_t>(L));
  std::iota(positions.begin(), positions.end(), 0);
  Tensor hidden = embedding(params.get("decoder.embed"), tokens);
  const LayerWeights w = layer_weights(params, "decoder.layer0");
  SelfAttnOut attn = self_attention_sublayer(hidden, w, positions, num_heads, head_dim, rope_base);
  return last_hidden_row(mlp_sublayer(attn.hidden, w));
}

}  // namespace treekv
