#include "treekv/decoder.hpp"

#include <numeric>
#include <stdexcept>

namespace treekv {

ChunkPositions assign_chunk_positions(std::span<const std::int64_t> kept_lengths_per_chunk,
                                      std::int64_t running_len) {
  const std::int64_t n = static_cast<std::int64_t>(kept_lengths_per_chunk.size());
  ChunkPositions out;
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t kept = kept_lengths_per_chunk[static_cast<std::size_t>(i)];
    if (kept < 0) throw std::invalid_argument("assign_chunk_positions: negative kept length");
    out.p_k.insert(out.p_k.end(), static_cast<std::size_t>(kept), i);
  }
  out.p_q.assign(static_cast<std::size_t>(running_len), n);
  return out;
}

InjectionBundle build_bundle(std::span<const EncodedChunk> chunks) {
  InjectionBundle bundle;
  bundle.num_chunks = static_cast<std::int64_t>(chunks.size());
  if (chunks.empty()) return bundle;

  const int layers = chunks[0].nodes.empty() ? 0 : chunks[0].nodes[0].layers();
  if (layers == 0) throw std::invalid_argument("build_bundle: chunk with no encoded nodes");

  std::vector<std::int64_t> kept_per_chunk;
  kept_per_chunk.reserve(chunks.size());
  for (const EncodedChunk& c : chunks) kept_per_chunk.push_back(c.total_kept());
  bundle.chunk_ids = assign_chunk_positions(kept_per_chunk, 0).p_k;

  for (int m = 0; m < layers; ++m) {
    std::vector<Tensor> key_parts, value_parts;
    for (const EncodedChunk& c : chunks) {
      for (const LayeredKV& kv : c.nodes) {
        if (!kv.compressed) throw std::invalid_argument("build_bundle: uncompressed node KV");
        if (kv.layers() != layers || kv.layer_tags[static_cast<std::size_t>(m)] != m)
          throw std::invalid_argument("build_bundle: layer tags disagree across nodes");
        key_parts.push_back(kv.keys[static_cast<std::size_t>(m)]);
        value_parts.push_back(kv.values[static_cast<std::size_t>(m)]);
      }
    }
    bundle.keys.push_back(concat_rows(key_parts));
    bundle.values.push_back(concat_rows(value_parts));
    bundle.layer_tags.push_back(m);
  }
  return bundle;
}

Tensor injection_layer_forward(const Tensor& hidden_after_self, const InjectionBundle& bundle,
                               int slot, std::span<const std::int64_t> p_q,
                               const ModelParams& params, int layer_1indexed,
                               const DecoderConfig& cfg) {
  const std::string prefix = "decoder.layer" + std::to_string(layer_1indexed - 1);
  const LayerWeights w = layer_weights(params, prefix);
  Tensor h = hidden_after_self;
  if (cfg.cross_attn_enabled && !bundle.empty()) {
    if (slot < 0 || slot >= bundle.layers() ||
        bundle.layer_tags[static_cast<std::size_t>(slot)] != slot)
      throw std::invalid_argument("injection_layer_forward: bundle layer slot mismatch");
    const CrossWeights cw = cross_weights(params, prefix);
    h = cross_attention_sublayer(h, cw, bundle.keys[static_cast<std::size_t>(slot)],
                                 bundle.values[static_cast<std::size_t>(slot)], p_q,
                                 bundle.chunk_ids, cfg.use_chunk_positions, cfg.num_heads,
                                 cfg.head_dim, cfg.rope_base);
  }
  return mlp_sublayer(h, w);
}

Tensor decoder_forward(std::span<const TokenId> tokens, const InjectionBundle* bundle,
                       const ModelParams& params, const DecoderConfig& cfg) {
  if (tokens.empty()) throw std::invalid_argument("decoder_forward: empty token sequence");
  const std::int64_t L = static_cast<std::int64_t>(tokens.size());
  std::vector<std::int64_t> positions(static_cast<std::size_t>(L));
  std::iota(positions.begin(), positions.end(), 0);

  const bool has_bundle = bundle != nullptr && !bundle->empty();
  std::vector<std::int64_t> p_q;
  if (has_bundle) p_q.assign(static_cast<std::size_t>(L), bundle->num_chunks);

  Tensor hidden = embedding(params.get("decoder.embed"), tokens);
  for (int i = 1; i <= cfg.num_layers; ++i) {
    const std::string prefix = "decoder.layer" + std::to_string(i - 1);
    const LayerWeights w = layer_weights(params, prefix);
    SelfAttnOut attn =
        self_attention_sublayer(hidden, w, positions, cfg.num_heads, cfg.head_dim, cfg.rope_base);
    if (has_bundle && cfg.cross_attn_enabled && cfg.is_injection_layer(i))
      hidden = injection_layer_forward(attn.hidden, *bundle, cfg.bundle_slot(i), p_q, params, i, cfg);
    else
      hidden = mlp_sublayer(attn.hidden, w);
  }
  hidden = rms_norm(hidden, params.get("decoder.final_norm"), kNormEps);
  return linear(hidden, params.get("decoder.lm_head"));
}

std::vector<TokenId> generate(std::span<const TokenId> prompt_tokens,
                              const InjectionBundle* bundle, const ModelParams& params,
                              const DecoderConfig& cfg, int max_new) {
  if (max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
  TapeSuspend no_grad;
  std::vector<TokenId> seq(prompt_tokens.begin(), prompt_tokens.end());
  std::vector<TokenId> generated;
  generated.reserve(static_cast<std::size_t>(max_new));
  for (int step = 0; step < max_new; ++step) {
    Tensor logits = decoder_forward(seq, bundle, params, cfg);
    const std::int64_t V = logits.dim(1);
    const double* last = logits.data().data() + (logits.dim(0) - 1) * V;
    TokenId best = 0;
    for (std::int64_t t = 1; t < V; ++t)
      if (last[t] > last[best]) best = static_cast<TokenId>(t);
    seq.push_back(best);
    generated.push_back(best);
  }
  return generated;
}

}  // namespace treekv
