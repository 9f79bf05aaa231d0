#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "treekv/tensor.hpp"

namespace treekv {

inline constexpr double kNormEps = 1e-6;

/// Lower-model dimensions: the bottom M transformer layers.
struct CompressorConfig {
  int num_layers = 2;  // M
  int d_model = 64;
  int num_heads = 4;
  int head_dim = 16;
  int mlp_hidden = 128;
  double rope_base = 10000.0;
  int vocab_size = 259;

  void validate() const;
};

enum class PlacementMode { continuous_bottom, continuous_top, interleaving };

PlacementMode placement_from_string(const std::string& s);
std::string placement_to_string(PlacementMode m);

/// Upper-model dimensions plus the injection wiring.
struct DecoderConfig {
  int num_layers = 4;                  // N
  std::vector<int> injection_layers;   // 1-indexed, |set| == M
  int d_model = 64;
  int num_heads = 4;
  int head_dim = 16;
  int mlp_hidden = 128;
  int vocab_size = 259;
  double rope_base = 10000.0;
  PlacementMode placement_mode = PlacementMode::continuous_bottom;
  bool use_chunk_positions = true;
  bool cross_attn_enabled = true;

  void validate() const;
  bool is_injection_layer(int layer_1indexed) const;
  // Bundle slot consumed by an injection layer: its rank in the ordered set.
  int bundle_slot(int layer_1indexed) const;
};

/// Evenly placed injection layers for a given mode (1-indexed).
std::vector<int> placement_layers(PlacementMode mode, int num_layers, int m);

/// All trainable tensors, iterated in a fixed registration order.
class ModelParams {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;

  std::span<const std::pair<std::string, Tensor>> items() const { return items_; }
  std::span<std::pair<std::string, Tensor>> items() { return items_; }
  std::size_t size() const { return items_.size(); }
  std::int64_t total_elements() const;

  void zero_grad();
  void freeze_prefixes(std::span<const std::string> prefixes);
  std::vector<Tensor> trainable() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

/// Fresh random parameters for the decoder plus a compressor initialized by
/// cloning the decoder's embedding and bottom-M layer weights (one random
/// draw shared at initialization, trained untied afterwards).
/// Cross-attention output projections start at zero.
ModelParams init_params(const CompressorConfig& ccfg, const DecoderConfig& dcfg,
                        std::uint64_t seed);

// ---- shared layer blocks ----

struct LayerWeights {
  Tensor attn_norm, wq, wk, wv, wo;
  Tensor mlp_norm, w_gate, w_up, w_down;
};

struct CrossWeights {
  Tensor norm, wq, wo;
};

LayerWeights layer_weights(const ModelParams& p, const std::string& prefix);
CrossWeights cross_weights(const ModelParams& p, const std::string& prefix);

struct SelfAttnOut {
  Tensor hidden;  // input + attention output (residual applied)
  Tensor k_rot;   // post-rotary keys   [L, H, dh]
  Tensor v;       // value projections  [L, H, dh]
};

SelfAttnOut self_attention_sublayer(const Tensor& hidden, const LayerWeights& w,
                                    std::span<const std::int64_t> positions, int num_heads,
                                    int head_dim, double rope_base);

Tensor mlp_sublayer(const Tensor& hidden, const LayerWeights& w);

Tensor cross_attention_sublayer(const Tensor& hidden, const CrossWeights& w, const Tensor& keys,
                                const Tensor& values, std::span<const std::int64_t> p_q,
                                std::span<const std::int64_t> p_k, bool use_chunk_positions,
                                int num_heads, int head_dim, double rope_base);

}  // namespace treekv
