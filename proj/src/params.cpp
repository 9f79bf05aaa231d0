#include "treekv/params.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_map>

namespace treekv {

void CompressorConfig::validate() const {
  if (num_layers < 1) throw std::invalid_argument("compressor: num_layers must be >= 1");
  if (d_model != num_heads * head_dim)
    throw std::invalid_argument("compressor: d_model must equal num_heads * head_dim");
  if (head_dim % 2 != 0) throw std::invalid_argument("compressor: head_dim must be even");
  if (vocab_size < 1 || mlp_hidden < 1) throw std::invalid_argument("compressor: bad dims");
}

PlacementMode placement_from_string(const std::string& s) {
  if (s == "continuous_bottom") return PlacementMode::continuous_bottom;
  if (s == "continuous_top") return PlacementMode::continuous_top;
  if (s == "interleaving") return PlacementMode::interleaving;
  throw std::invalid_argument("placement_mode: unknown value '" + s + "'");
}

std::string placement_to_string(PlacementMode m) {
  switch (m) {
    case PlacementMode::continuous_bottom: return "continuous_bottom";
    case PlacementMode::continuous_top: return "continuous_top";
    case PlacementMode::interleaving: return "interleaving";
  }
  throw std::logic_error("placement_to_string: bad enum");
}

std::vector<int> placement_layers(PlacementMode mode, int num_layers, int m) {
  if (m < 1 || m > num_layers)
    throw std::invalid_argument("placement_layers: need 1 <= M <= N, got M=" + std::to_string(m) +
                                " N=" + std::to_string(num_layers));
  std::vector<int> layers(static_cast<std::size_t>(m));
  switch (mode) {
    case PlacementMode::continuous_bottom:
      for (int i = 0; i < m; ++i) layers[static_cast<std::size_t>(i)] = i + 1;
      break;
    case PlacementMode::continuous_top:
      for (int i = 0; i < m; ++i) layers[static_cast<std::size_t>(i)] = num_layers - m + i + 1;
      break;
    case PlacementMode::interleaving:
      // evenly spaced: layer k*N/M for k = 1..M
      for (int i = 0; i < m; ++i)
        layers[static_cast<std::size_t>(i)] = ((i + 1) * num_layers) / m;
      break;
  }
  return layers;
}

void DecoderConfig::validate() const {
  if (num_layers < 1) throw std::invalid_argument("decoder: num_layers must be >= 1");
  if (d_model != num_heads * head_dim)
    throw std::invalid_argument("decoder: d_model must equal num_heads * head_dim");
  if (head_dim % 2 != 0) throw std::invalid_argument("decoder: head_dim must be even");
  if (injection_layers.empty())
    throw std::invalid_argument("decoder: injection_layers must not be empty");
  for (std::size_t i = 0; i < injection_layers.size(); ++i) {
    const int l = injection_layers[i];
    if (l < 1 || l > num_layers)
      throw std::invalid_argument("decoder: injection layer " + std::to_string(l) +
                                  " outside [1," + std::to_string(num_layers) + "]");
    if (i > 0 && injection_layers[i] <= injection_layers[i - 1])
      throw std::invalid_argument("decoder: injection_layers must be strictly increasing");
  }
}

bool DecoderConfig::is_injection_layer(int layer_1indexed) const {
  return std::find(injection_layers.begin(), injection_layers.end(), layer_1indexed) !=
         injection_layers.end();
}

int DecoderConfig::bundle_slot(int layer_1indexed) const {
  const auto it = std::find(injection_layers.begin(), injection_layers.end(), layer_1indexed);
  if (it == injection_layers.end())
    throw std::invalid_argument("bundle_slot: layer " + std::to_string(layer_1indexed) +
                                " is not an injection layer");
  return static_cast<int>(it - injection_layers.begin());
}

Tensor& ModelParams::add(const std::string& name, Tensor t) {
  if (has(name)) throw std::invalid_argument("ModelParams: duplicate name " + name);
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor& ModelParams::get(const std::string& name) {
  for (auto& [n, t] : items_)
    if (n == name) return t;
  throw std::out_of_range("ModelParams: no tensor named " + name);
}

const Tensor& ModelParams::get(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return t;
  throw std::out_of_range("ModelParams: no tensor named " + name);
}

bool ModelParams::has(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return true;
  return false;
}

std::int64_t ModelParams::total_elements() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ModelParams::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

void ModelParams::freeze_prefixes(std::span<const std::string> prefixes) {
  for (auto& [name, t] : items_)
    for (const auto& p : prefixes)
      if (name.rfind(p, 0) == 0) t.set_requires_grad(false);
}

std::vector<Tensor> ModelParams::trainable() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : items_)
    if (t.requires_grad()) out.push_back(t);
  return out;
}

namespace {

constexpr double kInitStd = 0.02;

void add_layer_params(ModelParams& p, const std::string& prefix, int d, int hidden,
                      std::mt19937_64& rng) {
  p.add(prefix + ".attn_norm", Tensor::full({d}, 1.0, true));
  p.add(prefix + ".wq", Tensor::randn({d, d}, rng, kInitStd, true));
  p.add(prefix + ".wk", Tensor::randn({d, d}, rng, kInitStd, true));
  p.add(prefix + ".wv", Tensor::randn({d, d}, rng, kInitStd, true));
  p.add(prefix + ".wo", Tensor::randn({d, d}, rng, kInitStd, true));
  p.add(prefix + ".mlp_norm", Tensor::full({d}, 1.0, true));
  p.add(prefix + ".mlp_gate", Tensor::randn({d, hidden}, rng, kInitStd, true));
  p.add(prefix + ".mlp_up", Tensor::randn({d, hidden}, rng, kInitStd, true));
  p.add(prefix + ".mlp_down", Tensor::randn({hidden, d}, rng, kInitStd, true));
}

void clone_layer_params(ModelParams& p, const std::string& src, const std::string& dst) {
  static const char* kNames[] = {".attn_norm", ".wq",       ".wk",     ".wv",    ".wo",
                                 ".mlp_norm",  ".mlp_gate", ".mlp_up", ".mlp_down"};
  for (const char* n : kNames) p.add(dst + n, p.get(src + n).clone());
}

}  // namespace

ModelParams init_params(const CompressorConfig& ccfg, const DecoderConfig& dcfg,
                        std::uint64_t seed) {
  ccfg.validate();
  dcfg.validate();
  if (static_cast<int>(dcfg.injection_layers.size()) != ccfg.num_layers)
    throw std::invalid_argument("init_params: |injection_layers| must equal compressor layers M");
  if (ccfg.d_model != dcfg.d_model || ccfg.num_heads != dcfg.num_heads ||
      ccfg.vocab_size != dcfg.vocab_size || ccfg.mlp_hidden != dcfg.mlp_hidden)
    throw std::invalid_argument("init_params: compressor and decoder dims must agree");

  std::mt19937_64 rng(seed);
  ModelParams p;
  const int d = dcfg.d_model;

  p.add("decoder.embed", Tensor::randn({dcfg.vocab_size, d}, rng, kInitStd, true));
  for (int i = 1; i <= dcfg.num_layers; ++i) {
    const std::string prefix = "decoder.layer" + std::to_string(i - 1);
    add_layer_params(p, prefix, d, dcfg.mlp_hidden, rng);
    if (dcfg.is_injection_layer(i)) {
      p.add(prefix + ".cross_norm", Tensor::full({d}, 1.0, true));
      p.add(prefix + ".cross_wq", Tensor::randn({d, d}, rng, kInitStd, true));
      // zero output projection: injection starts as an exact no-op
      p.add(prefix + ".cross_wo", Tensor::zeros({d, d}, true));
    }
  }
  p.add("decoder.final_norm", Tensor::full({d}, 1.0, true));
  p.add("decoder.lm_head", Tensor::randn({d, dcfg.vocab_size}, rng, kInitStd, true));

  // lower model: one random draw shared with the decoder's bottom M layers
  p.add("compressor.embed", p.get("decoder.embed").clone());
  for (int m = 0; m < ccfg.num_layers; ++m)
    clone_layer_params(p, "decoder.layer" + std::to_string(m),
                       "compressor.layer" + std::to_string(m));
  return p;
}

LayerWeights layer_weights(const ModelParams& p, const std::string& prefix) {
  LayerWeights w;
  w.attn_norm = p.get(prefix + ".attn_norm");
  w.wq = p.get(prefix + ".wq");
  w.wk = p.get(prefix + ".wk");
  w.wv = p.get(prefix + ".wv");
  w.wo = p.get(prefix + ".wo");
  w.mlp_norm = p.get(prefix + ".mlp_norm");
  w.w_gate = p.get(prefix + ".mlp_gate");
  w.w_up = p.get(prefix + ".mlp_up");
  w.w_down = p.get(prefix + ".mlp_down");
  return w;
}

CrossWeights cross_weights(const ModelParams& p, const std::string& prefix) {
  CrossWeights w;
  w.norm = p.get(prefix + ".cross_norm");
  w.wq = p.get(prefix + ".cross_wq");
  w.wo = p.get(prefix + ".cross_wo");
  return w;
}

SelfAttnOut self_attention_sublayer(const Tensor& hidden, const LayerWeights& w,
                                    std::span<const std::int64_t> positions, int num_heads,
                                    int head_dim, double rope_base) {
  const std::int64_t L = hidden.dim(0);
  const std::int64_t d = hidden.dim(1);
  Tensor x = rms_norm(hidden, w.attn_norm, kNormEps);
  Tensor q = reshape(linear(x, w.wq), {L, num_heads, head_dim});
  Tensor k = reshape(linear(x, w.wk), {L, num_heads, head_dim});
  Tensor v = reshape(linear(x, w.wv), {L, num_heads, head_dim});
  Tensor q_rot = rope_apply(q, positions, rope_base);
  Tensor k_rot = rope_apply(k, positions, rope_base);
  Tensor att = attention(q_rot, k_rot, v, AttentionMask::causal_mask(L, L));
  Tensor out = add(hidden, linear(reshape(att, {L, d}), w.wo));
  return {out, k_rot, v};
}

Tensor mlp_sublayer(const Tensor& hidden, const LayerWeights& w) {
  Tensor x = rms_norm(hidden, w.mlp_norm, kNormEps);
  Tensor gated = mul(silu(linear(x, w.w_gate)), linear(x, w.w_up));
  return add(hidden, linear(gated, w.w_down));
}

Tensor cross_attention_sublayer(const Tensor& hidden, const CrossWeights& w, const Tensor& keys,
                                const Tensor& values, std::span<const std::int64_t> p_q,
                                std::span<const std::int64_t> p_k, bool use_chunk_positions,
                                int num_heads, int head_dim, double rope_base) {
  const std::int64_t L = hidden.dim(0);
  const std::int64_t d = hidden.dim(1);
  Tensor x = rms_norm(hidden, w.norm, kNormEps);
  Tensor q = reshape(linear(x, w.wq), {L, num_heads, head_dim});
  Tensor k = keys;
  if (use_chunk_positions) {
    q = rope_apply(q, p_q, rope_base);
    k = rope_apply(keys, p_k, rope_base);
  }
  Tensor att = attention(q, k, values, AttentionMask::none_mask(L, k.dim(0)));
  return add(hidden, linear(reshape(att, {L, d}), w.wo));
}

}  // namespace treekv
