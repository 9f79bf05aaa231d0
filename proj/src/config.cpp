#include "treekv/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace treekv {

TreeBuildConfig TreeConfig::build_config(bool with_noise) const {
  TreeBuildConfig c;
  c.height = height;
  c.gamma = gamma;
  c.sigma_base = sigma_base;
  c.noise = with_noise && noise;
  return c;
}

void TreeConfig::validate() const {
  if (height < 1) throw std::invalid_argument("tree.height: must be >= 1");
  if (chunk_size < (std::int64_t{1} << height))
    throw std::invalid_argument("tree.chunk_size: must be >= 2^height");
  if (!leaf_keep.positive() || !leaf_keep.at_most_one())
    throw std::invalid_argument("tree.leaf_keep: must be in (0,1]");
  if (gamma <= 0) throw std::invalid_argument("tree.gamma: must be > 0");
}

void DataConfig::validate() const {
  if (task != "copy" && task != "passkey" && task != "corpus")
    throw std::invalid_argument("data.task: must be copy, passkey or corpus");
  if (running_len < 1) throw std::invalid_argument("data.running_len: must be >= 1");
  if (context_len < 1) throw std::invalid_argument("data.context_len: must be >= 1");
  if (pattern_len < 1) throw std::invalid_argument("data.pattern_len: must be >= 1");
  if (repeats < 1) throw std::invalid_argument("data.repeats: must be >= 1");
  if (key_digits < 1) throw std::invalid_argument("data.key_digits: must be >= 1");
  if (heldout_samples < 1) throw std::invalid_argument("data.heldout_samples: must be >= 1");
  if (task == "corpus" && corpus_path.empty())
    throw std::invalid_argument("data.corpus_path: required for the corpus task");
}

void ModelDims::validate() const {
  if (n_layers < 1) throw std::invalid_argument("model.n_layers: must be >= 1");
  if (m_layers < 1 || m_layers > n_layers)
    throw std::invalid_argument("model.m_layers: must be in [1, n_layers]");
  if (n_heads < 1 || d_model % n_heads != 0)
    throw std::invalid_argument("model.d_model: must be a multiple of n_heads");
  if ((d_model / n_heads) % 2 != 0)
    throw std::invalid_argument("model.d_model: head_dim (d_model/n_heads) must be even");
  if (mlp_hidden < 1) throw std::invalid_argument("model.mlp_hidden: must be >= 1");
  if (vocab_size < 2) throw std::invalid_argument("model.vocab_size: must be >= 2");
  if (rope_base <= 1) throw std::invalid_argument("model.rope_base: must be > 1");
}

CompressorConfig RunConfig::compressor_config() const {
  CompressorConfig c;
  c.num_layers = model.m_layers;
  c.d_model = model.d_model;
  c.num_heads = model.n_heads;
  c.head_dim = model.d_model / model.n_heads;
  c.mlp_hidden = model.mlp_hidden;
  c.rope_base = model.rope_base;
  c.vocab_size = model.vocab_size;
  return c;
}

DecoderConfig RunConfig::decoder_config() const {
  DecoderConfig c;
  c.num_layers = model.n_layers;
  c.injection_layers = placement_layers(placement_mode, model.n_layers, model.m_layers);
  c.d_model = model.d_model;
  c.num_heads = model.n_heads;
  c.head_dim = model.d_model / model.n_heads;
  c.mlp_hidden = model.mlp_hidden;
  c.vocab_size = model.vocab_size;
  c.rope_base = model.rope_base;
  c.placement_mode = placement_mode;
  c.use_chunk_positions = use_chunk_positions;
  c.cross_attn_enabled = cross_attn_enabled;
  return c;
}

void RunConfig::validate() const {
  model.validate();
  tree.validate();
  train.validate();
  data.validate();
  compressor_config().validate();
  decoder_config().validate();
}

namespace {

using nlohmann::json;

[[noreturn]] void field_error(const std::string& path, const std::string& what) {
  throw std::invalid_argument("config: " + path + ": " + what);
}

void check_keys(const json& j, const std::string& path, const std::set<std::string>& allowed) {
  if (!j.is_object()) field_error(path, "expected an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) field_error(path.empty() ? key : path + "." + key, "unknown field");
}

template <typename T>
void read_number(const json& j, const std::string& path, const char* key, T& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) field_error(path + "." + key, "expected a number");
    out = v.get<double>();
  } else {
    if (!v.is_number_integer()) field_error(path + "." + key, "expected an integer");
    out = v.get<T>();
  }
}

void read_bool(const json& j, const std::string& path, const char* key, bool& out) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_boolean()) field_error(path + "." + key, "expected a boolean");
  out = j.at(key).get<bool>();
}

void read_string(const json& j, const std::string& path, const char* key, std::string& out) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_string()) field_error(path + "." + key, "expected a string");
  out = j.at(key).get<std::string>();
}

Fraction read_fraction(const json& j, const std::string& path, const char* key, Fraction fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  try {
    if (v.is_string()) return Fraction::parse(v.get<std::string>());
    if (v.is_number_integer()) return {v.get<std::int64_t>(), 1};
  } catch (const std::exception& e) {
    field_error(path + "." + key, e.what());
  }
  field_error(path + "." + key, "expected an integer or a \"num/den\" string");
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  RunConfig cfg;
  check_keys(j, "", {"model", "tree", "placement_mode", "use_chunk_positions",
                     "cross_attn_enabled", "policy", "train", "data", "seed"});

  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, "model",
               {"n_layers", "m_layers", "d_model", "n_heads", "mlp_hidden", "vocab_size",
                "rope_base"});
    read_number(m, "model", "n_layers", cfg.model.n_layers);
    read_number(m, "model", "m_layers", cfg.model.m_layers);
    read_number(m, "model", "d_model", cfg.model.d_model);
    read_number(m, "model", "n_heads", cfg.model.n_heads);
    read_number(m, "model", "mlp_hidden", cfg.model.mlp_hidden);
    read_number(m, "model", "vocab_size", cfg.model.vocab_size);
    read_number(m, "model", "rope_base", cfg.model.rope_base);
  }

  if (j.contains("tree")) {
    const json& t = j.at("tree");
    check_keys(t, "tree", {"height", "chunk_size", "leaf_keep", "gamma", "sigma_base", "noise"});
    read_number(t, "tree", "height", cfg.tree.height);
    read_number(t, "tree", "chunk_size", cfg.tree.chunk_size);
    cfg.tree.leaf_keep = read_fraction(t, "tree", "leaf_keep", cfg.tree.leaf_keep);
    read_number(t, "tree", "gamma", cfg.tree.gamma);
    std::string sb = cfg.tree.sigma_base == SigmaBase::node_length ? "node_length" : "half_length";
    read_string(t, "tree", "sigma_base", sb);
    if (sb == "node_length")
      cfg.tree.sigma_base = SigmaBase::node_length;
    else if (sb == "half_length")
      cfg.tree.sigma_base = SigmaBase::half_length;
    else
      field_error("tree.sigma_base", "must be node_length or half_length");
    read_bool(t, "tree", "noise", cfg.tree.noise);
  }

  if (j.contains("placement_mode")) {
    if (!j.at("placement_mode").is_string()) field_error("placement_mode", "expected a string");
    try {
      cfg.placement_mode = placement_from_string(j.at("placement_mode").get<std::string>());
    } catch (const std::exception& e) {
      field_error("placement_mode", e.what());
    }
  }
  read_bool(j, "", "use_chunk_positions", cfg.use_chunk_positions);
  read_bool(j, "", "cross_attn_enabled", cfg.cross_attn_enabled);

  if (j.contains("policy")) {
    if (!j.at("policy").is_string()) field_error("policy", "expected a string");
    const std::string p = j.at("policy").get<std::string>();
    if (p == "deterministic")
      cfg.policy = PolicyMode::deterministic;
    else if (p == "query_aware")
      cfg.policy = PolicyMode::query_aware;
    else
      field_error("policy", "must be deterministic or query_aware");
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train",
               {"mode", "lr_peak", "warmup_ratio", "total_steps", "adam_beta1", "adam_beta2",
                "weight_decay", "seed", "batch_size", "grad_accum_steps", "grad_clip", "freeze"});
    std::string mode = cfg.train.mode == TrainConfig::Mode::lm ? "lm" : "sft";
    read_string(t, "train", "mode", mode);
    if (mode == "lm")
      cfg.train.mode = TrainConfig::Mode::lm;
    else if (mode == "sft")
      cfg.train.mode = TrainConfig::Mode::sft;
    else
      field_error("train.mode", "must be lm or sft");
    read_number(t, "train", "lr_peak", cfg.train.lr_peak);
    read_number(t, "train", "warmup_ratio", cfg.train.warmup_ratio);
    read_number(t, "train", "total_steps", cfg.train.total_steps);
    read_number(t, "train", "adam_beta1", cfg.train.adam_beta1);
    read_number(t, "train", "adam_beta2", cfg.train.adam_beta2);
    read_number(t, "train", "weight_decay", cfg.train.weight_decay);
    read_number(t, "train", "seed", cfg.train.seed);
    read_number(t, "train", "batch_size", cfg.train.batch_size);
    read_number(t, "train", "grad_accum_steps", cfg.train.grad_accum_steps);
    read_number(t, "train", "grad_clip", cfg.train.grad_clip);
    if (t.contains("freeze")) {
      if (!t.at("freeze").is_array()) field_error("train.freeze", "expected an array of strings");
      cfg.train.freeze.clear();
      for (const auto& f : t.at("freeze")) {
        if (!f.is_string()) field_error("train.freeze", "expected an array of strings");
        cfg.train.freeze.push_back(f.get<std::string>());
      }
    }
  }

  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, "data",
               {"task", "running_len", "context_len", "pattern_len", "repeats", "key_digits",
                "corpus_path", "heldout_samples"});
    read_string(d, "data", "task", cfg.data.task);
    read_number(d, "data", "running_len", cfg.data.running_len);
    read_number(d, "data", "context_len", cfg.data.context_len);
    read_number(d, "data", "pattern_len", cfg.data.pattern_len);
    read_number(d, "data", "repeats", cfg.data.repeats);
    read_number(d, "data", "key_digits", cfg.data.key_digits);
    read_string(d, "data", "corpus_path", cfg.data.corpus_path);
    read_number(d, "data", "heldout_samples", cfg.data.heldout_samples);
  }

  read_number(j, "", "seed", cfg.seed);
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot read " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

nlohmann::json RunConfig::to_json() const {
  json j;
  j["model"] = {{"n_layers", model.n_layers},     {"m_layers", model.m_layers},
                {"d_model", model.d_model},       {"n_heads", model.n_heads},
                {"mlp_hidden", model.mlp_hidden}, {"vocab_size", model.vocab_size},
                {"rope_base", model.rope_base}};
  j["tree"] = {{"height", tree.height},
               {"chunk_size", tree.chunk_size},
               {"leaf_keep", tree.leaf_keep.str()},
               {"gamma", tree.gamma},
               {"sigma_base",
                tree.sigma_base == SigmaBase::node_length ? "node_length" : "half_length"},
               {"noise", tree.noise}};
  j["placement_mode"] = placement_to_string(placement_mode);
  j["use_chunk_positions"] = use_chunk_positions;
  j["cross_attn_enabled"] = cross_attn_enabled;
  j["policy"] = policy == PolicyMode::deterministic ? "deterministic" : "query_aware";
  j["train"] = {{"mode", train.mode == TrainConfig::Mode::lm ? "lm" : "sft"},
                {"lr_peak", train.lr_peak},
                {"warmup_ratio", train.warmup_ratio},
                {"total_steps", train.total_steps},
                {"adam_beta1", train.adam_beta1},
                {"adam_beta2", train.adam_beta2},
                {"weight_decay", train.weight_decay},
                {"seed", train.seed},
                {"batch_size", train.batch_size},
                {"grad_accum_steps", train.grad_accum_steps},
                {"grad_clip", train.grad_clip},
                {"freeze", train.freeze}};
  j["data"] = {{"task", data.task},
               {"running_len", data.running_len},
               {"context_len", data.context_len},
               {"pattern_len", data.pattern_len},
               {"repeats", data.repeats},
               {"key_digits", data.key_digits},
               {"corpus_path", data.corpus_path},
               {"heldout_samples", data.heldout_samples}};
  j["seed"] = seed;
  return j;
}

}  // namespace treekv
