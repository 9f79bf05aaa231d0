#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "treekv/params.hpp"
#include "treekv/trainer.hpp"
#include "treekv/tree.hpp"

namespace treekv {

struct TreeConfig {
  int height = 3;
  std::int64_t chunk_size = 256;
  Fraction leaf_keep{1, 4};  // with the halving schedule and h=3 this is beta = 8
  double gamma = 5.0;        // sigma = base_length / gamma
  SigmaBase sigma_base = SigmaBase::node_length;
  bool noise = true;  // training only; evaluation always uses epsilon = 0

  TreeBuildConfig build_config(bool with_noise) const;
  CompressionSchedule schedule() const { return make_schedule(height, leaf_keep); }
  void validate() const;
};

enum class PolicyMode { deterministic, query_aware };

struct DataConfig {
  std::string task = "copy";  // copy | passkey | corpus
  std::int64_t running_len = 64;
  std::int64_t context_len = 256;  // passkey/corpus
  std::int64_t pattern_len = 64;   // copy
  int repeats = 2;                 // copy
  int key_digits = 4;              // passkey
  std::string corpus_path;         // corpus
  int heldout_samples = 100;

  void validate() const;
};

struct ModelDims {
  int n_layers = 4;  // N
  int m_layers = 2;  // M
  int d_model = 64;
  int n_heads = 4;
  int mlp_hidden = 128;
  int vocab_size = 259;
  double rope_base = 10000.0;

  void validate() const;
};

struct RunConfig {
  ModelDims model;
  TreeConfig tree;
  PlacementMode placement_mode = PlacementMode::continuous_bottom;
  bool use_chunk_positions = true;
  bool cross_attn_enabled = true;
  PolicyMode policy = PolicyMode::deterministic;
  TrainConfig train;
  DataConfig data;
  std::uint64_t seed = 1234;

  CompressorConfig compressor_config() const;
  DecoderConfig decoder_config() const;
  void validate() const;

  // Strict parsing: unknown or mistyped fields raise errors naming the
  // offending field path.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load_file(const std::filesystem::path& path);
  nlohmann::json to_json() const;  // fully resolved snapshot
};

}  // namespace treekv
