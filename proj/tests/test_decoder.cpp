#include <filesystem>
#include <fstream>
#include <random>

#include <doctest.h>

#include "treekv/checkpoint.hpp"
#include "treekv/compressor.hpp"
#include "treekv/decoder.hpp"

using namespace treekv;

namespace {

CompressorConfig toy_ccfg(int m = 2) {
  CompressorConfig c;
  c.num_layers = m;
  c.d_model = 64;
  c.num_heads = 4;
  c.head_dim = 16;
  c.mlp_hidden = 128;
  c.rope_base = 10000.0;
  c.vocab_size = 259;
  return c;
}

DecoderConfig toy_dcfg(int m = 2, int n = 4,
                       PlacementMode mode = PlacementMode::continuous_bottom) {
  DecoderConfig d;
  d.num_layers = n;
  d.injection_layers = placement_layers(mode, n, m);
  d.d_model = 64;
  d.num_heads = 4;
  d.head_dim = 16;
  d.mlp_hidden = 128;
  d.vocab_size = 259;
  d.rope_base = 10000.0;
  d.placement_mode = mode;
  return d;
}

std::vector<TokenId> random_tokens(std::int64_t len, std::uint64_t seed) {
  std::vector<TokenId> t(static_cast<std::size_t>(len));
  std::mt19937_64 rng(seed);
  for (auto& x : t) x = static_cast<TokenId>(rng() % 256);
  return t;
}

TokenChunk make_chunk(std::int64_t len, std::int64_t offset, std::uint64_t seed) {
  TokenChunk c;
  c.offset = offset;
  c.tokens = random_tokens(len, seed);
  return c;
}

InjectionBundle bundle_for(const std::vector<TokenChunk>& chunks, const ModelParams& params,
                           const CompressorConfig& ccfg, int height = 2,
                           Fraction leaf = Fraction{1, 2}) {
  TreeBuildConfig tcfg;
  tcfg.height = height;
  tcfg.noise = false;
  const auto schedule = make_schedule(height, leaf);
  std::vector<EncodedChunk> enc;
  for (std::size_t i = 0; i < chunks.size(); ++i)
    enc.push_back(encode_chunk(chunks[i], tcfg, schedule, deterministic_policy(), params, ccfg, i));
  return build_bundle(enc);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("assign_chunk_positions mirrors the chunk-index rule") {
  SUBCASE("three chunks of 128 kept positions, running length 256") {
    const std::vector<std::int64_t> kept{128, 128, 128};
    const ChunkPositions p = assign_chunk_positions(kept, 256);
    REQUIRE(p.p_k.size() == 384);
    REQUIRE(p.p_q.size() == 256);
    for (int i = 0; i < 128; ++i) CHECK(p.p_k[i] == 0);
    for (int i = 128; i < 256; ++i) CHECK(p.p_k[i] == 1);
    for (int i = 256; i < 384; ++i) CHECK(p.p_k[i] == 2);
    for (auto q : p.p_q) CHECK(q == 3);
  }
  SUBCASE("one chunk") {
    const std::vector<std::int64_t> kept{32};
    const ChunkPositions p = assign_chunk_positions(kept, 8);
    REQUIRE(p.p_k.size() == 32);
    for (auto k : p.p_k) CHECK(k == 0);
    REQUIRE(p.p_q.size() == 8);
    for (auto q : p.p_q) CHECK(q == 1);
  }
  SUBCASE("no chunks") {
    const ChunkPositions p = assign_chunk_positions({}, 5);
    CHECK(p.p_k.empty());
    REQUIRE(p.p_q.size() == 5);
    for (auto q : p.p_q) CHECK(q == 0);
  }
}

TEST_CASE("bundle construction concatenates in chunk order with sane ids") {
  const auto ccfg = toy_ccfg();
  const ModelParams params = init_params(ccfg, toy_dcfg(), 21);
  const std::vector<TokenChunk> chunks{make_chunk(64, 0, 1), make_chunk(64, 64, 2),
                                       make_chunk(64, 128, 3)};
  const InjectionBundle b = bundle_for(chunks, params, ccfg);
  CHECK(b.num_chunks == 3);
  CHECK(b.layers() == 2);
  REQUIRE(static_cast<std::int64_t>(b.chunk_ids.size()) == b.total_kept());
  for (std::size_t i = 1; i < b.chunk_ids.size(); ++i)
    CHECK(b.chunk_ids[i] >= b.chunk_ids[i - 1]);
  CHECK(b.chunk_ids.front() == 0);
  CHECK(b.chunk_ids.back() == 2);
}

TEST_CASE("zero-initialized cross output projections leave logits bitwise unchanged") {
  const auto ccfg = toy_ccfg();
  const auto dcfg = toy_dcfg();
  const ModelParams params = init_params(ccfg, dcfg, 22);
  const std::vector<TokenChunk> chunks{make_chunk(64, 0, 4), make_chunk(64, 64, 5)};
  const InjectionBundle bundle = bundle_for(chunks, params, ccfg);
  const auto running = random_tokens(32, 6);

  const Tensor with = decoder_forward(running, &bundle, params, dcfg);
  const Tensor without = decoder_forward(running, nullptr, params, dcfg);
  REQUIRE(with.shape() == Shape{32, 259});
  for (std::int64_t i = 0; i < with.numel(); ++i) CHECK(with.data()[i] == without.data()[i]);
}

TEST_CASE("no bundle equals a plain decoder; disabled cross ignores the bundle") {
  const auto ccfg = toy_ccfg();
  auto dcfg = toy_dcfg();
  ModelParams params = init_params(ccfg, dcfg, 23);
  // make injection genuinely active
  std::mt19937_64 rng(99);
  for (auto& v : params.get("decoder.layer0.cross_wo").raw_data())
    v = std::normal_distribution<double>(0, 0.05)(rng);

  const std::vector<TokenChunk> chunks{make_chunk(64, 0, 7), make_chunk(64, 64, 8)};
  const InjectionBundle bundle = bundle_for(chunks, params, ccfg);
  const auto running = random_tokens(24, 9);

  const Tensor active = decoder_forward(running, &bundle, params, dcfg);
  const Tensor plain = decoder_forward(running, nullptr, params, dcfg);
  CHECK(max_abs_diff(active, plain) > 1e-9);

  dcfg.cross_attn_enabled = false;
  const Tensor disabled = decoder_forward(running, &bundle, params, dcfg);
  for (std::int64_t i = 0; i < plain.numel(); ++i) CHECK(disabled.data()[i] == plain.data()[i]);
}

TEST_CASE("causality holds with and without a bundle") {
  const auto ccfg = toy_ccfg();
  const auto dcfg = toy_dcfg();
  ModelParams params = init_params(ccfg, dcfg, 24);
  std::mt19937_64 rng(100);
  for (auto& v : params.get("decoder.layer1.cross_wo").raw_data())
    v = std::normal_distribution<double>(0, 0.05)(rng);

  const std::vector<TokenChunk> chunks{make_chunk(64, 0, 10)};
  const InjectionBundle bundle = bundle_for(chunks, params, ccfg);
  auto running = random_tokens(20, 11);

  for (const InjectionBundle* b : {static_cast<const InjectionBundle*>(nullptr), &bundle}) {
    const Tensor before = decoder_forward(running, b, params, dcfg);
    auto mutated = running;
    mutated[12] = static_cast<TokenId>((mutated[12] + 1) % 256);
    const Tensor after = decoder_forward(mutated, b, params, dcfg);
    for (std::int64_t t = 0; t < 12; ++t)
      for (std::int64_t v = 0; v < 259; ++v)
        CHECK(before.data()[t * 259 + v] == after.data()[t * 259 + v]);
    bool later_changed = false;
    for (std::int64_t i = 12 * 259; i < before.numel(); ++i)
      later_changed = later_changed || before.data()[i] != after.data()[i];
    CHECK(later_changed);
  }
}

TEST_CASE("chunk permutation: sensitive with positions, set-like without") {
  const auto ccfg = toy_ccfg();
  auto dcfg = toy_dcfg();
  ModelParams params = init_params(ccfg, dcfg, 25);
  std::mt19937_64 rng(101);
  for (const char* name : {"decoder.layer0.cross_wo", "decoder.layer1.cross_wo"})
    for (auto& v : params.get(name).raw_data()) v = std::normal_distribution<double>(0, 0.05)(rng);

  const TokenChunk a = make_chunk(64, 0, 12);
  TokenChunk b = make_chunk(64, 64, 13);
  TokenChunk a2 = a, b2 = b;  // swapped order, offsets swapped to stay a valid layout
  a2.offset = 64;
  b2.offset = 0;
  const InjectionBundle fwd = bundle_for({a, b}, params, ccfg);
  const InjectionBundle rev = bundle_for({b2, a2}, params, ccfg);
  const auto running = random_tokens(16, 14);

  dcfg.use_chunk_positions = true;
  const Tensor with_pos_fwd = decoder_forward(running, &fwd, params, dcfg);
  const Tensor with_pos_rev = decoder_forward(running, &rev, params, dcfg);
  CHECK(max_abs_diff(with_pos_fwd, with_pos_rev) > 1e-9);

  dcfg.use_chunk_positions = false;
  const Tensor no_pos_fwd = decoder_forward(running, &fwd, params, dcfg);
  const Tensor no_pos_rev = decoder_forward(running, &rev, params, dcfg);
  CHECK(max_abs_diff(no_pos_fwd, no_pos_rev) < 1e-12);
}

TEST_CASE("disabling chunk positions changes logits once a bundle exists") {
  const auto ccfg = toy_ccfg();
  auto dcfg = toy_dcfg();
  ModelParams params = init_params(ccfg, dcfg, 26);
  std::mt19937_64 rng(102);
  for (const char* name : {"decoder.layer0.cross_wo", "decoder.layer1.cross_wo"})
    for (auto& v : params.get(name).raw_data()) v = std::normal_distribution<double>(0, 0.05)(rng);
  const auto running = random_tokens(16, 15);

  for (int n = 1; n <= 2; ++n) {
    std::vector<TokenChunk> chunks;
    for (int i = 0; i < n; ++i) chunks.push_back(make_chunk(64, 64 * i, 20 + i));
    const InjectionBundle bundle = bundle_for(chunks, params, ccfg);
    dcfg.use_chunk_positions = true;
    const Tensor on = decoder_forward(running, &bundle, params, dcfg);
    dcfg.use_chunk_positions = false;
    const Tensor off = decoder_forward(running, &bundle, params, dcfg);
    // the running text always carries id n, so the rotation acts even at n=1
    CHECK(max_abs_diff(on, off) > 1e-9);
  }
}

TEST_CASE("placement modes run and compute distinct injection sets") {
  CHECK(placement_layers(PlacementMode::continuous_bottom, 4, 2) == std::vector<int>{1, 2});
  CHECK(placement_layers(PlacementMode::continuous_top, 4, 2) == std::vector<int>{3, 4});
  CHECK(placement_layers(PlacementMode::interleaving, 16, 4) == std::vector<int>{4, 8, 12, 16});
  CHECK(placement_layers(PlacementMode::interleaving, 4, 2) == std::vector<int>{2, 4});

  const auto ccfg = toy_ccfg();
  const auto running = random_tokens(16, 30);
  for (PlacementMode mode : {PlacementMode::continuous_bottom, PlacementMode::continuous_top,
                             PlacementMode::interleaving}) {
    const auto dcfg = toy_dcfg(2, 4, mode);
    ModelParams params = init_params(ccfg, dcfg, 27);
    std::mt19937_64 rng(103);
    for (int layer : dcfg.injection_layers)
      for (auto& v :
           params.get("decoder.layer" + std::to_string(layer - 1) + ".cross_wo").raw_data())
        v = std::normal_distribution<double>(0, 0.05)(rng);
    const InjectionBundle bundle = bundle_for({make_chunk(64, 0, 31)}, params, ccfg);
    const Tensor logits = decoder_forward(running, &bundle, params, dcfg);
    logits.assert_finite("placement forward");
  }
}

TEST_CASE("chunk-count extrapolation: 16 chunks stay finite") {
  const auto ccfg = toy_ccfg();
  const auto dcfg = toy_dcfg();
  ModelParams params = init_params(ccfg, dcfg, 28);
  std::mt19937_64 rng(104);
  for (const char* name : {"decoder.layer0.cross_wo", "decoder.layer1.cross_wo"})
    for (auto& v : params.get(name).raw_data()) v = std::normal_distribution<double>(0, 0.05)(rng);

  std::vector<TokenChunk> chunks;
  for (int i = 0; i < 16; ++i) chunks.push_back(make_chunk(32, 32 * i, 40 + i));
  const InjectionBundle bundle = bundle_for(chunks, params, ccfg, 2, Fraction{1, 2});
  CHECK(bundle.num_chunks == 16);
  const Tensor logits = decoder_forward(random_tokens(16, 41), &bundle, params, dcfg);
  logits.assert_finite("extrapolated forward");
}

TEST_CASE("generate is greedy, deterministic, lowest-id on ties") {
  const auto ccfg = toy_ccfg();
  const auto dcfg = toy_dcfg();
  ModelParams params = init_params(ccfg, dcfg, 29);
  const auto prompt = random_tokens(8, 50);

  const Tensor logits = decoder_forward(prompt, nullptr, params, dcfg);
  const double* last = logits.data().data() + 7 * 259;
  TokenId expect = 0;
  for (std::int64_t v = 1; v < 259; ++v)
    if (last[v] > last[expect]) expect = static_cast<TokenId>(v);

  const auto one = generate(prompt, nullptr, params, dcfg, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == expect);

  const auto a = generate(prompt, nullptr, params, dcfg, 5);
  const auto b = generate(prompt, nullptr, params, dcfg, 5);
  CHECK(a == b);

  // uniform logits tie-break to the lowest token id
  for (auto& v : params.get("decoder.lm_head").raw_data()) v = 0.0;
  const auto tied = generate(prompt, nullptr, params, dcfg, 2);
  CHECK(tied == std::vector<TokenId>{0, 0});
}

TEST_CASE("checkpoint round-trips losslessly at f32") {
  namespace fs = std::filesystem;
  const auto ccfg = toy_ccfg();
  const auto dcfg = toy_dcfg();
  const ModelParams src = init_params(ccfg, dcfg, 31);
  const fs::path dir1 = fs::temp_directory_path() / "treekv_ckpt_a";
  const fs::path dir2 = fs::temp_directory_path() / "treekv_ckpt_b";
  save_checkpoint(dir1, src);

  ModelParams dst = init_params(ccfg, dcfg, 777);  // different draw, same structure
  load_checkpoint(dir1, dst);
  for (std::size_t i = 0; i < src.items().size(); ++i) {
    const auto& [name, t] = src.items()[i];
    const Tensor& u = dst.items()[i].second;
    for (std::int64_t j = 0; j < t.numel(); ++j)
      CHECK(static_cast<float>(t.data()[j]) == static_cast<float>(u.data()[j]));
  }

  // a second save of the loaded params reproduces the payload byte-for-byte
  save_checkpoint(dir2, dst);
  std::ifstream f1(dir1 / "weights.bin", std::ios::binary);
  std::ifstream f2(dir2 / "weights.bin", std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(!b1.empty());
  CHECK(b1 == b2);

  // shape mismatches are detected
  ModelParams wrong = init_params(toy_ccfg(1), toy_dcfg(1), 5);
  CHECK_THROWS(load_checkpoint(dir1, wrong));
  fs::remove_all(dir1);
  fs::remove_all(dir2);
}
