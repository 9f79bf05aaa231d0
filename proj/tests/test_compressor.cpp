#include <numeric>
#include <random>

#include <doctest.h>

#include "treekv/compressor.hpp"

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

DecoderConfig toy_dcfg(int m = 2, int n = 4) {
  DecoderConfig d;
  d.num_layers = n;
  d.injection_layers = placement_layers(PlacementMode::continuous_bottom, n, m);
  d.d_model = 64;
  d.num_heads = 4;
  d.head_dim = 16;
  d.mlp_hidden = 128;
  d.vocab_size = 259;
  d.rope_base = 10000.0;
  return d;
}

std::vector<TokenId> random_tokens(std::int64_t len, std::uint64_t seed) {
  std::vector<TokenId> t(static_cast<std::size_t>(len));
  std::mt19937_64 rng(seed);
  for (auto& x : t) x = static_cast<TokenId>(rng() % 256);
  return t;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("encode_preserved shape contract and determinism") {
  const auto ccfg = toy_ccfg();
  const ModelParams params = init_params(ccfg, toy_dcfg(), 7);
  const auto tokens = random_tokens(128, 1);

  const LayeredKV kv = encode_preserved(tokens, params, ccfg);
  CHECK(kv.shape4() == Shape{2, 128, 4, 16});
  CHECK(kv.layers() == 2);
  CHECK_FALSE(kv.compressed);
  CHECK(kv.layer_tags == std::vector<int>{0, 1});

  const LayeredKV again = encode_preserved(tokens, params, ccfg);
  for (int m = 0; m < 2; ++m) {
    CHECK(tensors_equal(kv.keys[m], again.keys[m]));
    CHECK(tensors_equal(kv.values[m], again.values[m]));
  }

  CHECK_THROWS_AS(encode_preserved(std::vector<TokenId>{}, params, ccfg), std::invalid_argument);
}

TEST_CASE("causal prefix property: first t positions match a prefix encode") {
  const auto ccfg = toy_ccfg();
  const ModelParams params = init_params(ccfg, toy_dcfg(), 8);
  const auto tokens = random_tokens(96, 2);

  const LayeredKV full = encode_preserved(tokens, params, ccfg);
  const std::int64_t t = 60;
  const LayeredKV prefix =
      encode_preserved(std::span<const TokenId>(tokens).first(static_cast<std::size_t>(t)), params,
                       ccfg);
  for (int m = 0; m < 2; ++m) {
    const std::int64_t row = 4 * 16;  // heads x head_dim
    for (std::int64_t p = 0; p < t; ++p)
      for (std::int64_t j = 0; j < row; ++j) {
        CHECK(full.keys[m].data()[p * row + j] == prefix.keys[m].data()[p * row + j]);
        CHECK(full.values[m].data()[p * row + j] == prefix.values[m].data()[p * row + j]);
      }
  }
}

TEST_CASE("causality: mutating a later token leaves earlier KV untouched") {
  const auto ccfg = toy_ccfg();
  const ModelParams params = init_params(ccfg, toy_dcfg(), 9);
  auto tokens = random_tokens(64, 3);
  const LayeredKV before = encode_preserved(tokens, params, ccfg);
  tokens[50] = static_cast<TokenId>((tokens[50] + 1) % 256);
  const LayeredKV after = encode_preserved(tokens, params, ccfg);

  const std::int64_t row = 4 * 16;
  bool changed_somewhere = false;
  for (int m = 0; m < 2; ++m) {
    for (std::int64_t p = 0; p < 50; ++p)
      for (std::int64_t j = 0; j < row; ++j)
        CHECK(before.keys[m].data()[p * row + j] == after.keys[m].data()[p * row + j]);
    for (std::int64_t p = 50; p < 64; ++p)
      for (std::int64_t j = 0; j < row; ++j)
        changed_somewhere =
            changed_somewhere ||
            before.values[m].data()[p * row + j] != after.values[m].data()[p * row + j];
  }
  CHECK(changed_somewhere);
}

TEST_CASE("compress_kv gathers block-last positions on every layer") {
  const auto ccfg = toy_ccfg();
  const ModelParams params = init_params(ccfg, toy_dcfg(), 10);
  const auto tokens = random_tokens(128, 4);
  const LayeredKV kv = encode_preserved(tokens, params, ccfg);

  SUBCASE("fraction one is the identity") {
    const LayeredKV same = compress_kv(kv, {1, 1});
    CHECK(same.compressed);
    for (int m = 0; m < 2; ++m) CHECK(tensors_equal(same.keys[m], kv.keys[m]));
  }

  SUBCASE("fraction 1/4 keeps 32 positions, first kept is input position 3") {
    const LayeredKV c = compress_kv(kv, {1, 4});
    CHECK(c.shape4() == Shape{2, 32, 4, 16});
    const std::int64_t row = 4 * 16;
    for (int m = 0; m < 2; ++m)
      for (std::int64_t j = 0; j < row; ++j) {
        CHECK(c.keys[m].data()[j] == kv.keys[m].data()[3 * row + j]);
        CHECK(c.values[m].data()[j] == kv.values[m].data()[3 * row + j]);
      }
    // alpha = l / l' recomputed from shapes equals 1/keep_fraction
    CHECK(kv.positions() / c.positions() == 4);
  }

  SUBCASE("double compression is rejected") {
    const LayeredKV c = compress_kv(kv, {1, 4});
    CHECK_THROWS_AS(compress_kv(c, {1, 2}), std::invalid_argument);
  }
}

TEST_CASE("encode_chunk: accounting and node-order independence") {
  const auto ccfg = toy_ccfg();
  const ModelParams params = init_params(ccfg, toy_dcfg(), 11);
  TokenChunk chunk;
  chunk.offset = 0;
  chunk.tokens = random_tokens(1024, 5);

  TreeBuildConfig tcfg;
  tcfg.height = 3;
  tcfg.noise = false;
  const auto schedule = make_schedule(3, {1, 4});
  const EncodedChunk enc =
      encode_chunk(chunk, tcfg, schedule, deterministic_policy(), params, ccfg, 99);

  REQUIRE(enc.nodes.size() == 4);
  for (const LayeredKV& kv : enc.nodes) {
    CHECK(kv.positions() == 32);
    CHECK(kv.compressed);
  }
  CHECK(enc.total_kept() == 128);
  CHECK(effective_beta(enc.tree) == Fraction{8, 1});

  // encoding the preserved nodes in reverse order gives the same per-node KV
  for (std::size_t i = enc.tree.preserved.size(); i-- > 0;) {
    const PreservedNode& p = enc.tree.preserved[i];
    const auto rel = static_cast<std::size_t>(p.node.start - chunk.offset);
    const std::span<const TokenId> node_tokens =
        std::span<const TokenId>(chunk.tokens).subspan(rel, static_cast<std::size_t>(p.node.length));
    const LayeredKV direct = compress_kv(encode_preserved(node_tokens, params, ccfg),
                                         p.keep_fraction);
    for (int m = 0; m < 2; ++m) {
      CHECK(tensors_equal(direct.keys[m], enc.nodes[i].keys[m]));
      CHECK(tensors_equal(direct.values[m], enc.nodes[i].values[m]));
    }
  }
}

TEST_CASE("short_forward_repr matches a hand-assembled one-layer forward") {
  const auto ccfg = toy_ccfg();
  const ModelParams params = init_params(ccfg, toy_dcfg(), 12);
  const auto tokens = random_tokens(24, 6);

  const std::vector<double> repr = short_forward_repr(tokens, params, ccfg);
  REQUIRE(static_cast<int>(repr.size()) == ccfg.d_model);

  // independent assembly from the public kernel ops
  const std::int64_t L = 24;
  std::vector<std::int64_t> pos(24);
  std::iota(pos.begin(), pos.end(), 0);
  Tensor hidden = embedding(params.get("compressor.embed"), tokens);
  Tensor xn = rms_norm(hidden, params.get("compressor.layer0.attn_norm"), kNormEps);
  Tensor q = reshape(linear(xn, params.get("compressor.layer0.wq")), {L, 4, 16});
  Tensor k = reshape(linear(xn, params.get("compressor.layer0.wk")), {L, 4, 16});
  Tensor v = reshape(linear(xn, params.get("compressor.layer0.wv")), {L, 4, 16});
  Tensor att = attention(rope_apply(q, pos, ccfg.rope_base), rope_apply(k, pos, ccfg.rope_base), v,
                         AttentionMask::causal_mask(L, L));
  Tensor h1 = add(hidden, linear(reshape(att, {L, 64}), params.get("compressor.layer0.wo")));
  Tensor hn = rms_norm(h1, params.get("compressor.layer0.mlp_norm"), kNormEps);
  Tensor gated = mul(silu(linear(hn, params.get("compressor.layer0.mlp_gate"))),
                     linear(hn, params.get("compressor.layer0.mlp_up")));
  Tensor out = add(h1, linear(gated, params.get("compressor.layer0.mlp_down")));

  for (int i = 0; i < 64; ++i) CHECK(repr[i] == doctest::Approx(out.data()[23 * 64 + i]));

  // appending a token changes the representation; truncating restores it
  auto longer = tokens;
  longer.push_back(42);
  const auto extended = short_forward_repr(longer, params, ccfg);
  bool differs = false;
  for (int i = 0; i < 64; ++i) differs = differs || extended[i] != repr[i];
  CHECK(differs);
  longer.pop_back();
  CHECK(short_forward_repr(longer, params, ccfg) == repr);
}

TEST_CASE("upper and lower short forwards agree at shared initialization") {
  const auto ccfg = toy_ccfg();
  const ModelParams params = init_params(ccfg, toy_dcfg(), 13);
  const auto tokens = random_tokens(16, 7);
  const auto lower = short_forward_repr(tokens, params, ccfg);
  const auto upper =
      decoder_short_forward_repr(tokens, params, ccfg.num_heads, ccfg.head_dim, ccfg.rope_base);
  REQUIRE(lower.size() == upper.size());
  for (std::size_t i = 0; i < lower.size(); ++i) CHECK(lower[i] == upper[i]);
}
