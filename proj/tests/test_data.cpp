#include <filesystem>
#include <fstream>
#include <random>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "treekv/data.hpp"

using namespace treekv;

TEST_CASE("byte tokenizer is the identity on byte strings") {
  const auto ab = byte_tokenize("AB");
  CHECK(ab == std::vector<TokenId>{65, 66});

  CHECK(byte_tokenize("").empty());
  CHECK(byte_detokenize(std::vector<TokenId>{}).empty());

  std::mt19937_64 rng(1);
  for (int iter = 0; iter < 20; ++iter) {
    std::string s(rng() % 200, '\0');
    for (auto& c : s) c = static_cast<char>(rng() % 256);
    CHECK(byte_detokenize(byte_tokenize(s)) == s);
  }

  // specials are dropped on the way out
  CHECK(byte_detokenize(std::vector<TokenId>{65, kBosToken, 66, kPadToken, kSepToken}) == "AB");
}

TEST_CASE("chunk_context splits exactly with the remainder in front") {
  SUBCASE("exact division") {
    std::vector<TokenId> tokens(4096 + 512, 7);
    const Sample s = chunk_context(tokens, 1024, 512);
    REQUIRE(s.context_chunks.size() == 4);
    for (const auto& c : s.context_chunks) CHECK(c.length() == 1024);
    CHECK(static_cast<std::int64_t>(s.running_tokens.size()) == 512);
  }

  SUBCASE("remainder goes to the first chunk") {
    std::vector<TokenId> tokens(2500 + 100);
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<TokenId>(i % 251);
    const Sample s = chunk_context(tokens, 1024, 100);
    REQUIRE(s.context_chunks.size() == 3);
    CHECK(s.context_chunks[0].length() == 452);
    CHECK(s.context_chunks[1].length() == 1024);
    CHECK(s.context_chunks[2].length() == 1024);
    CHECK(s.context_chunks[0].offset == 0);
    CHECK(s.context_chunks[1].offset == 452);
    CHECK(s.context_chunks[2].offset == 1476);
    CHECK(s.full_sequence() == tokens);
  }

  SUBCASE("reconstruction identity on random splits") {
    std::mt19937_64 rng(2);
    for (int iter = 0; iter < 30; ++iter) {
      const std::int64_t total = 50 + static_cast<std::int64_t>(rng() % 3000);
      const std::int64_t running = 1 + static_cast<std::int64_t>(rng() % (total - 2));
      const std::int64_t chunk = 1 + static_cast<std::int64_t>(rng() % 512);
      std::vector<TokenId> tokens(static_cast<std::size_t>(total));
      for (auto& t : tokens) t = static_cast<TokenId>(rng() % 256);
      const Sample s = chunk_context(tokens, chunk, running);
      CHECK(s.full_sequence() == tokens);
      std::int64_t cursor = 0;
      for (const auto& c : s.context_chunks) {
        CHECK(c.offset == cursor);
        cursor += c.length();
      }
    }
  }

  SUBCASE("errors") {
    std::vector<TokenId> tokens(10, 1);
    CHECK_THROWS_AS(chunk_context(tokens, 4, 10), std::invalid_argument);
    CHECK_THROWS_WITH_AS(chunk_context(tokens, 4, 7, 4), doctest::Contains("tree"),
                         std::invalid_argument);
  }
}

TEST_CASE("passkey samples embed one needle inside a single chunk") {
  std::mt19937_64 rng(3);
  const PasskeySample ps = gen_passkey_sample(256, 4, 64, rng);
  REQUIRE(ps.answer.size() == 4);
  for (char c : ps.answer) CHECK((c >= '0' && c <= '9'));

  const std::string context = byte_detokenize(std::vector<TokenId>(
      ps.sample.full_sequence().begin(), ps.sample.full_sequence().begin() + 256));
  const std::string needle = "KEY=" + ps.answer;
  CHECK(context.find(needle) == static_cast<std::size_t>(ps.key_offset));
  CHECK(context.find(needle, static_cast<std::size_t>(ps.key_offset) + 1) == std::string::npos);

  // the needle sits inside one chunk
  bool inside_one = false;
  for (const auto& c : ps.sample.context_chunks) {
    const std::int64_t end = c.offset + c.length();
    if (ps.key_offset >= c.offset &&
        ps.key_offset + static_cast<std::int64_t>(needle.size()) <= end)
      inside_one = true;
  }
  CHECK(inside_one);

  // running text is the prompt plus the digits
  CHECK(byte_detokenize(ps.sample.running_tokens) == "KEY=" + ps.answer);
  CHECK(ps.sample.instruction_len == 4);
  CHECK(ps.sample.response_len == 4);

  // different seeds move the needle
  std::mt19937_64 rng2(4);
  const PasskeySample other = gen_passkey_sample(256, 4, 64, rng2);
  CHECK(other.key_offset != ps.key_offset);
}

TEST_CASE("copy samples repeat the pattern one more time in the running text") {
  std::mt19937_64 rng(5);
  const Sample s = gen_copy_sample(3, 10, 30, rng);
  CHECK(s.context_len() == 30);
  REQUIRE(s.running_tokens.size() == 3);
  const std::string full = byte_detokenize(s.full_sequence());
  const std::string pattern = full.substr(0, 3);
  for (int r = 0; r < 11; ++r) CHECK(full.substr(3 * r, 3) == pattern);

  std::mt19937_64 rng_a(6), rng_b(6);
  const Sample a = gen_copy_sample(8, 3, 8, rng_a);
  const Sample b = gen_copy_sample(8, 3, 8, rng_b);
  CHECK(a.full_sequence() == b.full_sequence());
}

TEST_CASE("corpus loading windows the file without overlap") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "treekv_corpus_test.bin";
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    std::mt19937_64 rng(7);
    for (int i = 0; i < 3 * 96; ++i) out.put(static_cast<char>('a' + rng() % 26));
  }

  const auto samples = load_corpus(path, 32, 32, 64);
  REQUIRE(samples.size() == 3);
  for (const auto& s : samples) {
    CHECK(s.context_len() == 64);
    CHECK(s.running_tokens.size() == 32);
  }

  // stable ordering and non-overlap: re-concatenation reproduces the file
  std::string rebuilt;
  for (const auto& s : samples) rebuilt += byte_detokenize(s.full_sequence());
  std::ifstream in(path, std::ios::binary);
  const std::string original((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  CHECK(rebuilt == original);

  const auto again = load_corpus(path, 32, 32, 64);
  REQUIRE(again.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    CHECK(again[i].full_sequence() == samples[i].full_sequence());

  CHECK_THROWS_AS(load_corpus(path / "missing", 32, 32, 64), std::runtime_error);
  CHECK_THROWS_AS(load_corpus(path, 32, 32, 100000), std::runtime_error);
  fs::remove(path);
}

TEST_CASE("task manifest lines are JSON with the documented fields") {
  const auto j = nlohmann::json::parse(task_manifest_line(99, 4096, "1234"));
  CHECK(j.at("seed") == 99);
  CHECK(j.at("context_len") == 4096);
  CHECK(j.at("answer") == "1234");
}
