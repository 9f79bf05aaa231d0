#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "treekv/tree.hpp"

namespace treekv {

// Byte-level vocabulary: ids 0..255 are raw bytes, specials sit above.
inline constexpr TokenId kPadToken = 256;
inline constexpr TokenId kBosToken = 257;
inline constexpr TokenId kSepToken = 258;
inline constexpr int kByteVocabSize = 259;

std::vector<TokenId> byte_tokenize(std::string_view bytes);
// Inverse on byte ids; special ids are dropped.
std::string byte_detokenize(std::span<const TokenId> tokens);

/// One training/evaluation item: chunked past context plus running text.
struct Sample {
  std::vector<TokenChunk> context_chunks;  // X_C, non-overlapping, ordered
  std::vector<TokenId> running_tokens;     // X_D
  std::int64_t instruction_len = 0;        // sft only
  std::int64_t response_len = 0;           // sft only

  std::int64_t context_len() const;
  // concat(X_C, X_D): must reconstruct the original sequence
  std::vector<TokenId> full_sequence() const;
};

/// Splits a token sequence into running text (the last running_len tokens)
/// and context chunks. All chunks have length chunk_size except a possibly
/// shorter first chunk (the remainder goes to the front so recent context
/// keeps full granularity). min_chunk_len guards tree construction: pass
/// 2^height to fail early with guidance instead of deep inside encoding.
Sample chunk_context(std::span<const TokenId> tokens, std::int64_t chunk_size,
                     std::int64_t running_len, std::int64_t min_chunk_len = 1);

struct PasskeySample {
  Sample sample;
  std::string answer;       // the key digits
  std::int64_t key_offset;  // absolute token offset of the needle
};

/// Letter filler with one embedded "KEY=<digits>" needle at a random offset
/// (never straddling a chunk boundary). The running text is the fixed query
/// prompt "KEY=" followed by the expected digits as the response region.
PasskeySample gen_passkey_sample(std::int64_t context_len, int key_digits,
                                 std::int64_t chunk_size, std::mt19937_64& rng);

/// Context = a random lowercase pattern repeated; running text = one more
/// repetition, so perfect context use drives the loss toward zero.
Sample gen_copy_sample(std::int64_t pattern_len, int repeats, std::int64_t chunk_size,
                       std::mt19937_64& rng);

/// Non-overlapping windows of (context_len + running_len) tokens over a raw
/// byte file, each converted via chunk_context. Stable order; the tail that
/// does not fill a window is dropped.
std::vector<Sample> load_corpus(const std::filesystem::path& path, std::int64_t chunk_size,
                                std::int64_t running_len, std::int64_t context_len,
                                std::int64_t min_chunk_len = 1);

/// JSON-lines manifest entry for a synthetic sample.
std::string task_manifest_line(std::uint64_t seed, std::int64_t context_len,
                               const std::string& answer);

}  // namespace treekv
