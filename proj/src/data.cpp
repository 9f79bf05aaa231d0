#include "treekv/data.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace treekv {

std::vector<TokenId> byte_tokenize(std::string_view bytes) {
  std::vector<TokenId> out;
  out.reserve(bytes.size());
  for (unsigned char c : bytes) out.push_back(static_cast<TokenId>(c));
  return out;
}

std::string byte_detokenize(std::span<const TokenId> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens)
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  return out;
}

std::int64_t Sample::context_len() const {
  std::int64_t n = 0;
  for (const auto& c : context_chunks) n += c.length();
  return n;
}

std::vector<TokenId> Sample::full_sequence() const {
  std::vector<TokenId> out;
  out.reserve(static_cast<std::size_t>(context_len()) + running_tokens.size());
  for (const auto& c : context_chunks) out.insert(out.end(), c.tokens.begin(), c.tokens.end());
  out.insert(out.end(), running_tokens.begin(), running_tokens.end());
  return out;
}

namespace {

// chunk lengths for a context of ctx_len: remainder-to-front
std::vector<std::int64_t> chunk_lengths(std::int64_t ctx_len, std::int64_t chunk_size) {
  const std::int64_t n = (ctx_len + chunk_size - 1) / chunk_size;
  std::vector<std::int64_t> lens(static_cast<std::size_t>(n), chunk_size);
  if (n > 0) lens[0] = ctx_len - (n - 1) * chunk_size;
  return lens;
}

}  // namespace

Sample chunk_context(std::span<const TokenId> tokens, std::int64_t chunk_size,
                     std::int64_t running_len, std::int64_t min_chunk_len) {
  if (chunk_size < 1) throw std::invalid_argument("chunk_context: chunk_size must be >= 1");
  if (running_len < 1) throw std::invalid_argument("chunk_context: running_len must be >= 1");
  const std::int64_t total = static_cast<std::int64_t>(tokens.size());
  if (total <= running_len)
    throw std::invalid_argument("chunk_context: sequence of " + std::to_string(total) +
                                " tokens leaves no context for running_len " +
                                std::to_string(running_len));
  const std::int64_t ctx_len = total - running_len;
  const auto lens = chunk_lengths(ctx_len, chunk_size);
  for (std::int64_t len : lens)
    if (len < min_chunk_len)
      throw std::invalid_argument(
          "chunk_context: context of " + std::to_string(ctx_len) + " tokens yields a chunk of " +
          std::to_string(len) + " < " + std::to_string(min_chunk_len) +
          " tokens; provide more context, lower the tree height, or adjust chunk_size");

  Sample s;
  std::int64_t off = 0;
  for (std::int64_t len : lens) {
    TokenChunk c;
    c.offset = off;
    c.tokens.assign(tokens.begin() + off, tokens.begin() + off + len);
    s.context_chunks.push_back(std::move(c));
    off += len;
  }
  s.running_tokens.assign(tokens.begin() + ctx_len, tokens.end());
  return s;
}

namespace {

char random_letter(std::mt19937_64& rng) {
  return static_cast<char>('a' + static_cast<int>(rng() % 26));
}

}  // namespace

PasskeySample gen_passkey_sample(std::int64_t context_len, int key_digits,
                                 std::int64_t chunk_size, std::mt19937_64& rng) {
  if (key_digits < 1) throw std::invalid_argument("gen_passkey_sample: key_digits must be >= 1");
  std::string digits;
  for (int i = 0; i < key_digits; ++i)
    digits.push_back(static_cast<char>('0' + static_cast<int>(rng() % 10)));
  const std::string needle = "KEY=" + digits;
  const std::int64_t needle_len = static_cast<std::int64_t>(needle.size());

  const auto lens = chunk_lengths(context_len, chunk_size);
  // pick a chunk the needle fits inside, and an offset within it
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < lens.size(); ++i)
    if (lens[i] >= needle_len + 2) candidates.push_back(i);
  if (candidates.empty())
    throw std::invalid_argument("gen_passkey_sample: no chunk can hold the needle");
  const std::size_t chunk_idx = candidates[rng() % candidates.size()];
  std::int64_t chunk_start = 0;
  for (std::size_t i = 0; i < chunk_idx; ++i) chunk_start += lens[i];
  const std::int64_t slack = lens[chunk_idx] - needle_len;
  const std::int64_t key_offset =
      chunk_start + 1 + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(slack - 1));

  std::string context(static_cast<std::size_t>(context_len), ' ');
  for (auto& c : context) c = random_letter(rng);
  for (std::int64_t i = 0; i < needle_len; ++i)
    context[static_cast<std::size_t>(key_offset + i)] = needle[static_cast<std::size_t>(i)];

  const std::string instruction = "KEY=";
  const std::string running = instruction + digits;

  const std::vector<TokenId> all = byte_tokenize(context + running);
  PasskeySample out;
  out.sample = chunk_context(all, chunk_size, static_cast<std::int64_t>(running.size()));
  out.sample.instruction_len = static_cast<std::int64_t>(instruction.size());
  out.sample.response_len = static_cast<std::int64_t>(digits.size());
  out.answer = digits;
  out.key_offset = key_offset;
  return out;
}

Sample gen_copy_sample(std::int64_t pattern_len, int repeats, std::int64_t chunk_size,
                       std::mt19937_64& rng) {
  if (pattern_len < 1) throw std::invalid_argument("gen_copy_sample: pattern_len must be >= 1");
  if (repeats < 1) throw std::invalid_argument("gen_copy_sample: repeats must be >= 1");
  std::string pattern(static_cast<std::size_t>(pattern_len), ' ');
  for (auto& c : pattern) c = random_letter(rng);
  std::string text;
  text.reserve(static_cast<std::size_t>(pattern_len) * static_cast<std::size_t>(repeats + 1));
  for (int r = 0; r < repeats + 1; ++r) text += pattern;  // last repetition is the running text
  const std::vector<TokenId> all = byte_tokenize(text);
  return chunk_context(all, chunk_size, pattern_len);
}

std::vector<Sample> load_corpus(const std::filesystem::path& path, std::int64_t chunk_size,
                                std::int64_t running_len, std::int64_t context_len,
                                std::int64_t min_chunk_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_corpus: cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();

  const std::int64_t window = context_len + running_len;
  if (static_cast<std::int64_t>(bytes.size()) < window)
    throw std::runtime_error("load_corpus: file " + path.string() + " holds " +
                             std::to_string(bytes.size()) + " bytes, shorter than one window of " +
                             std::to_string(window));

  std::vector<Sample> out;
  const std::vector<TokenId> tokens = byte_tokenize(bytes);
  for (std::int64_t start = 0; start + window <= static_cast<std::int64_t>(tokens.size());
       start += window) {
    const std::span<const TokenId> w(tokens.data() + start, static_cast<std::size_t>(window));
    out.push_back(chunk_context(w, chunk_size, running_len, min_chunk_len));
  }
  return out;
}

std::string task_manifest_line(std::uint64_t seed, std::int64_t context_len,
                               const std::string& answer) {
  nlohmann::json j;
  j["seed"] = seed;
  j["context_len"] = context_len;
  j["answer"] = answer;
  return j.dump();
}

}  // namespace treekv
