#include "treekv/pipeline.hpp"

#include <cmath>
#include <future>
#include <stdexcept>

namespace treekv {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1) + 0xbf58476d1ce4e5b9ULL * (c + 1);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

SplitPolicy make_policy(const RunConfig& cfg, const ModelParams& params,
                        std::span<const TokenId> query) {
  if (cfg.policy == PolicyMode::deterministic || query.empty()) return deterministic_policy();
  const CompressorConfig ccfg = cfg.compressor_config();
  auto h_query = std::make_shared<std::vector<double>>(decoder_short_forward_repr(
      query, params, ccfg.num_heads, ccfg.head_dim, ccfg.rope_base));
  const ModelParams* p = &params;
  return [p, ccfg, h_query](std::span<const TokenId> left, std::span<const TokenId> right) {
    const std::vector<double> h_left = short_forward_repr(left, *p, ccfg);
    const std::vector<double> h_right = short_forward_repr(right, *p, ccfg);
    return policy_query_aware(h_left, h_right, *h_query);
  };
}

InjectionBundle encode_context(const ModelParams& params, const RunConfig& cfg,
                               std::span<const TokenChunk> chunks, const SplitPolicy& policy,
                               std::uint64_t seed, bool noise, bool parallel) {
  const CompressorConfig ccfg = cfg.compressor_config();
  const TreeBuildConfig tcfg = cfg.tree.build_config(noise);
  const CompressionSchedule schedule = cfg.tree.schedule();

  std::vector<EncodedChunk> encoded(chunks.size());
  if (parallel && Tape::current() == nullptr && chunks.size() > 1) {
    std::vector<std::future<EncodedChunk>> futures;
    futures.reserve(chunks.size());
    for (std::size_t i = 0; i < chunks.size(); ++i)
      futures.push_back(std::async(std::launch::async, [&, i] {
        return encode_chunk(chunks[i], tcfg, schedule, policy, params, ccfg, mix_seed(seed, i));
      }));
    for (std::size_t i = 0; i < chunks.size(); ++i) encoded[i] = futures[i].get();
  } else {
    for (std::size_t i = 0; i < chunks.size(); ++i)
      encoded[i] = encode_chunk(chunks[i], tcfg, schedule, policy, params, ccfg, mix_seed(seed, i));
  }
  return build_bundle(encoded);
}

namespace {

// The running text is fed BOS-shifted so every target has a predicting
// position. Small synthetic vocabularies without the byte specials reuse
// their last id as the prefix token.
TokenId bos_for(int vocab_size) {
  return std::min<TokenId>(kBosToken, static_cast<TokenId>(vocab_size - 1));
}

}  // namespace

SampleForward sample_loss(const ModelParams& params, const RunConfig& cfg, const Sample& sample,
                          bool with_context, std::uint64_t tree_seed, bool noise) {
  const DecoderConfig dcfg = cfg.decoder_config();
  const std::int64_t L = static_cast<std::int64_t>(sample.running_tokens.size());
  if (L < 1) throw std::invalid_argument("sample_loss: empty running text");

  InjectionBundle bundle;
  if (with_context && cfg.cross_attn_enabled && !sample.context_chunks.empty()) {
    const std::span<const TokenId> query =
        cfg.train.mode == TrainConfig::Mode::sft
            ? std::span<const TokenId>(sample.running_tokens)
                  .first(static_cast<std::size_t>(sample.instruction_len))
            : std::span<const TokenId>();
    const SplitPolicy policy = make_policy(cfg, params, query);
    bundle = encode_context(params, cfg, sample.context_chunks, policy, tree_seed, noise);
  }

  // BOS-shifted input: logits row i is the prediction for running token i
  std::vector<TokenId> input;
  input.reserve(static_cast<std::size_t>(L));
  input.push_back(bos_for(cfg.model.vocab_size));
  input.insert(input.end(), sample.running_tokens.begin(), sample.running_tokens.end() - 1);

  Tensor logits = decoder_forward(input, bundle.empty() ? nullptr : &bundle, params, dcfg);
  logits.assert_finite("sample_loss: logits");

  const TargetMask mask =
      cfg.train.mode == TrainConfig::Mode::lm
          ? build_target_mask(TrainConfig::Mode::lm, 0, L)
          : build_target_mask(TrainConfig::Mode::sft, sample.instruction_len, sample.response_len);
  if (mask.size() != L)
    throw std::invalid_argument("sample_loss: instruction/response lengths disagree with X_D");

  SampleForward out;
  out.loss = lm_loss(logits, sample.running_tokens, mask);
  out.masked_tokens = mask.count();
  return out;
}

SampleFn make_dataset(const RunConfig& cfg, bool heldout) {
  const std::uint64_t salt = heldout ? 0x48454C44ULL : 0x545241494EULL;
  const std::uint64_t base = cfg.seed;
  const std::int64_t min_chunk = std::int64_t{1} << cfg.tree.height;

  SampleFn fn;
  if (cfg.data.task == "copy") {
    const DataConfig d = cfg.data;
    const std::int64_t chunk_size = cfg.tree.chunk_size;
    fn = [d, chunk_size, base, salt](std::int64_t index) {
      std::mt19937_64 rng(mix_seed(base, salt, static_cast<std::uint64_t>(index)));
      return gen_copy_sample(d.pattern_len, d.repeats, chunk_size, rng);
    };
  } else if (cfg.data.task == "passkey") {
    const DataConfig d = cfg.data;
    const std::int64_t chunk_size = cfg.tree.chunk_size;
    fn = [d, chunk_size, base, salt](std::int64_t index) {
      std::mt19937_64 rng(mix_seed(base, salt, static_cast<std::uint64_t>(index)));
      return gen_passkey_sample(d.context_len, d.key_digits, chunk_size, rng).sample;
    };
  } else if (cfg.data.task == "corpus") {
    auto samples = std::make_shared<std::vector<Sample>>(
        load_corpus(cfg.data.corpus_path, cfg.tree.chunk_size, cfg.data.running_len,
                    cfg.data.context_len, min_chunk));
    fn = [samples](std::int64_t index) {
      return (*samples)[static_cast<std::size_t>(index) % samples->size()];
    };
  } else {
    throw std::invalid_argument("make_dataset: unknown task " + cfg.data.task);
  }

  // probe one sample so a tree/chunk mismatch fails with guidance up front
  const Sample probe = fn(0);
  for (const TokenChunk& c : probe.context_chunks)
    if (c.length() < min_chunk)
      throw std::invalid_argument(
          "make_dataset: task '" + cfg.data.task + "' produces a context chunk of " +
          std::to_string(c.length()) + " tokens, shorter than 2^height = " +
          std::to_string(min_chunk) + "; lower tree.height or enlarge the context");
  return fn;
}

std::vector<PasskeySample> make_passkey_eval_set(const RunConfig& cfg, int count) {
  std::vector<PasskeySample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x48454C44ULL, static_cast<std::uint64_t>(i)));
    out.push_back(
        gen_passkey_sample(cfg.data.context_len, cfg.data.key_digits, cfg.tree.chunk_size, rng));
  }
  return out;
}

TrainResult train_loop(ModelParams& params, const SampleFn& dataset, const RunConfig& cfg) {
  cfg.train.validate();
  params.freeze_prefixes(cfg.train.freeze);

  AdamState state;
  TrainResult result;
  result.history.reserve(static_cast<std::size_t>(cfg.train.total_steps));
  const int samples_per_step = cfg.train.batch_size * cfg.train.grad_accum_steps;
  std::int64_t index = 0;

  for (int step = 1; step <= cfg.train.total_steps; ++step) {
    params.zero_grad();
    double loss_sum = 0.0;
    for (int s = 0; s < samples_per_step; ++s, ++index) {
      const Sample sample = dataset(index);
      Tape tape;
      TapeScope scope(tape);
      const std::uint64_t tree_seed = mix_seed(cfg.seed, 0xEE, static_cast<std::uint64_t>(index));
      SampleForward fw = sample_loss(params, cfg, sample, cfg.cross_attn_enabled, tree_seed,
                                     cfg.tree.noise);
      const double loss_val = fw.loss.scalar();
      if (!std::isfinite(loss_val))
        throw std::runtime_error("train_loop: non-finite loss at step " + std::to_string(step) +
                                 ", sample index " + std::to_string(index));
      loss_sum += loss_val;
      Tensor scaled = scale(fw.loss, 1.0 / static_cast<double>(samples_per_step));
      tape.backward(scaled);
    }
    clip_grad_norm(params, cfg.train.grad_clip);
    const double lr = cosine_lr(step, cfg.train);
    adamw_step(params, state, cfg.train, step, lr);
    result.history.push_back({step, lr, loss_sum / samples_per_step});
  }
  return result;
}

double eval_mean_nll(const ModelParams& params, const RunConfig& cfg,
                     std::span<const Sample> samples, bool with_context) {
  if (samples.empty()) throw std::invalid_argument("eval_mean_nll: no samples");
  double total = 0.0;
  std::int64_t tokens = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    SampleForward fw =
        sample_loss(params, cfg, samples[i], with_context, mix_seed(cfg.seed, 0xE7A1, i),
                    /*noise=*/false);
    total += fw.loss.scalar() * static_cast<double>(fw.masked_tokens);
    tokens += fw.masked_tokens;
  }
  return total / static_cast<double>(tokens);
}

double eval_passkey_accuracy(const ModelParams& params, const RunConfig& cfg,
                             std::span<const PasskeySample> samples, bool with_context) {
  if (samples.empty()) throw std::invalid_argument("eval_passkey_accuracy: no samples");
  const DecoderConfig dcfg = cfg.decoder_config();
  int hits = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const PasskeySample& ps = samples[i];
    InjectionBundle bundle;
    if (with_context && cfg.cross_attn_enabled) {
      const std::span<const TokenId> query =
          std::span<const TokenId>(ps.sample.running_tokens)
              .first(static_cast<std::size_t>(ps.sample.instruction_len));
      const SplitPolicy policy = make_policy(cfg, params, query);
      bundle = encode_context(params, cfg, ps.sample.context_chunks, policy,
                              mix_seed(cfg.seed, 0xACC, i), /*noise=*/false);
    }
    std::vector<TokenId> prompt;
    prompt.push_back(bos_for(cfg.model.vocab_size));
    prompt.insert(prompt.end(), ps.sample.running_tokens.begin(),
                  ps.sample.running_tokens.begin() + ps.sample.instruction_len);
    const std::vector<TokenId> got =
        generate(prompt, bundle.empty() ? nullptr : &bundle, params, dcfg,
                 static_cast<int>(ps.sample.response_len));
    if (byte_detokenize(got) == ps.answer) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

}  // namespace treekv
