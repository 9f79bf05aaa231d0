#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "treekv/config.hpp"
#include "treekv/data.hpp"
#include "treekv/decoder.hpp"

namespace treekv {

// Deterministic seed derivation (splitmix64 over mixed words).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

/// Policy for one sample. query_aware compares one-layer representations of
/// each candidate child (lower model) against the query (upper model); an
/// empty query falls back to the deterministic policy.
SplitPolicy make_policy(const RunConfig& cfg, const ModelParams& params,
                        std::span<const TokenId> query);

/// Encodes every context chunk into its compressed tree KV states and
/// concatenates them into the decoder's bundle. Chunk i uses seed
/// mix_seed(seed, i); with parallel=true (inference only) chunks are encoded
/// on worker threads and combined in chunk order.
InjectionBundle encode_context(const ModelParams& params, const RunConfig& cfg,
                               std::span<const TokenChunk> chunks, const SplitPolicy& policy,
                               std::uint64_t seed, bool noise, bool parallel = false);

struct SampleForward {
  Tensor loss;
  std::int64_t masked_tokens = 0;
};

/// Loss of one sample: encode context (unless with_context is false), run the
/// decoder on BOS-shifted running text, apply the mode's target mask.
SampleForward sample_loss(const ModelParams& params, const RunConfig& cfg, const Sample& sample,
                          bool with_context, std::uint64_t tree_seed, bool noise);

using SampleFn = std::function<Sample(std::int64_t index)>;

/// Deterministic per-index sample stream for the configured task.
/// Held-out streams draw from a disjoint seed domain.
SampleFn make_dataset(const RunConfig& cfg, bool heldout);

std::vector<PasskeySample> make_passkey_eval_set(const RunConfig& cfg, int count);

struct StepStat {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<StepStat> history;
};

/// Full training loop: per optimizer step, accumulates gradients over
/// batch_size * grad_accum_steps samples (processed in order, losses scaled
/// by the sample count), clips, applies AdamW under the cosine schedule.
/// Deterministic given the config seed. Halts on non-finite loss.
TrainResult train_loop(ModelParams& params, const SampleFn& dataset, const RunConfig& cfg);

/// Mean NLL per masked token over a sample set, with epsilon fixed to zero.
double eval_mean_nll(const ModelParams& params, const RunConfig& cfg,
                     std::span<const Sample> samples, bool with_context);

inline double perplexity_from_nll(double nll) { return std::exp(nll); }

/// Greedy exact-match accuracy on passkey samples.
double eval_passkey_accuracy(const ModelParams& params, const RunConfig& cfg,
                             std::span<const PasskeySample> samples, bool with_context);

}  // namespace treekv
