#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "treekv/params.hpp"
#include "treekv/tensor.hpp"

namespace treekv {

struct TrainConfig {
  enum class Mode { lm, sft };
  Mode mode = Mode::lm;
  double lr_peak = 1e-3;
  double warmup_ratio = 0.01;
  int total_steps = 2000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  int batch_size = 4;
  int grad_accum_steps = 1;
  double grad_clip = 1.0;  // global-norm clip; <= 0 disables
  std::vector<std::string> freeze;

  void validate() const;
};

/// Which running-text positions contribute to the loss.
struct TargetMask {
  std::vector<std::uint8_t> keep;

  std::int64_t size() const { return static_cast<std::int64_t>(keep.size()); }
  std::int64_t count() const;
  bool at(std::int64_t i) const { return keep[static_cast<std::size_t>(i)] != 0; }
};

/// lm: every position except the first. sft: exactly the response positions.
TargetMask build_target_mask(TrainConfig::Mode mode, std::int64_t instruction_len,
                             std::int64_t response_len);

/// Mean negative log-likelihood over masked-in positions; logits[i] is the
/// predictive distribution for targets[i].
Tensor lm_loss(const Tensor& logits, std::span<const TokenId> targets, const TargetMask& mask);

/// Decoupled-weight-decay Adam moments, keyed by parameter name.
struct AdamState {
  struct Slot {
    std::vector<double> m;
    std::vector<double> v;
  };
  std::unordered_map<std::string, Slot> slots;
};

/// One bias-corrected AdamW update over all trainable parameters.
/// step is 1-based. Halts loudly on non-finite gradients.
void adamw_step(ModelParams& params, AdamState& state, const TrainConfig& cfg, int step,
                double lr);

/// Linear warmup to lr_peak over warmup_ratio * total_steps, then cosine
/// decay to zero at total_steps.
double cosine_lr(int step, const TrainConfig& cfg);

/// Scales all accumulated gradients so their global norm is at most max_norm.
/// Returns the pre-clip norm.
double clip_grad_norm(ModelParams& params, double max_norm);

}  // namespace treekv
