#include "treekv/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace treekv {

void TrainConfig::validate() const {
  if (lr_peak <= 0) throw std::invalid_argument("train.lr_peak: must be > 0");
  if (warmup_ratio < 0 || warmup_ratio >= 1)
    throw std::invalid_argument("train.warmup_ratio: must be in [0,1)");
  if (total_steps < 1) throw std::invalid_argument("train.total_steps: must be >= 1");
  if (adam_beta1 <= 0 || adam_beta1 >= 1 || adam_beta2 <= 0 || adam_beta2 >= 1)
    throw std::invalid_argument("train.adam_beta1/adam_beta2: must be in (0,1)");
  if (weight_decay < 0) throw std::invalid_argument("train.weight_decay: must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train.batch_size: must be >= 1");
  if (grad_accum_steps < 1) throw std::invalid_argument("train.grad_accum_steps: must be >= 1");
}

std::int64_t TargetMask::count() const {
  std::int64_t n = 0;
  for (auto b : keep) n += b ? 1 : 0;
  return n;
}

TargetMask build_target_mask(TrainConfig::Mode mode, std::int64_t instruction_len,
                             std::int64_t response_len) {
  if (instruction_len < 0 || response_len < 0)
    throw std::invalid_argument("build_target_mask: negative length");
  const std::int64_t total = instruction_len + response_len;
  TargetMask m;
  m.keep.assign(static_cast<std::size_t>(total), 0);
  if (mode == TrainConfig::Mode::lm) {
    if (total < 2)
      throw std::invalid_argument("build_target_mask: lm mode needs at least 2 positions");
    for (std::int64_t i = 1; i < total; ++i) m.keep[static_cast<std::size_t>(i)] = 1;
  } else {
    if (response_len < 1)
      throw std::invalid_argument("build_target_mask: sft mode needs response_len >= 1");
    for (std::int64_t i = instruction_len; i < total; ++i) m.keep[static_cast<std::size_t>(i)] = 1;
  }
  return m;
}

Tensor lm_loss(const Tensor& logits, std::span<const TokenId> targets, const TargetMask& mask) {
  if (logits.ndim() != 2) throw std::invalid_argument("lm_loss: logits must be [len, vocab]");
  const std::int64_t L = logits.dim(0), V = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != L || mask.size() != L)
    throw std::invalid_argument("lm_loss: lengths disagree");
  const std::int64_t n = mask.count();
  if (n == 0) throw std::invalid_argument("lm_loss: mask selects no positions");

  const double* ld = logits.data().data();
  double total = 0.0;
  for (std::int64_t t = 0; t < L; ++t) {
    if (!mask.at(t)) continue;
    const TokenId target = targets[static_cast<std::size_t>(t)];
    if (target < 0 || target >= V)
      throw std::invalid_argument("lm_loss: target id out of vocab");
    const double* row = ld + t * V;
    double mx = row[0];
    for (std::int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
    total += (std::log(z) + mx) - row[target];
  }
  Tensor loss = Tensor::scalar_value(total / static_cast<double>(n));

  if (Tape::current() && logits.requires_grad()) {
    loss.set_requires_grad(true);
    Tensor lc = logits, out = loss;
    std::vector<TokenId> tg(targets.begin(), targets.end());
    TargetMask mk = mask;
    Tape::current()->record([lc, out, tg = std::move(tg), mk = std::move(mk), L, V, n]() mutable {
      const double dy = out.grad()[0] / static_cast<double>(n);
      const double* ld2 = lc.data().data();
      double* dl = lc.grad_mut().data();
      for (std::int64_t t = 0; t < L; ++t) {
        if (!mk.at(t)) continue;
        const double* row = ld2 + t * V;
        double* drow = dl + t * V;
        double mx = row[0];
        for (std::int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
        for (std::int64_t j = 0; j < V; ++j) drow[j] += dy * std::exp(row[j] - mx) / z;
        drow[tg[static_cast<std::size_t>(t)]] -= dy;
      }
    });
  }
  return loss;
}

void adamw_step(ModelParams& params, AdamState& state, const TrainConfig& cfg, int step,
                double lr) {
  if (step < 1) throw std::invalid_argument("adamw_step: step is 1-based");
  constexpr double kAdamEps = 1e-8;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, step);
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, step);
  for (auto& [name, p] : params.items()) {
    if (!p.requires_grad()) continue;
    auto& slot = state.slots[name];
    const std::size_t sz = static_cast<std::size_t>(p.numel());
    if (slot.m.empty()) {
      slot.m.assign(sz, 0.0);
      slot.v.assign(sz, 0.0);
    }
    const bool has_grad = p.has_grad();
    const double* g = has_grad ? p.grad().data() : nullptr;
    double* w = p.raw_data().data();
    for (std::size_t i = 0; i < sz; ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      if (!std::isfinite(gi))
        throw std::runtime_error("adamw_step: non-finite gradient in " + name + " at step " +
                                 std::to_string(step));
      slot.m[i] = cfg.adam_beta1 * slot.m[i] + (1.0 - cfg.adam_beta1) * gi;
      slot.v[i] = cfg.adam_beta2 * slot.v[i] + (1.0 - cfg.adam_beta2) * gi * gi;
      const double mh = slot.m[i] / bc1;
      const double vh = slot.v[i] / bc2;
      w[i] -= lr * (mh / (std::sqrt(vh) + kAdamEps) + cfg.weight_decay * w[i]);
    }
  }
}

double cosine_lr(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " outside [0," +
                                std::to_string(cfg.total_steps) + "]");
  const int warmup = static_cast<int>(std::floor(cfg.warmup_ratio * cfg.total_steps));
  if (warmup > 0 && step < warmup)
    return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress =
      cfg.total_steps == warmup
          ? 1.0
          : static_cast<double>(step - warmup) / static_cast<double>(cfg.total_steps - warmup);
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_grad_norm(ModelParams& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : params.items()) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [name, p] : params.items()) {
      if (!p.requires_grad() || !p.has_grad()) continue;
      for (double& g : p.grad_mut()) g *= scale;
    }
  }
  return norm;
}

}  // namespace treekv
