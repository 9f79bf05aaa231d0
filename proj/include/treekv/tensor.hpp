#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace treekv {

using Shape = std::vector<std::int64_t>;
using TokenId = std::int32_t;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Live/peak byte accounting over all tensor buffers (data + grad).
struct TensorMemStats {
  std::int64_t live_bytes = 0;
  std::int64_t peak_bytes = 0;
};
TensorMemStats tensor_mem_stats();
void tensor_mem_reset_peak();

struct TensorImpl;
class Tensor;

/// Reverse-mode gradient tape. One tape per forward pass; ops record their
/// backward closures onto the active tape (see TapeScope). Not shared across
/// threads: the active tape is thread-local.
class Tape {
 public:
  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

  // Seeds d(loss)/d(loss) = 1 and replays recorded closures in reverse.
  // The tape is consumed: a second backward() requires a fresh forward pass.
  void backward(const Tensor& loss);

  std::size_t size() const { return ops_.size(); }
  static Tape* current();

 private:
  friend class TapeScope;
  std::vector<std::function<void()>> ops_;
};

/// RAII activation of a tape on the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

/// RAII deactivation: ops inside the scope run as pure forward computation.
class TapeSuspend {
 public:
  TapeSuspend();
  ~TapeSuspend();
  TapeSuspend(const TapeSuspend&) = delete;
  TapeSuspend& operator=(const TapeSuspend&) = delete;

 private:
  Tape* prev_;
};

/// Dense row-major f64 tensor with optional gradient storage. Value-semantics
/// handle over shared storage; copies alias the same buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar_value(double v);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  std::int64_t dim(int i) const;
  std::int64_t numel() const;

  std::span<const double> data() const;
  // In-place mutation, invisible to autodiff. For parameter init / optimizer
  // updates / finite-difference probes only.
  std::span<double> raw_data();
  double scalar() const;

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();  // allocates zeros on first use
  void accumulate_grad(std::span<const double> g);
  void zero_grad();

  // Deep copy with fresh storage (gradient not copied).
  Tensor clone() const;

  void assert_finite(const char* what) const;

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor make_tensor(Shape shape);
  friend struct TensorImpl;
};

struct AttentionMask {
  enum class Kind { causal, none };
  Kind kind = Kind::none;
  std::int64_t query_len = 0;
  std::int64_t key_len = 0;

  static AttentionMask causal_mask(std::int64_t lq, std::int64_t lk) {
    return {Kind::causal, lq, lk};
  }
  static AttentionMask none_mask(std::int64_t lq, std::int64_t lk) {
    return {Kind::none, lq, lk};
  }
  // Keys a query position may attend to; lower-triangular when lq == lk.
  bool allows(std::int64_t qi, std::int64_t kj) const {
    return kind == Kind::none || kj <= qi + (key_len - query_len);
  }
};

// ---- Forward ops (all differentiable through the active tape) ----

// Affine map along the last axis: y = x @ w (+ b).
Tensor linear(const Tensor& x, const Tensor& w);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Stable softmax over the last axis.
Tensor softmax_rows(const Tensor& x);

// x * 1/sqrt(mean(x^2) + eps) * gain, per trailing-axis row.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);

// Rotary rotation of x[positions, heads, head_dim] by per-position ids.
Tensor rope_apply(const Tensor& x, std::span<const std::int64_t> position_ids, double base);

// softmax(q k^T / sqrt(head_dim) + mask) v, per head.
// q: [Lq, H, dh], k/v: [Lk, H, dh] -> [Lq, H, dh].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask);

// Row gather from an embedding table: table[V, d], ids -> [len(ids), d].
Tensor embedding(const Tensor& table, std::span<const TokenId> ids);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor silu(const Tensor& x);
Tensor scale(const Tensor& x, double c);

// Gather / concatenate along axis 0 (positions).
Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> indices);
Tensor concat_rows(std::span<const Tensor> parts);

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor sum(const Tensor& x);

// ---- Finite-difference verification ----

struct GradCheckOptions {
  double eps = 1e-5;
  // Elements checked: everything if the total is small, otherwise a
  // stratified random subsample of at least min_total_samples.
  int min_total_samples = 200;
  int min_per_tensor = 2;
  std::uint64_t seed = 12345;
};

// Max relative error between reverse-mode gradients and central differences
// of the scalar function f over the given parameters.
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                  const GradCheckOptions& opts = {});
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps);

}  // namespace treekv
