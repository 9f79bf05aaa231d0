#include "treekv/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace treekv {

namespace {

std::atomic<std::int64_t> g_live_bytes{0};
std::atomic<std::int64_t> g_peak_bytes{0};

void mem_add(std::int64_t bytes) {
  const std::int64_t live = g_live_bytes.fetch_add(bytes) + bytes;
  std::int64_t peak = g_peak_bytes.load();
  while (live > peak && !g_peak_bytes.compare_exchange_weak(peak, live)) {
  }
}

void mem_release(std::int64_t bytes) { g_live_bytes.fetch_sub(bytes); }

thread_local Tape* t_active_tape = nullptr;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

TensorMemStats tensor_mem_stats() { return {g_live_bytes.load(), g_peak_bytes.load()}; }
void tensor_mem_reset_peak() { g_peak_bytes.store(g_live_bytes.load()); }

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;

  TensorImpl(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    mem_add(static_cast<std::int64_t>(data.size()) * 8);
  }
  ~TensorImpl() {
    mem_release(static_cast<std::int64_t>(data.size() + grad.size()) * 8);
  }
  TensorImpl(const TensorImpl&) = delete;
  TensorImpl& operator=(const TensorImpl&) = delete;

  void ensure_grad() {
    if (grad.empty()) {
      grad.assign(data.size(), 0.0);
      mem_add(static_cast<std::int64_t>(grad.size()) * 8);
    }
  }
};

Tape* Tape::current() { return t_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = prev_; }

TapeSuspend::TapeSuspend() : prev_(t_active_tape) { t_active_tape = nullptr; }
TapeSuspend::~TapeSuspend() { t_active_tape = prev_; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) fail("Tape::backward: loss must be a scalar");
  if (!loss.requires_grad()) fail("Tape::backward: loss does not depend on any tracked tensor");
  const double one = 1.0;
  const_cast<Tensor&>(loss).accumulate_grad(std::span<const double>(&one, 1));
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

// ---- Tensor basics ----

Tensor make_tensor(Shape shape) {
  const auto n = shape_numel(shape);
  return Tensor(std::make_shared<TensorImpl>(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t = make_tensor(std::move(shape));
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = make_tensor(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    fail("Tensor::from_data: shape " + shape_str(shape) + " does not match data length " +
         std::to_string(data.size()));
  Tensor t(std::make_shared<TensorImpl>(std::move(shape), std::move(data)));
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar_value(double v) { return from_data({1}, {v}); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  Tensor t = make_tensor(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.impl_->data) v = dist(rng);
  t.impl_->requires_grad = requires_grad;
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::ndim() const { return static_cast<int>(impl_->shape.size()); }
std::int64_t Tensor::dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::raw_data() { return impl_->data; }

double Tensor::scalar() const {
  if (numel() != 1) fail("Tensor::scalar: tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::set_requires_grad(bool rg) { impl_->requires_grad = rg; }
bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) fail("Tensor::grad: no gradient accumulated");
  return impl_->grad;
}

std::span<double> Tensor::grad_mut() {
  impl_->ensure_grad();
  return impl_->grad;
}

void Tensor::accumulate_grad(std::span<const double> g) {
  if (static_cast<std::int64_t>(g.size()) != numel())
    fail("Tensor::accumulate_grad: size mismatch");
  impl_->ensure_grad();
  double* dst = impl_->grad.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t = from_data(impl_->shape, impl_->data);
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

void Tensor::assert_finite(const char* what) const {
  for (double v : impl_->data)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string(what) + ": non-finite value in tensor " +
                               shape_str(impl_->shape));
}

// ---- Kernel helpers ----

namespace {

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// C[m,n] += A[m,k] B[k,n]
void matmul_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,n] += A[m,k] B[n,k]^T
void matmul_acc_bt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                   std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T B[m,n]
void matmul_acc_at(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                   std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * n;
      for (std::int64_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

std::int64_t last_dim(const Tensor& t) { return t.shape().back(); }
std::int64_t row_count(const Tensor& t) { return t.numel() / last_dim(t); }

}  // namespace

// ---- linear ----

static Tensor linear_impl(const Tensor& x, const Tensor& w, const Tensor* b) {
  if (x.ndim() < 1 || w.ndim() != 2) fail("linear: x must have >=1 dim, w exactly 2");
  const std::int64_t d_in = last_dim(x);
  if (w.dim(0) != d_in)
    fail("linear: inner dimensions disagree, x " + shape_str(x.shape()) + " vs w " +
         shape_str(w.shape()));
  const std::int64_t d_out = w.dim(1);
  if (b && (b->ndim() != 1 || b->dim(0) != d_out)) fail("linear: bias shape mismatch");

  const std::int64_t rows = row_count(x);
  Shape out_shape = x.shape();
  out_shape.back() = d_out;
  Tensor y = Tensor::zeros(std::move(out_shape));
  matmul_acc(x.data().data(), w.data().data(), y.raw_data().data(), rows, d_in, d_out);
  if (b) {
    double* yd = y.raw_data().data();
    const double* bd = b->data().data();
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < d_out; ++j) yd[i * d_out + j] += bd[j];
  }

  if (recording(b ? std::initializer_list<const Tensor*>{&x, &w, b}
                  : std::initializer_list<const Tensor*>{&x, &w})) {
    y.set_requires_grad(true);
    Tensor xc = x, wc = w, yc = y;
    Tensor bc = b ? *b : Tensor();
    Tape::current()->record([xc, wc, bc, yc, rows, d_in, d_out]() mutable {
      const double* dy = yc.grad().data();
      if (xc.requires_grad())
        matmul_acc_bt(dy, wc.data().data(), xc.grad_mut().data(), rows, d_out, d_in);
      if (wc.requires_grad())
        matmul_acc_at(xc.data().data(), dy, wc.grad_mut().data(), rows, d_in, d_out);
      if (bc.defined() && bc.requires_grad()) {
        double* db = bc.grad_mut().data();
        for (std::int64_t i = 0; i < rows; ++i)
          for (std::int64_t j = 0; j < d_out; ++j) db[j] += dy[i * d_out + j];
      }
    });
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w) { return linear_impl(x, w, nullptr); }
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return linear_impl(x, w, &b); }

// ---- softmax ----

Tensor softmax_rows(const Tensor& x) {
  const std::int64_t n = last_dim(x);
  const std::int64_t rows = row_count(x);
  Tensor y = Tensor::zeros(x.shape());
  const double* xd = x.data().data();
  double* yd = y.raw_data().data();
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* xi = xd + i * n;
    double* yi = yd + i * n;
    double mx = xi[0];
    for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      z += yi[j];
    }
    for (std::int64_t j = 0; j < n; ++j) yi[j] /= z;
  }

  if (recording({&x})) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    Tape::current()->record([xc, yc, rows, n]() mutable {
      const double* p = yc.data().data();
      const double* dy = yc.grad().data();
      double* dx = xc.grad_mut().data();
      for (std::int64_t i = 0; i < rows; ++i) {
        const double* pi = p + i * n;
        const double* dyi = dy + i * n;
        double dot = 0.0;
        for (std::int64_t j = 0; j < n; ++j) dot += dyi[j] * pi[j];
        double* dxi = dx + i * n;
        for (std::int64_t j = 0; j < n; ++j) dxi[j] += pi[j] * (dyi[j] - dot);
      }
    });
  }
  return y;
}

// ---- rms_norm ----

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  const std::int64_t d = last_dim(x);
  if (gain.ndim() != 1 || gain.dim(0) != d)
    fail("rms_norm: gain shape " + shape_str(gain.shape()) + " does not match last dim " +
         std::to_string(d));
  const std::int64_t rows = row_count(x);
  Tensor y = Tensor::zeros(x.shape());
  std::vector<double> inv_rms(rows);
  const double* xd = x.data().data();
  const double* gd = gain.data().data();
  double* yd = y.raw_data().data();
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* xi = xd + i * d;
    double ms = 0.0;
    for (std::int64_t j = 0; j < d; ++j) ms += xi[j] * xi[j];
    const double r = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    inv_rms[i] = r;
    double* yi = yd + i * d;
    for (std::int64_t j = 0; j < d; ++j) yi[j] = xi[j] * r * gd[j];
  }

  if (recording({&x, &gain})) {
    y.set_requires_grad(true);
    Tensor xc = x, gc = gain, yc = y;
    auto r = std::make_shared<std::vector<double>>(std::move(inv_rms));
    Tape::current()->record([xc, gc, yc, r, rows, d]() mutable {
      const double* dy = yc.grad().data();
      const double* xd2 = xc.data().data();
      const double* gd2 = gc.data().data();
      const bool need_dx = xc.requires_grad();
      const bool need_dg = gc.requires_grad();
      double* dx = need_dx ? xc.grad_mut().data() : nullptr;
      double* dg = need_dg ? gc.grad_mut().data() : nullptr;
      for (std::int64_t i = 0; i < rows; ++i) {
        const double ri = (*r)[i];
        const double* xi = xd2 + i * d;
        const double* dyi = dy + i * d;
        if (need_dx) {
          double dot = 0.0;
          for (std::int64_t j = 0; j < d; ++j) dot += dyi[j] * gd2[j] * xi[j];
          const double k = ri * ri * ri * dot / static_cast<double>(d);
          double* dxi = dx + i * d;
          for (std::int64_t j = 0; j < d; ++j) dxi[j] += dyi[j] * gd2[j] * ri - xi[j] * k;
        }
        if (need_dg)
          for (std::int64_t j = 0; j < d; ++j) dg[j] += dyi[j] * xi[j] * ri;
      }
    });
  }
  return y;
}

// ---- rope ----

Tensor rope_apply(const Tensor& x, std::span<const std::int64_t> position_ids, double base) {
  if (x.ndim() != 3) fail("rope_apply: expected [positions, heads, head_dim]");
  const std::int64_t P = x.dim(0), H = x.dim(1), dh = x.dim(2);
  if (dh % 2 != 0) fail("rope_apply: head_dim must be even, got " + std::to_string(dh));
  if (static_cast<std::int64_t>(position_ids.size()) != P)
    fail("rope_apply: position_ids length " + std::to_string(position_ids.size()) +
         " != positions " + std::to_string(P));

  const std::int64_t half = dh / 2;
  std::vector<double> inv_freq(half);
  for (std::int64_t i = 0; i < half; ++i)
    inv_freq[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));

  Tensor y = Tensor::zeros(x.shape());
  const double* xd = x.data().data();
  double* yd = y.raw_data().data();
  for (std::int64_t p = 0; p < P; ++p) {
    const double pos = static_cast<double>(position_ids[p]);
    for (std::int64_t h = 0; h < H; ++h) {
      const double* xv = xd + (p * H + h) * dh;
      double* yv = yd + (p * H + h) * dh;
      for (std::int64_t i = 0; i < half; ++i) {
        const double theta = pos * inv_freq[i];
        const double c = std::cos(theta), s = std::sin(theta);
        const double a = xv[i], b = xv[i + half];
        yv[i] = a * c - b * s;
        yv[i + half] = a * s + b * c;
      }
    }
  }

  if (recording({&x})) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    std::vector<std::int64_t> ids(position_ids.begin(), position_ids.end());
    auto freqs = std::make_shared<std::vector<double>>(std::move(inv_freq));
    Tape::current()->record([xc, yc, ids = std::move(ids), freqs, P, H, half, dh]() mutable {
      const double* dy = yc.grad().data();
      double* dx = xc.grad_mut().data();
      for (std::int64_t p = 0; p < P; ++p) {
        const double pos = static_cast<double>(ids[p]);
        for (std::int64_t h = 0; h < H; ++h) {
          const double* dyv = dy + (p * H + h) * dh;
          double* dxv = dx + (p * H + h) * dh;
          for (std::int64_t i = 0; i < half; ++i) {
            const double theta = pos * (*freqs)[i];
            const double c = std::cos(theta), s = std::sin(theta);
            dxv[i] += dyv[i] * c + dyv[i + half] * s;
            dxv[i + half] += -dyv[i] * s + dyv[i + half] * c;
          }
        }
      }
    });
  }
  return y;
}

// ---- attention ----

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask) {
  if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3)
    fail("attention: q/k/v must be [len, heads, head_dim]");
  const std::int64_t Lq = q.dim(0), H = q.dim(1), dh = q.dim(2);
  const std::int64_t Lk = k.dim(0);
  if (k.dim(1) != H || v.dim(1) != H || k.dim(2) != dh || v.dim(2) != dh)
    fail("attention: head count / head dim disagree between q " + shape_str(q.shape()) + ", k " +
         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  if (v.dim(0) != Lk) fail("attention: k and v lengths disagree");
  if (Lk == 0) fail("attention: empty key set; callers must skip cross-attention when no context exists");
  if (mask.query_len != Lq || mask.key_len != Lk) fail("attention: mask lengths disagree with q/k");

  const double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out = Tensor::zeros(q.shape());
  const bool rec = recording({&q, &k, &v});

  // probs stored [H, Lq, Lk] only when a backward pass will need them
  std::shared_ptr<std::vector<double>> probs;
  if (rec) probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(H * Lq * Lk));

  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  double* od = out.raw_data().data();
  std::vector<double> row(static_cast<std::size_t>(Lk));
  for (std::int64_t h = 0; h < H; ++h) {
    for (std::int64_t i = 0; i < Lq; ++i) {
      const double* qv = qd + (i * H + h) * dh;
      const std::int64_t j_end = mask.kind == AttentionMask::Kind::none
                                     ? Lk
                                     : std::min(Lk, i + (Lk - Lq) + 1);
      if (j_end <= 0) fail("attention: causal mask leaves a query with no keys");
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < j_end; ++j) {
        const double* kv = kd + (j * H + h) * dh;
        double s = 0.0;
        for (std::int64_t d = 0; d < dh; ++d) s += qv[d] * kv[d];
        s *= scale_f;
        row[static_cast<std::size_t>(j)] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::int64_t j = 0; j < j_end; ++j) {
        row[static_cast<std::size_t>(j)] = std::exp(row[static_cast<std::size_t>(j)] - mx);
        z += row[static_cast<std::size_t>(j)];
      }
      double* ov = od + (i * H + h) * dh;
      for (std::int64_t j = 0; j < j_end; ++j) {
        const double p = row[static_cast<std::size_t>(j)] / z;
        const double* vv = vd + (j * H + h) * dh;
        for (std::int64_t d = 0; d < dh; ++d) ov[d] += p * vv[d];
        if (rec) (*probs)[static_cast<std::size_t>((h * Lq + i) * Lk + j)] = p;
      }
    }
  }

  if (rec) {
    out.set_requires_grad(true);
    Tensor qc = q, kc = k, vc = v, oc = out;
    Tape::current()->record([qc, kc, vc, oc, probs, Lq, Lk, H, dh, scale_f]() mutable {
      const double* dout = oc.grad().data();
      const double* qd2 = qc.data().data();
      const double* kd2 = kc.data().data();
      const double* vd2 = vc.data().data();
      const bool need_dq = qc.requires_grad(), need_dk = kc.requires_grad(),
                 need_dv = vc.requires_grad();
      double* dq = need_dq ? qc.grad_mut().data() : nullptr;
      double* dk = need_dk ? kc.grad_mut().data() : nullptr;
      double* dv = need_dv ? vc.grad_mut().data() : nullptr;
      std::vector<double> ds(static_cast<std::size_t>(Lk));
      for (std::int64_t h = 0; h < H; ++h) {
        for (std::int64_t i = 0; i < Lq; ++i) {
          const double* p = probs->data() + (h * Lq + i) * Lk;
          const double* dov = dout + (i * H + h) * dh;
          // dp and the softmax Jacobian
          double dot = 0.0;
          for (std::int64_t j = 0; j < Lk; ++j) {
            if (p[j] == 0.0) {
              ds[static_cast<std::size_t>(j)] = 0.0;
              continue;
            }
            const double* vv = vd2 + (j * H + h) * dh;
            double dp = 0.0;
            for (std::int64_t d = 0; d < dh; ++d) dp += dov[d] * vv[d];
            ds[static_cast<std::size_t>(j)] = dp;
            dot += dp * p[j];
          }
          for (std::int64_t j = 0; j < Lk; ++j) {
            if (p[j] == 0.0) continue;
            const double dsj = p[j] * (ds[static_cast<std::size_t>(j)] - dot) * scale_f;
            const double* qv = qd2 + (i * H + h) * dh;
            const double* kv = kd2 + (j * H + h) * dh;
            if (need_dv) {
              double* dvv = dv + (j * H + h) * dh;
              for (std::int64_t d = 0; d < dh; ++d) dvv[d] += p[j] * dov[d];
            }
            if (need_dq) {
              double* dqv = dq + (i * H + h) * dh;
              for (std::int64_t d = 0; d < dh; ++d) dqv[d] += dsj * kv[d];
            }
            if (need_dk) {
              double* dkv = dk + (j * H + h) * dh;
              for (std::int64_t d = 0; d < dh; ++d) dkv[d] += dsj * qv[d];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- embedding ----

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  if (table.ndim() != 2) fail("embedding: table must be [vocab, d]");
  const std::int64_t V = table.dim(0), d = table.dim(1);
  const std::int64_t L = static_cast<std::int64_t>(ids.size());
  if (L == 0) fail("embedding: empty token sequence");
  Tensor y = Tensor::zeros({L, d});
  const double* td = table.data().data();
  double* yd = y.raw_data().data();
  for (std::int64_t i = 0; i < L; ++i) {
    const TokenId id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= V)
      fail("embedding: token id " + std::to_string(id) + " out of vocab [0," + std::to_string(V) +
           ")");
    std::memcpy(yd + i * d, td + static_cast<std::int64_t>(id) * d,
                static_cast<std::size_t>(d) * sizeof(double));
  }

  if (recording({&table})) {
    y.set_requires_grad(true);
    Tensor tc = table, yc = y;
    std::vector<TokenId> idv(ids.begin(), ids.end());
    Tape::current()->record([tc, yc, idv = std::move(idv), d]() mutable {
      const double* dy = yc.grad().data();
      double* dt = tc.grad_mut().data();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        double* row = dt + static_cast<std::int64_t>(idv[i]) * d;
        const double* dyr = dy + static_cast<std::int64_t>(i) * d;
        for (std::int64_t j = 0; j < d; ++j) row[j] += dyr[j];
      }
    });
  }
  return y;
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y = Tensor::zeros(a.shape());
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* yd = y.raw_data().data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) yd[i] = ad[i] + bd[i];
  if (recording({&a, &b})) {
    y.set_requires_grad(true);
    Tensor ac = a, bc = b, yc = y;
    Tape::current()->record([ac, bc, yc]() mutable {
      auto dy = yc.grad();
      if (ac.requires_grad()) ac.accumulate_grad(dy);
      if (bc.requires_grad()) bc.accumulate_grad(dy);
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y = Tensor::zeros(a.shape());
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* yd = y.raw_data().data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) yd[i] = ad[i] * bd[i];
  if (recording({&a, &b})) {
    y.set_requires_grad(true);
    Tensor ac = a, bc = b, yc = y;
    Tape::current()->record([ac, bc, yc, n]() mutable {
      const double* dy = yc.grad().data();
      if (ac.requires_grad()) {
        double* da = ac.grad_mut().data();
        const double* bd2 = bc.data().data();
        for (std::int64_t i = 0; i < n; ++i) da[i] += dy[i] * bd2[i];
      }
      if (bc.requires_grad()) {
        double* db = bc.grad_mut().data();
        const double* ad2 = ac.data().data();
        for (std::int64_t i = 0; i < n; ++i) db[i] += dy[i] * ad2[i];
      }
    });
  }
  return y;
}

Tensor silu(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  const double* xd = x.data().data();
  double* yd = y.raw_data().data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-xd[i]));
    yd[i] = xd[i] * s;
  }
  if (recording({&x})) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    Tape::current()->record([xc, yc, n]() mutable {
      const double* dy = yc.grad().data();
      const double* xd2 = xc.data().data();
      double* dx = xc.grad_mut().data();
      for (std::int64_t i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-xd2[i]));
        dx[i] += dy[i] * s * (1.0 + xd2[i] * (1.0 - s));
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& x, double c) {
  Tensor y = Tensor::zeros(x.shape());
  const double* xd = x.data().data();
  double* yd = y.raw_data().data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) yd[i] = xd[i] * c;
  if (recording({&x})) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    Tape::current()->record([xc, yc, c, n]() mutable {
      const double* dy = yc.grad().data();
      double* dx = xc.grad_mut().data();
      for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i] * c;
    });
  }
  return y;
}

// ---- gather / concat / reshape / sum ----

Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> indices) {
  if (x.ndim() < 1) fail("gather_rows: scalar input");
  const std::int64_t L = x.dim(0);
  const std::int64_t stride = x.numel() / L;
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<std::int64_t>(indices.size());
  Tensor y = Tensor::zeros(std::move(out_shape));
  const double* xd = x.data().data();
  double* yd = y.raw_data().data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::int64_t src = indices[i];
    if (src < 0 || src >= L) fail("gather_rows: index out of range");
    std::memcpy(yd + static_cast<std::int64_t>(i) * stride, xd + src * stride,
                static_cast<std::size_t>(stride) * sizeof(double));
  }
  if (recording({&x})) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    std::vector<std::int64_t> idx(indices.begin(), indices.end());
    Tape::current()->record([xc, yc, idx = std::move(idx), stride]() mutable {
      const double* dy = yc.grad().data();
      double* dx = xc.grad_mut().data();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double* dst = dx + idx[i] * stride;
        const double* src = dy + static_cast<std::int64_t>(i) * stride;
        for (std::int64_t j = 0; j < stride; ++j) dst[j] += src[j];
      }
    });
  }
  return y;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) fail("concat_rows: no parts");
  Shape tail = parts[0].shape();
  std::int64_t total = 0;
  const std::int64_t stride = parts[0].numel() / parts[0].dim(0);
  for (const Tensor& p : parts) {
    if (p.ndim() != parts[0].ndim() || p.numel() / p.dim(0) != stride)
      fail("concat_rows: trailing dimensions disagree");
    total += p.dim(0);
  }
  tail[0] = total;
  Tensor y = Tensor::zeros(std::move(tail));
  double* yd = y.raw_data().data();
  std::int64_t off = 0;
  bool any_rg = false;
  for (const Tensor& p : parts) {
    std::memcpy(yd + off, p.data().data(), static_cast<std::size_t>(p.numel()) * sizeof(double));
    off += p.numel();
    any_rg = any_rg || p.requires_grad();
  }
  if (Tape::current() && any_rg) {
    y.set_requires_grad(true);
    std::vector<Tensor> pc(parts.begin(), parts.end());
    Tensor yc = y;
    Tape::current()->record([pc = std::move(pc), yc]() mutable {
      const double* dy = yc.grad().data();
      std::int64_t off2 = 0;
      for (Tensor& p : pc) {
        if (p.requires_grad())
          p.accumulate_grad(std::span<const double>(dy + off2, static_cast<std::size_t>(p.numel())));
        off2 += p.numel();
      }
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    fail("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
         shape_str(new_shape));
  Tensor y = Tensor::from_data(std::move(new_shape),
                               std::vector<double>(x.data().begin(), x.data().end()));
  if (recording({&x})) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    Tape::current()->record([xc, yc]() mutable { xc.accumulate_grad(yc.grad()); });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor y = Tensor::scalar_value(acc);
  if (recording({&x})) {
    y.set_requires_grad(true);
    Tensor xc = x, yc = y;
    Tape::current()->record([xc, yc]() mutable {
      const double dy = yc.grad()[0];
      double* dx = xc.grad_mut().data();
      const std::int64_t n = xc.numel();
      for (std::int64_t i = 0; i < n; ++i) dx[i] += dy;
    });
  }
  return y;
}

// ---- grad_check ----

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                  const GradCheckOptions& opts) {
  for (Tensor& p : params) p.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = f();
    if (!std::isfinite(loss.scalar()))
      throw std::runtime_error("grad_check: non-finite function value");
    // a loss constant in the parameters has zero gradient everywhere
    if (loss.requires_grad()) tape.backward(loss);
  }

  // element selection: everything when small, else stratified subsample
  std::vector<std::pair<std::size_t, std::int64_t>> picks;
  std::int64_t total = 0;
  for (const Tensor& p : params) total += p.numel();
  std::mt19937_64 rng(opts.seed);
  if (total <= opts.min_total_samples * 2) {
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::int64_t i = 0; i < params[t].numel(); ++i) picks.emplace_back(t, i);
  } else {
    for (std::size_t t = 0; t < params.size(); ++t) {
      const std::int64_t n = params[t].numel();
      const int take = static_cast<int>(std::min<std::int64_t>(n, opts.min_per_tensor));
      for (int j = 0; j < take; ++j)
        picks.emplace_back(t, static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(n)));
    }
    while (static_cast<int>(picks.size()) < opts.min_total_samples) {
      const std::size_t t = static_cast<std::size_t>(rng() % params.size());
      const std::int64_t n = params[t].numel();
      picks.emplace_back(t, static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(n)));
    }
  }

  double max_err = 0.0;
  for (const auto& [t, i] : picks) {
    Tensor& p = params[t];
    const double analytic = p.has_grad() ? p.grad()[static_cast<std::size_t>(i)] : 0.0;
    double* slot = p.raw_data().data() + i;
    const double old = *slot;
    *slot = old + opts.eps;
    const double fp = f().scalar();
    *slot = old - opts.eps;
    const double fm = f().scalar();
    *slot = old;
    const double numeric = (fp - fm) / (2.0 * opts.eps);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    max_err = std::max(max_err, std::abs(analytic - numeric) / denom);
  }
  return max_err;
}

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps) {
  GradCheckOptions opts;
  opts.eps = eps;
  return grad_check(f, params, opts);
}

}  // namespace treekv
