#include "cfbench/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "cfbench/kernels.hpp"

namespace cfbench::nn {

void act_forward(Act a, float* x, std::size_t n) {
  switch (a) {
    case Act::None:
      return;
    case Act::Relu:
      for (std::size_t i = 0; i < n; ++i) x[i] = x[i] > 0.0f ? x[i] : 0.0f;
      return;
    case Act::LRelu:
      for (std::size_t i = 0; i < n; ++i) x[i] = x[i] > 0.0f ? x[i] : 0.2f * x[i];
      return;
    case Act::Sigmoid:
      for (std::size_t i = 0; i < n; ++i) x[i] = 1.0f / (1.0f + std::exp(-x[i]));
      return;
    case Act::Tanh:
      for (std::size_t i = 0; i < n; ++i) x[i] = std::tanh(x[i]);
      return;
  }
}

void act_backward(Act a, const float* y, float* dy, std::size_t n) {
  switch (a) {
    case Act::None:
      return;
    case Act::Relu:
      for (std::size_t i = 0; i < n; ++i)
        if (y[i] <= 0.0f) dy[i] = 0.0f;
      return;
    case Act::LRelu:
      for (std::size_t i = 0; i < n; ++i)
        if (y[i] <= 0.0f) dy[i] *= 0.2f;
      return;
    case Act::Sigmoid:
      for (std::size_t i = 0; i < n; ++i) dy[i] *= y[i] * (1.0f - y[i]);
      return;
    case Act::Tanh:
      for (std::size_t i = 0; i < n; ++i) dy[i] *= 1.0f - y[i] * y[i];
      return;
  }
}

void Linear::init_he(Rng& rng) {
  const float scale = std::sqrt(2.0f / float(in_));
  for (float& w : W_.w) w = float(rng.normal()) * scale;
  std::fill(b_.w.begin(), b_.w.end(), 0.0f);
}

void Linear::init_xavier(Rng& rng) {
  const float scale = std::sqrt(1.0f / float(in_));
  for (float& w : W_.w) w = float(rng.normal()) * scale;
  std::fill(b_.w.begin(), b_.w.end(), 0.0f);
}

void Linear::init_zero() {
  std::fill(W_.w.begin(), W_.w.end(), 0.0f);
  std::fill(b_.w.begin(), b_.w.end(), 0.0f);
}

void Linear::forward(const float* x, float* y, std::size_t batch) const {
  for (std::size_t r = 0; r < batch; ++r)
    std::memcpy(y + r * out_, b_.w.data(), out_ * sizeof(float));
  kernels::active().gemm_tb(batch, out_, in_, x, W_.w.data(), y);
}

void Linear::backward(const float* x, const float* dy, float* dx, std::size_t batch) {
  // dW (out x in) += dY^T X   with dY (batch x out), X (batch x in)
  kernels::active().gemm_ta(out_, in_, batch, dy, x, W_.g.data());
  for (std::size_t r = 0; r < batch; ++r)
    kernels::active().axpy(1.0f, dy + r * out_, b_.g.data(), out_);
  if (dx) {
    std::fill(dx, dx + batch * in_, 0.0f);
    kernels::active().gemm(batch, in_, out_, dy, W_.w.data(), dx);
  }
}

void Diag::init_identity() {
  std::fill(a_.w.begin(), a_.w.end(), 1.0f);
  std::fill(b_.w.begin(), b_.w.end(), 0.0f);
}

void Diag::forward(const float* x, float* y, std::size_t batch) const {
  const std::size_t n = dim();
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] = a_.w[i] * x[r * n + i] + b_.w[i];
}

void Diag::backward(const float* x, const float* dy, float* dx, std::size_t batch) {
  const std::size_t n = dim();
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t i = 0; i < n; ++i) {
      const float g = dy[r * n + i];
      a_.g[i] += g * x[r * n + i];
      b_.g[i] += g;
      if (dx) dx[r * n + i] = g * a_.w[i];
    }
}

void Adam::attach(Tensor* t) {
  params_.push_back(t);
  m_.emplace_back(t->size(), 0.0f);
  v_.emplace_back(t->size(), 0.0f);
}

void Adam::attach_all(std::vector<Tensor*> ts) {
  for (Tensor* t : ts) attach(t);
}

void Adam::step() {
  ++t_;
  const float b1t = 1.0f - std::pow(cfg_.beta1, float(t_));
  const float b2t = 1.0f - std::pow(cfg_.beta2, float(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = *params_[p];
    Vec& m = m_[p];
    Vec& v = v_[p];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float g = t.g[i];
      m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * g * g;
      const float mhat = m[i] / b1t;
      const float vhat = v[i] / b2t;
      t.w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Tensor* t : params_) t->zero_grad();
}

Mlp::Mlp(const std::vector<std::size_t>& widths, const std::vector<Act>& acts)
    : acts_(acts) {
  if (widths.size() < 2 || acts.size() != widths.size() - 1)
    throw std::invalid_argument("Mlp: widths/acts mismatch");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    layers_.emplace_back(widths[i], widths[i + 1]);
  xs_.resize(layers_.size() + 1);
  grad_bufs_.resize(layers_.size());
}

void Mlp::init_he(Rng& rng) {
  for (Linear& l : layers_) l.init_he(rng);
}

const Vec& Mlp::forward(const float* x, std::size_t batch) {
  xs_[0].assign(x, x + batch * in_dim());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    xs_[i + 1].resize(batch * layers_[i].out_dim());
    layers_[i].forward(xs_[i].data(), xs_[i + 1].data(), batch);
    act_forward(acts_[i], xs_[i + 1].data(), xs_[i + 1].size());
  }
  return xs_.back();
}

const Vec& Mlp::backward(const float* dy, std::size_t batch) {
  Vec cur(dy, dy + batch * out_dim());
  for (std::size_t i = layers_.size(); i-- > 0;) {
    act_backward(acts_[i], xs_[i + 1].data(), cur.data(), cur.size());
    grad_bufs_[i].resize(batch * layers_[i].in_dim());
    layers_[i].backward(xs_[i].data(), cur.data(), grad_bufs_[i].data(), batch);
    cur.swap(grad_bufs_[i]);
  }
  dx_ = std::move(cur);
  return dx_;
}

Vec Mlp::forward_const(const float* x, std::size_t batch) const {
  Vec cur(x, x + batch * in_dim());
  Vec next;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    next.assign(batch * layers_[i].out_dim(), 0.0f);
    layers_[i].forward(cur.data(), next.data(), batch);
    act_forward(acts_[i], next.data(), next.size());
    cur.swap(next);
  }
  return cur;
}

std::vector<Tensor*> Mlp::params() {
  std::vector<Tensor*> out;
  for (Linear& l : layers_) {
    out.push_back(&l.weights());
    out.push_back(&l.bias());
  }
  return out;
}

double l1_loss(const float* pred, const float* target, float* dpred, std::size_t n) {
  double loss = 0.0;
  const float inv = 1.0f / float(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float d = pred[i] - target[i];
    loss += std::fabs(double(d));
    if (dpred) dpred[i] = (d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f)) * inv;
  }
  return loss / double(n);
}

double mse_loss(const float* pred, const float* target, float* dpred, std::size_t n) {
  double loss = 0.0;
  const float inv = 2.0f / float(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float d = pred[i] - target[i];
    loss += double(d) * double(d);
    if (dpred) dpred[i] = inv * d;
  }
  return loss / double(n);
}

double bce_logits_loss(const float* logits, float label, float* dlogits, std::size_t n) {
  double loss = 0.0;
  const float inv = 1.0f / float(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = logits[i];
    // log(1 + e^-|x|) + max(x,0) - x*label, numerically stable
    loss += std::log1p(std::exp(-std::fabs(x))) + std::max(x, 0.0) - x * double(label);
    const float p = 1.0f / (1.0f + std::exp(-logits[i]));
    if (dlogits) dlogits[i] = (p - label) * inv;
  }
  return loss / double(n);
}

double kl_gaussian(const float* mu, const float* logvar, float* dmu, float* dlogvar,
                   std::size_t n) {
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = mu[i], lv = logvar[i];
    loss += 0.5 * (std::exp(lv) + m * m - 1.0 - lv);
    if (dmu) dmu[i] = float(m);
    if (dlogvar) dlogvar[i] = 0.5f * (std::exp(logvar[i]) - 1.0f);
  }
  return loss;
}

void serialize(const std::vector<const Tensor*>& ts, std::vector<std::uint8_t>& out) {
  out.clear();
  std::uint64_t count = ts.size();
  auto push = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  };
  push(&count, sizeof(count));
  for (const Tensor* t : ts) {
    const std::uint64_t n = t->size();
    push(&n, sizeof(n));
    push(t->w.data(), n * sizeof(float));
  }
}

void deserialize(const std::vector<Tensor*>& ts, const std::vector<std::uint8_t>& in) {
  std::size_t off = 0;
  auto pull = [&](void* p, std::size_t n) {
    if (off + n > in.size()) throw std::runtime_error("weights blob truncated");
    std::memcpy(p, in.data() + off, n);
    off += n;
  };
  std::uint64_t count = 0;
  pull(&count, sizeof(count));
  if (count != ts.size()) throw std::runtime_error("weights blob tensor count mismatch");
  for (Tensor* t : ts) {
    std::uint64_t n = 0;
    pull(&n, sizeof(n));
    if (n != t->size()) throw std::runtime_error("weights blob tensor size mismatch");
    pull(t->w.data(), n * sizeof(float));
  }
}

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t params_hash(const std::vector<const Tensor*>& ts) {
  std::vector<std::uint8_t> blob;
  serialize(ts, blob);
  return fnv1a64(blob.data(), blob.size());
}

}  // namespace cfbench::nn
