#pragma once

// Minimal dense-network stack used by the model families: Linear layers with
// manual backprop over the SIMD gemm kernels, pointwise activations, Adam,
// and flat parameter serialization with a content hash.

#include <cstdint>
#include <string>
#include <vector>

#include "cfbench/rng.hpp"

namespace cfbench::nn {

using Vec = std::vector<float>;

struct Tensor {
  Vec w;  // parameters
  Vec g;  // gradient accumulator

  explicit Tensor(std::size_t n = 0) : w(n, 0.0f), g(n, 0.0f) {}
  std::size_t size() const { return w.size(); }
  void zero_grad() { std::fill(g.begin(), g.end(), 0.0f); }
};

enum class Act { None, Relu, LRelu, Sigmoid, Tanh };

void act_forward(Act a, float* x, std::size_t n);
// dy is modified in place into dx given the post-activation output y.
void act_backward(Act a, const float* y, float* dy, std::size_t n);

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out) : in_(in), out_(out), W_(in * out), b_(out) {}

  void init_he(Rng& rng);
  void init_xavier(Rng& rng);
  void init_zero();

  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }

  // Y (batch x out) = X (batch x in) W^T + b
  void forward(const float* x, float* y, std::size_t batch) const;
  // Accumulates dW, db; writes dX if dx != nullptr.
  void backward(const float* x, const float* dy, float* dx, std::size_t batch);

  Tensor& weights() { return W_; }
  Tensor& bias() { return b_; }
  const Tensor& weights() const { return W_; }
  const Tensor& bias() const { return b_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor W_;  // row-major (out x in)
  Tensor b_;
};

// Per-element affine y = a (*) x + b over a fixed-size grid; the latent-grid
// posterior/decoder paths of the hierarchical families are built from these.
class Diag {
 public:
  Diag() = default;
  explicit Diag(std::size_t n) : a_(n), b_(n) {}

  // a = 1, b = 0: identity at init.
  void init_identity();

  std::size_t dim() const { return a_.size(); }

  void forward(const float* x, float* y, std::size_t batch) const;
  void backward(const float* x, const float* dy, float* dx, std::size_t batch);

  Tensor& scale() { return a_; }
  Tensor& bias() { return b_; }
  const Tensor& scale() const { return a_; }
  const Tensor& bias() const { return b_; }

 private:
  Tensor a_, b_;
};

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void attach(Tensor* t);
  void attach_all(std::vector<Tensor*> ts);
  void step();
  void zero_grad();
  void set_lr(float lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor*> params_;
  std::vector<Vec> m_, v_;
  std::int64_t t_ = 0;
};

// Dense feed-forward net. forward() keeps per-layer activations for the
// matching backward(); one Mlp instance therefore serves one thread.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::vector<std::size_t>& widths, const std::vector<Act>& acts);

  void init_he(Rng& rng);

  std::size_t in_dim() const { return layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.back().out_dim(); }

  const Vec& forward(const float* x, std::size_t batch);
  // dy has shape (batch x out). Returns gradient w.r.t. the input.
  const Vec& backward(const float* dy, std::size_t batch);

  // Stateless forward for concurrent inference over a const checkpoint.
  Vec forward_const(const float* x, std::size_t batch) const;

  std::vector<Tensor*> params();
  std::vector<Linear>& layers() { return layers_; }

 private:
  std::vector<Linear> layers_;
  std::vector<Act> acts_;
  std::vector<Vec> xs_;  // xs_[0] = input, xs_[i+1] = output of layer i
  Vec dx_;
  std::vector<Vec> grad_bufs_;
};

// Mean losses with gradient w.r.t. pred written to dpred (scaled by 1/n).
double l1_loss(const float* pred, const float* target, float* dpred, std::size_t n);
double mse_loss(const float* pred, const float* target, float* dpred, std::size_t n);
// Binary cross-entropy on logits against constant label.
double bce_logits_loss(const float* logits, float label, float* dlogits, std::size_t n);
// KL(N(mu, e^logvar) || N(0,1)) summed over dims, averaged over batch rows.
double kl_gaussian(const float* mu, const float* logvar, float* dmu, float* dlogvar,
                   std::size_t n);

// Flat little-endian serialization of a list of tensors.
void serialize(const std::vector<const Tensor*>& ts, std::vector<std::uint8_t>& out);
void deserialize(const std::vector<Tensor*>& ts, const std::vector<std::uint8_t>& in);
std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n);
std::uint64_t params_hash(const std::vector<const Tensor*>& ts);

}  // namespace cfbench::nn
