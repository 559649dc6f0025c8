#pragma once

// Minimal dense 2-D tensors (64-bit) with reverse-mode differentiation.
//
// Every op creates a node holding its value, its parents, a forward closure and
// a backward closure. Nodes are created after their parents, so the set of
// nodes reachable from a root, ordered by a depth-first post-order, is a valid
// tape: replaying the forward closures in that order reproduces the values.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ella/util.hpp"

namespace ella {

struct TensorNode {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> forward_fn;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(size_t rows, size_t cols, bool requires_grad = false);
  static Tensor from(size_t rows, size_t cols, std::vector<double> values, bool requires_grad = false);
  static Tensor row(std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(n_); }
  size_t rows() const { return n_->rows; }
  size_t cols() const { return n_->cols; }
  size_t size() const { return n_->value.size(); }
  std::string shape_str() const;

  std::span<const double> values() const { return n_->value; }
  std::vector<double>& mutable_values() { return n_->value; }
  double at(size_t r, size_t c) const { return n_->value[r * n_->cols + c]; }
  double item() const;
  std::vector<double> row_values(size_t r) const;

  bool requires_grad() const { return n_->requires_grad; }
  std::span<const double> grad() const { return n_->grad; }
  std::vector<double>& mutable_grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() { n_->grad.assign(n_->value.size(), 0.0); }

  // Seeds d(this)/d(this) = 1 and accumulates gradients into every leaf that
  // requires them. `this` must be 1x1.
  void backward() const;

  // A new leaf holding a copy of the values (no history).
  Tensor detach() const;

  const std::shared_ptr<TensorNode>& node() const { return n_; }
  explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode> n_;
};

// Topological order of the nodes reachable from `root` (parents first).
std::vector<TensorNode*> tape(const Tensor& root);
// Recomputes every non-leaf value along the tape; returns the largest absolute
// change observed (0 when replay is bit-exact).
double replay(const Tensor& root);

// --- primitives -------------------------------------------------------------
// Binary elementwise ops accept b with the same shape as a, a 1 x cols row
// (broadcast over rows) or a 1 x 1 scalar.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor transpose(const Tensor& a);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor select_rows(const Tensor& a, const std::vector<size_t>& rows);
Tensor mean_rows(const Tensor& a);  // 1 x cols
Tensor sum(const Tensor& a);        // 1 x 1
Tensor layer_norm(const Tensor& a, double eps = 1e-5);  // row-wise, no affine
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// Row offsets of consecutive segments: segment i spans rows [off[i], off[i+1]).
using Segments = std::vector<size_t>;

// softmax(Q Kᵀ · scale) V computed independently inside every segment (rows of
// different segments never attend to each other). When `weights` is given it
// receives the attention matrices, one n×n row-major block per segment.
Tensor segment_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Segments& segs,
                         double scale, std::shared_ptr<const std::vector<double>>* weights = nullptr);

// For each segment, p = softmax(scores[rows]) and output row = Σ p_j x_j.
// scores is N×1; empty segments yield a zero row. `probs` receives p for all rows.
Tensor segment_softmax_pool(const Tensor& scores, const Tensor& x, const Segments& segs,
                            std::shared_ptr<const std::vector<double>>* probs = nullptr);

// --- verification -----------------------------------------------------------
struct GradCheckResult {
  double max_rel_error = 0.0;
  size_t checked = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares reverse-mode gradients of the scalar f() with central differences on
// up to `samples` coordinates drawn uniformly from `params`. Relative error is
// |a - n| / max(|a|, |n|, 1e-6).
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                           double eps = 1e-5, size_t samples = 100, uint64_t seed = 0);

// --- optimization -----------------------------------------------------------
struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  uint64_t t = 0;
};

void adam_step(std::span<double> theta, std::span<const double> grad, AdamState& state,
               const AdamConfig& cfg);

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);
  void step();
  void zero_grad();
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<AdamState> states_;
  AdamConfig cfg_;
};

// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
void init_uniform(Tensor& t, size_t fan_in, std::mt19937_64& rng);

// --- checkpoints ------------------------------------------------------------
using NamedTensors = std::map<std::string, Tensor>;

struct Checkpoint {
  NamedTensors tensors;
  std::string metadata;  // JSON text
};

void save_checkpoint(const std::string& path, const NamedTensors& tensors, const std::string& metadata);
Checkpoint load_checkpoint(const std::string& path);
std::string checkpoint_bytes(const NamedTensors& tensors, const std::string& metadata);

// FNV-1a over names, shapes and raw values of the tensors accepted by `keep`.
uint64_t content_hash(const NamedTensors& tensors,
                      const std::function<bool(const std::string&)>& keep = nullptr);

}  // namespace ella
