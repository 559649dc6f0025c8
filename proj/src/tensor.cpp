#include "ella/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace ella {

namespace {

using NodePtr = std::shared_ptr<TensorNode>;

std::string shape_of(const TensorNode& n) {
  return "[" + std::to_string(n.rows) + "x" + std::to_string(n.cols) + "]";
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw Error(std::string(op) + ": incompatible shapes " + a.shape_str() + " and " + b.shape_str());
}

// Builds an op node, runs its forward once and wires the backward closure.
Tensor make_op(const char* op, size_t rows, size_t cols, std::vector<NodePtr> parents,
               std::function<void(TensorNode&)> forward, std::function<void(TensorNode&)> backward) {
  auto n = std::make_shared<TensorNode>();
  n->rows = rows;
  n->cols = cols;
  n->op = op;
  n->value.assign(rows * cols, 0.0);
  n->requires_grad = std::any_of(parents.begin(), parents.end(),
                                 [](const NodePtr& p) { return p->requires_grad; });
  n->parents = std::move(parents);
  n->forward_fn = std::move(forward);
  n->forward_fn(*n);
  if (n->requires_grad) n->backward_fn = std::move(backward);
  return Tensor(std::move(n));
}

enum class Bcast { Same, Row, Scalar };

Bcast broadcast_mode(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::Same;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::Row;
  if (b.rows() == 1 && b.cols() == 1) return Bcast::Scalar;
  shape_error(op, a, b);
}

inline size_t bidx(Bcast m, size_t i, size_t cols) {
  switch (m) {
    case Bcast::Same:
      return i;
    case Bcast::Row:
      return i % cols;
    case Bcast::Scalar:
      return 0;
  }
  return 0;
}

template <typename Fwd, typename DA, typename DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const Bcast m = broadcast_mode(op, a, b);
  return make_op(
      op, a.rows(), a.cols(), {a.node(), b.node()},
      [m, fwd](TensorNode& s) {
        const auto& x = s.parents[0]->value;
        const auto& y = s.parents[1]->value;
        for (size_t i = 0; i < s.value.size(); ++i) s.value[i] = fwd(x[i], y[bidx(m, i, s.cols)]);
      },
      [m, da, db](TensorNode& s) {
        auto& pa = *s.parents[0];
        auto& pb = *s.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (size_t i = 0; i < s.value.size(); ++i) {
          const size_t j = bidx(m, i, s.cols);
          if (pa.requires_grad) pa.grad[i] += s.grad[i] * da(pa.value[i], pb.value[j]);
          if (pb.requires_grad) pb.grad[j] += s.grad[i] * db(pa.value[i], pb.value[j]);
        }
      });
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  // deriv(x, y) gives dy/dx from the input and the output.
  return make_op(
      op, a.rows(), a.cols(), {a.node()},
      [fwd](TensorNode& s) {
        const auto& x = s.parents[0]->value;
        for (size_t i = 0; i < s.value.size(); ++i) s.value[i] = fwd(x[i]);
      },
      [deriv](TensorNode& s) {
        auto& p = *s.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < s.value.size(); ++i) p.grad[i] += s.grad[i] * deriv(p.value[i], s.value[i]);
      });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(size_t rows, size_t cols, bool requires_grad) {
  return from(rows, cols, std::vector<double>(rows * cols, 0.0), requires_grad);
}

Tensor Tensor::from(size_t rows, size_t cols, std::vector<double> values, bool requires_grad) {
  if (values.size() != rows * cols)
    throw Error("tensor: " + std::to_string(values.size()) + " values for shape [" +
                std::to_string(rows) + "x" + std::to_string(cols) + "]");
  auto n = std::make_shared<TensorNode>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
  const size_t n = values.size();
  return from(1, n, std::move(values), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from(1, 1, {v}, requires_grad); }

std::string Tensor::shape_str() const { return shape_of(*n_); }

double Tensor::item() const {
  if (size() != 1) throw Error("item() on tensor of shape " + shape_str());
  return n_->value[0];
}

std::vector<double> Tensor::row_values(size_t r) const {
  if (r >= rows()) throw Error("row index out of range");
  auto b = n_->value.begin() + static_cast<std::ptrdiff_t>(r * cols());
  return {b, b + static_cast<std::ptrdiff_t>(cols())};
}

Tensor Tensor::detach() const { return from(rows(), cols(), n_->value, false); }

std::vector<TensorNode*> tape(const Tensor& root) {
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<TensorNode*, size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      TensorNode* p = n->parents[next++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;
}

double replay(const Tensor& root) {
  double max_change = 0.0;
  for (TensorNode* n : tape(root)) {
    if (!n->forward_fn) continue;
    std::vector<double> before = n->value;
    n->forward_fn(*n);
    for (size_t i = 0; i < before.size(); ++i)
      max_change = std::max(max_change, std::abs(before[i] - n->value[i]));
  }
  return max_change;
}

void Tensor::backward() const {
  if (size() != 1) throw Error("backward() requires a 1x1 root, got " + shape_str());
  if (!requires_grad()) throw Error("backward() on a tensor that does not require grad");
  auto order = tape(*this);
  for (TensorNode* n : order)
    if (n->backward_fn) n->grad.assign(n->value.size(), 0.0);
  n_->ensure_grad();
  n_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---------------------------------------------------------------------------
// Primitives

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  const size_t m = a.rows(), k = a.cols(), n = b.cols();
  return make_op(
      "matmul", m, n, {a.node(), b.node()},
      [m, k, n](TensorNode& s) {
        const auto& x = s.parents[0]->value;
        const auto& y = s.parents[1]->value;
        std::fill(s.value.begin(), s.value.end(), 0.0);
        for (size_t i = 0; i < m; ++i)
          for (size_t p = 0; p < k; ++p) {
            const double xv = x[i * k + p];
            const double* yr = &y[p * n];
            double* out = &s.value[i * n];
            for (size_t j = 0; j < n; ++j) out[j] += xv * yr[j];
          }
      },
      [m, k, n](TensorNode& s) {
        auto& pa = *s.parents[0];
        auto& pb = *s.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          std::vector<double> bt(n * k);
          for (size_t p = 0; p < k; ++p)
            for (size_t j = 0; j < n; ++j) bt[j * k + p] = pb.value[p * n + j];
          for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) {
              const double g = s.grad[i * n + j];
              const double* br = &bt[j * k];
              double* out = &pa.grad[i * k];
              for (size_t p = 0; p < k; ++p) out[p] += g * br[p];
            }
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < k; ++p) {
              const double xv = pa.value[i * k + p];
              for (size_t j = 0; j < n; ++j) pb.grad[p * n + j] += xv * s.grad[i * n + j];
            }
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double c) {
  return unary(
      "scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(
      "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor transpose(const Tensor& a) {
  const size_t r = a.rows(), c = a.cols();
  return make_op(
      "transpose", c, r, {a.node()},
      [r, c](TensorNode& s) {
        const auto& x = s.parents[0]->value;
        for (size_t i = 0; i < r; ++i)
          for (size_t j = 0; j < c; ++j) s.value[j * r + i] = x[i * c + j];
      },
      [r, c](TensorNode& s) {
        auto& p = *s.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < r; ++i)
          for (size_t j = 0; j < c; ++j) p.grad[i * c + j] += s.grad[j * r + i];
      });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error("concat_rows: no inputs");
  const size_t cols = parts[0].cols();
  size_t rows = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    if (p.cols() != cols) shape_error("concat_rows", parts[0], p);
    rows += p.rows();
    parents.push_back(p.node());
  }
  return make_op(
      "concat_rows", rows, cols, std::move(parents),
      [](TensorNode& s) {
        size_t off = 0;
        for (const auto& p : s.parents) {
          std::copy(p->value.begin(), p->value.end(), s.value.begin() + static_cast<std::ptrdiff_t>(off));
          off += p->value.size();
        }
      },
      [](TensorNode& s) {
        size_t off = 0;
        for (const auto& p : s.parents) {
          if (p->requires_grad) {
            p->ensure_grad();
            for (size_t i = 0; i < p->value.size(); ++i) p->grad[i] += s.grad[off + i];
          }
          off += p->value.size();
        }
      });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error("concat_cols: no inputs");
  const size_t rows = parts[0].rows();
  size_t cols = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    if (p.rows() != rows) shape_error("concat_cols", parts[0], p);
    cols += p.cols();
    parents.push_back(p.node());
  }
  return make_op(
      "concat_cols", rows, cols, std::move(parents),
      [](TensorNode& s) {
        size_t off = 0;
        for (const auto& p : s.parents) {
          for (size_t i = 0; i < s.rows; ++i)
            for (size_t j = 0; j < p->cols; ++j) s.value[i * s.cols + off + j] = p->value[i * p->cols + j];
          off += p->cols;
        }
      },
      [](TensorNode& s) {
        size_t off = 0;
        for (const auto& p : s.parents) {
          if (p->requires_grad) {
            p->ensure_grad();
            for (size_t i = 0; i < s.rows; ++i)
              for (size_t j = 0; j < p->cols; ++j) p->grad[i * p->cols + j] += s.grad[i * s.cols + off + j];
          }
          off += p->cols;
        }
      });
}

Tensor select_rows(const Tensor& a, const std::vector<size_t>& rows) {
  for (size_t r : rows)
    if (r >= a.rows())
      throw Error("select_rows: row " + std::to_string(r) + " out of range for " + a.shape_str());
  const size_t c = a.cols();
  return make_op(
      "select_rows", rows.size(), c, {a.node()},
      [rows, c](TensorNode& s) {
        const auto& x = s.parents[0]->value;
        for (size_t i = 0; i < rows.size(); ++i)
          std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c,
                      s.value.begin() + static_cast<std::ptrdiff_t>(i * c));
      },
      [rows, c](TensorNode& s) {
        auto& p = *s.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < rows.size(); ++i)
          for (size_t j = 0; j < c; ++j) p.grad[rows[i] * c + j] += s.grad[i * c + j];
      });
}

Tensor mean_rows(const Tensor& a) {
  const size_t r = a.rows(), c = a.cols();
  if (r == 0) throw Error("mean_rows: empty tensor");
  return make_op(
      "mean_rows", 1, c, {a.node()},
      [r, c](TensorNode& s) {
        const auto& x = s.parents[0]->value;
        std::fill(s.value.begin(), s.value.end(), 0.0);
        for (size_t i = 0; i < r; ++i)
          for (size_t j = 0; j < c; ++j) s.value[j] += x[i * c + j];
        for (auto& v : s.value) v /= static_cast<double>(r);
      },
      [r, c](TensorNode& s) {
        auto& p = *s.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < r; ++i)
          for (size_t j = 0; j < c; ++j) p.grad[i * c + j] += s.grad[j] / static_cast<double>(r);
      });
}

Tensor sum(const Tensor& a) {
  return make_op(
      "sum", 1, 1, {a.node()},
      [](TensorNode& s) {
        const auto& x = s.parents[0]->value;
        s.value[0] = std::accumulate(x.begin(), x.end(), 0.0);
      },
      [](TensorNode& s) {
        auto& p = *s.parents[0];
        p.ensure_grad();
        for (auto& g : p.grad) g += s.grad[0];
      });
}

Tensor layer_norm(const Tensor& a, double eps) {
  const size_t r = a.rows(), c = a.cols();
  auto inv_std = std::make_shared<std::vector<double>>(r);
  return make_op(
      "layer_norm", r, c, {a.node()},
      [r, c, eps, inv_std](TensorNode& s) {
        const auto& x = s.parents[0]->value;
        for (size_t i = 0; i < r; ++i) {
          double mu = 0.0;
          for (size_t j = 0; j < c; ++j) mu += x[i * c + j];
          mu /= static_cast<double>(c);
          double var = 0.0;
          for (size_t j = 0; j < c; ++j) var += (x[i * c + j] - mu) * (x[i * c + j] - mu);
          var /= static_cast<double>(c);
          const double is = 1.0 / std::sqrt(var + eps);
          (*inv_std)[i] = is;
          for (size_t j = 0; j < c; ++j) s.value[i * c + j] = (x[i * c + j] - mu) * is;
        }
      },
      [r, c, inv_std](TensorNode& s) {
        auto& p = *s.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < r; ++i) {
          double mean_g = 0.0, mean_gy = 0.0;
          for (size_t j = 0; j < c; ++j) {
            mean_g += s.grad[i * c + j];
            mean_gy += s.grad[i * c + j] * s.value[i * c + j];
          }
          mean_g /= static_cast<double>(c);
          mean_gy /= static_cast<double>(c);
          for (size_t j = 0; j < c; ++j)
            p.grad[i * c + j] +=
                (*inv_std)[i] * (s.grad[i * c + j] - mean_g - s.value[i * c + j] * mean_gy);
        }
      });
}

Tensor softmax_rows(const Tensor& a) {
  const size_t r = a.rows(), c = a.cols();
  return make_op(
      "softmax_rows", r, c, {a.node()},
      [r, c](TensorNode& s) {
        const auto& x = s.parents[0]->value;
        for (size_t i = 0; i < r; ++i) {
          double mx = x[i * c];
          for (size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
          double z = 0.0;
          for (size_t j = 0; j < c; ++j) z += (s.value[i * c + j] = std::exp(x[i * c + j] - mx));
          for (size_t j = 0; j < c; ++j) s.value[i * c + j] /= z;
        }
      },
      [r, c](TensorNode& s) {
        auto& p = *s.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (size_t j = 0; j < c; ++j) dot += s.grad[i * c + j] * s.value[i * c + j];
          for (size_t j = 0; j < c; ++j)
            p.grad[i * c + j] += s.value[i * c + j] * (s.grad[i * c + j] - dot);
        }
      });
}

Tensor log_softmax_rows(const Tensor& a) {
  const size_t r = a.rows(), c = a.cols();
  return make_op(
      "log_softmax_rows", r, c, {a.node()},
      [r, c](TensorNode& s) {
        const auto& x = s.parents[0]->value;
        for (size_t i = 0; i < r; ++i) {
          double mx = x[i * c];
          for (size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
          double z = 0.0;
          for (size_t j = 0; j < c; ++j) z += std::exp(x[i * c + j] - mx);
          const double lse = mx + std::log(z);
          for (size_t j = 0; j < c; ++j) s.value[i * c + j] = x[i * c + j] - lse;
        }
      },
      [r, c](TensorNode& s) {
        auto& p = *s.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < r; ++i) {
          double gsum = 0.0;
          for (size_t j = 0; j < c; ++j) gsum += s.grad[i * c + j];
          for (size_t j = 0; j < c; ++j)
            p.grad[i * c + j] += s.grad[i * c + j] - std::exp(s.value[i * c + j]) * gsum;
        }
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      "clamp", a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

static void check_segments(const char* op, const Segments& segs, size_t rows) {
  if (segs.empty() || segs.front() != 0 || segs.back() != rows)
    throw Error(std::string(op) + ": segments must start at 0 and end at " + std::to_string(rows));
  for (size_t i = 1; i < segs.size(); ++i)
    if (segs[i] < segs[i - 1]) throw Error(std::string(op) + ": segment offsets must be non-decreasing");
}

Tensor segment_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Segments& segs,
                         double scale, std::shared_ptr<const std::vector<double>>* weights) {
  if (q.rows() != k.rows() || q.cols() != k.cols()) shape_error("segment_attention", q, k);
  if (v.rows() != q.rows()) shape_error("segment_attention", q, v);
  check_segments("segment_attention", segs, q.rows());
  size_t wsize = 0;
  for (size_t s = 0; s + 1 < segs.size(); ++s) wsize += (segs[s + 1] - segs[s]) * (segs[s + 1] - segs[s]);
  auto attn = std::make_shared<std::vector<double>>(wsize);
  if (weights) *weights = attn;
  const size_t dk = q.cols(), dv = v.cols();
  return make_op(
      "segment_attention", q.rows(), dv, {q.node(), k.node(), v.node()},
      [segs, scale, attn, dk, dv](TensorNode& out) {
        const auto& Q = out.parents[0]->value;
        const auto& K = out.parents[1]->value;
        const auto& V = out.parents[2]->value;
        std::fill(out.value.begin(), out.value.end(), 0.0);
        size_t woff = 0;
        for (size_t s = 0; s + 1 < segs.size(); ++s) {
          const size_t r0 = segs[s], n = segs[s + 1] - r0;
          for (size_t i = 0; i < n; ++i) {
            double* a = &(*attn)[woff + i * n];
            double mx = -INFINITY;
            for (size_t j = 0; j < n; ++j) {
              double dot = 0.0;
              for (size_t c = 0; c < dk; ++c) dot += Q[(r0 + i) * dk + c] * K[(r0 + j) * dk + c];
              a[j] = dot * scale;
              mx = std::max(mx, a[j]);
            }
            double z = 0.0;
            for (size_t j = 0; j < n; ++j) z += (a[j] = std::exp(a[j] - mx));
            for (size_t j = 0; j < n; ++j) a[j] /= z;
            for (size_t j = 0; j < n; ++j)
              for (size_t c = 0; c < dv; ++c) out.value[(r0 + i) * dv + c] += a[j] * V[(r0 + j) * dv + c];
          }
          woff += n * n;
        }
      },
      [segs, scale, attn, dk, dv](TensorNode& out) {
        auto& pq = *out.parents[0];
        auto& pk = *out.parents[1];
        auto& pv = *out.parents[2];
        for (auto* p : {&pq, &pk, &pv})
          if (p->requires_grad) p->ensure_grad();
        std::vector<double> dA, dS;
        size_t woff = 0;
        for (size_t s = 0; s + 1 < segs.size(); ++s) {
          const size_t r0 = segs[s], n = segs[s + 1] - r0;
          const double* A = &(*attn)[woff];
          dA.assign(n * n, 0.0);
          dS.assign(n * n, 0.0);
          for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j) {
              double acc = 0.0;
              for (size_t c = 0; c < dv; ++c) acc += out.grad[(r0 + i) * dv + c] * pv.value[(r0 + j) * dv + c];
              dA[i * n + j] = acc;
              if (pv.requires_grad)
                for (size_t c = 0; c < dv; ++c)
                  pv.grad[(r0 + j) * dv + c] += A[i * n + j] * out.grad[(r0 + i) * dv + c];
            }
          for (size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (size_t j = 0; j < n; ++j) dot += dA[i * n + j] * A[i * n + j];
            for (size_t j = 0; j < n; ++j) dS[i * n + j] = A[i * n + j] * (dA[i * n + j] - dot) * scale;
          }
          for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j) {
              const double g = dS[i * n + j];
              if (g == 0.0) continue;
              for (size_t c = 0; c < dk; ++c) {
                if (pq.requires_grad) pq.grad[(r0 + i) * dk + c] += g * pk.value[(r0 + j) * dk + c];
                if (pk.requires_grad) pk.grad[(r0 + j) * dk + c] += g * pq.value[(r0 + i) * dk + c];
              }
            }
          woff += n * n;
        }
      });
}

Tensor segment_softmax_pool(const Tensor& scores, const Tensor& x, const Segments& segs,
                            std::shared_ptr<const std::vector<double>>* probs) {
  if (scores.cols() != 1 || scores.rows() != x.rows()) shape_error("segment_softmax_pool", scores, x);
  check_segments("segment_softmax_pool", segs, x.rows());
  auto p = std::make_shared<std::vector<double>>(x.rows());
  if (probs) *probs = p;
  const size_t d = x.cols();
  return make_op(
      "segment_softmax_pool", segs.size() - 1, d, {scores.node(), x.node()},
      [segs, p, d](TensorNode& out) {
        const auto& sc = out.parents[0]->value;
        const auto& X = out.parents[1]->value;
        std::fill(out.value.begin(), out.value.end(), 0.0);
        for (size_t s = 0; s + 1 < segs.size(); ++s) {
          const size_t a = segs[s], b = segs[s + 1];
          if (a == b) continue;
          double mx = -INFINITY;
          for (size_t j = a; j < b; ++j) mx = std::max(mx, sc[j]);
          double z = 0.0;
          for (size_t j = a; j < b; ++j) z += ((*p)[j] = std::exp(sc[j] - mx));
          for (size_t j = a; j < b; ++j) {
            (*p)[j] /= z;
            for (size_t c = 0; c < d; ++c) out.value[s * d + c] += (*p)[j] * X[j * d + c];
          }
        }
      },
      [segs, p, d](TensorNode& out) {
        auto& ps = *out.parents[0];
        auto& px = *out.parents[1];
        if (ps.requires_grad) ps.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        std::vector<double> dp;
        for (size_t s = 0; s + 1 < segs.size(); ++s) {
          const size_t a = segs[s], b = segs[s + 1];
          dp.assign(b - a, 0.0);
          double dot = 0.0;
          for (size_t j = a; j < b; ++j) {
            for (size_t c = 0; c < d; ++c) {
              dp[j - a] += out.grad[s * d + c] * px.value[j * d + c];
              if (px.requires_grad) px.grad[j * d + c] += (*p)[j] * out.grad[s * d + c];
            }
            dot += dp[j - a] * (*p)[j];
          }
          if (ps.requires_grad)
            for (size_t j = a; j < b; ++j) ps.grad[j] += (*p)[j] * (dp[j - a] - dot);
        }
      });
}

// ---------------------------------------------------------------------------
// Verification

GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps,
                           size_t samples, uint64_t seed) {
  if (!(eps >= 1e-7 && eps <= 1e-4)) throw Error("grad_check: eps must lie in [1e-7, 1e-4]");
  for (auto& p : params) p.zero_grad();
  Tensor y = f();
  if (!std::isfinite(y.item())) throw Error("grad_check: non-finite function value");
  y.backward();

  std::vector<std::pair<size_t, size_t>> coords;
  for (size_t pi = 0; pi < params.size(); ++pi)
    for (size_t k = 0; k < params[pi].size(); ++k) coords.emplace_back(pi, k);
  std::mt19937_64 rng(seed);
  shuffle(coords, rng);
  if (coords.size() > samples) coords.resize(samples);

  GradCheckResult res;
  for (auto [pi, k] : coords) {
    auto& vals = params[pi].mutable_values();
    const double analytic = params[pi].grad()[k];
    const double orig = vals[k];
    vals[k] = orig + eps;
    const double fp = f().item();
    vals[k] = orig - eps;
    const double fm = f().item();
    vals[k] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic))
      throw Error("grad_check: non-finite value");
    const double numeric = (fp - fm) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel >= res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_analytic = analytic;
      res.worst_numeric = numeric;
    }
    ++res.checked;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Optimization

void adam_step(std::span<double> theta, std::span<const double> grad, AdamState& st, const AdamConfig& cfg) {
  if (theta.size() != grad.size()) throw Error("adam_step: parameter/gradient size mismatch");
  if (st.m.size() != theta.size()) {
    st.m.assign(theta.size(), 0.0);
    st.v.assign(theta.size(), 0.0);
    st.t = 0;
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (size_t i = 0; i < theta.size(); ++i) {
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * grad[i];
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    theta[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg)
    : params_(std::move(params)), states_(params_.size()), cfg_(cfg) {}

void Adam::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p.grad().size() != p.size()) p.zero_grad();
    adam_step(p.mutable_values(), p.grad(), states_[i], cfg_);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void init_uniform(Tensor& t, size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<size_t>(1, fan_in)));
  for (auto& v : t.mutable_values()) v = uniform(rng, -bound, bound);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr std::string_view kCkptMagic = "ELLA-CKPT\n";
constexpr uint32_t kCkptVersion = 1;
constexpr uint8_t kDtypeF64 = 0;
}  // namespace

std::string checkpoint_bytes(const NamedTensors& tensors, const std::string& metadata) {
  BinaryWriter w;
  w.raw(kCkptMagic);
  w.u32(kCkptVersion);
  w.str(metadata);
  w.u32(static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.u8(kDtypeF64);
    w.u32(2);
    w.u64(t.rows());
    w.u64(t.cols());
    w.f64s(t.values());
  }
  return w.data();
}

void save_checkpoint(const std::string& path, const NamedTensors& tensors, const std::string& metadata) {
  write_text_file(path, checkpoint_bytes(tensors, metadata));
}

Checkpoint load_checkpoint(const std::string& path) {
  BinaryReader r(read_text_file(path));
  if (r.raw(kCkptMagic.size()) != kCkptMagic) throw Error(path + ": not a checkpoint");
  if (uint32_t v = r.u32(); v != kCkptVersion)
    throw Error(path + ": unsupported checkpoint version " + std::to_string(v));
  Checkpoint ck;
  ck.metadata = r.str();
  for (uint32_t n = r.u32(); n > 0; --n) {
    std::string name = r.str();
    if (r.u8() != kDtypeF64) throw Error(path + ": unsupported dtype for '" + name + "'");
    if (r.u32() != 2) throw Error(path + ": tensor '" + name + "' is not 2-D");
    const size_t rows = r.u64(), cols = r.u64();
    ck.tensors.emplace(name, Tensor::from(rows, cols, r.f64s(rows * cols), true));
  }
  return ck;
}

uint64_t content_hash(const NamedTensors& tensors, const std::function<bool(const std::string&)>& keep) {
  StableHash h;
  for (const auto& [name, t] : tensors) {
    if (keep && !keep(name)) continue;
    h.str(name).u64(t.rows()).u64(t.cols());
    for (double v : t.values()) h.f64(v);
  }
  return h.value();
}

}  // namespace ella
