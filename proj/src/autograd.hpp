// SPDX-License-Identifier: Apache-2.0
/**
 * @file   autograd.hpp
 * @brief  Tape-free reverse-mode differentiation over dfkd::Tensor.
 *
 * Every op builds a Node that keeps its parents alive and a closure that
 * pushes the node's gradient into them. Nodes whose inputs do not need
 * gradients drop their parents immediately, so inference graphs cost only
 * the values.
 */
#ifndef DFKD_AUTOGRAD_HPP_
#define DFKD_AUTOGRAD_HPP_

#include "tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dfkd {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node &)> backward_fn;
  Tensor *sink = nullptr; // parameter gradient accumulator for leaves

  Tensor &ensure_grad() {
    if (grad.numel() != value.numel())
      grad = Tensor(value.shape(), 0.0);
    return grad;
  }
};

class Var {
public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var constant(Tensor t);
  /// Leaf that collects a gradient after backward().
  static Var input(Tensor t);

  const Tensor &value() const { return node_->value; }
  const Shape &shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Gradient after backward(); zeros if none reached this node.
  Tensor grad() const;
  double item() const;

  const std::shared_ptr<Node> &node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

private:
  std::shared_ptr<Node> node_;
};

/// Seeds d(root)/d(root) = 1 and propagates to every reachable node.
void backward(const Var &root);

/// Trainable tensor owned by a module. `use()` yields a leaf wired to `grad`.
struct Parameter {
  std::string name;
  Tensor value;
  mutable Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape(), 0.0) {}

  Var use() const;
  void zero_grad() const { grad.fill(0.0); }
};

/// While alive on this thread, Parameter::use() yields constants, so a
/// backward pass only produces gradients for explicit inputs.
class NoParamGradGuard {
public:
  NoParamGradGuard();
  ~NoParamGradGuard();
  NoParamGradGuard(const NoParamGradGuard &) = delete;
  NoParamGradGuard &operator=(const NoParamGradGuard &) = delete;
  static bool active();
};

namespace ag {

Var add(const Var &a, const Var &b);
Var sub(const Var &a, const Var &b);
Var mul(const Var &a, const Var &b);
Var div(const Var &a, const Var &b);
Var scale(const Var &a, double s);
Var add_scalar(const Var &a, double s);
Var square(const Var &a);
Var log(const Var &a);
/// max(a, floor) elementwise; gradient is zero where the floor is active.
Var clamp_min(const Var &a, double floor);
/// Elementwise clamp to [lo, hi]; gradient passes strictly inside.
Var clamp(const Var &a, double lo, double hi);
Var relu(const Var &a);
Var silu(const Var &a);

Var sum(const Var &a);
Var mean(const Var &a);
Var reshape(const Var &a, Shape s);
Var concat0(const Var &a, const Var &b);
Var slice0(const Var &a, std::size_t begin, std::size_t end);

/// x [N,Ci,H,W] * w [Co,Ci,k,k] (+ b [Co]) with square kernel, stride, pad.
Var conv2d(const Var &x, const Var &w, const Var &b, int stride, int pad);
/// Batch-statistics normalisation. `batch_mean`/`batch_var` receive the
/// (biased) statistics used, for running-average updates.
Var batchnorm_train(const Var &x, const Var &gamma, const Var &beta,
                    double eps, Tensor *batch_mean, Tensor *batch_var);
/// Normalisation with fixed running statistics.
Var batchnorm_eval(const Var &x, const Var &gamma, const Var &beta,
                   const Tensor &running_mean, const Tensor &running_var,
                   double eps);
/// Per-channel mean over (N,H,W) of x [N,C,H,W] -> [C].
Var channel_mean(const Var &x);
/// Per-channel biased variance over (N,H,W) -> [C].
Var channel_var(const Var &x);

Var avg_pool2(const Var &x);
Var upsample_nearest2(const Var &x);
Var concat_channels(const Var &a, const Var &b);
/// x [N,C,H,W] + b broadcast, where b is [N,C] or [C].
Var add_channel_bias(const Var &x, const Var &b);
/// Mean over H,W: [N,C,H,W] -> [N,C].
Var global_avg_pool(const Var &x);
/// x [N,K] * w [M,K]^T (+ b [M]) -> [N,M].
Var linear(const Var &x, const Var &w, const Var &b);
/// Rows of table [V,D] selected by ids -> [N,D].
Var gather_rows(const Var &table, const std::vector<int> &ids);
/// x [N,K] -> [N]: x[n, idx[n]].
Var pick(const Var &x, const std::vector<int> &idx);
Var log_softmax(const Var &x);
Var softmax(const Var &x);
/// Sum over C of F [N,C,H,W] weighted by w [N,C] -> [N,H,W].
Var channel_contract(const Var &f, const Var &w);
/// Per-item L2 normalisation of m [N,...] over all non-leading axes.
/// Items with zero norm pass through as zeros; `zero_flags` (optional)
/// receives one flag per item.
Var l2_normalize_items(const Var &m, std::vector<bool> *zero_flags = nullptr);
/// Bilinear resize of [N,C,H,W] (or [N,H,W]) to (out_h, out_w),
/// half-pixel centres. Identity when sizes agree.
Var resize_bilinear(const Var &x, std::size_t out_h, std::size_t out_w);

} // namespace ag
} // namespace dfkd

#endif // DFKD_AUTOGRAD_HPP_
