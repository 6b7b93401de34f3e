// SPDX-License-Identifier: Apache-2.0
#include "autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace dfkd {

namespace {

thread_local int g_no_param_grad = 0;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                             Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Var make(Tensor value, std::vector<Var> parents,
         std::function<void(Node &)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  for (const auto &p : parents)
    any = any || (p && p.requires_grad());
  if (any) {
    n->requires_grad = true;
    for (const auto &p : parents)
      if (p)
        n->parents.push_back(p.node());
    n->backward_fn = std::move(fn);
  }
  return Var(std::move(n));
}

// Gradient buffer of a parent if it participates in the backward pass.
Tensor *gbuf(Node &self, std::size_t i) {
  Node &p = *self.parents[i];
  return p.requires_grad ? &p.ensure_grad() : nullptr;
}

void im2col(const double *img, std::size_t ci, std::size_t h, std::size_t w,
            int k, int stride, int pad, std::size_t ho, std::size_t wo,
            double *col) {
  const std::size_t positions = ho * wo;
  for (std::size_t c = 0; c < ci; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double *row = col + ((c * k + ky) * k + kx) * positions;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + ky;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + kx;
            row[oy * wo + ox] =
                (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 &&
                 ix < static_cast<long>(w))
                    ? img[(c * h + iy) * w + ix]
                    : 0.0;
          }
        }
      }
}

void col2im(const double *col, std::size_t ci, std::size_t h, std::size_t w,
            int k, int stride, int pad, std::size_t ho, std::size_t wo,
            double *img) {
  const std::size_t positions = ho * wo;
  for (std::size_t c = 0; c < ci; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double *row = col + ((c * k + ky) * k + kx) * positions;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + ky;
          if (iy < 0 || iy >= static_cast<long>(h))
            continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + kx;
            if (ix >= 0 && ix < static_cast<long>(w))
              img[(c * h + iy) * w + ix] += row[oy * wo + ox];
          }
        }
      }
}

void require4(const Var &x, const char *op) {
  require(x.shape().size() == 4, std::string(op) + ": expected [N,C,H,W], got " +
                                     shape_str(x.shape()));
}

void require2(const Var &x, const char *op) {
  require(x.shape().size() == 2,
          std::string(op) + ": expected [N,K], got " + shape_str(x.shape()));
}

} // namespace

Var Var::constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return Var(std::move(n));
}

Var Var::input(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return Var(std::move(n));
}

Tensor Var::grad() const {
  if (node_->grad.numel() == node_->value.numel())
    return node_->grad;
  return Tensor(node_->value.shape(), 0.0);
}

double Var::item() const {
  require(numel() == 1, "item: tensor is not a scalar " + shape_str(shape()));
  return node_->value[0];
}

NoParamGradGuard::NoParamGradGuard() { ++g_no_param_grad; }
NoParamGradGuard::~NoParamGradGuard() { --g_no_param_grad; }
bool NoParamGradGuard::active() { return g_no_param_grad > 0; }

Var Parameter::use() const {
  auto n = std::make_shared<Node>();
  n->value = value;
  if (!NoParamGradGuard::active()) {
    n->requires_grad = true;
    if (grad.numel() != value.numel())
      grad = Tensor(value.shape(), 0.0);
    n->sink = &grad;
  }
  return Var(std::move(n));
}

void backward(const Var &root) {
  require(root.numel() == 1, "backward: root must be a scalar");
  if (!root.requires_grad())
    return;
  // Iterative post-order DFS for a topological order.
  std::vector<Node *> order;
  std::unordered_set<Node *> seen;
  std::vector<std::pair<Node *, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto &[node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node *p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second)
        stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node *n : order)
    n->grad = Tensor();
  root.node()->ensure_grad().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node *n = *it;
    if (n->grad.numel() == 0)
      continue;
    if (n->backward_fn)
      n->backward_fn(*n);
    if (n->sink)
      *n->sink += n->grad;
  }
}

namespace ag {

Var add(const Var &a, const Var &b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  return make(std::move(out), {a, b}, [](Node &self) {
    for (std::size_t i = 0; i < 2; ++i)
      if (Tensor *g = gbuf(self, i))
        *g += self.grad;
  });
}

Var sub(const Var &a, const Var &b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const auto &bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] -= bv[i];
  return make(std::move(out), {a, b}, [](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      *g += self.grad;
    if (Tensor *g = gbuf(self, 1))
      for (std::size_t i = 0; i < g->numel(); ++i)
        (*g)[i] -= self.grad[i];
  });
}

Var mul(const Var &a, const Var &b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const auto &bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] *= bv[i];
  return make(std::move(out), {a, b}, [](Node &self) {
    const Tensor &av = self.parents[0]->value;
    const Tensor &bv = self.parents[1]->value;
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i)
        (*g)[i] += self.grad[i] * bv[i];
    if (Tensor *g = gbuf(self, 1))
      for (std::size_t i = 0; i < g->numel(); ++i)
        (*g)[i] += self.grad[i] * av[i];
  });
}

Var div(const Var &a, const Var &b) {
  require_same_shape(a.value(), b.value(), "div");
  Tensor out = a.value();
  const auto &bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] /= bv[i];
  return make(std::move(out), {a, b}, [](Node &self) {
    const Tensor &av = self.parents[0]->value;
    const Tensor &bv = self.parents[1]->value;
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i)
        (*g)[i] += self.grad[i] / bv[i];
    if (Tensor *g = gbuf(self, 1))
      for (std::size_t i = 0; i < g->numel(); ++i)
        (*g)[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
  });
}

Var scale(const Var &a, double s) {
  Tensor out = a.value();
  out *= s;
  return make(std::move(out), {a}, [s](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i)
        (*g)[i] += s * self.grad[i];
  });
}

Var add_scalar(const Var &a, double s) {
  Tensor out = a.value();
  for (auto &v : out.vec())
    v += s;
  return make(std::move(out), {a}, [](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      *g += self.grad;
  });
}

Var square(const Var &a) {
  Tensor out = a.value();
  for (auto &v : out.vec())
    v *= v;
  return make(std::move(out), {a}, [](Node &self) {
    const Tensor &av = self.parents[0]->value;
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i)
        (*g)[i] += 2.0 * av[i] * self.grad[i];
  });
}

Var log(const Var &a) {
  Tensor out = a.value();
  for (auto &v : out.vec())
    v = std::log(v);
  return make(std::move(out), {a}, [](Node &self) {
    const Tensor &av = self.parents[0]->value;
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i)
        (*g)[i] += self.grad[i] / av[i];
  });
}

Var clamp_min(const Var &a, double floor) {
  Tensor out = a.value();
  for (auto &v : out.vec())
    v = std::max(v, floor);
  return make(std::move(out), {a}, [floor](Node &self) {
    const Tensor &av = self.parents[0]->value;
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i)
        if (av[i] > floor)
          (*g)[i] += self.grad[i];
  });
}

Var clamp(const Var &a, double lo, double hi) {
  Tensor out = a.value();
  for (auto &v : out.vec())
    v = std::clamp(v, lo, hi);
  return make(std::move(out), {a}, [lo, hi](Node &self) {
    const Tensor &av = self.parents[0]->value;
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i)
        if (av[i] > lo && av[i] < hi)
          (*g)[i] += self.grad[i];
  });
}

Var relu(const Var &a) {
  Tensor out = a.value();
  for (auto &v : out.vec())
    v = v > 0.0 ? v : 0.0;
  return make(std::move(out), {a}, [](Node &self) {
    const Tensor &av = self.parents[0]->value;
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i)
        if (av[i] > 0.0)
          (*g)[i] += self.grad[i];
  });
}

Var silu(const Var &a) {
  Tensor out = a.value();
  for (auto &v : out.vec())
    v = v / (1.0 + std::exp(-v));
  return make(std::move(out), {a}, [](Node &self) {
    const Tensor &av = self.parents[0]->value;
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-av[i]));
        (*g)[i] += self.grad[i] * s * (1.0 + av[i] * (1.0 - s));
      }
  });
}

Var sum(const Var &a) {
  return make(Tensor::scalar(a.value().sum()), {a}, [](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      for (auto &v : g->vec())
        v += self.grad[0];
  });
}

Var mean(const Var &a) {
  require(a.numel() > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Var reshape(const Var &a, Shape s) {
  return make(a.value().reshaped(std::move(s)), {a}, [](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i)
        (*g)[i] += self.grad[i];
  });
}

Var concat0(const Var &a, const Var &b) {
  const Tensor parts[2] = {a.value(), b.value()};
  const std::size_t split = a.numel();
  return make(dfkd::concat0(parts), {a, b}, [split](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i)
        (*g)[i] += self.grad[i];
    if (Tensor *g = gbuf(self, 1))
      for (std::size_t i = 0; i < g->numel(); ++i)
        (*g)[i] += self.grad[split + i];
  });
}

Var slice0(const Var &a, std::size_t begin, std::size_t end) {
  Tensor out = a.value().slice0(begin, end);
  const std::size_t offset = begin * (a.numel() / a.dim(0));
  return make(std::move(out), {a}, [offset](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < self.grad.numel(); ++i)
        (*g)[offset + i] += self.grad[i];
  });
}

Var conv2d(const Var &x, const Var &w, const Var &b, int stride, int pad) {
  require4(x, "conv2d");
  require(w.shape().size() == 4 && w.dim(2) == w.dim(3),
          "conv2d: weight must be [Co,Ci,k,k]");
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0);
  const int k = static_cast<int>(w.dim(2));
  require(w.dim(1) == ci, "conv2d: channel mismatch, input " +
                              shape_str(x.shape()) + " weight " +
                              shape_str(w.shape()));
  require(!b || (b.numel() == co), "conv2d: bias size mismatch");
  require(static_cast<long>(h) + 2 * pad >= k &&
              static_cast<long>(wd) + 2 * pad >= k,
          "conv2d: kernel larger than padded input");
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - k) / stride + 1;
  const std::size_t kk = ci * k * k, pos = ho * wo;

  Tensor out({n, co, ho, wo});
  std::vector<double> col(kk * pos);
  CMapMat wm(w.value().data(), co, kk);
  for (std::size_t i = 0; i < n; ++i) {
    im2col(x.value().data() + i * ci * h * wd, ci, h, wd, k, stride, pad, ho,
           wo, col.data());
    MapMat om(out.data() + i * co * pos, co, pos);
    om.noalias() = wm * CMapMat(col.data(), kk, pos);
    if (b)
      for (std::size_t c = 0; c < co; ++c)
        om.row(c).array() += b.value()[c];
  }
  return make(std::move(out), {x, w, b}, [=](Node &self) {
    const Tensor &xv = self.parents[0]->value;
    const Tensor &wv = self.parents[1]->value;
    Tensor *gx = gbuf(self, 0);
    Tensor *gw = gbuf(self, 1);
    Tensor *gb = self.parents.size() > 2 ? gbuf(self, 2) : nullptr;
    std::vector<double> col(kk * pos), dcol(kk * pos);
    CMapMat wm(wv.data(), co, kk);
    for (std::size_t i = 0; i < n; ++i) {
      CMapMat gm(self.grad.data() + i * co * pos, co, pos);
      if (gw) {
        im2col(xv.data() + i * ci * h * wd, ci, h, wd, k, stride, pad, ho, wo,
               col.data());
        MapMat(gw->data(), co, kk).noalias() +=
            gm * CMapMat(col.data(), kk, pos).transpose();
      }
      if (gx) {
        MapMat(dcol.data(), kk, pos).noalias() = wm.transpose() * gm;
        col2im(dcol.data(), ci, h, wd, k, stride, pad, ho, wo,
               gx->data() + i * ci * h * wd);
      }
      if (gb)
        for (std::size_t c = 0; c < co; ++c)
          (*gb)[c] += gm.row(c).sum();
    }
  });
}

Var batchnorm_train(const Var &x, const Var &gamma, const Var &beta,
                    double eps, Tensor *batch_mean, Tensor *batch_var) {
  require4(x, "batchnorm_train");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(gamma.numel() == c && beta.numel() == c,
          "batchnorm_train: affine size mismatch");
  const double m = static_cast<double>(n * hw);
  const Tensor &xv = x.value();
  Tensor mu({c}), var({c}), out(xv.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p)
        s += xv[(i * c + ch) * hw + p];
    const double mean = s / m;
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) {
        const double d = xv[(i * c + ch) * hw + p] - mean;
        v += d * d;
      }
    mu[ch] = mean;
    var[ch] = v / m;
    const double inv = 1.0 / std::sqrt(var[ch] + eps);
    const double g = gamma.value()[ch], bb = beta.value()[ch];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t idx = (i * c + ch) * hw + p;
        out[idx] = (xv[idx] - mean) * inv * g + bb;
      }
  }
  if (batch_mean)
    *batch_mean = mu;
  if (batch_var)
    *batch_var = var;
  return make(std::move(out), {x, gamma, beta},
              [=, mu = std::move(mu), var = std::move(var)](Node &self) {
                const Tensor &xv = self.parents[0]->value;
                const Tensor &gv = self.parents[1]->value;
                Tensor *gx = gbuf(self, 0);
                Tensor *gg = gbuf(self, 1);
                Tensor *gbeta = gbuf(self, 2);
                const Tensor &dy = self.grad;
                for (std::size_t ch = 0; ch < c; ++ch) {
                  const double inv = 1.0 / std::sqrt(var[ch] + eps);
                  double sdy = 0.0, sdyx = 0.0;
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t p = 0; p < hw; ++p) {
                      const std::size_t idx = (i * c + ch) * hw + p;
                      const double xhat = (xv[idx] - mu[ch]) * inv;
                      sdy += dy[idx];
                      sdyx += dy[idx] * xhat;
                    }
                  if (gg)
                    (*gg)[ch] += sdyx;
                  if (gbeta)
                    (*gbeta)[ch] += sdy;
                  if (gx) {
                    const double k = gv[ch] * inv / m;
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t p = 0; p < hw; ++p) {
                        const std::size_t idx = (i * c + ch) * hw + p;
                        const double xhat = (xv[idx] - mu[ch]) * inv;
                        (*gx)[idx] += k * (m * dy[idx] - sdy - xhat * sdyx);
                      }
                  }
                }
              });
}

Var batchnorm_eval(const Var &x, const Var &gamma, const Var &beta,
                   const Tensor &running_mean, const Tensor &running_var,
                   double eps) {
  require4(x, "batchnorm_eval");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(gamma.numel() == c && beta.numel() == c &&
              running_mean.numel() == c && running_var.numel() == c,
          "batchnorm_eval: parameter size mismatch");
  std::vector<double> inv(c);
  for (std::size_t ch = 0; ch < c; ++ch)
    inv[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
  const Tensor &xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double a = gamma.value()[ch] * inv[ch];
      const double b = beta.value()[ch] - running_mean[ch] * a;
      const std::size_t base = (i * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p)
        out[base + p] = xv[base + p] * a + b;
    }
  Tensor rm = running_mean;
  return make(std::move(out), {x, gamma, beta},
              [=, inv = std::move(inv), rm = std::move(rm)](Node &self) {
                const Tensor &xv = self.parents[0]->value;
                const Tensor &gv = self.parents[1]->value;
                Tensor *gx = gbuf(self, 0);
                Tensor *gg = gbuf(self, 1);
                Tensor *gbeta = gbuf(self, 2);
                for (std::size_t i = 0; i < n; ++i)
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t base = (i * c + ch) * hw;
                    for (std::size_t p = 0; p < hw; ++p) {
                      const double dy = self.grad[base + p];
                      if (gx)
                        (*gx)[base + p] += dy * gv[ch] * inv[ch];
                      if (gg)
                        (*gg)[ch] += dy * (xv[base + p] - rm[ch]) * inv[ch];
                      if (gbeta)
                        (*gbeta)[ch] += dy;
                    }
                  }
              });
}

Var channel_mean(const Var &x) {
  require4(x, "channel_mean");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double m = static_cast<double>(n * hw);
  Tensor out({c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p)
        out[ch] += x.value()[(i * c + ch) * hw + p];
  out *= 1.0 / m;
  return make(std::move(out), {x}, [=](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p)
            (*g)[(i * c + ch) * hw + p] += self.grad[ch] / m;
  });
}

Var channel_var(const Var &x) {
  require4(x, "channel_var");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double m = static_cast<double>(n * hw);
  const Tensor &xv = x.value();
  Tensor mu({c}), out({c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p)
        mu[ch] += xv[(i * c + ch) * hw + p];
  mu *= 1.0 / m;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) {
        const double d = xv[(i * c + ch) * hw + p] - mu[ch];
        out[ch] += d * d;
      }
  out *= 1.0 / m;
  return make(std::move(out), {x}, [=, mu = std::move(mu)](Node &self) {
    const Tensor &xv = self.parents[0]->value;
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p) {
            const std::size_t idx = (i * c + ch) * hw + p;
            (*g)[idx] += self.grad[ch] * 2.0 * (xv[idx] - mu[ch]) / m;
          }
  });
}

Var avg_pool2(const Var &x) {
  require4(x, "avg_pool2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size");
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor out({n, c, ho, wo});
  const Tensor &xv = x.value();
  for (std::size_t nc = 0; nc < n * c; ++nc)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) {
        const double *src = xv.data() + nc * h * w;
        out[(nc * ho + y) * wo + xx] =
            0.25 * (src[2 * y * w + 2 * xx] + src[2 * y * w + 2 * xx + 1] +
                    src[(2 * y + 1) * w + 2 * xx] +
                    src[(2 * y + 1) * w + 2 * xx + 1]);
      }
  return make(std::move(out), {x}, [=](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t nc = 0; nc < n * c; ++nc)
        for (std::size_t y = 0; y < ho; ++y)
          for (std::size_t xx = 0; xx < wo; ++xx) {
            const double d = 0.25 * self.grad[(nc * ho + y) * wo + xx];
            double *dst = g->data() + nc * h * w;
            dst[2 * y * w + 2 * xx] += d;
            dst[2 * y * w + 2 * xx + 1] += d;
            dst[(2 * y + 1) * w + 2 * xx] += d;
            dst[(2 * y + 1) * w + 2 * xx + 1] += d;
          }
  });
}

Var upsample_nearest2(const Var &x) {
  require4(x, "upsample_nearest2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = 2 * h, wo = 2 * w;
  Tensor out({n, c, ho, wo});
  const Tensor &xv = x.value();
  for (std::size_t nc = 0; nc < n * c; ++nc)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx)
        out[(nc * ho + y) * wo + xx] = xv[(nc * h + y / 2) * w + xx / 2];
  return make(std::move(out), {x}, [=](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t nc = 0; nc < n * c; ++nc)
        for (std::size_t y = 0; y < ho; ++y)
          for (std::size_t xx = 0; xx < wo; ++xx)
            (*g)[(nc * h + y / 2) * w + xx / 2] +=
                self.grad[(nc * ho + y) * wo + xx];
  });
}

Var concat_channels(const Var &a, const Var &b) {
  require4(a, "concat_channels");
  require4(b, "concat_channels");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: batch/spatial mismatch");
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1),
                    hw = a.dim(2) * a.dim(3);
  Tensor out({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * ca * hw, ca * hw,
                out.data() + i * (ca + cb) * hw);
    std::copy_n(b.value().data() + i * cb * hw, cb * hw,
                out.data() + (i * (ca + cb) + ca) * hw);
  }
  return make(std::move(out), {a, b}, [=](Node &self) {
    Tensor *ga = gbuf(self, 0);
    Tensor *gb = gbuf(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const double *src = self.grad.data() + i * (ca + cb) * hw;
      if (ga)
        for (std::size_t j = 0; j < ca * hw; ++j)
          (*ga)[i * ca * hw + j] += src[j];
      if (gb)
        for (std::size_t j = 0; j < cb * hw; ++j)
          (*gb)[i * cb * hw + j] += src[ca * hw + j];
    }
  });
}

Var add_channel_bias(const Var &x, const Var &b) {
  require4(x, "add_channel_bias");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const bool per_item = b.shape().size() == 2;
  require(per_item ? (b.dim(0) == n && b.dim(1) == c) : b.numel() == c,
          "add_channel_bias: bias shape " + shape_str(b.shape()) +
              " incompatible with " + shape_str(x.shape()));
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double v = b.value()[per_item ? i * c + ch : ch];
      for (std::size_t p = 0; p < hw; ++p)
        out[(i * c + ch) * hw + p] += v;
    }
  return make(std::move(out), {x, b}, [=](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      *g += self.grad;
    if (Tensor *g = gbuf(self, 1))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double s = 0.0;
          for (std::size_t p = 0; p < hw; ++p)
            s += self.grad[(i * c + ch) * hw + p];
          (*g)[per_item ? i * c + ch : ch] += s;
        }
  });
}

Var global_avg_pool(const Var &x) {
  require4(x, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p)
      s += x.value()[i * hw + p];
    out[i] = s / static_cast<double>(hw);
  }
  return make(std::move(out), {x}, [=](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < n * c; ++i)
        for (std::size_t p = 0; p < hw; ++p)
          (*g)[i * hw + p] += self.grad[i] / static_cast<double>(hw);
  });
}

Var linear(const Var &x, const Var &w, const Var &b) {
  require2(x, "linear");
  require(w.shape().size() == 2 && w.dim(1) == x.dim(1),
          "linear: weight " + shape_str(w.shape()) + " vs input " +
              shape_str(x.shape()));
  const std::size_t n = x.dim(0), k = x.dim(1), m = w.dim(0);
  require(!b || b.numel() == m, "linear: bias size mismatch");
  Tensor out({n, m});
  MapMat om(out.data(), n, m);
  om.noalias() = CMapMat(x.value().data(), n, k) *
                 CMapMat(w.value().data(), m, k).transpose();
  if (b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        om(i, j) += b.value()[j];
  return make(std::move(out), {x, w, b}, [=](Node &self) {
    CMapMat gm(self.grad.data(), n, m);
    if (Tensor *g = gbuf(self, 0))
      MapMat(g->data(), n, k).noalias() +=
          gm * CMapMat(self.parents[1]->value.data(), m, k);
    if (Tensor *g = gbuf(self, 1))
      MapMat(g->data(), m, k).noalias() +=
          gm.transpose() * CMapMat(self.parents[0]->value.data(), n, k);
    if (self.parents.size() > 2)
      if (Tensor *g = gbuf(self, 2))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j)
            (*g)[j] += gm(i, j);
  });
}

Var gather_rows(const Var &table, const std::vector<int> &ids) {
  require(table.shape().size() == 2, "gather_rows: table must be 2-D");
  const std::size_t v = table.dim(0), d = table.dim(1), n = ids.size();
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < v,
            "gather_rows: id " + std::to_string(ids[i]) + " out of range [0," +
                std::to_string(v) + ")");
    std::copy_n(table.value().data() + ids[i] * d, d, out.data() + i * d);
  }
  return make(std::move(out), {table}, [=](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
          (*g)[ids[i] * d + j] += self.grad[i * d + j];
  });
}

Var pick(const Var &x, const std::vector<int> &idx) {
  require2(x, "pick");
  const std::size_t n = x.dim(0), k = x.dim(1);
  require(idx.size() == n, "pick: index count mismatch");
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    require(idx[i] >= 0 && static_cast<std::size_t>(idx[i]) < k,
            "pick: label " + std::to_string(idx[i]) + " outside [0," +
                std::to_string(k) + ")");
    out[i] = x.value()[i * k + idx[i]];
  }
  return make(std::move(out), {x}, [=](Node &self) {
    if (Tensor *g = gbuf(self, 0))
      for (std::size_t i = 0; i < n; ++i)
        (*g)[i * k + idx[i]] += self.grad[i];
  });
}

Var log_softmax(const Var &x) {
  require2(x, "log_softmax");
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double *row = x.value().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j)
      out[i * k + j] = row[j] - lse;
  }
  return make(std::move(out), {x}, [=](Node &self) {
    Tensor *g = gbuf(self, 0);
    if (!g)
      return;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j)
        s += self.grad[i * k + j];
      for (std::size_t j = 0; j < k; ++j)
        (*g)[i * k + j] +=
            self.grad[i * k + j] - std::exp(self.value[i * k + j]) * s;
    }
  });
}

Var softmax(const Var &x) {
  require2(x, "softmax");
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double *row = x.value().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      s += (out[i * k + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j)
      out[i * k + j] /= s;
  }
  return make(std::move(out), {x}, [=](Node &self) {
    Tensor *g = gbuf(self, 0);
    if (!g)
      return;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j)
        dot += self.grad[i * k + j] * self.value[i * k + j];
      for (std::size_t j = 0; j < k; ++j)
        (*g)[i * k + j] += self.value[i * k + j] * (self.grad[i * k + j] - dot);
    }
  });
}

Var channel_contract(const Var &f, const Var &w) {
  require4(f, "channel_contract");
  const std::size_t n = f.dim(0), c = f.dim(1), h = f.dim(2), wd = f.dim(3),
                    hw = h * wd;
  require(w.shape().size() == 2 && w.dim(0) == n && w.dim(1) == c,
          "channel_contract: weights " + shape_str(w.shape()) +
              " incompatible with features " + shape_str(f.shape()));
  Tensor out({n, h, wd});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double wv = w.value()[i * c + ch];
      const double *src = f.value().data() + (i * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p)
        out[i * hw + p] += wv * src[p];
    }
  return make(std::move(out), {f, w}, [=](Node &self) {
    const Tensor &fv = self.parents[0]->value;
    const Tensor &wv = self.parents[1]->value;
    Tensor *gf = gbuf(self, 0);
    Tensor *gw = gbuf(self, 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = (i * c + ch) * hw;
        double s = 0.0;
        for (std::size_t p = 0; p < hw; ++p) {
          const double gy = self.grad[i * hw + p];
          if (gf)
            (*gf)[base + p] += gy * wv[i * c + ch];
          s += gy * fv[base + p];
        }
        if (gw)
          (*gw)[i * c + ch] += s;
      }
  });
}

Var l2_normalize_items(const Var &m, std::vector<bool> *zero_flags) {
  require(!m.shape().empty() && m.dim(0) > 0, "l2_normalize_items: empty");
  const std::size_t n = m.dim(0), inner = m.numel() / n;
  Tensor out(m.shape());
  std::vector<double> norms(n);
  if (zero_flags)
    zero_flags->assign(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < inner; ++j)
      s += m.value()[i * inner + j] * m.value()[i * inner + j];
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) {
      if (zero_flags)
        (*zero_flags)[i] = true;
      continue;
    }
    for (std::size_t j = 0; j < inner; ++j)
      out[i * inner + j] = m.value()[i * inner + j] / norms[i];
  }
  return make(std::move(out), {m},
              [=, norms = std::move(norms)](Node &self) {
                Tensor *g = gbuf(self, 0);
                if (!g)
                  return;
                for (std::size_t i = 0; i < n; ++i) {
                  if (norms[i] == 0.0)
                    continue;
                  double dot = 0.0;
                  for (std::size_t j = 0; j < inner; ++j)
                    dot += self.grad[i * inner + j] * self.value[i * inner + j];
                  for (std::size_t j = 0; j < inner; ++j)
                    (*g)[i * inner + j] +=
                        (self.grad[i * inner + j] -
                         self.value[i * inner + j] * dot) /
                        norms[i];
                }
              });
}

Var resize_bilinear(const Var &x, std::size_t out_h, std::size_t out_w) {
  const auto &s = x.shape();
  require(s.size() == 3 || s.size() == 4,
          "resize_bilinear: expected [N,H,W] or [N,C,H,W]");
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  if (h == out_h && w == out_w)
    return x;
  require(out_h > 0 && out_w > 0, "resize_bilinear: empty target");
  const std::size_t planes = x.numel() / (h * w);
  // Per output pixel: two source rows/cols and weights.
  struct Tap {
    std::size_t i0, i1;
    double w1;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(h, out_h), tx = taps(w, out_w);
  Shape os = s;
  os[os.size() - 2] = out_h;
  os[os.size() - 1] = out_w;
  Tensor out(os);
  for (std::size_t p = 0; p < planes; ++p) {
    const double *src = x.value().data() + p * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto &a = ty[oy];
        const auto &b = tx[ox];
        out[(p * out_h + oy) * out_w + ox] =
            (1 - a.w1) * ((1 - b.w1) * src[a.i0 * w + b.i0] +
                          b.w1 * src[a.i0 * w + b.i1]) +
            a.w1 * ((1 - b.w1) * src[a.i1 * w + b.i0] +
                    b.w1 * src[a.i1 * w + b.i1]);
      }
  }
  return make(std::move(out), {x}, [=](Node &self) {
    Tensor *g = gbuf(self, 0);
    if (!g)
      return;
    for (std::size_t p = 0; p < planes; ++p) {
      double *dst = g->data() + p * h * w;
      for (std::size_t oy = 0; oy < out_h; ++oy)
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const double gy = self.grad[(p * out_h + oy) * out_w + ox];
          const auto &a = ty[oy];
          const auto &b = tx[ox];
          dst[a.i0 * w + b.i0] += gy * (1 - a.w1) * (1 - b.w1);
          dst[a.i0 * w + b.i1] += gy * (1 - a.w1) * b.w1;
          dst[a.i1 * w + b.i0] += gy * a.w1 * (1 - b.w1);
          dst[a.i1 * w + b.i1] += gy * a.w1 * b.w1;
        }
    }
  });
}

} // namespace ag
} // namespace dfkd
