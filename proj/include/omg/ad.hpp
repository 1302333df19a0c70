#pragma once

// Minimal reverse-mode autodiff over dynamically sized vectors. A Tape is
// built per batch; backward() accumulates into Param::grad, which Adam then
// consumes. Scalars are size-1 vectors.

#include <Eigen/Dense>
#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "omg/error.hpp"
#include "omg/mathutil.hpp"
#include "omg/rng.hpp"

namespace omg::ad {

using omg::Mat;
using omg::Vec;

struct Param {
  std::string name;
  Mat value;  // vectors are n x 1
  Mat grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(); }
  int rows() const { return static_cast<int>(value.rows()); }
  int cols() const { return static_cast<int>(value.cols()); }
};

// Owns parameters with stable addresses; supports checkpoint round trips.
class ParamStore {
 public:
  Param& add(std::string name, int rows, int cols, double init_std, Rng& rng,
             bool trainable = true) {
    Param& p = params_.emplace_back();
    p.name = std::move(name);
    p.value = Mat(rows, cols);
    p.grad = Mat::Zero(rows, cols);
    p.trainable = trainable;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        p.value(i, j) = init_std == 0.0 ? 0.0 : rng.normal() * init_std;
    return p;
  }

  Param& zeros(std::string name, int rows, int cols, bool trainable = true) {
    Rng dummy(0);
    return add(std::move(name), rows, cols, 0.0, dummy, trainable);
  }

  Param* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::deque<Param>& all() { return params_; }
  const std::deque<Param>& all() const { return params_; }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Param> params_;  // deque: stable addresses
};

using Var = int;

class Tape {
 public:
  const Vec& val(Var v) const { return nodes_[static_cast<size_t>(v)].value; }
  const Vec& adj(Var v) const { return nodes_[static_cast<size_t>(v)].adjoint; }
  int size() const { return static_cast<int>(nodes_.size()); }

  Var constant(Vec v) { return push(std::move(v), nullptr); }

  Var leaf(Param& p) {
    if (p.cols() != 1) throw ShapeMismatch("leaf expects a column parameter");
    Var out = push(p.value.col(0), nullptr);
    node(out).back = [&p, out](Tape& t) { p.grad.col(0) += t.adj(out); };
    return out;
  }

  // Column j of an embedding table.
  Var col(Param& p, int j) {
    Var out = push(p.value.col(j), nullptr);
    node(out).back = [&p, j, out](Tape& t) { p.grad.col(j) += t.adj(out); };
    return out;
  }

  Var matvec(Param& w, Var x) {
    Var out = push(w.value * val(x), nullptr);
    node(out).back = [&w, x, out](Tape& t) {
      const Vec& a = t.adj(out);
      w.grad += a * t.val(x).transpose();
      t.node(x).adjoint += w.value.transpose() * a;
    };
    return out;
  }

  Var affine(Param& w, Param& b, Var x) {
    if (w.cols() != val(x).size() || b.rows() != w.rows())
      throw ShapeMismatch("affine: " + w.name);
    Var out = push(w.value * val(x) + b.value.col(0), nullptr);
    node(out).back = [&w, &b, x, out](Tape& t) {
      const Vec& a = t.adj(out);
      w.grad += a * t.val(x).transpose();
      b.grad.col(0) += a;
      t.node(x).adjoint += w.value.transpose() * a;
    };
    return out;
  }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Var out = push(val(a) + val(b), nullptr);
    node(out).back = [a, b, out](Tape& t) {
      t.node(a).adjoint += t.adj(out);
      t.node(b).adjoint += t.adj(out);
    };
    return out;
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    Var out = push(val(a) - val(b), nullptr);
    node(out).back = [a, b, out](Tape& t) {
      t.node(a).adjoint += t.adj(out);
      t.node(b).adjoint -= t.adj(out);
    };
    return out;
  }

  Var scale(Var a, double s) {
    Var out = push(val(a) * s, nullptr);
    node(out).back = [a, s, out](Tape& t) { t.node(a).adjoint += s * t.adj(out); };
    return out;
  }

  Var cmul(Var a, Var b) {
    check_same(a, b, "cmul");
    Var out = push(val(a).cwiseProduct(val(b)), nullptr);
    node(out).back = [a, b, out](Tape& t) {
      t.node(a).adjoint += t.val(b).cwiseProduct(t.adj(out));
      t.node(b).adjoint += t.val(a).cwiseProduct(t.adj(out));
    };
    return out;
  }

  // scalar node * vector node
  Var smul(Var s, Var v) {
    if (val(s).size() != 1) throw ShapeMismatch("smul scalar operand");
    Var out = push(val(s)[0] * val(v), nullptr);
    node(out).back = [s, v, out](Tape& t) {
      t.node(s).adjoint[0] += t.val(v).dot(t.adj(out));
      t.node(v).adjoint += t.val(s)[0] * t.adj(out);
    };
    return out;
  }

  Var tanh_(Var a) {
    Var out = push(val(a).array().tanh().matrix(), nullptr);
    node(out).back = [a, out](Tape& t) {
      const Vec& y = t.val(out);
      t.node(a).adjoint +=
          ((1.0 - y.array().square()) * t.adj(out).array()).matrix();
    };
    return out;
  }

  Var exp_(Var a) {
    Var out = push(val(a).array().exp().matrix(), nullptr);
    node(out).back = [a, out](Tape& t) {
      t.node(a).adjoint += t.val(out).cwiseProduct(t.adj(out));
    };
    return out;
  }

  // Pass-through gradient inside [lo, hi], zero outside.
  Var clamp(Var a, double lo, double hi) {
    Var out = push(val(a).cwiseMax(lo).cwiseMin(hi), nullptr);
    node(out).back = [a, lo, hi, out](Tape& t) {
      const Vec& x = t.val(a);
      Vec g = t.adj(out);
      for (Eigen::Index i = 0; i < x.size(); ++i)
        if (x[i] < lo || x[i] > hi) g[i] = 0.0;
      t.node(a).adjoint += g;
    };
    return out;
  }

  Var concat(Var a, Var b) {
    Vec v(val(a).size() + val(b).size());
    v << val(a), val(b);
    Var out = push(std::move(v), nullptr);
    node(out).back = [a, b, out](Tape& t) {
      Eigen::Index na = t.val(a).size();
      t.node(a).adjoint += t.adj(out).head(na);
      t.node(b).adjoint += t.adj(out).tail(t.val(b).size());
    };
    return out;
  }

  Var at(Var a, int i) {
    Var out = push(Vec::Constant(1, val(a)[i]), nullptr);
    node(out).back = [a, i, out](Tape& t) {
      t.node(a).adjoint[i] += t.adj(out)[0];
    };
    return out;
  }

  Var pack(const std::vector<Var>& scalars) {
    Vec v(static_cast<Eigen::Index>(scalars.size()));
    for (size_t i = 0; i < scalars.size(); ++i) v[static_cast<Eigen::Index>(i)] = val(scalars[i])[0];
    Var out = push(std::move(v), nullptr);
    node(out).back = [scalars, out](Tape& t) {
      for (size_t i = 0; i < scalars.size(); ++i)
        t.node(scalars[i]).adjoint[0] += t.adj(out)[static_cast<Eigen::Index>(i)];
    };
    return out;
  }

  Var sum(Var a) {
    Var out = push(Vec::Constant(1, val(a).sum()), nullptr);
    node(out).back = [a, out](Tape& t) {
      t.node(a).adjoint.array() += t.adj(out)[0];
    };
    return out;
  }

  Var dot(Var a, Var b) {
    check_same(a, b, "dot");
    Var out = push(Vec::Constant(1, val(a).dot(val(b))), nullptr);
    node(out).back = [a, b, out](Tape& t) {
      double g = t.adj(out)[0];
      t.node(a).adjoint += g * t.val(b);
      t.node(b).adjoint += g * t.val(a);
    };
    return out;
  }

  // sum of squared differences
  Var sqdist(Var a, Var b) {
    check_same(a, b, "sqdist");
    Vec d = val(a) - val(b);
    Var out = push(Vec::Constant(1, d.squaredNorm()), nullptr);
    node(out).back = [a, b, out](Tape& t) {
      Vec d2 = 2.0 * t.adj(out)[0] * (t.val(a) - t.val(b));
      t.node(a).adjoint += d2;
      t.node(b).adjoint -= d2;
    };
    return out;
  }

  // sum of |a - b|; subgradient 0 at ties
  Var l1dist(Var a, Var b) {
    check_same(a, b, "l1dist");
    Var out = push(Vec::Constant(1, (val(a) - val(b)).cwiseAbs().sum()), nullptr);
    node(out).back = [a, b, out](Tape& t) {
      Vec s = (t.val(a) - t.val(b)).array().sign().matrix() * t.adj(out)[0];
      t.node(a).adjoint += s;
      t.node(b).adjoint -= s;
    };
    return out;
  }

  Var cosine(Var a, Var b) {
    check_same(a, b, "cosine");
    double na = val(a).norm(), nb = val(b).norm();
    if (na < 1e-12 || nb < 1e-12) throw ZeroVector("cosine on tape");
    double c = val(a).dot(val(b)) / (na * nb);
    Var out = push(Vec::Constant(1, c), nullptr);
    node(out).back = [a, b, na, nb, c, out](Tape& t) {
      double g = t.adj(out)[0];
      t.node(a).adjoint += g * (t.val(b) / (na * nb) - c * t.val(a) / (na * na));
      t.node(b).adjoint += g * (t.val(a) / (na * nb) - c * t.val(b) / (nb * nb));
    };
    return out;
  }

  Var softmax(Var a) {
    Var out = push(softmax_stable(val(a)), nullptr);
    node(out).back = [a, out](Tape& t) {
      const Vec& y = t.val(out);
      const Vec& g = t.adj(out);
      double dot_yg = y.dot(g);
      t.node(a).adjoint += y.cwiseProduct(g - Vec::Constant(g.size(), dot_yg));
    };
    return out;
  }

  // logsumexp(logits) - logits[label]
  Var ce_with_logits(Var logits, int label) {
    const Vec& z = val(logits);
    Var out = push(Vec::Constant(1, log_sum_exp(z) - z[label]), nullptr);
    node(out).back = [logits, label, out](Tape& t) {
      Vec p = softmax_stable(t.val(logits));
      p[label] -= 1.0;
      t.node(logits).adjoint += t.adj(out)[0] * p;
    };
    return out;
  }

  Var reciprocal(Var s) {
    if (val(s).size() != 1) throw ShapeMismatch("reciprocal expects a scalar");
    double v = val(s)[0];
    Var out = push(Vec::Constant(1, 1.0 / v), nullptr);
    node(out).back = [s, v, out](Tape& t) {
      t.node(s).adjoint[0] -= t.adj(out)[0] / (v * v);
    };
    return out;
  }

  Var sqrt_(Var s) {
    if (val(s).size() != 1) throw ShapeMismatch("sqrt expects a scalar");
    double v = std::sqrt(val(s)[0]);
    Var out = push(Vec::Constant(1, v), nullptr);
    node(out).back = [s, v, out](Tape& t) {
      t.node(s).adjoint[0] += t.adj(out)[0] * 0.5 / v;
    };
    return out;
  }

  void backward(Var root) {
    if (val(root).size() != 1) throw ShapeMismatch("backward root must be scalar");
    for (auto& n : nodes_) n.adjoint.setZero(n.value.size());
    nodes_[static_cast<size_t>(root)].adjoint[0] = 1.0;
    for (int i = root; i >= 0; --i) {
      auto& n = nodes_[static_cast<size_t>(i)];
      if (n.back && (n.adjoint.array() != 0.0).any()) n.back(*this);
    }
  }

 private:
  struct Node {
    Vec value;
    Vec adjoint;
    std::function<void(Tape&)> back;
  };

  Node& node(Var v) { return nodes_[static_cast<size_t>(v)]; }

  Var push(Vec v, std::function<void(Tape&)> back) {
    Node n;
    n.value = std::move(v);
    n.adjoint = Vec::Zero(n.value.size());
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
  }

  void check_same(Var a, Var b, const char* op) const {
    if (val(a).size() != val(b).size())
      throw ShapeMismatch(std::string(op) + ": operand sizes differ");
  }

  std::vector<Node> nodes_;
};

class Adam {
 public:
  explicit Adam(double lr) : lr_(lr) {}

  void attach(ParamStore& store) {
    for (auto& p : store.all())
      if (p.trainable) add_param(p);
  }
  void attach(const std::vector<Param*>& params) {
    for (Param* p : params)
      if (p->trainable) add_param(*p);
  }
  void add_param(Param& p) {
    params_.push_back(&p);
    slots_.push_back({Mat::Zero(p.rows(), p.cols()), Mat::Zero(p.rows(), p.cols())});
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      Param& p = *params_[i];
      Slot& s = slots_[i];
      s.m = beta1_ * s.m + (1.0 - beta1_) * p.grad;
      s.v = beta2_ * s.v + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
      Mat mhat = s.m / bc1;
      Mat vhat = s.v / bc2;
      p.value -=
          lr_ * mhat.cwiseQuotient(vhat.cwiseSqrt() + Mat::Constant(p.rows(), p.cols(), eps_));
      p.zero_grad();
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  struct Slot {
    Mat m, v;
  };
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int t_ = 0;
  std::vector<Param*> params_;
  std::vector<Slot> slots_;
};

}  // namespace omg::ad
