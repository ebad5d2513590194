#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "obsdef/common.hpp"

namespace obsdef::diff {

// Handle into a Tape. Default-constructed handles are invalid.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over dense matrices. Values are (rows x cols) blocks;
// batched computations put one sample per column. A scalar is a 1x1 node.
//
// Usage: create leaves (parameters and inputs), compose ops, call
// backward() on a 1x1 loss node, then read grad() of any leaf created
// with requires_grad = true. Tapes are single-use per backward pass.
class Tape {
 public:
  Var leaf(const Mat& value, bool requires_grad = false) {
    return push(value, requires_grad, {});
  }
  Var leaf(const Vec& value, bool requires_grad = false) {
    return push(Mat(value), requires_grad, {});
  }
  Var scalar(double v) {
    Mat m(1, 1);
    m(0, 0) = v;
    return push(m, false, {});
  }

  const Mat& val(Var v) const { return nodes_[v.id].value; }
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    require(A.cols() == B.rows(), "matmul: inner dimensions differ");
    Var out = push(A * B, false, {a, b});
    set_backward(out, [a, b, out](Tape& t) {
      const Mat& g = t.nodes_[out.id].grad;
      t.accum(a, g * t.val(b).transpose());
      t.accum(b, t.val(a).transpose() * g);
    });
    return out;
  }

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    Var out = push(val(a) + val(b), false, {a, b});
    set_backward(out, [a, b, out](Tape& t) {
      const Mat& g = t.nodes_[out.id].grad;
      t.accum(a, g);
      t.accum(b, g);
    });
    return out;
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    Var out = push(val(a) - val(b), false, {a, b});
    set_backward(out, [a, b, out](Tape& t) {
      const Mat& g = t.nodes_[out.id].grad;
      t.accum(a, g);
      t.accum(b, -g);
    });
    return out;
  }

  // bias is (r x 1), broadcast across the columns of a
  Var add_bias(Var a, Var bias) {
    const Mat& A = val(a);
    const Mat& B = val(bias);
    require(B.cols() == 1 && B.rows() == A.rows(), "add_bias: bias must be (rows x 1)");
    Var out = push(A.colwise() + B.col(0), false, {a, bias});
    set_backward(out, [a, bias, out](Tape& t) {
      const Mat& g = t.nodes_[out.id].grad;
      t.accum(a, g);
      t.accum(bias, g.rowwise().sum());
    });
    return out;
  }

  Var cmul(Var a, Var b) {
    same_shape(a, b, "cmul");
    Var out = push(val(a).cwiseProduct(val(b)), false, {a, b});
    set_backward(out, [a, b, out](Tape& t) {
      const Mat& g = t.nodes_[out.id].grad;
      t.accum(a, g.cwiseProduct(t.val(b)));
      t.accum(b, g.cwiseProduct(t.val(a)));
    });
    return out;
  }

  Var scale(Var a, double s) {
    Var out = push(val(a) * s, false, {a});
    set_backward(out, [a, s, out](Tape& t) { t.accum(a, t.nodes_[out.id].grad * s); });
    return out;
  }

  Var add_const(Var a, double c) {
    Var out = push(val(a).array() + c, false, {a});
    set_backward(out, [a, out](Tape& t) { t.accum(a, t.nodes_[out.id].grad); });
    return out;
  }

  Var tanh_(Var a) {
    Mat y = val(a).array().tanh();
    Var out = push(y, false, {a});
    set_backward(out, [a, out](Tape& t) {
      const Mat& g = t.nodes_[out.id].grad;
      const Mat& y = t.val(out);
      t.accum(a, g.cwiseProduct(Mat(1.0 - y.array().square())));
    });
    return out;
  }

  Var sigmoid_(Var a) {
    Mat y = (1.0 / (1.0 + (-val(a).array()).exp())).matrix();
    Var out = push(y, false, {a});
    set_backward(out, [a, out](Tape& t) {
      const Mat& g = t.nodes_[out.id].grad;
      const Mat& y = t.val(out);
      t.accum(a, g.cwiseProduct(Mat(y.array() * (1.0 - y.array()))));
    });
    return out;
  }

  Var exp_(Var a) {
    Var out = push(val(a).array().exp(), false, {a});
    set_backward(out, [a, out](Tape& t) {
      t.accum(a, t.nodes_[out.id].grad.cwiseProduct(t.val(out)));
    });
    return out;
  }

  Var log_(Var a) {
    Var out = push(val(a).array().log(), false, {a});
    set_backward(out, [a, out](Tape& t) {
      t.accum(a, t.nodes_[out.id].grad.cwiseQuotient(t.val(a)));
    });
    return out;
  }

  Var square_(Var a) {
    Var out = push(val(a).array().square(), false, {a});
    set_backward(out, [a, out](Tape& t) {
      t.accum(a, 2.0 * t.nodes_[out.id].grad.cwiseProduct(t.val(a)));
    });
    return out;
  }

  Var sqrt_(Var a) {
    Var out = push(val(a).array().max(0.0).sqrt(), false, {a});
    set_backward(out, [a, out](Tape& t) {
      Mat denom = 2.0 * t.val(out).array().max(1e-12);
      t.accum(a, t.nodes_[out.id].grad.cwiseQuotient(denom));
    });
    return out;
  }

  Var cmin(Var a, Var b) {
    same_shape(a, b, "cmin");
    Var out = push(val(a).cwiseMin(val(b)), false, {a, b});
    set_backward(out, [a, b, out](Tape& t) {
      const Mat& g = t.nodes_[out.id].grad;
      Mat take_a = (t.val(a).array() <= t.val(b).array()).cast<double>();
      t.accum(a, g.cwiseProduct(take_a));
      t.accum(b, g.cwiseProduct(Mat(1.0 - take_a.array())));
    });
    return out;
  }

  Var clamp_(Var a, double lo, double hi) {
    Var out = push(val(a).array().max(lo).min(hi), false, {a});
    set_backward(out, [a, lo, hi, out](Tape& t) {
      const Mat& x = t.val(a);
      Mat inside = ((x.array() > lo) && (x.array() < hi)).cast<double>();
      t.accum(a, t.nodes_[out.id].grad.cwiseProduct(inside));
    });
    return out;
  }

  Var sum(Var a) {
    Mat m(1, 1);
    m(0, 0) = val(a).sum();
    Var out = push(m, false, {a});
    set_backward(out, [a, out](Tape& t) {
      double g = t.nodes_[out.id].grad(0, 0);
      t.accum(a, Mat::Constant(t.val(a).rows(), t.val(a).cols(), g));
    });
    return out;
  }

  Var mean(Var a) { return scale(sum(a), 1.0 / double(val(a).size())); }

  // per-column sums, (r x c) -> (1 x c)
  Var colwise_sum(Var a) {
    Var out = push(val(a).colwise().sum(), false, {a});
    set_backward(out, [a, out](Tape& t) {
      const Mat& g = t.nodes_[out.id].grad;
      Mat ga(t.val(a).rows(), t.val(a).cols());
      for (Eigen::Index j = 0; j < ga.cols(); ++j) ga.col(j).setConstant(g(0, j));
      t.accum(a, ga);
    });
    return out;
  }

  // l-infinity norm of all entries; sub-gradient routed to one argmax entry
  Var max_abs(Var a) {
    Eigen::Index ri = 0, ci = 0;
    val(a).cwiseAbs().maxCoeff(&ri, &ci);
    Mat m(1, 1);
    m(0, 0) = std::abs(val(a)(ri, ci));
    Var out = push(m, false, {a});
    set_backward(out, [a, ri, ci, out](Tape& t) {
      double s = t.val(a)(ri, ci) >= 0 ? 1.0 : -1.0;
      Mat ga = Mat::Zero(t.val(a).rows(), t.val(a).cols());
      ga(ri, ci) = s * t.nodes_[out.id].grad(0, 0);
      t.accum(a, ga);
    });
    return out;
  }

  // vertical concatenation, [a; b]
  Var vcat(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    require(A.cols() == B.cols(), "vcat: column counts differ");
    Mat m(A.rows() + B.rows(), A.cols());
    m.topRows(A.rows()) = A;
    m.bottomRows(B.rows()) = B;
    Var out = push(m, false, {a, b});
    set_backward(out, [a, b, out](Tape& t) {
      const Mat& g = t.nodes_[out.id].grad;
      Eigen::Index ra = t.val(a).rows();
      t.accum(a, g.topRows(ra));
      t.accum(b, g.bottomRows(g.rows() - ra));
    });
    return out;
  }

  Var sum_sq(Var a) { return sum(square_(a)); }
  Var neg(Var a) { return scale(a, -1.0); }

  void backward(Var loss) {
    require(val(loss).rows() == 1 && val(loss).cols() == 1, "backward: loss must be scalar");
    for (auto& n : nodes_) {
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    }
    nodes_[loss.id].grad(0, 0) = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      if (nodes_[i].backward && nodes_[i].grad.cwiseAbs().sum() != 0.0) {
        nodes_[i].backward(*this);
      }
    }
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::function<void(Tape&)> backward;
  };

  Var push(Mat value, bool requires_grad, std::initializer_list<Var>) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, nullptr});
    return Var{int(nodes_.size()) - 1};
  }
  void set_backward(Var v, std::function<void(Tape&)> fn) {
    nodes_[v.id].backward = std::move(fn);
  }
  void accum(Var v, const Mat& g) { nodes_[v.id].grad += g; }
  void same_shape(Var a, Var b, const char* op) const {
    require(val(a).rows() == val(b).rows() && val(a).cols() == val(b).cols(),
            std::string(op) + ": shapes differ");
  }

  std::vector<Node> nodes_;
};

}  // namespace obsdef::diff
