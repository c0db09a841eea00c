#pragma once

#include <functional>
#include <vector>

#include <Eigen/Core>

namespace resp::ad {

using Mat = Eigen::MatrixXd;

class Tape;

// Handle to a tape node. Cheap to copy; valid while its tape is alive.
class Var {
 public:
  Var() = default;
  const Mat& value() const;
  long rows() const { return value().rows(); }
  long cols() const { return value().cols(); }
  bool defined() const { return tape_ != nullptr; }
  int index() const { return idx_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* t, int i) : tape_(t), idx_(i) {}
  Tape* tape_ = nullptr;
  int idx_ = -1;
};

// Reverse-mode tape over dense matrices. Nodes are appended in topological
// order, so one reverse sweep propagates adjoints. A fresh tape per forward
// pass; no graph reuse.
class Tape {
 public:
  Var leaf(Mat v);      // gradient-tracked input
  Var constant(Mat v);  // no gradient

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var neg(Var a);
  Var mul(Var a, Var b);  // elementwise
  Var smul(Var scalar, Var m);  // 1x1 scalar times matrix
  Var cmul(Var a, const Mat& c);  // elementwise by a constant mask/matrix
  Var scale(Var a, double s);
  Var add_const(Var a, double s);
  Var matmul(Var a, Var b);
  Var transpose(Var a);

  Var tanh(Var a);
  Var relu(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var max_const(Var a, double c);
  Var clamp(Var a, double lo, double hi);

  Var sum(Var a);  // 1x1
  Var dot(Var a, Var b) { return sum(mul(a, b)); }
  Var square(Var a) { return mul(a, a); }

  Var block(Var a, long r0, long c0, long nr, long nc);
  Var rows(Var a, long r0, long nr);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  Var add_rowvec(Var m, Var row);  // broadcast a 1xD row over all rows of m
  Var mul_rowvec(Var m, Var row);  // broadcast-multiply a 1xD row over all rows of m
  Var add_colvec(Var m, Var col);  // broadcast an Nx1 column over all columns of m
  Var logsumexp_rows(Var m);       // Nx1 of log(sum_j exp(m_ij)), max-stabilized

  // Row-wise softmax restricted to entries where allow != 0. Disallowed
  // entries output exactly zero and never touch the inputs; fully masked
  // rows output zero.
  Var softmax_masked(Var logits, const Mat& allow);

  Var layer_norm_rows(Var m, double eps = 1e-5);

  // Node with a user-supplied backward. The callback receives the output
  // adjoint and pushes gradients to the parents via accumulate().
  Var custom(Mat value, const std::vector<Var>& parents,
             std::function<void(Tape&, const Mat& g)> backward);

  void accumulate(int idx, const Mat& g);

  void backward(Var root);  // root must be 1x1
  const Mat& grad(Var v) const;
  bool has_grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Var;
  struct Node {
    Mat value;
    Mat grad;  // empty until touched
    bool requires_grad = false;
    std::function<void(Tape&, const Mat&)> back;
  };

  Var push(Mat value, bool requires_grad, std::function<void(Tape&, const Mat&)> back);
  bool rg(Var v) const { return nodes_[v.idx_].requires_grad; }
  const Mat& val(int idx) const { return nodes_[idx].value; }

  std::vector<Node> nodes_;
  static const Mat empty_;
};

}  // namespace resp::ad
