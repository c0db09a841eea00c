#include "respalloc/tape.hpp"

#include <cmath>

#include "respalloc/errors.hpp"

namespace resp::ad {

const Mat Tape::empty_;

const Mat& Var::value() const {
  if (!tape_) throw InvalidInputError("ad::Var: undefined handle");
  return tape_->val(idx_);
}

Var Tape::push(Mat value, bool requires_grad, std::function<void(Tape&, const Mat&)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(Mat v) { return push(std::move(v), true, nullptr); }
Var Tape::constant(Mat v) { return push(std::move(v), false, nullptr); }

void Tape::accumulate(int idx, const Mat& g) {
  Node& n = nodes_[idx];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

namespace {
void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidInputError(std::string("ad::") + op + ": shape mismatch");
  }
}
}  // namespace

Var Tape::add(Var a, Var b) {
  check_same_shape(a, b, "add");
  const int ia = a.index(), ib = b.index();
  return push(val(ia) + val(ib), rg(a) || rg(b), [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var Tape::sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  const int ia = a.index(), ib = b.index();
  return push(val(ia) - val(ib), rg(a) || rg(b), [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var Tape::neg(Var a) {
  const int ia = a.index();
  return push(-val(ia), rg(a), [ia](Tape& t, const Mat& g) { t.accumulate(ia, -g); });
}

Var Tape::mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  const int ia = a.index(), ib = b.index();
  return push(val(ia).cwiseProduct(val(ib)), rg(a) || rg(b), [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g.cwiseProduct(t.val(ib)));
    t.accumulate(ib, g.cwiseProduct(t.val(ia)));
  });
}

Var Tape::smul(Var scalar, Var m) {
  if (scalar.rows() != 1 || scalar.cols() != 1) {
    throw InvalidInputError("ad::smul: first argument must be 1x1");
  }
  const int is = scalar.index(), im = m.index();
  return push(val(is)(0, 0) * val(im), rg(scalar) || rg(m), [is, im](Tape& t, const Mat& g) {
    Mat gs(1, 1);
    gs(0, 0) = g.cwiseProduct(t.val(im)).sum();
    t.accumulate(is, gs);
    t.accumulate(im, t.val(is)(0, 0) * g);
  });
}

Var Tape::cmul(Var a, const Mat& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) {
    throw InvalidInputError("ad::cmul: shape mismatch");
  }
  const int ia = a.index();
  return push(val(ia).cwiseProduct(c), rg(a),
              [ia, c](Tape& t, const Mat& g) { t.accumulate(ia, g.cwiseProduct(c)); });
}

Var Tape::scale(Var a, double s) {
  const int ia = a.index();
  return push(s * val(ia), rg(a), [ia, s](Tape& t, const Mat& g) { t.accumulate(ia, s * g); });
}

Var Tape::add_const(Var a, double s) {
  const int ia = a.index();
  return push(val(ia).array() + s, rg(a), [ia](Tape& t, const Mat& g) { t.accumulate(ia, g); });
}

Var Tape::matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw InvalidInputError("ad::matmul: inner dimension mismatch");
  }
  const int ia = a.index(), ib = b.index();
  return push(val(ia) * val(ib), rg(a) || rg(b), [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g * t.val(ib).transpose());
    t.accumulate(ib, t.val(ia).transpose() * g);
  });
}

Var Tape::transpose(Var a) {
  const int ia = a.index();
  return push(val(ia).transpose(), rg(a),
              [ia](Tape& t, const Mat& g) { t.accumulate(ia, g.transpose()); });
}

Var Tape::tanh(Var a) {
  const int ia = a.index();
  Mat y = val(ia).array().tanh();
  return push(std::move(y), rg(a), [ia, iy = static_cast<int>(nodes_.size())](Tape& t, const Mat& g) {
    const Mat& y = t.val(iy);
    t.accumulate(ia, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var Tape::relu(Var a) {
  const int ia = a.index();
  return push(val(ia).cwiseMax(0.0), rg(a), [ia](Tape& t, const Mat& g) {
    t.accumulate(ia, (t.val(ia).array() > 0.0).select(g, Mat::Zero(g.rows(), g.cols())));
  });
}

Var Tape::exp(Var a) {
  const int ia = a.index();
  Mat y = val(ia).array().exp();
  return push(std::move(y), rg(a), [ia, iy = static_cast<int>(nodes_.size())](Tape& t, const Mat& g) {
    t.accumulate(ia, g.cwiseProduct(t.val(iy)));
  });
}

Var Tape::log(Var a) {
  const int ia = a.index();
  return push(val(ia).array().log(), rg(a), [ia](Tape& t, const Mat& g) {
    t.accumulate(ia, g.cwiseQuotient(t.val(ia)));
  });
}

Var Tape::max_const(Var a, double c) {
  const int ia = a.index();
  return push(val(ia).cwiseMax(c), rg(a), [ia, c](Tape& t, const Mat& g) {
    t.accumulate(ia, (t.val(ia).array() > c).select(g, Mat::Zero(g.rows(), g.cols())));
  });
}

Var Tape::clamp(Var a, double lo, double hi) {
  const int ia = a.index();
  return push(val(ia).cwiseMax(lo).cwiseMin(hi), rg(a), [ia, lo, hi](Tape& t, const Mat& g) {
    const auto& x = t.val(ia).array();
    t.accumulate(ia, ((x > lo) && (x < hi)).select(g, Mat::Zero(g.rows(), g.cols())));
  });
}

Var Tape::sum(Var a) {
  const int ia = a.index();
  Mat y(1, 1);
  y(0, 0) = val(ia).sum();
  return push(std::move(y), rg(a), [ia](Tape& t, const Mat& g) {
    t.accumulate(ia, Mat::Constant(t.val(ia).rows(), t.val(ia).cols(), g(0, 0)));
  });
}

Var Tape::block(Var a, long r0, long c0, long nr, long nc) {
  if (r0 < 0 || c0 < 0 || r0 + nr > a.rows() || c0 + nc > a.cols()) {
    throw InvalidInputError("ad::block: out of range");
  }
  const int ia = a.index();
  return push(val(ia).block(r0, c0, nr, nc), rg(a), [ia, r0, c0, nr, nc](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(t.val(ia).rows(), t.val(ia).cols());
    full.block(r0, c0, nr, nc) = g;
    t.accumulate(ia, full);
  });
}

Var Tape::rows(Var a, long r0, long nr) { return block(a, r0, 0, nr, a.cols()); }

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidInputError("ad::concat_rows: empty");
  long total = 0;
  const long cols = parts.front().cols();
  bool any_rg = false;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw InvalidInputError("ad::concat_rows: column mismatch");
    total += p.rows();
    any_rg = any_rg || rg(p);
  }
  Mat y(total, cols);
  std::vector<int> idx;
  std::vector<long> offs;
  long r = 0;
  for (const Var& p : parts) {
    y.middleRows(r, p.rows()) = p.value();
    idx.push_back(p.index());
    offs.push_back(r);
    r += p.rows();
  }
  return push(std::move(y), any_rg, [idx, offs](Tape& t, const Mat& g) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      t.accumulate(idx[i], g.middleRows(offs[i], t.val(idx[i]).rows()));
    }
  });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidInputError("ad::concat_cols: empty");
  long total = 0;
  const long rows_n = parts.front().rows();
  bool any_rg = false;
  for (const Var& p : parts) {
    if (p.rows() != rows_n) throw InvalidInputError("ad::concat_cols: row mismatch");
    total += p.cols();
    any_rg = any_rg || rg(p);
  }
  Mat y(rows_n, total);
  std::vector<int> idx;
  std::vector<long> offs;
  long c = 0;
  for (const Var& p : parts) {
    y.middleCols(c, p.cols()) = p.value();
    idx.push_back(p.index());
    offs.push_back(c);
    c += p.cols();
  }
  return push(std::move(y), any_rg, [idx, offs](Tape& t, const Mat& g) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      t.accumulate(idx[i], g.middleCols(offs[i], t.val(idx[i]).cols()));
    }
  });
}

Var Tape::add_rowvec(Var m, Var row) {
  if (row.rows() != 1 || row.cols() != m.cols()) {
    throw InvalidInputError("ad::add_rowvec: row must be 1 x cols(m)");
  }
  const int im = m.index(), ir = row.index();
  return push(val(im).rowwise() + val(ir).row(0), rg(m) || rg(row),
              [im, ir](Tape& t, const Mat& g) {
                t.accumulate(im, g);
                t.accumulate(ir, g.colwise().sum());
              });
}

Var Tape::mul_rowvec(Var m, Var row) {
  if (row.rows() != 1 || row.cols() != m.cols()) {
    throw InvalidInputError("ad::mul_rowvec: row must be 1 x cols(m)");
  }
  const int im = m.index(), ir = row.index();
  Mat y = val(im).cwiseProduct(val(ir).replicate(val(im).rows(), 1));
  return push(std::move(y), rg(m) || rg(row), [im, ir](Tape& t, const Mat& g) {
    t.accumulate(im, g.cwiseProduct(t.val(ir).replicate(g.rows(), 1)));
    t.accumulate(ir, g.cwiseProduct(t.val(im)).colwise().sum());
  });
}

Var Tape::add_colvec(Var m, Var col) {
  if (col.cols() != 1 || col.rows() != m.rows()) {
    throw InvalidInputError("ad::add_colvec: col must be rows(m) x 1");
  }
  const int im = m.index(), ic = col.index();
  return push(val(im).colwise() + val(ic).col(0), rg(m) || rg(col),
              [im, ic](Tape& t, const Mat& g) {
                t.accumulate(im, g);
                t.accumulate(ic, g.rowwise().sum());
              });
}

Var Tape::logsumexp_rows(Var m) {
  const int im = m.index();
  const Mat& x = val(im);
  Mat y(x.rows(), 1);
  for (long r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    y(r, 0) = mx + std::log((x.row(r).array() - mx).exp().sum());
  }
  return push(std::move(y), rg(m), [im, iy = static_cast<int>(nodes_.size())](Tape& t, const Mat& g) {
    const Mat& x = t.val(im);
    const Mat& y = t.val(iy);
    Mat gx(x.rows(), x.cols());
    for (long r = 0; r < x.rows(); ++r) {
      gx.row(r) = g(r, 0) * (x.row(r).array() - y(r, 0)).exp().matrix();
    }
    t.accumulate(im, gx);
  });
}

Var Tape::softmax_masked(Var logits, const Mat& allow) {
  if (allow.rows() != logits.rows() || allow.cols() != logits.cols()) {
    throw InvalidInputError("ad::softmax_masked: mask shape mismatch");
  }
  const int ia = logits.index();
  const Mat& z = val(ia);
  Mat y = Mat::Zero(z.rows(), z.cols());
  for (long r = 0; r < z.rows(); ++r) {
    double zmax = -std::numeric_limits<double>::infinity();
    for (long c = 0; c < z.cols(); ++c) {
      if (allow(r, c) != 0.0) zmax = std::max(zmax, z(r, c));
    }
    if (!std::isfinite(zmax)) continue;  // fully masked row stays zero
    double denom = 0.0;
    for (long c = 0; c < z.cols(); ++c) {
      if (allow(r, c) != 0.0) {
        y(r, c) = std::exp(z(r, c) - zmax);
        denom += y(r, c);
      }
    }
    for (long c = 0; c < z.cols(); ++c) {
      if (allow(r, c) != 0.0) y(r, c) /= denom;
    }
  }
  return push(std::move(y), rg(logits),
              [ia, allow, iy = static_cast<int>(nodes_.size())](Tape& t, const Mat& g) {
                const Mat& y = t.val(iy);
                Mat gz = Mat::Zero(y.rows(), y.cols());
                for (long r = 0; r < y.rows(); ++r) {
                  double inner = 0.0;
                  for (long c = 0; c < y.cols(); ++c) inner += g(r, c) * y(r, c);
                  for (long c = 0; c < y.cols(); ++c) {
                    if (allow(r, c) != 0.0) gz(r, c) = y(r, c) * (g(r, c) - inner);
                  }
                }
                t.accumulate(ia, gz);
              });
}

Var Tape::layer_norm_rows(Var m, double eps) {
  const int im = m.index();
  const Mat& x = val(im);
  const long d = x.cols();
  Mat y(x.rows(), d);
  Eigen::VectorXd inv_std(x.rows());
  for (long r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    y.row(r) = (x.row(r).array() - mean) * inv_std(r);
  }
  return push(std::move(y), rg(m),
              [im, inv_std, d, iy = static_cast<int>(nodes_.size())](Tape& t, const Mat& g) {
                const Mat& y = t.val(iy);
                Mat gx(y.rows(), y.cols());
                for (long r = 0; r < y.rows(); ++r) {
                  const double gmean = g.row(r).mean();
                  const double gy = (g.row(r).array() * y.row(r).array()).mean();
                  gx.row(r) =
                      inv_std(r) * (g.row(r).array() - gmean - y.row(r).array() * gy).matrix();
                }
                t.accumulate(im, gx);
              });
}

Var Tape::custom(Mat value, const std::vector<Var>& parents,
                 std::function<void(Tape&, const Mat&)> backward) {
  bool any_rg = false;
  for (const Var& p : parents) any_rg = any_rg || rg(p);
  return push(std::move(value), any_rg, any_rg ? std::move(backward) : nullptr);
}

void Tape::backward(Var root) {
  if (root.value().rows() != 1 || root.value().cols() != 1) {
    throw InvalidInputError("ad::backward: root must be a scalar");
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  nodes_[root.index()].grad = Mat::Ones(1, 1);
  for (int i = root.index(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.back && n.grad.size() != 0) {
      n.back(*this, n.grad);
    }
  }
}

const Mat& Tape::grad(Var v) const {
  const Node& n = nodes_[v.index()];
  return n.grad;
}

bool Tape::has_grad(Var v) const { return nodes_[v.index()].grad.size() != 0; }

}  // namespace resp::ad
