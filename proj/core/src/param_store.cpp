#include "respalloc/param_store.hpp"

#include <cmath>

#include "respalloc/errors.hpp"

namespace resp {

void ParamStore::add(const std::string& name, long rows, long cols, long fan_in) {
  if (index_.count(name)) throw InvalidInputError("duplicate parameter slice: " + name);
  if (rows <= 0 || cols <= 0) throw InvalidInputError("parameter slice must be non-empty: " + name);
  Slice s;
  s.name = name;
  s.offset = flat_.size();
  s.rows = rows;
  s.cols = cols;
  s.fan_in = fan_in;
  index_[name] = slices_.size();
  slices_.push_back(s);
  flat_.conservativeResize(s.offset + rows * cols);
  flat_.segment(s.offset, rows * cols).setZero();
}

const ParamStore::Slice& ParamStore::slice(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidInputError("unknown parameter slice: " + name);
  return slices_[it->second];
}

Eigen::MatrixXd ParamStore::get(const std::string& name) const {
  const Slice& s = slice(name);
  return Eigen::Map<const Eigen::MatrixXd>(flat_.data() + s.offset, s.rows, s.cols);
}

void ParamStore::set(const std::string& name, const Eigen::MatrixXd& value) {
  const Slice& s = slice(name);
  if (value.rows() != s.rows || value.cols() != s.cols)
    throw InvalidInputError("shape mismatch for parameter slice: " + name);
  Eigen::Map<Eigen::MatrixXd>(flat_.data() + s.offset, s.rows, s.cols) = value;
}

void ParamStore::init_params(Rng& rng) {
  for (const Slice& s : slices_) {
    auto seg = flat_.segment(s.offset, s.rows * s.cols);
    if (s.fan_in < 0) {
      seg.setOnes();
      continue;
    }
    if (s.fan_in == 0) {
      seg.setZero();
      continue;
    }
    const double bound = std::sqrt(3.0 / static_cast<double>(s.fan_in));
    for (long i = 0; i < seg.size(); ++i) seg[i] = rng.uniform(-bound, bound);
  }
}

ad::Var ParamBinding::operator[](const std::string& name) {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) return it->second;
  ad::Var v = tape_->leaf(store_->get(name));
  leaves_.emplace(name, v);
  return v;
}

void ParamBinding::collect_grads(Eigen::VectorXd& flat_grad) const {
  if (flat_grad.size() != store_->flat().size())
    throw InvalidInputError("flat_grad size does not match parameter store");
  for (const auto& [name, var] : leaves_) {
    if (!var.tape()->has_grad(var)) continue;
    const ParamStore::Slice& s = store_->slice(name);
    const Eigen::MatrixXd& g = var.tape()->grad(var);
    Eigen::Map<Eigen::MatrixXd>(flat_grad.data() + s.offset, s.rows, s.cols) += g;
  }
}

}  // namespace resp
