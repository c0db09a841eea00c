#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "respalloc/rng.hpp"
#include "respalloc/tape.hpp"

namespace resp {

// Named matrix slices over one flat parameter vector. The flat layout is what
// the optimizer and checkpoints see; modules address parameters by name.
class ParamStore {
 public:
  struct Slice {
    std::string name;
    long offset = 0;
    long rows = 0;
    long cols = 0;
    long fan_in = 0;  // 0: zero-init (biases); -1: ones-init (norm gains)
  };

  // Registers a new slice (zero-filled). fan_in > 0 selects uniform
  // fan-in-scaled init when init_params() runs.
  void add(const std::string& name, long rows, long cols, long fan_in = 0);

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const Slice& slice(const std::string& name) const;
  const std::vector<Slice>& slices() const { return slices_; }

  Eigen::MatrixXd get(const std::string& name) const;
  void set(const std::string& name, const Eigen::MatrixXd& value);

  Eigen::VectorXd& flat() { return flat_; }
  const Eigen::VectorXd& flat() const { return flat_; }
  long size() const { return flat_.size(); }

  // Uniform(-sqrt(3/fan_in), sqrt(3/fan_in)) for weight slices, zeros for
  // slices registered with fan_in = 0.
  void init_params(Rng& rng);

 private:
  std::vector<Slice> slices_;
  std::unordered_map<std::string, std::size_t> index_;
  Eigen::VectorXd flat_ = Eigen::VectorXd::Zero(0);
};

// Binds a store to a tape for one forward/backward pass: parameters become
// leaves on first use, and collect_grads() scatters leaf adjoints back into
// a flat gradient vector.
class ParamBinding {
 public:
  ParamBinding(ad::Tape& tape, const ParamStore& store) : tape_(&tape), store_(&store) {}

  ad::Var operator[](const std::string& name);

  // Adds each used parameter's adjoint into flat_grad (same layout as the
  // store's flat vector). Unused or untouched slices contribute nothing.
  void collect_grads(Eigen::VectorXd& flat_grad) const;

 private:
  ad::Tape* tape_;
  const ParamStore* store_;
  std::unordered_map<std::string, ad::Var> leaves_;
};

}  // namespace resp
