#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "respalloc/param_store.hpp"
#include "respalloc/tape.hpp"

namespace resp {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

// Diagonal Gaussian over rows (one row per agent, d columns).
struct GaussianParams {
  Eigen::MatrixXd mean;
  Eigen::MatrixXd log_var;  // clamped to [kLogVarMin, kLogVarMax]
};

struct MLPSpec {
  long input = 1;
  std::vector<long> hidden;
  long output = 1;
  std::string activation = "tanh";  // tanh | relu | none

  bool valid() const;
  std::vector<long> widths() const;  // input, hidden..., output
};

// Registers W/b slices for each layer under "<prefix>.W<i>" / "<prefix>.b<i>".
void register_mlp(ParamStore& store, const std::string& prefix, const MLPSpec& spec);

// input: rows = tokens/batch entries, cols = spec.input. Affine-activation
// chain; the final layer stays affine.
ad::Var mlp_forward(ParamBinding& params, const std::string& prefix, const MLPSpec& spec,
                    ad::Var input);

ad::Var apply_named_activation(ad::Tape& tape, ad::Var x, const std::string& name);

struct AttentionSpec {
  long d_model = 32;
  long heads = 2;
  long ff_hidden = 32;
  std::string activation = "tanh";
  bool layer_norm = false;
  // Independent Q/K projection sets. Standard attention uses one group; the
  // scene encoder uses two (same-agent vs cross-agent token pairs) so scores
  // can distinguish the two relations without breaking slot symmetry.
  long mask_groups = 1;

  bool valid() const;
};

void register_attention(ParamStore& store, const std::string& prefix, const AttentionSpec& spec);

// tokens: T×d_model. group_masks: spec.mask_groups matrices of shape T×T with
// 1 = key allowed for that group, 0 = not; groups must be disjoint. A query
// row with no allowed key in any group skips attention (residual passthrough)
// and only the tokenwise MLP branch applies.
ad::Var attention_block(ParamBinding& params, const std::string& prefix, const AttentionSpec& spec,
                        ad::Var tokens, const std::vector<Eigen::MatrixXd>& group_masks);

// Sinusoidal positional code of width d (d even): [sin(t/10000^{0/d}),
// cos(t/10000^{0/d}), sin(t/10000^{2/d}), ...].
Eigen::VectorXd time_embed(long t_index, long d);

}  // namespace resp
