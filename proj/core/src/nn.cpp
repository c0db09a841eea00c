#include "respalloc/nn.hpp"

#include <cmath>

#include "respalloc/errors.hpp"

namespace resp {

bool MLPSpec::valid() const {
  if (input < 1 || output < 1) return false;
  for (long w : hidden)
    if (w < 1) return false;
  return activation == "tanh" || activation == "relu" || activation == "none";
}

std::vector<long> MLPSpec::widths() const {
  std::vector<long> w;
  w.push_back(input);
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(output);
  return w;
}

void register_mlp(ParamStore& store, const std::string& prefix, const MLPSpec& spec) {
  if (!spec.valid()) throw InvalidInputError("invalid MLP spec for " + prefix);
  const auto w = spec.widths();
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    store.add(prefix + ".W" + std::to_string(i), w[i], w[i + 1], /*fan_in=*/w[i]);
    store.add(prefix + ".b" + std::to_string(i), 1, w[i + 1]);
  }
}

ad::Var apply_named_activation(ad::Tape& tape, ad::Var x, const std::string& name) {
  if (name == "tanh") return tape.tanh(x);
  if (name == "relu") return tape.relu(x);
  if (name == "none") return x;
  throw InvalidInputError("unknown activation: " + name);
}

ad::Var mlp_forward(ParamBinding& params, const std::string& prefix, const MLPSpec& spec,
                    ad::Var input) {
  if (!spec.valid()) throw InvalidInputError("invalid MLP spec for " + prefix);
  if (input.cols() != spec.input)
    throw InvalidInputError("mlp_forward: input width " + std::to_string(input.cols()) +
                            " does not match spec width " + std::to_string(spec.input));
  ad::Tape& tape = *input.tape();
  const auto w = spec.widths();
  ad::Var h = input;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    const std::string si = std::to_string(i);
    h = tape.add_rowvec(tape.matmul(h, params[prefix + ".W" + si]), params[prefix + ".b" + si]);
    if (i + 2 < w.size()) h = apply_named_activation(tape, h, spec.activation);
  }
  return h;
}

bool AttentionSpec::valid() const {
  return d_model >= 1 && heads >= 1 && d_model % heads == 0 && ff_hidden >= 1 &&
         mask_groups >= 1 &&
         (activation == "tanh" || activation == "relu" || activation == "none");
}

void register_attention(ParamStore& store, const std::string& prefix, const AttentionSpec& spec) {
  if (!spec.valid()) throw InvalidInputError("invalid attention spec for " + prefix);
  const long d = spec.d_model;
  for (long g = 0; g < spec.mask_groups; ++g) {
    store.add(prefix + ".Wq" + std::to_string(g), d, d, d);
    store.add(prefix + ".Wk" + std::to_string(g), d, d, d);
  }
  store.add(prefix + ".Wv", d, d, d);
  store.add(prefix + ".Wo", d, d, d);
  MLPSpec ff;
  ff.input = d;
  ff.hidden = {spec.ff_hidden};
  ff.output = d;
  ff.activation = spec.activation;
  register_mlp(store, prefix + ".ff", ff);
  if (spec.layer_norm) {
    store.add(prefix + ".ln1.g", 1, d, -1);
    store.add(prefix + ".ln1.b", 1, d);
    store.add(prefix + ".ln2.g", 1, d, -1);
    store.add(prefix + ".ln2.b", 1, d);
  }
}

ad::Var attention_block(ParamBinding& params, const std::string& prefix, const AttentionSpec& spec,
                        ad::Var tokens, const std::vector<Eigen::MatrixXd>& group_masks) {
  if (!spec.valid()) throw InvalidInputError("invalid attention spec for " + prefix);
  if (tokens.cols() != spec.d_model) throw InvalidInputError("attention_block: token width mismatch");
  if (static_cast<long>(group_masks.size()) != spec.mask_groups)
    throw InvalidInputError("attention_block: expected " + std::to_string(spec.mask_groups) +
                            " group masks");
  const long T = tokens.rows();
  const long d = spec.d_model;
  const long dk = d / spec.heads;
  for (const auto& m : group_masks) {
    if (m.rows() != T || m.cols() != T)
      throw InvalidInputError("attention_block: mask shape mismatch");
  }
  Eigen::MatrixXd allow = Eigen::MatrixXd::Zero(T, T);
  for (const auto& m : group_masks) allow += m;
  if ((allow.array() > 1.0 + 1e-12).any())
    throw InvalidInputError("attention_block: group masks overlap");

  ad::Tape& tape = *tokens.tape();
  ad::Var v_full = tape.matmul(tokens, params[prefix + ".Wv"]);

  std::vector<ad::Var> q_full, k_full;
  for (long g = 0; g < spec.mask_groups; ++g) {
    q_full.push_back(tape.matmul(tokens, params[prefix + ".Wq" + std::to_string(g)]));
    k_full.push_back(tape.matmul(tokens, params[prefix + ".Wk" + std::to_string(g)]));
  }

  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<ad::Var> head_outputs;
  for (long h = 0; h < spec.heads; ++h) {
    ad::Var logits;  // masked sum over groups; disallowed entries stay 0 and
                     // are ignored by the masked softmax
    for (long g = 0; g < spec.mask_groups; ++g) {
      ad::Var qh = tape.block(q_full[g], 0, h * dk, T, dk);
      ad::Var kh = tape.block(k_full[g], 0, h * dk, T, dk);
      ad::Var s = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dk);
      ad::Var masked = tape.cmul(s, group_masks[g]);
      logits = logits.defined() ? tape.add(logits, masked) : masked;
    }
    ad::Var p = tape.softmax_masked(logits, allow);
    ad::Var vh = tape.block(v_full, 0, h * dk, T, dk);
    head_outputs.push_back(tape.matmul(p, vh));
  }
  ad::Var context = spec.heads == 1 ? head_outputs[0] : tape.concat_cols(head_outputs);

  ad::Var x = tape.add(tokens, tape.matmul(context, params[prefix + ".Wo"]));
  if (spec.layer_norm)
    x = tape.add_rowvec(tape.mul_rowvec(tape.layer_norm_rows(x), params[prefix + ".ln1.g"]),
                        params[prefix + ".ln1.b"]);

  MLPSpec ff;
  ff.input = d;
  ff.hidden = {spec.ff_hidden};
  ff.output = d;
  ff.activation = spec.activation;
  ad::Var y = tape.add(x, mlp_forward(params, prefix + ".ff", ff, x));
  if (spec.layer_norm)
    y = tape.add_rowvec(tape.mul_rowvec(tape.layer_norm_rows(y), params[prefix + ".ln2.g"]),
                        params[prefix + ".ln2.b"]);
  return y;
}

Eigen::VectorXd time_embed(long t_index, long d) {
  if (t_index < 0) throw InvalidInputError("time_embed: negative t_index");
  if (d < 2 || d % 2 != 0) throw InvalidInputError("time_embed: width must be even and >= 2");
  Eigen::VectorXd e(d);
  for (long i = 0; i < d / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const double angle = static_cast<double>(t_index) * freq;
    e[2 * i] = std::sin(angle);
    e[2 * i + 1] = std::cos(angle);
  }
  return e;
}

}  // namespace resp
