#include "respalloc/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "respalloc/errors.hpp"

namespace resp {

namespace {

double wrap_heading(double h) {
  double w = std::remainder(h, 2.0 * M_PI);
  if (w <= -M_PI) w = M_PI;  // remainder returns [-pi, pi]; fold -pi to +pi
  return w;
}

}  // namespace

bool SceneSequence::agent_valid(long a) const { return last_valid_time(a) >= 0; }

long SceneSequence::last_valid_time(long a) const {
  for (long t = t_max - 1; t >= 0; --t)
    if (is_valid(a, t)) return t;
  return -1;
}

SceneSequence flatten_scene(const std::vector<AgentTrack>& tracks, long n_max, long ego_index) {
  if (tracks.empty()) throw InvalidInputError("flatten_scene: empty scene");
  if (n_max < 1) throw InvalidInputError("flatten_scene: n_max must be >= 1");
  const long T = static_cast<long>(tracks[0].steps.size());
  if (T < 1) throw InvalidInputError("flatten_scene: empty history window");
  for (const auto& tr : tracks) {
    if (static_cast<long>(tr.steps.size()) != T || tr.present.size() != tr.steps.size())
      throw InvalidInputError("flatten_scene: tracks must share the window length");
  }

  // Over-full scene: keep ego plus the nearest others at the window end.
  std::vector<std::size_t> keep(tracks.size());
  std::iota(keep.begin(), keep.end(), 0);
  if (static_cast<long>(tracks.size()) > n_max) {
    if (ego_index < 0 || ego_index >= static_cast<long>(tracks.size()))
      throw InvalidInputError("flatten_scene: ego_index out of range");
    if (!tracks[ego_index].present[T - 1])
      throw InvalidInputError("flatten_scene: ego absent at the window end");
    const Eigen::Vector2d ego_p = tracks[ego_index].steps[T - 1].position;
    std::vector<std::size_t> others;
    for (std::size_t i = 0; i < tracks.size(); ++i)
      if (static_cast<long>(i) != ego_index) others.push_back(i);
    auto dist = [&](std::size_t i) {
      if (!tracks[i].present[T - 1]) return std::numeric_limits<double>::infinity();
      return (tracks[i].steps[T - 1].position - ego_p).norm();
    };
    std::sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) {
      const double da = dist(a), db = dist(b);
      if (da != db) return da < db;
      return tracks[a].agent_id < tracks[b].agent_id;
    });
    keep.clear();
    keep.push_back(static_cast<std::size_t>(ego_index));
    for (std::size_t i = 0; i < others.size() && static_cast<long>(keep.size()) < n_max; ++i)
      keep.push_back(others[i]);
    std::sort(keep.begin(), keep.end());  // preserve original slot order
  }

  bool anyone_at_end = false;
  SceneSequence seq;
  seq.n_agents = static_cast<long>(keep.size());
  seq.n_max = n_max;
  seq.t_max = T;
  seq.tokens.assign(static_cast<std::size_t>(n_max * T), AgentToken{});
  seq.valid.assign(static_cast<std::size_t>(n_max * T), 0);
  seq.agent_ids.assign(static_cast<std::size_t>(n_max), -1);
  seq.current_states.assign(static_cast<std::size_t>(n_max), AgentPhysState{});

  for (long a = 0; a < seq.n_agents; ++a) {
    const AgentTrack& tr = tracks[keep[a]];
    seq.agent_ids[a] = tr.agent_id;
    long last_t = -1;
    for (long t = 0; t < T; ++t) {
      if (!tr.present[t]) continue;
      AgentToken tok = tr.steps[t];
      if (!tok.position.allFinite() || !tok.velocity.allFinite() || !std::isfinite(tok.heading))
        throw InvalidInputError("flatten_scene: non-finite token");
      tok.agent_type = tr.agent_type;
      tok.heading = wrap_heading(tok.heading);
      seq.tokens[seq.flat_index(a, t)] = tok;
      seq.valid[seq.flat_index(a, t)] = 1;
      last_t = t;
    }
    if (last_t < 0) throw InvalidInputError("flatten_scene: track with no present step");
    if (last_t == T - 1) anyone_at_end = true;
    const AgentToken& last = seq.tokens[seq.flat_index(a, last_t)];
    seq.current_states[a] = AgentPhysState{last.position, last.velocity};
  }
  if (!anyone_at_end) throw InvalidInputError("flatten_scene: no agent present at the window end");
  return seq;
}

Eigen::VectorXd token_features(const AgentToken& tok) {
  Eigen::VectorXd f(kTokenFeatDim);
  f << static_cast<double>(tok.agent_type), tok.position.x() * kPosScale,
      tok.position.y() * kPosScale, tok.velocity.x() * kVelScale, tok.velocity.y() * kVelScale,
      std::cos(tok.heading), std::sin(tok.heading);
  return f;
}

bool EncoderConfig::valid() const {
  if (kind != "attention" && kind != "mlp") return false;
  if (d_model < 2 || d_model % 2 != 0) return false;
  if (n_max < 1 || t_max < 1) return false;
  if (kind == "attention" && (layers < 1 || heads < 1 || d_model % heads != 0 || ff_hidden < 1))
    return false;
  if (kind == "mlp") {
    for (long w : mlp_hidden)
      if (w < 1) return false;
  }
  return activation == "tanh" || activation == "relu" || activation == "none";
}

namespace {

MLPSpec embed_spec(const EncoderConfig& cfg) {
  MLPSpec s;
  s.input = kTokenFeatDim;
  s.hidden = {cfg.d_model};
  s.output = cfg.d_model;
  s.activation = cfg.activation;
  return s;
}

AttentionSpec block_spec(const EncoderConfig& cfg) {
  AttentionSpec s;
  s.d_model = cfg.d_model;
  s.heads = cfg.heads;
  s.ff_hidden = cfg.ff_hidden;
  s.activation = cfg.activation;
  s.layer_norm = cfg.layer_norm;
  s.mask_groups = cfg.agent_aware ? 2 : 1;
  return s;
}

// mlp kind: own end-state features plus the mean relative state to the other
// valid agents.
MLPSpec agg_spec(const EncoderConfig& cfg) {
  MLPSpec s;
  s.input = kTokenFeatDim + 4;
  s.hidden = cfg.mlp_hidden;
  s.output = cfg.d_model;
  s.activation = cfg.activation;
  return s;
}

}  // namespace

void register_encoder(ParamStore& store, const std::string& prefix, const EncoderConfig& cfg) {
  if (!cfg.valid()) throw InvalidInputError("invalid encoder config for " + prefix);
  if (cfg.kind == "mlp") {
    register_mlp(store, prefix + ".agg", agg_spec(cfg));
    return;
  }
  register_mlp(store, prefix + ".embed", embed_spec(cfg));
  for (long l = 0; l < cfg.layers; ++l)
    register_attention(store, prefix + ".block" + std::to_string(l), block_spec(cfg));
}

namespace {

// All encoders compute on the compacted set of valid agents/tokens and
// scatter back into n_max rows. Running the dense kernels on identical
// matrices regardless of padding width is what makes padding invariance
// exact rather than within-rounding.
ContextFeatures encode_mlp(ParamBinding& params, const std::string& prefix,
                           const EncoderConfig& cfg, const SceneSequence& seq) {
  const long N = seq.n_max;
  std::vector<char> agent_valid(N, 0);
  std::vector<long> live;
  for (long a = 0; a < N; ++a)
    if (seq.last_valid_time(a) >= 0) {
      agent_valid[a] = 1;
      live.push_back(a);
    }
  ad::Tape& tape = *params[prefix + ".agg.W0"].tape();
  const long L = static_cast<long>(live.size());
  if (L == 0) {
    ContextFeatures out;
    out.features = tape.constant(Eigen::MatrixXd::Zero(N, cfg.d_model));
    out.agent_valid = std::move(agent_valid);
    return out;
  }

  Eigen::MatrixXd input = Eigen::MatrixXd::Zero(L, kTokenFeatDim + 4);
  for (long i = 0; i < L; ++i) {
    const long a = live[i];
    const AgentToken& own = seq.tokens[seq.flat_index(a, seq.last_valid_time(a))];
    input.row(i).head(kTokenFeatDim) = token_features(own).transpose();
    Eigen::Vector4d rel = Eigen::Vector4d::Zero();
    long n_other = 0;
    for (long j = 0; j < L; ++j) {
      if (j == i) continue;
      const long b = live[j];
      const AgentToken& oth = seq.tokens[seq.flat_index(b, seq.last_valid_time(b))];
      rel.head<2>() += (oth.position - own.position) * kPosScale;
      rel.tail<2>() += (oth.velocity - own.velocity) * kVelScale;
      ++n_other;
    }
    if (n_other > 0) rel /= static_cast<double>(n_other);
    input.row(i).tail(4) = rel.transpose();
  }

  ad::Var h = mlp_forward(params, prefix + ".agg", agg_spec(cfg), tape.constant(input));
  // 0/1 scatter keeps invalid rows exactly zero and live rows bit-identical
  // (every dropped term is an exact 0.0 product).
  Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(N, L);
  for (long i = 0; i < L; ++i) scatter(live[i], i) = 1.0;
  ContextFeatures out;
  out.features = tape.matmul(tape.constant(scatter), h);
  out.agent_valid = std::move(agent_valid);
  return out;
}

ContextFeatures encode_attention(ParamBinding& params, const std::string& prefix,
                                 const EncoderConfig& cfg, const SceneSequence& seq) {
  const long N = seq.n_max;
  const long T = seq.t_max;
  if (T > cfg.t_max)
    throw InvalidInputError("encode_context: history longer than configured t_max");

  // Compact to valid tokens, keeping flat (time-major) order. Slot indices
  // survive in live_agent/live_time for masks and readout.
  std::vector<long> live_agent, live_time;
  for (long t = 0; t < T; ++t)
    for (long a = 0; a < N; ++a)
      if (seq.valid[seq.flat_index(a, t)]) {
        live_agent.push_back(a);
        live_time.push_back(t);
      }
  const long M = static_cast<long>(live_agent.size());

  std::vector<char> agent_valid(N, 0);
  for (long a = 0; a < N; ++a)
    if (seq.last_valid_time(a) >= 0) agent_valid[a] = 1;

  ad::Tape& tape = *params[prefix + ".embed.W0"].tape();
  if (M == 0) {
    ContextFeatures out;
    out.features = tape.constant(Eigen::MatrixXd::Zero(N, cfg.d_model));
    out.agent_valid = std::move(agent_valid);
    return out;
  }

  Eigen::MatrixXd feats(M, kTokenFeatDim);
  for (long i = 0; i < M; ++i)
    feats.row(i) =
        token_features(seq.tokens[seq.flat_index(live_agent[i], live_time[i])]).transpose();

  ad::Var x = mlp_forward(params, prefix + ".embed", embed_spec(cfg), tape.constant(feats));

  Eigen::MatrixXd time_codes(M, cfg.d_model);
  for (long i = 0; i < M; ++i) time_codes.row(i) = time_embed(live_time[i], cfg.d_model).transpose();
  x = tape.add(x, tape.constant(time_codes));

  Eigen::MatrixXd same = Eigen::MatrixXd::Zero(M, M);
  Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(M, M);
  for (long q = 0; q < M; ++q)
    for (long k = 0; k < M; ++k) {
      if (live_agent[q] == live_agent[k])
        same(q, k) = 1.0;
      else
        cross(q, k) = 1.0;
    }
  std::vector<Eigen::MatrixXd> masks;
  if (cfg.agent_aware) {
    masks = {same, cross};
  } else {
    masks = {same + cross};
  }

  for (long l = 0; l < cfg.layers; ++l)
    x = attention_block(params, prefix + ".block" + std::to_string(l), block_spec(cfg), x, masks);

  // Per-agent readout at the last valid token (the window-end token when the
  // agent is present there). The 0/1 selector keeps invalid rows exactly zero.
  Eigen::MatrixXd readout = Eigen::MatrixXd::Zero(N, M);
  for (long i = 0; i < M; ++i) {
    const long a = live_agent[i];
    if (live_time[i] == seq.last_valid_time(a)) readout(a, i) = 1.0;
  }

  ContextFeatures out;
  out.features = tape.matmul(tape.constant(readout), x);
  out.agent_valid = std::move(agent_valid);
  return out;
}

}  // namespace

ContextFeatures encode_context(ParamBinding& params, const std::string& prefix,
                               const EncoderConfig& cfg, const SceneSequence& seq) {
  if (!cfg.valid()) throw InvalidInputError("invalid encoder config");
  if (seq.n_max < 1 || seq.t_max < 1 || static_cast<long>(seq.valid.size()) != seq.n_max * seq.t_max)
    throw InvalidInputError("encode_context: malformed scene sequence");
  if (seq.n_max > cfg.n_max) throw InvalidInputError("encode_context: scene exceeds configured n_max");
  if (cfg.kind == "mlp") return encode_mlp(params, prefix, cfg, seq);
  return encode_attention(params, prefix, cfg, seq);
}

}  // namespace resp
