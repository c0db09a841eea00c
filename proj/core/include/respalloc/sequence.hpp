#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "respalloc/dynamics.hpp"
#include "respalloc/nn.hpp"
#include "respalloc/param_store.hpp"
#include "respalloc/tape.hpp"

namespace resp {

struct AgentToken {
  int agent_type = 0;
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  Eigen::Vector2d velocity = Eigen::Vector2d::Zero();
  double heading = 0.0;  // wrapped to (-pi, pi]
};

// One agent's history over a fixed window; present[t] marks which steps exist.
struct AgentTrack {
  long agent_id = 0;
  int agent_type = 0;
  std::vector<AgentToken> steps;
  std::vector<char> present;
};

// Agent-time token grid, flattened time-major: index(a,t) = t*n_max + a, so
// the token order is a1t1, a2t1, ..., aNt1, a1t2, ...
struct SceneSequence {
  long n_agents = 0;
  long n_max = 0;
  long t_max = 0;
  std::vector<AgentToken> tokens;  // n_max*t_max; invalid slots zeroed
  std::vector<char> valid;         // same shape
  std::vector<long> agent_ids;     // n_max; -1 for unused slots
  std::vector<AgentPhysState> current_states;  // per agent at the window end

  long flat_index(long a, long t) const { return t * n_max + a; }
  bool is_valid(long a, long t) const { return valid[flat_index(a, t)] != 0; }
  bool agent_valid(long a) const;          // any valid step
  long last_valid_time(long a) const;      // -1 if none
};

// Pads/flattens tracks into the grid. All tracks must share the window
// length. If more than n_max tracks arrive, keeps tracks[ego_index] plus the
// nearest others at the window end (ties to lower agent_id).
SceneSequence flatten_scene(const std::vector<AgentTrack>& tracks, long n_max,
                            long ego_index = 0);

// One training/eval datum: a history window plus the observed and desired
// controls at the window end (n_max×2 each; rows for invalid agents zero).
// Evaluation data may also carry the true future: positions as horizon×2n_max
// with a matching horizon×n_max presence mask; empty when unavailable.
struct SceneDatum {
  SceneSequence seq;
  Eigen::MatrixXd u;
  Eigen::MatrixXd u_des;
  Eigen::MatrixXd future;
  Eigen::MatrixXd future_valid;
};

struct EncoderConfig {
  std::string kind = "attention";  // attention | mlp
  long d_model = 32;
  long layers = 2;
  long heads = 2;
  long ff_hidden = 32;
  std::vector<long> mlp_hidden = {16, 16, 16};  // mlp kind only
  std::string activation = "tanh";
  bool layer_norm = false;
  bool agent_aware = true;  // separate same-agent / cross-agent score projections
  long n_max = 6;
  long t_max = 10;

  bool valid() const;
};

// Per-agent conditioning features on the caller's tape; rows for agents with
// no valid step are exactly zero.
struct ContextFeatures {
  ad::Var features;  // n_max × d_model
  std::vector<char> agent_valid;
};

inline constexpr long kTokenFeatDim = 7;  // type, scaled p, scaled v, cos/sin heading
inline constexpr double kPosScale = 0.1;
inline constexpr double kVelScale = 0.2;

Eigen::VectorXd token_features(const AgentToken& tok);

void register_encoder(ParamStore& store, const std::string& prefix, const EncoderConfig& cfg);

ContextFeatures encode_context(ParamBinding& params, const std::string& prefix,
                               const EncoderConfig& cfg, const SceneSequence& seq);

}  // namespace resp
