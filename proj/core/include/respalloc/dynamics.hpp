#pragma once

#include <Eigen/Core>

namespace resp {

// Planar double integrator: state (position, velocity), control = acceleration.
struct AgentPhysState {
  Eigen::Vector2d position = Eigen::Vector2d::Zero();  // m
  Eigen::Vector2d velocity = Eigen::Vector2d::Zero();  // m/s

  bool finite() const { return position.allFinite() && velocity.allFinite(); }
};

struct Control {
  Eigen::Vector2d acceleration = Eigen::Vector2d::Zero();  // m/s^2

  bool finite() const { return acceleration.allFinite(); }
};

// State of agent j relative to agent i (j minus i).
struct RelativeState {
  Eigen::Vector2d dp = Eigen::Vector2d::Zero();
  Eigen::Vector2d dv = Eigen::Vector2d::Zero();
};

inline constexpr int kControlDim = 2;

// Exact constant-acceleration update over dt.
AgentPhysState step(const AgentPhysState& state, const Control& u, double dt);

RelativeState relative_state(const AgentPhysState& a, const AgentPhysState& b);

}  // namespace resp
