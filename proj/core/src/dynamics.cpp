#include "respalloc/dynamics.hpp"

#include <cmath>

#include "respalloc/errors.hpp"

namespace resp {

AgentPhysState step(const AgentPhysState& state, const Control& u, double dt) {
  if (!state.finite() || !u.finite() || !std::isfinite(dt)) {
    throw InvalidInputError("dynamics::step: non-finite state, control, or dt");
  }
  if (dt <= 0.0) {
    throw InvalidInputError("dynamics::step: dt must be positive");
  }
  AgentPhysState next;
  next.position = state.position + state.velocity * dt + 0.5 * u.acceleration * dt * dt;
  next.velocity = state.velocity + u.acceleration * dt;
  return next;
}

RelativeState relative_state(const AgentPhysState& a, const AgentPhysState& b) {
  RelativeState rel;
  rel.dp = b.position - a.position;
  rel.dv = b.velocity - a.velocity;
  return rel;
}

}  // namespace resp
