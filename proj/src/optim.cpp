#include "robtok/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace robtok {

void AdamConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid Adam setting: " + what); };
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
}

AdamState AdamState::zeros_like(const std::vector<Tensor>& params) {
  AdamState s;
  for (const Tensor& p : params) {
    s.m.push_back(Vector::Zero(p.size()));
    s.v.push_back(Vector::Zero(p.size()));
  }
  return s;
}

void adam_update(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("Adam state does not match the parameter list");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) continue;
    const Vector& g = p.grad();
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    p.mutable_value().array() -=
        cfg.learning_rate * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + cfg.eps);
  }
}

}  // namespace robtok
