#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ktransfer/error.hpp"
#include "ktransfer/nn.hpp"

namespace ktransfer {

/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v
template <class T>
void sgd_update(std::span<T> param, std::span<const T> grad, std::span<T> velocity, double lr, double momentum,
                double weight_decay) {
  if (param.size() != velocity.size() || (!grad.empty() && grad.size() != param.size())) {
    throw DimensionError("sgd_update: parameter, gradient and velocity sizes differ");
  }
  const T m = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), step = static_cast<T>(lr);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad.empty() ? T(0) : grad[i];
    velocity[i] = m * velocity[i] + g + wd * param[i];
    param[i] -= step * velocity[i];
  }
}

/// SGD with momentum over a fixed parameter list. Weight decay skips
/// parameters flagged decay=false (batchnorm scale/shift).
template <class T>
class Sgd {
 public:
  Sgd(std::vector<Parameter<T>*> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    for (auto* p : params_) velocity_.emplace_back(p->value.size(), T(0));
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& t = params_[i]->value;
      sgd_update<T>(t.mutable_data(), t.grad(), velocity_[i], lr, momentum_,
                    params_[i]->decay ? weight_decay_ : 0.0);
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->value.zero_grad();
  }

  const std::vector<Parameter<T>*>& parameters() const { return params_; }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_;
  double weight_decay_;
};

template <class T>
std::vector<Parameter<T>*> parameter_pointers(Network<T>& net) {
  std::vector<Parameter<T>*> out;
  for (auto& p : net.parameters()) out.push_back(&p);
  return out;
}

}  // namespace ktransfer
