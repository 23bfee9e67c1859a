#pragma once

// Central finite-difference gradient checking against the autodiff tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ktransfer/tensor.hpp"

namespace ktransfer {

struct GradCheckOptions {
  double step = 1e-5;
  /// Gradients smaller than this are compared in absolute terms.
  double scale_floor = 1e-3;
  /// Coordinates checked per tensor; 0 means all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t coords_checked = 0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares d(loss)/d(input) from backward() with central differences for
/// every tensor in `inputs`. `loss_fn` must rebuild the loss from the
/// current contents of `inputs` on every call.
inline GradCheckResult check_gradients(const std::function<Tensor<double>()>& loss_fn,
                                       std::vector<Tensor<double>> inputs,
                                       const GradCheckOptions& options = {}) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  backward(loss_fn());

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  for (auto& t : inputs) {
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(t.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords != 0 && coords.size() > options.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords);
    }

    auto values = t.mutable_data();
    for (std::size_t i : coords) {
      const double saved = values[i];
      double plus = 0, minus = 0;
      {
        NoGradGuard guard;
        values[i] = saved + options.step;
        plus = loss_fn().item();
        values[i] = saved - options.step;
        minus = loss_fn().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      result.max_relative_error =
          std::max(result.max_relative_error, relative_error(analytic[i], numeric, options.scale_floor));
      result.max_absolute_error = std::max(result.max_absolute_error, std::abs(analytic[i] - numeric));
      ++result.coords_checked;
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return result;
}

}  // namespace ktransfer
