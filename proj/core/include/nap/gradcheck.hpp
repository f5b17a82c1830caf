#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "nap/tape.hpp"

namespace nap {

/// Builds a scalar loss on `tape` from parameter leaves bound in order.
using LossFunction = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradientCheckResult {
  /// max over coordinates of |g_tape - g_fd| / max(1, |g_fd|)
  double max_relative_error = 0.0;
  std::size_t worst_parameter = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/// Compares tape gradients with central finite differences
/// (f(x + eps e) - f(x - eps e)) / (2 eps) on every coordinate of `params`.
/// Throws NumericError if f is non-finite at any evaluated point.
GradientCheckResult gradient_check(const LossFunction& loss, std::vector<Tensor> params,
                                   double eps = 1e-4);

/// Tape gradients of `loss` at `params`, one tensor per parameter.
std::vector<Tensor> tape_gradients(const LossFunction& loss, const std::vector<Tensor>& params);

}  // namespace nap
