#include "nap/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "nap/errors.hpp"

namespace nap {
namespace {

double evaluate(const LossFunction& loss, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.constant(p));
  const double value = loss(tape, vars).value().item();
  if (!std::isfinite(value)) throw NumericError("gradient_check: loss is not finite");
  return value;
}

}  // namespace

std::vector<Tensor> tape_gradients(const LossFunction& loss, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.parameter(p));
  const Var out = loss(tape, vars);
  if (!std::isfinite(out.value().item())) throw NumericError("gradient_check: loss is not finite");
  tape.backward(out);
  std::vector<Tensor> grads;
  grads.reserve(vars.size());
  for (const Var& v : vars) grads.push_back(tape.grad(v));
  return grads;
}

GradientCheckResult gradient_check(const LossFunction& loss, std::vector<Tensor> params,
                                   double eps) {
  const std::vector<Tensor> analytic = tape_gradients(loss, params);
  GradientCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double saved = params[p][i];
      params[p][i] = saved + eps;
      const double plus = evaluate(loss, params);
      params[p][i] = saved - eps;
      const double minus = evaluate(loss, params);
      params[p][i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double err =
          std::abs(analytic[p][i] - numeric) / std::max(1.0, std::abs(numeric));
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_parameter = p;
        result.worst_index = i;
      }
      ++result.coordinates;
    }
  }
  return result;
}

}  // namespace nap
