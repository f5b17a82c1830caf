#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>

#include "nap/tape.hpp"

/// Differentiable operations on Tape values. Every op validates shapes and
/// throws DimensionError naming the offending shapes.
namespace nap::ops {

inline constexpr double kLayerNormEpsilon = 1e-5;

Var add(Var a, Var b);
/// x[..., d] + b[d]
Var add_bias(Var x, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
/// Sum of all elements as a rank-0 tensor.
Var sum(Var x);

/// y[..., j] = sum_i x[..., i] * w[i, j] (+ b[j]).
Var linear(Var x, Var w, std::optional<Var> b = std::nullopt);

/// Shift-stable softmax along `axis`.
Var softmax(Var x, std::size_t axis);

/// Normalizes contiguous groups of `group` features along the last axis to
/// zero mean and unit variance, then multiplies by `gain` (same length as the
/// last axis). No additive bias. `group == 0` normalizes the whole last axis.
Var layer_norm(Var x, Var gain, std::size_t group = 0);

/// Exact GeLU, x * Phi(x).
Var gelu(Var x);
Var tanh(Var x);

/// Inverted dropout; identity when p == 0.
Var dropout(Var x, double p, std::mt19937_64& rng);

Var reshape(Var x, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);
/// Row `row` of a rank-2 tensor as a vector.
Var select_row(Var m, std::size_t row);

/// Multi-head scaled dot-product attention restricted to one axis.
///
/// q, k, v share the shape [..., heads * d_k]; attention runs along `axis`
/// (which must not be the feature axis) independently for every combination
/// of the remaining axes. Head outputs are concatenated in head order.
Var axis_attention(Var q, Var k, Var v, std::size_t axis, std::size_t heads);

/// out[..., f] = sum_n weights[..., n] * x[..., n, f]
Var weighted_sum(Var weights, Var x);

/// Mean negative log-likelihood of `labels` under softmax(logits) with
/// logits of shape [..., classes] and one label per row.
Var cross_entropy(Var logits, std::span<const int> labels);

}  // namespace nap::ops
