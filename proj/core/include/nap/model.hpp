#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nap/ops.hpp"
#include "nap/synth.hpp"
#include "nap/tape.hpp"

namespace nap {

/// Architecture hyperparameters. Defaults reproduce the reference
/// configuration: d_model 24, 6 heads (2 per pathway), 4 layers, d_ff = 4 d,
/// d_A = 2 d, a 16-unit classifier and dropout 0.1.
struct ModelConfig {
  std::size_t d_model = 24;
  std::size_t heads = 6;
  std::size_t layers = 4;
  /// 0 means 4 * d_model.
  std::size_t d_ff = 0;
  /// 0 means 2 * d_model.
  std::size_t d_attention = 0;
  std::size_t classifier_hidden = 16;
  double dropout = 0.1;
  /// Mix the concatenated pathway outputs with a bias-free d_model x d_model
  /// projection.
  bool output_projection = true;
  /// Known modality identifiers; the index selects the embedding row.
  std::vector<std::string> modalities;
  /// Per-modality channel and predictor maxima (same order as `modalities`).
  std::vector<std::size_t> max_channels;
  std::vector<std::size_t> max_predictors;

  [[nodiscard]] std::size_t ff_dim() const noexcept { return d_ff == 0 ? 4 * d_model : d_ff; }
  [[nodiscard]] std::size_t attention_dim() const noexcept {
    return d_attention == 0 ? 2 * d_model : d_attention;
  }
  [[nodiscard]] std::size_t heads_per_pathway() const noexcept { return heads / 3; }
  [[nodiscard]] std::size_t head_dim() const noexcept { return d_model / heads; }
  [[nodiscard]] std::size_t max_modalities() const noexcept { return modalities.size(); }
  /// Index of `modality` in `modalities`; throws ValidationError if unknown.
  [[nodiscard]] std::size_t modality_index(const std::string& modality) const;

  /// Throws ConfigError on invalid combinations (heads not divisible by 3,
  /// d_model not divisible by heads, empty modality list, ...).
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

/// Axis attended by each pathway of a tri-axial layer.
enum class Pathway : std::size_t { kSpatial = 0, kTemporal = 1, kBlending = 2 };
inline constexpr std::size_t kNumPathways = 3;

/// Axis of a [segments, T, C, B, features] stream tensor attended by `p`.
std::size_t pathway_axis(Pathway p) noexcept;

template <class T>
struct PathwayParams {
  T query;       // d_model x (h/3 * d_k), no bias
  T key;         // d_model x (h/3 * d_k), no bias
  T value;       // d_model x (h/3 * d_k), no bias
  T query_gain;  // h/3 * d_k, per-head LayerNorm gain
  T key_gain;
};

template <class T>
struct EncoderLayerParams {
  std::array<PathwayParams<T>, kNumPathways> pathways;
  T output;  // d_model x d_model, no bias; unused without output_projection
  T attention_norm_gain;
  T ffn_norm_gain;
  T ffn_w1;
  T ffn_b1;
  T ffn_w2;
  T ffn_b2;
};

/// All learnable arrays of the model. Instantiated with Tensor for storage
/// and with Var for a forward pass bound to a tape.
template <class T>
struct ModelParams {
  T input_weight;  // 5 x d_model
  T input_bias;
  T modality_embedding;  // M_max x d_model
  std::vector<EncoderLayerParams<T>> layers;
  T fusion_weight;   // d_model x d_A
  T fusion_bias;     // d_A
  T fusion_context;  // d_A
  T head_w1;         // d_model x hidden
  T head_b1;
  T head_w2;  // hidden x 5
  T head_b2;
  bool output_projection = true;
};

using NapParameters = ModelParams<Tensor>;
using BoundParameters = ModelParams<Var>;

/// Calls f(name, p.field...) for every parameter in canonical order. All
/// arguments must share the same structure.
template <class F, class First, class... Rest>
void visit_parameters(F&& f, First& first, Rest&... rest) {
  static constexpr std::array<const char*, kNumPathways> kPathwayNames{"spatial", "temporal",
                                                                       "blending"};
  f("input.weight", first.input_weight, rest.input_weight...);
  f("input.bias", first.input_bias, rest.input_bias...);
  f("modality_embedding", first.modality_embedding, rest.modality_embedding...);
  for (std::size_t l = 0; l < first.layers.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    for (std::size_t p = 0; p < kNumPathways; ++p) {
      const std::string pp = prefix + kPathwayNames[p] + ".";
      f(pp + "query", first.layers[l].pathways[p].query, rest.layers[l].pathways[p].query...);
      f(pp + "key", first.layers[l].pathways[p].key, rest.layers[l].pathways[p].key...);
      f(pp + "value", first.layers[l].pathways[p].value, rest.layers[l].pathways[p].value...);
      f(pp + "query_gain", first.layers[l].pathways[p].query_gain,
        rest.layers[l].pathways[p].query_gain...);
      f(pp + "key_gain", first.layers[l].pathways[p].key_gain,
        rest.layers[l].pathways[p].key_gain...);
    }
    if (first.output_projection) {
      f(prefix + "output", first.layers[l].output, rest.layers[l].output...);
    }
    f(prefix + "attention_norm_gain", first.layers[l].attention_norm_gain,
      rest.layers[l].attention_norm_gain...);
    f(prefix + "ffn_norm_gain", first.layers[l].ffn_norm_gain, rest.layers[l].ffn_norm_gain...);
    f(prefix + "ffn.w1", first.layers[l].ffn_w1, rest.layers[l].ffn_w1...);
    f(prefix + "ffn.b1", first.layers[l].ffn_b1, rest.layers[l].ffn_b1...);
    f(prefix + "ffn.w2", first.layers[l].ffn_w2, rest.layers[l].ffn_w2...);
    f(prefix + "ffn.b2", first.layers[l].ffn_b2, rest.layers[l].ffn_b2...);
  }
  f("fusion.weight", first.fusion_weight, rest.fusion_weight...);
  f("fusion.bias", first.fusion_bias, rest.fusion_bias...);
  f("fusion.context", first.fusion_context, rest.fusion_context...);
  f("head.w1", first.head_w1, rest.head_w1...);
  f("head.b1", first.head_b1, rest.head_b1...);
  f("head.w2", first.head_w2, rest.head_w2...);
  f("head.b2", first.head_b2, rest.head_b2...);
}

/// Fan-in scaled uniform weights, zero biases, unit gains and N(0, 0.02^2)
/// modality embeddings.
NapParameters init_parameters(const ModelConfig& config, std::uint64_t seed);
/// Same structure with every tensor zero-filled.
NapParameters zeros_like(const NapParameters& params);
std::size_t parameter_count(const NapParameters& params);
/// Flattens every parameter in canonical order.
std::vector<Tensor> flatten_parameters(const NapParameters& params);
NapParameters unflatten_parameters(const NapParameters& like, std::vector<Tensor> tensors);

BoundParameters bind_parameters(Tape& tape, const NapParameters& params, bool trainable = true);
/// Gradients of every bound parameter after tape.backward().
NapParameters collect_gradients(const Tape& tape, const BoundParameters& bound,
                                const NapParameters& like);

/// Dropout switch for a forward pass. Disabled passes are deterministic.
struct DropoutContext {
  bool enabled = false;
  double p = 0.0;
  std::mt19937_64* rng = nullptr;

  static DropoutContext off() { return {}; }
  Var apply(Var x) const;
};

/// One modality's input block, shape [segments, T, C, B, 5].
struct ModalityInput {
  std::size_t modality = 0;
  Tensor probs;
};

/// Throws ValidationError unless every stage row of `probs` is a probability
/// vector within `tolerance`.
void validate_probability_rows(const Tensor& probs, double tolerance = 1e-4);

/// [..., 5] probabilities -> [..., d_model] features.
Var project_hypnodensity(Var probs, const BoundParameters& params);

/// Sinusoidal encoding of segment-local positions 0..T-1, shape [T, d].
Tensor sinusoidal_encoding(std::size_t epochs, std::size_t d_model);

/// Adds the positional encoding (broadcast over segments, channels and
/// predictors) and the modality embedding to H of shape [S, T, C, B, d].
Var add_encodings(Var h, std::size_t modality, const BoundParameters& params,
                  const ModelConfig& config);

/// Output of one pathway before concatenation, shape [S, T, C, B, h/3 d_k].
Var pathway_attention(Var h, const PathwayParams<Var>& pathway, Pathway which,
                      const ModelConfig& config);

/// Three axis-restricted attention pathways concatenated along features, then
/// the optional output projection.
Var triaxial_attention(Var h, const EncoderLayerParams<Var>& layer, const ModelConfig& config);

/// Pre-LN residual block: x + drop(attn(LN x)); then x + drop(FFN(LN x)).
Var encoder_layer(Var h, const EncoderLayerParams<Var>& layer, const ModelConfig& config,
                  const DropoutContext& dropout);

Var encode_modality(Var h, std::size_t modality, const BoundParameters& params,
                    const ModelConfig& config, const DropoutContext& dropout);

struct FusionResult {
  Var fused;    // [S, T, d]
  Var weights;  // [S, T, N]
};

/// alpha = softmax_n(tanh(z W_A + b_A) u_A); fused = sum_n alpha z.
FusionResult fuse_streams(Var streams, const BoundParameters& params);

/// [..., d] -> [..., 5] logits.
Var classify(Var fused, const BoundParameters& params, const DropoutContext& dropout);

struct ForwardResult {
  Var logits;          // [S, T, 5]
  Var fusion_weights;  // [S, T, N]
};

/// Full pipeline for one batch. All inputs must share segments and T.
ForwardResult forward(Tape& tape, std::span<const ModalityInput> inputs,
                      const BoundParameters& params, const ModelConfig& config,
                      const DropoutContext& dropout);

/// Dropout-free softmax probabilities [S, T, 5] without recording gradients.
Tensor predict_probabilities(std::span<const ModalityInput> inputs, const NapParameters& params,
                             const ModelConfig& config, Tensor* fusion_weights = nullptr);

}  // namespace nap
