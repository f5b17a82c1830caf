#include "nap/model.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <set>

#include "nap/errors.hpp"

namespace nap {
namespace {

using nlohmann::json;

Tensor uniform_fan_in(Shape shape, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape.front()));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Tensor ones(std::size_t n) { return Tensor({n}, 1.0); }

}  // namespace

std::size_t ModelConfig::modality_index(const std::string& modality) const {
  const auto it = std::find(modalities.begin(), modalities.end(), modality);
  if (it == modalities.end()) throw ValidationError("unknown modality '" + modality + "'");
  return static_cast<std::size_t>(it - modalities.begin());
}

void ModelConfig::validate() const {
  if (d_model == 0 || heads == 0 || classifier_hidden == 0 || ff_dim() == 0 ||
      attention_dim() == 0) {
    throw ConfigError("model sizes must be at least 1");
  }
  if (heads % 3 != 0) {
    throw ConfigError("heads (" + std::to_string(heads) + ") must be divisible by 3");
  }
  if (d_model % heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (modalities.empty()) throw ConfigError("model needs at least one modality");
  if (std::set<std::string>(modalities.begin(), modalities.end()).size() != modalities.size()) {
    throw ConfigError("modality identifiers must be unique");
  }
  if (max_channels.size() != modalities.size() || max_predictors.size() != modalities.size()) {
    throw ConfigError("per-modality channel/predictor maxima must match the modality list");
  }
  for (std::size_t k = 0; k < modalities.size(); ++k) {
    if (max_channels[k] == 0 || max_predictors[k] == 0) {
      throw ConfigError("channel and predictor maxima must be at least 1");
    }
  }
}

std::string model_config_to_json(const ModelConfig& c) {
  json j{{"d_model", c.d_model},
         {"heads", c.heads},
         {"layers", c.layers},
         {"d_ff", c.ff_dim()},
         {"d_attention", c.attention_dim()},
         {"classifier_hidden", c.classifier_hidden},
         {"dropout", c.dropout},
         {"output_projection", c.output_projection},
         {"modalities", c.modalities},
         {"max_channels", c.max_channels},
         {"max_predictors", c.max_predictors}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ModelConfig c;
    c.d_model = j.at("d_model").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.d_attention = j.at("d_attention").get<std::size_t>();
    c.classifier_hidden = j.at("classifier_hidden").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.output_projection = j.at("output_projection").get<bool>();
    c.modalities = j.at("modalities").get<std::vector<std::string>>();
    c.max_channels = j.at("max_channels").get<std::vector<std::size_t>>();
    c.max_predictors = j.at("max_predictors").get<std::vector<std::size_t>>();
    if (c.d_ff == 4 * c.d_model) c.d_ff = 0;
    if (c.d_attention == 2 * c.d_model) c.d_attention = 0;
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid model configuration: ") + e.what());
  }
}

std::size_t pathway_axis(Pathway p) noexcept {
  switch (p) {
    case Pathway::kSpatial:
      return 2;
    case Pathway::kTemporal:
      return 1;
    case Pathway::kBlending:
      return 3;
  }
  return 1;
}

NapParameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model;
  const std::size_t pw = config.heads_per_pathway() * config.head_dim();
  NapParameters p;
  p.output_projection = config.output_projection;
  p.input_weight = uniform_fan_in({kNumStages, d}, rng);
  p.input_bias = Tensor({d});
  {
    std::normal_distribution<double> normal(0.0, 0.02);
    p.modality_embedding = Tensor({config.max_modalities(), d});
    for (double& v : p.modality_embedding.values()) v = normal(rng);
  }
  p.layers.resize(config.layers);
  for (auto& layer : p.layers) {
    for (auto& pathway : layer.pathways) {
      pathway.query = uniform_fan_in({d, pw}, rng);
      pathway.key = uniform_fan_in({d, pw}, rng);
      pathway.value = uniform_fan_in({d, pw}, rng);
      pathway.query_gain = ones(pw);
      pathway.key_gain = ones(pw);
    }
    if (config.output_projection) layer.output = uniform_fan_in({d, d}, rng);
    layer.attention_norm_gain = ones(d);
    layer.ffn_norm_gain = ones(d);
    layer.ffn_w1 = uniform_fan_in({d, config.ff_dim()}, rng);
    layer.ffn_b1 = Tensor({config.ff_dim()});
    layer.ffn_w2 = uniform_fan_in({config.ff_dim(), d}, rng);
    layer.ffn_b2 = Tensor({d});
  }
  p.fusion_weight = uniform_fan_in({d, config.attention_dim()}, rng);
  p.fusion_bias = Tensor({config.attention_dim()});
  p.fusion_context = uniform_fan_in({config.attention_dim()}, rng);
  p.head_w1 = uniform_fan_in({d, config.classifier_hidden}, rng);
  p.head_b1 = Tensor({config.classifier_hidden});
  p.head_w2 = uniform_fan_in({config.classifier_hidden, kNumStages}, rng);
  p.head_b2 = Tensor({kNumStages});
  return p;
}

NapParameters zeros_like(const NapParameters& params) {
  NapParameters out = params;
  visit_parameters([](const std::string&, Tensor& t) { t.fill(0.0); }, out);
  return out;
}

std::size_t parameter_count(const NapParameters& params) {
  std::size_t n = 0;
  visit_parameters([&n](const std::string&, const Tensor& t) { n += t.size(); }, params);
  return n;
}

std::vector<Tensor> flatten_parameters(const NapParameters& params) {
  std::vector<Tensor> out;
  visit_parameters([&out](const std::string&, const Tensor& t) { out.push_back(t); }, params);
  return out;
}

NapParameters unflatten_parameters(const NapParameters& like, std::vector<Tensor> tensors) {
  NapParameters out = like;
  std::size_t i = 0;
  visit_parameters(
      [&](const std::string& name, Tensor& t) {
        if (i >= tensors.size() || tensors[i].shape() != t.shape()) {
          throw DimensionError("parameter " + name + " does not match the flattened list");
        }
        t = std::move(tensors[i++]);
      },
      out);
  if (i != tensors.size()) throw DimensionError("flattened parameter list is too long");
  return out;
}

BoundParameters bind_parameters(Tape& tape, const NapParameters& params, bool trainable) {
  BoundParameters bound;
  bound.output_projection = params.output_projection;
  bound.layers.resize(params.layers.size());
  visit_parameters(
      [&](const std::string&, Var& v, const Tensor& t) {
        v = trainable ? tape.parameter(t) : tape.constant(t);
      },
      bound, params);
  return bound;
}

NapParameters collect_gradients(const Tape& tape, const BoundParameters& bound,
                                const NapParameters& like) {
  NapParameters out = like;
  visit_parameters([&](const std::string&, Tensor& g, const Var& v) { g = tape.grad(v); }, out,
                   bound);
  return out;
}

Var DropoutContext::apply(Var x) const {
  if (!enabled || p == 0.0) return x;
  if (rng == nullptr) throw Error("dropout enabled without a random generator");
  return ops::dropout(x, p, *rng);
}

void validate_probability_rows(const Tensor& probs, double tolerance) {
  if (probs.rank() == 0 || probs.shape().back() != kNumStages) {
    throw DimensionError("hypnodensity input must end in a stage axis of 5, got " +
                         shape_to_string(probs.shape()));
  }
  const std::size_t rows = probs.size() / kNumStages;
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (std::size_t s = 0; s < kNumStages; ++s) {
      const double v = probs[r * kNumStages + s];
      if (!std::isfinite(v) || v < 0.0) {
        throw ValidationError("input row " + std::to_string(r) +
                              " is not a probability vector (negative or non-finite entry)");
      }
      total += v;
    }
    if (std::abs(total - 1.0) > tolerance) {
      throw ValidationError("input row " + std::to_string(r) + " sums to " +
                            std::to_string(total) + ", expected 1");
    }
  }
}

Var project_hypnodensity(Var probs, const BoundParameters& params) {
  validate_probability_rows(probs.value());
  return ops::linear(probs, params.input_weight, params.input_bias);
}

Tensor sinusoidal_encoding(std::size_t epochs, std::size_t d_model) {
  Tensor pe({epochs, d_model});
  for (std::size_t t = 0; t < epochs; ++t) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(d_model);
      const double angle = static_cast<double>(t) / std::pow(10000.0, exponent);
      pe[t * d_model + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Var add_encodings(Var h, std::size_t modality, const BoundParameters& params,
                  const ModelConfig& config) {
  const Shape& shape = h.shape();
  if (shape.size() != 5 || shape[4] != config.d_model) {
    throw DimensionError("add_encodings expects [S, T, C, B, d_model], got " +
                         shape_to_string(shape));
  }
  if (modality >= config.max_modalities()) {
    throw ValidationError("modality index " + std::to_string(modality) + " >= M_max " +
                          std::to_string(config.max_modalities()));
  }
  const std::size_t epochs = shape[1];
  const std::size_t d = shape[4];
  const std::size_t per_epoch = shape[2] * shape[3];
  const Tensor pe = sinusoidal_encoding(epochs, d);
  Tensor full(shape);
  for (std::size_t s = 0; s < shape[0]; ++s) {
    for (std::size_t t = 0; t < epochs; ++t) {
      for (std::size_t k = 0; k < per_epoch; ++k) {
        std::copy_n(pe.data() + t * d, d, full.data() + ((s * epochs + t) * per_epoch + k) * d);
      }
    }
  }
  Var with_position = ops::add(h, h.tape().constant(std::move(full)));
  return ops::add_bias(with_position, ops::select_row(params.modality_embedding, modality));
}

Var pathway_attention(Var h, const PathwayParams<Var>& pathway, Pathway which,
                      const ModelConfig& config) {
  const std::size_t d_k = config.head_dim();
  Var q = ops::layer_norm(ops::linear(h, pathway.query), pathway.query_gain, d_k);
  Var k = ops::layer_norm(ops::linear(h, pathway.key), pathway.key_gain, d_k);
  Var v = ops::linear(h, pathway.value);
  return ops::axis_attention(q, k, v, pathway_axis(which), config.heads_per_pathway());
}

Var triaxial_attention(Var h, const EncoderLayerParams<Var>& layer, const ModelConfig& config) {
  std::array<Var, kNumPathways> outputs;
  for (std::size_t p = 0; p < kNumPathways; ++p) {
    outputs[p] = pathway_attention(h, layer.pathways[p], static_cast<Pathway>(p), config);
  }
  Var mixed = ops::concat(outputs, h.shape().size() - 1);
  if (config.output_projection) mixed = ops::linear(mixed, layer.output);
  return mixed;
}

Var encoder_layer(Var h, const EncoderLayerParams<Var>& layer, const ModelConfig& config,
                  const DropoutContext& dropout) {
  Var attended = triaxial_attention(ops::layer_norm(h, layer.attention_norm_gain), layer, config);
  Var x = ops::add(h, dropout.apply(attended));
  Var f = ops::linear(ops::layer_norm(x, layer.ffn_norm_gain), layer.ffn_w1, layer.ffn_b1);
  f = dropout.apply(ops::gelu(f));
  f = ops::linear(f, layer.ffn_w2, layer.ffn_b2);
  return ops::add(x, dropout.apply(f));
}

Var encode_modality(Var h, std::size_t modality, const BoundParameters& params,
                    const ModelConfig& config, const DropoutContext& dropout) {
  Var x = add_encodings(h, modality, params, config);
  for (const auto& layer : params.layers) x = encoder_layer(x, layer, config, dropout);
  return x;
}

FusionResult fuse_streams(Var streams, const BoundParameters& params) {
  const Shape& shape = streams.shape();
  if (shape.size() < 2 || shape[shape.size() - 2] == 0) {
    throw ValidationError("fuse_streams needs at least one stream, got shape " +
                          shape_to_string(shape));
  }
  Var projected = ops::tanh(ops::linear(streams, params.fusion_weight, params.fusion_bias));
  const std::size_t d_a = params.fusion_context.shape().front();
  Var context = ops::reshape(params.fusion_context, {d_a, 1});
  Var scores = ops::linear(projected, context);
  Shape score_shape(shape.begin(), shape.end() - 1);
  scores = ops::reshape(scores, score_shape);
  Var weights = ops::softmax(scores, score_shape.size() - 1);
  return {ops::weighted_sum(weights, streams), weights};
}

Var classify(Var fused, const BoundParameters& params, const DropoutContext& dropout) {
  Var hidden = ops::gelu(ops::linear(fused, params.head_w1, params.head_b1));
  return ops::linear(dropout.apply(hidden), params.head_w2, params.head_b2);
}

ForwardResult forward(Tape& tape, std::span<const ModalityInput> inputs,
                      const BoundParameters& params, const ModelConfig& config,
                      const DropoutContext& dropout) {
  if (inputs.empty()) throw ValidationError("forward needs at least one modality block");
  if (inputs.size() > config.max_modalities()) {
    throw ValidationError("forward got " + std::to_string(inputs.size()) +
                          " modality blocks, model supports " +
                          std::to_string(config.max_modalities()));
  }
  const Shape& first = inputs.front().probs.shape();
  std::set<std::size_t> seen;
  for (const ModalityInput& in : inputs) {
    const Shape& s = in.probs.shape();
    if (s.size() != 5 || s[4] != kNumStages || s[0] == 0 || s[1] == 0 || s[2] == 0 || s[3] == 0) {
      throw DimensionError("modality block must be [S, T, C, B, 5] with non-zero axes, got " +
                           shape_to_string(s));
    }
    if (s[0] != first[0] || s[1] != first[1]) {
      throw ValidationError("modality blocks disagree on segments or T: " +
                            shape_to_string(first) + " vs " + shape_to_string(s));
    }
    if (in.modality >= config.max_modalities()) {
      throw ValidationError("modality index " + std::to_string(in.modality) + " out of range");
    }
    if (!seen.insert(in.modality).second) {
      throw ValidationError("modality index " + std::to_string(in.modality) + " given twice");
    }
  }

  std::vector<Var> streams;
  streams.reserve(inputs.size());
  for (const ModalityInput& in : inputs) {
    const Shape& s = in.probs.shape();
    Var h = project_hypnodensity(tape.constant(in.probs), params);
    h = encode_modality(h, in.modality, params, config, dropout);
    streams.push_back(ops::reshape(h, {s[0], s[1], s[2] * s[3], config.d_model}));
  }
  Var stacked = streams.size() == 1 ? streams.front() : ops::concat(streams, 2);
  FusionResult fusion = fuse_streams(stacked, params);
  return {classify(fusion.fused, params, dropout), fusion.weights};
}

Tensor predict_probabilities(std::span<const ModalityInput> inputs, const NapParameters& params,
                             const ModelConfig& config, Tensor* fusion_weights) {
  Tape tape;
  const BoundParameters bound = bind_parameters(tape, params, false);
  ForwardResult result = forward(tape, inputs, bound, config, DropoutContext::off());
  if (fusion_weights != nullptr) *fusion_weights = result.fusion_weights.value();
  Var probs = ops::softmax(result.logits, result.logits.shape().size() - 1);
  return probs.value();
}

}  // namespace nap
