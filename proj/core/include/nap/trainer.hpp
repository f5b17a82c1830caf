#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nap/eval.hpp"
#include "nap/model.hpp"
#include "nap/synth.hpp"

namespace nap {

struct TimeBounds {
  std::size_t lo = 20;
  std::size_t hi = 80;
};

/// Per-modality channel and predictor maxima, indexed like
/// ModelConfig::modalities.
struct BatchMaxima {
  std::vector<std::size_t> channels;
  std::vector<std::size_t> predictors;

  [[nodiscard]] std::size_t modalities() const noexcept { return channels.size(); }
  static BatchMaxima from_config(const ModelConfig& config);
};

struct ModalitySelection {
  std::size_t modality = 0;  // index into ModelConfig::modalities
  std::size_t channels = 0;
  std::size_t predictors = 0;
  /// Filled by assemble_batch; ids that are already set and available are
  /// kept, so later batches can reuse the selection of an earlier one.
  std::vector<std::string> channel_ids;
  std::vector<std::string> predictor_ids;
};

/// Dimensions of one batch. Modalities are listed in increasing index order.
struct BatchSpec {
  std::size_t epochs = 0;
  std::vector<ModalitySelection> modalities;

  /// Throws ValidationError if any dimension is outside its range.
  void validate(const BatchMaxima& maxima, const TimeBounds& bounds) const;
};

/// T ~ U{lo..hi}, M ~ U{1..M_max}, M distinct modalities uniformly, then per
/// chosen modality C ~ U{1..C_max} and B ~ U{1..B_max}.
BatchSpec sample_batch_dims(const BatchMaxima& maxima, const TimeBounds& bounds,
                            std::mt19937_64& rng);

struct Segment {
  std::size_t recording = 0;  // index into the dataset span
  std::size_t start = 0;
};

/// B_rec * K equally shaped segments. Inputs have shape [S, T, C_k, B_k, 5];
/// labels are S * T stages in segment-major order.
struct Batch {
  BatchSpec spec;
  std::vector<ModalityInput> inputs;
  std::vector<int> labels;
  std::vector<Segment> segments;

  [[nodiscard]] std::size_t segment_count() const noexcept { return segments.size(); }
  [[nodiscard]] std::size_t token_count() const noexcept { return labels.size(); }
};

/// Draws B_rec distinct recordings and K segment offsets per recording, and
/// picks concrete channel/predictor identities for `spec`. If a recording is
/// shorter than spec.epochs, T is redrawn from {lo..shortest length}.
Batch assemble_batch(std::span<const PredictionSet> dataset, const ModelConfig& config,
                     BatchSpec spec, std::size_t recordings, std::size_t segments_per_recording,
                     const TimeBounds& bounds, std::mt19937_64& rng);

/// Concatenates batches with identical spec along the segment axis.
Batch merge_batches(std::span<const Batch> batches);

struct BatchGradient {
  double loss = 0.0;  // mean cross-entropy over the batch's tokens
  std::size_t tokens = 0;
  NapParameters grads;
};

BatchGradient batch_gradient(const NapParameters& params, const ModelConfig& config,
                             const Batch& batch, const DropoutContext& dropout);

/// Token-weighted mean of per-batch gradients, i.e. the gradient of the mean
/// loss over every token of the accumulation window.
BatchGradient accumulate_gradients(std::span<const BatchGradient> parts);

struct AdamWConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  NapParameters m;
  NapParameters v;
  std::uint64_t step = 0;

  static OptimizerState zeros(const NapParameters& like);
};

/// Decoupled-decay AdamW with bias-corrected moments. Throws NumericError
/// naming the offending parameter, leaving params and state untouched, if
/// any gradient is not finite.
void adamw_step(NapParameters& params, const NapParameters& grads, OptimizerState& state,
                const AdamWConfig& config);

struct TrainConfig {
  std::size_t recordings_per_batch = 8;
  std::size_t segments_per_recording = 4;
  std::size_t accumulation_steps = 4;
  AdamWConfig optimizer;
  std::size_t patience = 15;
  std::size_t steps_per_epoch = 50;
  std::size_t max_epochs = 200;
  TimeBounds time_bounds;
  std::size_t inference_window = kInferenceWindow;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mf1 = 0.0;
};

struct TrainResult {
  ModelConfig config;
  NapParameters best;
  NapParameters final_params;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_mf1 = 0.0;
  std::uint64_t init_seed = 0;
};

/// Fills the modality vocabulary and per-modality maxima of `base` from the
/// training recordings (modalities in sorted order).
ModelConfig fit_model_config(ModelConfig base, std::span<const PredictionSet> train_set);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs epochs of steps_per_epoch optimizer steps, each accumulating
/// gradients over freshly shaped batches, validates with windowed inference
/// after every epoch, keeps the best parameters and stops after `patience`
/// epochs without improvement (or at max_epochs).
TrainResult train(std::span<const PredictionSet> train_set,
                  std::span<const PredictionSet> validation_set, const ModelConfig& model,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Columns: epoch,train_loss,val_mf1.
void write_history_csv(std::ostream& out, std::span<const EpochRecord> history);

}  // namespace nap
