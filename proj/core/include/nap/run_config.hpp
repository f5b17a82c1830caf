#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nap/model.hpp"
#include "nap/synth.hpp"
#include "nap/trainer.hpp"

namespace nap {

/// Fractions of `recordings` assigned to each split. Their sum must not
/// exceed one.
struct SplitFractions {
  double train = 40.0 / 60.0;
  double validation = 8.0 / 60.0;
  double test = 12.0 / 60.0;
};

struct SynthSettings {
  std::size_t recordings = 60;
  SplitFractions splits;
  std::size_t min_epochs = 300;
  std::size_t max_epochs = 300;
  StageMatrix transition = default_transition_matrix();
  StageDistribution initial = default_initial_distribution();
  std::vector<ModalityLayout> layout = default_layout();
  /// Range of the per-stage diagonal confusion mass of generated profiles.
  double diag_min = 0.45;
  double diag_max = 0.9;
  double kappa = 20.0;
  std::size_t blur = 2;
  double shared_noise = 0.0;
  /// Explicit profiles keyed by "modality/channel/predictor"; they replace
  /// the generated profile of that stream.
  std::map<std::string, ReliabilityProfile> overrides;

  /// Two modalities: eeg with 3 channels and eog with 2, each with two
  /// predictors.
  static std::vector<ModalityLayout> default_layout();

  /// Recordings per split (train, validation, test).
  [[nodiscard]] std::array<std::size_t, 3> split_counts() const;
  /// Throws ConfigError.
  void validate() const;
};

struct DataPaths {
  std::filesystem::path train = "data/train.napd";
  std::filesystem::path validation = "data/validation.napd";
  std::filesystem::path test = "data/test.napd";
};

/// Everything a run needs. The single seed drives synthesis, initialization
/// and training.
struct RunConfig {
  std::uint64_t seed = 0;
  SynthSettings synth;
  /// Architecture only; the modality vocabulary is derived from data.
  ModelConfig model;
  TrainConfig train;
  DataPaths data;
  std::filesystem::path out = "run";
  unsigned threads = 1;

  void validate() const;
};

/// Missing keys take their defaults; unknown keys are rejected. Relative
/// paths are resolved against `base_dir`. Throws ConfigError.
RunConfig run_config_from_json(const std::string& text, const std::filesystem::path& base_dir = {});
/// Complete, pretty-printed config that reloads to an equal RunConfig.
std::string run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

struct SynthSplits {
  std::vector<PredictionSet> train;
  std::vector<PredictionSet> validation;
  std::vector<PredictionSet> test;
};

/// Builds the SynthSpec (profiles included) implied by the settings and seed.
SynthSpec build_synth_spec(const SynthSettings& settings, std::uint64_t seed);

/// Splits use disjoint recording indices, hence disjoint ids and seeds.
SynthSplits synthesize_splits(const SynthSettings& settings, std::uint64_t seed,
                              unsigned threads = 1);

/// True if the architecture fields (everything except the data-derived
/// modality vocabulary and maxima) agree.
bool same_architecture(const ModelConfig& a, const ModelConfig& b);

}  // namespace nap
