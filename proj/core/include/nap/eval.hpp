#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nap/model.hpp"
#include "nap/synth.hpp"

namespace nap {

inline constexpr std::size_t kInferenceWindow = 35;

using ConfusionCounts = std::array<std::array<std::size_t, kNumStages>, kNumStages>;

/// Per-stage F1 of one recording. A stage absent from both truth and
/// prediction has no F1 (nullopt) and is excluded from the macro average.
struct StageScores {
  ConfusionCounts confusion{};  // [truth][pred]
  std::array<std::optional<double>, kNumStages> f1{};
  double macro_f1 = 0.0;
};

StageScores per_stage_f1(const Hypnogram& pred, const Hypnogram& truth);

/// [begin, end) epoch ranges: consecutive non-overlapping windows, with the
/// last one right-aligned to the end when the length is not a multiple.
std::vector<std::pair<std::size_t, std::size_t>> inference_windows(std::size_t epochs,
                                                                   std::size_t window);

/// Copies the streams modality/channels x predictors over [begin, begin +
/// length) into `dst` laid out as [length, C, B, 5].
void copy_stream_block(const PredictionSet& set, const std::string& modality,
                       std::span<const std::string> channels,
                       std::span<const std::string> predictors, std::size_t begin,
                       std::size_t length, double* dst);

/// Every stream of `set` as model input blocks covering [begin, begin + length).
/// Channels of a modality must expose the same predictors.
std::vector<ModalityInput> recording_inputs(const PredictionSet& set, const ModelConfig& config,
                                            std::size_t begin, std::size_t length);

struct InferenceResult {
  Hypnodensity density;
  Hypnogram hypnogram;
};

/// Windowed, dropout-free inference using all streams of the recording.
/// Epochs covered by two windows receive the mean of both probability rows.
InferenceResult infer_recording(const NapParameters& params, const ModelConfig& config,
                                const PredictionSet& set, std::size_t window = kInferenceWindow);

struct RecordingScore {
  std::string recording_id;
  StageScores scores;
};

struct Aggregate {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for a single value
  std::size_t count = 0;
};

struct MetricsReport {
  std::string method;
  std::vector<RecordingScore> recordings;

  [[nodiscard]] Aggregate macro_f1() const;
  /// Over recordings where the stage's F1 is defined.
  [[nodiscard]] Aggregate stage_f1(std::size_t stage) const;
};

/// Scores predictions against the truth of each recording (same order).
MetricsReport score_predictions(std::string method, std::span<const PredictionSet> sets,
                                std::span<const Hypnogram> predictions);

/// Soft vote of one base predictor across the channels of its modality.
Hypnodensity predictor_soft_vote(const PredictionSet& set, const std::string& modality,
                                 const std::string& predictor);
/// Soft vote over every stream of the recording.
Hypnodensity full_soft_vote(const PredictionSet& set);

struct MethodComparison {
  /// Identifier "<modality>/<predictor>" of the best single predictor.
  std::string best_single_predictor;
  MetricsReport best_single;
  MetricsReport soft_vote;
  std::optional<MetricsReport> nap;

  [[nodiscard]] std::vector<MetricsReport> reports() const;
};

/// Best single predictor (soft-voted across channels, chosen by mean MF1),
/// soft vote over everything, and NAP if parameters are given. Every method
/// is scored against the same recordings and truth.
MethodComparison evaluate_methods(std::span<const PredictionSet> sets,
                                  const NapParameters* params, const ModelConfig* config,
                                  std::size_t window = kInferenceWindow, unsigned threads = 1);

/// NAP-only evaluation.
MetricsReport evaluate_nap(std::span<const PredictionSet> sets, const NapParameters& params,
                           const ModelConfig& config, std::size_t window = kInferenceWindow,
                           unsigned threads = 1);

/// Columns: dataset,method,recording_id,mf1,f1_w,f1_n1,f1_n2,f1_n3,f1_rem.
/// Undefined stage F1 values are written as empty fields.
void write_metrics_csv(std::ostream& out, const std::string& dataset,
                       std::span<const MetricsReport> reports, bool header = true);

/// Aggregate table with mean(SD) cells to 3 decimals.
std::string format_metrics_table(const std::string& dataset,
                                 std::span<const MetricsReport> reports);

/// Labels of S >= 2 scorers over the same recording.
struct AnnotationSet {
  std::vector<Hypnogram> scorers;

  [[nodiscard]] std::size_t epochs() const { return scorers.empty() ? 0 : scorers.front().size(); }
  void validate() const;
};

/// Per scorer: mean over epochs of the normalized agreement of the other
/// scorers with that scorer's label.
std::vector<double> soft_agreement(const AnnotationSet& annotations);

/// Per-epoch majority vote; ties go to the stage chosen by the most reliable
/// (highest soft-agreement) scorer who voted for one of the tied stages.
Hypnogram consensus_hypnogram(const AnnotationSet& annotations);

}  // namespace nap
