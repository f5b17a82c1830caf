#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace nap {

inline constexpr std::size_t kNumStages = 5;

/// Sleep stage indices used throughout: 0 Wake, 1 N1, 2 N2, 3 N3, 4 REM.
enum Stage : int { kWake = 0, kN1 = 1, kN2 = 2, kN3 = 3, kREM = 4 };

std::string_view stage_name(int stage);

using StageDistribution = std::array<double, kNumStages>;
using StageMatrix = std::array<StageDistribution, kNumStages>;

/// Discrete per-epoch stage sequence.
struct Hypnogram {
  std::vector<int> stages;

  [[nodiscard]] std::size_t size() const noexcept { return stages.size(); }
  int operator[](std::size_t t) const { return stages[t]; }
  /// Throws ValidationError unless non-empty with every stage in [0, 5).
  void validate() const;

  friend bool operator==(const Hypnogram&, const Hypnogram&) = default;
};

/// Per-epoch probability distribution over the five stages (epochs x 5,
/// row-major).
class Hypnodensity {
 public:
  Hypnodensity() = default;
  explicit Hypnodensity(std::size_t epochs);
  Hypnodensity(std::size_t epochs, std::vector<double> probs);

  [[nodiscard]] std::size_t epochs() const noexcept { return epochs_; }
  [[nodiscard]] std::span<double> row(std::size_t t) {
    return {probs_.data() + t * kNumStages, kNumStages};
  }
  [[nodiscard]] std::span<const double> row(std::size_t t) const {
    return {probs_.data() + t * kNumStages, kNumStages};
  }
  [[nodiscard]] std::span<const double> values() const noexcept { return probs_; }
  [[nodiscard]] std::span<double> values() noexcept { return probs_; }

  /// Throws ValidationError if any row is negative, non-finite or does not
  /// sum to one within `tolerance`. Logit-valued streams fail this check.
  void validate(double tolerance = 1e-6) const;

  /// Per-epoch argmax (lowest index wins ties).
  [[nodiscard]] Hypnogram argmax() const;

  friend bool operator==(const Hypnodensity&, const Hypnodensity&) = default;

 private:
  std::size_t epochs_ = 0;
  std::vector<double> probs_;
};

using PredictorStreams = std::map<std::string, Hypnodensity>;
using ChannelStreams = std::map<std::string, PredictorStreams>;

/// All base-prediction streams of one recording: modality -> channel ->
/// predictor -> hypnodensity, plus the ground truth.
struct PredictionSet {
  std::string id;
  Hypnogram truth;
  std::map<std::string, ChannelStreams> modalities;

  [[nodiscard]] std::size_t epochs() const noexcept { return truth.size(); }
  [[nodiscard]] std::size_t stream_count() const;
  /// Every stream in modality/channel/predictor order.
  [[nodiscard]] std::vector<const Hypnodensity*> all_streams() const;
  /// Throws ValidationError on empty modalities/channels, length mismatches,
  /// or invalid probability rows.
  void validate(double tolerance = 1e-4) const;

  friend bool operator==(const PredictionSet&, const PredictionSet&) = default;
};

/// Error model of one synthetic base predictor.
struct ReliabilityProfile {
  /// confusion[true_stage][predicted_stage]; rows are distributions.
  StageMatrix confusion{};
  /// Dirichlet concentration of the emitted probability rows.
  double kappa = 20.0;
  /// Half-width, in epochs, of the centered moving average applied to the
  /// emitted rows. 0 disables smoothing.
  std::size_t blur = 2;
  /// Emit one-hot rows (the kappa -> infinity limit).
  bool exact = false;

  void validate() const;
};

/// Per-epoch uniforms shared by a group of streams. Each stream draws its
/// predicted stage from the shared uniform with probability `weight` and from
/// its own generator otherwise, which correlates the errors of the group.
struct SharedNoise {
  std::vector<double> uniforms;
  double weight = 0.0;
};

StageMatrix default_transition_matrix();
StageDistribution default_initial_distribution();
StageMatrix identity_confusion();
StageMatrix uniform_confusion();
/// Confusion with `diagonal` on the diagonal and the remaining mass spread
/// evenly over the other stages.
StageMatrix diagonal_confusion(double diagonal);

/// First-order Markov sample of `length` stages.
Hypnogram generate_hypnogram(const StageMatrix& transition, const StageDistribution& initial,
                             std::size_t length, std::uint64_t seed);

/// Synthetic base-predictor output for `truth`: per epoch a predicted stage
/// is drawn from the confusion row of the true stage, a Dirichlet row with
/// concentration kappa * (0.9 onehot + 0.1 uniform) is emitted around it, the
/// sequence is blurred, and rows are renormalized. Values are rounded to
/// float precision so that they survive the dataset file format exactly.
Hypnodensity generate_base_predictions(const Hypnogram& truth, const ReliabilityProfile& profile,
                                       std::uint64_t seed, const SharedNoise* shared = nullptr);

/// Unweighted per-epoch mean of the streams' rows.
Hypnodensity soft_vote(std::span<const Hypnodensity* const> streams);
Hypnodensity soft_vote(std::span<const Hypnodensity> streams);

/// Modality with its channel and predictor identifiers.
struct ModalityLayout {
  std::string id;
  std::vector<std::string> channels;
  std::vector<std::string> predictors;
};

/// Everything needed to synthesize a dataset of prediction sets.
struct SynthSpec {
  StageMatrix transition = default_transition_matrix();
  StageDistribution initial = default_initial_distribution();
  std::size_t min_epochs = 300;
  std::size_t max_epochs = 300;
  std::vector<ModalityLayout> layout;
  /// Keyed by stream_key(modality, channel, predictor).
  std::map<std::string, ReliabilityProfile> profiles;
  /// Weight of the per-recording shared uniforms (0 = independent streams).
  double shared_noise = 0.0;

  void validate() const;
};

std::string stream_key(std::string_view modality, std::string_view channel,
                       std::string_view predictor);

/// Profiles whose per-stage diagonal mass is drawn uniformly from
/// [diag_min, diag_max] independently for every stream and true stage; the
/// off-diagonal mass favours physiologically adjacent stages.
std::map<std::string, ReliabilityProfile> make_heterogeneous_profiles(
    const std::vector<ModalityLayout>& layout, double diag_min, double diag_max, double kappa,
    std::size_t blur, std::uint64_t seed);

/// Recording `index` uses seed base_seed + index, so generating a range
/// serially or in parallel gives identical results.
PredictionSet generate_recording(const SynthSpec& spec, std::size_t index, std::uint64_t base_seed,
                                 const std::string& id);

/// Generates recordings [first, first + count) named "<prefix><index>".
std::vector<PredictionSet> generate_dataset(const SynthSpec& spec, std::size_t first,
                                            std::size_t count, std::uint64_t base_seed,
                                            const std::string& prefix, unsigned threads = 1);

}  // namespace nap
