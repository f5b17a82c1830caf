#include "nap/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "nap/errors.hpp"
#include "nap/parallel.hpp"

namespace nap {
namespace {

constexpr double kStochasticTolerance = 1e-9;

// Relative likelihood of confusing the true stage (row) with another stage.
constexpr StageMatrix kConfusionAffinity{{
    {0.00, 0.60, 0.15, 0.05, 0.20},
    {0.35, 0.00, 0.45, 0.02, 0.18},
    {0.10, 0.35, 0.00, 0.35, 0.20},
    {0.05, 0.05, 0.85, 0.00, 0.05},
    {0.25, 0.45, 0.25, 0.05, 0.00},
}};

void validate_distribution(const StageDistribution& row, const std::string& what) {
  double total = 0.0;
  for (double p : row) {
    if (!std::isfinite(p) || p < 0.0) throw ValidationError(what + " has a negative entry");
    total += p;
  }
  if (std::abs(total - 1.0) > kStochasticTolerance) {
    throw ValidationError(what + " sums to " + std::to_string(total) + ", not 1");
  }
}

void validate_stochastic(const StageMatrix& m, const std::string& what) {
  for (std::size_t r = 0; r < kNumStages; ++r) {
    validate_distribution(m[r], what + " row " + std::to_string(r));
  }
}

int sample_stage(const StageDistribution& dist, double u) {
  double acc = 0.0;
  int last = 0;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    if (dist[s] <= 0.0) continue;
    acc += dist[s];
    last = static_cast<int>(s);
    if (u < acc) return last;
  }
  return last;
}

// Inverse-CDF draw that visits the true stage first, so that a small uniform
// means "correct" for every stream regardless of its confusion row.
int sample_prediction(const StageDistribution& row, int truth, double u) {
  double acc = row[static_cast<std::size_t>(truth)];
  if (u < acc) return truth;
  int last = truth;
  for (int s = 0; s < static_cast<int>(kNumStages); ++s) {
    if (s == truth || row[static_cast<std::size_t>(s)] <= 0.0) continue;
    acc += row[static_cast<std::size_t>(s)];
    last = s;
    if (u < acc) return s;
  }
  return last;
}

double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

void normalize_row(std::span<double> row) {
  double total = 0.0;
  for (double v : row) total += v;
  for (double& v : row) v /= total;
}

}  // namespace

std::string_view stage_name(int stage) {
  static constexpr std::array<std::string_view, kNumStages> kNames{"W", "N1", "N2", "N3", "REM"};
  if (stage < 0 || stage >= static_cast<int>(kNumStages)) return "?";
  return kNames[static_cast<std::size_t>(stage)];
}

void Hypnogram::validate() const {
  if (stages.empty()) throw ValidationError("hypnogram is empty");
  for (std::size_t t = 0; t < stages.size(); ++t) {
    if (stages[t] < 0 || stages[t] >= static_cast<int>(kNumStages)) {
      throw ValidationError("hypnogram stage " + std::to_string(stages[t]) + " at epoch " +
                            std::to_string(t) + " is outside 0..4");
    }
  }
}

Hypnodensity::Hypnodensity(std::size_t epochs) : epochs_(epochs), probs_(epochs * kNumStages) {}

Hypnodensity::Hypnodensity(std::size_t epochs, std::vector<double> probs)
    : epochs_(epochs), probs_(std::move(probs)) {
  if (probs_.size() != epochs_ * kNumStages) {
    throw ValidationError("hypnodensity of " + std::to_string(epochs_) + " epochs needs " +
                          std::to_string(epochs_ * kNumStages) + " values, got " +
                          std::to_string(probs_.size()));
  }
}

void Hypnodensity::validate(double tolerance) const {
  for (std::size_t t = 0; t < epochs_; ++t) {
    double total = 0.0;
    for (double p : row(t)) {
      if (!std::isfinite(p) || p < 0.0) {
        throw ValidationError("hypnodensity row " + std::to_string(t) +
                              " has a negative or non-finite entry (logits are not accepted)");
      }
      total += p;
    }
    if (std::abs(total - 1.0) > tolerance) {
      throw ValidationError("hypnodensity row " + std::to_string(t) + " sums to " +
                            std::to_string(total) + " (logits are not accepted)");
    }
  }
}

Hypnogram Hypnodensity::argmax() const {
  Hypnogram out;
  out.stages.resize(epochs_);
  for (std::size_t t = 0; t < epochs_; ++t) {
    const auto r = row(t);
    out.stages[t] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

std::size_t PredictionSet::stream_count() const {
  std::size_t n = 0;
  for (const auto& [m, channels] : modalities) {
    for (const auto& [c, predictors] : channels) n += predictors.size();
  }
  return n;
}

std::vector<const Hypnodensity*> PredictionSet::all_streams() const {
  std::vector<const Hypnodensity*> out;
  for (const auto& [m, channels] : modalities) {
    for (const auto& [c, predictors] : channels) {
      for (const auto& [p, density] : predictors) out.push_back(&density);
    }
  }
  return out;
}

void PredictionSet::validate(double tolerance) const {
  truth.validate();
  if (modalities.empty()) throw ValidationError("recording " + id + " has no modalities");
  for (const auto& [m, channels] : modalities) {
    if (channels.empty()) throw ValidationError("modality " + m + " of " + id + " has no channels");
    for (const auto& [c, predictors] : channels) {
      if (predictors.empty()) {
        throw ValidationError("channel " + m + "/" + c + " of " + id + " has no predictors");
      }
      for (const auto& [p, density] : predictors) {
        if (density.epochs() != truth.size()) {
          throw ValidationError("stream " + stream_key(m, c, p) + " of " + id + " has " +
                                std::to_string(density.epochs()) + " epochs, expected " +
                                std::to_string(truth.size()));
        }
        density.validate(tolerance);
      }
    }
  }
}

void ReliabilityProfile::validate() const {
  validate_stochastic(confusion, "confusion matrix");
  if (!(kappa > 0.0) || !std::isfinite(kappa)) {
    throw ValidationError("Dirichlet concentration must be positive");
  }
}

StageMatrix default_transition_matrix() {
  return {{
      {0.85, 0.10, 0.03, 0.00, 0.02},
      {0.04, 0.85, 0.09, 0.00, 0.02},
      {0.02, 0.02, 0.85, 0.06, 0.05},
      {0.02, 0.01, 0.12, 0.85, 0.00},
      {0.05, 0.05, 0.05, 0.00, 0.85},
  }};
}

StageDistribution default_initial_distribution() { return {0.9, 0.1, 0.0, 0.0, 0.0}; }

StageMatrix identity_confusion() { return diagonal_confusion(1.0); }

StageMatrix uniform_confusion() {
  StageMatrix m{};
  for (auto& row : m) row.fill(1.0 / kNumStages);
  return m;
}

StageMatrix diagonal_confusion(double diagonal) {
  StageMatrix m{};
  const double off = (1.0 - diagonal) / static_cast<double>(kNumStages - 1);
  for (std::size_t r = 0; r < kNumStages; ++r) {
    for (std::size_t c = 0; c < kNumStages; ++c) m[r][c] = r == c ? diagonal : off;
  }
  return m;
}

Hypnogram generate_hypnogram(const StageMatrix& transition, const StageDistribution& initial,
                             std::size_t length, std::uint64_t seed) {
  validate_stochastic(transition, "transition matrix");
  validate_distribution(initial, "initial distribution");
  if (length == 0) throw ValidationError("hypnogram length must be at least 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Hypnogram h;
  h.stages.resize(length);
  h.stages[0] = sample_stage(initial, uniform(rng));
  for (std::size_t t = 1; t < length; ++t) {
    h.stages[t] = sample_stage(transition[static_cast<std::size_t>(h.stages[t - 1])], uniform(rng));
  }
  return h;
}

Hypnodensity generate_base_predictions(const Hypnogram& truth, const ReliabilityProfile& profile,
                                       std::uint64_t seed, const SharedNoise* shared) {
  truth.validate();
  profile.validate();
  const std::size_t epochs = truth.size();
  if (shared != nullptr && shared->weight > 0.0 && shared->uniforms.size() < epochs) {
    throw ValidationError("shared noise is shorter than the hypnogram");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  Hypnodensity raw(epochs);
  for (std::size_t t = 0; t < epochs; ++t) {
    const double own = uniform(rng);
    double u = own;
    if (shared != nullptr && shared->weight > 0.0 && uniform(rng) < shared->weight) {
      u = shared->uniforms[t];
    }
    const int truth_stage = truth[t];
    const int predicted =
        sample_prediction(profile.confusion[static_cast<std::size_t>(truth_stage)], truth_stage, u);
    auto row = raw.row(t);
    if (profile.exact) {
      row[static_cast<std::size_t>(predicted)] = 1.0;
      continue;
    }
    for (std::size_t s = 0; s < kNumStages; ++s) {
      const double onehot = static_cast<int>(s) == predicted ? 1.0 : 0.0;
      const double alpha = profile.kappa * (0.9 * onehot + 0.1 / kNumStages);
      std::gamma_distribution<double> gamma(alpha, 1.0);
      // Guard against an all-zero draw for tiny concentrations.
      row[s] = std::max(gamma(rng), 1e-300);
    }
    normalize_row(row);
  }

  Hypnodensity out(epochs);
  const auto w = static_cast<std::ptrdiff_t>(profile.blur);
  for (std::size_t t = 0; t < epochs; ++t) {
    const auto lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(t) - w);
    const auto hi =
        std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(epochs) - 1,
                                 static_cast<std::ptrdiff_t>(t) + w);
    auto row = out.row(t);
    for (std::ptrdiff_t k = lo; k <= hi; ++k) {
      const auto src = raw.row(static_cast<std::size_t>(k));
      for (std::size_t s = 0; s < kNumStages; ++s) row[s] += src[s];
    }
    normalize_row(row);
    for (double& v : row) v = round_to_float(v);
  }
  return out;
}

Hypnodensity soft_vote(std::span<const Hypnodensity* const> streams) {
  if (streams.empty()) throw ValidationError("soft_vote needs at least one stream");
  const std::size_t epochs = streams.front()->epochs();
  for (const Hypnodensity* s : streams) {
    if (s->epochs() != epochs) throw ValidationError("soft_vote streams differ in length");
  }
  Hypnodensity out(epochs);
  auto acc = out.values();
  for (const Hypnodensity* s : streams) {
    const auto v = s->values();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
  }
  for (std::size_t t = 0; t < epochs; ++t) normalize_row(out.row(t));
  return out;
}

Hypnodensity soft_vote(std::span<const Hypnodensity> streams) {
  std::vector<const Hypnodensity*> ptrs;
  ptrs.reserve(streams.size());
  for (const Hypnodensity& s : streams) ptrs.push_back(&s);
  return soft_vote(std::span<const Hypnodensity* const>(ptrs));
}

std::string stream_key(std::string_view modality, std::string_view channel,
                       std::string_view predictor) {
  std::string key;
  key.reserve(modality.size() + channel.size() + predictor.size() + 2);
  key.append(modality).append("/").append(channel).append("/").append(predictor);
  return key;
}

void SynthSpec::validate() const {
  validate_stochastic(transition, "transition matrix");
  validate_distribution(initial, "initial distribution");
  if (min_epochs == 0 || max_epochs < min_epochs) {
    throw ValidationError("recording length range is empty");
  }
  if (layout.empty()) throw ValidationError("synthesis layout has no modalities");
  if (shared_noise < 0.0 || shared_noise > 1.0) {
    throw ValidationError("shared noise weight must lie in [0, 1]");
  }
  for (const auto& m : layout) {
    if (m.channels.empty() || m.predictors.empty()) {
      throw ValidationError("modality " + m.id + " needs at least one channel and predictor");
    }
    for (const auto& c : m.channels) {
      for (const auto& p : m.predictors) {
        const auto it = profiles.find(stream_key(m.id, c, p));
        if (it == profiles.end()) {
          throw ValidationError("no reliability profile for stream " + stream_key(m.id, c, p));
        }
        it->second.validate();
      }
    }
  }
}

std::map<std::string, ReliabilityProfile> make_heterogeneous_profiles(
    const std::vector<ModalityLayout>& layout, double diag_min, double diag_max, double kappa,
    std::size_t blur, std::uint64_t seed) {
  if (!(diag_min > 0.0) || diag_max > 1.0 || diag_max < diag_min) {
    throw ValidationError("diagonal range must satisfy 0 < min <= max <= 1");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> diag(diag_min, diag_max);
  std::map<std::string, ReliabilityProfile> out;
  for (const auto& m : layout) {
    for (const auto& c : m.channels) {
      for (const auto& p : m.predictors) {
        ReliabilityProfile profile;
        profile.kappa = kappa;
        profile.blur = blur;
        for (std::size_t r = 0; r < kNumStages; ++r) {
          const double d = diag(rng);
          double affinity_total = 0.0;
          for (std::size_t s = 0; s < kNumStages; ++s) affinity_total += kConfusionAffinity[r][s];
          for (std::size_t s = 0; s < kNumStages; ++s) {
            profile.confusion[r][s] =
                r == s ? d : (1.0 - d) * kConfusionAffinity[r][s] / affinity_total;
          }
          // Absorb rounding so the row sums to one exactly enough.
          double total = 0.0;
          for (double v : profile.confusion[r]) total += v;
          profile.confusion[r][r] += 1.0 - total;
        }
        out.emplace(stream_key(m.id, c, p), profile);
      }
    }
  }
  return out;
}

PredictionSet generate_recording(const SynthSpec& spec, std::size_t index, std::uint64_t base_seed,
                                 const std::string& id) {
  std::mt19937_64 rng(base_seed + index);
  std::uniform_int_distribution<std::size_t> length(spec.min_epochs, spec.max_epochs);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  PredictionSet set;
  set.id = id;
  const std::size_t epochs = length(rng);
  set.truth = generate_hypnogram(spec.transition, spec.initial, epochs, rng());

  SharedNoise shared;
  shared.weight = spec.shared_noise;
  if (shared.weight > 0.0) {
    shared.uniforms.resize(epochs);
    for (double& u : shared.uniforms) u = uniform(rng);
  }
  for (const auto& m : spec.layout) {
    auto& channels = set.modalities[m.id];
    for (const auto& c : m.channels) {
      auto& predictors = channels[c];
      for (const auto& p : m.predictors) {
        const ReliabilityProfile& profile = spec.profiles.at(stream_key(m.id, c, p));
        predictors.emplace(p, generate_base_predictions(set.truth, profile, rng(), &shared));
      }
    }
  }
  return set;
}

std::vector<PredictionSet> generate_dataset(const SynthSpec& spec, std::size_t first,
                                            std::size_t count, std::uint64_t base_seed,
                                            const std::string& prefix, unsigned threads) {
  spec.validate();
  std::vector<PredictionSet> out(count);
  detail::parallel_for(count, threads, [&](std::size_t i) {
    char suffix[16];
    std::snprintf(suffix, sizeof suffix, "%04zu", first + i);
    out[i] = generate_recording(spec, first + i, base_seed, prefix + suffix);
  });
  return out;
}

}  // namespace nap
