#include "nap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "nap/errors.hpp"
#include "nap/parallel.hpp"

namespace nap {
namespace {

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  a.count = values.size();
  if (values.empty()) return a;
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return a;
}

std::vector<std::string> keys_of(const auto& map) {
  std::vector<std::string> out;
  out.reserve(map.size());
  for (const auto& [key, value] : map) out.push_back(key);
  return out;
}

void require_nonempty(std::span<const PredictionSet> sets) {
  if (sets.empty()) throw ValidationError("evaluation needs at least one recording");
}

}  // namespace

StageScores per_stage_f1(const Hypnogram& pred, const Hypnogram& truth) {
  if (pred.size() != truth.size()) {
    throw ValidationError("prediction has " + std::to_string(pred.size()) +
                          " epochs, truth has " + std::to_string(truth.size()));
  }
  StageScores s;
  for (std::size_t t = 0; t < truth.size(); ++t) {
    const int y = truth[t];
    const int p = pred[t];
    if (y < 0 || y >= static_cast<int>(kNumStages) || p < 0 || p >= static_cast<int>(kNumStages)) {
      throw ValidationError("stage out of range at epoch " + std::to_string(t));
    }
    ++s.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)];
  }
  double total = 0.0;
  std::size_t defined = 0;
  for (std::size_t k = 0; k < kNumStages; ++k) {
    std::size_t row = 0;
    std::size_t col = 0;
    for (std::size_t j = 0; j < kNumStages; ++j) {
      row += s.confusion[k][j];
      col += s.confusion[j][k];
    }
    if (row == 0 && col == 0) continue;
    const std::size_t tp = s.confusion[k][k];
    // 2TP / (2TP + FP + FN) with FP = col - TP and FN = row - TP.
    const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(row + col);
    s.f1[k] = f1;
    total += f1;
    ++defined;
  }
  s.macro_f1 = defined == 0 ? 0.0 : total / static_cast<double>(defined);
  return s;
}

std::vector<std::pair<std::size_t, std::size_t>> inference_windows(std::size_t epochs,
                                                                   std::size_t window) {
  if (window == 0) throw ValidationError("inference window must be at least 1 epoch");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (epochs == 0) return out;
  if (epochs <= window) {
    out.emplace_back(0, epochs);
    return out;
  }
  std::size_t begin = 0;
  for (; begin + window <= epochs; begin += window) out.emplace_back(begin, begin + window);
  if (begin < epochs) out.emplace_back(epochs - window, epochs);
  return out;
}

void copy_stream_block(const PredictionSet& set, const std::string& modality,
                       std::span<const std::string> channels,
                       std::span<const std::string> predictors, std::size_t begin,
                       std::size_t length, double* dst) {
  if (begin + length > set.epochs()) {
    throw ValidationError("epoch range exceeds recording " + set.id);
  }
  const auto mod = set.modalities.find(modality);
  if (mod == set.modalities.end()) {
    throw ValidationError("recording " + set.id + " lacks modality " + modality);
  }
  const std::size_t nc = channels.size();
  const std::size_t nb = predictors.size();
  for (std::size_t c = 0; c < nc; ++c) {
    const auto chan = mod->second.find(channels[c]);
    if (chan == mod->second.end()) {
      throw ValidationError("recording " + set.id + " lacks channel " + modality + "/" +
                            channels[c]);
    }
    for (std::size_t b = 0; b < nb; ++b) {
      const auto pred = chan->second.find(predictors[b]);
      if (pred == chan->second.end()) {
        throw ValidationError("recording " + set.id + " lacks stream " +
                              stream_key(modality, channels[c], predictors[b]));
      }
      for (std::size_t t = 0; t < length; ++t) {
        const auto row = pred->second.row(begin + t);
        std::copy(row.begin(), row.end(), dst + ((t * nc + c) * nb + b) * kNumStages);
      }
    }
  }
}

std::vector<ModalityInput> recording_inputs(const PredictionSet& set, const ModelConfig& config,
                                            std::size_t begin, std::size_t length) {
  std::vector<ModalityInput> inputs;
  for (const auto& [modality, channels] : set.modalities) {
    if (channels.empty()) throw ValidationError("modality " + modality + " has no channels");
    const std::vector<std::string> channel_ids = keys_of(channels);
    const std::vector<std::string> predictor_ids = keys_of(channels.begin()->second);
    for (const auto& [c, predictors] : channels) {
      if (keys_of(predictors) != predictor_ids) {
        throw ValidationError("channels of " + modality + " in " + set.id +
                              " expose different predictors");
      }
    }
    ModalityInput in;
    in.modality = config.modality_index(modality);
    in.probs = Tensor({1, length, channel_ids.size(), predictor_ids.size(), kNumStages});
    copy_stream_block(set, modality, channel_ids, predictor_ids, begin, length, in.probs.data());
    inputs.push_back(std::move(in));
  }
  return inputs;
}

InferenceResult infer_recording(const NapParameters& params, const ModelConfig& config,
                                const PredictionSet& set, std::size_t window) {
  const std::size_t epochs = set.epochs();
  if (epochs == 0) throw ValidationError("recording " + set.id + " has no epochs");
  std::vector<double> sum(epochs * kNumStages, 0.0);
  std::vector<double> hits(epochs, 0.0);
  for (const auto& [begin, end] : inference_windows(epochs, window)) {
    const std::vector<ModalityInput> inputs = recording_inputs(set, config, begin, end - begin);
    const Tensor probs = predict_probabilities(inputs, params, config);
    for (std::size_t t = 0; t < end - begin; ++t) {
      for (std::size_t k = 0; k < kNumStages; ++k) {
        sum[(begin + t) * kNumStages + k] += probs[t * kNumStages + k];
      }
      hits[begin + t] += 1.0;
    }
  }
  for (std::size_t t = 0; t < epochs; ++t) {
    for (std::size_t k = 0; k < kNumStages; ++k) sum[t * kNumStages + k] /= hits[t];
  }
  InferenceResult out{Hypnodensity(epochs, std::move(sum)), {}};
  out.hypnogram = out.density.argmax();
  return out;
}

Aggregate MetricsReport::macro_f1() const {
  std::vector<double> v;
  v.reserve(recordings.size());
  for (const RecordingScore& r : recordings) v.push_back(r.scores.macro_f1);
  return aggregate(v);
}

Aggregate MetricsReport::stage_f1(std::size_t stage) const {
  if (stage >= kNumStages) throw ValidationError("stage index out of range");
  std::vector<double> v;
  for (const RecordingScore& r : recordings) {
    if (r.scores.f1[stage]) v.push_back(*r.scores.f1[stage]);
  }
  return aggregate(v);
}

MetricsReport score_predictions(std::string method, std::span<const PredictionSet> sets,
                                std::span<const Hypnogram> predictions) {
  if (sets.size() != predictions.size()) {
    throw ValidationError("got " + std::to_string(predictions.size()) + " predictions for " +
                          std::to_string(sets.size()) + " recordings");
  }
  MetricsReport report{std::move(method), {}};
  report.recordings.reserve(sets.size());
  for (std::size_t i = 0; i < sets.size(); ++i) {
    report.recordings.push_back({sets[i].id, per_stage_f1(predictions[i], sets[i].truth)});
  }
  return report;
}

Hypnodensity predictor_soft_vote(const PredictionSet& set, const std::string& modality,
                                 const std::string& predictor) {
  const auto mod = set.modalities.find(modality);
  if (mod == set.modalities.end()) {
    throw ValidationError("recording " + set.id + " lacks modality " + modality);
  }
  std::vector<const Hypnodensity*> streams;
  for (const auto& [c, predictors] : mod->second) {
    const auto it = predictors.find(predictor);
    if (it != predictors.end()) streams.push_back(&it->second);
  }
  if (streams.empty()) {
    throw ValidationError("recording " + set.id + " has no stream from " + modality + "/" +
                          predictor);
  }
  return soft_vote(streams);
}

Hypnodensity full_soft_vote(const PredictionSet& set) {
  const std::vector<const Hypnodensity*> streams = set.all_streams();
  return soft_vote(streams);
}

std::vector<MetricsReport> MethodComparison::reports() const {
  std::vector<MetricsReport> out{best_single, soft_vote};
  if (nap) out.push_back(*nap);
  return out;
}

MetricsReport evaluate_nap(std::span<const PredictionSet> sets, const NapParameters& params,
                           const ModelConfig& config, std::size_t window, unsigned threads) {
  require_nonempty(sets);
  std::vector<Hypnogram> predictions(sets.size());
  detail::parallel_for(sets.size(), threads, [&](std::size_t i) {
    predictions[i] = infer_recording(params, config, sets[i], window).hypnogram;
  });
  return score_predictions("NAP", sets, predictions);
}

MethodComparison evaluate_methods(std::span<const PredictionSet> sets,
                                  const NapParameters* params, const ModelConfig* config,
                                  std::size_t window, unsigned threads) {
  require_nonempty(sets);
  if ((params == nullptr) != (config == nullptr)) {
    throw ValidationError("NAP evaluation needs both parameters and a model config");
  }

  // Candidates are (modality, predictor) pairs present in every recording.
  std::set<std::pair<std::string, std::string>> candidates;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    std::set<std::pair<std::string, std::string>> here;
    for (const auto& [m, channels] : sets[i].modalities) {
      for (const auto& [c, predictors] : channels) {
        for (const auto& [p, density] : predictors) here.emplace(m, p);
      }
    }
    if (i == 0) {
      candidates = std::move(here);
    } else {
      std::set<std::pair<std::string, std::string>> both;
      std::set_intersection(candidates.begin(), candidates.end(), here.begin(), here.end(),
                            std::inserter(both, both.begin()));
      candidates = std::move(both);
    }
  }
  if (candidates.empty()) {
    throw ValidationError("no base predictor is available in every recording");
  }

  MethodComparison out;
  bool have_best = false;
  double best_mf1 = 0.0;
  for (const auto& [m, p] : candidates) {
    std::vector<Hypnogram> predictions(sets.size());
    detail::parallel_for(sets.size(), threads, [&](std::size_t i) {
      predictions[i] = predictor_soft_vote(sets[i], m, p).argmax();
    });
    MetricsReport report = score_predictions("best single", sets, predictions);
    const double mf1 = report.macro_f1().mean;
    // Strict comparison keeps the first candidate in (modality, predictor)
    // order on ties.
    if (!have_best || mf1 > best_mf1) {
      have_best = true;
      best_mf1 = mf1;
      out.best_single_predictor = m + "/" + p;
      out.best_single = std::move(report);
    }
  }

  std::vector<Hypnogram> votes(sets.size());
  detail::parallel_for(sets.size(), threads,
                       [&](std::size_t i) { votes[i] = full_soft_vote(sets[i]).argmax(); });
  out.soft_vote = score_predictions("SOMNUS", sets, votes);

  if (params != nullptr) out.nap = evaluate_nap(sets, *params, *config, window, threads);
  return out;
}

void write_metrics_csv(std::ostream& out, const std::string& dataset,
                       std::span<const MetricsReport> reports, bool header) {
  if (header) out << "dataset,method,recording_id,mf1,f1_w,f1_n1,f1_n2,f1_n3,f1_rem\n";
  char buffer[32];
  auto number = [&](double v) {
    std::snprintf(buffer, sizeof buffer, "%.6f", v);
    return std::string(buffer);
  };
  for (const MetricsReport& report : reports) {
    for (const RecordingScore& r : report.recordings) {
      out << dataset << ',' << report.method << ',' << r.recording_id << ','
          << number(r.scores.macro_f1);
      for (const auto& f1 : r.scores.f1) {
        out << ',';
        if (f1) out << number(*f1);
      }
      out << '\n';
    }
  }
}

std::string format_metrics_table(const std::string& dataset,
                                 std::span<const MetricsReport> reports) {
  auto cell = [](const Aggregate& a) {
    if (a.count == 0) return std::string("-");
    char buffer[48];
    std::snprintf(buffer, sizeof buffer, "%.3f(%.3f)", a.mean, a.sd);
    return std::string(buffer);
  };
  std::size_t method_width = 6;
  for (const MetricsReport& r : reports) method_width = std::max(method_width, r.method.size());

  std::ostringstream os;
  os << "Dataset: " << dataset << '\n';
  os << std::left << std::setw(static_cast<int>(method_width)) << "Method";
  for (const char* h : {"MF1", "W", "N1", "N2", "N3", "REM"}) {
    os << "  " << std::setw(12) << h;
  }
  os << '\n';
  for (const MetricsReport& r : reports) {
    os << std::setw(static_cast<int>(method_width)) << r.method;
    os << "  " << std::setw(12) << cell(r.macro_f1());
    for (std::size_t k = 0; k < kNumStages; ++k) os << "  " << std::setw(12) << cell(r.stage_f1(k));
    os << '\n';
  }
  return os.str();
}

void AnnotationSet::validate() const {
  if (scorers.size() < 2) throw ValidationError("annotation set needs at least two scorers");
  for (const Hypnogram& h : scorers) {
    h.validate();
    if (h.size() != scorers.front().size()) {
      throw ValidationError("scorer hypnograms differ in length");
    }
  }
}

std::vector<double> soft_agreement(const AnnotationSet& annotations) {
  annotations.validate();
  const std::size_t n = annotations.scorers.size();
  const std::size_t epochs = annotations.epochs();
  std::vector<double> out(n, 0.0);
  for (std::size_t t = 0; t < epochs; ++t) {
    std::array<double, kNumStages> all{};
    for (const Hypnogram& h : annotations.scorers) all[static_cast<std::size_t>(h[t])] += 1.0;
    for (std::size_t s = 0; s < n; ++s) {
      const auto own = static_cast<std::size_t>(annotations.scorers[s][t]);
      std::array<double, kNumStages> others = all;
      others[own] -= 1.0;
      const double peak = *std::max_element(others.begin(), others.end());
      out[s] += others[own] / peak;
    }
  }
  for (double& v : out) v /= static_cast<double>(epochs);
  return out;
}

Hypnogram consensus_hypnogram(const AnnotationSet& annotations) {
  const std::vector<double> reliability = soft_agreement(annotations);
  std::vector<std::size_t> by_reliability(reliability.size());
  std::iota(by_reliability.begin(), by_reliability.end(), std::size_t{0});
  std::stable_sort(by_reliability.begin(), by_reliability.end(),
                   [&](std::size_t a, std::size_t b) { return reliability[a] > reliability[b]; });

  Hypnogram out;
  out.stages.resize(annotations.epochs());
  for (std::size_t t = 0; t < out.size(); ++t) {
    std::array<std::size_t, kNumStages> votes{};
    for (const Hypnogram& h : annotations.scorers) ++votes[static_cast<std::size_t>(h[t])];
    const std::size_t top = *std::max_element(votes.begin(), votes.end());
    int chosen = -1;
    for (std::size_t s : by_reliability) {
      const int label = annotations.scorers[s][t];
      if (votes[static_cast<std::size_t>(label)] == top) {
        chosen = label;
        break;
      }
    }
    out.stages[t] = chosen;
  }
  return out;
}

}  // namespace nap
