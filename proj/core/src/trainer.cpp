#include "nap/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <iterator>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "nap/errors.hpp"
#include "nap/ops.hpp"
#include "nap/parallel.hpp"

namespace nap {
namespace {

constexpr std::size_t kRecordingRetries = 10;

std::size_t uniform_index(std::size_t lo, std::size_t hi, std::mt19937_64& rng) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// k distinct indices from [0, n), sorted.
std::vector<std::size_t> choose_distinct(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[uniform_index(i, n - 1, rng)]);
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::vector<std::string> choose_ids(const std::vector<std::string>& options, std::size_t k,
                                    std::mt19937_64& rng) {
  std::vector<std::string> out;
  for (std::size_t i : choose_distinct(options.size(), k, rng)) out.push_back(options[i]);
  return out;
}

std::vector<std::string> intersect(const std::vector<std::string>& a,
                                   const std::vector<std::string>& b) {
  std::vector<std::string> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

bool has_modalities(const PredictionSet& set, const BatchSpec& spec, const ModelConfig& config) {
  return std::all_of(spec.modalities.begin(), spec.modalities.end(),
                     [&](const ModalitySelection& sel) {
                       return set.modalities.contains(config.modalities.at(sel.modality));
                     });
}

std::vector<std::size_t> pick_recordings(std::span<const PredictionSet> dataset,
                                         const BatchSpec& spec, const ModelConfig& config,
                                         std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> picks;
  for (std::size_t attempt = 0; attempt <= kRecordingRetries; ++attempt) {
    picks = choose_distinct(dataset.size(), count, rng);
    const bool complete = std::all_of(picks.begin(), picks.end(), [&](std::size_t r) {
      return has_modalities(dataset[r], spec, config);
    });
    if (complete) return picks;
  }
  std::vector<std::size_t> kept;
  for (std::size_t r : picks) {
    if (has_modalities(dataset[r], spec, config)) {
      kept.push_back(r);
    } else {
      std::clog << "warning: skipping recording " << dataset[r].id
                << " which lacks a modality selected for this batch\n";
    }
  }
  if (kept.empty()) throw ValidationError("no recording provides the modalities of the batch");
  return kept;
}

void check_same_structure(const NapParameters& a, const NapParameters& b, const char* what) {
  visit_parameters(
      [&](const std::string& name, const Tensor& x, const Tensor& y) {
        if (x.shape() != y.shape()) {
          throw DimensionError(std::string(what) + " shape mismatch for " + name + ": " +
                               shape_to_string(x.shape()) + " vs " + shape_to_string(y.shape()));
        }
      },
      a, b);
}

}  // namespace

BatchMaxima BatchMaxima::from_config(const ModelConfig& config) {
  return {config.max_channels, config.max_predictors};
}

void BatchSpec::validate(const BatchMaxima& maxima, const TimeBounds& bounds) const {
  if (epochs < bounds.lo || epochs > bounds.hi) {
    throw ValidationError("batch T = " + std::to_string(epochs) + " outside bounds");
  }
  if (modalities.empty() || modalities.size() > maxima.modalities()) {
    throw ValidationError("batch modality count out of range");
  }
  std::set<std::size_t> seen;
  for (const ModalitySelection& sel : modalities) {
    if (sel.modality >= maxima.modalities() || !seen.insert(sel.modality).second) {
      throw ValidationError("batch modality index invalid or repeated");
    }
    if (sel.channels < 1 || sel.channels > maxima.channels[sel.modality] || sel.predictors < 1 ||
        sel.predictors > maxima.predictors[sel.modality]) {
      throw ValidationError("batch channel/predictor count out of range");
    }
  }
}

BatchSpec sample_batch_dims(const BatchMaxima& maxima, const TimeBounds& bounds,
                            std::mt19937_64& rng) {
  const std::size_t m_max = maxima.modalities();
  if (m_max == 0 || maxima.predictors.size() != m_max) {
    throw ValidationError("batch maxima need at least one modality");
  }
  for (std::size_t k = 0; k < m_max; ++k) {
    if (maxima.channels[k] == 0 || maxima.predictors[k] == 0) {
      throw ValidationError("channel and predictor maxima must be at least 1");
    }
  }
  if (bounds.lo == 0 || bounds.lo > bounds.hi) throw ValidationError("invalid T bounds");

  BatchSpec spec;
  spec.epochs = uniform_index(bounds.lo, bounds.hi, rng);
  const std::size_t m = uniform_index(1, m_max, rng);
  for (std::size_t k : choose_distinct(m_max, m, rng)) {
    ModalitySelection sel;
    sel.modality = k;
    sel.channels = uniform_index(1, maxima.channels[k], rng);
    sel.predictors = uniform_index(1, maxima.predictors[k], rng);
    spec.modalities.push_back(std::move(sel));
  }
  return spec;
}

namespace {

// Identities already present in the spec (e.g. copied from an earlier batch)
// are kept when they are all still available.
bool keeps_preset(const std::vector<std::string>& preset, std::size_t count,
                  const std::vector<std::string>& available) {
  if (preset.size() != count) return false;
  return std::all_of(preset.begin(), preset.end(), [&](const std::string& id) {
    return std::find(available.begin(), available.end(), id) != available.end();
  });
}

}  // namespace

Batch assemble_batch(std::span<const PredictionSet> dataset, const ModelConfig& config,
                     BatchSpec spec, std::size_t recordings, std::size_t segments_per_recording,
                     const TimeBounds& bounds, std::mt19937_64& rng) {
  if (recordings == 0 || segments_per_recording == 0) {
    throw ValidationError("batch needs at least one recording and one segment");
  }
  if (dataset.size() < recordings) {
    throw ValidationError("dataset has " + std::to_string(dataset.size()) +
                          " recordings, batch needs " + std::to_string(recordings));
  }
  if (spec.modalities.empty()) throw ValidationError("batch spec selects no modality");
  const std::vector<std::size_t> picks = pick_recordings(dataset, spec, config, recordings, rng);

  std::size_t shortest = std::numeric_limits<std::size_t>::max();
  for (std::size_t r : picks) shortest = std::min(shortest, dataset[r].epochs());
  if (shortest < spec.epochs) {
    spec.epochs = uniform_index(std::min(bounds.lo, shortest), shortest, rng);
  }

  for (ModalitySelection& sel : spec.modalities) {
    const std::string& modality = config.modalities.at(sel.modality);
    std::vector<std::string> channels;
    for (std::size_t i = 0; i < picks.size(); ++i) {
      std::vector<std::string> here;
      for (const auto& [c, p] : dataset[picks[i]].modalities.at(modality)) here.push_back(c);
      channels = i == 0 ? here : intersect(channels, here);
    }
    if (channels.empty()) {
      throw ValidationError("recordings of the batch share no channel of " + modality);
    }
    sel.channels = std::min(sel.channels, channels.size());
    if (!keeps_preset(sel.channel_ids, sel.channels, channels)) {
      sel.channel_ids = choose_ids(channels, sel.channels, rng);
    }

    std::vector<std::string> predictors;
    bool first = true;
    for (std::size_t r : picks) {
      for (const std::string& c : sel.channel_ids) {
        std::vector<std::string> here;
        for (const auto& [p, d] : dataset[r].modalities.at(modality).at(c)) here.push_back(p);
        predictors = first ? here : intersect(predictors, here);
        first = false;
      }
    }
    if (predictors.empty()) {
      throw ValidationError("selected channels of " + modality + " share no predictor");
    }
    sel.predictors = std::min(sel.predictors, predictors.size());
    if (!keeps_preset(sel.predictor_ids, sel.predictors, predictors)) {
      sel.predictor_ids = choose_ids(predictors, sel.predictors, rng);
    }
  }

  Batch batch;
  const std::size_t t_len = spec.epochs;
  for (std::size_t r : picks) {
    const std::size_t last = dataset[r].epochs() - t_len;
    for (std::size_t k = 0; k < segments_per_recording; ++k) {
      batch.segments.push_back({r, uniform_index(0, last, rng)});
    }
  }
  const std::size_t s_count = batch.segments.size();

  for (const ModalitySelection& sel : spec.modalities) {
    ModalityInput in;
    in.modality = sel.modality;
    in.probs = Tensor({s_count, t_len, sel.channels, sel.predictors, kNumStages});
    const std::size_t block = t_len * sel.channels * sel.predictors * kNumStages;
    for (std::size_t s = 0; s < s_count; ++s) {
      copy_stream_block(dataset[batch.segments[s].recording], config.modalities[sel.modality],
                        sel.channel_ids, sel.predictor_ids, batch.segments[s].start, t_len,
                        in.probs.data() + s * block);
    }
    batch.inputs.push_back(std::move(in));
  }
  batch.labels.reserve(s_count * t_len);
  for (const Segment& seg : batch.segments) {
    const auto& stages = dataset[seg.recording].truth.stages;
    batch.labels.insert(batch.labels.end(), stages.begin() + static_cast<std::ptrdiff_t>(seg.start),
                        stages.begin() + static_cast<std::ptrdiff_t>(seg.start + t_len));
  }
  batch.spec = std::move(spec);
  return batch;
}

Batch merge_batches(std::span<const Batch> batches) {
  if (batches.empty()) throw ValidationError("nothing to merge");
  const BatchSpec& spec = batches.front().spec;
  for (const Batch& b : batches) {
    bool same = b.spec.epochs == spec.epochs && b.spec.modalities.size() == spec.modalities.size();
    for (std::size_t k = 0; same && k < spec.modalities.size(); ++k) {
      const ModalitySelection& x = b.spec.modalities[k];
      const ModalitySelection& y = spec.modalities[k];
      same = x.modality == y.modality && x.channel_ids == y.channel_ids &&
             x.predictor_ids == y.predictor_ids;
    }
    if (!same) throw ValidationError("only batches with identical selections can be merged");
  }
  Batch out;
  out.spec = spec;
  for (std::size_t k = 0; k < spec.modalities.size(); ++k) {
    Shape shape = batches.front().inputs[k].probs.shape();
    std::vector<double> values;
    shape[0] = 0;
    for (const Batch& b : batches) {
      shape[0] += b.inputs[k].probs.dim(0);
      const auto v = b.inputs[k].probs.values();
      values.insert(values.end(), v.begin(), v.end());
    }
    out.inputs.push_back({spec.modalities[k].modality, Tensor(std::move(shape), std::move(values))});
  }
  for (const Batch& b : batches) {
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.segments.insert(out.segments.end(), b.segments.begin(), b.segments.end());
  }
  return out;
}

BatchGradient batch_gradient(const NapParameters& params, const ModelConfig& config,
                             const Batch& batch, const DropoutContext& dropout) {
  Tape tape;
  const BoundParameters bound = bind_parameters(tape, params, true);
  const ForwardResult result = forward(tape, batch.inputs, bound, config, dropout);
  const Var loss = ops::cross_entropy(result.logits, batch.labels);
  const double value = loss.value().item();
  if (!std::isfinite(value)) throw NumericError("training loss is not finite");
  tape.backward(loss);
  return {value, batch.token_count(), collect_gradients(tape, bound, params)};
}

BatchGradient accumulate_gradients(std::span<const BatchGradient> parts) {
  if (parts.empty()) throw ValidationError("no gradients to accumulate");
  std::size_t total = 0;
  for (const BatchGradient& p : parts) total += p.tokens;
  if (total == 0) throw ValidationError("accumulated batches hold no tokens");
  BatchGradient out{0.0, total, zeros_like(parts.front().grads)};
  for (const BatchGradient& p : parts) {
    const double w = static_cast<double>(p.tokens) / static_cast<double>(total);
    out.loss += w * p.loss;
    check_same_structure(out.grads, p.grads, "gradient");
    visit_parameters(
        [w](const std::string&, Tensor& acc, const Tensor& g) {
          for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * g[i];
        },
        out.grads, p.grads);
  }
  return out;
}

OptimizerState OptimizerState::zeros(const NapParameters& like) {
  return {zeros_like(like), zeros_like(like), 0};
}

void adamw_step(NapParameters& params, const NapParameters& grads, OptimizerState& state,
                const AdamWConfig& c) {
  check_same_structure(params, grads, "gradient");
  check_same_structure(params, state.m, "first moment");
  check_same_structure(params, state.v, "second moment");
  visit_parameters(
      [](const std::string& name, const Tensor& g) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!std::isfinite(g[i])) {
            throw NumericError("non-finite gradient in " + name + " at index " +
                               std::to_string(i) + "; optimizer step aborted");
          }
        }
      },
      grads);

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  visit_parameters(
      [&](const std::string&, Tensor& theta, const Tensor& g, Tensor& m, Tensor& v) {
        for (std::size_t i = 0; i < theta.size(); ++i) {
          m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
          v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
          const double m_hat = m[i] / correction1;
          const double v_hat = v[i] / correction2;
          theta[i] -= c.learning_rate * (m_hat / (std::sqrt(v_hat) + c.epsilon) +
                                         c.weight_decay * theta[i]);
        }
      },
      params, grads, state.m, state.v);
}

void TrainConfig::validate() const {
  if (recordings_per_batch == 0 || segments_per_recording == 0 || accumulation_steps == 0) {
    throw ConfigError("batch sizes and accumulation steps must be at least 1");
  }
  if (steps_per_epoch == 0 || max_epochs == 0) {
    throw ConfigError("steps_per_epoch and max_epochs must be at least 1");
  }
  if (time_bounds.lo == 0 || time_bounds.lo > time_bounds.hi) {
    throw ConfigError("time bounds must satisfy 1 <= lo <= hi");
  }
  if (inference_window == 0) throw ConfigError("inference window must be at least 1");
  if (!(optimizer.learning_rate > 0.0) || optimizer.weight_decay < 0.0 ||
      !(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) ||
      !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0) || !(optimizer.epsilon > 0.0)) {
    throw ConfigError("invalid optimizer settings");
  }
}

ModelConfig fit_model_config(ModelConfig base, std::span<const PredictionSet> train_set) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> maxima;
  for (const PredictionSet& set : train_set) {
    for (const auto& [m, channels] : set.modalities) {
      auto& [c_max, b_max] = maxima[m];
      c_max = std::max(c_max, channels.size());
      for (const auto& [c, predictors] : channels) b_max = std::max(b_max, predictors.size());
    }
  }
  base.modalities.clear();
  base.max_channels.clear();
  base.max_predictors.clear();
  for (const auto& [m, cb] : maxima) {
    base.modalities.push_back(m);
    base.max_channels.push_back(cb.first);
    base.max_predictors.push_back(cb.second);
  }
  return base;
}

TrainResult train(std::span<const PredictionSet> train_set,
                  std::span<const PredictionSet> validation_set, const ModelConfig& model,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (train_set.empty()) throw ValidationError("training split is empty");
  if (validation_set.empty()) throw ValidationError("validation split is empty");
  std::set<std::string> train_ids;
  for (const PredictionSet& s : train_set) train_ids.insert(s.id);
  for (const PredictionSet& s : validation_set) {
    if (train_ids.contains(s.id)) {
      throw ValidationError("recording " + s.id + " appears in both training and validation");
    }
  }

  TrainResult result;
  result.config = fit_model_config(model, train_set);
  result.config.validate();
  const ModelConfig& mc = result.config;
  const BatchMaxima maxima = BatchMaxima::from_config(mc);

  std::mt19937_64 rng(config.seed);
  result.init_seed = rng();
  NapParameters params = init_parameters(mc, result.init_seed);
  OptimizerState state = OptimizerState::zeros(params);
  result.best = params;
  bool have_best = false;
  std::size_t since_best = 0;

  const std::size_t g_count = config.accumulation_steps;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < config.steps_per_epoch; ++step) {
      std::vector<std::uint64_t> seeds(g_count);
      for (auto& s : seeds) s = rng();
      std::vector<BatchGradient> parts(g_count);
      detail::parallel_for(g_count, config.threads, [&](std::size_t g) {
        std::mt19937_64 batch_rng(seeds[g]);
        BatchSpec spec = sample_batch_dims(maxima, config.time_bounds, batch_rng);
        const Batch batch =
            assemble_batch(train_set, mc, std::move(spec), config.recordings_per_batch,
                           config.segments_per_recording, config.time_bounds, batch_rng);
        const DropoutContext dropout{mc.dropout > 0.0, mc.dropout, &batch_rng};
        parts[g] = batch_gradient(params, mc, batch, dropout);
      });
      const BatchGradient total = accumulate_gradients(parts);
      adamw_step(params, total.grads, state, config.optimizer);
      loss_sum += total.loss;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(config.steps_per_epoch);
    record.val_mf1 = evaluate_nap(validation_set, params, mc, config.inference_window,
                                  config.threads)
                         .macro_f1()
                         .mean;
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);

    if (!have_best || record.val_mf1 > result.best_val_mf1) {
      have_best = true;
      result.best = params;
      result.best_epoch = epoch;
      result.best_val_mf1 = record.val_mf1;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  result.final_params = std::move(params);
  return result;
}

void write_history_csv(std::ostream& out, std::span<const EpochRecord> history) {
  out << "epoch,train_loss,val_mf1\n";
  char buffer[96];
  for (const EpochRecord& r : history) {
    std::snprintf(buffer, sizeof buffer, "%zu,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_mf1);
    out << buffer;
  }
}

}  // namespace nap
