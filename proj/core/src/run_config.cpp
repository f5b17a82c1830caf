#include "nap/run_config.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>
#include <set>
#include <sstream>

#include "nap/errors.hpp"

namespace nap {
namespace {

using nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> known,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& item : j.items()) {
    if (!allowed.contains(item.key())) {
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& value) {
  if (j.contains(key)) value = j.at(key).get<T>();
}

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

json matrix_json(const StageMatrix& m) {
  json out = json::array();
  for (const auto& row : m) out.push_back(row);
  return out;
}

StageMatrix matrix_from(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != kNumStages) throw ConfigError(what + " must be a 5x5 matrix");
  StageMatrix m{};
  for (std::size_t r = 0; r < kNumStages; ++r) {
    if (!j[r].is_array() || j[r].size() != kNumStages) {
      throw ConfigError(what + " must be a 5x5 matrix");
    }
    for (std::size_t c = 0; c < kNumStages; ++c) m[r][c] = j[r][c].get<double>();
  }
  return m;
}

json profile_json(const ReliabilityProfile& p) {
  return {{"confusion", matrix_json(p.confusion)},
          {"kappa", p.kappa},
          {"blur", p.blur},
          {"exact", p.exact}};
}

ReliabilityProfile profile_from(const json& j, const std::string& key) {
  reject_unknown(j, {"confusion", "kappa", "blur", "exact"}, "synth.overrides." + key);
  ReliabilityProfile p;
  if (!j.contains("confusion")) throw ConfigError("override " + key + " needs a confusion matrix");
  p.confusion = matrix_from(j.at("confusion"), "confusion of " + key);
  read(j, "kappa", p.kappa);
  read(j, "blur", p.blur);
  read(j, "exact", p.exact);
  return p;
}

json synth_json(const SynthSettings& s) {
  json layout = json::array();
  for (const ModalityLayout& m : s.layout) {
    layout.push_back({{"id", m.id}, {"channels", m.channels}, {"predictors", m.predictors}});
  }
  json overrides = json::object();
  for (const auto& [key, p] : s.overrides) overrides[key] = profile_json(p);
  return {{"recordings", s.recordings},
          {"splits",
           {{"train", s.splits.train}, {"validation", s.splits.validation}, {"test", s.splits.test}}},
          {"min_epochs", s.min_epochs},
          {"max_epochs", s.max_epochs},
          {"transition", matrix_json(s.transition)},
          {"initial", s.initial},
          {"layout", std::move(layout)},
          {"diag_min", s.diag_min},
          {"diag_max", s.diag_max},
          {"kappa", s.kappa},
          {"blur", s.blur},
          {"shared_noise", s.shared_noise},
          {"overrides", std::move(overrides)}};
}

SynthSettings synth_from(const json& j) {
  reject_unknown(j,
                 {"recordings", "splits", "min_epochs", "max_epochs", "transition", "initial",
                  "layout", "diag_min", "diag_max", "kappa", "blur", "shared_noise", "overrides"},
                 "synth");
  SynthSettings s;
  read(j, "recordings", s.recordings);
  if (j.contains("splits")) {
    const json& sp = j.at("splits");
    reject_unknown(sp, {"train", "validation", "test"}, "synth.splits");
    read(sp, "train", s.splits.train);
    read(sp, "validation", s.splits.validation);
    read(sp, "test", s.splits.test);
  }
  read(j, "min_epochs", s.min_epochs);
  read(j, "max_epochs", s.max_epochs);
  if (j.contains("transition")) s.transition = matrix_from(j.at("transition"), "synth.transition");
  if (j.contains("initial")) {
    const json& init = j.at("initial");
    if (!init.is_array() || init.size() != kNumStages) {
      throw ConfigError("synth.initial must hold 5 probabilities");
    }
    for (std::size_t k = 0; k < kNumStages; ++k) s.initial[k] = init[k].get<double>();
  }
  if (j.contains("layout")) {
    s.layout.clear();
    for (const json& m : j.at("layout")) {
      reject_unknown(m, {"id", "channels", "predictors"}, "synth.layout entry");
      s.layout.push_back({m.at("id").get<std::string>(),
                          m.at("channels").get<std::vector<std::string>>(),
                          m.at("predictors").get<std::vector<std::string>>()});
    }
  }
  read(j, "diag_min", s.diag_min);
  read(j, "diag_max", s.diag_max);
  read(j, "kappa", s.kappa);
  read(j, "blur", s.blur);
  read(j, "shared_noise", s.shared_noise);
  if (j.contains("overrides")) {
    for (const auto& item : j.at("overrides").items()) {
      s.overrides[item.key()] = profile_from(item.value(), item.key());
    }
  }
  return s;
}

json model_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},
          {"heads", c.heads},
          {"layers", c.layers},
          {"d_ff", c.ff_dim()},
          {"d_attention", c.attention_dim()},
          {"classifier_hidden", c.classifier_hidden},
          {"dropout", c.dropout},
          {"output_projection", c.output_projection}};
}

ModelConfig model_from(const json& j) {
  reject_unknown(j,
                 {"d_model", "heads", "layers", "d_ff", "d_attention", "classifier_hidden",
                  "dropout", "output_projection"},
                 "model");
  ModelConfig c;
  read(j, "d_model", c.d_model);
  read(j, "heads", c.heads);
  read(j, "layers", c.layers);
  read(j, "d_ff", c.d_ff);
  read(j, "d_attention", c.d_attention);
  read(j, "classifier_hidden", c.classifier_hidden);
  read(j, "dropout", c.dropout);
  read(j, "output_projection", c.output_projection);
  if (c.d_ff == 4 * c.d_model) c.d_ff = 0;
  if (c.d_attention == 2 * c.d_model) c.d_attention = 0;
  return c;
}

json train_json(const TrainConfig& t) {
  return {{"recordings_per_batch", t.recordings_per_batch},
          {"segments_per_recording", t.segments_per_recording},
          {"accumulation_steps", t.accumulation_steps},
          {"learning_rate", t.optimizer.learning_rate},
          {"weight_decay", t.optimizer.weight_decay},
          {"beta1", t.optimizer.beta1},
          {"beta2", t.optimizer.beta2},
          {"epsilon", t.optimizer.epsilon},
          {"patience", t.patience},
          {"steps_per_epoch", t.steps_per_epoch},
          {"max_epochs", t.max_epochs},
          {"t_min", t.time_bounds.lo},
          {"t_max", t.time_bounds.hi},
          {"inference_window", t.inference_window}};
}

TrainConfig train_from(const json& j) {
  reject_unknown(j,
                 {"recordings_per_batch", "segments_per_recording", "accumulation_steps",
                  "learning_rate", "weight_decay", "beta1", "beta2", "epsilon", "patience",
                  "steps_per_epoch", "max_epochs", "t_min", "t_max", "inference_window"},
                 "train");
  TrainConfig t;
  read(j, "recordings_per_batch", t.recordings_per_batch);
  read(j, "segments_per_recording", t.segments_per_recording);
  read(j, "accumulation_steps", t.accumulation_steps);
  read(j, "learning_rate", t.optimizer.learning_rate);
  read(j, "weight_decay", t.optimizer.weight_decay);
  read(j, "beta1", t.optimizer.beta1);
  read(j, "beta2", t.optimizer.beta2);
  read(j, "epsilon", t.optimizer.epsilon);
  read(j, "patience", t.patience);
  read(j, "steps_per_epoch", t.steps_per_epoch);
  read(j, "max_epochs", t.max_epochs);
  read(j, "t_min", t.time_bounds.lo);
  read(j, "t_max", t.time_bounds.hi);
  read(j, "inference_window", t.inference_window);
  return t;
}

}  // namespace

std::vector<ModalityLayout> SynthSettings::default_layout() {
  return {{"eeg", {"c3", "c4", "o1"}, {"p1", "p2"}}, {"eog", {"e1", "e2"}, {"p1", "p2"}}};
}

std::array<std::size_t, 3> SynthSettings::split_counts() const {
  const std::array<double, 3> fractions{splits.train, splits.validation, splits.test};
  std::array<std::size_t, 3> counts{};
  std::size_t total = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    counts[i] = static_cast<std::size_t>(std::llround(fractions[i] * static_cast<double>(recordings)));
    total += counts[i];
  }
  // Rounding can overshoot by one when the fractions sum to exactly one.
  for (std::size_t i = 3; i-- > 0 && total > recordings;) {
    const std::size_t cut = std::min(counts[i], total - recordings);
    counts[i] -= cut;
    total -= cut;
  }
  return counts;
}

void SynthSettings::validate() const {
  if (recordings == 0) throw ConfigError("synth.recordings must be at least 1");
  for (double f : {splits.train, splits.validation, splits.test}) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("split fractions must lie in [0, 1]");
  }
  if (splits.train + splits.validation + splits.test > 1.0 + 1e-9) {
    throw ConfigError("split fractions sum to more than 1");
  }
  if (min_epochs == 0 || min_epochs > max_epochs) {
    throw ConfigError("synth epochs must satisfy 1 <= min_epochs <= max_epochs");
  }
  if (layout.empty()) throw ConfigError("synth.layout needs at least one modality");
  if (!(diag_min > 0.0 && diag_min <= diag_max && diag_max <= 1.0)) {
    throw ConfigError("synth diagonal range must satisfy 0 < diag_min <= diag_max <= 1");
  }
  if (!(kappa > 0.0)) throw ConfigError("synth.kappa must be positive");
  if (!(shared_noise >= 0.0 && shared_noise <= 1.0)) {
    throw ConfigError("synth.shared_noise must lie in [0, 1]");
  }
  std::set<std::string> keys;
  for (const ModalityLayout& m : layout) {
    for (const auto& c : m.channels) {
      for (const auto& p : m.predictors) keys.insert(stream_key(m.id, c, p));
    }
  }
  for (const auto& [key, profile] : overrides) {
    if (!keys.contains(key)) throw ConfigError("override for unknown stream " + key);
  }
}

void RunConfig::validate() const {
  synth.validate();
  try {
    ModelConfig probe = model;
    probe.modalities = {"probe"};
    probe.max_channels = {1};
    probe.max_predictors = {1};
    probe.validate();
    train.validate();
    for (const auto& [key, profile] : synth.overrides) profile.validate();
    build_synth_spec(synth, seed).validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (threads == 0) throw ConfigError("threads must be at least 1");
}

RunConfig run_config_from_json(const std::string& text, const std::filesystem::path& base_dir) {
  RunConfig c;
  try {
    const json j = json::parse(text);
    reject_unknown(j, {"seed", "synth", "model", "train", "data", "out", "threads"}, "config");
    read(j, "seed", c.seed);
    if (j.contains("synth")) c.synth = synth_from(j.at("synth"));
    if (j.contains("model")) c.model = model_from(j.at("model"));
    if (j.contains("train")) c.train = train_from(j.at("train"));
    if (j.contains("data")) {
      const json& d = j.at("data");
      reject_unknown(d, {"train", "validation", "test"}, "data");
      if (d.contains("train")) c.data.train = d.at("train").get<std::string>();
      if (d.contains("validation")) c.data.validation = d.at("validation").get<std::string>();
      if (d.contains("test")) c.data.test = d.at("test").get<std::string>();
    }
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    read(j, "threads", c.threads);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  c.data.train = resolve(c.data.train, base_dir);
  c.data.validation = resolve(c.data.validation, base_dir);
  c.data.test = resolve(c.data.test, base_dir);
  c.out = resolve(c.out, base_dir);
  c.train.seed = c.seed;
  c.train.threads = c.threads;
  c.validate();
  return c;
}

std::string run_config_to_json(const RunConfig& c) {
  const json j{{"seed", c.seed},
               {"synth", synth_json(c.synth)},
               {"model", model_json(c.model)},
               {"train", train_json(c.train)},
               {"data",
                {{"train", c.data.train.string()},
                 {"validation", c.data.validation.string()},
                 {"test", c.data.test.string()}}},
               {"out", c.out.string()},
               {"threads", c.threads}};
  return j.dump(2) + "\n";
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream file(path);
  if (!file) throw Error("cannot open config " + path.string());
  std::stringstream buffer;
  buffer << file.rdbuf();
  return run_config_from_json(buffer.str(), path.parent_path());
}

SynthSpec build_synth_spec(const SynthSettings& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SynthSpec spec;
  spec.transition = s.transition;
  spec.initial = s.initial;
  spec.min_epochs = s.min_epochs;
  spec.max_epochs = s.max_epochs;
  spec.layout = s.layout;
  spec.shared_noise = s.shared_noise;
  spec.profiles = make_heterogeneous_profiles(s.layout, s.diag_min, s.diag_max, s.kappa, s.blur,
                                              rng());
  for (const auto& [key, profile] : s.overrides) spec.profiles[key] = profile;
  return spec;
}

SynthSplits synthesize_splits(const SynthSettings& settings, std::uint64_t seed,
                              unsigned threads) {
  settings.validate();
  const SynthSpec spec = build_synth_spec(settings, seed);
  spec.validate();
  // Recording seeds come from a stream separate from the profile seed.
  std::mt19937_64 rng(seed);
  rng();
  const std::uint64_t base_seed = rng();
  const auto [n_train, n_val, n_test] = settings.split_counts();
  SynthSplits out;
  out.train = generate_dataset(spec, 0, n_train, base_seed, "train-", threads);
  out.validation = generate_dataset(spec, n_train, n_val, base_seed, "val-", threads);
  out.test = generate_dataset(spec, n_train + n_val, n_test, base_seed, "test-", threads);
  return out;
}

bool same_architecture(const ModelConfig& a, const ModelConfig& b) {
  return a.d_model == b.d_model && a.heads == b.heads && a.layers == b.layers &&
         a.ff_dim() == b.ff_dim() && a.attention_dim() == b.attention_dim() &&
         a.classifier_hidden == b.classifier_hidden && a.dropout == b.dropout &&
         a.output_projection == b.output_projection;
}

}  // namespace nap
