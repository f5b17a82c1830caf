#include "nap_cli/commands.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

#include "nap/checkpoint.hpp"
#include "nap/dataset_io.hpp"
#include "nap/errors.hpp"
#include "nap/eval.hpp"
#include "nap/run_config.hpp"
#include "nap/trainer.hpp"

namespace nap::cli {
namespace {

namespace fs = std::filesystem;

/// A required input file or directory does not exist.
class MissingInputError : public Error {
 public:
  using Error::Error;
};

struct Options {
  std::string config;
  std::string run;
  std::string checkpoint;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
  unsigned threads = 0;  // 0 keeps the config value
};

void require_exists(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw MissingInputError(what + " not found: " + path.string());
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

RunConfig resolve_config(const Options& o) {
  RunConfig c;
  if (!o.config.empty()) {
    require_exists(o.config, "config file");
    c = load_run_config(o.config);
  } else if (!o.run.empty()) {
    const fs::path snapshot = fs::path(o.run) / "config.json";
    require_exists(snapshot, "run config");
    c = load_run_config(snapshot);
    c.out = o.run;
  } else {
    throw ConfigError("either --config or --run is required");
  }
  if (o.seed) {
    c.seed = *o.seed;
    c.train.seed = *o.seed;
  }
  if (o.threads != 0) {
    c.threads = o.threads;
    c.train.threads = o.threads;
  }
  if (!o.out.empty() && o.run.empty()) c.out = o.out;
  return c;
}

fs::path run_directory(const Options& o, const RunConfig& c) {
  return o.run.empty() ? c.out : fs::path(o.run);
}

int cmd_synth(const Options& o, std::ostream& out) {
  const RunConfig c = resolve_config(o);
  DataPaths paths = c.data;
  if (!o.out.empty()) {
    paths = {fs::path(o.out) / "train.napd", fs::path(o.out) / "validation.napd",
             fs::path(o.out) / "test.napd"};
  }
  for (const fs::path& p : {paths.train, paths.validation, paths.test}) {
    if (fs::exists(p) && !o.force) {
      throw Error("refusing to overwrite " + p.string() + " (pass --force)");
    }
  }
  const SynthSplits splits = synthesize_splits(c.synth, c.seed, c.threads);
  const std::array<std::pair<const fs::path*, const std::vector<PredictionSet>*>, 3> outputs{
      {{&paths.train, &splits.train},
       {&paths.validation, &splits.validation},
       {&paths.test, &splits.test}}};
  for (const auto& [path, sets] : outputs) {
    if (path->has_parent_path()) fs::create_directories(path->parent_path());
    write_dataset(*path, *sets);
    out << "wrote " << sets->size() << " recordings to " << path->string() << '\n';
  }
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  RunConfig c = resolve_config(o);
  require_exists(c.data.train, "training dataset");
  require_exists(c.data.validation, "validation dataset");
  const fs::path dir = run_directory(o, c);
  if (fs::exists(dir / "final.napw") && !o.force) {
    throw Error("run directory " + dir.string() + " already holds a trained model (pass --force)");
  }
  const std::vector<PredictionSet> train_set = read_dataset(c.data.train);
  const std::vector<PredictionSet> val_set = read_dataset(c.data.validation);

  fs::create_directories(dir);
  c.out = fs::absolute(dir);
  c.data.train = fs::absolute(c.data.train);
  c.data.validation = fs::absolute(c.data.validation);
  c.data.test = fs::absolute(c.data.test);
  write_text_atomic(dir / "config.json", run_config_to_json(c));

  std::vector<EpochRecord> history;
  const TrainResult result = train(train_set, val_set, c.model, c.train, [&](const EpochRecord& r) {
    history.push_back(r);
    std::ostringstream csv;
    write_history_csv(csv, history);
    write_text_atomic(dir / "history.csv", csv.str());
    char line[128];
    std::snprintf(line, sizeof line, "epoch %zu  train_loss %.5f  val_mf1 %.4f\n", r.epoch,
                  r.train_loss, r.val_mf1);
    out << line << std::flush;
  });

  save_checkpoint(dir / "best.napw", result.config, result.best);
  save_checkpoint(dir / "final.napw", result.config, result.final_params);
  write_text_atomic(dir / "seeds.txt", "seed " + std::to_string(c.seed) + "\ninit_seed " +
                                           std::to_string(result.init_seed) + "\n");
  char summary[160];
  std::snprintf(summary, sizeof summary, "best epoch %zu  val_mf1 %.4f  (%zu epochs run)\n",
                result.best_epoch, result.best_val_mf1, result.history.size());
  out << summary;
  return kExitOk;
}

struct LoadedModel {
  RunConfig config;
  Checkpoint checkpoint;
  fs::path dir;
};

LoadedModel load_model(const Options& o) {
  LoadedModel m;
  m.config = resolve_config(o);
  m.dir = run_directory(o, m.config);
  const fs::path ckpt = o.checkpoint.empty() ? m.dir / "best.napw" : fs::path(o.checkpoint);
  require_exists(ckpt, "checkpoint");
  m.checkpoint = load_checkpoint(ckpt);
  if (!same_architecture(m.checkpoint.config, m.config.model)) {
    throw ConfigMismatchError("checkpoint " + ckpt.string() +
                              " was trained with a different model configuration");
  }
  return m;
}

void check_vocabulary(const std::vector<PredictionSet>& sets, const ModelConfig& config) {
  for (const PredictionSet& set : sets) {
    for (const auto& [modality, channels] : set.modalities) {
      if (std::find(config.modalities.begin(), config.modalities.end(), modality) ==
          config.modalities.end()) {
        throw ConfigMismatchError("recording " + set.id + " uses modality '" + modality +
                                  "' unknown to the checkpoint");
      }
    }
  }
}

int cmd_evaluate(const Options& o, std::ostream& out, bool compare) {
  const LoadedModel m = load_model(o);
  const fs::path data = o.data.empty() ? m.config.data.test : fs::path(o.data);
  require_exists(data, "dataset");
  const std::vector<PredictionSet> sets = read_dataset(data);
  check_vocabulary(sets, m.checkpoint.config);

  std::vector<MetricsReport> reports;
  const std::size_t window = m.config.train.inference_window;
  if (compare) {
    const MethodComparison cmp = evaluate_methods(sets, &m.checkpoint.params,
                                                  &m.checkpoint.config, window, m.config.threads);
    reports = cmp.reports();
    out << "best single predictor: " << cmp.best_single_predictor << '\n';
  } else {
    reports.push_back(
        evaluate_nap(sets, m.checkpoint.params, m.checkpoint.config, window, m.config.threads));
  }

  const std::string dataset = data.stem().string();
  const fs::path dest = o.out.empty() ? m.dir : fs::path(o.out);
  fs::create_directories(dest);
  const std::string stem = compare ? "compare" : "eval";
  std::ostringstream csv;
  write_metrics_csv(csv, dataset, reports);
  write_text_atomic(dest / (stem + "_metrics.csv"), csv.str());
  const std::string table = format_metrics_table(dataset, reports);
  write_text_atomic(dest / (stem + "_table.txt"), table);
  out << table;
  return kExitOk;
}

int cmd_inspect(const Options& o, std::ostream& out) {
  fs::path ckpt = o.checkpoint;
  if (ckpt.empty() && !o.run.empty()) ckpt = fs::path(o.run) / "best.napw";
  if (ckpt.empty()) throw ConfigError("inspect needs --checkpoint or --run");
  require_exists(ckpt, "checkpoint");
  const Checkpoint cp = load_checkpoint(ckpt);
  out << "checkpoint " << ckpt.string() << '\n';
  out << "config " << model_config_to_json(cp.config) << '\n';
  out << "parameters " << parameter_count(cp.params) << '\n';
  visit_parameters(
      [&](const std::string& name, const Tensor& t) {
        double ss = 0.0;
        for (double v : t.values()) ss += v * v;
        char line[160];
        std::snprintf(line, sizeof line, "  %-34s %-12s rms %.5f\n", name.c_str(),
                      shape_to_string(t.shape()).c_str(),
                      std::sqrt(ss / static_cast<double>(std::max<std::size_t>(t.size(), 1))));
        out << line;
      },
      cp.params);

  if (o.data.empty()) return kExitOk;
  require_exists(o.data, "dataset");
  const std::vector<PredictionSet> sets = read_dataset(o.data);
  check_vocabulary(sets, cp.config);

  struct Stats {
    double sum = 0.0, sum_sq = 0.0, min = 1.0, max = 0.0;
    std::size_t n = 0;
  };
  std::map<std::string, Stats> stats;
  for (const PredictionSet& set : sets) {
    std::vector<std::string> keys;
    for (const auto& [m, channels] : set.modalities) {
      for (const auto& [c, predictors] : channels) {
        for (const auto& [p, d] : predictors) keys.push_back(stream_key(m, c, p));
      }
    }
    for (const auto& [begin, end] : inference_windows(set.epochs(), kInferenceWindow)) {
      const auto inputs = recording_inputs(set, cp.config, begin, end - begin);
      Tensor alpha;
      predict_probabilities(inputs, cp.params, cp.config, &alpha);
      const std::size_t n = keys.size();
      for (std::size_t t = 0; t < end - begin; ++t) {
        for (std::size_t k = 0; k < n; ++k) {
          const double a = alpha[t * n + k];
          Stats& s = stats[keys[k]];
          s.sum += a;
          s.sum_sq += a * a;
          s.min = std::min(s.min, a);
          s.max = std::max(s.max, a);
          ++s.n;
        }
      }
    }
  }
  out << "fusion weights per stream (mean sd min max)\n";
  for (const auto& [key, s] : stats) {
    const double mean = s.sum / static_cast<double>(s.n);
    const double var = std::max(0.0, s.sum_sq / static_cast<double>(s.n) - mean * mean);
    char line[160];
    std::snprintf(line, sizeof line, "  %-24s %.4f %.4f %.4f %.4f\n", key.c_str(), mean,
                  std::sqrt(var), s.min, s.max);
    out << line;
  }
  return kExitOk;
}

}  // namespace

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"NAP: attention-based aggregation of sleep-stage predictions"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run config (JSON)");
    sub->add_option("--seed", o.seed, "Override the config seed");
    sub->add_option("--out", o.out, "Output location");
    sub->add_flag("--force", o.force, "Overwrite existing outputs");
    sub->add_option("--threads", o.threads, "Worker threads")->check(CLI::Range(1u, 1024u));
  };
  CLI::App* synth = app.add_subcommand("synth", "Generate train/validation/test datasets");
  common(synth);
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model into a run directory");
  common(train_cmd);
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a trained model");
  common(eval);
  CLI::App* compare = app.add_subcommand("compare", "Compare NAP with soft-voting baselines");
  common(compare);
  CLI::App* inspect = app.add_subcommand("inspect", "Summarize a checkpoint");
  common(inspect);
  for (CLI::App* sub : {train_cmd, eval, compare, inspect}) {
    sub->add_option("--run", o.run, "Run directory");
  }
  for (CLI::App* sub : {eval, compare, inspect}) {
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file (default <run>/best.napw)");
    sub->add_option("--data", o.data, "Dataset file (default: test split of the config)");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitFailure;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, out);
    if (train_cmd->parsed()) return cmd_train(o, out);
    if (eval->parsed()) return cmd_evaluate(o, out, false);
    if (compare->parsed()) return cmd_evaluate(o, out, true);
    if (inspect->parsed()) return cmd_inspect(o, out);
  } catch (const MissingInputError& e) {
    err << "error: " << e.what() << '\n';
    return kExitMissingInput;
  } catch (const ConfigMismatchError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfigMismatch;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace nap::cli
