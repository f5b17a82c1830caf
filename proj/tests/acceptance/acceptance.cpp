// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion
// numbers as arguments to run a subset, e.g. `nap_acceptance 1 6 7`.

#include <algorithm>
#include <array>
#include <boost/math/distributions/chi_squared.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "nap/dataset_io.hpp"
#include "nap/errors.hpp"
#include "nap/eval.hpp"
#include "nap/gradcheck.hpp"
#include "nap/model.hpp"
#include "nap/ops.hpp"
#include "nap/run_config.hpp"
#include "nap/trainer.hpp"
#include "test_support.hpp"

namespace {

using namespace nap;
using nap::testing::bind_from_vars;
using nap::testing::permute_axis;
using nap::testing::random_permutation;
using nap::testing::random_probs;
using nap::testing::random_tensor;
using nap::testing::small_config;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

template <class... Args>
std::string fmt(const char* format, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

unsigned worker_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// 1. Finite-difference check of the full loss.
Outcome gradient_correctness() {
  const auto start = Clock::now();
  const ModelConfig config = small_config(6, 3, 1, 2, 2, 2);
  double worst = 0.0;
  std::size_t coordinates = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed);
    const NapParameters params = init_parameters(config, rng());
    const std::vector<ModalityInput> inputs{{0, random_probs({1, 4, 2, 2, 5}, rng)},
                                            {1, random_probs({1, 4, 2, 2, 5}, rng)}};
    std::vector<int> labels(4);
    for (int& l : labels) l = static_cast<int>(rng() % 5);
    const auto loss = [&](Tape& tape, std::span<const Var> vars) {
      const BoundParameters bound = bind_from_vars(params, vars);
      return ops::cross_entropy(forward(tape, inputs, bound, config, DropoutContext::off()).logits,
                                labels);
    };
    const GradientCheckResult r = gradient_check(loss, flatten_parameters(params));
    worst = std::max(worst, r.max_relative_error);
    coordinates = r.coordinates;
  }
  const double elapsed = seconds_since(start);
  return {worst < 1e-4 && elapsed < 60.0,
          fmt("max rel err %.3g over 20 seeds x %.0f coords, %.1f s", worst,
              static_cast<double>(coordinates), elapsed)};
}

// 2. Channel/predictor permutation invariance and modality-embedding swap.
Outcome symmetry_suite() {
  std::mt19937_64 rng(2024);
  double worst_perm = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = rng() % 2 == 0 ? 6 : 12;
    const std::size_t heads = d == 6 ? 3 : (rng() % 2 == 0 ? 3 : 6);
    const std::size_t m = 1 + rng() % 2;
    ModelConfig config = small_config(d, heads, 1 + rng() % 2, m, 3, 3);
    config.output_projection = rng() % 4 != 0;
    const NapParameters params = init_parameters(config, rng());
    const std::size_t s = 1 + rng() % 2;
    const std::size_t t = 1 + rng() % 8;
    std::vector<ModalityInput> inputs;
    for (std::size_t k = 0; k < m; ++k) {
      inputs.push_back({k, random_probs({s, t, 1 + rng() % 3, 1 + rng() % 3, 5}, rng)});
    }
    for (std::size_t axis : {2, 3}) {
      auto permuted = inputs;
      const std::size_t k = rng() % m;
      const std::size_t n = permuted[k].probs.dim(axis);
      permuted[k].probs = permute_axis(permuted[k].probs, axis, random_permutation(n, rng));
      Tape t1, t2;
      const Tensor a =
          forward(t1, inputs, bind_parameters(t1, params, false), config, DropoutContext::off())
              .logits.value();
      const Tensor b =
          forward(t2, permuted, bind_parameters(t2, params, false), config, DropoutContext::off())
              .logits.value();
      worst_perm = std::max(worst_perm, max_abs_diff(a, b));
    }
  }

  double worst_swap = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const ModelConfig config = small_config(12, 6, 2, 2, 3, 3);
    const NapParameters params = init_parameters(config, rng());
    NapParameters swapped = params;
    for (std::size_t i = 0; i < 12; ++i) {
      std::swap(swapped.modality_embedding[i], swapped.modality_embedding[12 + i]);
    }
    const Tensor x = random_probs({1, 6, 2, 3, 5}, rng);
    const Tensor y = random_probs({1, 6, 3, 2, 5}, rng);
    const std::vector<ModalityInput> original{{0, x}, {1, y}};
    const std::vector<ModalityInput> exchanged{{0, y}, {1, x}};
    Tape t1, t2;
    const Tensor a =
        forward(t1, original, bind_parameters(t1, params, false), config, DropoutContext::off())
            .logits.value();
    const Tensor b =
        forward(t2, exchanged, bind_parameters(t2, swapped, false), config, DropoutContext::off())
            .logits.value();
    worst_swap = std::max(worst_swap, max_abs_diff(a, b));
  }
  return {worst_perm < 1e-6 && worst_swap < 1e-6,
          fmt("max |dlogit| permutation %.3g (100 configs), modality swap %.3g", worst_perm,
              worst_swap)};
}

// 3. Singleton pathway axes reduce to the value projection.
Outcome degenerate_axes() {
  std::mt19937_64 rng(3);
  std::array<double, 3> worst{};
  for (int trial = 0; trial < 20; ++trial) {
    const ModelConfig config = small_config(12, 6, 1, 1, 3, 3);
    const NapParameters params = init_parameters(config, rng());
    const std::array<std::pair<Pathway, Shape>, 3> cases{
        {{Pathway::kSpatial, {2, 1 + rng() % 6, 1, 1 + rng() % 3, 12}},
         {Pathway::kTemporal, {2, 1, 1 + rng() % 3, 1 + rng() % 3, 12}},
         {Pathway::kBlending, {2, 1 + rng() % 6, 1 + rng() % 3, 1, 12}}}};
    for (std::size_t i = 0; i < 3; ++i) {
      Tape tape;
      const BoundParameters bound = bind_parameters(tape, params, false);
      const auto& pathway = bound.layers[0].pathways[static_cast<std::size_t>(cases[i].first)];
      Var h = tape.constant(random_tensor(cases[i].second, rng, -2, 2));
      const Tensor out = pathway_attention(h, pathway, cases[i].first, config).value();
      const Tensor v = ops::linear(h, pathway.value).value();
      worst[i] = std::max(worst[i], max_abs_diff(out, v));
    }
  }
  const bool pass = std::all_of(worst.begin(), worst.end(), [](double w) { return w <= 1e-9; });
  return {pass, fmt("max |out - V| C=1 %.3g, T=1 %.3g, B=1 %.3g", worst[0], worst[1], worst[2])};
}

// 4. Fusion weights are a convex combination; N=1 passthrough; scalar case.
Outcome fusion_contract() {
  std::mt19937_64 rng(4);
  double min_weight = 1.0;
  double worst_sum = 0.0;
  bool passthrough = true;
  const ModelConfig config = small_config(12, 6, 1, 1, 1, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const NapParameters params = init_parameters(config, rng());
    Tape tape;
    const BoundParameters bound = bind_parameters(tape, params, false);
    const std::size_t n = 1 + rng() % 8;
    const FusionResult r =
        fuse_streams(tape.constant(random_tensor({2, 7, n, 12}, rng, -3, 3)), bound);
    const Tensor& a = r.weights.value();
    for (std::size_t row = 0; row < 14; ++row) {
      double total = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        min_weight = std::min(min_weight, a[row * n + k]);
        total += a[row * n + k];
      }
      worst_sum = std::max(worst_sum, std::abs(total - 1.0));
    }
    const Tensor single = random_tensor({1, 5, 1, 12}, rng);
    const FusionResult one = fuse_streams(tape.constant(single), bound);
    passthrough = passthrough && one.fused.value() == single.reshaped({1, 5, 12});
    for (double w : one.weights.value().values()) passthrough = passthrough && w == 1.0;
  }

  Tape tape;
  BoundParameters scalar;
  scalar.fusion_weight = tape.constant(Tensor::matrix({{1.0}}));
  scalar.fusion_bias = tape.constant(Tensor::vector({0.0}));
  scalar.fusion_context = tape.constant(Tensor::vector({1.0}));
  const FusionResult hand = fuse_streams(tape.constant(Tensor({1, 1, 2, 1}, {0.0, 1.0})), scalar);
  // Scalar evaluation of the stated inputs: scores 0 and tanh(1), two-way softmax.
  // The rounded pair 0.31838 / 0.68162 listed with this case is off by ~8e-5
  // from this evaluation, so it is reported but not used as the reference.
  const double s1 = std::tanh(1.0);
  const double a0 = 1.0 / (1.0 + std::exp(s1));
  const double a1 = std::exp(s1) / (1.0 + std::exp(s1));
  const double e0 = std::abs(hand.weights.value()[0] - a0);
  const double e1 = std::abs(hand.weights.value()[1] - a1);
  const double ez = std::abs(hand.fused.value()[0] - a1);
  const double listed = std::abs(hand.weights.value()[0] - 0.31838);
  const bool hand_ok = e0 <= 1e-5 && e1 <= 1e-5 && ez <= 1e-5;
  return {min_weight >= 0.0 && worst_sum <= 1e-6 && passthrough && hand_ok,
          fmt("min alpha %.3g, max |sum-1| %.3g, hand case alpha (%.6f, %.6f) err %.3g "
              "(listed 0.31838 off by %.2g), N=1 exact %s",
              min_weight, worst_sum, hand.weights.value()[0], hand.weights.value()[1],
              std::max({e0, e1, ez}), listed, passthrough ? "yes" : "no")};
}

bool chi_square_ok(const std::vector<std::size_t>& counts, double& statistic, double& critical) {
  double total = 0.0;
  for (std::size_t c : counts) total += static_cast<double>(c);
  const double expected = total / static_cast<double>(counts.size());
  statistic = 0.0;
  for (std::size_t c : counts) {
    const double diff = static_cast<double>(c) - expected;
    statistic += diff * diff / expected;
  }
  if (counts.size() < 2) {
    critical = 0.0;
    return true;
  }
  critical = boost::math::quantile(
      boost::math::chi_squared(static_cast<double>(counts.size() - 1)), 0.99);
  return statistic < critical;
}

// 5. Batch-shape sampler bounds and per-dimension uniformity.
Outcome sampler_uniformity() {
  const BatchMaxima maxima{{3, 2}, {2, 3}};
  const TimeBounds bounds;
  std::mt19937_64 rng(5);
  bool in_bounds = true;
  std::vector<std::size_t> t_counts(bounds.hi - bounds.lo + 1), m_counts(2);
  std::vector<std::vector<std::size_t>> c_counts{std::vector<std::size_t>(3),
                                                 std::vector<std::size_t>(2)};
  std::vector<std::vector<std::size_t>> b_counts{std::vector<std::size_t>(2),
                                                 std::vector<std::size_t>(3)};
  for (int i = 0; i < 10000; ++i) {
    const BatchSpec s = sample_batch_dims(maxima, bounds, rng);
    if (s.epochs < 20 || s.epochs > 80 || s.modalities.empty() || s.modalities.size() > 2) {
      in_bounds = false;
      continue;
    }
    ++t_counts[s.epochs - bounds.lo];
    ++m_counts[s.modalities.size() - 1];
    for (const ModalitySelection& m : s.modalities) {
      if (m.channels < 1 || m.channels > maxima.channels[m.modality] || m.predictors < 1 ||
          m.predictors > maxima.predictors[m.modality]) {
        in_bounds = false;
        continue;
      }
      ++c_counts[m.modality][m.channels - 1];
      ++b_counts[m.modality][m.predictors - 1];
    }
  }
  std::vector<const std::vector<std::size_t>*> dims{&t_counts, &m_counts, &c_counts[0],
                                                    &c_counts[1], &b_counts[0], &b_counts[1]};
  const char* names[] = {"T", "M", "C_eeg", "C_eog", "B_eeg", "B_eog"};
  bool uniform = true;
  std::ostringstream detail;
  detail << "10000 draws in bounds " << (in_bounds ? "yes" : "no") << "; chi2/crit";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    double stat = 0.0, crit = 0.0;
    uniform = chi_square_ok(*dims[i], stat, crit) && uniform;
    detail << ' ' << names[i] << fmt(" %.1f/%.1f", stat, crit);
  }
  return {in_bounds && uniform, detail.str()};
}

// 6. F1 against explicit TP/FP/FN counting.
Outcome metric_oracle() {
  std::mt19937_64 rng(6);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 1 + rng() % 80;
    Hypnogram pred, truth;
    const int pred_stages = 1 + static_cast<int>(rng() % 5);
    for (std::size_t t = 0; t < n; ++t) {
      pred.stages.push_back(static_cast<int>(rng() % pred_stages));
      truth.stages.push_back(static_cast<int>(rng() % 5));
    }
    const StageScores s = per_stage_f1(pred, truth);
    double sum = 0.0;
    int defined = 0;
    for (int k = 0; k < 5; ++k) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t t = 0; t < n; ++t) {
        tp += pred[t] == k && truth[t] == k;
        fp += pred[t] == k && truth[t] != k;
        fn += pred[t] != k && truth[t] == k;
      }
      std::optional<double> f1;
      if (tp + fp + fn > 0) f1 = 2.0 * tp / (2.0 * tp + fp + fn);
      if (f1.has_value() != s.f1[k].has_value() || (f1 && *f1 != *s.f1[k])) ++mismatches;
      if (f1) {
        sum += *f1;
        ++defined;
      }
    }
    if (s.macro_f1 != sum / defined) ++mismatches;
  }
  const StageScores hand = per_stage_f1(Hypnogram{{kWake, kN2, kN2, kN2}},
                                        Hypnogram{{kWake, kWake, kN2, kN2}});
  const bool hand_ok = hand.f1[kWake] == 2.0 / 3.0 && hand.f1[kN2] == 0.8 &&
                       hand.macro_f1 == (2.0 / 3.0 + 0.8) / 2.0 &&
                       std::abs(hand.macro_f1 - 0.7333) < 5e-5;
  return {mismatches == 0 && hand_ok,
          fmt("%.0f mismatches over 10000 pairs; hand case MF1 %.6f", static_cast<double>(mismatches),
              hand.macro_f1)};
}

// 7. Soft-agreement values and consensus tie-break.
Outcome soft_agreement_suite() {
  const AnnotationSet unanimous{{Hypnogram{{0, 2, 2, 4, 1}}, Hypnogram{{0, 2, 2, 4, 1}},
                                 Hypnogram{{0, 2, 2, 4, 1}}}};
  const auto u = soft_agreement(unanimous);
  const bool unanimous_ok = std::all_of(u.begin(), u.end(), [](double v) { return v == 1.0; });

  const AnnotationSet three{{Hypnogram{{kN2}}, Hypnogram{{kN2}}, Hypnogram{{kN1}}}};
  const bool three_ok = soft_agreement(three) == std::vector<double>{1.0, 1.0, 0.0};

  // Epoch 0 is a 2-2 tie (N2: A, B; N1: C, D); D agrees with the majority
  // everywhere else and is therefore the most reliable scorer.
  const AnnotationSet tie{{Hypnogram{{kN2, kWake, kN3, kREM}}, Hypnogram{{kN2, kN3, kWake, kREM}},
                           Hypnogram{{kN1, kN3, kN3, kN1}}, Hypnogram{{kN1, kN3, kN3, kREM}}}};
  const auto reliability = soft_agreement(tie);
  const bool d_most_reliable =
      reliability[3] > *std::max_element(reliability.begin(), reliability.begin() + 3);
  const bool tie_ok =
      d_most_reliable && consensus_hypnogram(tie) == Hypnogram{{kN1, kN3, kN3, kREM}};
  std::ostringstream detail;
  detail << "unanimous " << (unanimous_ok ? "1.0" : "wrong") << ", 3-scorer case "
         << (three_ok ? "(1, 1, 0)" : "wrong") << ", 2-2 tie "
         << (tie_ok ? "resolved by most reliable scorer" : "wrong");
  return {unanimous_ok && three_ok && tie_ok, detail.str()};
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// Settings of the synthetic end-to-end benchmark.
RunConfig benchmark_config(std::uint64_t seed) {
  RunConfig c;
  c.seed = seed;
  // synth defaults: 40/8/12 recordings of 300 epochs, eeg with 3 channels
  // and eog with 2, two predictors each, diagonal mass in [0.45, 0.9].
  c.train.seed = seed;
  c.train.steps_per_epoch = 20;
  c.train.max_epochs = 12;
  c.threads = worker_threads();
  c.train.threads = c.threads;
  return c;
}

// 8. Synthetic end-to-end benchmark.
Outcome end_to_end_benchmark() {
  const auto start = Clock::now();
  std::vector<double> nap_scores, somnus_scores, single_scores;
  std::ostringstream detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto seed_start = Clock::now();
    const RunConfig c = benchmark_config(seed);
    const SynthSplits splits = synthesize_splits(c.synth, c.seed, c.threads);
    const TrainResult trained = train(splits.train, splits.validation, c.model, c.train);
    const MethodComparison cmp = evaluate_methods(splits.test, &trained.best, &trained.config,
                                                  c.train.inference_window, c.threads);
    nap_scores.push_back(cmp.nap->macro_f1().mean);
    somnus_scores.push_back(cmp.soft_vote.macro_f1().mean);
    single_scores.push_back(cmp.best_single.macro_f1().mean);
    detail << fmt("seed %.0f: NAP %.4f SOMNUS %.4f best single %.4f", static_cast<double>(seed),
                  nap_scores.back(), somnus_scores.back(), single_scores.back())
           << fmt(" (%.0f s); ", seconds_since(seed_start));
    std::fflush(stdout);
  }
  const double nap = median3(nap_scores);
  const double somnus = median3(somnus_scores);
  const double single = median3(single_scores);
  const double elapsed = seconds_since(start);
  detail << fmt("median NAP %.4f vs SOMNUS+0.01 %.4f, best single %.4f; %.0f s", nap, somnus + 0.01,
                single, elapsed);
  return {nap >= somnus + 0.01 && nap >= single && elapsed < 1800.0, detail.str()};
}

// 9. Accumulated step equals superbatch step.
Outcome accumulation_equivalence() {
  SynthSpec spec;
  spec.min_epochs = 120;
  spec.max_epochs = 160;
  spec.layout = {{"eeg", {"c3", "c4", "o1"}, {"p1", "p2"}}, {"eog", {"e1", "e2"}, {"p1", "p2"}}};
  spec.profiles = make_heterogeneous_profiles(spec.layout, 0.45, 0.9, 20.0, 2, 9);
  const auto data = generate_dataset(spec, 0, 10, 99, "g");
  ModelConfig base;
  const ModelConfig config = fit_model_config(base, data);
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    std::mt19937_64 rng(seed);
    const NapParameters params = init_parameters(config, rng());
    const BatchSpec shape = sample_batch_dims(BatchMaxima::from_config(config), {}, rng);
    std::vector<Batch> batches;
    std::vector<BatchGradient> parts;
    for (int g = 0; g < 4; ++g) {
      // Later batches reuse the first selection so that the superbatch exists.
      batches.push_back(
          assemble_batch(data, config, g == 0 ? shape : batches.front().spec, 8, 4, {}, rng));
      parts.push_back(batch_gradient(params, config, batches.back(), DropoutContext::off()));
    }
    NapParameters accumulated = params;
    NapParameters merged = params;
    OptimizerState s1 = OptimizerState::zeros(params);
    OptimizerState s2 = OptimizerState::zeros(params);
    adamw_step(accumulated, accumulate_gradients(parts).grads, s1, {});
    adamw_step(merged,
               batch_gradient(params, config, merge_batches(batches), DropoutContext::off()).grads,
               s2, {});
    const auto a = flatten_parameters(accumulated);
    const auto b = flatten_parameters(merged);
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, max_abs_diff(a[i], b[i]));
  }
  return {worst <= 1e-6, fmt("max |dtheta| %.3g over 3 seeds (G=4, 128 segments)", worst)};
}

// 10. Byte-identical datasets and identical training histories.
Outcome determinism() {
  namespace fs = std::filesystem;
  const auto run_once = [](const fs::path& dir, std::string& history) {
    RunConfig c = run_config_from_json(R"({
      "seed": 17,
      "synth": {"recordings": 14, "min_epochs": 80, "max_epochs": 120},
      "model": {"d_model": 12, "heads": 6, "layers": 1},
      "train": {"steps_per_epoch": 3, "max_epochs": 2}
    })");
    c.threads = worker_threads();
    c.train.threads = c.threads;
    const SynthSplits s = synthesize_splits(c.synth, c.seed, c.threads);
    fs::create_directories(dir);
    write_dataset(dir / "train.napd", s.train);
    write_dataset(dir / "validation.napd", s.validation);
    write_dataset(dir / "test.napd", s.test);
    const TrainResult r = train(read_dataset(dir / "train.napd"),
                                read_dataset(dir / "validation.napd"), c.model, c.train);
    std::ostringstream csv;
    write_history_csv(csv, r.history);
    history = csv.str();
  };
  const fs::path root = nap::testing::scratch_dir("acceptance_determinism");
  std::string h1, h2;
  run_once(root / "a", h1);
  run_once(root / "b", h2);
  bool files_equal = true;
  for (const char* name : {"train.napd", "validation.napd", "test.napd"}) {
    files_equal = files_equal && read_file_bytes(root / "a" / name) == read_file_bytes(root / "b" / name);
  }
  fs::remove_all(root);
  return {files_equal && h1 == h2 && !h1.empty(),
          std::string("dataset files ") + (files_equal ? "byte-identical" : "differ") +
              ", history CSV " + (h1 == h2 ? "identical" : "differs")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> check;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", gradient_correctness},
      {2, "symmetry suite", symmetry_suite},
      {3, "degenerate-axis identities", degenerate_axes},
      {4, "fusion weight contract", fusion_contract},
      {5, "batch-shape sampler", sampler_uniformity},
      {6, "metric oracle", metric_oracle},
      {7, "soft-agreement and consensus", soft_agreement_suite},
      {9, "gradient-accumulation equivalence", accumulation_equivalence},
      {10, "determinism", determinism},
      {8, "synthetic end-to-end benchmark", end_to_end_benchmark},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const Criterion& c : criteria) {
    if (!selected.empty() && !selected.contains(c.id)) continue;
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("criterion %2d %s  %s: %s\n", c.id, o.pass ? "PASS" : "FAIL", c.name,
                o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? EXIT_SUCCESS : EXIT_FAILURE;
}
