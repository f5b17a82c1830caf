#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <vector>

#include "nap/errors.hpp"
#include "nap/eval.hpp"
#include "nap/trainer.hpp"
#include "test_support.hpp"

namespace nap {
namespace {

using testing::perfect_predictor_dataset;
using testing::small_config;

bool chi_square_uniform(const std::vector<std::size_t>& counts, double alpha = 0.01) {
  double total = 0.0;
  for (std::size_t c : counts) total += static_cast<double>(c);
  const double expected = total / static_cast<double>(counts.size());
  double stat = 0.0;
  for (std::size_t c : counts) stat += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) / expected;
  if (counts.size() < 2) return true;
  const boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return stat < boost::math::quantile(dist, 1.0 - alpha);
}

TEST(SampleBatchDims, SingleModalityAlwaysChosen) {
  const BatchMaxima maxima{{3}, {2}};
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const BatchSpec s = sample_batch_dims(maxima, {}, rng);
    ASSERT_EQ(s.modalities.size(), 1U);
    EXPECT_EQ(s.modalities[0].modality, 0U);
  }
}

TEST(SampleBatchDims, BoundsCoverageAndUniformity) {
  const BatchMaxima maxima{{3, 2, 4}, {2, 3, 1}};
  const TimeBounds bounds;
  std::mt19937_64 rng(2);
  std::vector<std::size_t> t_counts(61), m_counts(3), which(3);
  std::vector<std::vector<std::size_t>> c_counts{std::vector<std::size_t>(3), std::vector<std::size_t>(2),
                                                 std::vector<std::size_t>(4)};
  std::vector<std::vector<std::size_t>> b_counts{std::vector<std::size_t>(2), std::vector<std::size_t>(3),
                                                 std::vector<std::size_t>(1)};
  for (int i = 0; i < 10000; ++i) {
    const BatchSpec s = sample_batch_dims(maxima, bounds, rng);
    ASSERT_NO_THROW(s.validate(maxima, bounds));
    ASSERT_GE(s.epochs, 20U);
    ASSERT_LE(s.epochs, 80U);
    ++t_counts[s.epochs - 20];
    ++m_counts[s.modalities.size() - 1];
    std::set<std::size_t> distinct;
    for (const ModalitySelection& m : s.modalities) {
      distinct.insert(m.modality);
      ++which[m.modality];
      ++c_counts[m.modality][m.channels - 1];
      ++b_counts[m.modality][m.predictors - 1];
    }
    EXPECT_EQ(distinct.size(), s.modalities.size());
  }
  for (std::size_t c : t_counts) EXPECT_GT(c, 0U);
  EXPECT_TRUE(chi_square_uniform(t_counts));
  EXPECT_TRUE(chi_square_uniform(m_counts));
  EXPECT_TRUE(chi_square_uniform(which));
  for (const auto& c : c_counts) EXPECT_TRUE(chi_square_uniform(c));
  for (const auto& b : b_counts) EXPECT_TRUE(chi_square_uniform(b));
}

TEST(SampleBatchDims, FuzzedMaximaAlwaysValid) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100000; ++i) {
    const std::size_t m = 1 + rng() % 4;
    BatchMaxima maxima;
    for (std::size_t k = 0; k < m; ++k) {
      maxima.channels.push_back(1 + rng() % 6);
      maxima.predictors.push_back(1 + rng() % 5);
    }
    TimeBounds bounds;
    bounds.lo = 1 + rng() % 50;
    bounds.hi = bounds.lo + rng() % 50;
    const BatchSpec s = sample_batch_dims(maxima, bounds, rng);
    ASSERT_NO_THROW(s.validate(maxima, bounds));
  }
}

TEST(BatchSpec, ValidateRejectsOutOfRange) {
  const BatchMaxima maxima{{2}, {2}};
  BatchSpec s{30, {{0, 2, 2, {}, {}}}};
  EXPECT_NO_THROW(s.validate(maxima, {}));
  s.epochs = 81;
  EXPECT_THROW(s.validate(maxima, {}), ValidationError);
  s.epochs = 30;
  s.modalities[0].channels = 3;
  EXPECT_THROW(s.validate(maxima, {}), ValidationError);
  s.modalities[0].channels = 0;
  EXPECT_THROW(s.validate(maxima, {}), ValidationError);
  s.modalities.clear();
  EXPECT_THROW(s.validate(maxima, {}), ValidationError);
}

SynthSpec multi_spec(std::size_t min_epochs, std::size_t max_epochs) {
  SynthSpec spec;
  spec.min_epochs = min_epochs;
  spec.max_epochs = max_epochs;
  spec.layout = {{"eeg", {"c3", "c4", "o1"}, {"p1", "p2"}}, {"eog", {"e1", "e2"}, {"p1", "p2"}}};
  spec.profiles = make_heterogeneous_profiles(spec.layout, 0.45, 0.9, 20.0, 2, 5);
  return spec;
}

TEST(AssembleBatch, DefaultsGiveThirtyTwoRectangularSegments) {
  const auto data = generate_dataset(multi_spec(120, 200), 0, 10, 9, "r");
  const ModelConfig config = fit_model_config(small_config(6, 3, 1, 1, 1, 1), data);
  const BatchMaxima maxima = BatchMaxima::from_config(config);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const BatchSpec spec = sample_batch_dims(maxima, {}, rng);
    const Batch batch = assemble_batch(data, config, spec, 8, 4, {}, rng);
    ASSERT_EQ(batch.segment_count(), 32U);
    const std::size_t t = batch.spec.epochs;
    EXPECT_EQ(batch.token_count(), 32 * t);
    std::set<std::size_t> used;
    for (const Segment& seg : batch.segments) used.insert(seg.recording);
    EXPECT_EQ(used.size(), 8U);
    for (std::size_t k = 0; k < batch.inputs.size(); ++k) {
      const ModalitySelection& sel = batch.spec.modalities[k];
      EXPECT_EQ(batch.inputs[k].probs.shape(), (Shape{32, t, sel.channels, sel.predictors, 5}));
      EXPECT_EQ(sel.channel_ids.size(), sel.channels);
      EXPECT_EQ(sel.predictor_ids.size(), sel.predictors);
    }
    for (std::size_t s = 0; s < 32; ++s) {
      const Segment& seg = batch.segments[s];
      const PredictionSet& rec = data[seg.recording];
      ASSERT_LE(seg.start + t, rec.epochs());
      for (std::size_t e = 0; e < t; ++e) {
        ASSERT_EQ(batch.labels[s * t + e], rec.truth[seg.start + e]);
      }
      // Spot-check the first stream of every modality against the source.
      for (std::size_t k = 0; k < batch.inputs.size(); ++k) {
        const ModalitySelection& sel = batch.spec.modalities[k];
        const auto& stream = rec.modalities.at(config.modalities[sel.modality])
                                 .at(sel.channel_ids[0])
                                 .at(sel.predictor_ids[0]);
        const std::size_t cb = sel.channels * sel.predictors;
        for (std::size_t e = 0; e < t; ++e) {
          for (std::size_t j = 0; j < 5; ++j) {
            ASSERT_EQ(batch.inputs[k].probs[((s * t + e) * cb) * 5 + j],
                      stream.row(seg.start + e)[j]);
          }
        }
      }
    }
  }
}

TEST(AssembleBatch, DeterministicForSeed) {
  const auto data = generate_dataset(multi_spec(100, 100), 0, 9, 9, "r");
  const ModelConfig config = fit_model_config(small_config(6, 3, 1, 1, 1, 1), data);
  const auto make = [&](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const BatchSpec spec = sample_batch_dims(BatchMaxima::from_config(config), {}, rng);
    return assemble_batch(data, config, spec, 8, 4, {}, rng);
  };
  const Batch a = make(5);
  const Batch b = make(5);
  EXPECT_EQ(a.labels, b.labels);
  ASSERT_EQ(a.inputs.size(), b.inputs.size());
  for (std::size_t k = 0; k < a.inputs.size(); ++k) EXPECT_EQ(a.inputs[k].probs, b.inputs[k].probs);
}

TEST(AssembleBatch, ShortRecordingsClampEpochs) {
  const auto data = generate_dataset(multi_spec(30, 30), 0, 8, 9, "r");
  const ModelConfig config = fit_model_config(small_config(6, 3, 1, 1, 1, 1), data);
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    BatchSpec spec = sample_batch_dims(BatchMaxima::from_config(config), {}, rng);
    spec.epochs = 70;
    const Batch batch = assemble_batch(data, config, spec, 8, 4, {}, rng);
    EXPECT_GE(batch.spec.epochs, 20U);
    EXPECT_LE(batch.spec.epochs, 30U);
  }
}

TEST(AssembleBatch, TooFewRecordingsRejected) {
  const auto data = generate_dataset(multi_spec(100, 100), 0, 5, 9, "r");
  const ModelConfig config = fit_model_config(small_config(6, 3, 1, 1, 1, 1), data);
  std::mt19937_64 rng(7);
  const BatchSpec spec = sample_batch_dims(BatchMaxima::from_config(config), {}, rng);
  EXPECT_THROW((void)assemble_batch(data, config, spec, 8, 4, {}, rng), ValidationError);
}

NapParameters scalar_like(double value) {
  NapParameters p = init_parameters(small_config(6, 3, 0, 1, 1, 1), 1);
  visit_parameters([value](const std::string&, Tensor& t) { t.fill(value); }, p);
  return p;
}

TEST(AdamW, FirstStepClosedForm) {
  NapParameters params = scalar_like(0.5);
  const NapParameters grads = scalar_like(1.0);
  OptimizerState state = OptimizerState::zeros(params);
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step(params, grads, state, cfg);
  EXPECT_EQ(state.step, 1U);
  for (const Tensor& t : flatten_parameters(params)) {
    for (double v : t.values()) EXPECT_NEAR(v - 0.5, -1e-3 / (1.0 + 1e-8), 1e-15);
  }
}

TEST(AdamW, ZeroGradientFixedPointAndDecoupledDecay) {
  NapParameters params = scalar_like(0.5);
  const NapParameters zero = scalar_like(0.0);
  OptimizerState state = OptimizerState::zeros(params);
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step(params, zero, state, cfg);
  for (const Tensor& t : flatten_parameters(params)) {
    for (double v : t.values()) EXPECT_EQ(v, 0.5);
  }
  cfg.weight_decay = 0.1;
  adamw_step(params, zero, state, cfg);
  for (const Tensor& t : flatten_parameters(params)) {
    for (double v : t.values()) EXPECT_NEAR(v, 0.5 * (1.0 - 1e-3 * 0.1), 1e-16);
  }
}

TEST(AdamW, NonFiniteGradientAbortsWithoutUpdating) {
  NapParameters params = scalar_like(0.5);
  NapParameters grads = scalar_like(1.0);
  grads.fusion_bias[0] = std::nan("");
  OptimizerState state = OptimizerState::zeros(params);
  const NapParameters before = params;
  try {
    adamw_step(params, grads, state, {});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("fusion.bias"), std::string::npos) << e.what();
  }
  EXPECT_EQ(flatten_parameters(params), flatten_parameters(before));
  EXPECT_EQ(state.step, 0U);
  EXPECT_EQ(flatten_parameters(state.m), flatten_parameters(zeros_like(params)));
}

struct AccumulationFixture {
  std::vector<PredictionSet> data = generate_dataset(multi_spec(90, 90), 0, 8, 21, "a");
  ModelConfig config = fit_model_config(small_config(6, 3, 1, 1, 1, 1), data);
  NapParameters params = init_parameters(config, 3);
  std::vector<Batch> batches;

  AccumulationFixture() {
    std::mt19937_64 rng(8);
    const BatchSpec spec = sample_batch_dims(BatchMaxima::from_config(config), {}, rng);
    for (int g = 0; g < 4; ++g) {
      batches.push_back(
          assemble_batch(data, config, g == 0 ? spec : batches.front().spec, 2, 2, {}, rng));
    }
  }
};

TEST(Accumulation, MeanOfPartsEqualsGradientOfMergedBatch) {
  AccumulationFixture f;
  std::vector<BatchGradient> parts;
  for (const Batch& b : f.batches) parts.push_back(batch_gradient(f.params, f.config, b, DropoutContext::off()));
  const BatchGradient accumulated = accumulate_gradients(parts);
  const BatchGradient merged =
      batch_gradient(f.params, f.config, merge_batches(f.batches), DropoutContext::off());
  EXPECT_NEAR(accumulated.loss, merged.loss, 1e-12);
  EXPECT_EQ(accumulated.tokens, merged.tokens);
  const auto a = flatten_parameters(accumulated.grads);
  const auto m = flatten_parameters(merged.grads);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LT(max_abs_diff(a[i], m[i]), 1e-8) << i;
}

TEST(Accumulation, TokenWeightingHandlesUnequalBatches) {
  // Oracle: weights proportional to token counts, computed by hand.
  NapParameters g1 = scalar_like(1.0);
  NapParameters g2 = scalar_like(4.0);
  const std::vector<BatchGradient> parts{{2.0, 10, g1}, {5.0, 30, g2}};
  const BatchGradient total = accumulate_gradients(parts);
  EXPECT_EQ(total.tokens, 40U);
  EXPECT_NEAR(total.loss, (2.0 * 10 + 5.0 * 30) / 40.0, 1e-15);
  for (const Tensor& t : flatten_parameters(total.grads)) {
    for (double v : t.values()) EXPECT_NEAR(v, (1.0 * 10 + 4.0 * 30) / 40.0, 1e-15);
  }
}

TEST(Accumulation, StepOverPartsEqualsStepOverSuperbatch) {
  AccumulationFixture f;
  std::vector<BatchGradient> parts;
  for (const Batch& b : f.batches) parts.push_back(batch_gradient(f.params, f.config, b, DropoutContext::off()));
  NapParameters p1 = f.params;
  NapParameters p2 = f.params;
  OptimizerState s1 = OptimizerState::zeros(p1);
  OptimizerState s2 = OptimizerState::zeros(p2);
  adamw_step(p1, accumulate_gradients(parts).grads, s1, {});
  adamw_step(p2, batch_gradient(f.params, f.config, merge_batches(f.batches), DropoutContext::off()).grads,
             s2, {});
  const auto a = flatten_parameters(p1);
  const auto b = flatten_parameters(p2);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LT(max_abs_diff(a[i], b[i]), 1e-6);
}

TEST(MergeBatches, RejectsDifferentSelections) {
  AccumulationFixture f;
  std::mt19937_64 rng(99);
  BatchSpec other = f.batches[0].spec;
  other.epochs = f.batches[0].spec.epochs == 20 ? 21 : 20;
  const std::vector<Batch> mixed{f.batches[0], assemble_batch(f.data, f.config, other, 2, 2, {}, rng)};
  EXPECT_ANY_THROW((void)merge_batches(mixed));
}

TrainConfig quick_train(std::uint64_t seed) {
  TrainConfig t;
  t.steps_per_epoch = 6;
  t.max_epochs = 2;
  t.recordings_per_batch = 4;
  t.segments_per_recording = 2;
  t.accumulation_steps = 2;
  t.seed = seed;
  return t;
}

TEST(Train, IdenticalSeedGivesIdenticalHistory) {
  const auto train_set = generate_dataset(multi_spec(60, 80), 0, 6, 3, "t");
  const auto val_set = generate_dataset(multi_spec(60, 80), 6, 2, 3, "v");
  ModelConfig model = small_config(6, 3, 1, 1, 1, 1);
  model.dropout = 0.1;
  const TrainResult a = train(train_set, val_set, model, quick_train(4));
  TrainConfig threaded = quick_train(4);
  threaded.threads = 2;
  const TrainResult b = train(train_set, val_set, model, threaded);
  std::ostringstream ha, hb;
  write_history_csv(ha, a.history);
  write_history_csv(hb, b.history);
  EXPECT_EQ(ha.str(), hb.str());
  EXPECT_EQ(flatten_parameters(a.final_params), flatten_parameters(b.final_params));
  EXPECT_EQ(ha.str().substr(0, 26), "epoch,train_loss,val_mf1\n1");
}

TEST(Train, RejectsEmptyAndOverlappingSplits) {
  const auto data = generate_dataset(multi_spec(60, 60), 0, 6, 3, "t");
  const ModelConfig model = small_config(6, 3, 1, 1, 1, 1);
  const std::vector<PredictionSet> none;
  EXPECT_THROW((void)train(none, data, model, quick_train(1)), ValidationError);
  EXPECT_THROW((void)train(data, none, model, quick_train(1)), ValidationError);
  const std::vector<PredictionSet> overlap{data[0]};
  EXPECT_THROW((void)train(data, overlap, model, quick_train(1)), ValidationError);
}

TEST(Train, SanityTaskLearnsPerfectPredictor) {
  const auto train_set = perfect_predictor_dataset(8, 200, 11, "s");
  const auto val_set = perfect_predictor_dataset(3, 200, 911, "sv");
  ModelConfig model = small_config(12, 3, 1, 1, 1, 1);
  model.dropout = 0.1;
  TrainConfig cfg;
  cfg.max_epochs = 5;
  cfg.seed = 2;
  const TrainResult result = train(train_set, val_set, model, cfg);
  ASSERT_LE(result.history.size(), 5U);
  const double train_mf1 = evaluate_nap(train_set, result.best, result.config).macro_f1().mean;
  EXPECT_GT(train_mf1, 0.95);
  EXPECT_GT(result.best_val_mf1, 0.95);

  double best = 0.0;
  for (const EpochRecord& r : result.history) best = std::max(best, r.val_mf1);
  EXPECT_EQ(result.best_val_mf1, best);
  EXPECT_EQ(result.history[result.best_epoch - 1].val_mf1, best);
}

TEST(FitModelConfig, VocabularyAndMaxima) {
  const auto data = generate_dataset(multi_spec(40, 40), 0, 2, 3, "f");
  const ModelConfig c = fit_model_config(small_config(6, 3, 1, 1, 1, 1), data);
  EXPECT_EQ(c.modalities, (std::vector<std::string>{"eeg", "eog"}));
  EXPECT_EQ(c.max_channels, (std::vector<std::size_t>{3, 2}));
  EXPECT_EQ(c.max_predictors, (std::vector<std::size_t>{2, 2}));
}

}  // namespace
}  // namespace nap
