#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "lmukws/trainer.hpp"

using namespace lmukws;

namespace {

ArchConfig tiny_arch() {
  ArchConfig a;
  a.input_dim = 6;
  a.layers = {{12, {{4, 0.1}, {3, 0.2}}}, {10, {{3, 0.15}}}};
  return a;
}

// Four-class toy problem: a class-specific frame pattern in Gaussian noise.
TrainData toy_data(std::size_t n, std::uint64_t seed, double noise = 0.3) {
  Rng rng(seed);
  Eigen::MatrixXd proto(4, 6);
  Rng prng(777);
  for (Eigen::Index i = 0; i < proto.size(); ++i) proto.data()[i] = prng.uniform(-1.5, 1.5);
  TrainData d;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 4);
    Eigen::MatrixXd f(12, 6);
    for (Eigen::Index t = 0; t < 12; ++t)
      for (Eigen::Index j = 0; j < 6; ++j) f(t, j) = proto(label, j) * (t >= 4) + noise * rng.normal();
    d.features.push_back(f);
    d.labels.push_back(label);
    (i % 5 == 4 ? d.val : d.train).push_back(i);
  }
  d.mean_q = detail::quantize_vector(Eigen::VectorXd::Zero(6), make_spec(32, kNormalizerExp));
  d.inv_std_q = detail::quantize_vector(Eigen::VectorXd::Ones(6), make_spec(32, kNormalizerExp));
  return d;
}

double batch_loss(ModelGraph& m, std::span<const Example> batch, const QuantPlan* plan = nullptr) {
  return forward_backward(m, batch, plan).loss;
}

std::vector<double> flat_params(ModelGraph& m) {
  std::vector<double> out;
  for (const auto& t : trainable_tensors(m))
    out.insert(out.end(), t.data, t.data + t.rows * t.cols);
  return out;
}

}  // namespace

TEST(Loss, ZeroWeightsGiveLogTwelve) {
  auto m = make_model(tiny_arch());
  const auto d = toy_data(8, 1);
  const auto ex = examples_of(d, d.train);
  EXPECT_NEAR(batch_loss(m, ex), std::log(12.0), 1e-12);
}

TEST(Gradient, MatchesCentralDifferences) {
  ArchConfig a;
  a.input_dim = 4;
  a.layers = {{6, {{4, 0.1}}}};
  auto m = make_model(a);
  init_params(m, 3);
  Rng rng(4);
  for (auto& t : trainable_tensors(m))
    for (Eigen::Index i = 0; i < t.rows * t.cols; ++i) t.data[i] += rng.uniform(-0.2, 0.2);
  std::vector<Eigen::MatrixXd> feats;
  for (int k = 0; k < 3; ++k) {
    Eigen::MatrixXd f(10, 4);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng.normal();
    feats.push_back(f);
  }
  const std::vector<Example> batch{{&feats[0], 2}, {&feats[1], 7}, {&feats[2], 11}};
  const auto analytic = forward_backward(m, batch).grads;
  auto views = trainable_tensors(m);
  double worst = 0.0;
  for (std::size_t ti = 0; ti < views.size(); ++ti) {
    for (Eigen::Index j = 0; j < views[ti].rows * views[ti].cols; ++j) {
      double& w = views[ti].data[j];
      const double saved = w, h = 1e-6;
      w = saved + h;
      const double lp = batch_loss(m, batch);
      w = saved - h;
      const double lm = batch_loss(m, batch);
      w = saved;
      const double num = (lp - lm) / (2 * h);
      const double ana = analytic.tensors[ti].data()[j];
      worst = std::max(worst, std::fabs(num - ana) / std::max(1e-3, std::fabs(num) + std::fabs(ana)));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Gradient, SaturatedStraightThroughIsZero) {
  auto m = make_model(tiny_arch());
  init_params(m, 5);
  const auto d = toy_data(8, 2);
  QuantPlan plan;
  plan.weight_bits = 8;
  plan.input_exp = -4;
  // u grid tops out at 63 * 2^-20: every encoder output saturates
  for (std::size_t l = 0; l < 2; ++l) plan.layers.push_back({-20, -3, -3});
  const auto ex = examples_of(d, d.train);
  const auto fb = forward_backward(m, ex, &plan);
  EXPECT_EQ(fb.grads.tensors[0].squaredNorm(), 0.0);  // layer0 e_x
  EXPECT_EQ(fb.grads.tensors[1].squaredNorm(), 0.0);  // layer0 e_h
  EXPECT_GT(fb.grads.tensors[2].squaredNorm(), 0.0);  // layer0 W_x still learns
}

TEST(Adam, ClipsGlobalNorm) {
  auto m = make_model(tiny_arch());
  auto g = GradientSet::zeros_like(m);
  for (auto& t : g.tensors) t.setConstant(100.0);
  const double raw = g.norm();
  TrainConfig cfg;
  AdamState st;
  adam_step(m, g, st, cfg);
  double first_moment = 0.0;
  for (const auto& t : st.m) first_moment += t.squaredNorm();
  // m = (1 - beta1) * clipped gradient after one step
  EXPECT_NEAR(std::sqrt(first_moment) / (1.0 - cfg.beta1), cfg.clip_norm, 1e-9);
  cfg.clip_norm = 0.0;
  AdamState st2;
  adam_step(m, g, st2, cfg);
  first_moment = 0.0;
  for (const auto& t : st2.m) first_moment += t.squaredNorm();
  EXPECT_NEAR(std::sqrt(first_moment) / (1.0 - cfg.beta1), raw, 1e-6);
}

TEST(Adam, MaskedWeightsStayZero) {
  auto m = make_model(tiny_arch());
  init_params(m, 6);
  auto mask = prune_magnitude(m, 0.5);
  apply_mask(m, mask);
  const auto d = toy_data(16, 3);
  TrainConfig cfg;
  AdamState st;
  const auto ex = examples_of(d, d.train);
  for (int i = 0; i < 10; ++i) adam_step(m, forward_backward(m, ex).grads, st, cfg, &mask);
  std::size_t mi = 0;
  for (const auto& t : trainable_tensors(m)) {
    if (t.is_bias) continue;
    for (Eigen::Index j = 0; j < t.rows * t.cols; ++j) {
      if (!mask.keep[mi][static_cast<std::size_t>(j)]) {
        ASSERT_EQ(t.data[j], 0.0) << t.name;
      }
    }
    ++mi;
  }
}

TEST(Train, ReproducibleForSeed) {
  const auto d = toy_data(40, 4);
  TrainConfig cfg;
  cfg.steps = 30;
  cfg.batch_size = 8;
  cfg.quant_on_step = 20;
  cfg.calib_examples = 16;
  cfg.eval_every = 10;
  auto a = train(tiny_arch(), standard_labels(), d, cfg);
  auto b = train(tiny_arch(), standard_labels(), d, cfg);
  EXPECT_EQ(flat_params(a.state.model), flat_params(b.state.model));
  EXPECT_EQ(a.deployed, b.deployed);
  cfg.seed = 2;
  auto c = train(tiny_arch(), standard_labels(), d, cfg);
  EXPECT_NE(flat_params(a.state.model), flat_params(c.state.model));
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto d = toy_data(40, 5);
  TrainConfig cfg;
  cfg.steps = 40;
  cfg.batch_size = 8;
  cfg.quant_on_step = 15;
  cfg.calib_examples = 16;
  cfg.prune_start = 10;
  cfg.prune_end = 30;
  cfg.target_sparsity = 0.5;
  cfg.eval_every = 10;

  auto full = init_train_state(tiny_arch(), standard_labels(), cfg);
  train_steps(full, d, cfg, cfg.steps);

  auto part = init_train_state(tiny_arch(), standard_labels(), cfg);
  train_steps(part, d, cfg, 22);
  const auto path = (std::filesystem::temp_directory_path() / "lmukws_resume.ckpt").string();
  save_state(part, path);
  auto resumed = load_state(path);
  train_steps(resumed, d, cfg, cfg.steps);

  EXPECT_EQ(flat_params(full.model), flat_params(resumed.model));
  EXPECT_EQ(full.mask.keep, resumed.mask.keep);
  EXPECT_EQ(full.log.size(), resumed.log.size());
  EXPECT_EQ(freeze(full.model, full.plan), freeze(resumed.model, resumed.plan));
}

TEST(Checkpoint, CorruptionDetected) {
  const auto d = toy_data(20, 6);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 4;
  cfg.quant_on_step = -1;
  auto st = init_train_state(tiny_arch(), standard_labels(), cfg);
  train_steps(st, d, cfg, 5);
  auto bytes = encode_state(st);
  bytes[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_state(bytes), LoadError);
  bytes.resize(bytes.size() / 3);
  EXPECT_THROW(decode_state(bytes), LoadError);
}

TEST(Train, OverfitsTwentyUtterances) {
  auto d = toy_data(20, 7, 1.0);
  d.train.clear();
  d.val.clear();
  for (std::size_t i = 0; i < 20; ++i) d.train.push_back(i);
  Rng rng(8);
  for (auto& l : d.labels) l = static_cast<int>(rng.below(kNumLabels));  // arbitrary labels
  TrainConfig cfg;
  cfg.steps = 400;
  cfg.batch_size = 20;
  cfg.learning_rate = 1e-2;
  cfg.quant_on_step = -1;
  cfg.eval_every = 1000;
  auto st = init_train_state(tiny_arch(), standard_labels(), cfg);
  train_steps(st, d, cfg, cfg.steps);
  EXPECT_EQ(split_accuracy(st, d, d.train), 1.0);
}

TEST(Train, UntrainedModelNearChance) {
  const auto d = toy_data(400, 9);
  TrainConfig cfg;
  auto st = init_train_state(tiny_arch(), standard_labels(), cfg);
  const double acc = split_accuracy(st, d, d.train);
  EXPECT_LT(acc, 0.6);
}

TEST(Eval, EmptySplitIsAnError) {
  EXPECT_THROW(accuracy(std::vector<int>{}, std::vector<int>{}), DataError);
}

TEST(Eval, DeployedAgreesWithHatGraph) {
  const auto d = toy_data(80, 10);
  TrainConfig cfg;
  cfg.steps = 120;
  cfg.batch_size = 16;
  cfg.quant_on_step = 60;
  cfg.calib_examples = 32;
  cfg.eval_every = 40;
  auto r = train(tiny_arch(), standard_labels(), d, cfg);
  const auto g = build_graph(r.state.model, &r.state.plan);
  std::vector<std::size_t> all(d.features.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto ptrs = d.feature_ptrs(all);
  for (auto mode : {EvalMode::kOffline, EvalMode::kStreaming}) {
    EXPECT_EQ(predict_graph(g, ptrs, mode), predict_deployed(r.deployed, ptrs, mode));
  }
  EXPECT_GT(accuracy(predict_deployed(r.deployed, ptrs), d.label_list(all)), 0.9);
  EXPECT_GE(r.state.float_val_acc, 0.0);
}

TEST(Log, JsonLine) {
  TrainLogRecord r{25, 0.5, 0.75, 0.25, true};
  EXPECT_EQ(r.to_json(),
            R"({"step":25,"loss":0.5,"val_acc":0.75,"sparsity":0.25,"quant_on":true})");
}

TEST(Config, Validation) {
  TrainConfig c;
  c.target_sparsity = 1.0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = {};
  c.weight_bits = 6;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = {};
  c.quant_on_step = c.steps;
  EXPECT_THROW(c.validate(), ArgumentError);
}
