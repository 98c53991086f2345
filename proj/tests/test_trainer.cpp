#include <gtest/gtest.h>

#include <fstream>
#include <memory>

#include "synthfeat/trainer.hpp"
#include "test_support.hpp"

using namespace synthfeat;
using testing_support::Datasets;
using testing_support::TempDir;

namespace {

constexpr int kRes = 64;
constexpr int kDivisor = 16;

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = std::make_unique<TempDir>("trainer");
    data_ = std::make_unique<Datasets>(dir_->path, 12, kRes);
  }
  static void TearDownTestSuite() {
    data_.reset();
    dir_.reset();
  }

  static ModelState tiny_model(std::uint64_t seed = 5) { return init_model(build_default_alexnet(kRes, kDivisor), seed); }

  static Batch syn_batch(long long k = 0, int bs = 4, std::uint64_t seed = 1) {
    BatchStream s(data_->syn, bs, seed, Domain::synthetic);
    return s.batch_at(k);
  }
  static Batch real_batch(long long k = 0, int bs = 4, std::uint64_t seed = 2) {
    BatchStream s(data_->real, bs, seed, Domain::real);
    return s.batch_at(k);
  }

  TrainConfig run_config(const std::string& name) const {
    TrainConfig c;
    c.width_divisor = kDivisor;
    c.resolution = kRes;
    c.batch_size_syn = 3;
    c.batch_size_real = 3;
    c.warmup_iterations = 1;
    c.syn_dir = data_->syn;
    c.real_dir = data_->real;
    c.out_dir = dir_->path / name;
    return c;
  }

  static inline std::unique_ptr<TempDir> dir_;
  static inline std::unique_ptr<Datasets> data_;
};

bool same_group(const ModelState& a, const ModelState& b, ParamGroup g) {
  for (const auto* maps : {&a.params, &a.buffers}) {
    const ParamMap& other = maps == &a.params ? b.params : b.buffers;
    for (const auto& [name, t] : *maps)
      if (group_of(name) == g && !(t == other.at(name))) return false;
  }
  return true;
}

ParamMap delta(const ModelState& before, const ModelState& after) {
  ParamMap d;
  for (const auto& [name, t] : after.params) {
    Tensor x = t;
    const Tensor& y = before.params.at(name);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= y[i];
    d[name] = std::move(x);
  }
  return d;
}

}  // namespace

TEST(FlatConfig, ParsesValuesAndComments) {
  auto kv = parse_flat_config(
      "# run\n"
      "family = \"alexnet\"   # trailing\n"
      "tap_layer = conv4\n"
      "max_iterations = 12\n"
      "lr_bh = 1e-3\n"
      "bifool = true\n"
      "out_dir = \"a # b\"\n\n",
      "cfg");
  EXPECT_EQ(kv["family"], "alexnet");
  EXPECT_EQ(kv["tap_layer"], "conv4");
  EXPECT_TRUE(kv["max_iterations"].is_number_integer());
  EXPECT_DOUBLE_EQ(kv["lr_bh"].get<double>(), 1e-3);
  EXPECT_EQ(kv["bifool"], true);
  EXPECT_EQ(kv["out_dir"], "a # b");
}

TEST(FlatConfig, RejectsMalformedInput) {
  EXPECT_THROW(parse_flat_config("[train]\n", "cfg"), ConfigError);
  EXPECT_THROW(parse_flat_config("novalue\n", "cfg"), ConfigError);
  EXPECT_THROW(parse_flat_config("a = 1\na = 2\n", "cfg"), ConfigError);
  EXPECT_THROW(parse_flat_config("a = \"open\n", "cfg"), ConfigError);
  try {
    parse_flat_config("x = 1\n = 3\n", "my.toml");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("my.toml:2"), std::string::npos);
  }
}

TEST(TrainConfigTest, UnknownKeysAndTypes) {
  TrainConfig c;
  EXPECT_THROW(apply_config(c, {{"max_iteration", 3}}), ConfigError);
  EXPECT_THROW(apply_config(c, {{"max_iterations", "3"}}), ConfigError);
  EXPECT_THROW(apply_config(c, {{"max_iterations", 2.5}}), ConfigError);
  EXPECT_THROW(apply_config(c, {{"seed", -1}}), ConfigError);
  apply_config(c, {{"lr_d", 1}, {"seed", 9}});
  EXPECT_DOUBLE_EQ(c.adam.lr_d, 1.0);
  EXPECT_EQ(c.seed, 9u);
  apply_override(c, "lambda_normal=2.5");
  EXPECT_DOUBLE_EQ(c.weights.normal, 2.5);
  EXPECT_THROW(apply_override(c, "lambda_normal"), ConfigError);
}

TEST(TrainConfigTest, Validation) {
  TrainConfig c;
  c.syn_dir = "s";
  c.real_dir = "r";
  EXPECT_NO_THROW(c.validate());
  auto bad = [&](auto mutate) {
    TrainConfig d = c;
    mutate(d);
    EXPECT_THROW(d.validate(), ConfigError);
  };
  bad([](TrainConfig& d) { d.max_iterations = 0; });
  bad([](TrainConfig& d) { d.adam.lr_bh = 0; });
  bad([](TrainConfig& d) { d.adam.lr_d = -1; });
  bad([](TrainConfig& d) { d.tap_layer = "conv9"; });
  bad([](TrainConfig& d) { d.optimizer = "sgd"; });
  bad([](TrainConfig& d) { d.weights = {0, 0, 0}; });
  bad([](TrainConfig& d) { d.real_dir.clear(); });
  bad([](TrainConfig& d) {
    d.adaptation = false;
    d.bifool = true;
  });
  for (const char* tap : {"conv1", "conv4", "conv5", "conv6"}) {
    TrainConfig d = c;
    d.tap_layer = tap;
    EXPECT_NO_THROW(d.validate()) << tap;
  }
}

TEST(TrainConfigTest, FileRoundTripAndRelativePaths) {
  TempDir tmp("config");
  TrainConfig c;
  c.max_iterations = 17;
  c.weights = {0.5, 2, 3};
  c.syn_dir = "data/syn";
  c.out_dir = "/abs/out";
  {
    std::ofstream f(tmp.path / "run.toml");
    f << config_text(c);
  }
  TrainConfig back = load_train_config(tmp.path / "run.toml");
  EXPECT_EQ(back.max_iterations, 17);
  EXPECT_EQ(back.weights, c.weights);
  EXPECT_EQ(back.syn_dir, tmp.path / "data/syn");
  EXPECT_EQ(back.out_dir, "/abs/out");
  try {
    load_train_config(tmp.path / "missing.toml");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.toml"), std::string::npos);
  }
}

TEST(Calibration, RatioArithmetic) {
  auto w = lambdas_from_norms({10.0, 1.0, 1.0}, {true, true, true});
  EXPECT_DOUBLE_EQ(w.edge, 0.1);
  EXPECT_DOUBLE_EQ(w.depth, 1.0);
  EXPECT_DOUBLE_EQ(w.edge * 10, w.depth);
  auto two = lambdas_from_norms({4.0, 0.0, 1.0}, {true, false, true});
  EXPECT_DOUBLE_EQ(two.edge * 4, two.normal * 1);
  EXPECT_EQ(two.depth, 0.0);
  auto same = lambdas_from_norms({3.0, 3.0, 7.0}, {true, true, true});
  EXPECT_EQ(same.edge, same.depth);
  EXPECT_THROW(lambdas_from_norms({1.0, 0.0, 1.0}, {true, true, true}), NumericError);
}

TEST_F(TrainerTest, CalibrationIsDeterministicAndLeavesModelUntouched) {
  ModelState m = tiny_model();
  ModelState copy = m;
  std::vector<Batch> one = {syn_batch(0)}, four = {syn_batch(0), syn_batch(1), syn_batch(2), syn_batch(0)};
  auto a = calibrate_lambdas(m, one), b = calibrate_lambdas(m, one);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.norms, b.norms);
  auto c = calibrate_lambdas(m, four), d = calibrate_lambdas(m, four);
  EXPECT_EQ(c.weights, d.weights);
  EXPECT_TRUE(same_group(m, copy, ParamGroup::base) && same_group(m, copy, ParamGroup::heads));
  for (double g : a.norms) EXPECT_GT(g, 0);
  // Post-scaling norms agree for the median task by construction.
  std::array<double, 3> w = {a.weights.edge, a.weights.depth, a.weights.normal};
  std::array<double, 3> scaled = {w[0] * a.norms[0], w[1] * a.norms[1], w[2] * a.norms[2]};
  EXPECT_NEAR(scaled[0], scaled[1], 1e-9 * scaled[0]);
  EXPECT_NEAR(scaled[0], scaled[2], 1e-9 * scaled[0]);
}

TEST_F(TrainerTest, ZeroLearningRatesLeaveParametersUnchanged) {
  ModelState m = tiny_model();
  ParamMap before = m.params;
  AdamConfig ac;
  ac.lr_bh = ac.lr_d = 0;
  Adam opt(ac);
  Batch s = syn_batch(), r = real_batch();
  StepRecord rec = train_step(m, opt, s, &r, {{1, 1, 10}, true, false, 0, false}, 1);
  EXPECT_EQ(m.params, before);
  EXPECT_TRUE(rec.adversarial);
  EXPECT_TRUE(std::isfinite(rec.total_bh));
  EXPECT_GT(rec.parts.edge, 0);
  EXPECT_GT(rec.parts.adv, 0);
  ASSERT_TRUE(rec.loss_d.has_value());
  EXPECT_TRUE(std::isfinite(*rec.loss_d));
}

TEST_F(TrainerTest, FreezeDisciplineAcrossStages) {
  ModelState m = tiny_model();
  Adam opt;
  StepOptions o{{1, 1, 10}, true, true, 0, false};
  for (int t = 1; t <= 3; ++t) {
    Batch s = syn_batch(t), r = real_batch(t);
    ModelState before = m;
    StepRecord rec;
    StageFeatures f = generator_stage(m, opt, s, &r, o, t, rec);
    EXPECT_TRUE(same_group(m, before, ParamGroup::discriminator));
    EXPECT_FALSE(same_group(m, before, ParamGroup::base));
    ModelState mid = m;
    discriminator_stage(m, opt, s, r, f, t, rec);
    EXPECT_TRUE(same_group(m, mid, ParamGroup::base));
    EXPECT_TRUE(same_group(m, mid, ParamGroup::heads));
    EXPECT_FALSE(same_group(m, mid, ParamGroup::discriminator));
  }
}

TEST_F(TrainerTest, RealBatchDoesNotReachTheBaseWithoutBifool) {
  Batch s = syn_batch();
  Batch r1 = real_batch(0), r2 = real_batch(1);
  Batch zero = r1;
  zero.inputs.fill(0.0f);
  auto stage1_delta = [&](const Batch& r, bool bifool) {
    ModelState m = tiny_model();
    ModelState before = m;
    Adam opt;
    StepRecord rec;
    generator_stage(m, opt, s, &r, {{1, 1, 10}, true, bifool, 0, false}, 1, rec);
    return delta(before, m);
  };
  ParamMap a = stage1_delta(r1, false);
  EXPECT_EQ(a, stage1_delta(r2, false));
  EXPECT_EQ(a, stage1_delta(zero, false));
  EXPECT_NE(stage1_delta(r1, true), stage1_delta(r2, true));
}

TEST_F(TrainerTest, SingleTaskLeavesOtherHeadsWithoutGradient) {
  ModelState m = tiny_model();
  ModelState before = m;
  Adam opt;
  Batch s = syn_batch();
  StepGradients g;
  StepRecord rec = train_step(m, opt, s, nullptr, {{1, 0, 0}, false, false, 0, false}, 1, &g);
  bool contour_grad = false;
  for (const auto& [name, t] : g.base_heads) {
    if (name.rfind("head.depth.", 0) == 0 || name.rfind("head.normal.", 0) == 0) {
      for (float v : t.values()) ASSERT_EQ(v, 0.0f) << name;
    }
    if (name.rfind("head.contour.", 0) == 0) contour_grad = true;
  }
  EXPECT_TRUE(contour_grad);
  EXPECT_TRUE(g.discriminator.empty());
  EXPECT_EQ(rec.grad_norm[1], 0.0);
  EXPECT_EQ(rec.grad_norm[2], 0.0);
  EXPECT_FALSE(rec.loss_d.has_value());
  for (const auto& [name, t] : m.params)
    if (name.rfind("head.depth.", 0) == 0 || name.rfind("head.normal.", 0) == 0 ||
        group_of(name) == ParamGroup::discriminator) {
      EXPECT_EQ(t, before.params.at(name)) << name;
    }
}

TEST_F(TrainerTest, OneStepIsDeterministic) {
  auto run = [&] {
    ModelState m = tiny_model();
    ModelState before = m;
    Adam opt;
    Batch s = syn_batch(), r = real_batch();
    train_step(m, opt, s, &r, {{1, 1, 10}, true, false, 0, false}, 1);
    return std::pair(delta(before, m), m.buffers);
  };
  EXPECT_EQ(run(), run());
}

TEST_F(TrainerTest, CachedFeaturesDifferOnlyInStageTwo) {
  auto run = [&](bool cache) {
    ModelState m = tiny_model();
    Adam opt;
    Batch s = syn_batch(), r = real_batch();
    StepRecord rec = train_step(m, opt, s, &r, {{1, 1, 10}, true, false, 0, cache}, 1);
    return std::pair(m, rec);
  };
  auto [a, ra] = run(false);
  auto [b, rb] = run(true);
  EXPECT_TRUE(same_group(a, b, ParamGroup::base));
  EXPECT_EQ(ra.total_bh, rb.total_bh);
  EXPECT_NE(*ra.loss_d, *rb.loss_d);
}

TEST_F(TrainerTest, NanAbortsWithNumericError) {
  ModelState m = tiny_model();
  m.params.begin()->second[0] = std::numeric_limits<float>::quiet_NaN();
  Adam opt;
  Batch s = syn_batch();
  EXPECT_THROW(train_step(m, opt, s, nullptr, {{1, 1, 10}, false, false, 0, false}, 1), NumericError);
}

TEST_F(TrainerTest, CheckpointCadence) {
  TrainConfig c = run_config("cadence");
  c.max_iterations = 3;
  c.checkpoint_every = 1;
  TrainResult r = train(c);
  ASSERT_EQ(r.checkpoints.size(), 3u);
  for (long long t = 1; t <= 3; ++t) EXPECT_TRUE(fs::exists(checkpoint_path(c.out_dir, t)));
  EXPECT_TRUE(fs::exists(r.final_checkpoint));
  auto log = read_train_log(c.out_dir / "train_log.jsonl");
  ASSERT_EQ(log.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(log[i].iteration, static_cast<long long>(i + 1));
  EXPECT_FALSE(log[0].adversarial);  // warm-up
  EXPECT_TRUE(log[1].adversarial);
  EXPECT_TRUE(fs::exists(c.out_dir / "train_log.csv"));
  auto ck = load_checkpoint(r.final_checkpoint);
  EXPECT_EQ(ck.train_state.at("iteration"), 3);
  EXPECT_TRUE(ck.optimizer.has_value());
}

TEST_F(TrainerTest, ResumeMatchesUninterruptedRun) {
  TrainConfig full = run_config("full");
  full.max_iterations = 4;
  full.checkpoint_every = 0;
  full.bifool = true;
  TrainResult a = train(full);

  TrainConfig part = run_config("part");
  part.max_iterations = 2;
  part.checkpoint_every = 2;
  part.bifool = true;
  train(part);
  TrainConfig rest = part;
  rest.max_iterations = 4;
  rest.resume = checkpoint_path(part.out_dir, 2);
  TrainResult b = train(rest);
  EXPECT_EQ(b.start_iteration, 2);
  ASSERT_EQ(b.records.size(), 2u);

  auto ma = load_checkpoint(a.final_checkpoint), mb = load_checkpoint(b.final_checkpoint);
  EXPECT_EQ(ma.model.params, mb.model.params);
  EXPECT_EQ(ma.model.buffers, mb.model.buffers);
  auto la = read_train_log(full.out_dir / "train_log.jsonl"), lb = read_train_log(part.out_dir / "train_log.jsonl");
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i].total_bh, lb[i].total_bh);
}

TEST_F(TrainerTest, AutoCalibrationIsRecorded) {
  TrainConfig c = run_config("calib");
  c.max_iterations = 1;
  c.adaptation = false;
  c.auto_calibrate = true;
  c.calibration_batches = 2;
  c.weights = {1, 0, 1};
  TrainResult r = train(c);
  ASSERT_TRUE(r.calibration.has_value());
  EXPECT_EQ(r.weights.depth, 0.0);
  EXPECT_GT(r.weights.edge, 0.0);
  auto ck = load_checkpoint(r.final_checkpoint);
  EXPECT_DOUBLE_EQ(ck.train_state["weights"]["edge"].get<double>(), r.weights.edge);
}

TEST_F(TrainerTest, ResumeRejectsOtherArchitecture) {
  TrainConfig c = run_config("arch");
  c.max_iterations = 1;
  c.adaptation = false;
  train(c);
  TrainConfig d = c;
  d.tap_layer = "conv4";
  d.max_iterations = 2;
  d.resume = c.out_dir / "final.synthfeat";
  EXPECT_THROW(train(d), ConfigError);
}
