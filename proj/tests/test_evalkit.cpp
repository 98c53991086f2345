#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "synthfeat/evalkit.hpp"
#include "test_support.hpp"

using namespace synthfeat;
using testing_support::TempDir;

namespace {

constexpr double kPi = 3.14159265358979323846;

/// 1 x 3 x 1 x N normals: gt along +z, pred tilted about x by the given angles.
std::pair<Tensor, Tensor> tilted(const std::vector<double>& degrees) {
  int n = static_cast<int>(degrees.size());
  Tensor pred(1, 3, 1, n), gt(1, 3, 1, n);
  for (int i = 0; i < n; ++i) {
    double a = degrees[static_cast<std::size_t>(i)] * kPi / 180.0;
    gt.at(0, 2, 0, i) = 1.0f;
    pred.at(0, 1, 0, i) = static_cast<float>(std::sin(a));
    pred.at(0, 2, 0, i) = static_cast<float>(std::cos(a));
  }
  return {pred, gt};
}

Mask all_valid(int n) { return Mask({1, 1, 1, n}, 1); }

FeatureMatrix random_features(int rows, int cols, std::uint64_t seed, double shift = 0) {
  Rng rng(seed);
  FeatureMatrix x(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) x(i, j) = static_cast<float>(rng.normal() + shift);
  return x;
}

std::vector<std::string> numbered(int n, const std::string& prefix) {
  std::vector<std::string> v;
  for (int i = 0; i < n; ++i) v.push_back(prefix + std::to_string(i));
  return v;
}

}  // namespace

TEST(AngularStatsTest, PerfectPrediction) {
  auto [pred, gt] = tilted({0, 0, 0});
  AngularStats s = angular_error_stats(gt, gt, all_valid(3));
  EXPECT_EQ(s.mean_deg, 0);
  EXPECT_EQ(s.median_deg, 0);
  EXPECT_EQ(s.rmse_deg, 0);
  for (double p : s.pct_within) EXPECT_EQ(p, 100);
}

TEST(AngularStatsTest, TwoPixelsTenAndThirty) {
  auto [pred, gt] = tilted({10, 30});
  AngularStats s = angular_error_stats(pred, gt, all_valid(2));
  EXPECT_NEAR(s.mean_deg, 20, 1e-4);
  EXPECT_NEAR(s.median_deg, 20, 1e-4);
  EXPECT_NEAR(s.rmse_deg, std::sqrt(500.0), 1e-4);
  EXPECT_EQ(s.pct_within[0], 50);
  EXPECT_EQ(s.pct_within[1], 50);
  // the threshold is inclusive: exactly 30 counts
  AngularAccumulator acc;
  acc.add_error(10);
  acc.add_error(30);
  EXPECT_EQ(acc.stats().pct_within[2], 100);
}

TEST(AngularStatsTest, PerpendicularAndMasking) {
  auto [pred, gt] = tilted({90, 90, 5});
  Mask v = all_valid(3);
  v.at(0, 0, 0, 2) = 0;
  AngularStats s = angular_error_stats(pred, gt, v);
  EXPECT_EQ(s.pixels, 2u);
  EXPECT_NEAR(s.mean_deg, 90, 1e-4);
  for (double p : s.pct_within) EXPECT_EQ(p, 0);
  EXPECT_THROW(angular_error_stats(pred, gt, Mask({1, 1, 1, 3}, 0)), DataError);
}

TEST(AngularStatsTest, ClampsDotProductsOutsideUnitRange) {
  Tensor a(1, 3, 1, 1), b(1, 3, 1, 1);
  a.at(0, 2, 0, 0) = 1.0000001f;
  b.at(0, 2, 0, 0) = 1.0000001f;
  AngularStats s = angular_error_stats(a, b, all_valid(1));
  EXPECT_EQ(s.mean_deg, 0);
  EXPECT_FALSE(std::isnan(s.rmse_deg));
}

TEST(AngularStatsTest, ConstantNormalFitBeatsOrMatchesTheMean) {
  auto [pred, gt] = tilted({0, 0, 0, 80});
  Tensor mixed = gt;
  mixed.at(0, 1, 0, 3) = pred.at(0, 1, 0, 3);
  mixed.at(0, 2, 0, 3) = pred.at(0, 2, 0, 3);
  Mask v = all_valid(4);
  auto c = best_constant_normal({&mixed}, {&v});
  // the angular median of three +z and one outlier is +z
  EXPECT_NEAR(c[2], 1.0, 1e-3);
}

TEST(Retrieval, ExcludesTheQueryAndRanksADuplicateFirst) {
  FeatureMatrix corpus = random_features(6, 5, 1);
  std::vector<std::string> ids = numbered(6, "c");
  FeatureMatrix q = corpus.topRows(1);
  auto own = nearest_neighbors(q, {"c0"}, corpus, ids, 3);
  ASSERT_EQ(own.size(), 1u);
  for (const auto& n : own[0].neighbors) EXPECT_NE(n.id, "c0");
  auto dup = nearest_neighbors(q, {"query"}, corpus, ids, 3);
  EXPECT_EQ(dup[0].neighbors[0].id, "c0");
  EXPECT_NEAR(dup[0].neighbors[0].distance, 0.0, 1e-9);
  for (std::size_t i = 1; i < dup[0].neighbors.size(); ++i)
    EXPECT_LE(dup[0].neighbors[i - 1].distance, dup[0].neighbors[i].distance);
}

TEST(Retrieval, InvariantUnderPositiveScaling) {
  FeatureMatrix corpus = random_features(20, 8, 2), q = random_features(4, 8, 3);
  auto a = nearest_neighbors(q, numbered(4, "q"), corpus, numbered(20, "c"), 5);
  FeatureMatrix cs = corpus * 7.5f, qs = q * 0.01f;
  auto b = nearest_neighbors(qs, numbered(4, "q"), cs, numbered(20, "c"), 5);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(a[i].neighbors[j].id, b[i].neighbors[j].id);
}

TEST(Retrieval, RejectsBadK) {
  FeatureMatrix corpus = random_features(4, 3, 4);
  EXPECT_THROW(nearest_neighbors(corpus.topRows(1), {"q"}, corpus, numbered(4, "c"), 4), ConfigError);
  EXPECT_THROW(nearest_neighbors(corpus.topRows(1), {"q"}, corpus, numbered(4, "c"), 0), ConfigError);
}

TEST(Probe, SeparableLabelsReachFullAccuracy) {
  FeatureMatrix x = random_features(200, 6, 5);
  std::vector<int> y;
  for (int i = 0; i < x.rows(); ++i) {
    y.push_back(i % 2);
    x(i, 2) = (i % 2 ? 1.0f : -1.0f) * (0.5f + std::abs(x(i, 2)));
  }
  ProbeResult r = probe_features(x, y);
  EXPECT_GE(r.accuracy, 0.95);
  EXPECT_EQ(r.n_train + r.n_test, 200);
}

TEST(Probe, ShuffledLabelsStayNearChance) {
  FeatureMatrix x = random_features(800, 8, 6);
  std::vector<int> y;
  Rng rng(9);
  for (int i = 0; i < x.rows(); ++i) y.push_back(rng.uniform_int(0, 3));
  ProbeConfig cfg;
  cfg.epochs = 40;
  ProbeResult r = probe_features(x, y, cfg);
  EXPECT_NEAR(r.accuracy, 0.25, 0.08);
}

TEST(Probe, IsDeterministicAndRejectsSingleClass) {
  FeatureMatrix x = random_features(60, 4, 7);
  std::vector<int> y;
  for (int i = 0; i < 60; ++i) y.push_back(i % 3);
  ProbeConfig cfg;
  cfg.epochs = 20;
  EXPECT_EQ(probe_features(x, y, cfg).accuracy, probe_features(x, y, cfg).accuracy);
  EXPECT_THROW(probe_features(x, std::vector<int>(60, 2), cfg), DataError);
}

TEST(Probe, StratifiedSplitKeepsClassProportions) {
  std::vector<int> y;
  for (int i = 0; i < 100; ++i) y.push_back(i < 80 ? 0 : 1);
  auto [train, test] = stratified_split(y, 0.2, 0);
  EXPECT_EQ(train.size(), 80u);
  EXPECT_EQ(test.size(), 20u);
  int ones = 0;
  for (int i : test) ones += y[static_cast<std::size_t>(i)];
  EXPECT_EQ(ones, 4);
}

TEST(Probe, GridTargetsRoughlyEqualDimensions) {
  EXPECT_EQ(probe_grid(64, 8, 1024), 4);
  EXPECT_EQ(probe_grid(16, 32, 1024), 8);
  EXPECT_EQ(probe_grid(512, 1, 1024), 1);
  EXPECT_EQ(probe_grid(4, 2, 1024), 2);
}

TEST(Confusion, IdenticalDistributionsAreConfused) {
  FeatureMatrix a = random_features(300, 6, 10), b = random_features(300, 6, 11);
  ProbeConfig cfg;
  cfg.epochs = 30;
  ConfusionResult r = domain_confusion(a, b, cfg);
  EXPECT_NEAR(r.accuracy, 0.5, 0.1);
  EXPECT_EQ(r.n_test, 120);
}

TEST(Confusion, DisjointConstantsAreSeparated) {
  FeatureMatrix a = FeatureMatrix::Constant(250, 4, 1.0f), b = FeatureMatrix::Constant(250, 4, -1.0f);
  ProbeConfig cfg;
  cfg.epochs = 5;
  EXPECT_EQ(domain_confusion(a, b, cfg).accuracy, 1.0);
}

TEST(Confusion, Preconditions) {
  EXPECT_THROW(domain_confusion(random_features(150, 3, 1), random_features(300, 3, 2)), DataError);
  EXPECT_THROW(domain_confusion(random_features(200, 3, 1), random_features(2100, 3, 2)), DataError);
  EXPECT_THROW(domain_confusion(random_features(200, 3, 1), random_features(200, 4, 2)), ShapeError);
}

TEST(Features, ModelAndBackboneAgreeAndRejectUnknownLayers) {
  ModelState m = init_model(build_default_alexnet(64, 16), 3);
  Rng rng(1);
  Tensor x(5, 3, 64, 64);
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1, 1));
  FeatureFn fm = model_features(m);
  FeatureFn fb = backbone_feature_fn(convert_fc(absorb_batchnorm(m)));
  FeatureMatrix a = extract_features(fm, x, "conv5", 0, 1024, 2), b = extract_features(fb, x, "conv5", 0, 1024, 2);
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_EQ(extract_features(fm, x, "conv5", 2).cols(), a.cols() / 16);
  EXPECT_THROW(fm(x, "conv9"), ShapeError);
  EXPECT_THROW(fb(x, "conv9"), ShapeError);
}

TEST(Datasets, LabeledShapesLoadWithIds) {
  TempDir dir("evalkit");
  write_dataset(dir.path / "shapes", 3, 8, 32, 32, SceneProfile::shapes);
  ImageSet s = load_labeled(dir.path / "shapes");
  EXPECT_EQ(s.images.n(), 8);
  ASSERT_EQ(s.labels.size(), 8u);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(s.labels[static_cast<std::size_t>(i)], i % kShapeClasses);
  EXPECT_EQ(s.ids.front(), "000000");
  EXPECT_THROW(load_image_set(dir.path / "shapes", 0, 64), DataError);
  write_dataset(dir.path / "plain", 3, 2, 32, 32, SceneProfile::synthetic);
  EXPECT_THROW(load_labeled(dir.path / "plain"), DataError);
}

TEST(Datasets, EvaluateNormalsScoresModelAndConstant) {
  TempDir dir("evalkit_normals");
  write_dataset(dir.path / "syn", 4, 6, 64, 64, SceneProfile::synthetic);
  ModelState m = init_model(build_default_alexnet(64, 16), 1);
  AngularStats s = evaluate_normals(m, dir.path / "syn", 0, 4);
  EXPECT_GT(s.pixels, 0u);
  EXPECT_LE(s.pct_within[0], s.pct_within[1]);
  auto c = fit_constant_normal(dir.path / "syn");
  AngularStats k = evaluate_normals(m, dir.path / "syn", 0, 4, c);
  EXPECT_EQ(k.pixels, s.pixels);
  EXPECT_NEAR(c[0] * c[0] + c[1] * c[1] + c[2] * c[2], 1.0, 1e-9);
}

TEST(Datasets, GrayscaleInputsReplicateOneSourceChannel) {
  Rng rng(9);
  Tensor x(12, 3, 4, 5);
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1, 1));
  Tensor g = grayscale_inputs(x, 3), again = grayscale_inputs(x, 3);
  EXPECT_EQ(g, again);
  const std::size_t hw = 20;
  std::set<int> picked;
  for (int n = 0; n < x.n(); ++n) {
    auto src = x.item(n);
    auto dst = g.item(n);
    int keep = -1;
    for (int c = 0; c < 3; ++c)
      if (std::equal(dst.begin(), dst.begin() + hw, src.begin() + c * hw)) keep = c;
    ASSERT_GE(keep, 0) << n;
    picked.insert(keep);
    for (std::size_t c = 1; c < 3; ++c) EXPECT_TRUE(std::equal(dst.begin(), dst.begin() + hw, dst.begin() + c * hw));
  }
  EXPECT_GT(picked.size(), 1u);
  // an offset batch sees the same per-image choice as the full batch
  Tensor tail(4, 3, 4, 5);
  for (int i = 0; i < 4; ++i) std::ranges::copy(x.item(8 + i), tail.item(i).begin());
  Tensor gt = grayscale_inputs(tail, 3, 8);
  for (int i = 0; i < 4; ++i) EXPECT_TRUE(std::ranges::equal(gt.item(i), g.item(8 + i)));
  EXPECT_THROW(grayscale_inputs(Tensor(1, 1, 2, 2)), ShapeError);
}
