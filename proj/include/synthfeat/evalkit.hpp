#pragma once

// Evaluation: angular error of predicted normals, cosine nearest-neighbour
// retrieval, frozen-feature linear probes and domain-confusion probes.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "synthfeat/dataio.hpp"
#include "synthfeat/export.hpp"
#include "synthfeat/network.hpp"

namespace synthfeat {

// ---------------------------------------------------------------------------
// Angular error

inline constexpr std::array<double, 3> kAngleThresholds{11.25, 22.5, 30.0};

struct AngularStats {
  double mean_deg = 0, median_deg = 0, rmse_deg = 0;
  std::array<double, 3> pct_within{};  ///< percent of pixels with error <= threshold
  std::size_t pixels = 0;
};

inline void to_json(nlohmann::json& j, const AngularStats& s) {
  j = {{"mean_deg", s.mean_deg},
       {"median_deg", s.median_deg},
       {"rmse_deg", s.rmse_deg},
       {"pct_within", {{"11.25", s.pct_within[0]}, {"22.5", s.pct_within[1]}, {"30", s.pct_within[2]}}},
       {"pixels", s.pixels}};
}

/// Angle between two unit vectors in degrees, with the dot product clamped.
inline double angle_deg(double dot) {
  return std::acos(std::clamp(dot, -1.0, 1.0)) * (180.0 / 3.14159265358979323846);
}

/// Collects per-pixel errors across a whole evaluation set.
class AngularAccumulator {
 public:
  void add_error(double deg) { errors_.push_back(deg); }

  /// pred, gt: B x 3 x H x W unit normals; valid: B x 1 x H x W.
  void add(const Tensor& pred, const Tensor& gt, const Mask& valid) {
    if (pred.shape() != gt.shape() || pred.rank() != 4 || pred.c() != 3)
      throw ShapeError("angular error: prediction " + shape_string(pred.shape()) + " vs ground truth " +
                       shape_string(gt.shape()));
    if (valid.rank() != 4 || valid.n() != pred.n() || valid.c() != 1 || valid.h() != pred.h() || valid.w() != pred.w())
      throw ShapeError("angular error: valid mask " + shape_string(valid.shape()));
    const std::size_t hw = static_cast<std::size_t>(pred.h()) * pred.w();
    for (int n = 0; n < pred.n(); ++n) {
      auto p = pred.item(n), g = gt.item(n);
      auto v = valid.item(n);
      for (std::size_t i = 0; i < hw; ++i) {
        if (!v[i]) continue;
        double dot = 0;
        for (std::size_t c = 0; c < 3; ++c) dot += static_cast<double>(p[c * hw + i]) * g[c * hw + i];
        errors_.push_back(angle_deg(dot));
      }
    }
  }

  std::size_t size() const { return errors_.size(); }

  AngularStats stats() const {
    if (errors_.empty()) throw DataError("angular error: no valid pixels");
    AngularStats s;
    s.pixels = errors_.size();
    std::vector<double> e = errors_;
    std::sort(e.begin(), e.end());
    double sum = 0, sq = 0;
    for (double v : e) {
      sum += v;
      sq += v * v;
    }
    const double n = static_cast<double>(e.size());
    s.mean_deg = sum / n;
    s.rmse_deg = std::sqrt(sq / n);
    std::size_t mid = e.size() / 2;
    s.median_deg = e.size() % 2 ? e[mid] : 0.5 * (e[mid - 1] + e[mid]);
    for (std::size_t t = 0; t < kAngleThresholds.size(); ++t) {
      auto within = std::upper_bound(e.begin(), e.end(), kAngleThresholds[t]) - e.begin();
      s.pct_within[t] = 100.0 * static_cast<double>(within) / n;
    }
    return s;
  }

 private:
  std::vector<double> errors_;
};

inline AngularStats angular_error_stats(const Tensor& pred, const Tensor& gt, const Mask& valid) {
  AngularAccumulator acc;
  acc.add(pred, gt, valid);
  return acc.stats();
}

/// Single normal minimising the mean angular error over the valid pixels of
/// `gt`: starts at the normalised mean and refines with reweighted averages
/// (weights 1/angle), keeping the best candidate seen.
inline std::array<double, 3> best_constant_normal(const std::vector<const Tensor*>& gts,
                                                  const std::vector<const Mask*>& valids, int iterations = 30) {
  std::vector<std::array<double, 3>> v;
  for (std::size_t k = 0; k < gts.size(); ++k) {
    const Tensor& g = *gts[k];
    const Mask& m = *valids[k];
    const std::size_t hw = static_cast<std::size_t>(g.h()) * g.w();
    for (int n = 0; n < g.n(); ++n) {
      auto gi = g.item(n);
      auto mi = m.item(n);
      for (std::size_t i = 0; i < hw; ++i)
        if (mi[i]) v.push_back({gi[i], gi[hw + i], gi[2 * hw + i]});
    }
  }
  if (v.empty()) throw DataError("constant normal fit: no valid pixels");
  auto normalise = [](std::array<double, 3> a) {
    double l = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    if (l == 0) return std::array<double, 3>{0, 0, 1};
    return std::array<double, 3>{a[0] / l, a[1] / l, a[2] / l};
  };
  auto mean_angle = [&](const std::array<double, 3>& c) {
    double s = 0;
    for (const auto& a : v) s += angle_deg(a[0] * c[0] + a[1] * c[1] + a[2] * c[2]);
    return s / static_cast<double>(v.size());
  };
  std::array<double, 3> c{0, 0, 0};
  for (const auto& a : v)
    for (int i = 0; i < 3; ++i) c[static_cast<std::size_t>(i)] += a[static_cast<std::size_t>(i)];
  c = normalise(c);
  std::array<double, 3> best = c;
  double best_err = mean_angle(c);
  for (int it = 0; it < iterations; ++it) {
    std::array<double, 3> next{0, 0, 0};
    for (const auto& a : v) {
      double w = 1.0 / std::max(angle_deg(a[0] * c[0] + a[1] * c[1] + a[2] * c[2]), 1e-3);
      for (std::size_t i = 0; i < 3; ++i) next[i] += w * a[i];
    }
    c = normalise(next);
    double e = mean_angle(c);
    if (e < best_err) {
      best_err = e;
      best = c;
    }
  }
  return best;
}

/// Pretraining input encoding applied to an already encoded batch: item i
/// keeps one channel, picked from (seed, i), replicated three times.
inline Tensor grayscale_inputs(const Tensor& images, std::uint64_t seed = 0, int first_index = 0) {
  if (images.rank() != 4 || images.c() != 3) throw ShapeError("grayscale inputs need N x 3 x H x W");
  Tensor out = images;
  const std::size_t hw = static_cast<std::size_t>(images.h()) * images.w();
  for (int n = 0; n < images.n(); ++n) {
    Rng rng(derive_seed(seed, 0x4752u, static_cast<std::uint64_t>(first_index + n)));
    const std::size_t keep = static_cast<std::size_t>(rng.uniform_int(0, 2));
    auto src = images.item(n);
    auto dst = out.item(n);
    for (std::size_t c = 0; c < 3; ++c)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(keep * hw), hw, dst.begin() + static_cast<std::ptrdiff_t>(c * hw));
  }
  return out;
}

/// Runs the model in eval mode over a synthetic dataset and scores its normal
/// head. Batches follow dataset order.
inline AngularStats evaluate_normals(const ModelState& m, const fs::path& dir, int limit = 0, int batch_size = 16,
                                     std::optional<std::array<double, 3>> constant = std::nullopt,
                                     bool grayscale = false) {
  const int res = m.arch.input_resolution;
  BatchStream s(dir, batch_size, 0, Domain::synthetic, {false, res, res, limit});
  AngularAccumulator acc;
  for (int b = 0; b < s.batches_per_epoch(); ++b) {
    std::vector<TaskTargets> targets;
    std::vector<Image<float>> imgs;
    for (int i = b * batch_size; i < std::min(s.size(), (b + 1) * batch_size); ++i) {
      imgs.push_back(s.image(i));
      targets.push_back(s.targets(i));
    }
    TargetTensors t = stack_targets(targets);
    Tensor pred;
    if (constant) {
      pred = Tensor(t.normal.shape());
      const std::size_t hw = static_cast<std::size_t>(pred.h()) * pred.w();
      for (int n = 0; n < pred.n(); ++n) {
        auto p = pred.item(n);
        for (std::size_t c = 0; c < 3; ++c)
          std::fill(p.begin() + static_cast<std::ptrdiff_t>(c * hw), p.begin() + static_cast<std::ptrdiff_t>((c + 1) * hw),
                    static_cast<float>((*constant)[c]));
      }
    } else {
      Tensor x = images_to_tensor(imgs);
      if (grayscale) x = grayscale_inputs(x, 0, b * batch_size);
      BaseOutput base = forward_base(m, x);
      pred = forward_heads(m, base).normal;
    }
    acc.add(pred, t.normal, t.valid);
  }
  return acc.stats();
}

/// Best constant normal over every valid pixel of a synthetic dataset.
inline std::array<double, 3> fit_constant_normal(const fs::path& dir, int limit = 0) {
  BatchStream s(dir, 1, 0, Domain::synthetic, {false, 0, 0, limit});
  std::vector<TaskTargets> all;
  for (int i = 0; i < s.size(); ++i) all.push_back(s.targets(i));
  TargetTensors t = stack_targets(all);
  return best_constant_normal({&t.normal}, {&t.valid});
}

// ---------------------------------------------------------------------------
// Features

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Maps a batch of images to the feature map of a named layer.
using FeatureFn = std::function<Tensor(const Tensor& images, const std::string& layer)>;

inline FeatureFn model_features(ModelState m) {
  return [m = std::move(m)](const Tensor& images, const std::string& layer) {
    std::string name = layer == "conv6" ? "fc6" : layer == "conv7" ? "fc7" : layer;
    if (trunk_index(m.arch, name) < 0) throw ShapeError("unknown layer '" + layer + "'");
    return forward_base(m, images).layer(name);
  };
}

inline FeatureFn backbone_feature_fn(Backbone b) {
  return [b = std::move(b)](const Tensor& images, const std::string& layer) {
    if (b.index(layer) < 0) throw ShapeError("unknown layer '" + layer + "'");
    return backbone_features(b, images, layer);
  };
}

/// Side of the square grid a C-channel map is resized to so that C*g*g is
/// close to `target_dims`; never larger than the map itself.
inline int probe_grid(int channels, int h, int target_dims) {
  int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(target_dims) / channels)));
  return std::clamp(g, 1, std::max(1, h));
}

/// Flattened features, one row per image. grid > 0 resizes each map
/// bilinearly to grid x grid first; grid < 0 picks it from target_dims.
inline FeatureMatrix extract_features(const FeatureFn& fn, const Tensor& images, const std::string& layer, int grid = 0,
                                      int target_dims = 1024, int chunk = 32) {
  if (images.rank() != 4 || images.n() == 0) throw DataError("no images to extract features from");
  FeatureMatrix out;
  for (int start = 0; start < images.n(); start += chunk) {
    int count = std::min(chunk, images.n() - start);
    Tensor batch(count, images.c(), images.h(), images.w());
    for (int i = 0; i < count; ++i) std::ranges::copy(images.item(start + i), batch.item(i).begin());
    Tensor f = fn(batch, layer);
    if (grid < 0) grid = probe_grid(f.c(), f.h(), target_dims);
    if (grid > 0 && (f.h() != grid || f.w() != grid)) f = nn::resize_bilinear(f, grid, grid);
    const int d = static_cast<int>(f.size() / static_cast<std::size_t>(count));
    if (out.size() == 0) out.resize(images.n(), d);
    if (out.cols() != d) throw ShapeError("feature size changed between chunks");
    for (int i = 0; i < count; ++i) std::ranges::copy(f.item(i), out.row(start + i).data());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Retrieval

struct Neighbor {
  std::string id;
  double distance = 0;  ///< 1 - cosine similarity
};

struct RetrievalResult {
  std::string query_id;
  std::string layer;
  std::vector<Neighbor> neighbors;
};

inline void to_json(nlohmann::json& j, const RetrievalResult& r) {
  j = {{"query", r.query_id}, {"layer", r.layer}, {"neighbors", nlohmann::json::array()}};
  for (const auto& n : r.neighbors) j["neighbors"].push_back({{"id", n.id}, {"distance", n.distance}});
}

/// Cosine k-NN of every query row among the corpus rows. A corpus entry with
/// the query's own id is skipped. Ties keep corpus order. Zero vectors have
/// similarity 0 to everything.
inline std::vector<RetrievalResult> nearest_neighbors(const FeatureMatrix& queries, const std::vector<std::string>& query_ids,
                                                      const FeatureMatrix& corpus, const std::vector<std::string>& corpus_ids,
                                                      int k, const std::string& layer = {}) {
  if (static_cast<std::size_t>(queries.rows()) != query_ids.size() ||
      static_cast<std::size_t>(corpus.rows()) != corpus_ids.size())
    throw ShapeError("retrieval: ids do not match feature rows");
  if (queries.rows() > 0 && queries.cols() != corpus.cols()) throw ShapeError("retrieval: feature sizes differ");
  if (k < 1 || k >= corpus.rows())
    throw ConfigError("retrieval: k must be in [1, corpus size) but is " + std::to_string(k) + " for " +
                      std::to_string(corpus.rows()) + " items");
  auto unit_rows = [](const FeatureMatrix& x) {
    Eigen::MatrixXd u = x.cast<double>();
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      double n = u.row(i).norm();
      if (n > 0) u.row(i) /= n;
    }
    return u;
  };
  Eigen::MatrixXd q = unit_rows(queries), c = unit_rows(corpus);
  Eigen::MatrixXd sim = q * c.transpose();
  std::vector<RetrievalResult> out;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    std::vector<int> order;
    for (int j = 0; j < c.rows(); ++j)
      if (corpus_ids[static_cast<std::size_t>(j)] != query_ids[static_cast<std::size_t>(i)]) order.push_back(j);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sim(i, a) > sim(i, b); });
    RetrievalResult r{query_ids[static_cast<std::size_t>(i)], layer, {}};
    for (int j = 0; j < std::min<int>(k, static_cast<int>(order.size())); ++j) {
      int idx = order[static_cast<std::size_t>(j)];
      r.neighbors.push_back({corpus_ids[static_cast<std::size_t>(idx)], std::max(0.0, 1.0 - sim(i, idx))});
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Fraction of queries whose first neighbour carries the query's label.
inline double top1_same_label_rate(const std::vector<RetrievalResult>& results,
                                   const std::function<int(const std::string&)>& label_of) {
  if (results.empty()) throw DataError("no retrieval results");
  int hits = 0;
  for (const auto& r : results)
    if (!r.neighbors.empty() && label_of(r.neighbors.front().id) == label_of(r.query_id)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

// ---------------------------------------------------------------------------
// Logistic probes

struct ProbeConfig {
  double l2 = 1e-4;
  int epochs = 200;
  double lr = 0.01;
  std::uint64_t seed = 0;
  int batch_size = 32;
  double test_fraction = 0.2;
  int target_dims = 1024;  ///< flattened size each layer is resized towards
};

/// Deterministic per-class split: the first round(test_fraction * n_c) items
/// of each shuffled class go to the test side.
inline std::pair<std::vector<int>, std::vector<int>> stratified_split(const std::vector<int>& labels, double test_fraction,
                                                                      std::uint64_t seed) {
  int classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int> train, test;
  for (int c = 0; c < classes; ++c) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) idx.push_back(static_cast<int>(i));
    Rng rng(derive_seed(seed, 0x5350u, static_cast<std::uint64_t>(c)));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.next() % i)]);
    auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(idx.size())));
    test.insert(test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

/// Multinomial logistic regression on standardised features, trained with
/// minibatch SGD and L2 weight decay.
class SoftmaxProbe {
 public:
  void fit(const Eigen::MatrixXd& x, const std::vector<int>& y, int classes, const ProbeConfig& cfg) {
    const Eigen::Index n = x.rows(), d = x.cols();
    mean_ = x.colwise().mean();
    scale_ = ((x.rowwise() - mean_).array().square().colwise().sum() / static_cast<double>(n)).sqrt();
    for (Eigen::Index j = 0; j < d; ++j)
      if (!(scale_(j) > 1e-12)) scale_(j) = 1.0;
    Eigen::MatrixXd z = standardise(x);
    w_ = Eigen::MatrixXd::Zero(d, classes);
    b_ = Eigen::RowVectorXd::Zero(classes);
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, 0x4c50u));
    for (int e = 0; e < cfg.epochs; ++e) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.next() % i)]);
      for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
        Eigen::Index m = std::min<Eigen::Index>(cfg.batch_size, n - start);
        Eigen::MatrixXd xb(m, d);
        for (Eigen::Index r = 0; r < m; ++r) xb.row(r) = z.row(order[static_cast<std::size_t>(start + r)]);
        Eigen::MatrixXd p = softmax(xb);
        for (Eigen::Index r = 0; r < m; ++r) p(r, y[static_cast<std::size_t>(order[static_cast<std::size_t>(start + r)])]) -= 1.0;
        p /= static_cast<double>(m);
        w_ -= cfg.lr * (xb.transpose() * p + cfg.l2 * w_);
        b_ -= cfg.lr * p.colwise().sum();
      }
    }
  }

  std::vector<int> predict(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd s = standardise(x) * w_;
    s.rowwise() += b_;
    std::vector<int> out;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      Eigen::Index arg;
      s.row(i).maxCoeff(&arg);
      out.push_back(static_cast<int>(arg));
    }
    return out;
  }

 private:
  Eigen::MatrixXd standardise(const Eigen::MatrixXd& x) const {
    return (x.rowwise() - mean_).array().rowwise() / scale_.array();
  }
  Eigen::MatrixXd softmax(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd s = x * w_;
    s.rowwise() += b_;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      s.row(i).array() -= s.row(i).maxCoeff();
      s.row(i) = s.row(i).array().exp();
      s.row(i) /= s.row(i).sum();
    }
    return s;
  }

  Eigen::RowVectorXd mean_, scale_;
  Eigen::MatrixXd w_;
  Eigen::RowVectorXd b_;
};

struct ProbeResult {
  std::string layer;
  double accuracy = 0;        ///< held-out top-1
  double train_accuracy = 0;
  int classes = 0, n_train = 0, n_test = 0, dims = 0;
};

inline void to_json(nlohmann::json& j, const ProbeResult& r) {
  j = {{"layer", r.layer},     {"accuracy", r.accuracy}, {"train_accuracy", r.train_accuracy},
       {"classes", r.classes}, {"n_train", r.n_train},   {"n_test", r.n_test},
       {"dims", r.dims}};
}

namespace detail {

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  int hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline Eigen::MatrixXd rows_of(const FeatureMatrix& x, const std::vector<int>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]).cast<double>();
  return out;
}

inline std::vector<int> pick(const std::vector<int>& v, const std::vector<int>& idx) {
  std::vector<int> out;
  for (int i : idx) out.push_back(v[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace detail

/// Trains and scores a probe on precomputed feature rows.
inline ProbeResult probe_features(const FeatureMatrix& x, const std::vector<int>& labels, const ProbeConfig& cfg = {}) {
  if (static_cast<std::size_t>(x.rows()) != labels.size()) throw DataError("probe: labels do not match feature rows");
  for (int l : labels)
    if (l < 0) throw DataError("probe: negative label");
  int classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int> present(static_cast<std::size_t>(std::max(classes, 0)), 0);
  for (int l : labels) present[static_cast<std::size_t>(l)] = 1;
  if (std::accumulate(present.begin(), present.end(), 0) < 2) throw DataError("probe: dataset has a single class");
  auto [train, test] = stratified_split(labels, cfg.test_fraction, cfg.seed);
  if (train.empty() || test.empty()) throw DataError("probe: split leaves an empty side");
  Eigen::MatrixXd xtr = detail::rows_of(x, train), xte = detail::rows_of(x, test);
  std::vector<int> ytr = detail::pick(labels, train), yte = detail::pick(labels, test);
  SoftmaxProbe p;
  p.fit(xtr, ytr, classes, cfg);
  ProbeResult r;
  r.accuracy = detail::accuracy(p.predict(xte), yte);
  r.train_accuracy = detail::accuracy(p.predict(xtr), ytr);
  r.classes = classes;
  r.n_train = static_cast<int>(train.size());
  r.n_test = static_cast<int>(test.size());
  r.dims = static_cast<int>(x.cols());
  return r;
}

struct ImageSet {
  Tensor images;
  std::vector<std::string> ids;  ///< file stems
  std::vector<fs::path> paths;
  std::vector<int> labels;       ///< empty unless the dataset is labelled
};

/// Up to `limit` images of a dataset directory in listing order, without the
/// grayscale trick. expected_res > 0 rejects other resolutions.
inline ImageSet load_image_set(const fs::path& dir, int limit = 0, int expected_res = 0) {
  auto files = list_images(dir);
  if (files.empty()) throw DataError("no images in " + dir.string());
  if (limit > 0 && files.size() > static_cast<std::size_t>(limit)) files.resize(static_cast<std::size_t>(limit));
  ImageSet out;
  std::vector<Image<float>> imgs;
  for (const auto& f : files) {
    Image<float> img;
    try {
      img = io::read_rgb(f);
    } catch (const IoError& e) {
      throw DataError(e.what());
    }
    int eh = expected_res > 0 ? expected_res : imgs.empty() ? img.height : imgs.front().height;
    int ew = expected_res > 0 ? expected_res : imgs.empty() ? img.width : imgs.front().width;
    if (img.height != eh || img.width != ew)
      throw DataError("resolution mismatch at " + f.string() + ": " + std::to_string(img.height) + "x" +
                      std::to_string(img.width) + " vs " + std::to_string(eh) + "x" + std::to_string(ew));
    imgs.push_back(std::move(img));
    out.ids.push_back(f.stem().string());
    out.paths.push_back(f);
  }
  out.images = images_to_tensor(imgs);
  return out;
}

/// As load_image_set, plus the shape-class labels from meta.json.
inline ImageSet load_labeled(const fs::path& dir, int limit = 0, int expected_res = 0) {
  auto meta = read_meta(dir);
  if (!meta || meta->labels.empty()) throw DataError(dir.string() + " carries no class labels");
  ImageSet out = load_image_set(dir, limit, expected_res);
  if (meta->labels.size() < out.ids.size())
    throw DataError(dir.string() + ": " + std::to_string(out.ids.size()) + " images but " +
                    std::to_string(meta->labels.size()) + " labels");
  out.labels.assign(meta->labels.begin(), meta->labels.begin() + static_cast<std::ptrdiff_t>(out.ids.size()));
  return out;
}

/// Linear probe on a frozen layer: resize each map towards target_dims,
/// flatten, fit on the training split, score the held-out split.
inline ProbeResult linear_probe(const FeatureFn& fn, const std::string& layer, const Tensor& images,
                                const std::vector<int>& labels, const ProbeConfig& cfg = {}) {
  ProbeResult r = probe_features(extract_features(fn, images, layer, -1, cfg.target_dims), labels, cfg);
  r.layer = layer;
  return r;
}

// ---------------------------------------------------------------------------
// Domain confusion

inline constexpr int kMinConfusionSamples = 200;
inline constexpr double kMaxDomainImbalance = 10.0;

struct ConfusionResult {
  double accuracy = 0;  ///< held-out; 0.5 means the domains are indistinguishable
  int n_syn = 0, n_real = 0, n_train = 0, n_test = 0, dims = 0;
};

inline void to_json(nlohmann::json& j, const ConfusionResult& r) {
  j = {{"accuracy", r.accuracy}, {"n_syn", r.n_syn},   {"n_real", r.n_real},
       {"n_train", r.n_train},   {"n_test", r.n_test}, {"dims", r.dims}};
}

/// Trains a fresh logistic probe to tell synthetic (label 0) from real
/// (label 1) feature rows on an 80/20 split.
inline ConfusionResult domain_confusion(const FeatureMatrix& syn, const FeatureMatrix& real, ProbeConfig cfg = {},
                                        int min_per_domain = kMinConfusionSamples) {
  if (syn.cols() != real.cols()) throw ShapeError("domain confusion: feature sizes differ");
  if (syn.rows() < min_per_domain || real.rows() < min_per_domain)
    throw DataError("domain confusion needs at least " + std::to_string(min_per_domain) + " samples per domain, got " +
                    std::to_string(syn.rows()) + " synthetic and " + std::to_string(real.rows()) + " real");
  double big = static_cast<double>(std::max(syn.rows(), real.rows()));
  double small = static_cast<double>(std::min(syn.rows(), real.rows()));
  if (small == 0 || big / small > kMaxDomainImbalance)
    throw DataError("domain confusion: class imbalance " + std::to_string(syn.rows()) + ":" + std::to_string(real.rows()) +
                    " exceeds 10:1");
  FeatureMatrix x(syn.rows() + real.rows(), syn.cols());
  x << syn, real;
  std::vector<int> y(static_cast<std::size_t>(x.rows()), 0);
  std::fill(y.begin() + syn.rows(), y.end(), 1);
  cfg.test_fraction = 0.2;
  ProbeResult p = probe_features(x, y, cfg);
  return {p.accuracy, static_cast<int>(syn.rows()), static_cast<int>(real.rows()), p.n_train, p.n_test, p.dims};
}

// ---------------------------------------------------------------------------
// Image dumps

/// Unit normals (3 x H x W slice of item n) mapped to RGB as (v + 1) / 2.
inline Image<float> normal_to_rgb(const Tensor& normals, int n) {
  Image<float> out(normals.h(), normals.w(), 3);
  const std::size_t hw = out.pixels();
  auto v = normals.item(n);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.data[i * 3 + c] = std::clamp(0.5f * (v[c * hw + i] + 1.0f), 0.0f, 1.0f);
  return out;
}

/// Single-channel map of item n stretched to [0, 1] and replicated to RGB.
inline Image<float> map_to_rgb(const Tensor& map, int n) {
  Image<float> out(map.h(), map.w(), 3);
  auto v = map.item(n);
  auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  float range = *hi - *lo > 0 ? *hi - *lo : 1.0f;
  for (std::size_t i = 0; i < out.pixels(); ++i)
    out.data[i * 3] = out.data[i * 3 + 1] = out.data[i * 3 + 2] = (v[i] - *lo) / range;
  return out;
}

/// First-layer filters [out, 3, k, k] tiled into a square grid, each filter
/// stretched to [0, 1] on its own, one-pixel gaps.
inline Image<float> filter_grid(const Tensor& w) {
  if (w.rank() != 4 || w.dim(1) != 3) throw ShapeError("filter grid needs RGB filters, got " + shape_string(w.shape()));
  const int n = w.dim(0), k = w.dim(2);
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  const int rows = (n + cols - 1) / cols;
  Image<float> out(rows * (k + 1) + 1, cols * (k + 1) + 1, 3);
  for (int f = 0; f < n; ++f) {
    auto v = w.item(f);
    auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    float range = *hi - *lo > 0 ? *hi - *lo : 1.0f;
    int oy = 1 + (f / cols) * (k + 1), ox = 1 + (f % cols) * (k + 1);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) out.at(oy + y, ox + x, c) = (w.at(f, c, y, x) - *lo) / range;
  }
  return out;
}

}  // namespace synthfeat
