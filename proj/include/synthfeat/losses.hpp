#pragma once

// The five training objectives with analytic gradients. Every function is
// templated on the scalar type so gradients can be checked in double while
// training runs in float; sums always accumulate in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "synthfeat/errors.hpp"

namespace synthfeat::loss {

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

struct LossWeights {
  double edge = 1.0, depth = 1.0, normal = 10.0;

  void validate() const {
    for (double v : {edge, depth, normal})
      if (!std::isfinite(v) || v < 0) throw ConfigError("loss weights must be finite and nonnegative");
    if (edge <= 0 && depth <= 0 && normal <= 0) throw ConfigError("at least one loss weight must be positive");
  }
  bool operator==(const LossWeights&) const = default;
};

/// Batch of single-channel maps: B items of `plane` pixels each.
struct MapDims {
  int batch = 0;
  std::size_t plane = 0;
  std::size_t size() const { return static_cast<std::size_t>(batch) * plane; }
};

enum class Reduction {
  batch_mean,  ///< pixel (or patch) sums divided by the batch size
  sum          ///< plain sums
};

template <class T>
void check_finite(std::span<const T> v, const char* what) {
  for (T x : v)
    if (std::isnan(x)) throw NumericError(std::string("NaN in ") + what);
}

template <class T>
void resize_grad(std::vector<T>* grad, std::size_t n) {
  if (grad) grad->assign(n, T(0));
}

/// Class-balanced sigmoid cross entropy over valid pixels. Edge pixels carry
/// weight beta, non-edge pixels 1 - beta.
template <class T>
T edge_loss(std::span<const T> logits, std::span<const std::uint8_t> contour, std::span<const double> beta,
            std::span<const std::uint8_t> valid, MapDims dims, std::vector<T>* grad = nullptr,
            Reduction red = Reduction::batch_mean) {
  if (logits.size() != dims.size() || contour.size() != dims.size() || valid.size() != dims.size() ||
      beta.size() != static_cast<std::size_t>(dims.batch))
    throw ShapeError("edge_loss: size mismatch");
  check_finite(logits, "edge logits");
  resize_grad(grad, logits.size());
  const double scale = red == Reduction::batch_mean ? 1.0 / dims.batch : 1.0;
  double total = 0;
  for (int b = 0; b < dims.batch; ++b) {
    const double be = beta[static_cast<std::size_t>(b)];
    if (!(be >= 0 && be <= 1)) throw NumericError("beta outside [0,1]");
    for (std::size_t p = 0; p < dims.plane; ++p) {
      std::size_t i = static_cast<std::size_t>(b) * dims.plane + p;
      if (!valid[i]) continue;
      double x = static_cast<double>(logits[i]);
      if (contour[i]) {
        total += be * softplus(-x);
        if (grad) (*grad)[i] = static_cast<T>(scale * be * (sigmoid(x) - 1.0));
      } else {
        total += (1 - be) * softplus(x);
        if (grad) (*grad)[i] = static_cast<T>(scale * (1 - be) * sigmoid(x));
      }
    }
  }
  return static_cast<T>(total * scale);
}

/// Scale-invariant log-depth loss, (1/n) sum d^2 - (1/(2n^2)) (sum d)^2 per
/// item over valid pixels, averaged over the batch.
template <class T>
T depth_loss(std::span<const T> pred, std::span<const T> target, std::span<const std::uint8_t> valid, MapDims dims,
             std::vector<T>* grad = nullptr) {
  if (pred.size() != dims.size() || target.size() != dims.size() || valid.size() != dims.size())
    throw ShapeError("depth_loss: size mismatch");
  check_finite(pred, "depth prediction");
  resize_grad(grad, pred.size());
  double total = 0;
  for (int b = 0; b < dims.batch; ++b) {
    std::size_t off = static_cast<std::size_t>(b) * dims.plane;
    double n = 0, s = 0, s2 = 0;
    for (std::size_t p = 0; p < dims.plane; ++p)
      if (valid[off + p]) {
        double d = static_cast<double>(pred[off + p]) - static_cast<double>(target[off + p]);
        n += 1;
        s += d;
        s2 += d * d;
      }
    if (n == 0) throw DataError("depth_loss: item " + std::to_string(b) + " has no valid pixels");
    total += s2 / n - s * s / (2 * n * n);
    if (grad)
      for (std::size_t p = 0; p < dims.plane; ++p)
        if (valid[off + p]) {
          double d = static_cast<double>(pred[off + p]) - static_cast<double>(target[off + p]);
          (*grad)[off + p] = static_cast<T>((2 * d / n - s / (n * n)) / dims.batch);
        }
  }
  return static_cast<T>(total / dims.batch);
}

inline constexpr double kUnitTolerance = 1e-3;

/// Negative mean dot product between predicted and target unit normals over
/// valid pixels, averaged over the batch. Vectors are stored planar: item b,
/// channel c, pixel p at (b * 3 + c) * plane + p.
template <class T>
T normal_loss(std::span<const T> pred, std::span<const T> target, std::span<const std::uint8_t> valid, MapDims dims,
              std::vector<T>* grad = nullptr) {
  if (pred.size() != 3 * dims.size() || target.size() != 3 * dims.size() || valid.size() != dims.size())
    throw ShapeError("normal_loss: size mismatch");
  check_finite(pred, "normal prediction");
  resize_grad(grad, pred.size());
  const std::size_t hw = dims.plane;
  auto norm_ok = [&](std::span<const T> v, std::size_t base, std::size_t p) {
    double x = v[base + p], y = v[base + hw + p], z = v[base + 2 * hw + p];
    return std::abs(std::sqrt(x * x + y * y + z * z) - 1.0) <= kUnitTolerance;
  };
  double total = 0;
  for (int b = 0; b < dims.batch; ++b) {
    std::size_t base = static_cast<std::size_t>(b) * 3 * hw;
    std::size_t voff = static_cast<std::size_t>(b) * hw;
    double n = 0, dot = 0;
    for (std::size_t p = 0; p < hw; ++p) {
      if (!valid[voff + p]) continue;
      if (!norm_ok(pred, base, p) || !norm_ok(target, base, p))
        throw NumericError("normal_loss: non-unit normal at item " + std::to_string(b) + " pixel " + std::to_string(p));
      n += 1;
      for (int c = 0; c < 3; ++c)
        dot += static_cast<double>(pred[base + static_cast<std::size_t>(c) * hw + p]) *
               static_cast<double>(target[base + static_cast<std::size_t>(c) * hw + p]);
    }
    if (n == 0) throw DataError("normal_loss: item " + std::to_string(b) + " has no valid pixels");
    total += -dot / n;
    if (grad)
      for (std::size_t p = 0; p < hw; ++p)
        if (valid[voff + p])
          for (int c = 0; c < 3; ++c) {
            std::size_t i = base + static_cast<std::size_t>(c) * hw + p;
            (*grad)[i] = static_cast<T>(-static_cast<double>(target[i]) / (n * dims.batch));
          }
  }
  return static_cast<T>(total / dims.batch);
}

/// Discriminator objective: binary cross entropy with synthetic patches
/// labelled 1 and real patches 0. batch_mean averages over every patch of
/// both batches; sum keeps the plain sum.
template <class T>
T discriminator_loss(std::span<const T> d_syn, std::span<const T> d_real, std::vector<T>* grad_syn = nullptr,
                     std::vector<T>* grad_real = nullptr, Reduction red = Reduction::batch_mean) {
  check_finite(d_syn, "synthetic logits");
  check_finite(d_real, "real logits");
  const std::size_t count = d_syn.size() + d_real.size();
  if (count == 0) throw ShapeError("discriminator_loss: no logits");
  const double scale = red == Reduction::batch_mean ? 1.0 / static_cast<double>(count) : 1.0;
  resize_grad(grad_syn, d_syn.size());
  resize_grad(grad_real, d_real.size());
  double total = 0;
  for (std::size_t i = 0; i < d_syn.size(); ++i) {
    double x = d_syn[i];
    total += softplus(-x);
    if (grad_syn) (*grad_syn)[i] = static_cast<T>(scale * (sigmoid(x) - 1.0));
  }
  for (std::size_t i = 0; i < d_real.size(); ++i) {
    double x = d_real[i];
    total += softplus(x);
    if (grad_real) (*grad_real)[i] = static_cast<T>(scale * sigmoid(x));
  }
  return static_cast<T>(total * scale);
}

/// Unweighted components of the generator objective.
struct Breakdown {
  double adv = 0, edge = 0, depth = 0, normal = 0;

  double weighted_tasks(const LossWeights& w) const { return w.edge * edge + w.depth * depth + w.normal * normal; }
  double total(const LossWeights& w) const { return adv + weighted_tasks(w); }
};

/// Inputs of the generator objective. Empty task spans skip that term.
template <class T>
struct GeneratorInputs {
  std::span<const T> d_syn, d_real;  // d_real used only with bifool
  std::span<const T> edge_logits, log_depth, normals;
  std::span<const std::uint8_t> contour, valid;
  std::span<const double> beta;
  std::span<const T> target_log_depth, target_normals;
  MapDims dims;
};

template <class T>
struct GeneratorGradients {
  std::vector<T> d_syn, d_real, edge_logits, log_depth, normals;
};

/// Adversarial term plus weighted task losses. The adversarial term pushes
/// synthetic patches towards the real label; with bifool it also pushes real
/// patches towards the synthetic label. Returns the total; the raw
/// components go to `parts`.
template <class T>
T generator_task_loss(const GeneratorInputs<T>& in, const LossWeights& w, bool bifool, Breakdown* parts = nullptr,
                      GeneratorGradients<T>* grads = nullptr) {
  w.validate();
  check_finite(in.d_syn, "synthetic logits");
  Breakdown bd;
  if (!in.d_syn.empty()) {
    const double inv = 1.0 / static_cast<double>(in.d_syn.size());
    if (grads) grads->d_syn.assign(in.d_syn.size(), T(0));
    for (std::size_t i = 0; i < in.d_syn.size(); ++i) {
      double x = in.d_syn[i];
      bd.adv += softplus(x) * inv;
      if (grads) grads->d_syn[i] = static_cast<T>(sigmoid(x) * inv);
    }
  }
  if (bifool) {
    check_finite(in.d_real, "real logits");
    if (in.d_real.empty()) throw ShapeError("bifool needs real logits");
    const double inv = 1.0 / static_cast<double>(in.d_real.size());
    if (grads) grads->d_real.assign(in.d_real.size(), T(0));
    for (std::size_t i = 0; i < in.d_real.size(); ++i) {
      double x = in.d_real[i];
      bd.adv += softplus(-x) * inv;
      if (grads) grads->d_real[i] = static_cast<T>((sigmoid(x) - 1.0) * inv);
    }
  }
  auto scaled = [](std::vector<T>& g, double s) {
    for (auto& v : g) v = static_cast<T>(static_cast<double>(v) * s);
  };
  if (!in.edge_logits.empty()) {
    bd.edge = edge_loss<T>(in.edge_logits, in.contour, in.beta, in.valid, in.dims, grads ? &grads->edge_logits : nullptr);
    if (grads) scaled(grads->edge_logits, w.edge);
  }
  if (!in.log_depth.empty()) {
    bd.depth = depth_loss<T>(in.log_depth, in.target_log_depth, in.valid, in.dims, grads ? &grads->log_depth : nullptr);
    if (grads) scaled(grads->log_depth, w.depth);
  }
  if (!in.normals.empty()) {
    bd.normal = normal_loss<T>(in.normals, in.target_normals, in.valid, in.dims, grads ? &grads->normals : nullptr);
    if (grads) scaled(grads->normals, w.normal);
  }
  if (parts) *parts = bd;
  return static_cast<T>(bd.total(w));
}

}  // namespace synthfeat::loss
