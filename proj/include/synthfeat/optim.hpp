#pragma once

#include <cmath>
#include <map>
#include <string>

#include "synthfeat/model.hpp"

namespace synthfeat {

struct AdamConfig {
  double lr_bh = 2e-4;  ///< base + heads
  double lr_d = 1e-4;   ///< discriminator
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  bool operator==(const AdamConfig&) const = default;
};

/// Adam with per-parameter moment estimates and step counts, so parameter
/// groups updated on different schedules keep independent bias correction.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  void set_config(const AdamConfig& c) { cfg_ = c; }

  /// Updates every parameter that has a gradient in `grads`.
  void step(ParamMap& params, const ParamMap& grads, double lr) {
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    for (const auto& [name, g] : grads) {
      Tensor& w = params.at(name);
      if (!w.same_shape(g)) throw ShapeError("gradient shape mismatch for " + name);
      Tensor& m = slot(m_, name, w);
      Tensor& v = slot(v_, name, w);
      long long t = ++steps_[name];
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
      for (std::size_t i = 0; i < w.size(); ++i) {
        double gi = g[i];
        double mi = b1 * m[i] + (1 - b1) * gi;
        double vi = b2 * v[i] + (1 - b2) * gi * gi;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        if (lr != 0.0) w[i] = static_cast<float>(w[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps));
      }
    }
  }

  const ParamMap& first_moments() const { return m_; }
  const ParamMap& second_moments() const { return v_; }
  const std::map<std::string, long long>& steps() const { return steps_; }

  void restore(ParamMap m, ParamMap v, std::map<std::string, long long> steps) {
    m_ = std::move(m);
    v_ = std::move(v);
    steps_ = std::move(steps);
  }

 private:
  static Tensor& slot(ParamMap& store, const std::string& name, const Tensor& like) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Tensor(like.shape())).first;
    return it->second;
  }

  AdamConfig cfg_;
  ParamMap m_, v_;
  std::map<std::string, long long> steps_;
};

}  // namespace synthfeat
