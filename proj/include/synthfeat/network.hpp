#pragma once

// Forward and backward passes of the trunk, the task heads and the
// discriminator on top of the stack executor.

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "synthfeat/model.hpp"

namespace synthfeat {

struct ForwardOptions {
  NormMode mode = NormMode::eval;
  ParamMap* running = nullptr;  ///< running-stat sink, required in train mode
};

inline ForwardOptions train_mode(ModelState& m) { return {NormMode::train, &m.buffers}; }
inline ForwardOptions eval_mode() { return {}; }

struct BaseOutput {
  std::vector<std::string> names;  ///< trunk layer names in order
  StackTrace trace;

  int index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    return -1;
  }
  /// Post-activation output of a trunk layer ("conv6"/"conv7" alias fc6/fc7).
  const Tensor& layer(const std::string& name) const {
    int i = index(name);
    if (i < 0 && (name == "conv6" || name == "conv7")) i = index(name == "conv6" ? "fc6" : "fc7");
    if (i < 0) throw ShapeError("unknown layer '" + name + "'");
    return trace.outputs[static_cast<std::size_t>(i)];
  }
  std::map<std::string, Tensor> feature_map() const {
    std::map<std::string, Tensor> out;
    for (std::size_t i = 0; i < names.size(); ++i) out[names[i]] = trace.outputs[i];
    return out;
  }
  const Tensor& top() const { return trace.result; }
};

inline void check_images(const ArchitectureConfig& a, const Tensor& images) {
  if (images.rank() != 4 || images.c() != a.input_channels || images.h() != a.input_resolution ||
      images.w() != a.input_resolution)
    throw ShapeError("input " + shape_string(images.shape()) + " does not match configured resolution " +
                     std::to_string(a.input_resolution));
}

inline BaseOutput forward_base(const ModelState& m, const Tensor& images, ForwardOptions opt = {}) {
  check_images(m.arch, images);
  auto layers = trunk_layers(m.arch);
  BaseOutput out;
  for (const auto& l : layers) out.names.push_back(l.name);
  out.trace = stack_forward(m, layers, kTrunkPrefix, images, opt.mode, opt.running);
  return out;
}

/// The tensor the discriminator reads (post- or pre-activation per config).
inline const Tensor& tap_features(const ModelState& m, const BaseOutput& base) {
  int i = trunk_index(m.arch, m.arch.tap_layer);
  if (i < 0) throw ShapeError("missing tap " + m.arch.tap_layer);
  return m.arch.tap_pre_activation ? base.trace.preacts[static_cast<std::size_t>(i)]
                                   : base.trace.outputs[static_cast<std::size_t>(i)];
}

inline constexpr float kNormalEps = 1e-6f;

struct HeadOutput {
  Tensor contour;    ///< logits, B x 1 x H x W
  Tensor log_depth;  ///< B x 1 x H x W
  Tensor normal;     ///< unit vectors, B x 3 x H x W
  Tensor normal_raw;
  std::vector<StackTrace> traces;  ///< per head, in arch.heads order
};

inline std::map<std::string, const Tensor*> skip_inputs(const ArchitectureConfig& a, const BaseOutput& base) {
  std::map<std::string, const Tensor*> m;
  for (const auto& s : a.skips) m[s.target] = &base.layer(s.source);
  return m;
}

/// Divides each pixel's 3-vector by max(norm, eps).
inline Tensor normalize_normals(const Tensor& raw) {
  Tensor out(raw.shape());
  const std::size_t hw = raw.plane();
  for (int n = 0; n < raw.n(); ++n) {
    auto src = raw.item(n);
    auto dst = out.item(n);
    for (std::size_t p = 0; p < hw; ++p) {
      float x = src[p], y = src[hw + p], z = src[2 * hw + p];
      float inv = 1.0f / std::max(std::sqrt(x * x + y * y + z * z), kNormalEps);
      dst[p] = x * inv;
      dst[hw + p] = y * inv;
      dst[2 * hw + p] = z * inv;
    }
  }
  return out;
}

inline Tensor normalize_normals_backward(const Tensor& raw, const Tensor& dn) {
  Tensor dv(raw.shape());
  const std::size_t hw = raw.plane();
  for (int n = 0; n < raw.n(); ++n) {
    auto v = raw.item(n);
    auto g = dn.item(n);
    auto d = dv.item(n);
    for (std::size_t p = 0; p < hw; ++p) {
      float x = v[p], y = v[hw + p], z = v[2 * hw + p];
      float len = std::sqrt(x * x + y * y + z * z);
      float gx = g[p], gy = g[hw + p], gz = g[2 * hw + p];
      if (len <= kNormalEps) {
        d[p] = gx / kNormalEps;
        d[hw + p] = gy / kNormalEps;
        d[2 * hw + p] = gz / kNormalEps;
        continue;
      }
      float inv = 1.0f / len;
      float nx = x * inv, ny = y * inv, nz = z * inv;
      float dot = nx * gx + ny * gy + nz * gz;
      d[p] = (gx - nx * dot) * inv;
      d[hw + p] = (gy - ny * dot) * inv;
      d[2 * hw + p] = (gz - nz * dot) * inv;
    }
  }
  return dv;
}

/// Heads named in `inactive` are skipped; their outputs stay empty.
inline HeadOutput forward_heads(const ModelState& m, const BaseOutput& base, ForwardOptions opt = {},
                                const std::set<std::string>& inactive = {}) {
  HeadOutput out;
  auto skips = skip_inputs(m.arch, base);
  for (const auto& head : m.arch.heads) {
    if (inactive.count(head.name)) {
      out.traces.emplace_back();
      continue;
    }
    StackTrace t = stack_forward(m, head.layers, head_prefix(head.name), base.top(), opt.mode, opt.running, skips);
    if (head.name == kContourHead) out.contour = t.result;
    else if (head.name == kDepthHead) out.log_depth = t.result;
    else if (head.name == kNormalHead) {
      out.normal_raw = t.result;
      out.normal = normalize_normals(t.result);
    } else {
      throw ShapeError("unknown head " + head.name);
    }
    out.traces.push_back(std::move(t));
  }
  return out;
}

/// Upstream gradients for the head outputs; empty tensors mean "no loss".
struct HeadGradients {
  Tensor contour, log_depth, normal;
};

/// Backpropagates the head losses into head parameters and returns the
/// injections for the trunk (top output plus skip sources).
inline StackGradients backward_heads(const ModelState& m, const BaseOutput& base, const HeadOutput& heads,
                                     const HeadGradients& g, ParamMap* grads) {
  StackGradients trunk;
  const int top = static_cast<int>(base.names.size()) - 1;
  for (std::size_t h = 0; h < m.arch.heads.size(); ++h) {
    const auto& head = m.arch.heads[h];
    Tensor d;
    if (head.name == kContourHead) d = g.contour;
    else if (head.name == kDepthHead) d = g.log_depth;
    else if (head.name == kNormalHead && !g.normal.empty()) d = normalize_normals_backward(heads.normal_raw, g.normal);
    if (d.empty()) continue;
    StackGradients sg;
    sg.at_result = std::move(d);
    StackBackward b = stack_backward(m, head.layers, head_prefix(head.name), heads.traces[h], std::move(sg), grads, true);
    auto add = [&](int idx, Tensor&& t) {
      auto it = trunk.at_output.find(idx);
      if (it == trunk.at_output.end()) trunk.at_output.emplace(idx, std::move(t));
      else it->second += t;
    };
    add(top, std::move(b.input_grad));
    for (auto& [target, t] : b.skip) {
      for (const auto& s : m.arch.skips)
        if (s.target == target) add(base.index(s.source), std::move(t));
    }
  }
  return trunk;
}

inline void backward_base(const ModelState& m, const BaseOutput& base, StackGradients g, ParamMap* grads) {
  if (g.at_output.empty() && g.at_preact.empty()) return;
  stack_backward(m, trunk_layers(m.arch), kTrunkPrefix, base.trace, std::move(g), grads, false);
}

/// Adds a gradient on the tap tensor to the trunk injections.
inline void inject_tap_gradient(const ModelState& m, StackGradients& g, Tensor d) {
  int i = trunk_index(m.arch, m.arch.tap_layer);
  auto& slot = m.arch.tap_pre_activation ? g.at_preact : g.at_output;
  auto it = slot.find(i);
  if (it == slot.end()) slot.emplace(i, std::move(d));
  else it->second += d;
}

struct DiscOutput {
  Tensor logits;  ///< B x 1 x h' x w'
  StackTrace trace;
};

inline DiscOutput forward_discriminator(const ModelState& m, const Tensor& features, ForwardOptions opt = {}) {
  Shape3 want = trunk_output_shape(m.arch, m.arch.tap_layer);
  if (features.rank() != 4 || features.c() != want.c || features.h() != want.h || features.w() != want.w)
    throw ShapeError("discriminator input " + shape_string(features.shape()) + " does not match tap " +
                     m.arch.tap_layer + " " + to_string(want));
  DiscOutput out;
  out.trace = stack_forward(m, m.arch.discriminator, kDiscPrefix, features, opt.mode, opt.running);
  out.logits = out.trace.result;
  return out;
}

/// Returns d loss / d features; parameter gradients go to `grads` if given.
inline Tensor backward_discriminator(const ModelState& m, const DiscOutput& d, const Tensor& dlogits, ParamMap* grads,
                                     bool need_input_grad) {
  StackGradients g;
  g.at_result = dlogits;
  return stack_backward(m, m.arch.discriminator, kDiscPrefix, d.trace, std::move(g), grads, need_input_grad).input_grad;
}

}  // namespace synthfeat
