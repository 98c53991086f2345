#pragma once

// Declarative architecture (base, dilated bottleneck, three deconvolutional
// task heads, patch discriminator), its shape calculus, parameter storage and
// the layer-stack executor used by every forward and backward pass.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synthfeat/errors.hpp"
#include "synthfeat/nn.hpp"
#include "synthfeat/rng.hpp"
#include "synthfeat/tensor.hpp"

namespace synthfeat {

enum class LayerKind { conv, pool_max, deconv, dilated_conv };
using nn::Activation;

NLOHMANN_JSON_SERIALIZE_ENUM(LayerKind, {{LayerKind::conv, "conv"},
                                         {LayerKind::pool_max, "pool-max"},
                                         {LayerKind::deconv, "deconv"},
                                         {LayerKind::dilated_conv, "dilated-conv"}})
}  // namespace synthfeat

namespace synthfeat::nn {
NLOHMANN_JSON_SERIALIZE_ENUM(Activation, {{Activation::none, "none"},
                                          {Activation::relu, "relu"},
                                          {Activation::leaky_relu, "leaky-relu"}})
}  // namespace synthfeat::nn

namespace synthfeat {

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  int out_channels = 0;  ///< ignored for pooling
  int kernel = 1, stride = 1, padding = 0, dilation = 1;
  Activation activation = Activation::none;
  bool batchnorm = false;
  int crop_to = 0;  ///< centre-crop the spatial output to this size; 0 = none

  bool parametric() const { return kind != LayerKind::pool_max; }
  bool operator==(const LayerSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const LayerSpec& l) {
  j = {{"name", l.name},       {"kind", l.kind},           {"out_channels", l.out_channels},
       {"kernel", l.kernel},   {"stride", l.stride},       {"padding", l.padding},
       {"dilation", l.dilation}, {"activation", l.activation}, {"batchnorm", l.batchnorm},
       {"crop_to", l.crop_to}};
}

inline void from_json(const nlohmann::json& j, LayerSpec& l) {
  LayerSpec d;
  l.name = j.at("name").get<std::string>();
  l.kind = j.at("kind").get<LayerKind>();
  l.out_channels = j.value("out_channels", d.out_channels);
  l.kernel = j.value("kernel", d.kernel);
  l.stride = j.value("stride", d.stride);
  l.padding = j.value("padding", d.padding);
  l.dilation = j.value("dilation", d.dilation);
  l.activation = j.value("activation", d.activation);
  l.batchnorm = j.value("batchnorm", d.batchnorm);
  l.crop_to = j.value("crop_to", d.crop_to);
}

/// (source -> target): the source layer's output is concatenated channel-wise
/// onto the target head layer's output before it feeds the next head layer.
struct SkipConnection {
  std::string source, target;
  bool operator==(const SkipConnection&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SkipConnection, source, target)

struct HeadSpec {
  std::string name;
  std::vector<LayerSpec> layers;
  bool operator==(const HeadSpec&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(HeadSpec, name, layers)

inline constexpr const char* kContourHead = "contour";
inline constexpr const char* kDepthHead = "depth";
inline constexpr const char* kNormalHead = "normal";

struct ArchitectureConfig {
  std::string family = "alexnet";
  int input_resolution = 64;
  int input_channels = 3;
  int width_divisor = 1;
  std::vector<LayerSpec> base;
  std::vector<LayerSpec> bottleneck;
  std::vector<HeadSpec> heads;  ///< contour, depth, normal
  std::vector<LayerSpec> discriminator;
  std::string tap_layer = "conv5";
  bool tap_pre_activation = false;
  std::vector<SkipConnection> skips;
  bool operator==(const ArchitectureConfig&) const = default;
};
inline void to_json(nlohmann::json& j, const ArchitectureConfig& a) {
  j = {{"family", a.family},
       {"input_resolution", a.input_resolution},
       {"input_channels", a.input_channels},
       {"width_divisor", a.width_divisor},
       {"base", a.base},
       {"bottleneck", a.bottleneck},
       {"heads", a.heads},
       {"discriminator", a.discriminator},
       {"tap_layer", a.tap_layer},
       {"tap_pre_activation", a.tap_pre_activation},
       {"skips", a.skips}};
}

inline void from_json(const nlohmann::json& j, ArchitectureConfig& a) {
  ArchitectureConfig d;
  a.family = j.value("family", d.family);
  a.input_resolution = j.value("input_resolution", d.input_resolution);
  a.input_channels = j.value("input_channels", d.input_channels);
  a.width_divisor = j.value("width_divisor", d.width_divisor);
  a.base = j.value("base", d.base);
  a.bottleneck = j.value("bottleneck", d.bottleneck);
  a.heads = j.value("heads", d.heads);
  a.discriminator = j.value("discriminator", d.discriminator);
  a.tap_layer = j.value("tap_layer", d.tap_layer);
  a.tap_pre_activation = j.value("tap_pre_activation", d.tap_pre_activation);
  a.skips = j.value("skips", d.skips);
}

struct Shape3 {
  int c = 0, h = 0, w = 0;
  bool operator==(const Shape3&) const = default;
};

inline std::string to_string(const Shape3& s) {
  return "(" + std::to_string(s.c) + "," + std::to_string(s.h) + "," + std::to_string(s.w) + ")";
}

/// Output shape implied by the kernel arithmetic alone, before any crop.
inline Shape3 formula_shape_of(const LayerSpec& l, const Shape3& in) {
  if (in.c <= 0 || in.h <= 0 || in.w <= 0) throw ShapeError("layer " + l.name + ": non-positive input " + to_string(in));
  if (l.kernel < 1 || l.stride < 1 || l.dilation < 1)
    throw ShapeError("layer " + l.name + ": kernel, stride and dilation must be >= 1");
  Shape3 out;
  switch (l.kind) {
    case LayerKind::conv:
    case LayerKind::dilated_conv:
    case LayerKind::pool_max:
      out.h = nn::conv_out_size(in.h, l.kernel, l.stride, l.padding, l.dilation);
      out.w = nn::conv_out_size(in.w, l.kernel, l.stride, l.padding, l.dilation);
      break;
    case LayerKind::deconv:
      out.h = nn::deconv_out_size(in.h, l.kernel, l.stride, l.padding, l.dilation);
      out.w = nn::deconv_out_size(in.w, l.kernel, l.stride, l.padding, l.dilation);
      break;
  }
  out.c = l.kind == LayerKind::pool_max ? in.c : l.out_channels;
  if (out.c <= 0 || out.h <= 0 || out.w <= 0)
    throw ShapeError("layer " + l.name + ": non-positive output " + to_string(out) + " from input " + to_string(in));
  return out;
}

/// Exact output shape of a layer, crop rule included.
inline Shape3 shape_of(const LayerSpec& l, const Shape3& in) {
  Shape3 out = formula_shape_of(l, in);
  if (l.crop_to > 0) {
    if (l.crop_to > out.h || l.crop_to > out.w)
      throw ShapeError("layer " + l.name + ": crop target " + std::to_string(l.crop_to) + " exceeds output " +
                       to_string(out));
    out.h = out.w = l.crop_to;
  }
  return out;
}

/// Base and bottleneck as one ordered stack.
inline std::vector<LayerSpec> trunk_layers(const ArchitectureConfig& a) {
  std::vector<LayerSpec> v = a.base;
  v.insert(v.end(), a.bottleneck.begin(), a.bottleneck.end());
  return v;
}

/// Maps tap aliases onto trunk layer names ("conv6" is the dilated fc6).
inline std::string resolve_tap(const ArchitectureConfig& a, const std::string& tap) {
  if (tap == "conv6") {
    for (const auto& l : a.bottleneck)
      if (l.name == "fc6") return "fc6";
  }
  if (tap == "conv7") {
    for (const auto& l : a.bottleneck)
      if (l.name == "fc7") return "fc7";
  }
  return tap;
}

inline int trunk_index(const ArchitectureConfig& a, const std::string& name) {
  auto layers = trunk_layers(a);
  std::string n = resolve_tap(a, name);
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].name == n) return static_cast<int>(i);
  return -1;
}

struct ShapeRow {
  std::string section;  ///< base, bottleneck, head:<name>, discriminator
  std::string name;
  Shape3 in, formula, out;
};

/// Runs the shape calculus over every section and checks the cross-section
/// invariants. Throws ShapeError naming the offending layer.
inline std::vector<ShapeRow> infer_shapes(const ArchitectureConfig& a) {
  std::vector<ShapeRow> rows;
  std::map<std::string, Shape3> trunk_out;
  Shape3 s{a.input_channels, a.input_resolution, a.input_resolution};
  auto run = [&](const std::string& section, const LayerSpec& l, Shape3 in) {
    ShapeRow r{section, l.name, in, formula_shape_of(l, in), shape_of(l, in)};
    rows.push_back(r);
    return r.out;
  };
  for (const auto& l : a.base) trunk_out[l.name] = s = run("base", l, s);
  for (const auto& l : a.bottleneck) trunk_out[l.name] = s = run("bottleneck", l, s);
  const Shape3 top = s;

  if (a.heads.size() != 3) throw ShapeError("expected three task heads");
  for (const auto& head : a.heads) {
    Shape3 h = top;
    for (std::size_t i = 0; i < head.layers.size(); ++i) {
      const auto& l = head.layers[i];
      h = run("head:" + head.name, l, h);
      for (const auto& sk : a.skips)
        if (sk.target == l.name) {
          auto it = trunk_out.find(sk.source);
          if (it == trunk_out.end()) throw ShapeError("skip source " + sk.source + " is not a trunk layer");
          if (it->second.h != h.h || it->second.w != h.w)
            throw ShapeError("skip " + sk.source + " -> " + sk.target + ": spatial mismatch " + to_string(it->second) +
                             " vs " + to_string(h));
          h.c += it->second.c;
        }
    }
    int want_c = head.name == kNormalHead ? 3 : 1;
    if (h.c != want_c) throw ShapeError("head " + head.name + " must end with " + std::to_string(want_c) + " channels");
    if (h.h != a.input_resolution || h.w != a.input_resolution)
      throw ShapeError("head " + head.name + " output " + to_string(h) + " does not match input resolution");
  }

  int tap = trunk_index(a, a.tap_layer);
  if (tap < 0) throw ShapeError("unknown tap layer " + a.tap_layer);
  Shape3 d = trunk_out[trunk_layers(a)[static_cast<std::size_t>(tap)].name];
  for (const auto& l : a.discriminator) d = run("discriminator", l, d);
  if (d.c != 1) throw ShapeError("discriminator must emit one logit channel");
  return rows;
}

inline Shape3 trunk_output_shape(const ArchitectureConfig& a, const std::string& layer) {
  std::string n = resolve_tap(a, layer);
  for (const auto& r : infer_shapes(a))
    if ((r.section == "base" || r.section == "bottleneck") && r.name == n) return r.out;
  throw ShapeError("unknown layer " + layer);
}

/// Expected spatial size for one named layer, as listed by a reference table.
struct ReferenceRow {
  std::string name;
  int size = 0;
};

struct ConformanceRow {
  std::string section, name;
  int reference = 0;  ///< 0 when the reference does not list the layer
  int formula = 0;    ///< kernel arithmetic before any crop
  int output = 0;     ///< after the crop rule
  bool matches = false;
  std::string note;
};

/// Compares computed spatial sizes with a reference table. Rows the
/// arithmetic cannot reproduce are reported with the action taken.
inline std::vector<ConformanceRow> conformance_report(const ArchitectureConfig& a,
                                                      const std::vector<ReferenceRow>& reference) {
  std::vector<ConformanceRow> out;
  auto rows = infer_shapes(a);
  for (const auto& ref : reference) {
    const ShapeRow* hit = nullptr;
    for (const auto& r : rows)  // heads share layer names; the first head stands for all
      if (r.name == ref.name) {
        hit = &r;
        break;
      }
    if (!hit) throw ShapeError("reference layer " + ref.name + " is not part of the architecture");
    ConformanceRow c{hit->section, ref.name, ref.size, hit->formula.h, hit->out.h, hit->out.h == ref.size, ""};
    if (!c.matches) {
      if (hit->in.h == ref.size)
        c.note = "reference lists the input size; arithmetic gives " + std::to_string(hit->out.h);
      else if (hit->formula.h > ref.size)
        c.note = "reference size unreachable; formula size " + std::to_string(hit->formula.h) + " kept";
      else
        c.note = "reference size unreachable by the kernel arithmetic";
    } else if (hit->formula.h != hit->out.h) {
      c.note = "crop rule: " + std::to_string(hit->formula.h) + " -> " + std::to_string(hit->out.h);
    }
    out.push_back(std::move(c));
  }
  return out;
}

namespace detail {

inline LayerSpec conv(std::string name, int c, int k, int s, int p, int d = 1) {
  return LayerSpec{std::move(name), d > 1 ? LayerKind::dilated_conv : LayerKind::conv, c, k, s, p, d,
                   Activation::relu, true, 0};
}
inline LayerSpec pool(std::string name, int k, int s, int p) {
  return LayerSpec{std::move(name), LayerKind::pool_max, 0, k, s, p, 1, Activation::none, false, 0};
}
inline LayerSpec deconv(std::string name, int c, int k, int s, int p, int crop = 0) {
  return LayerSpec{std::move(name), LayerKind::deconv, c, k, s, p, 1, Activation::relu, true, crop};
}
inline LayerSpec disc(std::string name, int c, int k, int s, bool last = false) {
  return LayerSpec{std::move(name), LayerKind::conv, c, k, s, 0, 1, last ? Activation::none : Activation::leaky_relu,
                   !last, 0};
}
inline LayerSpec output_layer(LayerSpec l) {
  l.activation = Activation::none;
  l.batchnorm = false;
  return l;
}
inline int scaled(int c, int div, int floor = 1) { return std::max(floor, c / div); }

}  // namespace detail

/// AlexNet-style configuration. At 227 the layer table is the full-size one
/// (conv1..conv5 as in AlexNet, pool5 stride 1, dilated fc6, 1x1 fc7, four
/// deconvolutions per head, 3-layer patch discriminator on conv5). The 64, 96
/// and 128 variants keep every layer and tap name, divide channel counts by
/// `width_divisor` (default 4) and use smaller kernels so the trunk ends on an
/// R/8 grid.
inline ArchitectureConfig build_default_alexnet(int resolution, int width_divisor = 0) {
  using namespace detail;
  ArchitectureConfig a;
  a.family = "alexnet";
  a.input_resolution = resolution;
  a.tap_layer = "conv5";
  if (resolution == 227) {
    int dv = width_divisor > 0 ? width_divisor : 1;
    a.width_divisor = dv;
    a.base = {conv("conv1", scaled(96, dv), 11, 4, 0), pool("pool1", 3, 2, 0), conv("conv2", scaled(256, dv), 5, 1, 2),
              pool("pool2", 3, 2, 0),                  conv("conv3", scaled(384, dv), 3, 1, 1),
              conv("conv4", scaled(384, dv), 3, 1, 1), conv("conv5", scaled(256, dv), 3, 1, 1),
              pool("pool5", 3, 1, 1)};
    a.bottleneck = {conv("fc6", scaled(4096, dv), 6, 1, 5, 2), conv("fc7", scaled(4096, dv), 1, 1, 0)};
    for (auto [name, ch] : {std::pair{kContourHead, 1}, std::pair{kDepthHead, 1}, std::pair{kNormalHead, 3}}) {
      LayerSpec out = output_layer(deconv("output", ch, 3, 2, 0, resolution));
      a.heads.push_back({name,
                         {deconv("deconv8", scaled(64, dv), 3, 2, 0), deconv("deconv9", scaled(64, dv), 3, 2, 0),
                          deconv("deconv10", scaled(64, dv), 5, 2, 0), out}});
    }
    a.discriminator = {disc("D1", scaled(256, dv), 3, 2), disc("D2", scaled(512, dv), 1, 1),
                       disc("D3", 1, 1, 1, true)};
  } else if (resolution == 64 || resolution == 96 || resolution == 128) {
    int dv = width_divisor > 0 ? width_divisor : 4;
    a.width_divisor = dv;
    int grid = resolution / 8;
    int k6 = (grid - 3) / 2 + 1;  // fc6 covers the stride-2 re-pooled grid exactly
    a.base = {conv("conv1", scaled(96, dv), 5, 2, 2), pool("pool1", 3, 2, 1), conv("conv2", scaled(256, dv), 5, 1, 2),
              pool("pool2", 3, 2, 1),                 conv("conv3", scaled(384, dv), 3, 1, 1),
              conv("conv4", scaled(384, dv), 3, 1, 1), conv("conv5", scaled(256, dv), 3, 1, 1),
              pool("pool5", 3, 1, 1)};
    a.bottleneck = {conv("fc6", scaled(4096, dv), k6, 1, k6 - 1, 2), conv("fc7", scaled(4096, dv), 1, 1, 0)};
    int hc = scaled(64, dv, 8);
    for (auto [name, ch] : {std::pair{kContourHead, 1}, std::pair{kDepthHead, 1}, std::pair{kNormalHead, 3}}) {
      LayerSpec out = output_layer(deconv("output", ch, 3, 1, 1, resolution));
      a.heads.push_back({name,
                         {deconv("deconv8", hc, 4, 2, 1), deconv("deconv9", hc, 4, 2, 1),
                          deconv("deconv10", hc, 4, 2, 1), out}});
    }
    a.discriminator = {disc("D1", scaled(256, dv), 3, 2), disc("D2", scaled(512, dv), 1, 1),
                       disc("D3", 1, 1, 1, true)};
  } else {
    throw ConfigError("unsupported AlexNet resolution " + std::to_string(resolution) +
                      " (expected 227, 64, 96 or 128)");
  }
  infer_shapes(a);
  return a;
}

/// VGG16-style configuration with skip connections into the task heads and
/// no bottleneck. 224 is the full-size layout; 64/96/128 are desk variants
/// (default width divisor 8). Every head deconvolution doubles the grid of
/// conv5_3 and is centre-cropped to it.
inline ArchitectureConfig build_vgg16_variant(int resolution, int width_divisor = 0) {
  using namespace detail;
  if (resolution != 224 && resolution != 64 && resolution != 96 && resolution != 128)
    throw ConfigError("unsupported VGG16 resolution " + std::to_string(resolution) + " (expected 224, 64, 96 or 128)");
  int dv = width_divisor > 0 ? width_divisor : (resolution == 224 ? 1 : 8);
  ArchitectureConfig a;
  a.family = "vgg16";
  a.input_resolution = resolution;
  a.width_divisor = dv;
  a.tap_layer = "conv5_3";
  const int widths[5] = {64, 128, 256, 512, 512};
  const int reps[5] = {2, 2, 3, 3, 3};
  for (int b = 0; b < 5; ++b) {
    for (int r = 0; r < reps[b]; ++r)
      a.base.push_back(conv("conv" + std::to_string(b + 1) + "_" + std::to_string(r + 1), scaled(widths[b], dv), 3, 1, 1));
    if (b < 4) a.base.push_back(pool("pool" + std::to_string(b + 1), 2, 2, 0));
  }
  int g5 = resolution / 16;
  for (auto [name, ch] : {std::pair{kContourHead, 1}, std::pair{kDepthHead, 1}, std::pair{kNormalHead, 3}}) {
    a.heads.push_back({name,
                       {deconv("deconv1", scaled(512, dv), 4, 2, 0, g5), deconv("deconv2", scaled(256, dv), 4, 2, 0, 2 * g5),
                        deconv("deconv3", scaled(128, dv), 4, 2, 0, 4 * g5), deconv("deconv4", scaled(64, dv), 4, 2, 0, 8 * g5),
                        output_layer(deconv("output", ch, 4, 2, 0, resolution))}});
  }
  a.skips = {{"conv2_2", "deconv4"}, {"conv3_3", "deconv3"}, {"conv4_3", "deconv2"}};
  a.discriminator = {disc("D1", scaled(1024, dv), 4, 2), disc("D2", scaled(1024, dv), 1, 1), disc("D3", 1, 1, 1, true)};
  infer_shapes(a);
  return a;
}

inline ArchitectureConfig build_architecture(const std::string& family, int resolution, int width_divisor = 0) {
  if (family == "alexnet") return build_default_alexnet(resolution, width_divisor);
  if (family == "vgg16") return build_vgg16_variant(resolution, width_divisor);
  throw ConfigError("unknown architecture family '" + family + "'");
}

// ---------------------------------------------------------------------------
// Parameters

enum class ParamGroup { base, heads, discriminator };

inline ParamGroup group_of(const std::string& param_name) {
  if (param_name.rfind("base.", 0) == 0) return ParamGroup::base;
  if (param_name.rfind("head.", 0) == 0) return ParamGroup::heads;
  if (param_name.rfind("disc.", 0) == 0) return ParamGroup::discriminator;
  throw ConfigError("parameter with unknown group: " + param_name);
}

using ParamMap = std::map<std::string, Tensor>;

struct ModelState {
  ArchitectureConfig arch;
  ParamMap params;   ///< learnable tensors
  ParamMap buffers;  ///< batchnorm running statistics
  std::uint64_t seed = 0;
};

inline std::string head_prefix(const std::string& head) { return "head." + head + "."; }
inline constexpr const char* kTrunkPrefix = "base.";
inline constexpr const char* kDiscPrefix = "disc.";

struct LayerParamNames {
  std::string weight, bias, gamma, beta, mean, var;
};

inline LayerParamNames param_names(const std::string& prefix, const LayerSpec& l) {
  std::string p = prefix + l.name + ".";
  return {p + "weight", p + "bias", p + "bn.gamma", p + "bn.beta", p + "bn.running_mean", p + "bn.running_var"};
}

namespace detail {

inline void add_layer_params(ModelState& m, const std::string& prefix, const LayerSpec& l, int in_c) {
  if (!l.parametric()) {
    if (l.batchnorm) throw ShapeError("layer " + l.name + ": batchnorm requires a parametric layer");
    return;
  }
  auto names = param_names(prefix, l);
  int k = l.kernel;
  std::vector<int> wshape = l.kind == LayerKind::deconv ? std::vector<int>{in_c, l.out_channels, k, k}
                                                        : std::vector<int>{l.out_channels, in_c, k, k};
  Tensor w(wshape);
  double fan_in = static_cast<double>(in_c) * k * k;
  if (l.kind == LayerKind::deconv) fan_in /= static_cast<double>(l.stride) * l.stride;
  double bound = std::sqrt(6.0 / std::max(1.0, fan_in));
  Rng rng(derive_seed(m.seed, fnv1a(names.weight)));
  for (auto& v : w.values()) v = static_cast<float>(rng.uniform(-bound, bound));
  m.params[names.weight] = std::move(w);
  m.params[names.bias] = Tensor({l.out_channels}, 0.0f);
  if (l.batchnorm) {
    m.params[names.gamma] = Tensor({l.out_channels}, 1.0f);
    m.params[names.beta] = Tensor({l.out_channels}, 0.0f);
    m.buffers[names.mean] = Tensor({l.out_channels}, 0.0f);
    m.buffers[names.var] = Tensor({l.out_channels}, 1.0f);
  }
}

}  // namespace detail

/// Allocates and initialises every parameter. Weights are fan-in scaled
/// uniform, U(-sqrt(6/fan_in), sqrt(6/fan_in)), each tensor drawn from its
/// own stream derived from (seed, parameter name); biases and batchnorm
/// shifts start at 0, scales at 1, running statistics at (0, 1).
inline ModelState init_model(const ArchitectureConfig& arch, std::uint64_t seed) {
  auto rows = infer_shapes(arch);
  ModelState m;
  m.arch = arch;
  m.seed = seed;
  auto in_channels = [&](const std::string& section, const std::string& name) {
    for (const auto& r : rows)
      if (r.section == section && r.name == name) return r.in.c;
    throw ShapeError("missing shape row for " + name);
  };
  for (const auto& l : arch.base) detail::add_layer_params(m, kTrunkPrefix, l, in_channels("base", l.name));
  for (const auto& l : arch.bottleneck) detail::add_layer_params(m, kTrunkPrefix, l, in_channels("bottleneck", l.name));
  for (const auto& h : arch.heads)
    for (const auto& l : h.layers) detail::add_layer_params(m, head_prefix(h.name), l, in_channels("head:" + h.name, l.name));
  for (const auto& l : arch.discriminator) detail::add_layer_params(m, kDiscPrefix, l, in_channels("discriminator", l.name));
  return m;
}

/// Re-targets the discriminator to another tap layer, re-initialising only
/// the discriminator parameters.
inline void set_tap_layer(ModelState& m, const std::string& tap) {
  m.arch.tap_layer = tap;
  auto rows = infer_shapes(m.arch);
  for (auto it = m.params.begin(); it != m.params.end();)
    it = it->first.rfind(kDiscPrefix, 0) == 0 ? m.params.erase(it) : std::next(it);
  for (auto it = m.buffers.begin(); it != m.buffers.end();)
    it = it->first.rfind(kDiscPrefix, 0) == 0 ? m.buffers.erase(it) : std::next(it);
  for (const auto& l : m.arch.discriminator)
    for (const auto& r : rows)
      if (r.section == "discriminator" && r.name == l.name) detail::add_layer_params(m, kDiscPrefix, l, r.in.c);
}

inline std::size_t parameter_count(const ParamMap& p) {
  std::size_t n = 0;
  for (const auto& [k, v] : p) n += v.size();
  return n;
}

// ---------------------------------------------------------------------------
// Stack execution

enum class NormMode {
  train,        ///< batch statistics, running estimates updated
  batch_stats,  ///< batch statistics, running estimates untouched
  eval          ///< running estimates
};

struct LayerCache {
  Tensor input;
  std::vector<int> argmax;
  std::vector<int> pre_crop_shape;
  int crop_y = 0, crop_x = 0;
  bool cropped = false;
  nn::BatchNormCache bn;
  int own_channels = 0;  ///< channels of this layer's output before a skip concat
};

struct StackTrace {
  std::vector<LayerCache> caches;
  std::vector<Tensor> outputs;   ///< post-activation output of each layer (pre-concat)
  std::vector<Tensor> preacts;   ///< output before the activation
  Tensor result;                 ///< final output (including a trailing concat)
};

/// Runs an ordered layer list. `concat_after` maps a layer name to a tensor
/// concatenated onto that layer's output. `running` receives running-stat
/// updates when mode == train.
inline StackTrace stack_forward(const ModelState& m, const std::vector<LayerSpec>& layers, const std::string& prefix,
                                const Tensor& input, NormMode mode, ParamMap* running,
                                const std::map<std::string, const Tensor*>& concat_after = {}) {
  if (mode == NormMode::train && !running) throw ConfigError("train-mode forward needs a running-stat sink");
  StackTrace t;
  t.caches.resize(layers.size());
  Tensor x = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    LayerCache& c = t.caches[i];
    auto names = param_names(prefix, l);
    Tensor y;
    nn::ConvParams cp{l.stride, l.padding, l.dilation};
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::dilated_conv:
        y = nn::conv2d_forward(x, m.params.at(names.weight), m.params.at(names.bias), cp);
        break;
      case LayerKind::deconv:
        y = nn::deconv2d_forward(x, m.params.at(names.weight), m.params.at(names.bias), cp);
        break;
      case LayerKind::pool_max:
        y = nn::maxpool_forward(x, l.kernel, l.stride, l.padding, c.argmax);
        break;
    }
    if (l.crop_to > 0 && (y.h() != l.crop_to || y.w() != l.crop_to)) {
      c.pre_crop_shape = y.shape();
      c.cropped = true;
      y = nn::center_crop(y, l.crop_to, l.crop_to, c.crop_y, c.crop_x);
    }
    if (l.batchnorm) {
      bool batch = mode != NormMode::eval;
      Tensor* rm = running && mode == NormMode::train ? &running->at(names.mean) : nullptr;
      Tensor* rv = running && mode == NormMode::train ? &running->at(names.var) : nullptr;
      Tensor dummy_m = m.buffers.at(names.mean), dummy_v = m.buffers.at(names.var);
      y = nn::batchnorm_forward(y, m.params.at(names.gamma), m.params.at(names.beta), rm ? *rm : dummy_m,
                                rv ? *rv : dummy_v, batch, rm != nullptr, c.bn);
    }
    t.preacts.push_back(y);
    nn::activate_inplace(y, l.activation);
    c.input = std::move(x);
    c.own_channels = y.c();
    t.outputs.push_back(y);
    auto it = concat_after.find(l.name);
    x = it != concat_after.end() ? concat_channels(y, *it->second) : std::move(y);
  }
  t.result = std::move(x);
  return t;
}

struct StackBackward {
  Tensor input_grad;                   ///< empty unless requested
  std::map<std::string, Tensor> skip;  ///< gradients for concatenated tensors, keyed by target layer
};

/// Gradient injection points for stack_backward.
struct StackGradients {
  std::map<int, Tensor> at_output;  ///< d loss / d outputs[i]
  std::map<int, Tensor> at_preact;  ///< d loss / d preacts[i]
  std::optional<Tensor> at_result;  ///< d loss / d result (post-concat)
};

inline void accumulate(ParamMap& grads, const std::string& name, const std::vector<int>& shape, auto&& fn) {
  auto it = grads.find(name);
  if (it == grads.end()) it = grads.emplace(name, Tensor(shape)).first;
  fn(it->second);
}

/// Backpropagates through a traced stack. Parameter gradients are
/// accumulated into `grads` when non-null.
inline StackBackward stack_backward(const ModelState& m, const std::vector<LayerSpec>& layers,
                                    const std::string& prefix, const StackTrace& t, StackGradients g, ParamMap* grads,
                                    bool need_input_grad) {
  StackBackward out;
  std::optional<Tensor> carry = std::move(g.at_result);  // gradient w.r.t. the input of layer i+1
  for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i) {
    const LayerSpec& l = layers[static_cast<std::size_t>(i)];
    const LayerCache& c = t.caches[static_cast<std::size_t>(i)];
    const Tensor& y = t.outputs[static_cast<std::size_t>(i)];
    Tensor dy;
    if (carry) {
      if (carry->c() != c.own_channels) {
        // Split off the skip part of a concatenated output.
        Tensor own(y.shape()), skip(carry->n(), carry->c() - c.own_channels, carry->h(), carry->w());
        for (int n = 0; n < carry->n(); ++n) {
          auto src = carry->item(n);
          std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(own.item_size()), own.item(n).begin());
          std::copy(src.begin() + static_cast<std::ptrdiff_t>(own.item_size()), src.end(), skip.item(n).begin());
        }
        out.skip[l.name] = std::move(skip);
        dy = std::move(own);
      } else {
        dy = std::move(*carry);
      }
    }
    if (auto it = g.at_output.find(i); it != g.at_output.end()) {
      if (dy.empty()) dy = it->second;
      else dy += it->second;
    }
    bool have_pre = g.at_preact.count(i) > 0;
    if (dy.empty() && !have_pre) {
      carry.reset();
      // Nothing flows into this layer from above; keep walking for earlier injections.
      bool earlier = false;
      for (const auto& [k, v] : g.at_output) earlier |= k < i;
      for (const auto& [k, v] : g.at_preact) earlier |= k < i;
      if (!earlier) break;
      continue;
    }
    if (dy.empty()) dy = Tensor(y.shape());
    nn::activation_backward_inplace(dy, y, l.activation);
    if (have_pre) dy += g.at_preact.at(i);

    auto names = param_names(prefix, l);
    if (l.batchnorm) {
      Tensor* dg = nullptr;
      Tensor* db = nullptr;
      if (grads) {
        accumulate(*grads, names.gamma, {l.out_channels}, [&](Tensor& v) { dg = &v; });
        accumulate(*grads, names.beta, {l.out_channels}, [&](Tensor& v) { db = &v; });
      }
      dy = nn::batchnorm_backward(dy, m.params.at(names.gamma), c.bn, dg, db);
    }
    if (c.cropped) dy = nn::center_crop_backward(c.pre_crop_shape, dy, c.crop_y, c.crop_x);

    bool want_dx = need_input_grad || i > 0;
    Tensor dx;
    nn::ConvParams cp{l.stride, l.padding, l.dilation};
    if (l.kind == LayerKind::pool_max) {
      if (want_dx) dx = nn::maxpool_backward(c.input.shape(), c.argmax, dy);
    } else {
      const Tensor& w = m.params.at(names.weight);
      Tensor* dw = nullptr;
      Tensor* db = nullptr;
      if (grads) {
        accumulate(*grads, names.weight, w.shape(), [&](Tensor& v) { dw = &v; });
        accumulate(*grads, names.bias, {l.out_channels}, [&](Tensor& v) { db = &v; });
      }
      if (l.kind == LayerKind::deconv)
        nn::deconv2d_backward(c.input, w, dy, cp, want_dx ? &dx : nullptr, dw, db);
      else
        nn::conv2d_backward(c.input, w, dy, cp, want_dx ? &dx : nullptr, dw, db);
    }
    if (i == 0) {
      if (need_input_grad) out.input_grad = std::move(dx);
      break;
    }
    carry = std::move(dx);
  }
  return out;
}

}  // namespace synthfeat
