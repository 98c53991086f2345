#pragma once

// Turns a trained trunk into a standalone backbone: batchnorm folded into the
// preceding layers, the bottleneck convolutions unrolled into dense layers
// over the fixed training grid, optional per-layer variance rescaling.

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synthfeat/checkpoint.hpp"
#include "synthfeat/dataio.hpp"
#include "synthfeat/network.hpp"

namespace synthfeat {

// ---------------------------------------------------------------------------
// Batchnorm absorption

/// Folds eval-mode batchnorm into the weights and bias of the layer before
/// it: w' = w g / sqrt(v + eps), b' = (b - mu) g / sqrt(v + eps) + beta.
/// Every section (trunk, heads, discriminator) is folded. Running statistics
/// and the gamma/beta parameters are dropped.
inline ModelState absorb_batchnorm(const ModelState& m, double eps = nn::kBatchNormEps) {
  ModelState out = m;
  auto fold = [&](const std::string& prefix, std::vector<LayerSpec>& layers) {
    for (auto& l : layers) {
      if (!l.batchnorm) continue;
      if (!l.parametric()) throw ShapeError("batchnorm after non-parametric layer " + prefix + l.name);
      auto n = param_names(prefix, l);
      Tensor& w = out.params.at(n.weight);
      Tensor& b = out.params.at(n.bias);
      const Tensor &g = m.params.at(n.gamma), &be = m.params.at(n.beta);
      const Tensor &mu = m.buffers.at(n.mean), &var = m.buffers.at(n.var);
      const int co = l.out_channels;
      std::vector<double> scale(static_cast<std::size_t>(co));
      for (int c = 0; c < co; ++c) {
        std::size_t k = static_cast<std::size_t>(c);
        scale[k] = static_cast<double>(g[k]) / std::sqrt(static_cast<double>(var[k]) + eps);
        b[k] = static_cast<float>((static_cast<double>(b[k]) - mu[k]) * scale[k] + be[k]);
      }
      // conv weights are [out, in, k, k]; deconv weights are [in, out, k, k]
      const bool out_first = l.kind != LayerKind::deconv;
      const int d0 = w.dim(0), d1 = w.dim(1);
      const std::size_t kk = static_cast<std::size_t>(w.dim(2)) * w.dim(3);
      for (int i = 0; i < d0; ++i)
        for (int j = 0; j < d1; ++j) {
          double s = scale[static_cast<std::size_t>(out_first ? i : j)];
          float* p = w.data() + (static_cast<std::size_t>(i) * d1 + j) * kk;
          for (std::size_t q = 0; q < kk; ++q) p[q] = static_cast<float>(p[q] * s);
        }
      out.params.erase(n.gamma);
      out.params.erase(n.beta);
      out.buffers.erase(n.mean);
      out.buffers.erase(n.var);
      l.batchnorm = false;
    }
  };
  fold(kTrunkPrefix, out.arch.base);
  fold(kTrunkPrefix, out.arch.bottleneck);
  for (auto& h : out.arch.heads) fold(head_prefix(h.name), h.layers);
  fold(kDiscPrefix, out.arch.discriminator);
  return out;
}

// ---------------------------------------------------------------------------
// Backbone

enum class BackboneOp { conv, pool, dense };

NLOHMANN_JSON_SERIALIZE_ENUM(BackboneOp, {{BackboneOp::conv, "conv"}, {BackboneOp::pool, "pool"}, {BackboneOp::dense, "dense"}})

struct BackboneLayer {
  std::string name;
  BackboneOp op = BackboneOp::conv;
  int kernel = 1, stride = 1, padding = 0, dilation = 1;
  Activation activation = Activation::none;
  std::vector<int> in_shape;  ///< dense only: the fixed (C, H, W) input grid
  int out_features = 0;       ///< dense only
};

inline void to_json(nlohmann::json& j, const BackboneLayer& l) {
  j = {{"name", l.name},         {"op", l.op},
       {"kernel", l.kernel},     {"stride", l.stride},
       {"padding", l.padding},   {"dilation", l.dilation},
       {"activation", l.activation}, {"in_shape", l.in_shape},
       {"out_features", l.out_features}};
}

inline void from_json(const nlohmann::json& j, BackboneLayer& l) {
  l.name = j.at("name").get<std::string>();
  l.op = j.at("op").get<BackboneOp>();
  l.kernel = j.at("kernel");
  l.stride = j.at("stride");
  l.padding = j.at("padding");
  l.dilation = j.at("dilation");
  l.activation = j.at("activation").get<Activation>();
  l.in_shape = j.at("in_shape").get<std::vector<int>>();
  l.out_features = j.at("out_features");
}

/// Plain conv/pool/dense network without normalization layers. Parameters
/// are stored as "<layer>.weight" / "<layer>.bias"; dense weights are
/// [out_features, C*H*W].
struct Backbone {
  int input_resolution = 0;
  int input_channels = 3;
  std::vector<BackboneLayer> layers;
  ParamMap params;
  nlohmann::json provenance = nlohmann::json::object();

  int index(const std::string& name) const {
    std::string n = name == "conv6" ? "fc6" : name == "conv7" ? "fc7" : name;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].name == n) return static_cast<int>(i);
    return -1;
  }
  std::vector<std::string> layer_names() const {
    std::vector<std::string> v;
    for (const auto& l : layers) v.push_back(l.name);
    return v;
  }
};

/// Post-activation output of every layer up to and including `until`
/// (all layers when empty). Dense outputs are N x F x 1 x 1.
inline std::vector<Tensor> backbone_forward(const Backbone& b, const Tensor& images, const std::string& until = "") {
  int stop = until.empty() ? static_cast<int>(b.layers.size()) - 1 : b.index(until);
  if (stop < 0) throw ShapeError("unknown backbone layer '" + until + "'");
  if (images.rank() != 4 || images.c() != b.input_channels) throw ShapeError("backbone input " + shape_string(images.shape()));
  std::vector<Tensor> outs;
  Tensor x = images;
  for (int i = 0; i <= stop; ++i) {
    const BackboneLayer& l = b.layers[static_cast<std::size_t>(i)];
    Tensor y;
    if (l.op == BackboneOp::pool) {
      std::vector<int> arg;
      y = nn::maxpool_forward(x, l.kernel, l.stride, l.padding, arg);
    } else if (l.op == BackboneOp::conv) {
      y = nn::conv2d_forward(x, b.params.at(l.name + ".weight"), b.params.at(l.name + ".bias"),
                             {l.stride, l.padding, l.dilation});
    } else {
      std::vector<int> got(x.shape().begin() + 1, x.shape().end());
      if (got != l.in_shape)
        throw ShapeError("dense layer " + l.name + " expects a fixed " + shape_string(l.in_shape) + " grid, got " +
                         shape_string(got) + " (input must be " + std::to_string(b.input_resolution) + "x" +
                         std::to_string(b.input_resolution) + ")");
      const Tensor& w = b.params.at(l.name + ".weight");
      const Tensor& bias = b.params.at(l.name + ".bias");
      const int fin = w.dim(1), fout = w.dim(0);
      Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(w.data(), fout, fin);
      Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>> X(x.data(), fin, x.n());
      y = Tensor(x.n(), fout, 1, 1);
      Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>> Y(y.data(), fout, x.n());
      Y.noalias() = W * X;
      Y.colwise() += Eigen::Map<const Eigen::VectorXf>(bias.data(), fout);
    }
    nn::activate_inplace(y, l.activation);
    outs.push_back(y);
    x = std::move(y);
  }
  return outs;
}

inline Tensor backbone_features(const Backbone& b, const Tensor& images, const std::string& layer) {
  return backbone_forward(b, images, layer).back();
}

/// Grid position whose conv output the dense layer reproduces.
inline std::pair<int, int> dense_anchor(int out_h, int out_w) { return {out_h / 2, out_w / 2}; }

/// Trunk of a batchnorm-free model as a Backbone. Base layers stay
/// convolutional; the bottleneck layers become dense layers equal to the
/// convolution output at the anchor position of the training-resolution
/// grid. A bottleneck layer after the first must be 1x1.
inline Backbone convert_fc(const ModelState& m) {
  const ArchitectureConfig& a = m.arch;
  if (a.input_resolution <= 0) throw ConfigError("dense conversion requires a fixed input resolution");
  Backbone b;
  b.input_resolution = a.input_resolution;
  b.input_channels = a.input_channels;
  Shape3 s{a.input_channels, a.input_resolution, a.input_resolution};
  auto add_conv_params = [&](const LayerSpec& l) {
    auto n = param_names(kTrunkPrefix, l);
    b.params[l.name + ".weight"] = m.params.at(n.weight);
    b.params[l.name + ".bias"] = m.params.at(n.bias);
  };
  for (const auto& l : a.base) {
    if (l.batchnorm) throw ConfigError("convert_fc needs batchnorm absorbed first (" + l.name + ")");
    if (l.crop_to > 0) throw ShapeError("cropping trunk layer " + l.name + " cannot be exported");
    BackboneLayer bl{l.name, l.parametric() ? BackboneOp::conv : BackboneOp::pool, l.kernel, l.stride, l.padding, l.dilation,
                     l.activation, {}, 0};
    if (l.kind == LayerKind::deconv) throw ShapeError("deconvolution in the trunk cannot be exported");
    if (l.parametric()) add_conv_params(l);
    b.layers.push_back(bl);
    s = shape_of(l, s);
  }
  bool first = true;
  for (const auto& l : a.bottleneck) {
    if (l.batchnorm) throw ConfigError("convert_fc needs batchnorm absorbed first (" + l.name + ")");
    if (!l.parametric() || l.kind == LayerKind::deconv) throw ShapeError("bottleneck layer " + l.name + " is not a convolution");
    Shape3 o = shape_of(l, s);
    auto [cy, cx] = dense_anchor(o.h, o.w);
    if (!first) {
      if (l.kernel != 1) throw ShapeError("bottleneck layer " + l.name + " after a dense layer must be 1x1");
      s = {s.c, 1, 1};
      cy = cx = 0;
    }
    const Tensor& w = m.params.at(param_names(kTrunkPrefix, l).weight);
    const int co = l.out_channels, ci = s.c;
    Tensor dense({co, ci * s.h * s.w});
    for (int oc = 0; oc < co; ++oc)
      for (int c = 0; c < ci; ++c)
        for (int ky = 0; ky < l.kernel; ++ky)
          for (int kx = 0; kx < l.kernel; ++kx) {
            int iy = cy * l.stride - l.padding + ky * l.dilation;
            int ix = cx * l.stride - l.padding + kx * l.dilation;
            if (!first) iy = ix = 0;
            if (iy < 0 || ix < 0 || iy >= s.h || ix >= s.w) continue;
            dense[static_cast<std::size_t>(oc) * dense.dim(1) + (static_cast<std::size_t>(c) * s.h + iy) * s.w + ix] +=
                w.at(oc, c, ky, kx);
          }
    b.params[l.name + ".weight"] = std::move(dense);
    b.params[l.name + ".bias"] = m.params.at(param_names(kTrunkPrefix, l).bias);
    b.layers.push_back({l.name, BackboneOp::dense, l.kernel, l.stride, l.padding, l.dilation, l.activation,
                        {s.c, s.h, s.w}, co});
    s = {co, 1, 1};
    first = false;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Variance rescaling

struct RescaleReport {
  std::vector<std::pair<std::string, double>> scales;  ///< per parametric layer, in order
  double final_compensation = 1.0;                     ///< owed to the absent next layer
};

/// Walks the parametric layers in order. Each layer's weights and bias are
/// divided by the empirical std s of its output on `calibration`, and the
/// next parametric layer's weights are multiplied by s, so intermediate
/// layers compute their original function divided by their own s (ReLU and
/// max-pooling commute with positive scales). The last layer's output ends
/// up divided by final_compensation.
inline RescaleReport rescale_weights(Backbone& b, const Tensor& calibration) {
  RescaleReport r;
  double carry = 1.0;
  for (std::size_t i = 0; i < b.layers.size(); ++i) {
    const BackboneLayer& l = b.layers[i];
    if (l.op == BackboneOp::pool) continue;
    Tensor& w = b.params.at(l.name + ".weight");
    Tensor& bias = b.params.at(l.name + ".bias");
    for (auto& v : w.values()) v = static_cast<float>(v * carry);
    Tensor out = backbone_features(b, calibration, l.name);
    double s = 0, s2 = 0;
    for (float v : out.values()) {
      s += v;
      s2 += static_cast<double>(v) * v;
    }
    const double n = static_cast<double>(out.size());
    double var = s2 / n - (s / n) * (s / n);
    if (!(var > 1e-20)) throw NumericError("zero-variance activations at " + l.name + " on the calibration set");
    double sd = std::sqrt(var);
    for (auto& v : w.values()) v = static_cast<float>(v / sd);
    for (auto& v : bias.values()) v = static_cast<float>(v / sd);
    r.scales.emplace_back(l.name, sd);
    carry = sd;
  }
  r.final_compensation = carry;
  return r;
}

/// Product of the scales recorded up to and including `layer`'s own
/// factor: original output = rescaled output * scale_of(layer).
inline double scale_of(const RescaleReport& r, const std::string& layer) {
  for (const auto& [name, s] : r.scales)
    if (name == layer) return s;
  throw ShapeError("no recorded scale for " + layer);
}

// ---------------------------------------------------------------------------
// Archive

inline void save_backbone(const std::filesystem::path& path, const Backbone& b) {
  ArchiveData a;
  a.kind = "backbone";
  a.header = {{"input_resolution", b.input_resolution},
              {"input_channels", b.input_channels},
              {"layers", b.layers},
              {"provenance", b.provenance}};
  a.params = b.params;
  write_archive(path, a);
}

inline Backbone load_backbone(const std::filesystem::path& path) {
  ArchiveData a = read_archive(path);
  if (a.kind != "backbone") throw IoError(path.string() + ": archive kind '" + a.kind + "' is not a backbone");
  if (!a.buffers.empty()) throw IoError(path.string() + ": backbone carries running statistics");
  Backbone b;
  try {
    b.input_resolution = a.header.at("input_resolution");
    b.input_channels = a.header.at("input_channels");
    b.layers = a.header.at("layers").get<std::vector<BackboneLayer>>();
    b.provenance = a.header.value("provenance", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad header: " + e.what());
  }
  for (const auto& l : b.layers) {
    if (l.op == BackboneOp::pool) continue;
    for (const char* suffix : {".weight", ".bias"})
      if (!a.params.count(l.name + suffix)) throw IoError(path.string() + ": missing tensor " + l.name + suffix);
  }
  b.params = std::move(a.params);
  return b;
}

struct ExportOptions {
  bool rescale = true;
  int calibration_images = 64;
  bool grayscale = false;  ///< calibrate on the pretraining input encoding
};

/// Checkpoint to backbone: absorb, convert, optionally rescale on images
/// from `calib_dir`, record provenance.
inline std::pair<Backbone, std::optional<RescaleReport>> export_backbone(const std::filesystem::path& checkpoint,
                                                                         const std::filesystem::path& calib_dir,
                                                                         const ExportOptions& opt = {}) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  Backbone b = convert_fc(absorb_batchnorm(ck.model));
  std::optional<RescaleReport> report;
  nlohmann::json rescale = {{"applied", false}};
  if (opt.rescale) {
    if (calib_dir.empty()) throw ConfigError("rescaling needs a calibration directory");
    int res = b.input_resolution;
    BatchStream s(calib_dir, opt.calibration_images, 0, Domain::real, {opt.grayscale, res, res, opt.calibration_images});
    report = rescale_weights(b, s.batch_at(0).inputs);
    nlohmann::json scales = nlohmann::json::object();
    for (const auto& [n, v] : report->scales) scales[n] = v;
    rescale = {{"applied", true},
               {"method", "per-layer variance normalization only"},
               {"calibration_dir", calib_dir.string()},
               {"calibration_images", s.size()},
               {"grayscale", opt.grayscale},
               {"scales", scales},
               {"final_compensation", report->final_compensation}};
  }
  b.provenance = {{"source_checkpoint", checkpoint.string()},
                  {"source_hash", file_hash(checkpoint)},
                  {"family", ck.model.arch.family},
                  {"absorb_batchnorm", true},
                  {"convert_fc", {{"anchor_resolution", b.input_resolution}, {"anchor", "grid centre (h/2, w/2)"}}},
                  {"rescale", rescale}};
  return {std::move(b), report};
}

}  // namespace synthfeat
