#pragma once

// Alternating training loop: stage 1 updates base and heads with the
// discriminator frozen, stage 2 updates the discriminator with the base
// frozen. Also loss-weight calibration, checkpoint cadence, resume and the
// JSON-lines training log.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synthfeat/checkpoint.hpp"
#include "synthfeat/dataio.hpp"
#include "synthfeat/losses.hpp"
#include "synthfeat/network.hpp"
#include "synthfeat/optim.hpp"

namespace synthfeat {

using loss::LossWeights;

// ---------------------------------------------------------------------------
// Flat key = value config files

/// Parses one value: "quoted string", true/false, integer or float. Bare
/// words are taken as strings.
inline nlohmann::json parse_config_value(const std::string& raw, const std::string& where) {
  std::string v = raw;
  if (v.empty()) throw ConfigError(where + ": missing value");
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"') throw ConfigError(where + ": unterminated string");
    std::string out;
    for (std::size_t i = 1; i + 1 < v.size(); ++i) {
      if (v[i] == '\\' && i + 2 < v.size()) {
        char e = v[++i];
        out += e == 'n' ? '\n' : e == 't' ? '\t' : e;
      } else {
        out += v[i];
      }
    }
    return out;
  }
  if (v == "true") return true;
  if (v == "false") return false;
  try {
    std::size_t used = 0;
    long long i = std::stoll(v, &used);
    if (used == v.size()) return i;
  } catch (const std::exception&) {
  }
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  return v;
}

/// Reads `key = value` lines into a JSON object. `#` starts a comment
/// outside quotes; a `[section]` header is rejected since the schema is flat.
inline nlohmann::json parse_flat_config(const std::string& text, const std::string& origin) {
  nlohmann::json out = nlohmann::json::object();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    std::string where = origin + ":" + std::to_string(lineno);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') throw ConfigError(where + ": sections are not supported, the schema is flat");
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (out.contains(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
    out[key] = parse_config_value(trim(line.substr(eq + 1)), where);
  }
  return out;
}

// ---------------------------------------------------------------------------
// TrainConfig

struct TrainConfig {
  // architecture
  std::string family = "alexnet";
  int resolution = 64;
  int width_divisor = 0;  ///< 0: family default
  std::string tap_layer = "conv5";
  bool tap_pre_activation = false;
  // schedule
  long long max_iterations = 2000;
  int batch_size_syn = 8;
  int batch_size_real = 8;
  std::string optimizer = "adam";
  AdamConfig adam;
  // objective
  LossWeights weights;
  bool auto_calibrate = false;
  int calibration_batches = 4;
  bool adaptation = true;
  bool bifool = false;
  long long warmup_iterations = 100;
  bool cache_stage_features = false;
  // data
  std::filesystem::path syn_dir, real_dir;
  int syn_limit = 0, real_limit = 0;
  bool grayscale = true;
  // run
  std::uint64_t seed = 0;
  long long checkpoint_every = 500;  ///< 0: final checkpoint only
  std::filesystem::path out_dir = "run";
  std::filesystem::path resume;  ///< checkpoint to continue from
  bool write_csv = true;

  void validate() const;
  ArchitectureConfig architecture() const;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {
      {"family", c.family},
      {"resolution", c.resolution},
      {"width_divisor", c.width_divisor},
      {"tap_layer", c.tap_layer},
      {"tap_pre_activation", c.tap_pre_activation},
      {"max_iterations", c.max_iterations},
      {"batch_size_syn", c.batch_size_syn},
      {"batch_size_real", c.batch_size_real},
      {"optimizer", c.optimizer},
      {"lr_bh", c.adam.lr_bh},
      {"lr_d", c.adam.lr_d},
      {"beta1", c.adam.beta1},
      {"beta2", c.adam.beta2},
      {"adam_eps", c.adam.eps},
      {"lambda_edge", c.weights.edge},
      {"lambda_depth", c.weights.depth},
      {"lambda_normal", c.weights.normal},
      {"auto_calibrate", c.auto_calibrate},
      {"calibration_batches", c.calibration_batches},
      {"adaptation", c.adaptation},
      {"bifool", c.bifool},
      {"warmup_iterations", c.warmup_iterations},
      {"cache_stage_features", c.cache_stage_features},
      {"syn_dir", c.syn_dir.string()},
      {"real_dir", c.real_dir.string()},
      {"syn_limit", c.syn_limit},
      {"real_limit", c.real_limit},
      {"grayscale", c.grayscale},
      {"seed", c.seed},
      {"checkpoint_every", c.checkpoint_every},
      {"out_dir", c.out_dir.string()},
      {"resume", c.resume.string()},
      {"write_csv", c.write_csv},
  };
}

/// Applies key/value pairs onto `c`. Unknown keys and type mismatches are
/// errors. Relative paths are resolved against `base_dir` when given.
inline void apply_config(TrainConfig& c, const nlohmann::json& kv, const std::filesystem::path& base_dir = {}) {
  const nlohmann::json known = to_json(TrainConfig{});
  nlohmann::json merged = to_json(c);
  for (const auto& [key, value] : kv.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    const auto& want = known[key];
    bool ok = want.is_string()            ? value.is_string()
              : want.is_boolean()         ? value.is_boolean()
              : want.is_number_integer()  ? value.is_number_integer()
                                          : value.is_number();
    if (!ok) throw ConfigError("config key '" + key + "' has the wrong type (expected " + want.type_name() + ")");
    if (want.is_number_unsigned() && value.get<long long>() < 0) throw ConfigError("config key '" + key + "' must be >= 0");
    merged[key] = value;
  }
  auto get = [&](const char* key, auto& dst) { dst = merged[key].get<std::decay_t<decltype(dst)>>(); };
  auto path = [&](const char* key) {
    std::filesystem::path p = merged[key].get<std::string>();
    if (!p.empty() && p.is_relative() && !base_dir.empty() && kv.contains(key)) p = base_dir / p;
    return p;
  };
  get("family", c.family);
  get("resolution", c.resolution);
  get("width_divisor", c.width_divisor);
  get("tap_layer", c.tap_layer);
  get("tap_pre_activation", c.tap_pre_activation);
  get("max_iterations", c.max_iterations);
  get("batch_size_syn", c.batch_size_syn);
  get("batch_size_real", c.batch_size_real);
  get("optimizer", c.optimizer);
  get("lr_bh", c.adam.lr_bh);
  get("lr_d", c.adam.lr_d);
  get("beta1", c.adam.beta1);
  get("beta2", c.adam.beta2);
  get("adam_eps", c.adam.eps);
  get("lambda_edge", c.weights.edge);
  get("lambda_depth", c.weights.depth);
  get("lambda_normal", c.weights.normal);
  get("auto_calibrate", c.auto_calibrate);
  get("calibration_batches", c.calibration_batches);
  get("adaptation", c.adaptation);
  get("bifool", c.bifool);
  get("warmup_iterations", c.warmup_iterations);
  get("cache_stage_features", c.cache_stage_features);
  c.syn_dir = path("syn_dir");
  c.real_dir = path("real_dir");
  get("syn_limit", c.syn_limit);
  get("real_limit", c.real_limit);
  get("grayscale", c.grayscale);
  get("seed", c.seed);
  get("checkpoint_every", c.checkpoint_every);
  c.out_dir = path("out_dir");
  c.resume = path("resume");
  get("write_csv", c.write_csv);
}

/// Applies one `key=value` override (command-line form).
inline void apply_override(TrainConfig& c, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  nlohmann::json kv = nlohmann::json::object();
  kv[assignment.substr(0, eq)] = parse_config_value(assignment.substr(eq + 1), "override");
  apply_config(c, kv);
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  TrainConfig c;
  apply_config(c, parse_flat_config(ss.str(), path.string()), path.parent_path());
  return c;
}

inline ArchitectureConfig TrainConfig::architecture() const {
  ArchitectureConfig a = build_architecture(family, resolution, width_divisor);
  if (trunk_index(a, tap_layer) < 0) throw ConfigError("tap_layer '" + tap_layer + "' is not a layer of the base network");
  a.tap_layer = resolve_tap(a, tap_layer);
  a.tap_pre_activation = tap_pre_activation;
  infer_shapes(a);
  return a;
}

inline void TrainConfig::validate() const {
  if (max_iterations < 1) throw ConfigError("max_iterations must be >= 1");
  if (batch_size_syn < 1 || batch_size_real < 1) throw ConfigError("batch sizes must be >= 1");
  if (optimizer != "adam") throw ConfigError("unknown optimizer '" + optimizer + "' (supported: adam)");
  if (!(adam.lr_bh > 0) || !(adam.lr_d > 0)) throw ConfigError("learning rates must be > 0");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1) || !(adam.eps > 0))
    throw ConfigError("adam moments need 0 <= beta < 1 and eps > 0");
  weights.validate();
  if (calibration_batches < 1) throw ConfigError("calibration_batches must be >= 1");
  if (warmup_iterations < 0) throw ConfigError("warmup_iterations must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (syn_dir.empty()) throw ConfigError("syn_dir is required");
  if ((adaptation || bifool) && real_dir.empty()) throw ConfigError("real_dir is required when adaptation is on");
  if (bifool && !adaptation) throw ConfigError("bifool needs adaptation");
  if (out_dir.empty()) throw ConfigError("out_dir is required");
  architecture();
}

inline std::string config_text(const TrainConfig& c) {
  std::string out;
  const nlohmann::json j = to_json(c);
  for (const auto& [k, v] : j.items()) out += k + " = " + v.dump() + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// One iteration

struct StepOptions {
  LossWeights weights;
  bool adaptation = true;
  bool bifool = false;
  long long warmup = 100;
  bool cache_features = false;
};

inline StepOptions step_options(const TrainConfig& c, const LossWeights& w) {
  return {w, c.adaptation, c.bifool, c.warmup_iterations, c.cache_stage_features};
}

struct StepRecord {
  long long iteration = 0;
  loss::Breakdown parts;
  double weighted_tasks = 0;  ///< lambda-weighted task losses
  double total_bh = 0;        ///< adversarial + weighted tasks
  std::optional<double> loss_d;
  std::optional<double> d_acc_syn, d_acc_real;
  std::array<double, 3> grad_norm{};  ///< per head: contour, depth, normal
  bool adversarial = false;
  double wall_ms = 0;
};

inline constexpr int kLogSchema = 1;

inline nlohmann::json to_json(const StepRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"schema", kLogSchema},
          {"iteration", r.iteration},
          {"adv", r.parts.adv},
          {"edge", r.parts.edge},
          {"depth", r.parts.depth},
          {"normal", r.parts.normal},
          {"weighted_tasks", r.weighted_tasks},
          {"total_bh", r.total_bh},
          {"loss_d", opt(r.loss_d)},
          {"d_acc_syn", opt(r.d_acc_syn)},
          {"d_acc_real", opt(r.d_acc_real)},
          {"grad_norm", {{"contour", r.grad_norm[0]}, {"depth", r.grad_norm[1]}, {"normal", r.grad_norm[2]}}},
          {"adversarial", r.adversarial},
          {"wall_ms", r.wall_ms}};
}

inline StepRecord record_from_json(const nlohmann::json& j) {
  auto opt = [&](const char* k) { return j.at(k).is_null() ? std::nullopt : std::optional<double>(j.at(k).get<double>()); };
  StepRecord r;
  r.iteration = j.at("iteration");
  r.parts = {j.at("adv").get<double>(), j.at("edge").get<double>(), j.at("depth").get<double>(),
             j.at("normal").get<double>()};
  r.weighted_tasks = j.at("weighted_tasks");
  r.total_bh = j.at("total_bh");
  r.loss_d = opt("loss_d");
  r.d_acc_syn = opt("d_acc_syn");
  r.d_acc_real = opt("d_acc_real");
  const auto& g = j.at("grad_norm");
  r.grad_norm = {g.at("contour").get<double>(), g.at("depth").get<double>(), g.at("normal").get<double>()};
  r.adversarial = j.at("adversarial");
  r.wall_ms = j.at("wall_ms");
  return r;
}

/// Gradients of the two stages, for inspection.
struct StepGradients {
  ParamMap base_heads, discriminator;
};

namespace detail {

inline constexpr std::array<const char*, 3> kHeadOrder = {kContourHead, kDepthHead, kNormalHead};

inline std::array<double, 3> task_weights(const LossWeights& w) { return {w.edge, w.depth, w.normal}; }

inline std::set<std::string> inactive_heads(const LossWeights& w) {
  std::set<std::string> s;
  auto tw = task_weights(w);
  for (std::size_t i = 0; i < 3; ++i)
    if (tw[i] <= 0) s.insert(kHeadOrder[i]);
  return s;
}

inline double prefix_norm(const ParamMap& g, const std::string& prefix) {
  double s = 0;
  for (const auto& [name, t] : g)
    if (name.rfind(prefix, 0) == 0)
      for (float v : t.values()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

inline Tensor as_tensor(const std::vector<float>& v, const std::vector<int>& shape) {
  Tensor t(shape);
  t.assign(v);
  return t;
}

/// Task-loss inputs for the heads that ran.
inline loss::GeneratorInputs<float> task_inputs(const HeadOutput& heads, const TargetTensors& tt) {
  loss::GeneratorInputs<float> in;
  in.dims = {tt.valid.n(), tt.valid.plane()};
  if (!heads.contour.empty()) in.edge_logits = heads.contour.span();
  if (!heads.log_depth.empty()) in.log_depth = heads.log_depth.span();
  if (!heads.normal.empty()) in.normals = heads.normal.span();
  in.contour = tt.contour.span();
  in.valid = tt.valid.span();
  in.beta = tt.beta;
  in.target_log_depth = tt.log_depth.span();
  in.target_normals = tt.normal.span();
  return in;
}

inline double fraction(const Tensor& logits, bool positive) {
  std::size_t hit = 0;
  for (float v : logits.values()) hit += positive ? v > 0 : v < 0;
  return logits.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(logits.size());
}

}  // namespace detail

/// Tap features kept from stage 1 for the cache_features shortcut.
struct StageFeatures {
  Tensor syn, real;
};

inline void check_batches(const Batch& syn, const Batch* real, const StepOptions& o) {
  if (syn.domain != Domain::synthetic || syn.targets.empty()) throw DataError("stage 1 needs a labelled synthetic batch");
  if ((o.adaptation || o.bifool) && (!real || real->size() == 0)) throw DataError("adaptation needs a real batch");
  if (real && real->domain != Domain::real) throw DataError("second batch is not from the real domain");
}

/// Stage 1: one optimizer step on base and heads. The discriminator runs in
/// eval mode and receives no parameter gradients. Fills the loss fields of
/// `rec`.
inline StageFeatures generator_stage(ModelState& m, Adam& opt, const Batch& syn, const Batch* real,
                                     const StepOptions& o, long long iteration, StepRecord& rec,
                                     ParamMap* grads_out = nullptr) {
  check_batches(syn, real, o);
  rec.iteration = iteration;
  rec.adversarial = o.adaptation && iteration > o.warmup;
  const bool bifool = rec.adversarial && o.bifool;

  TargetTensors tt = stack_targets(syn.targets);
  BaseOutput base = forward_base(m, syn.inputs, train_mode(m));
  HeadOutput heads = forward_heads(m, base, train_mode(m), detail::inactive_heads(o.weights));
  loss::GeneratorInputs<float> in = detail::task_inputs(heads, tt);

  std::optional<DiscOutput> d_syn, d_real;
  std::optional<BaseOutput> base_real;
  if (rec.adversarial) {
    d_syn = forward_discriminator(m, tap_features(m, base));
    in.d_syn = d_syn->logits.span();
    if (bifool) {
      base_real = forward_base(m, real->inputs);
      d_real = forward_discriminator(m, tap_features(m, *base_real));
      in.d_real = d_real->logits.span();
    }
  }
  loss::GeneratorGradients<float> gg;
  loss::generator_task_loss<float>(in, o.weights, bifool, &rec.parts, &gg);
  rec.total_bh = rec.parts.total(o.weights);
  rec.weighted_tasks = rec.parts.weighted_tasks(o.weights);
  if (!std::isfinite(rec.total_bh)) throw NumericError("non-finite base/head loss at iteration " + std::to_string(iteration));

  HeadGradients hg;
  if (!heads.contour.empty()) hg.contour = detail::as_tensor(gg.edge_logits, heads.contour.shape());
  if (!heads.log_depth.empty()) hg.log_depth = detail::as_tensor(gg.log_depth, heads.log_depth.shape());
  if (!heads.normal.empty()) hg.normal = detail::as_tensor(gg.normals, heads.normal.shape());
  ParamMap g;
  StackGradients trunk = backward_heads(m, base, heads, hg, &g);
  if (rec.adversarial) {
    Tensor dl = detail::as_tensor(gg.d_syn, d_syn->logits.shape());
    inject_tap_gradient(m, trunk, backward_discriminator(m, *d_syn, dl, nullptr, true));
  }
  backward_base(m, base, std::move(trunk), &g);
  if (bifool) {
    StackGradients rg;
    Tensor dl = detail::as_tensor(gg.d_real, d_real->logits.shape());
    inject_tap_gradient(m, rg, backward_discriminator(m, *d_real, dl, nullptr, true));
    backward_base(m, *base_real, std::move(rg), &g);
  }
  for (std::size_t h = 0; h < 3; ++h) rec.grad_norm[h] = detail::prefix_norm(g, head_prefix(detail::kHeadOrder[h]));
  for (const auto& [name, t] : g) {
    if (group_of(name) == ParamGroup::discriminator) throw ConfigError("stage 1 produced a discriminator gradient");
    if (!all_finite(t.span()))
      throw NumericError("non-finite gradient for " + name + " at iteration " + std::to_string(iteration));
  }
  opt.step(m.params, g, opt.config().lr_bh);
  if (grads_out) *grads_out = std::move(g);

  StageFeatures f;
  if (o.cache_features) {
    f.syn = tap_features(m, base);
    if (base_real) f.real = tap_features(m, *base_real);
  }
  return f;
}

/// Stage 2: one optimizer step on the discriminator over the concatenated
/// synthetic and real features. The base runs in eval mode, so neither its
/// parameters nor its running statistics change.
inline void discriminator_stage(ModelState& m, Adam& opt, const Batch& syn, const Batch& real,
                                const StageFeatures& cached, long long iteration, StepRecord& rec,
                                ParamMap* grads_out = nullptr) {
  Tensor f_syn = cached.syn, f_real = cached.real;
  if (f_syn.empty()) f_syn = tap_features(m, forward_base(m, syn.inputs));
  if (f_real.empty()) f_real = tap_features(m, forward_base(m, real.inputs));
  const int bs = f_syn.n();
  DiscOutput d = forward_discriminator(m, concat_batch(f_syn, f_real), train_mode(m));
  Tensor ls = slice_batch(d.logits, 0, bs), lr = slice_batch(d.logits, bs, d.logits.n());
  std::vector<float> gs, gr;
  double ld = loss::discriminator_loss<float>(ls.span(), lr.span(), &gs, &gr);
  if (!std::isfinite(ld)) throw NumericError("non-finite discriminator loss at iteration " + std::to_string(iteration));
  rec.loss_d = ld;
  rec.d_acc_syn = detail::fraction(ls, true);
  rec.d_acc_real = detail::fraction(lr, false);
  gs.insert(gs.end(), gr.begin(), gr.end());
  ParamMap g;
  backward_discriminator(m, d, detail::as_tensor(gs, d.logits.shape()), &g, false);
  opt.step(m.params, g, opt.config().lr_d);
  if (grads_out) *grads_out = std::move(g);
}

/// One iteration: stage 1, then stage 2 when adaptation is on.
/// `iteration` is 1-based; the adversarial term enters the base/head
/// objective once iteration > warmup. `real` may be null when adaptation is
/// off.
inline StepRecord train_step(ModelState& m, Adam& opt, const Batch& syn, const Batch* real, const StepOptions& o,
                             long long iteration, StepGradients* debug = nullptr) {
  auto t0 = std::chrono::steady_clock::now();
  StepRecord rec;
  StageFeatures f = generator_stage(m, opt, syn, real, o, iteration, rec, debug ? &debug->base_heads : nullptr);
  if (o.adaptation) discriminator_stage(m, opt, syn, *real, f, iteration, rec, debug ? &debug->discriminator : nullptr);
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

// ---------------------------------------------------------------------------
// Loss-weight calibration

/// lambda_t = median(g) / g_t over the active tasks; inactive tasks get 0.
inline LossWeights lambdas_from_norms(const std::array<double, 3>& norms, const std::array<bool, 3>& active) {
  std::vector<double> g;
  for (std::size_t i = 0; i < 3; ++i)
    if (active[i]) {
      if (!(norms[i] > 0) || !std::isfinite(norms[i]))
        throw NumericError(std::string("gradient norm of the ") + detail::kHeadOrder[i] + " task is " +
                           std::to_string(norms[i]) + " (dead head?)");
      g.push_back(norms[i]);
    }
  if (g.empty()) throw ConfigError("no task to calibrate");
  std::sort(g.begin(), g.end());
  std::size_t n = g.size();
  double med = n % 2 ? g[n / 2] : 0.5 * (g[n / 2 - 1] + g[n / 2]);
  std::array<double, 3> w{};
  for (std::size_t i = 0; i < 3; ++i) w[i] = active[i] ? med / norms[i] : 0.0;
  return {w[0], w[1], w[2]};
}

struct Calibration {
  LossWeights weights;
  std::array<double, 3> norms{};  ///< mean gradient norms, contour/depth/normal
};

/// Mean gradient norm of each task loss with respect to the last trunk
/// layer's parameters, over the given batches. Batch statistics are used
/// without touching running estimates, so the model is not modified.
inline Calibration calibrate_lambdas(const ModelState& m, const std::vector<Batch>& batches,
                                     const std::array<bool, 3>& active = {true, true, true}) {
  if (batches.empty()) throw ConfigError("calibration needs at least one batch");
  auto layers = trunk_layers(m.arch);
  auto names = param_names(kTrunkPrefix, layers.back());
  const ForwardOptions bs{NormMode::batch_stats, nullptr};
  std::set<std::string> skip;
  for (std::size_t i = 0; i < 3; ++i)
    if (!active[i]) skip.insert(detail::kHeadOrder[i]);

  Calibration c;
  for (const auto& batch : batches) {
    TargetTensors tt = stack_targets(batch.targets);
    BaseOutput base = forward_base(m, batch.inputs, bs);
    HeadOutput heads = forward_heads(m, base, bs, skip);
    for (std::size_t t = 0; t < 3; ++t) {
      if (!active[t]) continue;
      loss::GeneratorInputs<float> in = detail::task_inputs(heads, tt);
      if (t != 0) in.edge_logits = {};
      if (t != 1) in.log_depth = {};
      if (t != 2) in.normals = {};
      loss::GeneratorGradients<float> gg;
      loss::generator_task_loss<float>(in, {1, 1, 1}, false, nullptr, &gg);
      HeadGradients hg;
      if (t == 0) hg.contour = detail::as_tensor(gg.edge_logits, heads.contour.shape());
      if (t == 1) hg.log_depth = detail::as_tensor(gg.log_depth, heads.log_depth.shape());
      if (t == 2) hg.normal = detail::as_tensor(gg.normals, heads.normal.shape());
      ParamMap g;
      backward_base(m, base, backward_heads(m, base, heads, hg, nullptr), &g);
      double s = 0;
      for (const auto* n : {&names.weight, &names.bias, &names.gamma, &names.beta}) {
        auto it = g.find(*n);
        if (it == g.end()) continue;
        for (float v : it->second.values()) s += static_cast<double>(v) * v;
      }
      c.norms[t] += std::sqrt(s) / static_cast<double>(batches.size());
    }
  }
  c.weights = lambdas_from_norms(c.norms, active);
  return c;
}

// ---------------------------------------------------------------------------
// Full run

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::vector<std::filesystem::path> checkpoints;
  std::vector<StepRecord> records;  ///< iterations run by this call
  LossWeights weights;
  std::optional<Calibration> calibration;
  long long start_iteration = 0;
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, long long iteration) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "ckpt_%06lld.synthfeat", iteration);
  return out_dir / "checkpoints" / buf;
}

inline std::vector<StepRecord> read_train_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read training log " + path.string());
  std::vector<StepRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (j.at("schema").get<int>() != kLogSchema) throw IoError("unsupported log schema");
      out.push_back(record_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_csv_summary(const std::filesystem::path& path, const std::vector<StepRecord>& log) {
  std::ostringstream s;
  s << "iteration,adv,edge,depth,normal,weighted_tasks,total_bh,loss_d,d_acc_syn,d_acc_real,"
       "grad_contour,grad_depth,grad_normal,adversarial,wall_ms\n";
  auto opt = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string(); };
  for (const auto& r : log)
    s << r.iteration << ',' << r.parts.adv << ',' << r.parts.edge << ',' << r.parts.depth << ',' << r.parts.normal
      << ',' << r.weighted_tasks << ',' << r.total_bh << ',' << opt(r.loss_d) << ',' << opt(r.d_acc_syn) << ','
      << opt(r.d_acc_real) << ',' << r.grad_norm[0] << ',' << r.grad_norm[1] << ',' << r.grad_norm[2] << ','
      << (r.adversarial ? 1 : 0) << ',' << r.wall_ms << '\n';
  write_text_atomic(path, s.str());
}

inline nlohmann::json weights_json(const LossWeights& w) {
  return {{"edge", w.edge}, {"depth", w.depth}, {"normal", w.normal}};
}

/// Runs iterations start+1 .. max_iterations. Batch t is batch t-1 of each
/// deterministic stream, so a resumed run replays the same data. `run_info`
/// is stored with every checkpoint (the CLI puts its manifest path there).
inline TrainResult train(const TrainConfig& cfg, const std::function<void(const StepRecord&)>& on_step = {},
                         const nlohmann::json& run_info = nullptr) {
  namespace fs = std::filesystem;
  cfg.validate();
  TrainResult res;
  StreamOptions so{cfg.grayscale, cfg.resolution, cfg.resolution, cfg.syn_limit};
  BatchStream syn(cfg.syn_dir, cfg.batch_size_syn, derive_seed(cfg.seed, 2), Domain::synthetic, so);
  std::optional<BatchStream> real;
  if (cfg.adaptation) {
    so.limit = cfg.real_limit;
    real.emplace(cfg.real_dir, cfg.batch_size_real, derive_seed(cfg.seed, 3), Domain::real, so);
  }

  ModelState model;
  Adam opt(cfg.adam);
  const fs::path log_path = cfg.out_dir / "train_log.jsonl";
  std::vector<StepRecord> history;
  if (!cfg.resume.empty()) {
    LoadedCheckpoint ck = load_checkpoint(cfg.resume);
    ArchitectureConfig want = cfg.architecture();
    if (nlohmann::json(ck.model.arch) != nlohmann::json(want))
      throw ConfigError("checkpoint " + cfg.resume.string() + " was trained with a different architecture");
    model = std::move(ck.model);
    if (ck.optimizer) opt = *ck.optimizer;
    opt.set_config(cfg.adam);
    res.start_iteration = ck.train_state.at("iteration").get<long long>();
    const auto& w = ck.train_state.at("weights");
    res.weights = {w.at("edge").get<double>(), w.at("depth").get<double>(), w.at("normal").get<double>()};
    if (fs::exists(log_path))
      for (auto& r : read_train_log(log_path))
        if (r.iteration <= res.start_iteration) history.push_back(r);
  } else {
    model = init_model(cfg.architecture(), derive_seed(cfg.seed, 1));
    res.weights = cfg.weights;
    if (cfg.auto_calibrate) {
      std::vector<Batch> cal;
      BatchStream cs(cfg.syn_dir, cfg.batch_size_syn, derive_seed(cfg.seed, 4), Domain::synthetic,
                     {cfg.grayscale, cfg.resolution, cfg.resolution, cfg.syn_limit});
      for (int k = 0; k < cfg.calibration_batches; ++k) cal.push_back(cs.batch_at(k));
      auto tw = detail::task_weights(cfg.weights);
      res.calibration = calibrate_lambdas(model, cal, {tw[0] > 0, tw[1] > 0, tw[2] > 0});
      res.weights = res.calibration->weights;
    }
  }
  fs::create_directories(cfg.out_dir / "checkpoints");

  {
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot write " + log_path.string());
    for (const auto& r : history) log << to_json(r).dump() << '\n';
  }
  std::ofstream log(log_path, std::ios::app);

  auto state = [&](long long t) {
    nlohmann::json s = {{"iteration", t}, {"weights", weights_json(res.weights)}, {"config", to_json(cfg)}};
    if (!run_info.is_null()) s["run"] = run_info;
    if (res.calibration)
      s["calibration_norms"] = {res.calibration->norms[0], res.calibration->norms[1], res.calibration->norms[2]};
    return s;
  };
  fs::path last_good = cfg.resume;
  const StepOptions so2 = step_options(cfg, res.weights);
  for (long long t = res.start_iteration + 1; t <= cfg.max_iterations; ++t) {
    Batch bs = syn.batch_at(t - 1);
    std::optional<Batch> br;
    if (real) br = real->batch_at(t - 1);
    StepRecord rec;
    try {
      rec = train_step(model, opt, bs, br ? &*br : nullptr, so2, t);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + "; last good checkpoint: " +
                         (last_good.empty() ? std::string("none") : last_good.string()));
    }
    log << to_json(rec).dump() << '\n';
    log.flush();
    if (!log) throw IoError("failed writing " + log_path.string());
    history.push_back(rec);
    res.records.push_back(rec);
    if (on_step) on_step(rec);
    if (cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0) {
      fs::path p = checkpoint_path(cfg.out_dir, t);
      save_checkpoint(p, model, &opt, state(t));
      res.checkpoints.push_back(p);
      last_good = p;
    }
  }
  res.final_checkpoint = cfg.out_dir / "final.synthfeat";
  save_checkpoint(res.final_checkpoint, model, &opt, state(std::max(cfg.max_iterations, res.start_iteration)));
  if (cfg.write_csv) write_csv_summary(cfg.out_dir / "train_log.csv", history);
  return res;
}

}  // namespace synthfeat
