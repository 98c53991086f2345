// Acceptance run: one PASS/FAIL line per criterion on stdout, a JSON report
// in the work directory, exit status 1 if anything failed.
//
//   acceptance --work-dir DIR [--only 1,5,7] [--divisor 8] [--iterations 2000]
//
// Datasets and training runs are kept in the work directory and reused when
// their configuration matches, so a second invocation only re-evaluates.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "loss_cases.hpp"
#include "reference_tables.hpp"
#include "synthfeat/evalkit.hpp"
#include "synthfeat/export.hpp"
#include "synthfeat/trainer.hpp"

using namespace synthfeat;
using nlohmann::json;

namespace {

struct Options {
  fs::path work = "acceptance_work";
  std::set<int> only;
  int divisor = 8;
  long long iterations = 2000;
};

struct Outcome {
  bool pass = false;
  std::string summary;
  json details = json::object();
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

void progress(const std::string& msg) { std::cerr << "[acceptance] " << msg << std::endl; }

// ---------------------------------------------------------------------------
// 1-3: losses

Outcome loss_oracles() {
  Rng rng(101);
  std::array<double, 5> worst{};
  for (int trial = 0; trial < 100; ++trial) {
    int h = rng.uniform_int(1, 32), w = rng.uniform_int(1, 32), b = rng.uniform_int(1, 3);
    auto err = oracle::oracle_errors(oracle::random_case(rng, b, h, w));
    for (std::size_t k = 0; k < 5; ++k) worst[k] = std::max(worst[k], err[k]);
  }
  Outcome o;
  o.pass = true;
  std::string parts;
  for (std::size_t k = 0; k < 5; ++k) {
    o.pass = o.pass && worst[k] < 1e-6;
    o.details[oracle::kLossNames[k]] = worst[k];
    parts += std::string(k ? ", " : "") + oracle::kLossNames[k] + " " + fmt(worst[k], 3);
  }
  o.summary = "max relative difference over 100 cases (limit 1e-6): " + parts;
  return o;
}

Outcome gradient_checks() {
  Rng rng(102);
  std::array<double, 5> worst{};
  int cases = 0;
  for (int trial = 0; trial < 40; ++trial) {
    // every differentiable input (3 normal channels included) stays within 64 elements
    int b = rng.uniform_int(1, 2), h = rng.uniform_int(1, 3), w = rng.uniform_int(1, 3);
    auto err = oracle::gradient_errors(oracle::random_case(rng, b, h, w));
    for (std::size_t k = 0; k < 5; ++k) worst[k] = std::max(worst[k], err[k]);
    ++cases;
  }
  Outcome o;
  o.pass = true;
  std::string parts;
  for (std::size_t k = 0; k < 5; ++k) {
    o.pass = o.pass && worst[k] < 1e-4;
    o.details[oracle::kLossNames[k]] = worst[k];
    parts += std::string(k ? ", " : "") + oracle::kLossNames[k] + " " + fmt(worst[k], 3);
  }
  o.summary = "max relative gradient error over " + std::to_string(cases) + " cases (limit 1e-4): " + parts;
  return o;
}

Outcome closed_forms() {
  using oracle::sp;
  double worst_depth = 0;
  for (double c : {-2.0, -0.5, 0.25, 1.0, 3.0}) {
    for (std::size_t n : {1u, 7u, 64u}) {
      std::vector<double> q(n, c), zero(n, 0.0);
      std::vector<std::uint8_t> valid(n, 1);
      double v = loss::depth_loss<double>(sp(q), sp(zero), valid, {1, n});
      worst_depth = std::max(worst_depth, std::abs(v - c * c / 2));
    }
  }
  // planar x, y, z rows of five axis-aligned normals
  std::vector<double> s = {1, 0, 0, -1, 0, 0, 1, 0, 0, 0, 0, 0, 1, 0, -1};
  std::vector<std::uint8_t> v5(5, 1);
  double ls = loss::normal_loss<double>(sp(s), sp(s), v5, {1, 5});
  std::vector<double> logits(4, 0.0), beta = {0.75};
  std::vector<std::uint8_t> contour = {1, 0, 0, 0}, v4(4, 1);
  double le = loss::edge_loss<double>(sp(logits), contour, sp(beta), v4, {1, 4});
  double le_err = std::abs(le - 1.5 * std::numbers::ln2);
  Outcome o;
  o.pass = worst_depth <= 1e-9 && ls == -1.0 && le_err <= 1e-9;
  o.details = {{"depth_constant_max_error", worst_depth}, {"normal_self", ls}, {"edge_fixture_error", le_err}};
  o.summary = "Ld(d=c) max |err| " + fmt(worst_depth, 3) + ", Ls(S,S) = " + fmt(ls, 17) + ", Le 2x2 |err| " +
              fmt(le_err, 3);
  return o;
}

// ---------------------------------------------------------------------------
// 4: shape calculus

Outcome shape_conformance() {
  const std::set<std::string> expected = {"pool1", "pool2", "D1", "deconv10"};
  auto alex = conformance_report(build_default_alexnet(227), reference::kAlexNetTable);
  auto vgg = conformance_report(build_vgg16_variant(224), reference::kVggTable);
  std::set<std::string> off;
  bool noted = true;
  json listed = json::array();
  for (const auto& r : alex) {
    if (r.matches) continue;
    off.insert(r.name);
    noted = noted && !r.note.empty();
    listed.push_back({{"layer", r.name}, {"reference", r.reference}, {"computed", r.output}, {"note", r.note}});
    std::cerr << "    alexnet " << r.name << ": reference " << r.reference << ", computed " << r.output << " (" << r.note
              << ")\n";
  }
  int vgg_off = 0, crops = 0;
  for (const auto& r : vgg) {
    vgg_off += !r.matches;
    crops += r.note.rfind("crop rule", 0) == 0;
  }
  Outcome o;
  o.pass = off == expected && noted && vgg_off == 0 && crops > 0;
  std::string names;
  for (const auto& n : off) names += (names.empty() ? "" : ",") + n;
  o.details = {{"alexnet_discrepancies", listed}, {"vgg_mismatches", vgg_off}, {"vgg_crops", crops}};
  o.summary = "alexnet rows " + std::to_string(alex.size()) + ", listed discrepancies {" + names + "}; vgg rows " +
              std::to_string(vgg.size()) + ", mismatches " + std::to_string(vgg_off) + ", crop-rule rows " +
              std::to_string(crops);
  return o;
}

// ---------------------------------------------------------------------------
// datasets and training runs

struct Data {
  fs::path syn, real, syn_test, real_test, shapes;
};

fs::path dataset(const fs::path& dir, std::uint64_t seed, int count, SceneProfile profile) {
  auto meta = read_meta(dir);
  if (!meta || meta->seed != seed || meta->count != count || !fs::exists(dir / "rgb")) {
    progress("rendering " + std::to_string(count) + " " + to_string(profile) + " scenes into " + dir.string());
    fs::remove_all(dir);
    write_dataset(dir, seed, count, 64, 64, profile);
  }
  return dir;
}

Data make_data(const fs::path& root) {
  Data d;
  d.syn = dataset(root / "data" / "syn", 1, 512, SceneProfile::synthetic);
  d.real = dataset(root / "data" / "real", 2, 512, SceneProfile::real_proxy);
  d.syn_test = dataset(root / "data" / "syn_test", 1001, 256, SceneProfile::synthetic);
  d.real_test = dataset(root / "data" / "real_test", 1002, 256, SceneProfile::real_proxy);
  d.shapes = dataset(root / "data" / "shapes", 3, 800, SceneProfile::shapes);
  return d;
}

struct Run {
  std::string name;
  fs::path checkpoint;
  std::vector<StepRecord> log;
  bool reused = false;
};

TrainConfig base_config(const Options& opt, const Data& d) {
  TrainConfig c;
  c.resolution = 64;
  c.width_divisor = opt.divisor;
  c.max_iterations = opt.iterations;
  c.batch_size_syn = c.batch_size_real = 8;
  c.weights = {1, 1, 1};
  c.auto_calibrate = true;
  c.warmup_iterations = 100;
  c.syn_dir = d.syn;
  c.real_dir = d.real;
  c.seed = 1;
  c.checkpoint_every = 0;
  return c;
}

Run train_run(const Options& opt, const std::string& name, TrainConfig cfg) {
  cfg.out_dir = opt.work / "runs" / name;
  Run r{name, cfg.out_dir / "final.synthfeat", {}, false};
  if (fs::exists(r.checkpoint) && fs::exists(cfg.out_dir / "train_log.jsonl")) {
    auto ck = load_checkpoint(r.checkpoint);
    if (ck.train_state.at("config") == to_json(cfg)) {
      r.log = read_train_log(cfg.out_dir / "train_log.jsonl");
      r.reused = true;
      progress("reusing run " + name);
      return r;
    }
  }
  progress("training " + name + " for " + std::to_string(cfg.max_iterations) + " iterations");
  auto t0 = std::chrono::steady_clock::now();
  auto res = train(cfg, [&](const StepRecord& s) {
    if (s.iteration % 250 == 0) progress(name + " " + std::to_string(s.iteration) + " tasks " + fmt(s.weighted_tasks));
  });
  double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  progress(name + " done in " + fmt(sec, 3) + " s");
  r.log = std::move(res.records);
  return r;
}

ModelState load_model(const Run& r) { return load_checkpoint(r.checkpoint).model; }

// ---------------------------------------------------------------------------
// 5: export

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(double(a[i]) - b[i]));
  return d;
}

Tensor at_position(const Tensor& t, int y, int x) {
  Tensor out(t.n(), t.c(), 1, 1);
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c) out.at(n, c, 0, 0) = t.at(n, c, y, x);
  return out;
}

Outcome export_equivalence(const ModelState& m, const std::string& source) {
  Backbone b = convert_fc(absorb_batchnorm(m));
  Rng rng(105);
  std::map<std::string, double> worst;
  double overall = 0, scale = 0;
  for (int chunk = 0; chunk < 10; ++chunk) {
    Tensor x(10, 3, 64, 64);
    for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1, 1));
    BaseOutput ref = forward_base(m, x);
    auto outs = backbone_forward(b, x);
    for (std::size_t i = 0; i < outs.size(); ++i) {
      const std::string& name = ref.names[i];
      Tensor r = ref.layer(name);
      if (b.layers[i].op == BackboneOp::dense) {
        auto [cy, cx] = dense_anchor(r.h(), r.w());
        r = at_position(r, cy, cx);
      }
      double d = max_abs_diff(outs[i], r);
      worst[name] = std::max(worst[name], d);
      overall = std::max(overall, d);
      for (float v : r.values()) scale = std::max(scale, double(std::abs(v)));
    }
  }
  Outcome o;
  o.pass = overall <= 1e-5;
  std::string by;
  for (const auto& [n, d] : worst) {
    o.details[n] = d;
    by += (by.empty() ? "" : ", ") + n + " " + fmt(d, 2);
  }
  o.details["max_abs_activation"] = scale;
  o.summary = source + ", 100 inputs: max abs diff " + fmt(overall, 3) + " (limit 1e-5, largest activation " +
              fmt(scale, 3) + "); " + by;
  return o;
}

// ---------------------------------------------------------------------------
// 6: freeze discipline

bool same_group(const ModelState& a, const ModelState& b, ParamGroup g) {
  for (const auto& [name, t] : a.params)
    if (group_of(name) == g && !(t == b.params.at(name))) return false;
  for (const auto& [name, t] : a.buffers)
    if (group_of(name) == g && !(t == b.buffers.at(name))) return false;
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

Outcome freeze_discipline(const Data& d) {
  ModelState m = init_model(build_default_alexnet(64, 16), 106);
  Adam opt;
  Rng rng(106);
  int stage1_ok = 0, stage2_ok = 0, swap_ok = 0, bifool_steps = 0, swap_checks = 0;
  BatchStream syn(d.syn, 4, 61, Domain::synthetic, {true, 64, 64, 64});
  BatchStream real(d.real, 4, 62, Domain::real, {true, 64, 64, 64});
  for (int t = 1; t <= 50; ++t) {
    Batch s = syn.batch_at(rng.uniform_int(0, 200)), r1 = real.batch_at(rng.uniform_int(0, 200));
    Batch r2 = real.batch_at(rng.uniform_int(201, 400));
    StepOptions o{{rng.uniform(0.1, 2), rng.uniform(0.1, 2), rng.uniform(1, 10)}, true, rng.uniform() < 0.5, 0, false};
    bifool_steps += o.bifool;

    if (!o.bifool) {
      // same state, same optimizer, different real batch: identical stage-1 update
      ModelState a = m, b = m;
      Adam oa = opt, ob = opt;
      StepRecord ra, rb;
      generator_stage(a, oa, s, &r1, o, t, ra);
      generator_stage(b, ob, s, &r2, o, t, rb);
      ++swap_checks;
      swap_ok += delta(m, a) == delta(m, b);
    }

    ModelState before = m;
    StepRecord rec;
    StageFeatures f = generator_stage(m, opt, s, &r1, o, t, rec);
    stage1_ok += same_group(m, before, ParamGroup::discriminator);
    ModelState mid = m;
    discriminator_stage(m, opt, s, r1, f, t, rec);
    stage2_ok += same_group(m, mid, ParamGroup::base) && same_group(m, mid, ParamGroup::heads);
  }
  Outcome o;
  o.pass = stage1_ok == 50 && stage2_ok == 50 && swap_ok == swap_checks && swap_checks > 0;
  o.details = {{"stage1_disc_unchanged", stage1_ok},
               {"stage2_base_heads_unchanged", stage2_ok},
               {"swap_checks", swap_checks},
               {"swap_equal", swap_ok},
               {"bifool_steps", bifool_steps}};
  o.summary = "stage 1 kept D frozen " + std::to_string(stage1_ok) + "/50, stage 2 kept B,H frozen " +
              std::to_string(stage2_ok) + "/50, swapped real batch gave identical stage-1 delta " +
              std::to_string(swap_ok) + "/" + std::to_string(swap_checks);
  return o;
}

// ---------------------------------------------------------------------------
// 7: training smoke test

double window_mean(const std::vector<StepRecord>& log, long long end, int width) {
  double s = 0;
  int n = 0;
  for (const auto& r : log)
    if (r.iteration > end - width && r.iteration <= end) {
      s += r.weighted_tasks;
      ++n;
    }
  return n ? s / n : NAN;
}

bool finite_record(const StepRecord& r) {
  for (double v : {r.parts.adv, r.parts.edge, r.parts.depth, r.parts.normal, r.weighted_tasks, r.total_bh})
    if (!std::isfinite(v)) return false;
  for (const auto* o : {&r.loss_d, &r.d_acc_syn, &r.d_acc_real})
    if (*o && !std::isfinite(**o)) return false;
  return true;
}

Outcome training_smoke(const Run& run, long long iterations) {
  double early = window_mean(run.log, 100, 100), late = window_mean(run.log, iterations, 100);
  bool finite = static_cast<long long>(run.log.size()) == iterations;
  for (const auto& r : run.log) finite = finite && finite_record(r);
  double ratio = late / early;
  Outcome o;
  o.pass = finite && early > 0 && late <= 0.7 * early;
  o.details = {{"avg_at_100", early}, {"avg_at_end", late}, {"ratio", ratio}, {"finite", finite},
               {"iterations", run.log.size()}, {"reused", run.reused}};
  o.summary = "weighted task loss, 100-step mean: " + fmt(early) + " at 100, " + fmt(late) + " at " +
              std::to_string(iterations) + " (ratio " + fmt(ratio, 3) + ", limit 0.7); all finite: " +
              (finite ? "yes" : "no");
  return o;
}

// ---------------------------------------------------------------------------
// 8: normals

Outcome normal_quality(const ModelState& m, const Data& d) {
  auto constant = fit_constant_normal(d.syn);
  AngularStats model = evaluate_normals(m, d.syn_test, 128);
  AngularStats base = evaluate_normals(m, d.syn_test, 128, 16, constant);
  double gap = base.mean_deg - model.mean_deg;
  Outcome o;
  o.pass = gap >= 10.0;
  o.details = {{"model", model}, {"constant_baseline", base}, {"gap_deg", gap}};
  o.summary = "128 held-out scenes: model mean " + fmt(model.mean_deg) + " deg, constant baseline " +
              fmt(base.mean_deg) + " deg, gap " + fmt(gap) + " (need >= 10)";
  return o;
}

// ---------------------------------------------------------------------------
// 9, 10: features

Outcome adaptation_direction(const ModelState& with_da, const ModelState& without, const Data& d) {
  // held-out images get the encoding the adversary saw during training
  ImageSet syn = load_image_set(d.syn_test, 0, 64), real = load_image_set(d.real_test, 0, 64);
  Tensor xs = grayscale_inputs(syn.images, 1), xr = grayscale_inputs(real.images, 2);
  ProbeConfig cfg;
  auto confusion = [&](const ModelState& m, const Tensor& a, const Tensor& b) {
    FeatureFn fn = model_features(m);
    return domain_confusion(extract_features(fn, a, "conv5", -1, cfg.target_dims),
                            extract_features(fn, b, "conv5", -1, cfg.target_dims), cfg);
  };
  ConfusionResult a = confusion(with_da, xs, xr), b = confusion(without, xs, xr);
  ConfusionResult ca = confusion(with_da, syn.images, real.images), cb = confusion(without, syn.images, real.images);
  Outcome o;
  o.pass = a.accuracy < b.accuracy;
  o.details = {{"with_adaptation", a},
               {"without_adaptation", b},
               {"gap", b.accuracy - a.accuracy},
               {"colour_inputs", {{"with_adaptation", ca}, {"without_adaptation", cb}}}};
  o.summary = "conv5 domain confusion on " + std::to_string(a.n_syn) + "+" + std::to_string(a.n_real) +
              " held-out images: with adaptation " + fmt(a.accuracy) + ", without " + fmt(b.accuracy) + " (gap " +
              fmt(b.accuracy - a.accuracy) + "); colour inputs " + fmt(ca.accuracy) + " vs " + fmt(cb.accuracy);
  return o;
}

Outcome multitask_direction(const std::map<std::string, ModelState>& models, const ModelState& random_init,
                            const Data& d) {
  ImageSet shapes = load_labeled(d.shapes, 0, 64);
  Tensor gray = grayscale_inputs(shapes.images);
  ProbeConfig cfg;
  std::map<std::string, double> acc, acc_gray;
  auto probe = [&](const std::string& name, const ModelState& m) {
    acc[name] = linear_probe(model_features(m), "conv5", shapes.images, shapes.labels, cfg).accuracy;
    acc_gray[name] = linear_probe(model_features(m), "conv5", gray, shapes.labels, cfg).accuracy;
  };
  for (const auto& [name, m] : models) probe(name, m);
  probe("random_init", random_init);
  const double mt = acc.at("multitask");
  bool pass = mt >= acc.at("random_init") + 0.05;
  for (const char* single : {"edge", "depth", "normal"}) pass = pass && mt >= acc.at(single) - 0.01;
  Outcome o;
  o.pass = pass;
  o.details = {{"colour", acc}, {"grayscale", acc_gray}};
  auto line = [&](const std::map<std::string, double>& a) {
    return "multitask " + fmt(100 * a.at("multitask"), 3) + "%, edge " + fmt(100 * a.at("edge"), 3) + "%, depth " +
           fmt(100 * a.at("depth"), 3) + "%, normal " + fmt(100 * a.at("normal"), 3) + "%, random init " +
           fmt(100 * a.at("random_init"), 3) + "%";
  };
  o.summary = "conv5 probe accuracy on the 4-class fixture: " + line(acc) + "; grayscale inputs: " + line(acc_gray);
  return o;
}

// ---------------------------------------------------------------------------
// 11: randomized properties

Image<std::uint8_t> valid_of(const Image<std::uint16_t>& inst) {
  Image<std::uint8_t> v(inst.height, inst.width, 1);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = inst.data[i] > 0;
  return v;
}

Outcome properties() {
  Rng rng(111);
  std::map<std::string, int> failures = {
      {"angular_monotone", 0}, {"angular_symmetric", 0}, {"angular_mean", 0}, {"beta_range", 0},
      {"contour_relabel", 0},  {"grayscale", 0}};
  constexpr int kCases = 1000;
  for (int t = 0; t < kCases; ++t) {
    // angular statistics on random unit normals with a random mask
    int n = rng.uniform_int(1, 3), h = rng.uniform_int(1, 6), w = rng.uniform_int(1, 6);
    Tensor a(n, 3, h, w), b(n, 3, h, w);
    Mask valid({n, 1, h, w}, 0);
    valid[0] = 1;
    for (std::size_t i = 1; i < valid.size(); ++i) valid[i] = rng.uniform() < 0.7;
    std::vector<double> expect;
    for (int k = 0; k < n; ++k)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double u[3], v[3], nu = 0, nv = 0;
          for (int c = 0; c < 3; ++c) {
            u[c] = rng.normal();
            v[c] = rng.normal();
            nu += u[c] * u[c];
            nv += v[c] * v[c];
          }
          double dot = 0;
          for (int c = 0; c < 3; ++c) {
            a.at(k, c, y, x) = static_cast<float>(u[c] / std::sqrt(nu));
            b.at(k, c, y, x) = static_cast<float>(v[c] / std::sqrt(nv));
          }
          for (int c = 0; c < 3; ++c) dot += double(a.at(k, c, y, x)) * b.at(k, c, y, x);
          if (valid.at(k, 0, y, x)) expect.push_back(std::acos(std::clamp(dot, -1.0, 1.0)) * 180.0 / std::numbers::pi);
        }
    AngularStats s = angular_error_stats(a, b, valid), r = angular_error_stats(b, a, valid);
    bool mono = s.pct_within[0] <= s.pct_within[1] && s.pct_within[1] <= s.pct_within[2] && s.pct_within[0] >= 0 &&
                s.pct_within[2] <= 100 && s.mean_deg >= 0 && s.mean_deg <= 180 && s.rmse_deg >= s.mean_deg - 1e-9;
    failures["angular_monotone"] += !mono;
    failures["angular_symmetric"] += !(s.mean_deg == r.mean_deg && s.median_deg == r.median_deg &&
                                       s.pct_within == r.pct_within && s.pixels == r.pixels);
    double mean = 0;
    for (double e : expect) mean += e;
    mean /= static_cast<double>(expect.size());
    failures["angular_mean"] += !(std::abs(mean - s.mean_deg) <= 1e-9 && s.pixels == expect.size());

    // contour weight
    {
      int ih = rng.uniform_int(1, 12), iw = rng.uniform_int(1, 12);
      Image<std::uint16_t> inst(ih, iw, 1);
      for (auto& v : inst.data) v = static_cast<std::uint16_t>(rng.uniform_int(0, 4));
      inst.data[0] = 1;
      auto vm = valid_of(inst);
      auto c = extract_contours(inst);
      double beta = compute_beta(c, vm);
      double nv = static_cast<double>(std::count(vm.data.begin(), vm.data.end(), 1));
      double ne = static_cast<double>(std::count(c.data.begin(), c.data.end(), 1));
      failures["beta_range"] += !(beta >= 0 && beta <= 1 && std::abs(beta + ne / nv - 1) <= 1e-12);
    }
    // contours only depend on the partition, not on the id values
    {
      int ih = rng.uniform_int(1, 10), iw = rng.uniform_int(1, 10);
      Image<std::uint16_t> inst(ih, iw, 1);
      for (auto& v : inst.data) v = static_cast<std::uint16_t>(rng.uniform_int(0, 5));
      std::vector<std::uint16_t> perm{1, 2, 3, 4, 5};
      std::shuffle(perm.begin(), perm.end(), rng.engine());
      Image<std::uint16_t> relabeled = inst;
      for (auto& v : relabeled.data)
        if (v) v = static_cast<std::uint16_t>(perm[v - 1u] + 100u);
      failures["contour_relabel"] += !(extract_contours(inst) == extract_contours(relabeled));
    }
    {
      Image<float> img(rng.uniform_int(1, 8), rng.uniform_int(1, 8), 3);
      for (auto& x : img.data) x = static_cast<float>(rng.uniform());
      auto g = grayscale_augment(img, rng);
      bool ok = true;
      for (std::size_t p = 0; p < g.pixels(); ++p)
        ok = ok && g.data[p * 3] == g.data[p * 3 + 1] && g.data[p * 3] == g.data[p * 3 + 2];
      failures["grayscale"] += !ok;
    }
  }
  Outcome o;
  o.pass = true;
  std::string parts;
  for (const auto& [k, v] : failures) {
    o.pass = o.pass && v == 0;
    o.details[k] = v;
    parts += (parts.empty() ? "" : ", ") + k + " " + std::to_string(v);
  }
  o.summary = std::to_string(kCases) + " cases per property, failures: " + parts;
  return o;
}

// ---------------------------------------------------------------------------

Options parse_args(int argc, char** argv) {
  Options o;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    auto value = [&]() -> std::string {
      if (i + 1 >= argc) throw ConfigError(a + " needs a value");
      return argv[++i];
    };
    if (a == "--work-dir") {
      o.work = value();
    } else if (a == "--only") {
      std::stringstream s(value());
      std::string tok;
      while (std::getline(s, tok, ',')) o.only.insert(std::stoi(tok));
    } else if (a == "--divisor") {
      o.divisor = std::stoi(value());
    } else if (a == "--iterations") {
      o.iterations = std::stoll(value());
    } else {
      throw ConfigError("unknown argument " + a);
    }
  }
  if (o.iterations < 200) throw ConfigError("--iterations must be at least 200");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  try {
    opt = parse_args(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  }
  fs::create_directories(opt.work);
  auto wanted = [&](int k) { return opt.only.empty() || opt.only.count(k) > 0; };
  const char* names[] = {"",
                         "loss-oracle-equivalence",
                         "gradient-checks",
                         "closed-form-losses",
                         "shape-conformance",
                         "export-equivalence",
                         "freeze-discipline",
                         "training-smoke",
                         "normal-quality",
                         "adaptation-direction",
                         "multitask-direction",
                         "property-suite"};
  json report = json::object();
  int failed = 0;
  auto record = [&](int k, const std::function<Outcome()>& fn) {
    if (!wanted(k)) return;
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.summary = std::string("error: ") + e.what();
    }
    double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << "A" << k << " " << (o.pass ? "PASS" : "FAIL") << " " << names[k] << ": " << o.summary << " ["
              << fmt(sec, 3) << " s]" << std::endl;
    report["A" + std::to_string(k)] = {{"name", names[k]}, {"pass", o.pass}, {"summary", o.summary},
                                       {"seconds", sec},   {"details", o.details}};
  };

  record(1, loss_oracles);
  record(2, gradient_checks);
  record(3, closed_forms);
  record(4, shape_conformance);

  bool need_data = false, need_runs = false;
  for (int k = 5; k <= 10; ++k) need_data = need_data || wanted(k);
  for (int k = 7; k <= 10; ++k) need_runs = need_runs || wanted(k);
  std::optional<Data> data;
  std::map<std::string, Run> runs;
  if (need_data) {
    try {
      data = make_data(opt.work);
      if (need_runs) {
        TrainConfig mt = base_config(opt, *data);
        runs["multitask_da"] = train_run(opt, "multitask_da", mt);
        if (wanted(9) || wanted(10)) {
          TrainConfig plain = mt;
          plain.adaptation = false;
          runs["multitask"] = train_run(opt, "multitask", plain);
        }
        if (wanted(10)) {
          const std::map<std::string, LossWeights> single = {
              {"edge", {1, 0, 0}}, {"depth", {0, 1, 0}}, {"normal", {0, 0, 1}}};
          for (const auto& [name, w] : single) {
            TrainConfig c = mt;
            c.adaptation = false;
            c.weights = w;
            runs[name] = train_run(opt, name, c);
          }
        }
      }
    } catch (const std::exception& e) {
      std::cerr << "error: preparing data or runs failed: " << e.what() << "\n";
    }
  }
  auto need = [&](const std::string& run) -> const Run& {
    if (!data) throw DataError("datasets unavailable");
    auto it = runs.find(run);
    if (it == runs.end()) throw DataError("training run " + run + " unavailable");
    return it->second;
  };

  record(5, [&] {
    if (runs.count("multitask_da")) return export_equivalence(load_model(runs.at("multitask_da")), "trained multitask checkpoint");
    ModelState m = init_model(build_default_alexnet(64, opt.divisor), 105);
    return export_equivalence(m, "freshly initialised model");
  });
  record(6, [&] {
    if (!data) throw DataError("datasets unavailable");
    return freeze_discipline(*data);
  });
  record(7, [&] { return training_smoke(need("multitask_da"), opt.iterations); });
  record(8, [&] { return normal_quality(load_model(need("multitask_da")), *data); });
  record(9, [&] { return adaptation_direction(load_model(need("multitask_da")), load_model(need("multitask")), *data); });
  record(10, [&] {
    std::map<std::string, ModelState> models;
    models["multitask"] = load_model(need("multitask"));
    for (const char* s : {"edge", "depth", "normal"}) models[s] = load_model(need(s));
    TrainConfig c = base_config(opt, *data);
    return multitask_direction(models, init_model(c.architecture(), derive_seed(c.seed, 1)), *data);
  });
  record(11, properties);

  report["failed"] = failed;
  report["divisor"] = opt.divisor;
  report["iterations"] = opt.iterations;
  write_text_atomic(opt.work / "acceptance_report.json", report.dump(2) + "\n");
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << failed << " failing criteria; report "
            << (opt.work / "acceptance_report.json").string() << std::endl;
  return failed ? 1 : 0;
}
