// synthfeat command-line entry point.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "synthfeat/evalkit.hpp"
#include "synthfeat/export.hpp"
#include "synthfeat/trainer.hpp"

#ifndef SYNTHFEAT_SOURCE_REVISION
#define SYNTHFEAT_SOURCE_REVISION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace synthfeat;

namespace {

std::string utc_now() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

/// Provenance record of one command. Written once, atomically, when the
/// command has produced its artifacts.
class RunManifest {
 public:
  RunManifest(const std::vector<std::string>& argv, std::string command) {
    j_ = {{"command", std::move(command)},
          {"command_line", argv},
          {"source_revision", SYNTHFEAT_SOURCE_REVISION},
          {"start", utc_now()},
          {"seeds", json::object()},
          {"artifacts", json::array()}};
  }
  void seed(const std::string& name, std::uint64_t v) { j_["seeds"][name] = v; }
  void config(const json& effective, const std::string& text) {
    j_["config"] = effective;
    j_["config_hash"] = hex64(fnv1a(text));
  }
  void artifact(const fs::path& p) { j_["artifacts"].push_back(p.string()); }
  void set(const std::string& key, json v) { j_[key] = std::move(v); }
  void write(const fs::path& path) {
    j_["end"] = utc_now();
    if (!j_.contains("config_hash")) j_["config_hash"] = hex64(fnv1a(j_["command_line"].dump()));
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_text_atomic(path, j_.dump(2) + "\n");
  }

 private:
  json j_;
};

fs::path manifest_beside(const fs::path& artifact) { return fs::path(artifact.string() + ".manifest.json"); }

void emit(const json& report, const fs::path& out) {
  if (out.empty()) {
    std::cout << report.dump(2) << "\n";
    return;
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_text_atomic(out, report.dump(2) + "\n");
}

void emit_csv(const std::string& text, const fs::path& out) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_text_atomic(out, text);
}

std::pair<int, int> parse_resolution(const std::string& s) {
  std::smatch m;
  if (std::regex_match(s, m, std::regex(R"((\d+)x(\d+))"))) return {std::stoi(m[1]), std::stoi(m[2])};
  if (std::regex_match(s, m, std::regex(R"((\d+))"))) return {std::stoi(m[1]), std::stoi(m[1])};
  throw ConfigError("resolution must look like 64x64 or 64, got '" + s + "'");
}

/// Feature extractor plus what identifies it for caching.
struct FeatureSource {
  FeatureFn fn;
  std::string hash;  ///< of the model file
  int resolution = 0;
  Tensor first_filters;
};

FeatureSource open_source(const fs::path& checkpoint, const fs::path& backbone) {
  if (checkpoint.empty() == backbone.empty()) throw ConfigError("give exactly one of --checkpoint and --backbone");
  FeatureSource s;
  if (!checkpoint.empty()) {
    LoadedCheckpoint c = load_checkpoint(checkpoint);
    s.resolution = c.model.arch.input_resolution;
    s.first_filters = c.model.params.at(param_names(kTrunkPrefix, c.model.arch.base.front()).weight);
    s.hash = "ckpt:" + file_hash(checkpoint);
    s.fn = model_features(std::move(c.model));
  } else {
    Backbone b = load_backbone(backbone);
    s.resolution = b.input_resolution;
    s.first_filters = b.params.at(b.layers.front().name + ".weight");
    s.hash = "bb:" + file_hash(backbone);
    s.fn = backbone_feature_fn(std::move(b));
  }
  return s;
}

/// Feature rows, served from $SYNTHFEAT_CACHE when set. The key covers the
/// model file, layer, grid and the decoded input pixels.
FeatureMatrix features(const FeatureSource& src, const Tensor& images, const std::string& layer, int grid, int target_dims) {
  const char* root = std::getenv("SYNTHFEAT_CACHE");
  if (!root || !*root) return extract_features(src.fn, images, layer, grid, target_dims);
  std::string key_text = src.hash + "|" + layer + "|" + std::to_string(grid) + "|" + std::to_string(target_dims) + "|" +
                         shape_string(images.shape()) + "|";
  key_text.append(reinterpret_cast<const char*>(images.data()), images.size() * sizeof(float));
  fs::path file = fs::path(root) / ("features_" + hex64(fnv1a(key_text)) + ".bin");
  if (fs::exists(file)) {
    std::string bytes = tar::read_file(file);
    if (bytes.size() >= 8) {
      auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
      std::uint32_t rows = io::detail::get_u32(p), cols = io::detail::get_u32(p + 4);
      if (bytes.size() == 8 + std::size_t{rows} * cols * 4) {
        FeatureMatrix m(rows, cols);
        auto v = io::parse_f32_le(p + 8, std::size_t{rows} * cols);
        std::copy(v.begin(), v.end(), m.data());
        return m;
      }
    }
  }
  FeatureMatrix m = extract_features(src.fn, images, layer, grid, target_dims);
  std::ostringstream os;
  io::detail::put_u32(os, static_cast<std::uint32_t>(m.rows()));
  io::detail::put_u32(os, static_cast<std::uint32_t>(m.cols()));
  std::string bytes = os.str();
  io::append_f32_le(bytes, std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
  fs::create_directories(root);
  tar::write_file_atomic(file, bytes);
  return m;
}

std::vector<std::string> split_layers(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  if (out.empty()) throw ConfigError("no layer given");
  return out;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

// ---------------------------------------------------------------------------
// Commands

struct GenArgs {
  std::uint64_t seed = 0;
  int count = 0;
  std::string res = "64x64";
  std::string profile = "synthetic";
  fs::path out;
};

int cmd_gen_data(const GenArgs& a, RunManifest& man) {
  auto [h, w] = parse_resolution(a.res);
  DatasetMeta meta = write_dataset(a.out, a.seed, a.count, h, w, parse_profile(a.profile));
  man.seed("scene", a.seed);
  json cfg = {{"seed", a.seed}, {"count", a.count}, {"height", h}, {"width", w}, {"profile", a.profile}};
  man.config(cfg, cfg.dump());
  json mj = to_json(meta);
  mj["manifest"] = "manifest.json";
  write_text_atomic(a.out / "meta.json", mj.dump(2) + "\n");
  man.artifact(a.out);
  man.write(a.out / "manifest.json");
  std::cout << json{{"out", a.out.string()}, {"count", meta.count}, {"config_hash", meta.config_hash}}.dump(2) << "\n";
  return 0;
}

struct InspectArgs {
  fs::path data;
  int index = 0;
  fs::path dump_png;
};

int cmd_inspect(const InspectArgs& a) {
  ImageSample s = load_sample(a.data, a.index);
  TaskTargets t = derive_targets(s);
  std::size_t valid = 0, edges = 0;
  double dmin = 1e300, dmax = 0, max_dev = 0;
  for (std::size_t i = 0; i < s.valid.data.size(); ++i) {
    if (!s.valid.data[i]) continue;
    ++valid;
    edges += t.contour.data[i];
    dmin = std::min<double>(dmin, s.depth.data[i]);
    dmax = std::max<double>(dmax, s.depth.data[i]);
    double n2 = 0;
    for (int c = 0; c < 3; ++c) n2 += double(s.normal.data[i * 3 + c]) * s.normal.data[i * 3 + c];
    max_dev = std::max(max_dev, std::abs(std::sqrt(n2) - 1.0));
  }
  std::set<std::uint16_t> ids(s.instance.data.begin(), s.instance.data.end());
  ids.erase(0);
  json r = {{"index", a.index},
            {"height", s.height()},
            {"width", s.width()},
            {"valid_fraction", double(valid) / double(s.valid.data.size())},
            {"contour_pixels", edges},
            {"beta", t.beta},
            {"instances", ids.size()},
            {"depth_min", valid ? dmin : 0.0},
            {"depth_max", dmax},
            {"normal_max_unit_deviation", max_dev}};
  if (auto meta = read_meta(a.data); meta && a.index < static_cast<int>(meta->labels.size()))
    r["label"] = meta->labels[static_cast<std::size_t>(a.index)];
  if (!a.dump_png.empty()) {
    fs::create_directories(a.dump_png);
    std::string stem = sample_name(a.index, "");
    TargetTensors tt = stack_targets({t});
    io::write_png_rgb(a.dump_png / (stem + "_rgb.png"), s.rgb);
    io::write_png_rgb(a.dump_png / (stem + "_depth.png"), map_to_rgb(tt.log_depth, 0));
    io::write_png_rgb(a.dump_png / (stem + "_normal.png"), normal_to_rgb(tt.normal, 0));
    Tensor contour(1, 1, s.height(), s.width());
    for (std::size_t i = 0; i < contour.size(); ++i) contour[i] = t.contour.data[i];
    io::write_png_rgb(a.dump_png / (stem + "_contour.png"), map_to_rgb(contour, 0));
  }
  std::cout << r.dump(2) << "\n";
  return 0;
}

struct TrainArgs {
  fs::path config;
  std::vector<std::string> overrides;
  int log_every = 50;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, RunManifest& man) {
  TrainConfig cfg = load_train_config(a.config);
  for (const auto& o : a.overrides) apply_override(cfg, o);
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  const fs::path manifest = cfg.out_dir / "manifest.json";
  write_text_atomic(cfg.out_dir / "effective_config.toml", config_text(cfg));
  man.config(to_json(cfg), config_text(cfg));
  man.seed("run", cfg.seed);
  man.seed("init", derive_seed(cfg.seed, 1));
  man.seed("syn_stream", derive_seed(cfg.seed, 2));
  man.seed("real_stream", derive_seed(cfg.seed, 3));
  auto progress = [&](const StepRecord& r) {
    if (a.quiet || a.log_every <= 0) return;
    if (r.iteration % a.log_every != 0 && r.iteration != cfg.max_iterations) return;
    std::cerr << "iter " << r.iteration << " tasks " << r.weighted_tasks << " edge " << r.parts.edge << " depth "
              << r.parts.depth << " normal " << r.parts.normal << " adv " << r.parts.adv;
    if (r.loss_d) std::cerr << " loss_d " << *r.loss_d;
    std::cerr << " ms " << static_cast<long long>(std::lround(r.wall_ms)) << "\n";
  };
  TrainResult res = train(cfg, progress, json{{"manifest", manifest.string()}});
  man.artifact(cfg.out_dir / "effective_config.toml");
  man.artifact(cfg.out_dir / "train_log.jsonl");
  if (cfg.write_csv) man.artifact(cfg.out_dir / "train_log.csv");
  for (const auto& p : res.checkpoints) man.artifact(p);
  man.artifact(res.final_checkpoint);
  man.set("final_checkpoint_hash", file_hash(res.final_checkpoint));
  man.write(manifest);
  json out = {{"final_checkpoint", res.final_checkpoint.string()},
              {"iterations", res.records.size()},
              {"start_iteration", res.start_iteration},
              {"weights", weights_json(res.weights)},
              {"manifest", manifest.string()}};
  if (!res.records.empty()) out["last"] = to_json(res.records.back());
  std::cout << out.dump(2) << "\n";
  return 0;
}

struct ExportArgs {
  fs::path checkpoint, out, calib, dump_png;
  bool no_rescale = false, grayscale = false;
  int calib_count = 64;
};

int cmd_export(const ExportArgs& a, RunManifest& man) {
  ExportOptions o{!a.no_rescale, a.calib_count, a.grayscale};
  auto [b, report] = export_backbone(a.checkpoint, a.calib, o);
  const fs::path manifest = manifest_beside(a.out);
  b.provenance["manifest"] = manifest.string();
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  save_backbone(a.out, b);
  json cfg = {{"checkpoint", a.checkpoint.string()},
              {"calibration_dir", a.calib.string()},
              {"rescale", o.rescale},
              {"calibration_images", o.calibration_images},
              {"grayscale", o.grayscale}};
  man.config(cfg, cfg.dump());
  man.artifact(a.out);
  if (!a.dump_png.empty()) {
    fs::create_directories(a.dump_png);
    fs::path p = a.dump_png / "conv1_filters.png";
    io::write_png_rgb(p, filter_grid(b.params.at(b.layers.front().name + ".weight")));
    man.artifact(p);
  }
  man.write(manifest);
  json r = {{"backbone", a.out.string()}, {"layers", b.layer_names()}, {"provenance", b.provenance}};
  std::cout << r.dump(2) << "\n";
  return 0;
}

struct EvalNormalsArgs {
  fs::path checkpoint, data, baseline, out, dump_png;
  int limit = 0;
  bool csv = false, grayscale = false;
};

std::string stats_csv_row(const std::string& name, const AngularStats& s) {
  std::ostringstream o;
  o << name << ',' << s.mean_deg << ',' << s.median_deg << ',' << s.rmse_deg << ',' << s.pct_within[0] << ','
    << s.pct_within[1] << ',' << s.pct_within[2] << ',' << s.pixels << '\n';
  return o.str();
}

int cmd_eval_normals(const EvalNormalsArgs& a, RunManifest& man) {
  LoadedCheckpoint c = load_checkpoint(a.checkpoint);
  AngularStats model = evaluate_normals(c.model, a.data, a.limit, 16, std::nullopt, a.grayscale);
  json r = {{"checkpoint", a.checkpoint.string()}, {"data", a.data.string()}, {"grayscale", a.grayscale}, {"model", model}};
  std::string csv = "set,mean_deg,median_deg,rmse_deg,pct_11.25,pct_22.5,pct_30,pixels\n" + stats_csv_row("model", model);
  if (!a.baseline.empty()) {
    auto n = fit_constant_normal(a.baseline);
    AngularStats base = evaluate_normals(c.model, a.data, a.limit, 16, n, a.grayscale);
    r["constant_baseline"] = {{"normal", n}, {"fit_on", a.baseline.string()}, {"stats", base}};
    csv += stats_csv_row("constant", base);
  }
  if (!a.dump_png.empty()) {
    fs::create_directories(a.dump_png);
    const int res = c.model.arch.input_resolution;
    BatchStream s(a.data, 8, 0, Domain::synthetic, {false, res, res, std::max(0, std::min(a.limit, 8))});
    std::vector<Image<float>> imgs;
    for (int i = 0; i < std::min(8, s.size()); ++i) imgs.push_back(s.image(i));
    HeadOutput h = forward_heads(c.model, forward_base(c.model, images_to_tensor(imgs)));
    for (int i = 0; i < static_cast<int>(imgs.size()); ++i) {
      std::string stem = sample_name(i, "");
      io::write_png_rgb(a.dump_png / (stem + "_normal_pred.png"), normal_to_rgb(h.normal, i));
      io::write_png_rgb(a.dump_png / (stem + "_depth_pred.png"), map_to_rgb(h.log_depth, i));
      io::write_png_rgb(a.dump_png / (stem + "_contour_pred.png"), map_to_rgb(h.contour, i));
    }
    io::write_png_rgb(a.dump_png / "conv1_filters.png",
                      filter_grid(c.model.params.at(param_names(kTrunkPrefix, c.model.arch.base.front()).weight)));
  }
  if (!a.out.empty()) {
    r["manifest"] = manifest_beside(a.out).string();
    man.config(json{{"checkpoint", a.checkpoint.string()}, {"data", a.data.string()}, {"limit", a.limit},
                    {"grayscale", a.grayscale}},
               r.dump());
    man.artifact(a.out);
  }
  if (a.csv)
    emit_csv(csv, a.out);
  else
    emit(r, a.out);
  if (!a.out.empty()) man.write(manifest_beside(a.out));
  return 0;
}

struct SourceArgs {
  fs::path checkpoint, backbone;
};

struct RetrieveArgs {
  SourceArgs src;
  std::string layer = "conv5";
  fs::path query, corpus, out;
  int k = 4, limit = 0;
  bool csv = false, grayscale = false;
};

int cmd_retrieve(const RetrieveArgs& a, RunManifest& man) {
  FeatureSource src = open_source(a.src.checkpoint, a.src.backbone);
  ImageSet corpus = load_image_set(a.corpus, a.limit, src.resolution);
  ImageSet query;
  if (fs::is_directory(a.query)) {
    query = load_image_set(a.query, 0, src.resolution);
  } else {
    Image<float> img;
    try {
      img = io::read_rgb(a.query);
    } catch (const IoError& e) {
      throw DataError(e.what());
    }
    if (img.height != src.resolution || img.width != src.resolution)
      throw DataError("query " + a.query.string() + " is " + std::to_string(img.height) + "x" +
                      std::to_string(img.width) + ", model expects " + std::to_string(src.resolution));
    query.images = images_to_tensor({img});
    query.paths = {a.query};
  }
  auto ids = [](const std::vector<fs::path>& paths) {
    std::vector<std::string> out;
    for (const auto& p : paths) out.push_back(fs::weakly_canonical(p).string());
    return out;
  };
  if (a.grayscale) {
    query.images = grayscale_inputs(query.images);
    corpus.images = grayscale_inputs(corpus.images);
  }
  FeatureMatrix fq = features(src, query.images, a.layer, 0, 0);
  FeatureMatrix fc = features(src, corpus.images, a.layer, 0, 0);
  auto results = nearest_neighbors(fq, ids(query.paths), fc, ids(corpus.paths), a.k, a.layer);
  json r = {{"layer", a.layer}, {"k", a.k}, {"corpus", a.corpus.string()}, {"grayscale", a.grayscale}, {"results", results}};
  std::ostringstream csv;
  csv << "query,rank,neighbor,distance\n";
  for (const auto& q : results)
    for (std::size_t i = 0; i < q.neighbors.size(); ++i)
      csv << q.query_id << ',' << i + 1 << ',' << q.neighbors[i].id << ',' << q.neighbors[i].distance << '\n';
  if (!a.out.empty()) {
    r["manifest"] = manifest_beside(a.out).string();
    man.config(json{{"layer", a.layer}, {"k", a.k}, {"model", src.hash}, {"grayscale", a.grayscale}}, r.dump());
    man.artifact(a.out);
  }
  if (a.csv)
    emit_csv(csv.str(), a.out);
  else
    emit(r, a.out);
  if (!a.out.empty()) man.write(manifest_beside(a.out));
  return 0;
}

struct ProbeArgs {
  SourceArgs src;
  std::string layer = "conv5";
  fs::path data, out;
  int limit = 0, epochs = 200, target_dims = 1024;
  bool csv = false, grayscale = false;
};

int cmd_probe(const ProbeArgs& a, RunManifest& man) {
  FeatureSource src = open_source(a.src.checkpoint, a.src.backbone);
  ImageSet set = load_labeled(a.data, a.limit, src.resolution);
  if (a.grayscale) set.images = grayscale_inputs(set.images);
  ProbeConfig cfg;
  cfg.epochs = a.epochs;
  cfg.target_dims = a.target_dims;
  man.seed("probe", cfg.seed);
  json results = json::array();
  std::string csv = "layer,accuracy,train_accuracy,classes,n_train,n_test,dims\n";
  for (const auto& layer : split_layers(a.layer)) {
    ProbeResult p = probe_features(features(src, set.images, layer, -1, cfg.target_dims), set.labels, cfg);
    p.layer = layer;
    results.push_back(p);
    std::ostringstream o;
    o << layer << ',' << p.accuracy << ',' << p.train_accuracy << ',' << p.classes << ',' << p.n_train << ','
      << p.n_test << ',' << p.dims << '\n';
    csv += o.str();
  }
  json r = {{"data", a.data.string()},
            {"probe", {{"l2", cfg.l2}, {"epochs", cfg.epochs}, {"lr", cfg.lr}, {"seed", cfg.seed}}},
            {"grayscale", a.grayscale},
            {"results", results}};
  if (!a.out.empty()) {
    r["manifest"] = manifest_beside(a.out).string();
    man.config(r["probe"], r.dump());
    man.artifact(a.out);
  }
  if (a.csv)
    emit_csv(csv, a.out);
  else
    emit(r, a.out);
  if (!a.out.empty()) man.write(manifest_beside(a.out));
  return 0;
}

struct ConfusionArgs {
  SourceArgs src;
  std::string layer = "conv5";
  fs::path syn, real, out;
  int limit = 0, epochs = 200, target_dims = 1024;
  bool csv = false, grayscale = false;
};

int cmd_confusion(const ConfusionArgs& a, RunManifest& man) {
  FeatureSource src = open_source(a.src.checkpoint, a.src.backbone);
  ImageSet syn = load_image_set(a.syn, a.limit, src.resolution);
  ImageSet real = load_image_set(a.real, a.limit, src.resolution);
  if (a.grayscale) {
    syn.images = grayscale_inputs(syn.images, 1);
    real.images = grayscale_inputs(real.images, 2);
  }
  ProbeConfig cfg;
  cfg.epochs = a.epochs;
  cfg.target_dims = a.target_dims;
  ConfusionResult c = domain_confusion(features(src, syn.images, a.layer, -1, cfg.target_dims),
                                       features(src, real.images, a.layer, -1, cfg.target_dims), cfg);
  json r = {{"layer", a.layer}, {"syn", a.syn.string()}, {"real", a.real.string()}, {"grayscale", a.grayscale}, {"result", c}};
  std::ostringstream csv;
  csv << "layer,accuracy,n_syn,n_real,n_train,n_test,dims\n"
      << a.layer << ',' << c.accuracy << ',' << c.n_syn << ',' << c.n_real << ',' << c.n_train << ',' << c.n_test << ','
      << c.dims << '\n';
  if (!a.out.empty()) {
    r["manifest"] = manifest_beside(a.out).string();
    man.config(json{{"layer", a.layer}, {"epochs", cfg.epochs}, {"model", src.hash}, {"grayscale", a.grayscale}}, r.dump());
    man.artifact(a.out);
  }
  if (a.csv)
    emit_csv(csv.str(), a.out);
  else
    emit(r, a.out);
  if (!a.out.empty()) man.write(manifest_beside(a.out));
  return 0;
}

void add_source(CLI::App* sub, SourceArgs& s) {
  auto* g = sub->add_option_group("model", "Exactly one feature source");
  g->add_option("--checkpoint", s.checkpoint, "Training checkpoint");
  g->add_option("--backbone", s.backbone, "Exported backbone");
  g->require_option(1);
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Feature learning from synthetic imagery: data generation, training, export and evaluation", "synthfeat"};
  app.require_subcommand(1);
  std::function<int(RunManifest&)> action;
  std::string command;

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Render a procedural dataset");
  g->add_option("--seed", gen.seed, "Scene seed")->required();
  g->add_option("--count", gen.count, "Number of samples")->required();
  g->add_option("--res", gen.res, "Resolution HxW or N")->capture_default_str();
  g->add_option("--profile", gen.profile, "synthetic, real-proxy or shapes")->capture_default_str();
  g->add_option("--out", gen.out, "Output directory")->required();
  g->callback([&] { action = [&](RunManifest& m) { return cmd_gen_data(gen, m); }; });

  InspectArgs ins;
  auto* i = app.add_subcommand("inspect-sample", "Summarise one sample and its derived targets");
  i->add_option("--data", ins.data, "Synthetic dataset directory")->required();
  i->add_option("--index", ins.index, "Sample index")->capture_default_str();
  i->add_option("--dump-png", ins.dump_png, "Write rgb/depth/normal/contour images here");
  i->callback([&] { action = [&](RunManifest&) { return cmd_inspect(ins); }; });

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train base, heads and discriminator");
  t->add_option("--config", tr.config, "Flat key = value config file")->required();
  t->add_option("--set", tr.overrides, "Override a config key (key=value), repeatable");
  t->add_option("--log-every", tr.log_every, "Progress line cadence on stderr")->capture_default_str();
  t->add_flag("--quiet", tr.quiet, "No progress output");
  t->callback([&] { action = [&](RunManifest& m) { return cmd_train(tr, m); }; });

  ExportArgs ex;
  auto* e = app.add_subcommand("export", "Fold batchnorm, convert the bottleneck to dense layers, rescale");
  e->add_option("--checkpoint", ex.checkpoint, "Training checkpoint")->required();
  e->add_option("--out", ex.out, "Backbone file")->required();
  e->add_option("--calib", ex.calib, "Image directory for variance rescaling");
  e->add_option("--calib-count", ex.calib_count, "Calibration images")->capture_default_str();
  e->add_flag("--no-rescale", ex.no_rescale, "Skip variance rescaling");
  e->add_flag("--grayscale", ex.grayscale, "Calibrate on single-channel replicated images, as in pretraining");
  e->add_option("--dump-png", ex.dump_png, "Write the first-layer filter grid here");
  e->callback([&] { action = [&](RunManifest& m) { return cmd_export(ex, m); }; });

  EvalNormalsArgs en;
  auto* n = app.add_subcommand("eval-normals", "Angular error of predicted normals");
  n->add_option("--checkpoint", en.checkpoint, "Training checkpoint")->required();
  n->add_option("--data", en.data, "Synthetic dataset with ground truth")->required();
  n->add_option("--baseline", en.baseline, "Fit the best constant normal on this dataset and score it too");
  n->add_option("--limit", en.limit, "Use the first N samples");
  n->add_option("--out", en.out, "Report file (default stdout)");
  n->add_flag("--csv", en.csv, "Tabular output");
  n->add_flag("--grayscale", en.grayscale, "Replicate one random channel per image, as in pretraining");
  n->add_option("--dump-png", en.dump_png, "Write prediction maps and the filter grid here");
  n->callback([&] { action = [&](RunManifest& m) { return cmd_eval_normals(en, m); }; });

  RetrieveArgs rt;
  auto* r = app.add_subcommand("retrieve", "Cosine nearest neighbours in feature space");
  add_source(r, rt.src);
  r->add_option("--layer", rt.layer, "Feature layer")->capture_default_str();
  r->add_option("--query", rt.query, "Query image or directory")->required();
  r->add_option("--corpus", rt.corpus, "Corpus directory")->required();
  r->add_option("-k", rt.k, "Neighbours per query")->capture_default_str();
  r->add_option("--limit", rt.limit, "Use the first N corpus images");
  r->add_option("--out", rt.out, "Report file (default stdout)");
  r->add_flag("--csv", rt.csv, "Tabular output");
  r->add_flag("--grayscale", rt.grayscale, "Replicate one random channel per image, as in pretraining");
  r->callback([&] { action = [&](RunManifest& m) { return cmd_retrieve(rt, m); }; });

  ProbeArgs pr;
  auto* p = app.add_subcommand("probe", "Linear probe on frozen features");
  add_source(p, pr.src);
  p->add_option("--layer", pr.layer, "Layer or comma-separated layers")->capture_default_str();
  p->add_option("--data", pr.data, "Labelled dataset directory")->required();
  p->add_option("--limit", pr.limit, "Use the first N images");
  p->add_option("--epochs", pr.epochs, "Probe epochs")->capture_default_str();
  p->add_option("--target-dims", pr.target_dims, "Flattened size each layer is resized towards")->capture_default_str();
  p->add_option("--out", pr.out, "Report file (default stdout)");
  p->add_flag("--csv", pr.csv, "Tabular output");
  p->add_flag("--grayscale", pr.grayscale, "Replicate one random channel per image, as in pretraining");
  p->callback([&] { action = [&](RunManifest& m) { return cmd_probe(pr, m); }; });

  ConfusionArgs cf;
  auto* c = app.add_subcommand("confusion", "Held-out accuracy of a synthetic-vs-real feature probe");
  add_source(c, cf.src);
  c->add_option("--layer", cf.layer, "Feature layer")->capture_default_str();
  c->add_option("--syn", cf.syn, "Synthetic image directory")->required();
  c->add_option("--real", cf.real, "Real image directory")->required();
  c->add_option("--limit", cf.limit, "Use the first N images of each domain");
  c->add_option("--epochs", cf.epochs, "Probe epochs")->capture_default_str();
  c->add_option("--target-dims", cf.target_dims, "Flattened feature size target")->capture_default_str();
  c->add_option("--out", cf.out, "Report file (default stdout)");
  c->add_flag("--csv", cf.csv, "Tabular output");
  c->add_flag("--grayscale", cf.grayscale, "Replicate one random channel per image, as in pretraining");
  c->callback([&] { action = [&](RunManifest& m) { return cmd_confusion(cf, m); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    auto subs = app.get_subcommands();
    std::cerr << "error: usage: " << one_line(ex.what()) << "\n" << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  }
  for (auto* sub : app.get_subcommands()) command = sub->get_name();
  try {
    RunManifest man(args, command);
    return action(man);
  } catch (const synthfeat::Error& ex) {
    std::cerr << "error: " << ex.category() << ": " << one_line(ex.what()) << "\n";
  } catch (const std::filesystem::filesystem_error& ex) {
    std::cerr << "error: io: " << one_line(ex.what()) << "\n";
  } catch (const std::exception& ex) {
    std::cerr << "error: internal: " << one_line(ex.what()) << "\n";
  }
  return 1;
}
