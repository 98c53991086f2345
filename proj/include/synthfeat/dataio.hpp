#pragma once

// Training targets derived from rendered samples, the grayscale input trick,
// the on-disk dataset layout and the batch stream used by the trainer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synthfeat/errors.hpp"
#include "synthfeat/imageio.hpp"
#include "synthfeat/rng.hpp"
#include "synthfeat/scenegen.hpp"
#include "synthfeat/tensor.hpp"

namespace synthfeat {

namespace fs = std::filesystem;

struct TaskTargets {
  Image<std::uint8_t> contour;
  double beta = 1.0;
  Image<float> log_depth;
  Image<float> normal;
  Image<std::uint8_t> valid;
};

/// Marks valid pixels whose 4-neighbourhood contains a different instance id.
/// Object/background boundaries count; pixels outside the frame do not.
inline Image<std::uint8_t> extract_contours(const Image<std::uint16_t>& instance) {
  const int h = instance.height, w = instance.width;
  Image<std::uint8_t> out(h, w, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::uint16_t id = instance.at(y, x);
      if (id == 0) continue;
      bool edge = (y > 0 && instance.at(y - 1, x) != id) || (y + 1 < h && instance.at(y + 1, x) != id) ||
                  (x > 0 && instance.at(y, x - 1) != id) || (x + 1 < w && instance.at(y, x + 1) != id);
      out.at(y, x) = edge ? 1 : 0;
    }
  return out;
}

/// Fraction of valid pixels that are not edges; 1 when there are no edges.
inline double compute_beta(const Image<std::uint8_t>& contour, const Image<std::uint8_t>& valid) {
  std::size_t n_valid = 0, n_edge = 0;
  for (std::size_t i = 0; i < valid.data.size(); ++i) {
    if (!valid.data[i]) {
      if (contour.data[i]) throw DataError("contour pixel outside the valid region");
      continue;
    }
    ++n_valid;
    if (contour.data[i]) ++n_edge;
  }
  if (n_valid == 0) throw DataError("compute_beta: sample has no valid pixels");
  return static_cast<double>(n_valid - n_edge) / static_cast<double>(n_valid);
}

inline Image<float> to_log_depth(const Image<float>& depth, const Image<std::uint8_t>& valid) {
  Image<float> out(depth.height, depth.width, 1);
  for (std::size_t i = 0; i < depth.data.size(); ++i) {
    if (!valid.data[i]) continue;
    if (!(depth.data[i] > 0)) throw DataError("non-positive depth at a valid pixel");
    out.data[i] = std::log(depth.data[i]);
  }
  return out;
}

/// Copies channel `channel` of an RGB image into all three channels.
inline Image<float> replicate_channel(const Image<float>& rgb, int channel) {
  Image<float> out(rgb.height, rgb.width, 3);
  for (std::size_t i = 0; i < rgb.pixels(); ++i) {
    float v = rgb.data[i * 3 + static_cast<std::size_t>(channel)];
    out.data[i * 3] = out.data[i * 3 + 1] = out.data[i * 3 + 2] = v;
  }
  return out;
}

/// Grayscale input trick: one of R, G, B chosen uniformly, replicated 3 times.
inline Image<float> grayscale_augment(const Image<float>& rgb, Rng& rng) {
  return replicate_channel(rgb, rng.uniform_int(0, 2));
}

inline TaskTargets derive_targets(const ImageSample& s) {
  if (!s.has_ground_truth()) throw DataError("sample has no ground-truth maps");
  TaskTargets t;
  t.valid = s.valid;
  t.contour = extract_contours(s.instance);
  t.beta = compute_beta(t.contour, t.valid);
  t.log_depth = to_log_depth(s.depth, s.valid);
  t.normal = s.normal;
  return t;
}

/// Network input encoding of an RGB image: NCHW with values mapped to [-1, 1].
inline void write_input(const Image<float>& rgb, std::span<float> dst) {
  const std::size_t hw = rgb.pixels();
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      dst[static_cast<std::size_t>(c) * hw + i] = 2.0f * rgb.data[i * 3 + static_cast<std::size_t>(c)] - 1.0f;
}

inline Tensor images_to_tensor(const std::vector<Image<float>>& images) {
  if (images.empty()) throw DataError("no images");
  Tensor t(static_cast<int>(images.size()), 3, images[0].height, images[0].width);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].height != t.h() || images[i].width != t.w()) throw DataError("image resolution mismatch");
    write_input(images[i], t.item(static_cast<int>(i)));
  }
  return t;
}

struct Batch {
  Tensor inputs;  ///< B x 3 x H x W
  std::vector<TaskTargets> targets;  ///< empty for real-domain batches
  std::vector<int> indices;          ///< dataset indices of the items
  Domain domain = Domain::synthetic;

  int size() const { return inputs.empty() ? 0 : inputs.n(); }
};

/// Target maps of a batch as dense tensors, laid out for the loss functions.
struct TargetTensors {
  Mask contour, valid;  // B x 1 x H x W
  std::vector<double> beta;
  Tensor log_depth;  // B x 1 x H x W
  Tensor normal;     // B x 3 x H x W
};

inline TargetTensors stack_targets(const std::vector<TaskTargets>& targets) {
  if (targets.empty()) throw DataError("batch carries no targets");
  int b = static_cast<int>(targets.size()), h = targets[0].valid.height, w = targets[0].valid.width;
  TargetTensors out{Mask(b, 1, h, w), Mask(b, 1, h, w), {}, Tensor(b, 1, h, w), Tensor(b, 3, h, w)};
  std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < b; ++i) {
    const auto& t = targets[static_cast<std::size_t>(i)];
    std::copy(t.contour.data.begin(), t.contour.data.end(), out.contour.item(i).begin());
    std::copy(t.valid.data.begin(), t.valid.data.end(), out.valid.item(i).begin());
    std::copy(t.log_depth.data.begin(), t.log_depth.data.end(), out.log_depth.item(i).begin());
    auto nd = out.normal.item(i);
    for (std::size_t p = 0; p < hw; ++p)
      for (int c = 0; c < 3; ++c) nd[static_cast<std::size_t>(c) * hw + p] = t.normal.data[p * 3 + static_cast<std::size_t>(c)];
    out.beta.push_back(t.beta);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset layout
//
//   rgb/{i:06}.png        8-bit RGB
//   depth/{i:06}.bin      "DPTH" float map
//   normal/{i:06}.bin     "NRML" float map, 3 floats per pixel
//   instance/{i:06}.png   16-bit grayscale ids
//   meta.json             seed, config hash, count, resolution (+ labels)
// Real-domain datasets carry rgb/ and meta.json only.

inline std::string sample_name(int i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06d%s", i, ext);
  return buf;
}

struct DatasetMeta {
  std::uint64_t seed = 0;
  std::string config_hash;
  int count = 0;
  int height = 0, width = 0;
  Domain domain = Domain::synthetic;
  SceneProfile profile = SceneProfile::synthetic;
  std::vector<int> labels;  // shapes profile only
};

inline nlohmann::json to_json(const DatasetMeta& m) {
  nlohmann::json j{{"seed", m.seed},
                   {"config_hash", m.config_hash},
                   {"count", m.count},
                   {"resolution", {m.height, m.width}},
                   {"domain", to_string(m.domain)},
                   {"profile", to_string(m.profile)}};
  if (!m.labels.empty()) {
    j["labels"] = m.labels;
    j["num_classes"] = kShapeClasses;
  }
  return j;
}

inline std::optional<DatasetMeta> read_meta(const fs::path& dir) {
  fs::path p = dir / "meta.json";
  if (!fs::exists(p)) return std::nullopt;
  std::ifstream is(p);
  nlohmann::json j;
  try {
    is >> j;
    DatasetMeta m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.count = j.at("count").get<int>();
    m.height = j.at("resolution").at(0).get<int>();
    m.width = j.at("resolution").at(1).get<int>();
    m.domain = j.value("domain", "synthetic") == "real" ? Domain::real : Domain::synthetic;
    m.profile = parse_profile(j.value("profile", "synthetic"));
    if (j.contains("labels")) m.labels = j["labels"].get<std::vector<int>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt " + p.string() + ": " + e.what());
  }
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << text;
    if (!os) throw IoError("short write " + tmp.string());
  }
  fs::rename(tmp, path);
}

/// Renders `count` scenes and writes them in the dataset layout.
inline DatasetMeta write_dataset(const fs::path& dir, std::uint64_t seed, int count, int height, int width,
                                 SceneProfile profile) {
  if (count < 1) throw ConfigError("count must be positive");
  GenConfig cfg = GenConfig::for_profile(profile);
  cfg.width = width;
  cfg.height = height;
  bool real = profile == SceneProfile::real_proxy;
  fs::create_directories(dir / "rgb");
  if (!real)
    for (const char* sub : {"depth", "normal", "instance"}) fs::create_directories(dir / sub);

  DatasetMeta meta;
  meta.seed = seed;
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(cfg.hash()));
  meta.config_hash = hash;
  meta.count = count;
  meta.height = height;
  meta.width = width;
  meta.domain = real ? Domain::real : Domain::synthetic;
  meta.profile = profile;
  for (int i = 0; i < count; ++i) {
    int label = profile == SceneProfile::shapes ? i % kShapeClasses : -1;
    Scene scene = generate_scene(derive_seed(seed, static_cast<std::uint64_t>(i)), cfg, label);
    ImageSample s = render(scene, height, width);
    io::write_png_rgb(dir / "rgb" / sample_name(i, ".png"), s.rgb);
    if (!real) {
      io::write_depth(dir / "depth" / sample_name(i, ".bin"), s.depth);
      io::write_normal(dir / "normal" / sample_name(i, ".bin"), s.normal);
      io::write_png_u16(dir / "instance" / sample_name(i, ".png"), s.instance);
    }
    if (label >= 0) meta.labels.push_back(label);
  }
  write_text_atomic(dir / "meta.json", to_json(meta).dump(2) + "\n");
  return meta;
}

/// Loads sample i of a synthetic dataset directory, ground truth included.
inline ImageSample load_sample(const fs::path& dir, int i) {
  ImageSample s;
  auto need = [&](const fs::path& p) {
    if (!fs::exists(p)) throw DataError("missing file " + p.string());
    return p;
  };
  try {
    s.rgb = io::read_rgb(need(dir / "rgb" / sample_name(i, ".png")));
    s.depth = io::read_depth(need(dir / "depth" / sample_name(i, ".bin")));
    s.normal = io::read_normal(need(dir / "normal" / sample_name(i, ".bin")));
    s.instance = io::read_png_u16(need(dir / "instance" / sample_name(i, ".png")));
  } catch (const IoError& e) {
    throw DataError(e.what());
  }
  int h = s.rgb.height, w = s.rgb.width;
  if (s.depth.height != h || s.depth.width != w || s.normal.height != h || s.normal.width != w ||
      s.instance.height != h || s.instance.width != w)
    throw DataError("resolution mismatch between maps of sample " + std::to_string(i) + " in " + dir.string());
  s.valid = Image<std::uint8_t>(h, w, 1);
  for (std::size_t p = 0; p < s.valid.data.size(); ++p) s.valid.data[p] = s.instance.data[p] > 0 ? 1 : 0;
  s.domain = Domain::synthetic;
  return s;
}

/// Image files of a real-domain folder: `dir/rgb/` when present, else `dir/`.
inline std::vector<fs::path> list_images(const fs::path& dir) {
  fs::path root = fs::is_directory(dir / "rgb") ? dir / "rgb" : dir;
  if (!fs::is_directory(root)) throw DataError("not a directory: " + root.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no images in " + root.string());
  return files;
}

inline int dataset_count(const fs::path& dir) {
  if (auto m = read_meta(dir)) return m->count;
  return static_cast<int>(list_images(dir).size());
}

struct StreamOptions {
  bool grayscale = true;     ///< apply the grayscale input trick
  int expected_height = 0;   ///< 0: take from the first sample
  int expected_width = 0;
  int limit = 0;             ///< use only the first `limit` samples when > 0
};

/// Epoch-shuffled batches over an in-memory copy of a dataset directory.
/// Batch k of epoch e is a pure function of (shuffle_seed, e, k), so a stream
/// can be repositioned to any global batch index.
class BatchStream {
 public:
  BatchStream(const fs::path& dir, int batch_size, std::uint64_t shuffle_seed, Domain domain,
              StreamOptions opts = {})
      : batch_size_(batch_size), seed_(shuffle_seed), domain_(domain), opts_(opts) {
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    if (domain == Domain::synthetic) {
      auto meta = read_meta(dir);
      if (!meta) throw DataError("missing meta.json in " + dir.string());
      if (meta->domain != Domain::synthetic) throw DataError(dir.string() + " is not a synthetic dataset");
      int n = opts.limit > 0 ? std::min(opts.limit, meta->count) : meta->count;
      for (int i = 0; i < n; ++i) {
        ImageSample s = load_sample(dir, i);
        check_resolution(s.rgb, dir / "rgb" / sample_name(i, ".png"));
        targets_.push_back(derive_targets(s));
        images_.push_back(std::move(s.rgb));
      }
    } else {
      auto files = list_images(dir);
      if (opts.limit > 0 && static_cast<int>(files.size()) > opts.limit) files.resize(static_cast<std::size_t>(opts.limit));
      for (const auto& f : files) {
        Image<float> img;
        try {
          img = io::read_rgb(f);
        } catch (const IoError& e) {
          throw DataError(e.what());
        }
        check_resolution(img, f);
        images_.push_back(std::move(img));
      }
    }
    reset_epoch(0);
  }

  int size() const { return static_cast<int>(images_.size()); }
  int batches_per_epoch() const { return (size() + batch_size_ - 1) / batch_size_; }
  int height() const { return images_.front().height; }
  int width() const { return images_.front().width; }
  int epoch() const { return epoch_; }

  void reset_epoch(int epoch) {
    epoch_ = epoch;
    cursor_ = 0;
    order_ = epoch_order(epoch);
  }

  /// Next batch of the current epoch; nullopt once the epoch is exhausted.
  std::optional<Batch> next() {
    if (cursor_ >= batches_per_epoch()) return std::nullopt;
    return make_batch(epoch_, cursor_++, order_);
  }

  /// Batch number `global_index` counting across epochs.
  Batch batch_at(long long global_index) {
    int e = static_cast<int>(global_index / batches_per_epoch());
    int k = static_cast<int>(global_index % batches_per_epoch());
    if (e != epoch_) reset_epoch(e);
    return make_batch(e, k, order_);
  }

  const Image<float>& image(int i) const { return images_[static_cast<std::size_t>(i)]; }
  const TaskTargets& targets(int i) const { return targets_.at(static_cast<std::size_t>(i)); }

 private:
  void check_resolution(const Image<float>& img, const fs::path& p) {
    int eh = opts_.expected_height, ew = opts_.expected_width;
    if (eh == 0 && !images_.empty()) {
      eh = images_.front().height;
      ew = images_.front().width;
    }
    if (eh != 0 && (img.height != eh || img.width != ew))
      throw DataError("resolution mismatch at " + p.string() + ": " + std::to_string(img.height) + "x" +
                      std::to_string(img.width) + " vs " + std::to_string(eh) + "x" + std::to_string(ew));
  }

  std::vector<int> epoch_order(int epoch) const {
    std::vector<int> order(images_.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed_, 0x5348u, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.next() % i)]);
    return order;
  }

  Batch make_batch(int epoch, int k, const std::vector<int>& order) const {
    Batch b;
    b.domain = domain_;
    int begin = k * batch_size_, end = std::min(size(), begin + batch_size_);
    std::vector<Image<float>> imgs;
    for (int p = begin; p < end; ++p) {
      int idx = order[static_cast<std::size_t>(p)];
      b.indices.push_back(idx);
      if (opts_.grayscale) {
        Rng rng(derive_seed(seed_, 0x4752u, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(p)));
        imgs.push_back(grayscale_augment(images_[static_cast<std::size_t>(idx)], rng));
      } else {
        imgs.push_back(images_[static_cast<std::size_t>(idx)]);
      }
      if (domain_ == Domain::synthetic) b.targets.push_back(targets_[static_cast<std::size_t>(idx)]);
    }
    b.inputs = images_to_tensor(imgs);
    return b;
  }

  int batch_size_;
  std::uint64_t seed_;
  Domain domain_;
  StreamOptions opts_;
  std::vector<Image<float>> images_;
  std::vector<TaskTargets> targets_;
  std::vector<int> order_;
  int epoch_ = 0;
  int cursor_ = 0;
};

}  // namespace synthfeat
