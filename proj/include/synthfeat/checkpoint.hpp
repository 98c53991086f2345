#pragma once

// Checkpoint archives: arch.json, params/manifest.json + params/<name>.bin
// (raw little-endian float32), optional optim/ moments, train_state.json.

#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "synthfeat/archive.hpp"
#include "synthfeat/imageio.hpp"
#include "synthfeat/model.hpp"
#include "synthfeat/optim.hpp"

namespace synthfeat {

inline constexpr int kFormatVersion = 1;

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace detail {

inline void add_tensors(tar::Entries& out, const std::string& dir, const ParamMap& tensors, nlohmann::json& manifest,
                        const char* role) {
  for (const auto& [name, t] : tensors) {
    std::string bytes;
    io::append_f32_le(bytes, t.span());
    out.emplace_back(dir + name + ".bin", std::move(bytes));
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"role", role}});
  }
}

inline Tensor read_tensor(const std::map<std::string, std::string>& files, const std::string& path,
                          const std::vector<int>& shape, const std::string& origin) {
  auto it = files.find(path);
  if (it == files.end()) throw IoError(origin + ": missing " + path);
  Tensor t(shape);
  if (it->second.size() != t.size() * 4)
    throw IoError(origin + ": " + path + " holds " + std::to_string(it->second.size()) + " bytes, expected " +
                  std::to_string(t.size() * 4));
  t.assign(io::parse_f32_le(reinterpret_cast<const unsigned char*>(it->second.data()), t.size()));
  return t;
}

inline const std::string& member(const std::map<std::string, std::string>& files, const std::string& name,
                                 const std::string& origin) {
  auto it = files.find(name);
  if (it == files.end()) throw IoError(origin + ": missing " + name);
  return it->second;
}

inline nlohmann::json parse_json(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(what + ": " + e.what());
  }
}

}  // namespace detail

struct ArchiveData {
  std::string kind;
  nlohmann::json header;  ///< arch.json
  ParamMap params, buffers;
  nlohmann::json train_state = nlohmann::json::object();
  std::optional<Adam> optimizer;
};

inline void write_archive(const std::filesystem::path& path, const ArchiveData& a) {
  tar::Entries entries;
  nlohmann::json header = a.header;
  header["format_version"] = kFormatVersion;
  header["kind"] = a.kind;
  entries.emplace_back("arch.json", header.dump(2) + "\n");
  nlohmann::json manifest = nlohmann::json::array();
  tar::Entries tensors;
  detail::add_tensors(tensors, "params/", a.params, manifest, "param");
  detail::add_tensors(tensors, "params/", a.buffers, manifest, "buffer");
  entries.emplace_back("params/manifest.json", manifest.dump(2) + "\n");
  entries.insert(entries.end(), tensors.begin(), tensors.end());
  if (a.optimizer) {
    nlohmann::json om = nlohmann::json::array();
    tar::Entries ot;
    detail::add_tensors(ot, "optim/m/", a.optimizer->first_moments(), om, "m");
    detail::add_tensors(ot, "optim/v/", a.optimizer->second_moments(), om, "v");
    const auto& c = a.optimizer->config();
    nlohmann::json meta = {{"kind", "adam"},
                           {"lr_bh", c.lr_bh},
                           {"lr_d", c.lr_d},
                           {"beta1", c.beta1},
                           {"beta2", c.beta2},
                           {"eps", c.eps},
                           {"steps", a.optimizer->steps()},
                           {"tensors", om}};
    entries.emplace_back("optim/state.json", meta.dump(2) + "\n");
    entries.insert(entries.end(), ot.begin(), ot.end());
  }
  entries.emplace_back("train_state.json", a.train_state.dump(2) + "\n");
  tar::write(path, entries);
}

inline ArchiveData read_archive(const std::filesystem::path& path) {
  const std::string origin = path.string();
  auto files = tar::read(path);
  ArchiveData a;
  a.header = detail::parse_json(detail::member(files, "arch.json", origin), origin + " arch.json");
  if (a.header.value("format_version", 0) != kFormatVersion)
    throw IoError(origin + ": unsupported format_version " + a.header.value("format_version", nlohmann::json()).dump());
  a.kind = a.header.value("kind", "");
  auto manifest = detail::parse_json(detail::member(files, "params/manifest.json", origin), origin + " manifest");
  for (const auto& e : manifest) {
    std::string name = e.at("name");
    Tensor t = detail::read_tensor(files, "params/" + name + ".bin", e.at("shape").get<std::vector<int>>(), origin);
    (e.value("role", "param") == "buffer" ? a.buffers : a.params)[name] = std::move(t);
  }
  if (auto it = files.find("optim/state.json"); it != files.end()) {
    auto meta = detail::parse_json(it->second, origin + " optim/state.json");
    AdamConfig c{meta.at("lr_bh"), meta.at("lr_d"), meta.at("beta1"), meta.at("beta2"), meta.at("eps")};
    ParamMap m, v;
    for (const auto& e : meta.at("tensors")) {
      std::string role = e.at("role"), name = e.at("name");
      (role == "m" ? m : v)[name] =
          detail::read_tensor(files, "optim/" + role + "/" + name + ".bin", e.at("shape").get<std::vector<int>>(), origin);
    }
    Adam opt(c);
    opt.restore(std::move(m), std::move(v), meta.at("steps").get<std::map<std::string, long long>>());
    a.optimizer = std::move(opt);
  }
  if (auto it = files.find("train_state.json"); it != files.end())
    a.train_state = detail::parse_json(it->second, origin + " train_state.json");
  return a;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelState& m, const Adam* opt,
                            const nlohmann::json& train_state) {
  ArchiveData a;
  a.kind = "checkpoint";
  a.header = {{"arch", m.arch}, {"seed", m.seed}};
  a.params = m.params;
  a.buffers = m.buffers;
  a.train_state = train_state;
  if (opt) a.optimizer = *opt;
  write_archive(path, a);
}

struct LoadedCheckpoint {
  ModelState model;
  std::optional<Adam> optimizer;
  nlohmann::json train_state;
};

/// Loads a training checkpoint and checks it against its own architecture.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  ArchiveData a = read_archive(path);
  if (a.kind != "checkpoint") throw IoError(path.string() + ": archive kind '" + a.kind + "' is not a checkpoint");
  ArchitectureConfig arch;
  try {
    arch = a.header.at("arch").get<ArchitectureConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad arch.json: " + e.what());
  }
  ModelState ref = init_model(arch, 0);
  for (const auto* group : {&ref.params, &ref.buffers}) {
    const ParamMap& got = group == &ref.params ? a.params : a.buffers;
    for (const auto& [name, t] : *group) {
      auto it = got.find(name);
      if (it == got.end()) throw IoError(path.string() + ": missing tensor " + name);
      if (it->second.shape() != t.shape())
        throw IoError(path.string() + ": tensor " + name + " has shape " + shape_string(it->second.shape()) +
                      ", architecture expects " + shape_string(t.shape()));
      if (!all_finite(it->second.span())) throw NumericError(path.string() + ": non-finite values in " + name);
    }
    if (got.size() != group->size()) throw IoError(path.string() + ": unexpected extra tensors");
  }
  LoadedCheckpoint c;
  c.model.arch = std::move(arch);
  c.model.seed = a.header.value("seed", std::uint64_t{0});
  c.model.params = std::move(a.params);
  c.model.buffers = std::move(a.buffers);
  c.optimizer = std::move(a.optimizer);
  c.train_state = std::move(a.train_state);
  return c;
}

inline std::string file_hash(const std::filesystem::path& p) { return hex64(fnv1a(tar::read_file(p))); }

}  // namespace synthfeat
