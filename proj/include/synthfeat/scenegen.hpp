#pragma once

// Procedural toy indoor scenes and an analytic ray caster that emits
// pixel-exact RGB, depth, surface normal and instance maps.
//
// Conventions: world frame is y-up. Camera frame is +x right, +y down, +z into
// the scene. Depth is the z coordinate of the hit point in the camera frame.
// Normals are reported in the camera frame and always face the camera
// (n . ray < 0).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "synthfeat/errors.hpp"
#include "synthfeat/geometry.hpp"
#include "synthfeat/rng.hpp"

namespace synthfeat {

enum class ShapeKind : std::uint8_t { plane, box, sphere };
enum class Domain : std::uint8_t { synthetic, real };

inline const char* to_string(Domain d) { return d == Domain::synthetic ? "synthetic" : "real"; }

struct Primitive {
  ShapeKind kind = ShapeKind::sphere;
  Vec3 center;                ///< plane: any point on it; box/sphere: centroid
  Vec3 normal{0, 1, 0};       ///< plane only, unit length
  Vec3 size{1, 1, 1};         ///< box: half extents; sphere: radius in x; plane: unused
  Vec3 albedo{0.7, 0.7, 0.7};
  int instance_id = 1;
  double texture_contrast = 0.0;  ///< checker modulation of albedo, 0 disables
  double texture_period = 0.5;
  bool operator==(const Primitive&) const = default;
};

struct Camera {
  double focal_px = 64.0;
  double cx = 32.0, cy = 32.0;
  int width = 64, height = 64;  ///< resolution the intrinsics refer to
  Vec3 position;
  Mat3 rotation;  ///< camera-to-world; columns are the camera axes
  bool operator==(const Camera&) const = default;
};

struct DirectionalLight {
  Vec3 direction{0, 1, 0};  ///< unit vector from the surface toward the light
  double intensity = 1.0;
  bool operator==(const DirectionalLight&) const = default;
};

struct Scene {
  std::vector<Primitive> primitives;
  Camera camera;
  std::vector<DirectionalLight> lights;
  double noise_sigma = 0.0;  ///< additive per-pixel gaussian noise on rgb
  std::uint64_t noise_seed = 0;
  bool operator==(const Scene&) const = default;
};

/// Checks the Scene invariants; throws DataError naming the first violation.
inline void validate(const Scene& scene) {
  std::vector<int> ids;
  for (const auto& p : scene.primitives) {
    if (!(p.size.x > 0 && p.size.y > 0 && p.size.z > 0))
      throw DataError("primitive " + std::to_string(p.instance_id) + " has non-positive size");
    if (p.kind == ShapeKind::plane && std::abs(norm(p.normal) - 1.0) > 1e-6)
      throw DataError("plane normal is not unit length");
    ids.push_back(p.instance_id);
  }
  std::sort(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] != static_cast<int>(i) + 1) throw DataError("instance ids must be unique and contiguous from 1");
  for (const auto& l : scene.lights)
    if (std::abs(norm(l.direction) - 1.0) > 1e-6) throw DataError("light direction is not unit length");
}

/// Interleaved HWC image.
template <class T>
struct Image {
  int height = 0, width = 0, channels = 0;
  std::vector<T> data;

  Image() = default;
  Image(int h, int w, int c, T fill = T{})
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}
  T& at(int y, int x, int c = 0) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  const T& at(int y, int x, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  bool operator==(const Image&) const = default;
};

struct ImageSample {
  Image<float> rgb;             ///< H x W x 3 in [0, 1]
  Image<float> depth;           ///< metres, 0 where invalid
  Image<float> normal;          ///< H x W x 3 camera-frame unit vectors, 0 where invalid
  Image<std::uint16_t> instance;
  Image<std::uint8_t> valid;
  Domain domain = Domain::synthetic;

  int height() const { return rgb.height; }
  int width() const { return rgb.width; }
  bool has_ground_truth() const { return !depth.data.empty(); }
  bool operator==(const ImageSample&) const = default;
};

/// Far clipping distance along the optical axis, metres.
inline constexpr double kFarPlane = 20.0;

enum class SceneProfile : std::uint8_t { synthetic, real_proxy, shapes };

inline const char* to_string(SceneProfile p) {
  switch (p) {
    case SceneProfile::synthetic: return "synthetic";
    case SceneProfile::real_proxy: return "real-proxy";
    case SceneProfile::shapes: return "shapes";
  }
  return "?";
}

inline SceneProfile parse_profile(const std::string& s) {
  if (s == "synthetic") return SceneProfile::synthetic;
  if (s == "real-proxy" || s == "real") return SceneProfile::real_proxy;
  if (s == "shapes") return SceneProfile::shapes;
  throw ConfigError("unknown scene profile '" + s + "'");
}

/// Number of object classes the shapes profile draws from.
inline constexpr int kShapeClasses = 4;

struct Range {
  double lo = 0, hi = 0;
  double draw(Rng& rng) const { return lo == hi ? lo : rng.uniform(lo, hi); }
};

struct GenConfig {
  int min_objects = 2, max_objects = 5;
  Range object_size{0.25, 0.7};
  bool room = true;
  Range room_depth{6.0, 9.0};
  Range room_half_width{2.5, 4.0};
  Range camera_height{1.0, 1.6};
  Range fov_deg{55.0, 65.0};
  Range pitch_deg{-18.0, -6.0};
  Range yaw_deg{-12.0, 12.0};
  Range object_distance{2.2, 5.5};
  int width = 64, height = 64;
  int min_lights = 1, max_lights = 2;
  Range light_intensity{0.55, 0.95};
  Range light_elevation_deg{35.0, 80.0};
  Range texture_contrast{0.0, 0.0};
  Range texture_period{0.3, 0.8};
  double noise_sigma = 0.0;
  SceneProfile profile = SceneProfile::synthetic;
  int max_retries = 32;

  /// Default statistics for each dataset profile. The real-proxy profile uses
  /// dimmer, lower-elevation lighting plus textured surfaces and sensor noise.
  static GenConfig for_profile(SceneProfile p) {
    GenConfig g;
    g.profile = p;
    if (p == SceneProfile::real_proxy) {
      g.light_intensity = {0.35, 0.7};
      g.light_elevation_deg = {15.0, 50.0};
      g.min_lights = 2;
      g.max_lights = 3;
      g.texture_contrast = {0.25, 0.45};
      g.noise_sigma = 0.03;
    } else if (p == SceneProfile::shapes) {
      g.min_objects = 1;
      g.max_objects = 1;
    }
    return g;
  }

  std::string canonical() const {
    auto r = [](const Range& x) { return std::to_string(x.lo) + ":" + std::to_string(x.hi); };
    return std::to_string(min_objects) + "," + std::to_string(max_objects) + "," + r(object_size) + "," +
           std::to_string(room) + "," + r(room_depth) + "," + r(room_half_width) + "," + r(camera_height) + "," +
           r(fov_deg) + "," + r(pitch_deg) + "," + r(yaw_deg) + "," + r(object_distance) + "," +
           std::to_string(width) + "x" + std::to_string(height) + "," + std::to_string(min_lights) + "," +
           std::to_string(max_lights) + "," + r(light_intensity) + "," + r(light_elevation_deg) + "," +
           r(texture_contrast) + "," + r(texture_period) + "," + std::to_string(noise_sigma) + "," +
           to_string(profile);
  }
  std::uint64_t hash() const { return fnv1a(canonical()); }
};

namespace detail {

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 normal;  // world frame, not yet oriented
  int index = -1;
};

inline std::optional<std::pair<double, Vec3>> intersect(const Primitive& p, const Vec3& o, const Vec3& d) {
  constexpr double kEps = 1e-9;
  switch (p.kind) {
    case ShapeKind::plane: {
      double denom = dot(p.normal, d);
      if (std::abs(denom) < 1e-12) return std::nullopt;
      double t = dot(p.normal, p.center - o) / denom;
      if (t <= kEps) return std::nullopt;
      return std::pair{t, p.normal};
    }
    case ShapeKind::sphere: {
      double r = p.size.x;
      Vec3 oc = o - p.center;
      double a = dot(d, d);
      double b = 2.0 * dot(oc, d);
      double c = dot(oc, oc) - r * r;
      double disc = b * b - 4 * a * c;
      if (disc < 0) return std::nullopt;
      double sq = std::sqrt(disc);
      double t = (-b - sq) / (2 * a);
      if (t <= kEps) t = (-b + sq) / (2 * a);
      if (t <= kEps) return std::nullopt;
      return std::pair{t, (o + d * t - p.center) / r};
    }
    case ShapeKind::box: {
      double tmin = -std::numeric_limits<double>::infinity();
      double tmax = std::numeric_limits<double>::infinity();
      int axis_min = -1, axis_max = -1;
      double sign_min = 0, sign_max = 0;
      for (int a = 0; a < 3; ++a) {
        double lo = p.center[a] - p.size[a], hi = p.center[a] + p.size[a];
        double oa = o[a], da = d[a];
        if (std::abs(da) < 1e-15) {
          if (oa < lo || oa > hi) return std::nullopt;
          continue;
        }
        double t0 = (lo - oa) / da, t1 = (hi - oa) / da;
        double s0 = -1, s1 = 1;
        if (t0 > t1) {
          std::swap(t0, t1);
          std::swap(s0, s1);
        }
        if (t0 > tmin) { tmin = t0; axis_min = a; sign_min = s0; }
        if (t1 < tmax) { tmax = t1; axis_max = a; sign_max = s1; }
      }
      if (tmin > tmax) return std::nullopt;
      double t = tmin;
      int axis = axis_min;
      double sign = sign_min;
      if (t <= kEps) {
        t = tmax;
        axis = axis_max;
        sign = sign_max;
      }
      if (t <= kEps || axis < 0) return std::nullopt;
      Vec3 n{axis == 0 ? sign : 0.0, axis == 1 ? sign : 0.0, axis == 2 ? sign : 0.0};
      return std::pair{t, n};
    }
  }
  return std::nullopt;
}

inline double checker(const Vec3& p, double period) {
  long s = static_cast<long>(std::floor(p.x / period)) + static_cast<long>(std::floor(p.y / period)) +
           static_cast<long>(std::floor(p.z / period));
  return (s & 1) ? 1.0 : -1.0;
}

}  // namespace detail

/// Casts one ray per pixel centre against every primitive; the nearest hit
/// wins. Intrinsics are rescaled when the requested resolution differs from
/// the camera's reference resolution.
inline ImageSample render(const Scene& scene, int height, int width) {
  if (height < 16 || width < 16) throw ConfigError("render resolution must be at least 16x16");
  const Camera& cam = scene.camera;
  double sx = static_cast<double>(width) / cam.width;
  double sy = static_cast<double>(height) / cam.height;
  double fx = cam.focal_px * sx, fy = cam.focal_px * sy;
  double cx = cam.cx * sx, cy = cam.cy * sy;

  ImageSample s;
  s.rgb = Image<float>(height, width, 3);
  s.depth = Image<float>(height, width, 1);
  s.normal = Image<float>(height, width, 3);
  s.instance = Image<std::uint16_t>(height, width, 1);
  s.valid = Image<std::uint8_t>(height, width, 1);
  s.domain = Domain::synthetic;

  Rng noise(scene.noise_seed);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      Vec3 dc{(x + 0.5 - cx) / fx, (y + 0.5 - cy) / fy, 1.0};  // z component 1: t is depth
      Vec3 dw = cam.rotation * dc;
      detail::Hit best;
      for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
        auto h = detail::intersect(scene.primitives[i], cam.position, dw);
        if (h && h->first < best.t) {
          best.t = h->first;
          best.normal = h->second;
          best.index = static_cast<int>(i);
        }
      }
      if (best.index < 0 || best.t > kFarPlane) {
        if (scene.noise_sigma > 0)
          for (int c = 0; c < 3; ++c)
            s.rgb.at(y, x, c) = static_cast<float>(std::clamp(noise.normal(0, scene.noise_sigma), 0.0, 1.0));
        continue;
      }
      const Primitive& p = scene.primitives[static_cast<std::size_t>(best.index)];
      Vec3 nw = normalized(best.normal);
      if (dot(nw, dw) > 0) nw = -nw;
      Vec3 nc = cam.rotation.transpose_mul(nw);
      double shade = 0;
      for (const auto& l : scene.lights) shade += l.intensity * std::max(0.0, dot(nw, l.direction));
      Vec3 albedo = p.albedo;
      if (p.texture_contrast > 0) {
        Vec3 hit = cam.position + dw * best.t;
        albedo = albedo * (1.0 + p.texture_contrast * detail::checker(hit, p.texture_period));
      }
      for (int c = 0; c < 3; ++c) {
        double v = albedo[c] * shade;
        if (scene.noise_sigma > 0) v += noise.normal(0, scene.noise_sigma);
        s.rgb.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      s.depth.at(y, x) = static_cast<float>(best.t);
      s.normal.at(y, x, 0) = static_cast<float>(nc.x);
      s.normal.at(y, x, 1) = static_cast<float>(nc.y);
      s.normal.at(y, x, 2) = static_cast<float>(nc.z);
      s.instance.at(y, x) = static_cast<std::uint16_t>(p.instance_id);
      s.valid.at(y, x) = 1;
    }
  }
  return s;
}

inline Camera make_camera(double fov_deg, int width, int height, const Vec3& position, double yaw_deg,
                          double pitch_deg) {
  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.focal_px = 0.5 * width / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0);
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.position = position;
  double yaw = yaw_deg * std::numbers::pi / 180.0, pitch = pitch_deg * std::numbers::pi / 180.0;
  Vec3 forward{std::sin(yaw) * std::cos(pitch), std::sin(pitch), std::cos(yaw) * std::cos(pitch)};
  Vec3 right{std::cos(yaw), 0.0, -std::sin(yaw)};
  Vec3 down = cross(right, forward);
  cam.rotation = Mat3::from_columns(right, down, forward);
  return cam;
}

namespace detail {

/// Places an object of the given kind resting on the floor at (x, z).
inline Primitive place_object(ShapeKind kind, double x, double z, double floor_y, const Vec3& half) {
  Primitive p;
  p.kind = kind;
  if (kind == ShapeKind::sphere) {
    p.size = {half.x, half.x, half.x};
    p.center = {x, floor_y + half.x, z};
  } else {
    p.size = half;
    p.center = {x, floor_y + half.y, z};
  }
  return p;
}

inline Vec3 shape_class_extent(int cls, double s, Rng& rng) {
  switch (cls) {
    case 0: return {s, s, s};                                        // sphere
    case 1: return {s, s, s};                                        // cube
    case 2: return {0.45 * s, 2.0 * s, 0.45 * s};                     // pillar
    default: return {1.7 * s, 0.3 * s, 1.2 * s * rng.uniform(0.9, 1.1)};  // slab
  }
}

inline std::size_t visible_pixels(const Scene& scene, int instance_id) {
  ImageSample probe = render(scene, 24, 24);
  std::size_t n = 0;
  for (std::size_t i = 0; i < probe.valid.data.size(); ++i)
    if (probe.valid.data[i] && (instance_id == 0 || probe.instance.data[i] == instance_id)) ++n;
  return n;
}

}  // namespace detail

/// Draws a scene deterministically from (seed, cfg). For the shapes profile,
/// `shape_class` selects the object class (sphere, cube, pillar, slab); a
/// negative value draws it from the seed.
inline Scene generate_scene(std::uint64_t seed, const GenConfig& cfg, int shape_class = -1) {
  if (cfg.min_objects < 0 || cfg.max_objects < cfg.min_objects)
    throw ConfigError("object count range is degenerate");
  if (cfg.object_size.lo <= 0 || cfg.object_size.hi < cfg.object_size.lo)
    throw ConfigError("object size range must be positive");
  if (!cfg.room && cfg.max_objects == 0) throw ConfigError("config produces empty scenes");
  if (cfg.width < 16 || cfg.height < 16) throw ConfigError("resolution must be at least 16x16");

  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(attempt)));
    Scene scene;
    double cam_h = cfg.camera_height.draw(rng);
    double floor_y = 0.0;
    scene.camera = make_camera(cfg.fov_deg.draw(rng), cfg.width, cfg.height, {0.0, cam_h, 0.0},
                               cfg.yaw_deg.draw(rng), cfg.pitch_deg.draw(rng));
    double back_z = cfg.room_depth.draw(rng);
    double half_w = cfg.room_half_width.draw(rng);

    auto add = [&](Primitive p) {
      p.instance_id = static_cast<int>(scene.primitives.size()) + 1;
      p.albedo = {rng.uniform(0.25, 0.95), rng.uniform(0.25, 0.95), rng.uniform(0.25, 0.95)};
      double contrast = cfg.texture_contrast.draw(rng);
      if (contrast > 0) {
        p.texture_contrast = contrast;
        p.texture_period = cfg.texture_period.draw(rng);
      }
      scene.primitives.push_back(p);
    };

    if (cfg.room) {
      Primitive floor;
      floor.kind = ShapeKind::plane;
      floor.center = {0, floor_y, 0};
      floor.normal = {0, 1, 0};
      add(floor);
      Primitive back = floor;
      back.center = {0, 0, back_z};
      back.normal = {0, 0, -1};
      add(back);
      Primitive left = floor;
      left.center = {-half_w, 0, 0};
      left.normal = {1, 0, 0};
      add(left);
      Primitive right = floor;
      right.center = {half_w, 0, 0};
      right.normal = {-1, 0, 0};
      add(right);
    }

    int label_id = 0;
    if (cfg.profile == SceneProfile::shapes) {
      int cls = shape_class >= 0 ? shape_class : rng.uniform_int(0, kShapeClasses - 1);
      double s = cfg.object_size.draw(rng) * 1.3;
      Vec3 ext = detail::shape_class_extent(cls, s, rng);
      double z = rng.uniform(2.6, 3.6);
      double x = rng.uniform(-0.4, 0.4);
      add(detail::place_object(cls == 0 ? ShapeKind::sphere : ShapeKind::box, x, z, floor_y, ext));
      label_id = scene.primitives.back().instance_id;
    } else {
      int count = rng.uniform_int(cfg.min_objects, cfg.max_objects);
      for (int i = 0; i < count; ++i) {
        ShapeKind kind = rng.uniform() < 0.5 ? ShapeKind::sphere : ShapeKind::box;
        double s = cfg.object_size.draw(rng);
        Vec3 half{s, s * rng.uniform(0.6, 1.8), s * rng.uniform(0.6, 1.4)};
        double z = cfg.object_distance.draw(rng);
        double xr = std::max(0.1, half_w - 2 * s);
        double x = rng.uniform(-xr, xr) * (z / cfg.object_distance.hi);
        add(detail::place_object(kind, x, z, floor_y, half));
      }
    }

    int nlights = rng.uniform_int(cfg.min_lights, cfg.max_lights);
    for (int i = 0; i < nlights; ++i) {
      double elev = cfg.light_elevation_deg.draw(rng) * std::numbers::pi / 180.0;
      double az = rng.uniform(0.0, 2.0 * std::numbers::pi);
      // Lights come from behind the camera half-space so the visible faces are lit.
      Vec3 dir{std::cos(elev) * std::sin(az), std::sin(elev), -std::abs(std::cos(elev) * std::cos(az))};
      scene.lights.push_back({normalized(dir), cfg.light_intensity.draw(rng)});
    }
    scene.noise_sigma = cfg.noise_sigma;
    scene.noise_seed = rng.next();

    bool ok = cfg.profile == SceneProfile::shapes ? detail::visible_pixels(scene, label_id) >= 6
                                                  : detail::visible_pixels(scene, 0) > 0;
    if (ok) {
      validate(scene);
      return scene;
    }
  }
  throw ConfigError("generate_scene: no visible primitive after " + std::to_string(cfg.max_retries) +
                    " attempts (degenerate generator config)");
}

}  // namespace synthfeat
