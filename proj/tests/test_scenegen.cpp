#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "synthfeat/scenegen.hpp"

using namespace synthfeat;

namespace {

Camera axis_camera(int size, double focal) {
  Camera c;
  c.width = c.height = size;
  c.focal_px = focal;
  c.cx = c.cy = 0.5 * size;
  return c;  // identity rotation, at the origin, looking down +z
}

Primitive plane(Vec3 point, Vec3 normal, int id) {
  Primitive p;
  p.kind = ShapeKind::plane;
  p.center = point;
  p.normal = normalized(normal);
  p.instance_id = id;
  return p;
}

Primitive sphere(Vec3 c, double r, int id) {
  Primitive p;
  p.kind = ShapeKind::sphere;
  p.center = c;
  p.size = {r, r, r};
  p.instance_id = id;
  return p;
}

Scene lit(Scene s) {
  s.lights.push_back({normalized(Vec3{0.3, -0.5, -1.0}), 0.9});
  return s;
}

}  // namespace

TEST(GenerateScene, DeterministicForSeed) {
  GenConfig cfg;
  EXPECT_EQ(generate_scene(7, cfg), generate_scene(7, cfg));
}

TEST(GenerateScene, SeedSensitive) {
  GenConfig cfg;
  Scene a = generate_scene(7, cfg), b = generate_scene(8, cfg);
  EXPECT_FALSE(a == b);
  bool differ = a.primitives.size() != b.primitives.size();
  for (std::size_t i = 0; !differ && i < a.primitives.size(); ++i) differ = !(a.primitives[i].center == b.primitives[i].center);
  differ = differ || !(a.camera == b.camera);
  EXPECT_TRUE(differ);
}

TEST(GenerateScene, ObjectCountWithinRange) {
  GenConfig cfg;
  cfg.room = false;
  cfg.min_objects = 3;
  cfg.max_objects = 5;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Scene s = generate_scene(seed, cfg);
    EXPECT_GE(s.primitives.size(), 3u);
    EXPECT_LE(s.primitives.size(), 5u);
  }
}

TEST(GenerateScene, SatisfiesSceneInvariants) {
  for (auto profile : {SceneProfile::synthetic, SceneProfile::real_proxy, SceneProfile::shapes}) {
    GenConfig cfg = GenConfig::for_profile(profile);
    for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_NO_THROW(validate(generate_scene(seed, cfg)));
  }
}

TEST(GenerateScene, FailsWhenNothingCanBeSeen) {
  GenConfig cfg;
  cfg.room = false;
  cfg.object_distance = {-6.0, -4.0};  // everything behind the camera
  cfg.max_retries = 4;
  EXPECT_THROW(generate_scene(1, cfg), ConfigError);
}

TEST(Validate, RejectsBrokenScenes) {
  Scene s;
  s.primitives = {sphere({0, 0, 5}, 1, 1), sphere({1, 0, 5}, 1, 3)};
  EXPECT_THROW(validate(s), DataError);
  s.primitives[1].instance_id = 2;
  EXPECT_NO_THROW(validate(s));
  s.primitives[1].size = {0, 0, 0};
  EXPECT_THROW(validate(s), DataError);
  s.primitives[1].size = {1, 1, 1};
  s.lights.push_back({{0, 1.1, 0}, 1});
  EXPECT_THROW(validate(s), DataError);
}

TEST(Render, FrontalPlane) {
  Scene s = lit({});
  s.camera = axis_camera(32, 30);
  s.primitives = {plane({0, 0, 2}, {0, 0, -1}, 1)};
  ImageSample out = render(s, 32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      ASSERT_TRUE(out.valid.at(y, x));
      EXPECT_NEAR(out.depth.at(y, x), 2.0f, 1e-6f);
      EXPECT_EQ(out.normal.at(y, x, 0), 0.0f);
      EXPECT_EQ(out.normal.at(y, x, 1), 0.0f);
      EXPECT_EQ(out.normal.at(y, x, 2), -1.0f);
    }
}

TEST(Render, EmptySceneIsAllMiss) {
  Scene s;
  s.camera = axis_camera(16, 16);
  ImageSample out = render(s, 16, 16);
  for (std::size_t i = 0; i < out.valid.data.size(); ++i) {
    EXPECT_EQ(out.valid.data[i], 0);
    EXPECT_EQ(out.instance.data[i], 0);
  }
}

TEST(Render, SphereCentreDepth) {
  // Hand oracle: the optical-axis ray (0,0,t) meets |p - (0,0,5)| = 1 at
  // t^2 - 10t + 24 = 0, nearest root t = 4. The odd resolution puts pixel 16's
  // centre exactly on the axis.
  double b = -10, c = 24;
  double oracle = (-b - std::sqrt(b * b - 4 * c)) / 2;
  Scene s = lit({});
  s.camera = axis_camera(33, 33);
  s.primitives = {sphere({0, 0, 5}, 1, 1)};
  ImageSample out = render(s, 33, 33);
  ASSERT_TRUE(out.valid.at(16, 16));
  EXPECT_DOUBLE_EQ(out.depth.at(16, 16), static_cast<float>(oracle));
  EXPECT_FLOAT_EQ(out.depth.at(16, 16), 4.0f);
}

TEST(Render, RejectsTinyResolution) {
  Scene s;
  EXPECT_THROW(render(s, 8, 8), ConfigError);
}

TEST(RenderProperty, PlanarDepthAgreesWithNormals) {
  // Back-projected points of a tilted plane; their finite-difference cross
  // product must match the emitted normal within 2 degrees.
  for (int trial = 0; trial < 6; ++trial) {
    Rng rng(100 + trial);
    Vec3 n{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), -1.0};
    Scene s = lit({});
    s.camera = axis_camera(48, 40);
    s.primitives = {plane({0, 0, rng.uniform(2.0, 5.0)}, n, 1)};
    ImageSample out = render(s, 48, 48);
    auto point = [&](int y, int x) {
      double d = out.depth.at(y, x);
      return Vec3{(x + 0.5 - 24) / 40 * d, (y + 0.5 - 24) / 40 * d, d};
    };
    for (int y = 1; y < 47; y += 3)
      for (int x = 1; x < 47; x += 3) {
        if (!out.valid.at(y, x) || !out.valid.at(y, x + 1) || !out.valid.at(y + 1, x)) continue;
        Vec3 fd = normalized(cross(point(y, x + 1) - point(y, x), point(y + 1, x) - point(y, x)));
        Vec3 em{out.normal.at(y, x, 0), out.normal.at(y, x, 1), out.normal.at(y, x, 2)};
        if (dot(fd, em) < 0) fd = -fd;
        double ang = std::acos(std::clamp(dot(fd, em), -1.0, 1.0)) * 180 / std::numbers::pi;
        EXPECT_LT(ang, 2.0) << "pixel " << y << "," << x;
      }
  }
}

TEST(RenderProperty, OcclusionTakesNearestSurface) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Primitive a = sphere({rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(3, 5)}, rng.uniform(0.4, 1.0), 1);
    Primitive b;
    b.kind = ShapeKind::box;
    b.center = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(3, 6)};
    b.size = {rng.uniform(0.3, 1), rng.uniform(0.3, 1), rng.uniform(0.3, 1)};
    b.instance_id = 2;
    Scene both = lit({}), only_a = lit({}), only_b = lit({});
    both.camera = only_a.camera = only_b.camera = axis_camera(32, 28);
    both.primitives = {a, b};
    only_a.primitives = {a};
    b.instance_id = 1;
    only_b.primitives = {b};
    auto r = render(both, 32, 32), ra = render(only_a, 32, 32), rb = render(only_b, 32, 32);
    for (std::size_t i = 0; i < r.depth.data.size(); ++i) {
      float da = ra.valid.data[i] ? ra.depth.data[i] : INFINITY;
      float db = rb.valid.data[i] ? rb.depth.data[i] : INFINITY;
      if (!r.valid.data[i]) {
        EXPECT_TRUE(std::isinf(da) && std::isinf(db));
        continue;
      }
      EXPECT_EQ(r.depth.data[i], std::min(da, db));
    }
  }
}

TEST(RenderProperty, SampleInvariantsOnGeneratedScenes) {
  for (auto profile : {SceneProfile::synthetic, SceneProfile::real_proxy, SceneProfile::shapes}) {
    GenConfig cfg = GenConfig::for_profile(profile);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Scene sc = generate_scene(seed, cfg);
      ImageSample s = render(sc, 40, 40);
      for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 40; ++x) {
          bool valid = s.valid.at(y, x);
          EXPECT_EQ(valid, s.instance.at(y, x) > 0);
          for (int c = 0; c < 3; ++c) {
            EXPECT_GE(s.rgb.at(y, x, c), 0.0f);
            EXPECT_LE(s.rgb.at(y, x, c), 1.0f);
          }
          if (!valid) continue;
          EXPECT_GT(s.depth.at(y, x), 0.0f);
          Vec3 n{s.normal.at(y, x, 0), s.normal.at(y, x, 1), s.normal.at(y, x, 2)};
          EXPECT_NEAR(norm(n), 1.0, 1e-5);
          // Camera-frame view ray through the pixel centre.
          double sxy = 40.0 / sc.camera.width;
          Vec3 ray{(x + 0.5 - sc.camera.cx * sxy) / (sc.camera.focal_px * sxy),
                   (y + 0.5 - sc.camera.cy * sxy) / (sc.camera.focal_px * sxy), 1.0};
          EXPECT_LT(dot(n, ray), 0.0);
        }
    }
  }
}

TEST(RenderProperty, Deterministic) {
  GenConfig cfg = GenConfig::for_profile(SceneProfile::real_proxy);
  Scene sc = generate_scene(11, cfg);
  EXPECT_EQ(render(sc, 48, 48), render(sc, 48, 48));
}

TEST(Profiles, ShapesProfileHonoursRequestedClass) {
  GenConfig cfg = GenConfig::for_profile(SceneProfile::shapes);
  Scene s0 = generate_scene(3, cfg, 0), s1 = generate_scene(3, cfg, 1);
  EXPECT_EQ(s0.primitives.back().kind, ShapeKind::sphere);
  EXPECT_EQ(s1.primitives.back().kind, ShapeKind::box);
}

TEST(Profiles, ParseRoundTrip) {
  for (auto p : {SceneProfile::synthetic, SceneProfile::real_proxy, SceneProfile::shapes})
    EXPECT_EQ(parse_profile(to_string(p)), p);
  EXPECT_THROW(parse_profile("mars"), ConfigError);
}
