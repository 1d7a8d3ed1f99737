#ifndef NV3D_SCENE_HPP
#define NV3D_SCENE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "nv3d/error.hpp"
#include "nv3d/point_cloud.hpp"
#include "nv3d/rng.hpp"
#include "nv3d/vec3.hpp"

namespace nv3d {

/// Box resting on the ground plane.
struct BoxObstacle {
  double cx = 10.0;
  double cy = 0.0;
  double sx = 1.0;
  double sy = 1.0;
  double sz = 1.0;
  double yaw = 0.0;  // radians about +z

  friend bool operator==(const BoxObstacle&, const BoxObstacle&) = default;
};

/// Deterministic LiDAR-like scene: a grid-sampled ground plane and box
/// obstacles, with optional Gaussian noise and range-dependent thinning.
struct SyntheticScene {
  double x_min = 0.0;
  double x_max = 60.0;
  double y_min = -40.0;
  double y_max = 40.0;
  double ground_z = -1.7;
  double spacing = 0.1;
  double noise_sigma = 0.0;
  std::vector<BoxObstacle> boxes;
  /// Keep probability min(1, (thinning_ref / range)^thinning_power).
  bool thinning = false;
  double thinning_ref = 5.0;
  double thinning_power = 2.0;
  std::uint64_t seed = 0;
  std::string frame_id = "synthetic";

  void validate() const {
    if (!(x_min < x_max) || !(y_min < y_max)) throw Error(ErrorCode::InvalidConfig, "scene extent is empty");
    if (!(spacing > 0.0)) throw Error(ErrorCode::InvalidConfig, "scene spacing must be positive");
    if (!(noise_sigma >= 0.0)) throw Error(ErrorCode::InvalidConfig, "scene noise must be non-negative");
    if (thinning && (!(thinning_ref > 0.0) || !(thinning_power >= 0.0))) {
      throw Error(ErrorCode::InvalidConfig, "scene thinning parameters are invalid");
    }
    for (const BoxObstacle& b : boxes) {
      if (!(b.sx > 0.0 && b.sy > 0.0 && b.sz > 0.0)) throw Error(ErrorCode::InvalidConfig, "box sizes must be positive");
    }
  }

  /// Street-like frame: road plane to 60 m plus rows of car-sized boxes and
  /// building facades, thinned with range. Over 90% of the resulting voxels
  /// fall within 30 m of the sensor.
  static SyntheticScene street(std::uint64_t seed) {
    SyntheticScene s;
    s.seed = seed;
    s.frame_id = "street_" + std::to_string(seed);
    s.spacing = 0.05;
    s.noise_sigma = 0.005;
    s.thinning = true;
    s.thinning_ref = 2.5;
    s.thinning_power = 2.4;
    rng::Stream stream(seed, rng::Tag::scene, 0xB0C5);
    const int cars = 12 + static_cast<int>(stream.below(8));
    for (int i = 0; i < cars; ++i) {
      BoxObstacle b;
      b.cx = stream.uniform(4.0, 28.0);
      b.cy = (stream.uniform() < 0.5 ? -1.0 : 1.0) * stream.uniform(2.0, 5.5);
      b.sx = stream.uniform(3.6, 4.8);
      b.sy = stream.uniform(1.6, 1.9);
      b.sz = stream.uniform(1.4, 1.7);
      b.yaw = stream.uniform(-0.3, 0.3);
      s.boxes.push_back(b);
    }
    for (const double side : {-1.0, 1.0}) {
      BoxObstacle facade;
      facade.cx = 32.0;
      facade.cy = side * stream.uniform(7.0, 9.0);
      facade.sx = 56.0;
      facade.sy = 0.5;
      facade.sz = 2.6;
      s.boxes.push_back(facade);
    }
    return s;
  }
};

struct LabeledCloud {
  PointCloud cloud;
  /// 0 for ground; 1 + 5 * box + face for box faces, face 0 = top,
  /// 1..4 = sides with outward normals +x', -x', +y', -y' in the box frame.
  std::vector<std::uint32_t> labels;
};

/// Outward unit normal of a labelled surface.
inline Vec3 face_normal(const SyntheticScene& s, std::uint32_t label) {
  if (label == 0) return {0.0, 0.0, 1.0};
  const std::uint32_t box = (label - 1) / 5;
  const std::uint32_t face = (label - 1) % 5;
  const double c = std::cos(s.boxes.at(box).yaw);
  const double sn = std::sin(s.boxes.at(box).yaw);
  switch (face) {
    case 0: return {0.0, 0.0, 1.0};
    case 1: return {c, sn, 0.0};
    case 2: return {-c, -sn, 0.0};
    case 3: return {-sn, c, 0.0};
    default: return {sn, -c, 0.0};
  }
}

namespace detail {

/// Box footprint with its rotation precomputed.
struct Footprint {
  double cx, cy, hx, hy, c, s, reach;

  explicit Footprint(const BoxObstacle& b)
      : cx(b.cx), cy(b.cy), hx(0.5 * b.sx), hy(0.5 * b.sy), c(std::cos(b.yaw)), s(std::sin(b.yaw)),
        reach(std::hypot(hx, hy) * (1.0 + 1e-12) + 1e-12) {}

  bool contains(double x, double y) const {
    if (std::abs(x - cx) > reach || std::abs(y - cy) > reach) return false;
    const double lx = c * (x - cx) + s * (y - cy);
    const double ly = -s * (x - cx) + c * (y - cy);
    return std::abs(lx) <= hx && std::abs(ly) <= hy;
  }
};

inline bool inside_footprint(const BoxObstacle& b, double x, double y) { return Footprint(b).contains(x, y); }

}  // namespace detail

inline LabeledCloud generate_scene_labeled(const SyntheticScene& s) {
  s.validate();
  LabeledCloud out;
  out.cloud.frame_id = s.frame_id;
  rng::Stream keep_stream(s.seed, rng::Tag::scene, 1);
  rng::Stream noise_stream(s.seed, rng::Tag::scene, 2);

  auto emit = [&](Vec3 p, float reflectance, std::uint32_t label) {
    if (s.thinning) {
      const double range = std::hypot(p[0], p[1]);
      const double keep_p = range <= s.thinning_ref ? 1.0 : std::pow(s.thinning_ref / range, s.thinning_power);
      if (keep_stream.uniform() >= keep_p) return;
    }
    if (s.noise_sigma > 0.0) {
      for (double& c : p) c += s.noise_sigma * noise_stream.normal();
    }
    out.cloud.points.push_back(
        {static_cast<float>(p[0]), static_cast<float>(p[1]), static_cast<float>(p[2]), reflectance});
    out.labels.push_back(label);
  };

  const auto nx = static_cast<std::size_t>(std::floor((s.x_max - s.x_min) / s.spacing));
  const auto ny = static_cast<std::size_t>(std::floor((s.y_max - s.y_min) / s.spacing));
  std::vector<detail::Footprint> footprints;
  for (const BoxObstacle& b : s.boxes) footprints.emplace_back(b);
  for (std::size_t i = 0; i < nx; ++i) {
    const double x = s.x_min + (static_cast<double>(i) + 0.5) * s.spacing;
    for (std::size_t j = 0; j < ny; ++j) {
      const double y = s.y_min + (static_cast<double>(j) + 0.5) * s.spacing;
      bool covered = false;
      for (const detail::Footprint& f : footprints) covered = covered || f.contains(x, y);
      if (!covered) emit({x, y, s.ground_z}, 0.2f, 0);
    }
  }

  for (std::size_t bi = 0; bi < s.boxes.size(); ++bi) {
    const BoxObstacle& b = s.boxes[bi];
    const double c = std::cos(b.yaw);
    const double sn = std::sin(b.yaw);
    auto to_world = [&](double lx, double ly, double lz) -> Vec3 {
      return {b.cx + c * lx - sn * ly, b.cy + sn * lx + c * ly, s.ground_z + lz};
    };
    auto steps = [&s](double extent) { return std::max<std::size_t>(1, static_cast<std::size_t>(extent / s.spacing)); };
    const auto base = static_cast<std::uint32_t>(1 + 5 * bi);
    const std::size_t ux = steps(b.sx), uy = steps(b.sy), uz = steps(b.sz);
    // top
    for (std::size_t i = 0; i < ux; ++i) {
      for (std::size_t j = 0; j < uy; ++j) {
        const double lx = -0.5 * b.sx + (static_cast<double>(i) + 0.5) * b.sx / static_cast<double>(ux);
        const double ly = -0.5 * b.sy + (static_cast<double>(j) + 0.5) * b.sy / static_cast<double>(uy);
        emit(to_world(lx, ly, b.sz), 0.6f, base);
      }
    }
    // sides at local x = +-sx/2
    for (int side = 0; side < 2; ++side) {
      const double lx = side == 0 ? 0.5 * b.sx : -0.5 * b.sx;
      for (std::size_t j = 0; j < uy; ++j) {
        for (std::size_t k = 0; k < uz; ++k) {
          const double ly = -0.5 * b.sy + (static_cast<double>(j) + 0.5) * b.sy / static_cast<double>(uy);
          const double lz = (static_cast<double>(k) + 0.5) * b.sz / static_cast<double>(uz);
          emit(to_world(lx, ly, lz), 0.6f, base + 1 + static_cast<std::uint32_t>(side));
        }
      }
    }
    // sides at local y = +-sy/2
    for (int side = 0; side < 2; ++side) {
      const double ly = side == 0 ? 0.5 * b.sy : -0.5 * b.sy;
      for (std::size_t i = 0; i < ux; ++i) {
        for (std::size_t k = 0; k < uz; ++k) {
          const double lx = -0.5 * b.sx + (static_cast<double>(i) + 0.5) * b.sx / static_cast<double>(ux);
          const double lz = (static_cast<double>(k) + 0.5) * b.sz / static_cast<double>(uz);
          emit(to_world(lx, ly, lz), 0.6f, base + 3 + static_cast<std::uint32_t>(side));
        }
      }
    }
  }
  return out;
}

inline PointCloud generate_scene(const SyntheticScene& s) { return generate_scene_labeled(s).cloud; }

}  // namespace nv3d

#endif  // NV3D_SCENE_HPP
