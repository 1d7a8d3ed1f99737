#ifndef NV3D_VOXELIZER_HPP
#define NV3D_VOXELIZER_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "nv3d/error.hpp"
#include "nv3d/ply.hpp"
#include "nv3d/point_cloud.hpp"
#include "nv3d/rng.hpp"
#include "nv3d/vec3.hpp"

namespace nv3d {

struct VoxelConfig {
  double size_x = 0.05;
  double size_y = 0.05;
  double size_z = 0.1;
  RangeBox range{};
  std::optional<std::size_t> max_voxels = 16000;

  /// Grid dimensions along x, y, z. Throws when an extent is not an integral
  /// multiple of the voxel size (within 1e-9).
  std::array<std::uint32_t, 3> dims() const {
    validate();
    return {dim(range.x_max - range.x_min, size_x), dim(range.y_max - range.y_min, size_y),
            dim(range.z_max - range.z_min, size_z)};
  }

  void validate() const {
    range.validate();
    if (!(size_x > 0.0) || !(size_y > 0.0) || !(size_z > 0.0)) {
      throw Error(ErrorCode::InvalidConfig, "voxel sizes must be positive");
    }
    if (max_voxels && *max_voxels == 0) {
      throw Error(ErrorCode::InvalidConfig, "max_voxels must be positive when set");
    }
    dim(range.x_max - range.x_min, size_x);
    dim(range.y_max - range.y_min, size_y);
    dim(range.z_max - range.z_min, size_z);
  }

 private:
  static std::uint32_t dim(double extent, double size) {
    const double cells = extent / size;
    const double rounded = std::round(cells);
    if (std::abs(cells - rounded) > 1e-9 || rounded < 1.0 || rounded > 4.0e9) {
      throw Error(ErrorCode::InvalidConfig, "range extent " + std::to_string(extent) +
                                                " is not an integral multiple of voxel size " +
                                                std::to_string(size));
    }
    return static_cast<std::uint32_t>(rounded);
  }
};

struct Voxel {
  std::uint32_t gx = 0;
  std::uint32_t gy = 0;
  std::uint32_t gz = 0;
  /// Mean (x, y, z, r) of the member points.
  std::array<double, 4> feature{};
  std::uint32_t count = 0;

  Vec3 position() const { return {feature[0], feature[1], feature[2]}; }

  friend bool operator==(const Voxel&, const Voxel&) = default;
};

/// Sparse voxel grid, sorted lexicographically by (gx, gy, gz).
struct VoxelSet {
  std::vector<Voxel> voxels;
  VoxelConfig config{};
  std::string frame_id;

  std::size_t size() const { return voxels.size(); }
  bool empty() const { return voxels.empty(); }

  std::vector<Vec3> positions() const {
    std::vector<Vec3> out;
    out.reserve(voxels.size());
    for (const Voxel& v : voxels) out.push_back(v.position());
    return out;
  }
};

namespace detail {

inline std::uint32_t cell_index(double value, double lo, double size, std::uint32_t cells) {
  const auto g = static_cast<std::int64_t>(std::floor((value - lo) / size));
  // value < hi can still round onto the upper edge
  return static_cast<std::uint32_t>(std::clamp<std::int64_t>(g, 0, cells - 1));
}

}  // namespace detail

/// Partition an already-clipped cloud into voxels and average member points.
/// The result does not depend on input point order.
inline VoxelSet voxelize(const PointCloud& pc, const VoxelConfig& cfg) {
  const auto dims = cfg.dims();
  const RangeBox& box = cfg.range;

  struct Keyed {
    std::uint64_t key;
    std::uint32_t index;
  };
  std::vector<Keyed> keyed;
  keyed.reserve(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const Point& p = pc.points[i];
    if (!box.contains(p)) {
      throw Error(ErrorCode::PointOutOfRange, "point index " + std::to_string(i) + " lies outside the range box");
    }
    const std::uint64_t gx = detail::cell_index(p.x, box.x_min, cfg.size_x, dims[0]);
    const std::uint64_t gy = detail::cell_index(p.y, box.y_min, cfg.size_y, dims[1]);
    const std::uint64_t gz = detail::cell_index(p.z, box.z_min, cfg.size_z, dims[2]);
    keyed.push_back({(gx * dims[1] + gy) * dims[2] + gz, static_cast<std::uint32_t>(i)});
  }

  // Sorting members by value as well as key fixes the summation order, so the
  // double-precision means are bit-identical under input permutation.
  const auto& pts = pc.points;
  std::sort(keyed.begin(), keyed.end(), [&pts](const Keyed& a, const Keyed& b) {
    if (a.key != b.key) return a.key < b.key;
    const Point& p = pts[a.index];
    const Point& q = pts[b.index];
    return std::tie(p.x, p.y, p.z, p.r) < std::tie(q.x, q.y, q.z, q.r);
  });

  VoxelSet out;
  out.config = cfg;
  out.frame_id = pc.frame_id;
  std::size_t i = 0;
  while (i < keyed.size()) {
    const std::uint64_t key = keyed[i].key;
    std::array<double, 4> sum{};
    std::uint32_t count = 0;
    for (; i < keyed.size() && keyed[i].key == key; ++i) {
      const Point& p = pts[keyed[i].index];
      sum[0] += p.x;
      sum[1] += p.y;
      sum[2] += p.z;
      sum[3] += p.r;
      ++count;
    }
    Voxel v;
    v.gz = static_cast<std::uint32_t>(key % dims[2]);
    v.gy = static_cast<std::uint32_t>((key / dims[2]) % dims[1]);
    v.gx = static_cast<std::uint32_t>(key / (static_cast<std::uint64_t>(dims[2]) * dims[1]));
    for (std::size_t c = 0; c < 4; ++c) v.feature[c] = sum[c] / count;
    v.count = count;
    out.voxels.push_back(v);
  }
  return out;
}

/// Uniformly random subset of exactly `max_voxels` voxels when over the cap,
/// identity otherwise. Order is preserved.
inline VoxelSet cap_voxels(const VoxelSet& vs, std::size_t max_voxels, std::uint64_t seed) {
  if (max_voxels == 0) throw Error(ErrorCode::InvalidArgument, "max_voxels must be positive");
  if (vs.size() <= max_voxels) return vs;
  rng::Stream stream(seed, rng::Tag::cap);
  const auto chosen = rng::choose_subset(vs.size(), max_voxels, stream);
  VoxelSet out;
  out.config = vs.config;
  out.frame_id = vs.frame_id;
  out.voxels.reserve(chosen.size());
  for (std::size_t i : chosen) out.voxels.push_back(vs.voxels[i]);
  return out;
}

inline void write_voxel_csv(std::ostream& os, const VoxelSet& vs) {
  os << "gx,gy,gz,x,y,z,r,count\n";
  os.precision(9);
  for (const Voxel& v : vs.voxels) {
    os << v.gx << ',' << v.gy << ',' << v.gz << ',' << v.feature[0] << ',' << v.feature[1] << ','
       << v.feature[2] << ',' << v.feature[3] << ',' << v.count << '\n';
  }
}

inline void write_voxel_csv(const std::filesystem::path& path, const VoxelSet& vs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  write_voxel_csv(out, vs);
}

inline void write_ply(const std::filesystem::path& path, const VoxelSet& vs,
                      std::optional<std::span<const double>> scalars = std::nullopt) {
  const auto pos = vs.positions();
  write_ply(path, std::span<const Vec3>(pos), scalars);
}

}  // namespace nv3d

#endif  // NV3D_VOXELIZER_HPP
