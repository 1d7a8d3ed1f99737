#ifndef NV3D_NORMALS_HPP
#define NV3D_NORMALS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nv3d/error.hpp"
#include "nv3d/ply.hpp"
#include "nv3d/spatial_index.hpp"
#include "nv3d/sym_eigen3.hpp"
#include "nv3d/vec3.hpp"
#include "nv3d/voxelizer.hpp"

namespace nv3d {

enum class Orientation { toward_sensor, plus_z_hemisphere };

inline std::string_view to_string(Orientation o) {
  return o == Orientation::toward_sensor ? "toward_sensor" : "plus_z_hemisphere";
}

inline Orientation parse_orientation(std::string_view s) {
  if (s == "toward_sensor") return Orientation::toward_sensor;
  if (s == "plus_z_hemisphere") return Orientation::plus_z_hemisphere;
  throw Error(ErrorCode::InvalidConfig, "unknown orientation policy '" + std::string(s) + "'");
}

struct NormalConfig {
  /// Neighbours per voxel; the PCA neighbourhood is the voxel plus k others.
  std::size_t k = 7;
  /// Ball radius on the unit sphere used for density counting.
  double density_radius = 0.25;
  Orientation orientation = Orientation::toward_sensor;

  void validate() const {
    if (k < 2) throw Error(ErrorCode::InvalidConfig, "normal k must be at least 2");
    if (!(density_radius > 0.0)) throw Error(ErrorCode::InvalidConfig, "density radius must be positive");
  }
};

struct NormalFeature {
  double nx = 0.0;
  double ny = 0.0;
  double nz = 1.0;
  /// Ball count divided by the frame maximum, in (0, 1].
  double density = 0.0;

  Vec3 normal() const { return {nx, ny, nz}; }
};

/// Centered covariance of a point set. Coordinates are taken relative to
/// the first point, so a coordinate shared by every point contributes exact
/// zeros.
inline Mat3 covariance(std::span<const Vec3> pts) {
  const Vec3 anchor = pts.front();
  Vec3 mean{0.0, 0.0, 0.0};
  for (const Vec3& p : pts) mean = mean + (p - anchor);
  mean = (1.0 / static_cast<double>(pts.size())) * mean;
  Mat3 c{};
  for (const Vec3& p : pts) {
    const Vec3 d = (p - anchor) - mean;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) c[i][j] += d[i] * d[j];
    }
  }
  for (auto& row : c) {
    for (double& x : row) x /= static_cast<double>(pts.size());
  }
  return c;
}

namespace detail {

/// Eigenvectors whose eigenvalue ties the smallest one (relative 1e-10 of
/// the spectrum). Usually a single vector.
inline std::vector<Vec3> least_variance_axes(std::span<const Vec3> pts) {
  if (pts.size() < 3) {
    throw Error(ErrorCode::DegenerateNeighborhood, "normal estimation needs at least 3 points");
  }
  const Mat3 c = covariance(pts);
  double scale = 0.0;
  for (const auto& row : c) {
    for (double x : row) scale = std::max(scale, std::abs(x));
  }
  if (scale == 0.0) throw Error(ErrorCode::DegenerateNeighborhood, "all neighbourhood points coincide");
  const SymEigen3 eig = eigen_symmetric3(c);
  const double tie = 1e-10 * std::max(std::abs(eig.values[2]), scale);
  std::vector<Vec3> axes{eig.vectors[0]};
  for (int i = 1; i < 3; ++i) {
    if (eig.values[i] - eig.values[0] <= tie) axes.push_back(eig.vectors[i]);
  }
  return axes;
}

}  // namespace detail

/// Unit eigenvector of the centered covariance with the smallest eigenvalue.
/// The sign is arbitrary.
inline Vec3 estimate_normal(std::span<const Vec3> neighborhood) {
  return detail::least_variance_axes(neighborhood).front();
}

/// Flip `n` into the hemisphere selected by the policy. The sensor sits at
/// the origin.
inline Vec3 orient_normal(const Vec3& n, const Vec3& position, Orientation policy) {
  if (policy == Orientation::toward_sensor) {
    return dot(n, -position) >= 0.0 ? n : -n;
  }
  if (n[2] != 0.0) return n[2] > 0.0 ? n : -n;
  if (n[0] != 0.0) return n[0] > 0.0 ? n : -n;
  return n[1] >= 0.0 ? n : -n;
}

/// Per-voxel normal and normalized normal-space density, aligned with the
/// voxel order.
///
/// Each voxel's PCA neighbourhood is its own centroid plus its k nearest
/// other centroids. When the smallest covariance eigenvalue is degenerate,
/// the lexicographically largest oriented candidate wins. Density counts how
/// many oriented normals fall in the closed ball of `density_radius` around
/// each normal (itself included), divided by the frame maximum.
inline std::vector<NormalFeature> extract_normals(const VoxelSet& vs, const NormalConfig& cfg) {
  cfg.validate();
  if (vs.size() <= cfg.k) {
    throw Error(ErrorCode::InsufficientNeighbors, "frame has " + std::to_string(vs.size()) +
                                                      " voxels but k=" + std::to_string(cfg.k) +
                                                      " neighbours are required");
  }
  const std::vector<Vec3> centroids = vs.positions();
  const KdTree3 index(centroids);

  std::vector<Vec3> normals(centroids.size());
  std::vector<Vec3> hood(cfg.k + 1);
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    const auto nbrs = index.knn_of(i, cfg.k);
    hood[0] = centroids[i];
    for (std::size_t j = 0; j < nbrs.size(); ++j) hood[j + 1] = centroids[nbrs[j].index];
    const auto axes = detail::least_variance_axes(hood);
    Vec3 best = orient_normal(axes.front(), centroids[i], cfg.orientation);
    for (std::size_t a = 1; a < axes.size(); ++a) {
      const Vec3 cand = orient_normal(axes[a], centroids[i], cfg.orientation);
      if (cand > best) best = cand;
    }
    normals[i] = best;
  }

  const KdTree3 sphere(normals);
  std::vector<std::size_t> counts(normals.size());
  std::size_t max_count = 0;
  for (std::size_t i = 0; i < normals.size(); ++i) {
    counts[i] = sphere.count_within_radius(normals[i], cfg.density_radius);
    max_count = std::max(max_count, counts[i]);
  }

  std::vector<NormalFeature> out(normals.size());
  for (std::size_t i = 0; i < normals.size(); ++i) {
    out[i] = {normals[i][0], normals[i][1], normals[i][2],
              static_cast<double>(counts[i]) / static_cast<double>(max_count)};
  }
  return out;
}

inline std::vector<double> densities_of(std::span<const NormalFeature> features) {
  std::vector<double> d;
  d.reserve(features.size());
  for (const NormalFeature& f : features) d.push_back(f.density);
  return d;
}

/// Equal-width histogram of densities over [0, 1]; 1.0 lands in the last bin.
inline std::vector<std::size_t> density_histogram(std::span<const NormalFeature> features, std::size_t bins) {
  if (bins == 0) throw Error(ErrorCode::InvalidArgument, "histogram needs at least one bin");
  std::vector<std::size_t> hist(bins, 0);
  for (const NormalFeature& f : features) {
    const double d = std::clamp(f.density, 0.0, 1.0);
    const auto b = std::min(bins - 1, static_cast<std::size_t>(d * static_cast<double>(bins)));
    ++hist[b];
  }
  return hist;
}

inline void write_normals_csv(std::ostream& os, const VoxelSet& vs, std::span<const NormalFeature> features) {
  if (features.size() != vs.size()) throw Error(ErrorCode::LengthMismatch, "normals do not align with voxels");
  os << "gx,gy,gz,nx,ny,nz,density\n";
  os.precision(9);
  for (std::size_t i = 0; i < features.size(); ++i) {
    const Voxel& v = vs.voxels[i];
    const NormalFeature& f = features[i];
    os << v.gx << ',' << v.gy << ',' << v.gz << ',' << f.nx << ',' << f.ny << ',' << f.nz << ',' << f.density
       << '\n';
  }
}

inline void write_normals_csv(const std::filesystem::path& path, const VoxelSet& vs,
                              std::span<const NormalFeature> features) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  write_normals_csv(out, vs, features);
}

/// Normals plotted as points on the unit sphere, colored by density.
inline void write_normal_sphere_ply(const std::filesystem::path& path, std::span<const NormalFeature> features) {
  std::vector<Vec3> pos;
  pos.reserve(features.size());
  for (const NormalFeature& f : features) pos.push_back(f.normal());
  const auto dens = densities_of(features);
  write_ply(path, std::span<const Vec3>(pos), std::span<const double>(dens));
}

}  // namespace nv3d

#endif  // NV3D_NORMALS_HPP
