#ifndef NV3D_PLY_HPP
#define NV3D_PLY_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "nv3d/error.hpp"
#include "nv3d/point_cloud.hpp"
#include "nv3d/vec3.hpp"

namespace nv3d {

using Rgb = std::array<std::uint8_t, 3>;

/// Magenta (0) -> blue (1/3) -> cyan (2/3) -> green (1), the low-to-high
/// ramp used for density plots. Values are clamped to [0, 1].
inline Rgb color_ramp(double t) {
  if (!std::isfinite(t)) t = 0.0;
  t = std::clamp(t, 0.0, 1.0);
  static constexpr std::array<std::array<double, 3>, 4> stops{{
      {255.0, 0.0, 255.0},
      {0.0, 0.0, 255.0},
      {0.0, 255.0, 255.0},
      {0.0, 255.0, 0.0},
  }};
  const double s = t * 3.0;
  const auto seg = std::min<std::size_t>(static_cast<std::size_t>(s), 2);
  const double f = s - static_cast<double>(seg);
  Rgb out{};
  for (std::size_t c = 0; c < 3; ++c) {
    const double v = stops[seg][c] + f * (stops[seg + 1][c] - stops[seg][c]);
    out[c] = static_cast<std::uint8_t>(std::lround(v));
  }
  return out;
}

inline constexpr const char* kColorRampComment =
    "color ramp: scalar 0 -> magenta (255,0,255), 1/3 -> blue (0,0,255), "
    "2/3 -> cyan (0,255,255), 1 -> green (0,255,0); linear between stops; "
    "no scalar -> white";

/// Write vertices as ASCII PLY 1.0 with `x y z red green blue` properties.
/// `scalars`, when present, must have one value per vertex.
inline void write_ply(std::ostream& os, std::span<const Vec3> positions,
                      std::optional<std::span<const double>> scalars = std::nullopt) {
  if (scalars && scalars->size() != positions.size()) {
    throw Error(ErrorCode::LengthMismatch, "PLY scalar count differs from vertex count");
  }
  os << "ply\n"
     << "format ascii 1.0\n"
     << "comment " << kColorRampComment << "\n"
     << "element vertex " << positions.size() << "\n"
     << "property float x\n"
     << "property float y\n"
     << "property float z\n"
     << "property uchar red\n"
     << "property uchar green\n"
     << "property uchar blue\n"
     << "end_header\n";
  std::ostringstream line;
  line.precision(9);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const Rgb c = scalars ? color_ramp((*scalars)[i]) : Rgb{255, 255, 255};
    line.str({});
    line << static_cast<float>(positions[i][0]) << ' ' << static_cast<float>(positions[i][1]) << ' '
         << static_cast<float>(positions[i][2]) << ' ' << int(c[0]) << ' ' << int(c[1]) << ' ' << int(c[2])
         << '\n';
    os << line.str();
  }
}

inline void write_ply(const std::filesystem::path& path, std::span<const Vec3> positions,
                      std::optional<std::span<const double>> scalars = std::nullopt) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  write_ply(out, positions, scalars);
  if (!out) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

inline std::vector<Vec3> positions_of(const PointCloud& pc) {
  std::vector<Vec3> out;
  out.reserve(pc.size());
  for (const Point& p : pc.points) out.push_back({p.x, p.y, p.z});
  return out;
}

inline void write_ply(const std::filesystem::path& path, const PointCloud& pc,
                      std::optional<std::span<const double>> scalars = std::nullopt) {
  const auto pos = positions_of(pc);
  write_ply(path, std::span<const Vec3>(pos), scalars);
}

}  // namespace nv3d

#endif  // NV3D_PLY_HPP
