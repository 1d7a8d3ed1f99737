#ifndef NV3D_POINT_CLOUD_HPP
#define NV3D_POINT_CLOUD_HPP

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "nv3d/error.hpp"

namespace nv3d {

/// A single LiDAR return. Reflectance is passed through verbatim.
struct Point {
  float x = 0.0f;
  float y = 0.0f;
  float z = 0.0f;
  float r = 0.0f;

  friend bool operator==(const Point&, const Point&) = default;
};

/// Axis-aligned detection range, half-open [min, max) on every axis.
struct RangeBox {
  double x_min = 0.0;
  double x_max = 70.4;
  double y_min = -40.0;
  double y_max = 40.0;
  double z_min = -3.0;
  double z_max = 1.0;

  static RangeBox kitti() { return {}; }

  void validate() const {
    if (!(x_min < x_max) || !(y_min < y_max) || !(z_min < z_max)) {
      throw Error(ErrorCode::InvalidConfig, "range box requires min < max on every axis");
    }
  }

  bool contains(double x, double y, double z) const {
    return x >= x_min && x < x_max && y >= y_min && y < y_max && z >= z_min && z < z_max;
  }

  bool contains(const Point& p) const { return contains(p.x, p.y, p.z); }

  friend bool operator==(const RangeBox&, const RangeBox&) = default;
};

struct PointCloud {
  std::vector<Point> points;
  std::string frame_id;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

inline float decode_le_float(const unsigned char* bytes) {
  std::uint32_t raw;
  std::memcpy(&raw, bytes, sizeof raw);
  return std::bit_cast<float>(to_little_endian(raw));
}

inline void encode_le_float(float value, unsigned char* bytes) {
  const std::uint32_t raw = to_little_endian(std::bit_cast<std::uint32_t>(value));
  std::memcpy(bytes, &raw, sizeof raw);
}

}  // namespace detail

/// Decode a KITTI velodyne frame held in memory: consecutive little-endian
/// float32 quadruples (x, y, z, reflectance), no header.
inline PointCloud decode_kitti_bin(const std::vector<unsigned char>& bytes, std::string frame_id = {}) {
  if (bytes.size() % 16 != 0) {
    throw Error(ErrorCode::MalformedFrame,
                "byte length " + std::to_string(bytes.size()) + " is not a multiple of 16");
  }
  PointCloud pc;
  pc.frame_id = std::move(frame_id);
  pc.points.resize(bytes.size() / 16);
  for (std::size_t i = 0; i < pc.points.size(); ++i) {
    const unsigned char* rec = bytes.data() + i * 16;
    Point& p = pc.points[i];
    p.x = detail::decode_le_float(rec);
    p.y = detail::decode_le_float(rec + 4);
    p.z = detail::decode_le_float(rec + 8);
    p.r = detail::decode_le_float(rec + 12);
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) || !std::isfinite(p.r)) {
      throw Error(ErrorCode::NonFiniteValue, "point " + std::to_string(i) + " has a non-finite value");
    }
  }
  return pc;
}

inline PointCloud read_kitti_bin(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    throw Error(ErrorCode::FileNotFound, path.string());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::FileNotFound, path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::IoError, "failed reading " + path.string());
  return decode_kitti_bin(bytes, path.stem().string());
}

inline std::vector<unsigned char> encode_kitti_bin(const PointCloud& pc) {
  std::vector<unsigned char> bytes(pc.points.size() * 16);
  for (std::size_t i = 0; i < pc.points.size(); ++i) {
    unsigned char* rec = bytes.data() + i * 16;
    const Point& p = pc.points[i];
    detail::encode_le_float(p.x, rec);
    detail::encode_le_float(p.y, rec + 4);
    detail::encode_le_float(p.z, rec + 8);
    detail::encode_le_float(p.r, rec + 12);
  }
  return bytes;
}

inline void write_kitti_bin(const PointCloud& pc, const std::filesystem::path& path) {
  const auto bytes = encode_kitti_bin(pc);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

/// Keep exactly the points inside the half-open box, in their original order.
inline PointCloud clip_to_range(const PointCloud& pc, const RangeBox& box) {
  PointCloud out;
  out.frame_id = pc.frame_id;
  out.points.reserve(pc.points.size());
  for (const Point& p : pc.points) {
    if (box.contains(p)) out.points.push_back(p);
  }
  return out;
}

}  // namespace nv3d

#endif  // NV3D_POINT_CLOUD_HPP
