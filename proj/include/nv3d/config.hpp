#ifndef NV3D_CONFIG_HPP
#define NV3D_CONFIG_HPP

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nv3d/error.hpp"
#include "nv3d/normals.hpp"
#include "nv3d/point_cloud.hpp"
#include "nv3d/sampling.hpp"
#include "nv3d/scene.hpp"
#include "nv3d/voxelizer.hpp"

namespace nv3d {

enum class SamplerKind { nd, fov, general_bin, random, fps };

inline std::string_view to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::nd: return "nd";
    case SamplerKind::fov: return "fov";
    case SamplerKind::general_bin: return "general_bin";
    case SamplerKind::random: return "random";
    case SamplerKind::fps: return "fps";
  }
  return "unknown";
}

inline SamplerKind parse_sampler(std::string_view s) {
  for (SamplerKind k : {SamplerKind::nd, SamplerKind::fov, SamplerKind::general_bin, SamplerKind::random,
                        SamplerKind::fps}) {
    if (s == to_string(k)) return k;
  }
  throw Error(ErrorCode::InvalidConfig, "unknown sampler '" + std::string(s) + "'");
}

/// Where the voxel cap is enforced.
enum class CapPlacement { before_normals, after_sampling };

struct PipelineConfig {
  VoxelConfig voxel{};
  CapPlacement cap_placement = CapPlacement::before_normals;
  NormalConfig normals{};
  NdConfig nd{};
  FovConfig fov{};
  std::size_t general_quota = 500;
  double random_keep_fraction = 0.5;
  std::size_t fps_keep_count = 4000;
  std::vector<SamplerKind> chain{SamplerKind::nd, SamplerKind::fov};
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  bool write_ply = false;
  bool write_csv = true;
  bool force = false;

  void validate() const {
    voxel.validate();
    normals.validate();
    nd.validate();
    fov.validate();
    if (general_quota == 0) throw Error(ErrorCode::InvalidConfig, "general.quota must be positive");
    if (!(random_keep_fraction >= 0.0 && random_keep_fraction <= 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "random.keep_fraction must lie in [0, 1]");
    }
    for (std::size_t i = 0; i < chain.size(); ++i) {
      for (std::size_t j = i + 1; j < chain.size(); ++j) {
        if (chain[i] == chain[j]) {
          throw Error(ErrorCode::InvalidConfig, "sampler '" + std::string(to_string(chain[i])) +
                                                    "' appears more than once in the chain");
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Flat key-value text: `section.key = value`, '#' starts a comment.

using KeyValues = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(std::string_view key, std::string_view v) {
  const std::string s = trim(v);
  try {
    std::size_t used = 0;
    const double d = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return d;
  } catch (const std::exception&) {
    throw Error(ErrorCode::InvalidConfig, std::string(key) + ": expected a number, got '" + s + "'");
  }
}

inline std::uint64_t parse_uint(std::string_view key, std::string_view v) {
  const std::string s = trim(v);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw Error(ErrorCode::InvalidConfig, std::string(key) + ": expected a non-negative integer, got '" + s + "'");
  }
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  const std::string s = trim(v);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw Error(ErrorCode::InvalidConfig, std::string(key) + ": expected a boolean, got '" + s + "'");
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto end = s.find(sep, start);
    const auto piece = trim(s.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start));
    if (!piece.empty()) out.push_back(piece);
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

}  // namespace detail

inline KeyValues parse_key_values(std::istream& in) {
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::InvalidConfig, "line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    std::string key = detail::trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw Error(ErrorCode::InvalidConfig, "line " + std::to_string(lineno) + ": empty key");
    kv.emplace_back(std::move(key), detail::trim(std::string_view(t).substr(eq + 1)));
  }
  return kv;
}

inline KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::FileNotFound, path.string());
  return parse_key_values(in);
}

/// One settable pipeline key.
struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(PipelineConfig&, std::string_view)> set;
  std::function<nlohmann::ordered_json(const PipelineConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_uint;
  using J = nlohmann::ordered_json;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto real = [&k](std::string name, std::string help, auto accessor) {
      k.push_back({name, std::move(help),
                   [name, accessor](PipelineConfig& c, std::string_view v) { accessor(c) = parse_double(name, v); },
                   [accessor](const PipelineConfig& c) { return J(accessor(c)); }});
    };
    auto count = [&k](std::string name, std::string help, auto accessor) {
      k.push_back({name, std::move(help),
                   [name, accessor](PipelineConfig& c, std::string_view v) {
                     accessor(c) = static_cast<std::size_t>(parse_uint(name, v));
                   },
                   [accessor](const PipelineConfig& c) { return J(accessor(c)); }});
    };
    real("range.x_min", "range box lower x (m)", [](auto& c) -> auto& { return c.voxel.range.x_min; });
    real("range.x_max", "range box upper x (m)", [](auto& c) -> auto& { return c.voxel.range.x_max; });
    real("range.y_min", "range box lower y (m)", [](auto& c) -> auto& { return c.voxel.range.y_min; });
    real("range.y_max", "range box upper y (m)", [](auto& c) -> auto& { return c.voxel.range.y_max; });
    real("range.z_min", "range box lower z (m)", [](auto& c) -> auto& { return c.voxel.range.z_min; });
    real("range.z_max", "range box upper z (m)", [](auto& c) -> auto& { return c.voxel.range.z_max; });
    real("voxel.size_x", "voxel size along x (m)", [](auto& c) -> auto& { return c.voxel.size_x; });
    real("voxel.size_y", "voxel size along y (m)", [](auto& c) -> auto& { return c.voxel.size_y; });
    real("voxel.size_z", "voxel size along z (m)", [](auto& c) -> auto& { return c.voxel.size_z; });
    k.push_back({"voxel.max_voxels", "voxel cap, 0 disables",
                 [](PipelineConfig& c, std::string_view v) {
                   const auto n = parse_uint("voxel.max_voxels", v);
                   c.voxel.max_voxels = n == 0 ? std::nullopt : std::optional<std::size_t>(n);
                 },
                 [](const PipelineConfig& c) { return J(c.voxel.max_voxels.value_or(0)); }});
    k.push_back({"voxel.cap_placement", "before_normals | after_sampling",
                 [](PipelineConfig& c, std::string_view v) {
                   const std::string s = detail::trim(v);
                   if (s == "before_normals") {
                     c.cap_placement = CapPlacement::before_normals;
                   } else if (s == "after_sampling") {
                     c.cap_placement = CapPlacement::after_sampling;
                   } else {
                     throw Error(ErrorCode::InvalidConfig, "voxel.cap_placement: unknown value '" + s + "'");
                   }
                 },
                 [](const PipelineConfig& c) {
                   return J(c.cap_placement == CapPlacement::before_normals ? "before_normals" : "after_sampling");
                 }});
    count("normals.k", "neighbours per voxel", [](auto& c) -> auto& { return c.normals.k; });
    real("normals.density_radius", "ball radius on the unit sphere",
         [](auto& c) -> auto& { return c.normals.density_radius; });
    k.push_back({"normals.orientation", "toward_sensor | plus_z_hemisphere",
                 [](PipelineConfig& c, std::string_view v) { c.normals.orientation = parse_orientation(detail::trim(v)); },
                 [](const PipelineConfig& c) { return J(std::string(to_string(c.normals.orientation))); }});
    real("nd.threshold", "density threshold for candidates",
         [](auto& c) -> auto& { return c.nd.density_threshold; });
    real("nd.drop_fraction", "fraction of candidates dropped",
         [](auto& c) -> auto& { return c.nd.drop_fraction; });
    k.push_back({"nd.selection", "uniform | rank",
                 [](PipelineConfig& c, std::string_view v) {
                   const std::string s = detail::trim(v);
                   if (s == "uniform") {
                     c.nd.selection = NdSelection::uniform;
                   } else if (s == "rank") {
                     c.nd.selection = NdSelection::rank;
                   } else {
                     throw Error(ErrorCode::InvalidConfig, "nd.selection: unknown value '" + s + "'");
                   }
                 },
                 [](const PipelineConfig& c) { return J(c.nd.selection == NdSelection::uniform ? "uniform" : "rank"); }});
    count("fov.num_bins", "number of radial bins", [](auto& c) -> auto& { return c.fov.num_bins; });
    count("fov.base_quota", "voxels kept in the first bin", [](auto& c) -> auto& { return c.fov.base_quota; });
    real("fov.bin_width", "radial bin width (m)", [](auto& c) -> auto& { return c.fov.bin_width; });
    k.push_back({"fov.far_cutoff", "range beyond which all voxels are kept (m), 0 = num_bins * bin_width",
                 [](PipelineConfig& c, std::string_view v) {
                   const double d = parse_double("fov.far_cutoff", v);
                   c.fov.far_cutoff = d == 0.0 ? std::nullopt : std::optional<double>(d);
                 },
                 [](const PipelineConfig& c) { return J(c.fov.cutoff()); }});
    k.push_back({"fov.metric", "bev | range3d",
                 [](PipelineConfig& c, std::string_view v) {
                   const std::string s = detail::trim(v);
                   if (s == "bev") {
                     c.fov.metric = RangeMetric::bev;
                   } else if (s == "range3d") {
                     c.fov.metric = RangeMetric::range3d;
                   } else {
                     throw Error(ErrorCode::InvalidConfig, "fov.metric: unknown value '" + s + "'");
                   }
                 },
                 [](const PipelineConfig& c) { return J(c.fov.metric == RangeMetric::bev ? "bev" : "range3d"); }});
    count("general.quota", "per-bin quota of the general bin sampler",
          [](auto& c) -> auto& { return c.general_quota; });
    real("random.keep_fraction", "keep fraction of the random sampler",
         [](auto& c) -> auto& { return c.random_keep_fraction; });
    count("fps.keep_count", "voxels kept by farthest point sampling",
          [](auto& c) -> auto& { return c.fps_keep_count; });
    k.push_back({"pipeline.chain", "comma-separated samplers: nd, fov, general_bin, random, fps",
                 [](PipelineConfig& c, std::string_view v) {
                   c.chain.clear();
                   for (const auto& s : detail::split(v, ',')) c.chain.push_back(parse_sampler(s));
                 },
                 [](const PipelineConfig& c) {
                   J arr = J::array();
                   for (SamplerKind s : c.chain) arr.push_back(std::string(to_string(s)));
                   return arr;
                 }});
    k.push_back({"pipeline.seed", "random seed",
                 [](PipelineConfig& c, std::string_view v) { c.seed = parse_uint("pipeline.seed", v); },
                 [](const PipelineConfig& c) { return J(c.seed); }});
    k.push_back({"output.dir", "artifact directory",
                 [](PipelineConfig& c, std::string_view v) { c.output_dir = detail::trim(v); },
                 [](const PipelineConfig& c) { return J(c.output_dir.string()); }});
    k.push_back({"output.ply", "write PLY visualizations",
                 [](PipelineConfig& c, std::string_view v) { c.write_ply = parse_bool("output.ply", v); },
                 [](const PipelineConfig& c) { return J(c.write_ply); }});
    k.push_back({"output.csv", "write CSV exports",
                 [](PipelineConfig& c, std::string_view v) { c.write_csv = parse_bool("output.csv", v); },
                 [](const PipelineConfig& c) { return J(c.write_csv); }});
    k.push_back({"output.force", "overwrite existing outputs",
                 [](PipelineConfig& c, std::string_view v) { c.force = parse_bool("output.force", v); },
                 [](const PipelineConfig& c) { return J(c.force); }});
    return k;
  }();
  return keys;
}

inline void apply_setting(PipelineConfig& cfg, std::string_view key, std::string_view value) {
  for (const ConfigKey& k : config_keys()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw Error(ErrorCode::InvalidConfig, "unknown config key '" + std::string(key) + "'");
}

/// Apply pipeline keys; keys under `scene.` are ignored here.
inline void apply_settings(PipelineConfig& cfg, const KeyValues& kv) {
  for (const auto& [k, v] : kv) {
    if (k.rfind("scene.", 0) == 0) continue;
    apply_setting(cfg, k, v);
  }
}

/// Config echo in key order. Output paths and the overwrite flag are not
/// part of the echo so reports do not depend on where they are written.
inline nlohmann::ordered_json config_echo(const PipelineConfig& cfg) {
  nlohmann::ordered_json j;
  for (const ConfigKey& k : config_keys()) {
    if (k.name.rfind("output.", 0) == 0) continue;
    j[k.name] = k.get(cfg);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Scene descriptions use the same format under `scene.`; boxes repeat
// `scene.box = cx, cy, sx, sy, sz, yaw_rad`.

inline SyntheticScene parse_scene(const KeyValues& kv) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_uint;
  SyntheticScene s;
  for (const auto& [key, value] : kv) {
    if (key.rfind("scene.", 0) != 0) continue;
    const std::string name = key.substr(6);
    if (name == "preset") {
      const std::string p = detail::trim(value);
      if (p != "street") throw Error(ErrorCode::InvalidConfig, "scene.preset: unknown preset '" + p + "'");
      s = SyntheticScene::street(s.seed);
    } else if (name == "x_min") {
      s.x_min = parse_double(key, value);
    } else if (name == "x_max") {
      s.x_max = parse_double(key, value);
    } else if (name == "y_min") {
      s.y_min = parse_double(key, value);
    } else if (name == "y_max") {
      s.y_max = parse_double(key, value);
    } else if (name == "ground_z") {
      s.ground_z = parse_double(key, value);
    } else if (name == "spacing") {
      s.spacing = parse_double(key, value);
    } else if (name == "noise_sigma") {
      s.noise_sigma = parse_double(key, value);
    } else if (name == "thinning") {
      s.thinning = parse_bool(key, value);
    } else if (name == "thinning_ref") {
      s.thinning_ref = parse_double(key, value);
    } else if (name == "thinning_power") {
      s.thinning_power = parse_double(key, value);
    } else if (name == "seed") {
      s.seed = parse_uint(key, value);
    } else if (name == "frame_id") {
      s.frame_id = detail::trim(value);
    } else if (name == "box") {
      const auto f = detail::split(value, ',');
      if (f.size() != 6) throw Error(ErrorCode::InvalidConfig, "scene.box expects cx, cy, sx, sy, sz, yaw");
      s.boxes.push_back({parse_double(key, f[0]), parse_double(key, f[1]), parse_double(key, f[2]),
                         parse_double(key, f[3]), parse_double(key, f[4]), parse_double(key, f[5])});
    } else {
      throw Error(ErrorCode::InvalidConfig, "unknown scene key '" + key + "'");
    }
  }
  s.validate();
  return s;
}

inline bool has_scene_keys(const KeyValues& kv) {
  return std::any_of(kv.begin(), kv.end(), [](const auto& p) { return p.first.rfind("scene.", 0) == 0; });
}

}  // namespace nv3d

#endif  // NV3D_CONFIG_HPP
