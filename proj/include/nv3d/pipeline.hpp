#ifndef NV3D_PIPELINE_HPP
#define NV3D_PIPELINE_HPP

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "nv3d/config.hpp"
#include "nv3d/error.hpp"
#include "nv3d/normals.hpp"
#include "nv3d/ply.hpp"
#include "nv3d/point_cloud.hpp"
#include "nv3d/sampling.hpp"
#include "nv3d/scene.hpp"
#include "nv3d/voxelizer.hpp"

namespace nv3d {

inline constexpr int kReportSchemaVersion = 1;

/// A frame on disk or a scene to synthesize.
using FrameInput = std::variant<std::filesystem::path, SyntheticScene>;

inline std::string frame_label(const FrameInput& in) {
  if (const auto* p = std::get_if<std::filesystem::path>(&in)) return p->stem().string();
  return std::get<SyntheticScene>(in).frame_id;
}

/// Error raised by the pipeline, carrying the failing frame and stage.
class PipelineError : public Error {
 public:
  PipelineError(ErrorCode code, const std::string& frame, const std::string& stage, const std::string& what)
      : Error(code, "frame '" + frame + "' at stage '" + stage + "': " + what), frame_(frame), stage_(stage) {}

  const std::string& frame() const { return frame_; }
  const std::string& stage() const { return stage_; }

 private:
  std::string frame_;
  std::string stage_;
};

struct StageResult {
  SamplerKind sampler;
  SampleMask mask;  // decisions of this stage alone
  std::size_t kept_after = 0;
};

struct FrameResult {
  PointCloud cloud;  // clipped
  std::size_t raw_points = 0;
  std::size_t voxels_raw = 0;
  VoxelSet voxels;  // after any pre-normal cap
  std::vector<NormalFeature> normals;
  std::vector<StageResult> stages;
  std::optional<SampleMask> cap_mask;  // after_sampling placement only
  SampleMask final_mask;
  nlohmann::ordered_json report;
};

namespace detail {

class StageClock {
 public:
  void start() { t0_ = std::chrono::steady_clock::now(); }
  double stop_ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_;
};

inline nlohmann::ordered_json bins_json(const BinStatistics& s) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const BinStat& b : s.bins) {
    arr.push_back({{"bin", b.bin}, {"inner", b.inner}, {"outer", b.outer}, {"count", b.count}, {"density", b.density}});
  }
  j["bins"] = std::move(arr);
  j["far_count"] = s.far_count;
  j["total"] = s.total;
  return j;
}

inline SampleMask run_sampler(SamplerKind kind, const PipelineConfig& cfg, const VoxelSet& vs,
                              const std::vector<double>& densities, const SampleMask& active) {
  switch (kind) {
    case SamplerKind::nd: return nd_sample(vs, densities, cfg.nd, cfg.seed, &active);
    case SamplerKind::fov: return fov_bin_sample(vs, cfg.fov, cfg.seed, &active);
    case SamplerKind::general_bin: return general_bin_sample(vs, cfg.fov, cfg.general_quota, cfg.seed, &active);
    case SamplerKind::random: return random_sample(vs, cfg.random_keep_fraction, cfg.seed, &active);
    case SamplerKind::fps: {
      const std::size_t eligible = active.kept();
      return fps_sample(vs, std::min(cfg.fps_keep_count, eligible), cfg.seed, &active);
    }
  }
  throw Error(ErrorCode::InvalidConfig, "unknown sampler");
}

}  // namespace detail

/// Clip -> voxelize -> cap -> normals -> sampler chain -> statistics, on an
/// in-memory cloud. No files are written.
inline FrameResult run_frame(const PipelineConfig& cfg, const PointCloud& raw, double read_ms = 0.0) {
  cfg.validate();
  const std::string frame = raw.frame_id;
  FrameResult r;
  r.raw_points = raw.size();
  nlohmann::ordered_json timing;
  timing["read"] = read_ms;
  detail::StageClock clock;

  auto guarded = [&frame](const char* stage, auto&& fn) {
    try {
      return fn();
    } catch (const PipelineError&) {
      throw;
    } catch (const Error& e) {
      throw PipelineError(e.code(), frame, stage, e.what());
    }
  };

  clock.start();
  r.cloud = clip_to_range(raw, cfg.voxel.range);
  timing["clip"] = clock.stop_ms();
  if (r.cloud.empty()) throw PipelineError(ErrorCode::EmptyFrame, frame, "clip", "no points inside the range box");

  clock.start();
  VoxelSet voxels = guarded("voxelize", [&] { return voxelize(r.cloud, cfg.voxel); });
  r.voxels_raw = voxels.size();
  if (cfg.voxel.max_voxels && cfg.cap_placement == CapPlacement::before_normals) {
    voxels = cap_voxels(voxels, *cfg.voxel.max_voxels, cfg.seed);
  }
  r.voxels = std::move(voxels);
  timing["voxelize"] = clock.stop_ms();

  clock.start();
  r.normals = guarded("normals", [&] { return extract_normals(r.voxels, cfg.normals); });
  timing["normals"] = clock.stop_ms();
  const std::vector<double> densities = densities_of(r.normals);

  SampleMask active = SampleMask::keep_all(r.voxels.size(), cfg.seed);
  std::vector<SampleMask> masks;
  for (SamplerKind kind : cfg.chain) {
    clock.start();
    SampleMask m = guarded(to_string(kind).data(), [&] { return detail::run_sampler(kind, cfg, r.voxels, densities, active); });
    timing[std::string("sample_") + std::string(to_string(kind))] = clock.stop_ms();
    const SampleMask both[] = {active, m};
    active = compose(both);
    masks.push_back(m);
    r.stages.push_back({kind, std::move(m), active.kept()});
  }
  if (cfg.voxel.max_voxels && cfg.cap_placement == CapPlacement::after_sampling) {
    std::vector<std::size_t> survivors;
    for (std::size_t i = 0; i < active.size(); ++i) {
      if (active.keep[i]) survivors.push_back(i);
    }
    SampleMask cap = SampleMask::keep_all(active.size(), cfg.seed);
    if (survivors.size() > *cfg.voxel.max_voxels) {
      rng::Stream stream(cfg.seed, rng::Tag::cap, 1);
      const auto chosen = rng::choose_subset(survivors.size(), *cfg.voxel.max_voxels, stream);
      std::vector<std::uint8_t> flag(survivors.size(), 0);
      for (std::size_t c : chosen) flag[c] = 1;
      for (std::size_t j = 0; j < survivors.size(); ++j) {
        if (!flag[j]) cap.drop(survivors[j], DropTag::cap);
      }
    }
    const SampleMask both[] = {active, cap};
    active = compose(both);
    r.cap_mask = std::move(cap);
  }
  r.final_mask = active;

  // report
  clock.start();
  using J = nlohmann::ordered_json;
  J rep;
  rep["schema_version"] = kReportSchemaVersion;
  rep["frame_id"] = frame;
  rep["status"] = "ok";
  rep["seed"] = cfg.seed;
  const double entering = static_cast<double>(r.voxels.size());
  J counts;
  counts["raw_points"] = r.raw_points;
  counts["clipped_points"] = r.cloud.size();
  counts["voxels_raw"] = r.voxels_raw;
  counts["voxels_capped"] = r.voxels.size();
  J stages = J::array();
  std::size_t prev = r.voxels.size();
  for (const StageResult& s : r.stages) {
    stages.push_back({{"sampler", std::string(to_string(s.sampler))},
                      {"kept", s.kept_after},
                      {"dropped", prev - s.kept_after},
                      {"retention", prev == 0 ? 1.0 : static_cast<double>(s.kept_after) / static_cast<double>(prev)}});
    prev = s.kept_after;
  }
  counts["stages"] = std::move(stages);
  if (r.cap_mask) counts["kept_after_cap"] = r.final_mask.kept();
  counts["final_kept"] = r.final_mask.kept();
  rep["counts"] = std::move(counts);
  const double retention = static_cast<double>(r.final_mask.kept()) / entering;
  rep["retention"] = retention;
  rep["drop_rate"] = 1.0 - retention;

  J normals;
  normals["orientation"] = std::string(to_string(cfg.normals.orientation));
  normals["k"] = cfg.normals.k;
  normals["density_radius"] = cfg.normals.density_radius;
  std::size_t above = 0;
  for (double d : densities) above += d > cfg.nd.density_threshold ? 1 : 0;
  normals["above_threshold"] = above;
  normals["histogram"] = density_histogram(r.normals, 10);
  rep["normals"] = std::move(normals);

  J bins;
  bins["before"] = detail::bins_json(bin_statistics(r.voxels, nullptr, cfg.fov));
  SampleMask running = SampleMask::keep_all(r.voxels.size(), cfg.seed);
  for (const StageResult& s : r.stages) {
    const SampleMask both[] = {running, s.mask};
    running = compose(both);
    bins[std::string("after_") + std::string(to_string(s.sampler))] =
        detail::bins_json(bin_statistics(r.voxels, &running, cfg.fov));
  }
  if (r.cap_mask) bins["after_cap"] = detail::bins_json(bin_statistics(r.voxels, &r.final_mask, cfg.fov));
  rep["bin_statistics"] = std::move(bins);
  rep["config"] = config_echo(cfg);
  rep["artifacts"] = J::array();
  timing["stats"] = clock.stop_ms();
  double total = 0.0;
  for (const auto& [k, v] : timing.items()) total += v.get<double>();
  timing["total"] = total;
  rep["timing_ms"] = std::move(timing);
  r.report = std::move(rep);
  return r;
}

/// Report without timing, the canonical form for determinism comparisons.
inline nlohmann::ordered_json canonical_report(nlohmann::ordered_json report) {
  report.erase("timing_ms");
  return report;
}

inline std::string mask_csv(const FrameResult& r) {
  std::ostringstream os;
  os << "index,gx,gy,gz,keep,dropped_by\n";
  for (std::size_t i = 0; i < r.final_mask.size(); ++i) {
    const Voxel& v = r.voxels.voxels[i];
    os << i << ',' << v.gx << ',' << v.gy << ',' << v.gz << ',' << int(r.final_mask.keep[i]) << ','
       << to_string(r.final_mask.dropped_by[i]) << '\n';
  }
  return os.str();
}

/// Per-bin counts and areal densities at every stage, for plotting.
inline std::string bins_csv(const nlohmann::ordered_json& report) {
  std::ostringstream os;
  os.precision(12);
  os << "stage,bin,inner,outer,count,density\n";
  for (const auto& [stage, stats] : report.at("bin_statistics").items()) {
    for (const auto& b : stats.at("bins")) {
      os << stage << ',' << b.at("bin").get<std::size_t>() << ',' << b.at("inner").get<double>() << ','
         << b.at("outer").get<double>() << ',' << b.at("count").get<std::size_t>() << ','
         << b.at("density").get<double>() << '\n';
    }
    os << stage << ",far,,," << stats.at("far_count").get<std::size_t>() << ",\n";
  }
  return os.str();
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

}  // namespace detail

inline PointCloud load_frame(const FrameInput& input) {
  if (const auto* path = std::get_if<std::filesystem::path>(&input)) return read_kitti_bin(*path);
  return generate_scene(std::get<SyntheticScene>(input));
}

/// Run one frame and, when `cfg.output_dir` is set, write report.json,
/// masks.csv, bins.csv and optional voxel/normal CSV and PLY artifacts.
/// Refuses to overwrite an existing report unless `cfg.force` is set.
inline FrameResult run_pipeline(const PipelineConfig& cfg, const FrameInput& input) {
  cfg.validate();
  const std::filesystem::path& out = cfg.output_dir;
  if (!out.empty()) {
    if (std::filesystem::exists(out / "report.json") && !cfg.force) {
      throw Error(ErrorCode::UsageError, (out / "report.json").string() + " exists; pass --force to overwrite");
    }
    std::filesystem::create_directories(out);
  }

  detail::StageClock clock;
  clock.start();
  PointCloud raw = load_frame(input);
  const double read_ms = clock.stop_ms();

  FrameResult r = run_frame(cfg, raw, read_ms);
  if (out.empty()) return r;

  auto& artifacts = r.report["artifacts"];
  auto add = [&artifacts](const std::string& name) { artifacts.push_back(name); };
  detail::write_text(out / "masks.csv", mask_csv(r));
  add("masks.csv");
  detail::write_text(out / "bins.csv", bins_csv(r.report));
  add("bins.csv");
  if (cfg.write_csv) {
    write_voxel_csv(out / "voxels.csv", r.voxels);
    add("voxels.csv");
    write_normals_csv(out / "normals.csv", r.voxels, r.normals);
    add("normals.csv");
  }
  if (cfg.write_ply) {
    const auto dens = densities_of(r.normals);
    write_ply(out / "voxels_density.ply", r.voxels, std::span<const double>(dens));
    add("voxels_density.ply");
    write_normal_sphere_ply(out / "normal_sphere.ply", r.normals);
    add("normal_sphere.ply");
    VoxelSet kept;
    kept.config = r.voxels.config;
    kept.frame_id = r.voxels.frame_id;
    for (std::size_t i = 0; i < r.voxels.size(); ++i) {
      if (r.final_mask.keep[i]) kept.voxels.push_back(r.voxels.voxels[i]);
    }
    write_ply(out / "voxels_sampled.ply", kept);
    add("voxels_sampled.ply");
  }
  add("report.json");
  detail::write_text(out / "report.json", r.report.dump(2) + "\n");
  return r;
}

/// Report written when a frame fails.
inline nlohmann::ordered_json error_report(const std::string& frame, const Error& e, std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["frame_id"] = frame;
  j["status"] = "error";
  j["seed"] = seed;
  j["error"] = {{"code", std::string(to_string(e.code()))}, {"message", e.what()}};
  if (const auto* pe = dynamic_cast<const PipelineError*>(&e)) j["error"]["stage"] = pe->stage();
  return j;
}

}  // namespace nv3d

#endif  // NV3D_PIPELINE_HPP
