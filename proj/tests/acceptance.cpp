// Acceptance runner: one PASS/FAIL line per criterion, exit 1 if any fails.
//
// Set NV3D_KITTI_DIR to a directory of KITTI velodyne .bin frames to run the
// drop-rate check against real data instead of the synthetic street scenes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include "nv3d/batch.hpp"
#include "nv3d/gradcheck.hpp"
#include "nv3d/normals.hpp"
#include "nv3d/pipeline.hpp"
#include "nv3d/sampling.hpp"
#include "nv3d/scene.hpp"
#include "nv3d/spatial_index.hpp"
#include "oracles.hpp"

using namespace nv3d;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

class ScratchDir {
 public:
  ScratchDir() : path_(fs::temp_directory_path() / ("nv3d_accept_" + std::to_string(::getpid()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

VoxelSet from_positions(const std::vector<Vec3>& pts) {
  VoxelSet vs;
  vs.config.max_voxels.reset();
  std::uint32_t id = 0;
  for (const Vec3& p : pts) {
    Voxel v;
    v.gx = id++;
    v.feature = {p[0], p[1], p[2], 0.5};
    v.count = 1;
    vs.voxels.push_back(v);
  }
  return vs;
}

double angle(const Vec3& a, const Vec3& b) { return std::acos(std::min(1.0, std::abs(dot(a, b)))); }

// ---------------------------------------------------------------------------

Outcome quota_exactness() {
  const FovConfig cfg;
  const double expected_density = 500.0 / (9.0 * std::numbers::pi);
  double worst_density = 0.0;
  for (std::uint64_t frame = 0; frame < 20; ++frame) {
    rng::Stream s(frame, rng::Tag::scene, 501);
    VoxelSet vs;
    vs.config.max_voxels.reset();
    std::uint32_t id = 0;
    auto add = [&](double rho) {
      const double th = s.uniform(-std::numbers::pi, std::numbers::pi);
      Voxel v;
      v.gx = id++;
      v.feature = {rho * std::cos(th), rho * std::sin(th), -1.7, 0.3};
      v.count = 1;
      vs.voxels.push_back(v);
    };
    for (std::size_t n = 1; n <= 10; ++n) {
      const auto quota = 500 * (2 * n - 1);
      const auto count = quota + 1 + s.below(2 * quota);
      for (std::size_t i = 0; i < count; ++i) add(3.0 * double(n - 1) + s.uniform(0.001, 2.999));
    }
    for (std::size_t i = 0; i < 300; ++i) add(s.uniform(30.0, 70.0));
    for (std::size_t i = vs.size(); i > 1; --i) std::swap(vs.voxels[i - 1], vs.voxels[s.below(i)]);

    const SampleMask m = fov_bin_sample(vs, cfg, frame);
    std::vector<std::size_t> kept(11, 0);
    for (std::size_t i = 0; i < vs.size(); ++i) {
      if (!m.keep[i]) continue;
      const double rho = std::hypot(vs.voxels[i].feature[0], vs.voxels[i].feature[1]);
      ++kept[rho >= 30.0 ? 10 : static_cast<std::size_t>(rho / 3.0)];
    }
    for (std::size_t n = 1; n <= 10; ++n) {
      if (kept[n - 1] != 500 * (2 * n - 1)) {
        return {false, fmt("frame %llu bin %zu kept %zu, quota %zu", (unsigned long long)frame, n, kept[n - 1],
                           500 * (2 * n - 1))};
      }
      const double area = std::numbers::pi * (9.0 * double(n * n) - 9.0 * double((n - 1) * (n - 1)));
      worst_density = std::max(worst_density, std::abs(double(kept[n - 1]) / area - expected_density));
    }
    if (kept[10] != 300) return {false, fmt("far field lost voxels: %zu of 300", kept[10])};
    const BinStatistics st = bin_statistics(vs, &m, cfg);
    for (const BinStat& b : st.bins) {
      worst_density = std::max(worst_density, std::abs(b.density - expected_density));
    }
  }
  return {worst_density <= 1e-9,
          fmt("20 over-full frames, counts = 500(2n-1), max density deviation %.2e", worst_density)};
}

Outcome nd_exactness() {
  std::size_t total_candidates = 0;
  for (std::uint64_t frame = 0; frame < 100; ++frame) {
    rng::Stream s(frame, rng::Tag::scene, 502);
    const std::size_t n = 50 + s.below(5000);
    std::vector<Vec3> pts;
    std::vector<double> dens;
    for (std::size_t i = 0; i < n; ++i) {
      pts.push_back({s.uniform(0, 60), s.uniform(-40, 40), s.uniform(-3, 1)});
      const double u = s.uniform();
      // include values exactly at the threshold
      dens.push_back(u < 0.05 ? 0.7 : s.uniform(1e-3, 1.0));
    }
    const VoxelSet vs = from_positions(pts);
    const SampleMask m = nd_sample(vs, dens, NdConfig{}, frame);
    std::size_t cand = 0, dropped = 0;
    for (std::size_t i = 0; i < n; ++i) {
      cand += dens[i] > 0.7 ? 1 : 0;
      if (!m.keep[i]) {
        ++dropped;
        if (!(dens[i] > 0.7)) return {false, fmt("frame %llu dropped a voxel with density %.6f",
                                                 (unsigned long long)frame, dens[i])};
        if (m.dropped_by[i] != DropTag::nd) return {false, "dropped voxel not tagged nd"};
      }
    }
    if (dropped != cand / 2) {
      return {false, fmt("frame %llu: %zu candidates, dropped %zu", (unsigned long long)frame, cand, dropped)};
    }
    total_candidates += cand;
  }
  return {true, fmt("100 frames, %zu candidates, drops = floor(m/2), none at or below 0.7", total_candidates)};
}

double mean_retention_of(const BatchResult& b) { return b.aggregate["retention"]["mean"].get<double>(); }

Outcome drop_rate() {
  if (const char* dir = std::getenv("NV3D_KITTI_DIR"); dir != nullptr && *dir != '\0') {
    std::vector<FrameInput> frames;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".bin") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) frames.push_back(f);
    if (frames.size() < 500) return {false, fmt("only %zu frames in %s, need at least 500", frames.size(), dir)};
    const std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
    struct Target {
      const char* name;
      std::vector<SamplerKind> chain;
      double rate;
    };
    const Target targets[] = {{"ND", {SamplerKind::nd}, 0.2402},
                              {"FOV", {SamplerKind::fov}, 0.4916},
                              {"ND+FOV", {SamplerKind::nd, SamplerKind::fov}, 0.5314}};
    std::string detail = fmt("%zu KITTI frames:", frames.size());
    bool ok = true;
    for (const Target& t : targets) {
      PipelineConfig cfg;
      cfg.chain = t.chain;
      const BatchResult b = batch_run(cfg, frames, jobs);
      const double drop = 1.0 - mean_retention_of(b);
      ok = ok && b.failures == 0 && std::abs(drop - t.rate) <= 0.05;
      detail += fmt(" %s %.2f%% (target %.2f%%, %zu failed);", t.name, 100 * drop, 100 * t.rate, b.failures);
    }
    return {ok, detail};
  }

  std::vector<FrameInput> frames;
  for (std::uint64_t s = 0; s < 20; ++s) frames.push_back(SyntheticScene::street(s));
  const BatchResult b = batch_run(PipelineConfig{}, frames, 1);
  const double drop = 1.0 - mean_retention_of(b);
  // share of capped voxels inside 30 m, from the report's bin statistics
  double near = 0.0, total = 0.0;
  for (const auto& f : b.frames) {
    const auto& before = f["bin_statistics"]["before"];
    total += before["total"].get<double>();
    near += before["total"].get<double>() - before["far_count"].get<double>();
  }
  return {b.failures == 0 && drop >= 0.45 && drop <= 0.60,
          fmt("synthetic street x20 (no KITTI dir): ND+FOV drop %.2f%%, %.1f%% of voxels within 30 m", 100 * drop,
              100 * near / total)};
}

Outcome normal_correctness() {
  rng::Stream s(7, rng::Tag::scene, 503);
  double worst_clean = 0.0;
  for (int t = 0; t < 50; ++t) {
    const Vec3 n = oracle::random_unit(s);
    const Vec3 origin{s.uniform(5, 40), s.uniform(-20, 20), s.uniform(-2, 1)};
    const auto pts = oracle::noisy_patch(s, n, origin, 0.3, 0.0);
    const auto feats = extract_normals(from_positions(pts), NormalConfig{});
    for (const NormalFeature& f : feats) worst_clean = std::max(worst_clean, angle(f.normal(), n));
  }
  double worst_noisy = 0.0;
  for (int t = 0; t < 500; ++t) {
    const Vec3 n = oracle::random_unit(s);
    const Vec3 origin{s.uniform(5, 40), s.uniform(-20, 20), s.uniform(-2, 1)};
    const auto pts = oracle::noisy_patch(s, n, origin, 0.3, 0.01);
    const auto feats = extract_normals(from_positions(pts), NormalConfig{});
    worst_noisy = std::max(worst_noisy, angle(feats[60].normal(), n));
  }
  const double deg = 180.0 / std::numbers::pi;
  return {worst_clean < 1e-6 && worst_noisy * deg < 5.0,
          fmt("noiseless 50 planes max %.2e rad; sigma 0.01 at 0.3 m spacing, 500 patches max %.2f deg (K=7)",
              worst_clean, worst_noisy * deg)};
}

Outcome knn_oracle() {
  rng::Stream s(11, rng::Tag::scene, 504);
  std::size_t queries = 0;
  for (int set = 0; set < 200; ++set) {
    const auto pts = oracle::random_point_set(s, 500);
    const KdTree3 tree(pts);
    for (std::size_t qi = 0; qi < pts.size(); ++qi) {
      const Vec3 q = s.uniform() < 0.5 ? pts[qi] : Vec3{s.uniform(-2, 11), s.uniform(-2, 11), s.uniform(-1, 2)};
      const std::size_t k = 1 + s.below(std::min<std::size_t>(pts.size(), 12));
      const auto got = tree.knn(q, k);
      const auto want = oracle::brute_knn(pts, q, k);
      if (got.size() != want.size()) return {false, fmt("set %d: knn size %zu vs %zu", set, got.size(), want.size())};
      for (std::size_t j = 0; j < got.size(); ++j) {
        if (got[j].index != want[j]) return {false, fmt("set %d query %zu: knn rank %zu differs", set, qi, j)};
      }
      if (pts.size() > k) {
        const auto self = tree.knn_of(qi, k);
        const auto want_self = oracle::brute_knn(pts, pts[qi], k, qi);
        for (std::size_t j = 0; j < self.size(); ++j) {
          if (self[j].index != want_self[j]) return {false, fmt("set %d point %zu: knn_of differs", set, qi)};
        }
      }
      const double r = s.uniform() < 0.2 ? std::sqrt(oracle::d2(q, pts[s.below(pts.size())])) : s.uniform(0, 3);
      if (r > 0.0 && tree.count_within_radius(q, r) != oracle::brute_count(pts, q, r)) {
        return {false, fmt("set %d query %zu: radius count differs at r=%.17g", set, qi, r)};
      }
      ++queries;
    }
  }
  return {true, fmt("200 point sets, %zu queries: knn, knn_of and radius counts match brute force", queries)};
}

Outcome fusion_gradients() {
  double worst = 0.0, worst_row = 0.0;
  std::size_t entries = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = fusion::toy_gradient_check(seed);
    worst = std::max(worst, r.max_relative_error);
    worst_row = std::max(worst_row, r.max_softmax_row_error);
    entries += r.entries;
  }
  return {worst < 1e-4 && worst_row <= 1e-9,
          fmt("20 toy seeds, %zu entries: max relative error %.2e, softmax row error %.1e", entries, worst, worst_row)};
}

Outcome determinism(const fs::path& scratch) {
  std::size_t runs = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (const auto& chain : {std::vector<SamplerKind>{SamplerKind::nd, SamplerKind::fov},
                              std::vector<SamplerKind>{SamplerKind::random, SamplerKind::general_bin}}) {
      std::string masks[2], reports[2];
      for (int rep = 0; rep < 2; ++rep) {
        PipelineConfig cfg;
        cfg.seed = 40 + seed;
        cfg.chain = chain;
        cfg.output_dir = scratch / fmt("det_%zu", runs);
        const FrameResult r = run_pipeline(cfg, SyntheticScene::street(seed));
        masks[rep] = slurp(cfg.output_dir / "masks.csv");
        auto on_disk = nlohmann::ordered_json::parse(slurp(cfg.output_dir / "report.json"));
        reports[rep] = canonical_report(on_disk).dump();
        ++runs;
      }
      if (masks[0] != masks[1]) return {false, fmt("masks differ for scene %llu", (unsigned long long)seed)};
      if (reports[0] != reports[1]) return {false, fmt("reports differ for scene %llu", (unsigned long long)seed)};
    }
  }
  std::vector<FrameInput> frames;
  for (std::uint64_t s = 0; s < 4; ++s) frames.push_back(SyntheticScene::street(s));
  const BatchResult a = batch_run(PipelineConfig{}, frames, 1);
  const BatchResult b = batch_run(PipelineConfig{}, frames, 4);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (canonical_report(a.frames[i]).dump() != canonical_report(b.frames[i]).dump()) {
      return {false, "batch reports depend on the worker count"};
    }
  }
  return {true, fmt("%zu repeated runs byte-identical (masks.csv, report without timing); batch 1 vs 4 workers equal",
                    runs)};
}

Outcome throughput(const fs::path& scratch) {
  SyntheticScene scene = SyntheticScene::street(0);
  scene.thinning_ref = 6.0;
  const PointCloud pc = generate_scene(scene);
  const fs::path bin = scratch / "throughput.bin";
  write_kitti_bin(pc, bin);
  PipelineConfig cfg;  // single-threaded, default cap, ND then FOV
  double worst = 0.0;
  for (int rep = 0; rep < 3; ++rep) {
    const auto t0 = std::chrono::steady_clock::now();
    const FrameResult r = run_pipeline(cfg, bin);
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    worst = std::max(worst, s);
    if (r.final_mask.size() == 0) return {false, "empty result"};
  }
  return {pc.size() >= 100000 && worst < 1.0,
          fmt("%zu-point frame, read to both samplers, slowest of 3 runs %.3f s", pc.size(), worst)};
}

}  // namespace

int main() {
  ScratchDir scratch;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"sampler-quota-exactness", quota_exactness},
      {"nd-sampler-exactness", nd_exactness},
      {"drop-rate-reproduction", drop_rate},
      {"normal-correctness", normal_correctness},
      {"knn-radius-oracle", knn_oracle},
      {"fusion-gradient-check", fusion_gradients},
      {"determinism", [&] { return determinism(scratch.path()); }},
      {"throughput", [&] { return throughput(scratch.path()); }},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %s: %s [%.2f s]\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), s);
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
