#ifndef NV3D_BATCH_HPP
#define NV3D_BATCH_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstddef>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "nv3d/pipeline.hpp"

namespace nv3d {

struct BatchResult {
  std::vector<nlohmann::ordered_json> frames;  // input order; failed frames hold error reports
  nlohmann::ordered_json aggregate;
  std::size_t failures = 0;
};

namespace detail {

/// Linear-interpolated percentile of sorted values, p in [0, 100].
inline double percentile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return 0.0;
  const double pos = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline nlohmann::ordered_json summarize(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  nlohmann::ordered_json j;
  if (v.empty()) {
    j["count"] = 0;
    return j;
  }
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  j["count"] = v.size();
  j["mean"] = mean;
  j["median"] = percentile(v, 50.0);
  j["stddev"] = std::sqrt(var / static_cast<double>(v.size()));
  j["min"] = v.front();
  j["max"] = v.back();
  return j;
}

}  // namespace detail

/// Aggregate of per-frame reports, reduced in frame order.
inline nlohmann::ordered_json aggregate_reports(const std::vector<nlohmann::ordered_json>& frames) {
  std::vector<double> retention;
  std::vector<double> total_ms;
  std::vector<std::string> stage_names;
  std::vector<std::vector<double>> stage_retention;
  std::size_t failed = 0;
  for (const auto& f : frames) {
    if (f.at("status") != "ok") {
      ++failed;
      continue;
    }
    retention.push_back(f.at("retention").get<double>());
    total_ms.push_back(f.at("timing_ms").at("total").get<double>());
    const auto& stages = f.at("counts").at("stages");
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const auto name = stages[s].at("sampler").get<std::string>();
      auto it = std::find(stage_names.begin(), stage_names.end(), name);
      if (it == stage_names.end()) {
        stage_names.push_back(name);
        stage_retention.emplace_back();
        it = stage_names.end() - 1;
      }
      stage_retention[static_cast<std::size_t>(it - stage_names.begin())].push_back(
          stages[s].at("retention").get<double>());
    }
  }
  nlohmann::ordered_json agg;
  agg["schema_version"] = kReportSchemaVersion;
  agg["frames"] = frames.size();
  agg["succeeded"] = frames.size() - failed;
  agg["failed"] = failed;
  agg["retention"] = detail::summarize(retention);
  std::vector<double> drops;
  for (double r : retention) drops.push_back(1.0 - r);
  agg["drop_rate"] = detail::summarize(drops);
  nlohmann::ordered_json per_stage;
  for (std::size_t s = 0; s < stage_names.size(); ++s) per_stage[stage_names[s]] = detail::summarize(stage_retention[s]);
  agg["stage_retention"] = std::move(per_stage);
  std::sort(total_ms.begin(), total_ms.end());
  agg["timing_ms"] = {{"p50", detail::percentile(total_ms, 50.0)},
                      {"p90", detail::percentile(total_ms, 90.0)},
                      {"p99", detail::percentile(total_ms, 99.0)}};
  return agg;
}

/// Process frames independently on up to `jobs` worker threads. Frame
/// failures are recorded as error reports and do not stop the batch. When an
/// output directory is configured each frame writes into `<dir>/<NNNN>_<frame_id>/`.
inline BatchResult batch_run(const PipelineConfig& cfg, const std::vector<FrameInput>& inputs, std::size_t jobs = 1) {
  cfg.validate();
  if (inputs.empty()) throw Error(ErrorCode::UsageError, "batch needs at least one frame");
  BatchResult out;
  out.frames.resize(inputs.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&]() {
    for (std::size_t i = next++; i < inputs.size(); i = next++) {
      PipelineConfig frame_cfg = cfg;
      const std::string label = frame_label(inputs[i]);
      if (!cfg.output_dir.empty()) {
        char prefix[16];
        std::snprintf(prefix, sizeof prefix, "%04zu_", i);
        frame_cfg.output_dir = cfg.output_dir / (prefix + label);
      }
      try {
        out.frames[i] = run_pipeline(frame_cfg, inputs[i]).report;
      } catch (const Error& e) {
        out.frames[i] = error_report(label, e, cfg.seed);
      } catch (const std::exception& e) {
        out.frames[i] = error_report(label, Error(ErrorCode::IoError, e.what()), cfg.seed);
      }
    }
  };

  const std::size_t n_threads = std::clamp<std::size_t>(jobs, 1, inputs.size());
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }

  for (const auto& f : out.frames) out.failures += f.at("status") != "ok" ? 1 : 0;
  out.aggregate = aggregate_reports(out.frames);
  return out;
}

}  // namespace nv3d

#endif  // NV3D_BATCH_HPP
