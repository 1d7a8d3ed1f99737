// nv3d command-line front end: run, batch, synth, fusion-check, stats.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nv3d/batch.hpp"
#include "nv3d/config.hpp"
#include "nv3d/gradcheck.hpp"
#include "nv3d/pipeline.hpp"
#include "nv3d/scene.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

enum Exit : int { kOk = 0, kInputError = 1, kPipelineError = 2, kVerificationFailure = 3 };

int exit_code_for(const nv3d::Error& e) { return nv3d::is_input_error(e.code()) ? kInputError : kPipelineError; }

/// Options shared by every subcommand that builds a PipelineConfig.
/// Precedence: defaults, then --config, then --set in order, then per-key flags.
struct ConfigOptions {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;
  std::string out;
  bool force = false;

  void attach(CLI::App& app) {
    app.add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
    app.add_option("--set", sets, "override a config key, key=value (repeatable)");
    app.add_option("--out", out, "output directory (same as --output.dir)");
    app.add_flag("--force", force, "overwrite existing outputs");
    auto* group = app.add_option_group("config keys", "every config key as its own flag");
    for (const nv3d::ConfigKey& k : nv3d::config_keys()) {
      const std::string name = k.name;
      group->add_option_function<std::string>(
          "--" + name, [this, name](const std::string& v) { flags[name] = v; }, k.help);
    }
  }

  nv3d::PipelineConfig build() const {
    nv3d::PipelineConfig cfg;
    if (!config_file.empty()) nv3d::apply_settings(cfg, nv3d::read_key_values(config_file));
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw nv3d::Error(nv3d::ErrorCode::UsageError, "--set expects key=value, got '" + s + "'");
      nv3d::apply_setting(cfg, nv3d::detail::trim(s.substr(0, eq)), nv3d::detail::trim(s.substr(eq + 1)));
    }
    for (const auto& [k, v] : flags) nv3d::apply_setting(cfg, k, v);
    if (!out.empty()) cfg.output_dir = out;
    if (force) cfg.force = true;
    cfg.validate();
    return cfg;
  }
};

/// A scene description file holds `scene.*` keys.
nv3d::SyntheticScene load_scene_file(const fs::path& path) {
  const auto kv = nv3d::read_key_values(path);
  if (!nv3d::has_scene_keys(kv)) {
    throw nv3d::Error(nv3d::ErrorCode::InvalidConfig, path.string() + " has no scene.* keys");
  }
  return nv3d::parse_scene(kv);
}

nv3d::FrameInput resolve_input(const std::string& input, std::optional<std::uint64_t> street_seed) {
  if (street_seed) return nv3d::SyntheticScene::street(*street_seed);
  if (input.empty()) throw nv3d::Error(nv3d::ErrorCode::UsageError, "give an input frame, scene file or --street SEED");
  const fs::path p(input);
  if (!fs::exists(p)) throw nv3d::Error(nv3d::ErrorCode::FileNotFound, input);
  if (p.extension() == ".bin") return p;
  return load_scene_file(p);
}

void write_json(const fs::path& path, const json& j, bool force) {
  if (fs::exists(path) && !force) {
    throw nv3d::Error(nv3d::ErrorCode::UsageError, path.string() + " exists; pass --force to overwrite");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << "\n";
  if (!out) throw nv3d::Error(nv3d::ErrorCode::IoError, "failed writing " + path.string());
}

int cmd_run(const ConfigOptions& opts, const std::string& input, std::optional<std::uint64_t> street_seed,
            bool quiet) {
  const nv3d::PipelineConfig cfg = opts.build();
  const nv3d::FrameInput frame = resolve_input(input, street_seed);
  try {
    const auto r = nv3d::run_pipeline(cfg, frame);
    if (!quiet) std::cout << r.report.dump(2) << "\n";
    return kOk;
  } catch (const nv3d::Error& e) {
    // An existing report that we refused to overwrite stays untouched.
    if (e.code() == nv3d::ErrorCode::UsageError) throw;
    const json rep = nv3d::error_report(nv3d::frame_label(frame), e, cfg.seed);
    if (!cfg.output_dir.empty()) write_json(cfg.output_dir / "report.json", rep, true);
    if (!quiet) std::cout << rep.dump(2) << "\n";
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

int cmd_batch(const ConfigOptions& opts, const std::string& input_dir, std::optional<std::size_t> synthetic,
              std::uint64_t scene_seed, std::size_t jobs, bool quiet) {
  const nv3d::PipelineConfig cfg = opts.build();
  std::vector<nv3d::FrameInput> inputs;
  if (!input_dir.empty()) {
    if (!fs::is_directory(input_dir)) throw nv3d::Error(nv3d::ErrorCode::FileNotFound, input_dir);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(input_dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".bin") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (auto& f : files) inputs.emplace_back(std::move(f));
  }
  if (synthetic) {
    for (std::size_t i = 0; i < *synthetic; ++i) inputs.emplace_back(nv3d::SyntheticScene::street(scene_seed + i));
  }
  if (!cfg.output_dir.empty() && fs::exists(cfg.output_dir / "aggregate.json") && !cfg.force) {
    throw nv3d::Error(nv3d::ErrorCode::UsageError,
                      (cfg.output_dir / "aggregate.json").string() + " exists; pass --force to overwrite");
  }
  const auto result = nv3d::batch_run(cfg, inputs, jobs);
  if (!cfg.output_dir.empty()) write_json(cfg.output_dir / "aggregate.json", result.aggregate, true);
  if (!quiet) std::cout << result.aggregate.dump(2) << "\n";
  for (const auto& f : result.frames) {
    if (f.at("status") != "ok") std::cerr << "frame " << f.at("frame_id").get<std::string>() << ": " << f.at("error").at("message").get<std::string>() << "\n";
  }
  return result.failures == 0 ? kOk : kPipelineError;
}

int cmd_synth(const std::string& scene_file, std::optional<std::uint64_t> street_seed, const std::string& out,
              const std::string& ply, bool force) {
  nv3d::SyntheticScene scene;
  if (!scene_file.empty()) {
    scene = load_scene_file(scene_file);
  } else {
    scene = nv3d::SyntheticScene::street(street_seed.value_or(0));
  }
  for (const std::string& p : {out, ply}) {
    if (!p.empty() && fs::exists(p) && !force) {
      throw nv3d::Error(nv3d::ErrorCode::UsageError, p + " exists; pass --force to overwrite");
    }
  }
  const nv3d::PointCloud cloud = nv3d::generate_scene(scene);
  if (!out.empty()) nv3d::write_kitti_bin(cloud, out);
  if (!ply.empty()) nv3d::write_ply(ply, cloud);
  json j;
  j["frame_id"] = cloud.frame_id;
  j["points"] = cloud.size();
  j["boxes"] = scene.boxes.size();
  j["seed"] = scene.seed;
  if (!out.empty()) j["bin"] = out;
  if (!ply.empty()) j["ply"] = ply;
  std::cout << j.dump(2) << "\n";
  return kOk;
}

int cmd_fusion_check(std::uint64_t seed, std::size_t trials, double tolerance) {
  if (trials == 0) throw nv3d::Error(nv3d::ErrorCode::UsageError, "--trials must be at least 1");
  json j;
  j["seed"] = seed;
  j["trials"] = trials;
  j["tolerance"] = tolerance;
  json rows = json::array();
  double worst = 0.0;
  double worst_softmax = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto r = nv3d::fusion::toy_gradient_check(seed + t);
    worst = std::max(worst, r.max_relative_error);
    worst_softmax = std::max(worst_softmax, r.max_softmax_row_error);
    rows.push_back({{"seed", seed + t},
                    {"max_relative_error", r.max_relative_error},
                    {"entries", r.entries},
                    {"kinks_skipped", r.kinks_skipped},
                    {"softmax_row_error", r.max_softmax_row_error},
                    {"worst", r.worst}});
  }
  const bool pass = worst < tolerance && worst_softmax <= 1e-9;
  j["max_relative_error"] = worst;
  j["max_softmax_row_error"] = worst_softmax;
  j["pass"] = pass;
  j["results"] = std::move(rows);
  std::cout << j.dump(2) << "\n";
  return pass ? kOk : kVerificationFailure;
}

/// Summarise report.json files: drop rates, summed density histogram and
/// summed per-bin counts for every recorded stage.
int cmd_stats(const std::vector<std::string>& paths, const std::string& csv, bool force) {
  std::vector<fs::path> reports;
  for (const std::string& p : paths) {
    if (fs::is_directory(p)) {
      for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file() && e.path().filename() == "report.json") reports.push_back(e.path());
      }
    } else if (fs::is_regular_file(p)) {
      reports.emplace_back(p);
    } else {
      throw nv3d::Error(nv3d::ErrorCode::FileNotFound, p);
    }
  }
  std::sort(reports.begin(), reports.end());
  if (reports.empty()) throw nv3d::Error(nv3d::ErrorCode::UsageError, "no report.json found");

  std::vector<json> frames;
  for (const fs::path& p : reports) {
    std::ifstream in(p);
    try {
      frames.push_back(json::parse(in));
    } catch (const json::exception& e) {
      throw nv3d::Error(nv3d::ErrorCode::MalformedFrame, p.string() + ": " + e.what());
    }
  }
  json agg = nv3d::aggregate_reports(frames);

  std::vector<std::uint64_t> histogram;
  std::map<std::string, std::vector<std::uint64_t>> bin_counts;
  for (const json& f : frames) {
    if (f.at("status") != "ok") continue;
    const auto& h = f.at("normals").at("histogram");
    histogram.resize(std::max(histogram.size(), h.size()), 0);
    for (std::size_t i = 0; i < h.size(); ++i) histogram[i] += h[i].get<std::uint64_t>();
    for (const auto& [stage, stats] : f.at("bin_statistics").items()) {
      auto& counts = bin_counts[stage];
      const auto& bins = stats.at("bins");
      counts.resize(std::max(counts.size(), bins.size() + 1), 0);
      for (std::size_t i = 0; i < bins.size(); ++i) counts[i] += bins[i].at("count").get<std::uint64_t>();
      counts.back() += stats.at("far_count").get<std::uint64_t>();
    }
  }
  agg["density_histogram"] = histogram;
  json bins;
  for (const auto& [stage, counts] : bin_counts) bins[stage] = counts;
  agg["bin_counts_with_far"] = std::move(bins);

  if (!csv.empty()) {
    if (fs::exists(csv) && !force) throw nv3d::Error(nv3d::ErrorCode::UsageError, csv + " exists; pass --force to overwrite");
    std::ofstream out(csv, std::ios::trunc);
    out << "bin_lo,bin_hi,count\n";
    const double w = histogram.empty() ? 0.0 : 1.0 / static_cast<double>(histogram.size());
    for (std::size_t i = 0; i < histogram.size(); ++i) {
      out << static_cast<double>(i) * w << "," << static_cast<double>(i + 1) * w << "," << histogram[i] << "\n";
    }
    if (!out) throw nv3d::Error(nv3d::ErrorCode::IoError, "failed writing " + csv);
  }
  std::cout << agg.dump(2) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nv3d: voxelize LiDAR frames, estimate normals, sample, and check the fusion block"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run the pipeline on one frame or scene");
  ConfigOptions run_opts;
  run_opts.attach(*run);
  std::string run_input;
  std::optional<std::uint64_t> run_street;
  bool run_quiet = false;
  run->add_option("input", run_input, "KITTI .bin frame or scene description file");
  run->add_option("--street", run_street, "use the built-in street scene with this seed");
  run->add_flag("--quiet", run_quiet, "do not print the report");

  auto* batch = app.add_subcommand("batch", "run many frames and aggregate");
  ConfigOptions batch_opts;
  batch_opts.attach(*batch);
  std::string batch_dir;
  std::optional<std::size_t> batch_synthetic;
  std::uint64_t batch_scene_seed = 0;
  std::size_t batch_jobs = 1;
  bool batch_quiet = false;
  batch->add_option("--input-dir", batch_dir, "directory of KITTI .bin frames");
  batch->add_option("--synthetic", batch_synthetic, "number of street scenes to generate");
  batch->add_option("--scene-seed", batch_scene_seed, "seed of the first street scene");
  batch->add_option("--jobs,-j", batch_jobs, "worker threads")->check(CLI::PositiveNumber);
  batch->add_flag("--quiet", batch_quiet, "do not print the aggregate");

  auto* synth = app.add_subcommand("synth", "generate a synthetic frame");
  std::string synth_scene, synth_out, synth_ply;
  std::optional<std::uint64_t> synth_street;
  bool synth_force = false;
  synth->add_option("--scene", synth_scene, "scene description file")->check(CLI::ExistingFile);
  synth->add_option("--street", synth_street, "street scene seed (default 0)");
  synth->add_option("--out", synth_out, "output KITTI .bin path");
  synth->add_option("--ply", synth_ply, "also write a PLY");
  synth->add_flag("--force", synth_force, "overwrite existing outputs");
  synth->get_option("--scene")->excludes("--street");

  auto* fusion = app.add_subcommand("fusion-check", "gradient-check the fusion block on toy configurations");
  std::uint64_t fusion_seed = 0;
  std::size_t fusion_trials = 20;
  double fusion_tol = 1e-4;
  fusion->add_option("--seed", fusion_seed, "first trial seed");
  fusion->add_option("--trials", fusion_trials, "number of trials");
  fusion->add_option("--tolerance", fusion_tol, "maximum allowed relative error");

  auto* stats = app.add_subcommand("stats", "summarise report.json files or output directories");
  std::vector<std::string> stats_paths;
  std::string stats_csv;
  bool stats_force = false;
  stats->add_option("paths", stats_paths, "report files or directories")->required();
  stats->add_option("--csv", stats_csv, "write the summed density histogram as CSV");
  stats->add_flag("--force", stats_force, "overwrite an existing CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInputError;
  }

  try {
    if (*run) return cmd_run(run_opts, run_input, run_street, run_quiet);
    if (*batch) {
      if (batch_dir.empty() && !batch_synthetic) {
        throw nv3d::Error(nv3d::ErrorCode::UsageError, "batch needs --input-dir or --synthetic");
      }
      return cmd_batch(batch_opts, batch_dir, batch_synthetic, batch_scene_seed, batch_jobs, batch_quiet);
    }
    if (*synth) return cmd_synth(synth_scene, synth_street, synth_out, synth_ply, synth_force);
    if (*fusion) return cmd_fusion_check(fusion_seed, fusion_trials, fusion_tol);
    if (*stats) return cmd_stats(stats_paths, stats_csv, stats_force);
  } catch (const nv3d::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPipelineError;
  }
  return kOk;
}
