#ifndef NV3D_SAMPLING_HPP
#define NV3D_SAMPLING_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nv3d/error.hpp"
#include "nv3d/rng.hpp"
#include "nv3d/vec3.hpp"
#include "nv3d/voxelizer.hpp"

namespace nv3d {

/// Which stage removed a voxel.
enum class DropTag : std::uint8_t { none = 0, nd = 1, fov = 2, cap = 3, baseline = 4 };

inline std::string_view to_string(DropTag t) {
  switch (t) {
    case DropTag::none: return "none";
    case DropTag::nd: return "nd";
    case DropTag::fov: return "fov";
    case DropTag::cap: return "cap";
    case DropTag::baseline: return "baseline";
  }
  return "unknown";
}

/// Keep/drop decision per voxel, aligned with VoxelSet order.
/// Invariant: dropped_by[i] == none exactly when keep[i] != 0.
struct SampleMask {
  std::vector<std::uint8_t> keep;
  std::vector<DropTag> dropped_by;
  std::uint64_t seed = 0;

  static SampleMask keep_all(std::size_t n, std::uint64_t seed) {
    return {std::vector<std::uint8_t>(n, 1), std::vector<DropTag>(n, DropTag::none), seed};
  }

  std::size_t size() const { return keep.size(); }

  std::size_t kept() const {
    return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
  }

  void drop(std::size_t i, DropTag tag) {
    keep[i] = 0;
    dropped_by[i] = tag;
  }

  bool operator==(const SampleMask&) const = default;
};

enum class NdSelection { uniform, rank };

struct NdConfig {
  double density_threshold = 0.7;
  double drop_fraction = 0.5;
  /// uniform: random candidates; rank: highest densities first (ties by index).
  NdSelection selection = NdSelection::uniform;

  void validate() const {
    if (!(density_threshold > 0.0 && density_threshold < 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "nd density threshold must lie in (0, 1)");
    }
    if (!(drop_fraction >= 0.0 && drop_fraction <= 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "nd drop fraction must lie in [0, 1]");
    }
  }
};

enum class RangeMetric { bev, range3d };

struct FovConfig {
  std::size_t num_bins = 10;
  std::size_t base_quota = 500;
  double bin_width = 3.0;
  /// Voxels at or beyond this range are always kept; defaults to the outer
  /// edge of the last bin.
  std::optional<double> far_cutoff;
  RangeMetric metric = RangeMetric::bev;

  double cutoff() const { return far_cutoff.value_or(static_cast<double>(num_bins) * bin_width); }

  std::size_t quota(std::size_t bin) const { return base_quota * (2 * bin - 1); }

  void validate() const {
    if (num_bins == 0) throw Error(ErrorCode::InvalidConfig, "fov num_bins must be positive");
    if (!(bin_width > 0.0)) throw Error(ErrorCode::InvalidConfig, "fov bin_width must be positive");
    const double c = cutoff();
    if (!(c > 0.0) || c > static_cast<double>(num_bins) * bin_width + 1e-12) {
      throw Error(ErrorCode::InvalidConfig, "fov far_cutoff must lie in (0, num_bins * bin_width]");
    }
  }
};

inline double radial_distance(const Voxel& v, RangeMetric metric) {
  const double xy = v.feature[0] * v.feature[0] + v.feature[1] * v.feature[1];
  return metric == RangeMetric::bev ? std::sqrt(xy) : std::sqrt(xy + v.feature[2] * v.feature[2]);
}

/// 1-based bin for a voxel, or nullopt when in the far field.
inline std::optional<std::size_t> bin_of(const Voxel& v, const FovConfig& cfg) {
  const double rho = radial_distance(v, cfg.metric);
  if (rho >= cfg.cutoff()) return std::nullopt;
  const auto b = static_cast<std::size_t>(std::floor(rho / cfg.bin_width));
  return std::min(b, cfg.num_bins - 1) + 1;
}

namespace detail {

inline bool eligible(const SampleMask* active, std::size_t i) { return active == nullptr || active->keep[i] != 0; }

inline void check_active(const SampleMask* active, std::size_t n) {
  if (active != nullptr && active->size() != n) {
    throw Error(ErrorCode::LengthMismatch, "active mask length differs from voxel count");
  }
}

/// Bin members in voxel order; index 0 is unused.
inline std::vector<std::vector<std::size_t>> bin_members(const VoxelSet& vs, const FovConfig& cfg,
                                                         const SampleMask* active) {
  std::vector<std::vector<std::size_t>> bins(cfg.num_bins + 1);
  for (std::size_t i = 0; i < vs.size(); ++i) {
    if (!eligible(active, i)) continue;
    if (const auto b = bin_of(vs.voxels[i], cfg)) bins[*b].push_back(i);
  }
  return bins;
}

template <typename QuotaFn>
SampleMask quota_bin_sample(const VoxelSet& vs, const FovConfig& cfg, QuotaFn quota, std::uint64_t seed,
                            rng::Tag tag, DropTag drop_tag, const SampleMask* active) {
  cfg.validate();
  check_active(active, vs.size());
  SampleMask mask = SampleMask::keep_all(vs.size(), seed);
  const auto bins = bin_members(vs, cfg, active);
  for (std::size_t b = 1; b <= cfg.num_bins; ++b) {
    const auto& members = bins[b];
    const std::size_t q = quota(b);
    if (members.size() <= q) continue;
    rng::Stream stream(seed, tag, b);
    const auto chosen = rng::choose_subset(members.size(), q, stream);
    std::vector<std::uint8_t> chosen_flag(members.size(), 0);
    for (std::size_t c : chosen) chosen_flag[c] = 1;
    for (std::size_t m = 0; m < members.size(); ++m) {
      if (!chosen_flag[m]) mask.drop(members[m], drop_tag);
    }
  }
  return mask;
}

}  // namespace detail

/// Normal-vector-density sampling. Among eligible voxels with density above
/// the threshold, exactly floor(drop_fraction * |candidates|) are dropped.
inline SampleMask nd_sample(const VoxelSet& vs, std::span<const double> densities, const NdConfig& cfg,
                            std::uint64_t seed, const SampleMask* active = nullptr) {
  cfg.validate();
  if (densities.size() != vs.size()) throw Error(ErrorCode::LengthMismatch, "densities do not align with voxels");
  detail::check_active(active, vs.size());

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < vs.size(); ++i) {
    if (detail::eligible(active, i) && densities[i] > cfg.density_threshold) candidates.push_back(i);
  }
  const auto n_drop =
      static_cast<std::size_t>(std::floor(cfg.drop_fraction * static_cast<double>(candidates.size())));

  SampleMask mask = SampleMask::keep_all(vs.size(), seed);
  if (cfg.selection == NdSelection::uniform) {
    rng::Stream stream(seed, rng::Tag::nd);
    for (std::size_t c : rng::choose_subset(candidates.size(), n_drop, stream)) {
      mask.drop(candidates[c], DropTag::nd);
    }
  } else {
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](std::size_t a, std::size_t b) { return densities[a] > densities[b]; });
    for (std::size_t j = 0; j < n_drop; ++j) mask.drop(candidates[j], DropTag::nd);
  }
  return mask;
}

/// FOV-aware bin sampling: bin n keeps at most base_quota * (2n - 1)
/// voxels, which holds areal density constant across bins.
inline SampleMask fov_bin_sample(const VoxelSet& vs, const FovConfig& cfg, std::uint64_t seed,
                                 const SampleMask* active = nullptr) {
  return detail::quota_bin_sample(
      vs, cfg, [&cfg](std::size_t b) { return cfg.quota(b); }, seed, rng::Tag::fov, DropTag::fov, active);
}

/// Bin sampling with the same quota in every bin (the non-FOV-aware baseline).
inline SampleMask general_bin_sample(const VoxelSet& vs, const FovConfig& binning, std::size_t per_bin_quota,
                                     std::uint64_t seed, const SampleMask* active = nullptr) {
  if (per_bin_quota == 0) throw Error(ErrorCode::InvalidArgument, "per-bin quota must be positive");
  return detail::quota_bin_sample(
      vs, binning, [per_bin_quota](std::size_t) { return per_bin_quota; }, seed, rng::Tag::general_bin,
      DropTag::baseline, active);
}

/// Uniform subset of round(keep_fraction * eligible) voxels.
inline SampleMask random_sample(const VoxelSet& vs, double keep_fraction, std::uint64_t seed,
                                const SampleMask* active = nullptr) {
  if (!(keep_fraction >= 0.0 && keep_fraction <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "keep fraction must lie in [0, 1]");
  }
  detail::check_active(active, vs.size());
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < vs.size(); ++i) {
    if (detail::eligible(active, i)) pool.push_back(i);
  }
  const auto keep_n = static_cast<std::size_t>(std::llround(keep_fraction * static_cast<double>(pool.size())));
  rng::Stream stream(seed, rng::Tag::random);
  const auto chosen = rng::choose_subset(pool.size(), keep_n, stream);
  std::vector<std::uint8_t> flag(pool.size(), 0);
  for (std::size_t c : chosen) flag[c] = 1;
  SampleMask mask = SampleMask::keep_all(vs.size(), seed);
  for (std::size_t j = 0; j < pool.size(); ++j) {
    if (!flag[j]) mask.drop(pool[j], DropTag::baseline);
  }
  return mask;
}

/// Exact greedy farthest-point sampling over voxel centroids, starting from
/// a seeded random eligible voxel. Ties go to the lowest index.
inline SampleMask fps_sample(const VoxelSet& vs, std::size_t keep_count, std::uint64_t seed,
                             const SampleMask* active = nullptr) {
  detail::check_active(active, vs.size());
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < vs.size(); ++i) {
    if (detail::eligible(active, i)) pool.push_back(i);
  }
  if (keep_count > pool.size()) throw Error(ErrorCode::InvalidArgument, "fps keep_count exceeds eligible voxels");

  SampleMask mask = SampleMask::keep_all(vs.size(), seed);
  std::vector<std::uint8_t> selected(pool.size(), 0);
  if (keep_count > 0) {
    std::vector<Vec3> pos(pool.size());
    for (std::size_t j = 0; j < pool.size(); ++j) pos[j] = vs.voxels[pool[j]].position();
    std::vector<double> nearest(pool.size(), std::numeric_limits<double>::infinity());
    rng::Stream stream(seed, rng::Tag::fps);
    auto current = static_cast<std::size_t>(stream.below(pool.size()));
    for (std::size_t picked = 0; picked < keep_count; ++picked) {
      selected[current] = 1;
      std::size_t next = 0;
      double far = -1.0;
      for (std::size_t j = 0; j < pool.size(); ++j) {
        if (selected[j]) continue;
        nearest[j] = std::min(nearest[j], squared_distance(pos[j], pos[current]));
        if (nearest[j] > far) {
          far = nearest[j];
          next = j;
        }
      }
      current = next;
    }
  }
  for (std::size_t j = 0; j < pool.size(); ++j) {
    if (!selected[j]) mask.drop(pool[j], DropTag::baseline);
  }
  return mask;
}

/// Conjunction of stage masks; each dropped voxel keeps the tag of the first
/// stage that dropped it.
inline SampleMask compose(std::span<const SampleMask> masks) {
  if (masks.empty()) throw Error(ErrorCode::InvalidArgument, "compose needs at least one mask");
  SampleMask out = masks.front();
  for (std::size_t m = 1; m < masks.size(); ++m) {
    const SampleMask& next = masks[m];
    if (next.size() != out.size()) throw Error(ErrorCode::LengthMismatch, "masks differ in length");
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (out.keep[i] && !next.keep[i]) out.drop(i, next.dropped_by[i]);
    }
  }
  return out;
}

struct BinStat {
  std::size_t bin = 0;  // 1-based
  double inner = 0.0;
  double outer = 0.0;
  std::size_t count = 0;
  double area = 0.0;
  double density = 0.0;  // voxels per square meter of annulus
};

struct BinStatistics {
  std::vector<BinStat> bins;
  std::size_t far_count = 0;
  std::size_t total = 0;
};

/// Per-bin voxel counts and areal densities over full annuli, plus the
/// far-field bucket. Only voxels kept by `mask` are counted when given.
inline BinStatistics bin_statistics(const VoxelSet& vs, const SampleMask* mask, const FovConfig& cfg) {
  cfg.validate();
  detail::check_active(mask, vs.size());
  BinStatistics stats;
  stats.bins.resize(cfg.num_bins);
  for (std::size_t b = 1; b <= cfg.num_bins; ++b) {
    BinStat& s = stats.bins[b - 1];
    s.bin = b;
    s.inner = static_cast<double>(b - 1) * cfg.bin_width;
    s.outer = static_cast<double>(b) * cfg.bin_width;
    s.area = std::numbers::pi * s.outer * s.outer - std::numbers::pi * s.inner * s.inner;
  }
  for (std::size_t i = 0; i < vs.size(); ++i) {
    if (!detail::eligible(mask, i)) continue;
    ++stats.total;
    if (const auto b = bin_of(vs.voxels[i], cfg)) {
      ++stats.bins[*b - 1].count;
    } else {
      ++stats.far_count;
    }
  }
  for (BinStat& s : stats.bins) s.density = static_cast<double>(s.count) / s.area;
  return stats;
}

}  // namespace nv3d

#endif  // NV3D_SAMPLING_HPP
