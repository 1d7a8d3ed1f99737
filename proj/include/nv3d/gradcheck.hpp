#ifndef NV3D_GRADCHECK_HPP
#define NV3D_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "nv3d/fusion.hpp"
#include "nv3d/rng.hpp"

namespace nv3d::fusion {

/// Relative error with the denominator floored at `floor`, so entries whose
/// true gradient is ~0 are compared on an absolute scale.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t entries = 0;
  std::string worst;  // description of the worst entry
  /// Entries whose +/- step straddles a rectifier kink; the loss is not
  /// differentiable across that interval, so they are not compared.
  std::size_t kinks_skipped = 0;
  double max_softmax_row_error = 0.0;
};

namespace detail {

struct Probe {
  double loss = 0.0;
  std::vector<std::uint8_t> active;  // rectifier on/off pattern over all rows
};

inline void append_pattern(const MlpTrace& t, std::vector<std::uint8_t>& out) {
  for (std::size_t l = 0; l + 1 < t.pre.size(); ++l) {
    for (double z : t.pre[l]) out.push_back(z > 0.0 ? 1 : 0);
  }
}

inline Probe probe_loss(const FusionBatch& b, const FusionParams& p, const Matrix& upstream) {
  Probe r;
  for (std::size_t i = 0; i < b.voxel_features.rows; ++i) {
    const auto t = fusion_forward_row(b.voxel_features.row(i), b.normal_features.row(i), p);
    for (std::size_t c = 0; c < t.output().size(); ++c) r.loss += upstream(i, c) * t.output()[c];
    append_pattern(t.q, r.active);
    append_pattern(t.k, r.active);
    append_pattern(t.v, r.active);
    append_pattern(t.dec, r.active);
  }
  return r;
}

}  // namespace detail

/// Compare fusion_backward against central differences of the forward pass
/// for every parameter and every input entry.
inline GradCheckResult gradient_check(const FusionBatch& batch, const FusionParams& params, const Matrix& upstream,
                                      double step = 1e-5) {
  GradCheckResult r;
  FusionGradients g = fusion_backward(batch, params, upstream);

  auto record = [&r, step](const detail::Probe& up, const detail::Probe& down, double analytic,
                           const std::string& what) {
    if (up.active != down.active) {
      ++r.kinks_skipped;
      return;
    }
    const double numeric = (up.loss - down.loss) / (2.0 * step);
    const double e = relative_error(analytic, numeric);
    ++r.entries;
    if (e > r.max_relative_error) {
      r.max_relative_error = e;
      r.worst = what + " analytic=" + std::to_string(analytic) + " numeric=" + std::to_string(numeric);
    }
  };

  FusionParams probe = params;
  std::vector<double*> slots;
  for_each_parameter(probe, [&slots](double& x) { slots.push_back(&x); });
  std::vector<double> analytic;
  for_each_parameter(g.params, [&analytic](double& x) { analytic.push_back(x); });
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const double saved = *slots[i];
    *slots[i] = saved + step;
    const auto up = detail::probe_loss(batch, probe, upstream);
    *slots[i] = saved - step;
    const auto down = detail::probe_loss(batch, probe, upstream);
    *slots[i] = saved;
    record(up, down, analytic[i], "param[" + std::to_string(i) + "]");
  }

  FusionBatch b = batch;
  auto check_inputs = [&](Matrix& m, const Matrix& grad, const std::string& name) {
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      const double saved = m.data[i];
      m.data[i] = saved + step;
      const auto up = detail::probe_loss(b, params, upstream);
      m.data[i] = saved - step;
      const auto down = detail::probe_loss(b, params, upstream);
      m.data[i] = saved;
      record(up, down, grad.data[i], name + "[" + std::to_string(i) + "]");
    }
  };
  check_inputs(b.voxel_features, g.voxel_features, "voxel_features");
  check_inputs(b.normal_features, g.normal_features, "normal_features");

  const ChannelSoftmaxScore score;
  for (std::size_t i = 0; i < batch.voxel_features.rows; ++i) {
    const auto t = fusion_forward_row(batch.voxel_features.row(i), batch.normal_features.row(i), params, score);
    double sum = 0.0;
    for (double s : t.scores) sum += s;
    r.max_softmax_row_error = std::max(r.max_softmax_row_error, std::abs(sum - 1.0));
  }
  return r;
}

/// Random batch of n rows with entries uniform in [-1, 1].
inline FusionBatch random_batch(std::size_t n, std::size_t width, rng::Stream& stream) {
  FusionBatch b{Matrix(n, width), Matrix(n, width)};
  for (double& x : b.voxel_features.data) x = stream.uniform(-1.0, 1.0);
  for (double& x : b.normal_features.data) x = stream.uniform(-1.0, 1.0);
  return b;
}

/// One seeded toy trial: N=3 rows, 4->8->8 encoders, 8->4 decoder.
inline GradCheckResult toy_gradient_check(std::uint64_t seed) {
  const FusionParams params = init_params(FusionWidths::toy(), seed);
  rng::Stream stream(seed, rng::Tag::batch, 17);
  const FusionBatch batch = random_batch(3, 4, stream);
  Matrix upstream(3, 4);
  for (double& x : upstream.data) x = stream.uniform(-1.0, 1.0);
  return gradient_check(batch, params, upstream);
}

}  // namespace nv3d::fusion

#endif  // NV3D_GRADCHECK_HPP
