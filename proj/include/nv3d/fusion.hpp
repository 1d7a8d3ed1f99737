#ifndef NV3D_FUSION_HPP
#define NV3D_FUSION_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nv3d/error.hpp"
#include "nv3d/rng.hpp"

namespace nv3d::fusion {

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

struct DenseLayer {
  Matrix weight;  // out x in
  std::vector<double> bias;

  std::size_t in() const { return weight.cols; }
  std::size_t out() const { return weight.rows; }

  bool operator==(const DenseLayer&) const = default;
};

/// Affine layers with a rectifier after every layer except the last.
struct MlpParams {
  std::vector<DenseLayer> layers;

  static MlpParams zeros(std::span<const std::size_t> widths) {
    if (widths.size() < 2) throw Error(ErrorCode::DimensionMismatch, "an MLP needs at least two widths");
    MlpParams p;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      p.layers.push_back({Matrix(widths[l + 1], widths[l]), std::vector<double>(widths[l + 1], 0.0)});
    }
    return p;
  }

  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w;
    if (layers.empty()) return w;
    w.push_back(layers.front().in());
    for (const DenseLayer& l : layers) w.push_back(l.out());
    return w;
  }

  std::size_t in_width() const { return layers.front().in(); }
  std::size_t out_width() const { return layers.back().out(); }

  void validate() const {
    if (layers.empty()) throw Error(ErrorCode::DimensionMismatch, "MLP has no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const DenseLayer& d = layers[l];
      if (d.weight.data.size() != d.weight.rows * d.weight.cols || d.bias.size() != d.out()) {
        throw Error(ErrorCode::DimensionMismatch, "layer " + std::to_string(l) + " has inconsistent shapes");
      }
      if (l > 0 && layers[l - 1].out() != d.in()) {
        throw Error(ErrorCode::DimensionMismatch, "layer " + std::to_string(l) + " does not chain");
      }
    }
  }

  bool operator==(const MlpParams&) const = default;
};

/// Widths of the encoders (shared shape for query, key and value) and the
/// decoder.
struct FusionWidths {
  std::vector<std::size_t> encoder{4, 16, 32, 32};
  std::vector<std::size_t> decoder{32, 32, 16, 4};

  /// Small configuration used for gradient checking.
  static FusionWidths toy() { return {{4, 8, 8}, {8, 4}}; }
};

/// Query encoder reads normal features; key and value encoders read voxel
/// features.
struct FusionParams {
  MlpParams enc_q;
  MlpParams enc_k;
  MlpParams enc_v;
  MlpParams dec;

  std::size_t channels() const { return enc_q.out_width(); }

  void validate() const {
    enc_q.validate();
    enc_k.validate();
    enc_v.validate();
    dec.validate();
    const std::size_t c = enc_q.out_width();
    if (enc_k.out_width() != c || enc_v.out_width() != c || dec.in_width() != c) {
      throw Error(ErrorCode::DimensionMismatch, "encoder outputs and decoder input must share one channel width");
    }
    if (enc_k.in_width() != enc_v.in_width()) {
      throw Error(ErrorCode::DimensionMismatch, "key and value encoders must read the same feature width");
    }
  }

  template <typename Fn>
  void for_each_mlp(Fn&& fn) {
    fn(enc_q);
    fn(enc_k);
    fn(enc_v);
    fn(dec);
  }

  bool operator==(const FusionParams&) const = default;
};

/// Visit every scalar parameter in a fixed order: per MLP (q, k, v, dec),
/// per layer, row-major weights then bias.
template <typename Fn>
void for_each_parameter(FusionParams& p, Fn&& fn) {
  p.for_each_mlp([&fn](MlpParams& m) {
    for (DenseLayer& l : m.layers) {
      for (double& w : l.weight.data) fn(w);
      for (double& b : l.bias) fn(b);
    }
  });
}

struct FusionBatch {
  Matrix voxel_features;   // N x 4 (x, y, z, r)
  Matrix normal_features;  // N x 4 (nx, ny, nz, d)
};

// ---------------------------------------------------------------------------
// MLP

struct MlpTrace {
  std::vector<std::vector<double>> inputs;  // input to each layer
  std::vector<std::vector<double>> pre;     // affine output of each layer
  std::vector<double> output;
};

inline MlpTrace mlp_forward_traced(std::span<const double> x, const MlpParams& p) {
  if (p.layers.empty() || x.size() != p.in_width()) {
    throw Error(ErrorCode::DimensionMismatch, "MLP input width " + std::to_string(x.size()) + " does not match " +
                                                  (p.layers.empty() ? std::string("empty MLP")
                                                                    : std::to_string(p.in_width())));
  }
  MlpTrace t;
  std::vector<double> act(x.begin(), x.end());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const DenseLayer& layer = p.layers[l];
    if (layer.in() != act.size()) throw Error(ErrorCode::DimensionMismatch, "MLP layers do not chain");
    std::vector<double> z(layer.out());
    for (std::size_t o = 0; o < layer.out(); ++o) {
      double s = layer.bias[o];
      const auto w = layer.weight.row(o);
      for (std::size_t i = 0; i < act.size(); ++i) s += w[i] * act[i];
      z[o] = s;
    }
    t.inputs.push_back(act);
    t.pre.push_back(z);
    const bool last = l + 1 == p.layers.size();
    if (!last) {
      for (double& v : z) v = std::max(v, 0.0);
    }
    act = std::move(z);
  }
  t.output = std::move(act);
  return t;
}

inline std::vector<double> mlp_forward(std::span<const double> x, const MlpParams& p) {
  return mlp_forward_traced(x, p).output;
}

/// Backpropagate `grad_out` through a traced forward pass. Parameter
/// gradients are accumulated into `grads` (same shapes as `p`); returns the
/// gradient with respect to the MLP input.
inline std::vector<double> mlp_backward(const MlpTrace& t, const MlpParams& p, std::span<const double> grad_out,
                                        MlpParams& grads) {
  std::vector<double> g(grad_out.begin(), grad_out.end());
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const DenseLayer& layer = p.layers[l];
    DenseLayer& gl = grads.layers[l];
    const bool last = l + 1 == p.layers.size();
    if (!last) {
      for (std::size_t o = 0; o < g.size(); ++o) {
        if (!(t.pre[l][o] > 0.0)) g[o] = 0.0;
      }
    }
    const auto& in = t.inputs[l];
    std::vector<double> g_in(layer.in(), 0.0);
    for (std::size_t o = 0; o < layer.out(); ++o) {
      gl.bias[o] += g[o];
      const auto w = layer.weight.row(o);
      auto gw = gl.weight.row(o);
      for (std::size_t i = 0; i < layer.in(); ++i) {
        gw[i] += g[o] * in[i];
        g_in[i] += g[o] * w[i];
      }
    }
    g = std::move(g_in);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Score functions

/// Numerically stable softmax (max-subtracted).
inline std::vector<double> softmax(std::span<const double> z) {
  std::vector<double> s(z.size());
  if (z.empty()) return s;
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    s[i] = std::exp(z[i] - m);
    sum += s[i];
  }
  for (double& v : s) v /= sum;
  return s;
}

/// d softmax_i / d z_j = s_i (delta_ij - s_j).
inline Matrix softmax_jacobian(std::span<const double> s) {
  Matrix j(s.size(), s.size());
  for (std::size_t a = 0; a < s.size(); ++a) {
    for (std::size_t b = 0; b < s.size(); ++b) j(a, b) = s[a] * ((a == b ? 1.0 : 0.0) - s[b]);
  }
  return j;
}

/// Per-voxel channel softmax of (q * k) / sqrt(C).
struct ChannelSoftmaxScore {
  bool scale_by_sqrt_channels = true;

  double scale(std::size_t channels) const {
    return scale_by_sqrt_channels ? 1.0 / std::sqrt(static_cast<double>(channels)) : 1.0;
  }

  std::vector<double> logits(std::span<const double> q, std::span<const double> k) const {
    const double a = scale(q.size());
    std::vector<double> z(q.size());
    for (std::size_t c = 0; c < q.size(); ++c) z[c] = q[c] * k[c] * a;
    return z;
  }

  std::vector<double> forward(std::span<const double> q, std::span<const double> k) const {
    return softmax(logits(q, k));
  }

  /// Given dL/ds, accumulate dL/dq and dL/dk.
  void backward(std::span<const double> q, std::span<const double> k, std::span<const double> s,
                std::span<const double> grad_s, std::span<double> grad_q, std::span<double> grad_k) const {
    double inner = 0.0;
    for (std::size_t c = 0; c < s.size(); ++c) inner += grad_s[c] * s[c];
    const double a = scale(q.size());
    for (std::size_t c = 0; c < s.size(); ++c) {
      const double gz = s[c] * (grad_s[c] - inner);
      grad_q[c] += gz * k[c] * a;
      grad_k[c] += gz * q[c] * a;
    }
  }
};

// ---------------------------------------------------------------------------
// Fusion block

struct FusionRowTrace {
  MlpTrace q, k, v, dec;
  std::vector<double> logits;
  std::vector<double> scores;
  std::vector<double> fused;

  const std::vector<double>& output() const { return dec.output; }
};

namespace detail {

inline void check_batch(const FusionBatch& b, const FusionParams& p) {
  p.validate();
  if (b.voxel_features.rows != b.normal_features.rows) {
    throw Error(ErrorCode::DimensionMismatch, "voxel and normal feature row counts differ");
  }
  if (b.voxel_features.cols != p.enc_k.in_width() || b.normal_features.cols != p.enc_q.in_width()) {
    throw Error(ErrorCode::DimensionMismatch, "feature widths do not match encoder inputs");
  }
  for (const double x : b.voxel_features.data) {
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFiniteInput, "voxel features contain a non-finite entry");
  }
  for (const double x : b.normal_features.data) {
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFiniteInput, "normal features contain a non-finite entry");
  }
}

}  // namespace detail

template <typename Score = ChannelSoftmaxScore>
FusionRowTrace fusion_forward_row(std::span<const double> voxel, std::span<const double> normal,
                                  const FusionParams& p, const Score& score = {}) {
  FusionRowTrace t;
  t.q = mlp_forward_traced(normal, p.enc_q);
  t.k = mlp_forward_traced(voxel, p.enc_k);
  t.v = mlp_forward_traced(voxel, p.enc_v);
  t.logits = score.logits(t.q.output, t.k.output);
  t.scores = score.forward(t.q.output, t.k.output);
  t.fused.resize(t.scores.size());
  for (std::size_t c = 0; c < t.scores.size(); ++c) t.fused[c] = t.scores[c] * t.v.output[c];
  t.dec = mlp_forward_traced(t.fused, p.dec);
  return t;
}

/// Element-wise attention fusion; rows are processed independently.
template <typename Score = ChannelSoftmaxScore>
Matrix fusion_forward(const FusionBatch& batch, const FusionParams& p, const Score& score = {}) {
  detail::check_batch(batch, p);
  const std::size_t n = batch.voxel_features.rows;
  Matrix out(n, p.dec.out_width());
  for (std::size_t i = 0; i < n; ++i) {
    const auto t = fusion_forward_row(batch.voxel_features.row(i), batch.normal_features.row(i), p, score);
    std::copy(t.output().begin(), t.output().end(), out.row(i).begin());
  }
  return out;
}

struct FusionGradients {
  FusionParams params;     // same shapes as the parameters
  Matrix voxel_features;   // dL/d voxel features
  Matrix normal_features;  // dL/d normal features
};

inline FusionParams zeros_like(const FusionParams& p) {
  return {MlpParams::zeros(p.enc_q.widths()), MlpParams::zeros(p.enc_k.widths()),
          MlpParams::zeros(p.enc_v.widths()), MlpParams::zeros(p.dec.widths())};
}

/// Gradients of L = sum(upstream * fusion_forward(batch)) with respect to
/// every parameter and input entry.
template <typename Score = ChannelSoftmaxScore>
FusionGradients fusion_backward(const FusionBatch& batch, const FusionParams& p, const Matrix& upstream,
                                const Score& score = {}) {
  detail::check_batch(batch, p);
  const std::size_t n = batch.voxel_features.rows;
  if (upstream.rows != n || upstream.cols != p.dec.out_width()) {
    throw Error(ErrorCode::DimensionMismatch, "upstream gradient shape does not match the output");
  }
  FusionGradients g{zeros_like(p), Matrix(n, batch.voxel_features.cols), Matrix(n, batch.normal_features.cols)};
  const std::size_t channels = p.channels();

  for (std::size_t i = 0; i < n; ++i) {
    const auto t = fusion_forward_row(batch.voxel_features.row(i), batch.normal_features.row(i), p, score);
    const auto g_fused = mlp_backward(t.dec, p.dec, upstream.row(i), g.params.dec);

    std::vector<double> g_s(channels), g_v(channels), g_q(channels, 0.0), g_k(channels, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
      g_s[c] = g_fused[c] * t.v.output[c];
      g_v[c] = g_fused[c] * t.scores[c];
    }
    score.backward(t.q.output, t.k.output, t.scores, g_s, g_q, g_k);

    const auto g_normal = mlp_backward(t.q, p.enc_q, g_q, g.params.enc_q);
    const auto g_vox_k = mlp_backward(t.k, p.enc_k, g_k, g.params.enc_k);
    const auto g_vox_v = mlp_backward(t.v, p.enc_v, g_v, g.params.enc_v);
    for (std::size_t c = 0; c < g_normal.size(); ++c) g.normal_features(i, c) = g_normal[c];
    for (std::size_t c = 0; c < g_vox_k.size(); ++c) g.voxel_features(i, c) = g_vox_k[c] + g_vox_v[c];
  }
  return g;
}

// ---------------------------------------------------------------------------
// Initialization

inline MlpParams init_mlp(std::span<const std::size_t> widths, rng::Stream& stream) {
  MlpParams p = MlpParams::zeros(widths);
  for (DenseLayer& l : p.layers) {
    const double limit = std::sqrt(6.0 / static_cast<double>(l.in() + l.out()));
    for (double& w : l.weight.data) w = stream.uniform(-limit, limit);
    for (double& b : l.bias) b = stream.uniform(-0.1, 0.1);
  }
  return p;
}

/// Glorot-uniform weights and small uniform biases, reproducible per seed.
inline FusionParams init_params(const FusionWidths& widths, std::uint64_t seed) {
  if (widths.encoder.size() < 2 || widths.decoder.size() < 2 || widths.encoder.back() != widths.decoder.front()) {
    throw Error(ErrorCode::DimensionMismatch, "encoder output width must equal decoder input width");
  }
  FusionParams p;
  rng::Stream sq(seed, rng::Tag::fusion_init, 0);
  rng::Stream sk(seed, rng::Tag::fusion_init, 1);
  rng::Stream sv(seed, rng::Tag::fusion_init, 2);
  rng::Stream sd(seed, rng::Tag::fusion_init, 3);
  p.enc_q = init_mlp(widths.encoder, sq);
  p.enc_k = init_mlp(widths.encoder, sk);
  p.enc_v = init_mlp(widths.encoder, sv);
  p.dec = init_mlp(widths.decoder, sd);
  return p;
}

}  // namespace nv3d::fusion

#endif  // NV3D_FUSION_HPP
