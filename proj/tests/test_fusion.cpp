#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "nv3d/fusion.hpp"
#include "nv3d/fusion_io.hpp"
#include "nv3d/gradcheck.hpp"
#include "test_util.hpp"

using namespace nv3d;
using namespace nv3d::fusion;

namespace {

DenseLayer layer(std::size_t out, std::size_t in, std::vector<double> w, std::vector<double> b) {
  DenseLayer l;
  l.weight = Matrix(out, in);
  l.weight.data = std::move(w);
  l.bias = std::move(b);
  return l;
}

MlpParams mlp(std::vector<DenseLayer> layers) { return MlpParams{std::move(layers)}; }

/// Hand-set N=1, C=2 block: every intermediate has a closed form.
FusionParams hand_params() {
  FusionParams p;
  p.enc_q = mlp({layer(2, 4, {1, 0, 0, 0, 0, 0, 0, 2}, {0, 0})});
  p.enc_k = mlp({layer(2, 4, {1, 0, 0, 0, 0, 1, 0, 0}, {0, 0.5})});
  p.enc_v = mlp({layer(2, 4, {0, 1, 0, 0, 1, 0, 0, 0}, {1, 0})});
  p.dec = mlp({layer(4, 2, {1, 0, 0, 1, 1, 1, 1, -1}, {0, 0, 0, 0.25})});
  return p;
}

FusionBatch one_row(std::vector<double> voxel, std::vector<double> normal) {
  FusionBatch b{Matrix(1, 4), Matrix(1, 4)};
  b.voxel_features.data = std::move(voxel);
  b.normal_features.data = std::move(normal);
  return b;
}

}  // namespace

TEST(Mlp, IdentityChainPassesInputThrough) {
  const MlpParams p = mlp({layer(2, 2, {1, 0, 0, 1}, {0, 0})});
  const std::vector<double> x{-3.5, 2.25};
  EXPECT_EQ(mlp_forward(x, p), x);
  // Two identity layers: the hidden rectifier passes positive inputs untouched.
  const MlpParams two = mlp({layer(2, 2, {1, 0, 0, 1}, {0, 0}), layer(2, 2, {1, 0, 0, 1}, {0, 0})});
  const std::vector<double> pos{3.5, 2.25};
  EXPECT_EQ(mlp_forward(pos, two), pos);
  EXPECT_EQ(mlp_forward(x, two), (std::vector<double>{0.0, 2.25}));
}

TEST(Mlp, SingleAffineLayerGivesSeven) {
  const MlpParams p = mlp({layer(1, 2, {1, 1}, {0})});
  EXPECT_EQ(mlp_forward(std::vector<double>{3, 4}, p), (std::vector<double>{7}));
  // No rectifier on the last layer.
  EXPECT_EQ(mlp_forward(std::vector<double>{-3, -4}, p), (std::vector<double>{-7}));
}

TEST(Mlp, DimensionMismatch) {
  const MlpParams p = mlp({layer(1, 2, {1, 1}, {0})});
  test::expect_error(ErrorCode::DimensionMismatch, [&] { mlp_forward(std::vector<double>{1, 2, 3}, p); });
  const MlpParams broken = mlp({layer(3, 2, std::vector<double>(6, 0), {0, 0, 0}), layer(1, 2, {1, 1}, {0})});
  test::expect_error(ErrorCode::DimensionMismatch, [&] { broken.validate(); });
}

TEST(Mlp, JacobianMatchesFirstOrderChange) {
  rng::Stream s(3, rng::Tag::fusion_init, 90);
  const std::vector<std::size_t> widths{4, 16, 32, 32};
  const MlpParams p = init_mlp(widths, s);
  std::vector<double> x(4);
  for (double& v : x) v = s.uniform(-1, 1);
  const auto t = mlp_forward_traced(x, p);
  std::vector<double> dir(4);
  for (double& v : dir) v = s.uniform(-1, 1);
  // J * dir via backward: row c of J is the input gradient of output c.
  std::vector<double> jd(32, 0.0);
  for (std::size_t c = 0; c < 32; ++c) {
    std::vector<double> e(32, 0.0);
    e[c] = 1.0;
    MlpParams sink = MlpParams::zeros(widths);
    const auto row = mlp_backward(t, p, e, sink);
    for (std::size_t i = 0; i < 4; ++i) jd[c] += row[i] * dir[i];
  }
  for (double eps : {1e-4, 1e-5, 1e-6}) {
    std::vector<double> xp = x;
    for (std::size_t i = 0; i < 4; ++i) xp[i] += eps * dir[i];
    const auto yp = mlp_forward(xp, p);
    for (std::size_t c = 0; c < 32; ++c) EXPECT_NEAR(yp[c] - t.output[c], eps * jd[c], 50 * eps * eps + 1e-12);
  }
}

TEST(Softmax, StableForLargeInputs) {
  const std::vector<double> z{1e4, -1e4, 9999.0, 0.0};
  const auto s = softmax(z);
  double sum = 0.0;
  for (double v : s) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
    sum += v;
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_NEAR(s[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(Softmax, JacobianRowsSumToZero) {
  const auto s = softmax(std::vector<double>{0.3, -1.2, 2.0, 0.7, 0.0});
  const Matrix j = softmax_jacobian(s);
  for (std::size_t r = 0; r < j.rows; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < j.cols; ++c) sum += j(r, c);
    EXPECT_NEAR(sum, 0.0, 1e-15);
    EXPECT_NEAR(j(r, r), s[r] * (1 - s[r]), 1e-15);
  }
}

TEST(FusionForward, HandComputedToy) {
  const FusionParams p = hand_params();
  const FusionBatch b = one_row({2, 1, 0, 0.3}, {1, 0, 0, 0.5});
  const auto t = fusion_forward_row(b.voxel_features.row(0), b.normal_features.row(0), p);

  EXPECT_EQ(t.q.output, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(t.k.output, (std::vector<double>{2.0, 1.5}));
  EXPECT_EQ(t.v.output, (std::vector<double>{2.0, 2.0}));
  const double r2 = std::sqrt(2.0);
  EXPECT_DOUBLE_EQ(t.logits[0], 2.0 / r2);
  EXPECT_DOUBLE_EQ(t.logits[1], 1.5 / r2);
  const double s0 = 1.0 / (1.0 + std::exp(-0.5 / r2));  // 0.5874...
  EXPECT_NEAR(t.scores[0], s0, 1e-15);
  EXPECT_NEAR(t.scores[1], 1.0 - s0, 1e-15);
  EXPECT_NEAR(t.fused[0], 2 * s0, 1e-15);
  EXPECT_NEAR(t.fused[1], 2 * (1 - s0), 1e-15);
  const Matrix out = fusion_forward(b, p);
  ASSERT_EQ(out.rows, 1u);
  ASSERT_EQ(out.cols, 4u);
  EXPECT_NEAR(out(0, 0), 2 * s0, 1e-15);
  EXPECT_NEAR(out(0, 1), 2 * (1 - s0), 1e-15);
  EXPECT_NEAR(out(0, 2), 2.0, 1e-15);
  EXPECT_NEAR(out(0, 3), 4 * s0 - 2 + 0.25, 1e-15);
  EXPECT_NEAR(s0, 0.58748, 1e-5);
}

TEST(FusionForward, ConstantLogitsGiveUniformScores) {
  FusionParams p = init_params(FusionWidths{}, 1);
  // Zero the last layer of the q and k encoders and set biases 2 and 3.
  for (MlpParams* m : {&p.enc_q, &p.enc_k}) {
    auto& last = m->layers.back();
    std::fill(last.weight.data.begin(), last.weight.data.end(), 0.0);
  }
  std::fill(p.enc_q.layers.back().bias.begin(), p.enc_q.layers.back().bias.end(), 2.0);
  std::fill(p.enc_k.layers.back().bias.begin(), p.enc_k.layers.back().bias.end(), 3.0);
  const FusionBatch b = one_row({5, 1, -1, 0.2}, {0, 0, 1, 0.9});
  const auto t = fusion_forward_row(b.voxel_features.row(0), b.normal_features.row(0), p);
  for (double s : t.scores) EXPECT_EQ(s, 1.0 / 32.0);
}

TEST(FusionForward, RowsAreIndependent) {
  const FusionParams p = init_params(FusionWidths{}, 2);
  rng::Stream s(2, rng::Tag::batch, 1);
  FusionBatch b = random_batch(6, 4, s);
  // rows 1 and 4 identical
  for (std::size_t c = 0; c < 4; ++c) {
    b.voxel_features(4, c) = b.voxel_features(1, c);
    b.normal_features(4, c) = b.normal_features(1, c);
  }
  const Matrix out = fusion_forward(b, p);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out(1, c), out(4, c));

  const std::vector<std::size_t> perm{3, 0, 5, 1, 2, 4};
  FusionBatch pb{Matrix(6, 4), Matrix(6, 4)};
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      pb.voxel_features(i, c) = b.voxel_features(perm[i], c);
      pb.normal_features(i, c) = b.normal_features(perm[i], c);
    }
  }
  const Matrix pout = fusion_forward(pb, p);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(pout(i, c), out(perm[i], c));
  }
}

TEST(FusionForward, ScoresArePositiveAndSumToOne) {
  const FusionParams p = init_params(FusionWidths{}, 3);
  rng::Stream s(3, rng::Tag::batch, 2);
  const FusionBatch b = random_batch(50, 4, s);
  for (std::size_t i = 0; i < 50; ++i) {
    const auto t = fusion_forward_row(b.voxel_features.row(i), b.normal_features.row(i), p);
    double sum = 0.0;
    for (double x : t.scores) {
      EXPECT_GT(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(FusionForward, BadBatches) {
  const FusionParams p = init_params(FusionWidths{}, 4);
  FusionBatch rows{Matrix(2, 4), Matrix(3, 4)};
  test::expect_error(ErrorCode::DimensionMismatch, [&] { fusion_forward(rows, p); });
  FusionBatch width{Matrix(2, 3), Matrix(2, 4)};
  test::expect_error(ErrorCode::DimensionMismatch, [&] { fusion_forward(width, p); });
  FusionBatch nan{Matrix(1, 4), Matrix(1, 4)};
  nan.normal_features(0, 2) = std::numeric_limits<double>::quiet_NaN();
  test::expect_error(ErrorCode::NonFiniteInput, [&] { fusion_forward(nan, p); });
}

TEST(FusionBackward, ZeroUpstreamGivesZeroGradients) {
  const FusionParams p = init_params(FusionWidths{}, 5);
  rng::Stream s(5, rng::Tag::batch, 3);
  const FusionBatch b = random_batch(4, 4, s);
  FusionGradients g = fusion_backward(b, p, Matrix(4, 4));
  for_each_parameter(g.params, [](double& x) { EXPECT_EQ(x, 0.0); });
  for (double x : g.voxel_features.data) EXPECT_EQ(x, 0.0);
  for (double x : g.normal_features.data) EXPECT_EQ(x, 0.0);
  test::expect_error(ErrorCode::DimensionMismatch, [&] { fusion_backward(b, p, Matrix(4, 3)); });
}

TEST(FusionBackward, HandToyGradientOfScores) {
  // dL/dv for L = out[2] = fused0 + fused1 is s itself.
  const FusionParams p = hand_params();
  const FusionBatch b = one_row({2, 1, 0, 0.3}, {1, 0, 0, 0.5});
  Matrix up(1, 4);
  up(0, 2) = 1.0;
  const FusionGradients g = fusion_backward(b, p, up);
  const double s0 = 1.0 / (1.0 + std::exp(-0.5 / std::sqrt(2.0)));
  // v = (x1 + 1, x0): dL/dx1 = s0 from v0; dL/dx0 = s1 from v1 plus the k0 path.
  // k0 = x0, logits z0 = q0 k0 / sqrt2; dL/dz0 = s0 (v0 - (s0 v0 + s1 v1)) = 0 since v0 = v1.
  EXPECT_NEAR(g.voxel_features(0, 1), s0, 1e-15);
  EXPECT_NEAR(g.voxel_features(0, 0), 1.0 - s0, 1e-15);
  EXPECT_NEAR(g.normal_features(0, 0), 0.0, 1e-15);
}

TEST(GradientCheck, ToyConfigurationsPass) {
  std::size_t kinks = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = toy_gradient_check(seed);
    EXPECT_LT(r.max_relative_error, 1e-4) << "seed " << seed << " " << r.worst;
    EXPECT_LE(r.max_softmax_row_error, 1e-9);
    // 372 parameters plus 24 input entries
    EXPECT_EQ(r.entries + r.kinks_skipped, 396u);
    kinks += r.kinks_skipped;
  }
  EXPECT_LE(kinks, 5u);
}

TEST(GradientCheck, DefaultWidthsPass) {
  const FusionParams p = init_params(FusionWidths{}, 11);
  rng::Stream s(11, rng::Tag::batch, 4);
  const FusionBatch b = random_batch(2, 4, s);
  Matrix up(2, 4);
  for (double& x : up.data) x = s.uniform(-1, 1);
  const auto r = gradient_check(b, p, up);
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(GradientCheck, RelativeErrorFloor) {
  EXPECT_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_NEAR(relative_error(2.0, 1.0), 0.5, 1e-15);
  EXPECT_NEAR(relative_error(1e-9, 0.0), 1e-3, 1e-15);
}

TEST(GradientCheck, DetectsAWrongGradient) {
  // A block whose backward disagrees with its forward must fail the check.
  struct WrongScore : ChannelSoftmaxScore {
    void backward(std::span<const double> q, std::span<const double> k, std::span<const double> s,
                  std::span<const double> grad_s, std::span<double> grad_q, std::span<double> grad_k) const {
      ChannelSoftmaxScore::backward(q, k, s, grad_s, grad_q, grad_k);
      for (double& g : grad_q) g *= 1.01;
    }
  };
  const FusionParams p = init_params(FusionWidths::toy(), 1);
  rng::Stream s(1, rng::Tag::batch, 17);
  const FusionBatch b = random_batch(3, 4, s);
  Matrix up(3, 4);
  for (double& x : up.data) x = s.uniform(-1, 1);
  auto loss = [&](const FusionBatch& x) {
    const Matrix out = fusion_forward(x, p);
    double l = 0.0;
    for (std::size_t i = 0; i < out.data.size(); ++i) l += out.data[i] * up.data[i];
    return l;
  };
  const double h = 1e-5;
  FusionBatch plus = b, minus = b;
  plus.normal_features(0, 0) += h;
  minus.normal_features(0, 0) -= h;
  const double numeric = (loss(plus) - loss(minus)) / (2 * h);
  const double good = fusion_backward(b, p, up).normal_features(0, 0);
  const double bad = fusion_backward(b, p, up, WrongScore{}).normal_features(0, 0);
  EXPECT_LT(relative_error(good, numeric), 1e-4);
  EXPECT_GT(relative_error(bad, numeric), 1e-4);
}

TEST(InitParams, DeterministicAndSeedSensitive) {
  const FusionParams a = init_params(FusionWidths{}, 7);
  const FusionParams b = init_params(FusionWidths{}, 7);
  const FusionParams c = init_params(FusionWidths{}, 8);
  EXPECT_EQ(encode_params(a), encode_params(b));
  EXPECT_NE(a, c);
  EXPECT_EQ(a.channels(), 32u);
  EXPECT_EQ(a.enc_q.widths(), (std::vector<std::size_t>{4, 16, 32, 32}));
  EXPECT_EQ(a.enc_k.widths(), (std::vector<std::size_t>{4, 16, 32, 32}));
  EXPECT_EQ(a.dec.widths(), (std::vector<std::size_t>{32, 32, 16, 4}));
  EXPECT_EQ(a.dec.out_width(), 4u);
  FusionParams mut = a;
  for_each_parameter(mut, [](double& x) { EXPECT_LE(std::abs(x), 1.0); });
}

TEST(ParamsIo, RoundTripAndManifest) {
  const FusionParams p = init_params(FusionWidths{}, 21);
  test::TempDir dir;
  const auto bin = dir.path() / "fusion.bin";
  save_params(p, 21, bin);
  const FusionParams back = load_params(bin);
  EXPECT_EQ(back, p);
  const auto manifest = nlohmann::json::parse(test::read_text(dir.path() / "fusion.json"));
  EXPECT_EQ(manifest["seed"], 21);
  EXPECT_EQ(manifest["widths"]["dec"], nlohmann::json({32, 32, 16, 4}));
  // header: 8 magic + 4 version + per mlp (4 + 4 * 4), then 8 bytes per scalar
  std::size_t scalars = 0;
  FusionParams mut = p;
  for_each_parameter(mut, [&scalars](double&) { ++scalars; });
  EXPECT_EQ(std::filesystem::file_size(bin), 12 + 4 * 20 + 8 * scalars);
}

TEST(ParamsIo, MalformedInput) {
  auto bytes = encode_params(init_params(FusionWidths::toy(), 1));
  bytes[0] = 'X';
  test::expect_error(ErrorCode::MalformedFrame, [&] { decode_params(bytes); });
  auto truncated = encode_params(init_params(FusionWidths::toy(), 1));
  truncated.resize(truncated.size() - 3);
  test::expect_error(ErrorCode::MalformedFrame, [&] { decode_params(truncated); });
  test::expect_error(ErrorCode::FileNotFound, [] { load_params("/nonexistent/params.bin"); });
}
