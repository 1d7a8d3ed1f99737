#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "nv3d/normals.hpp"
#include "nv3d/scene.hpp"
#include "nv3d/spatial_index.hpp"
#include "nv3d/voxelizer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace nv3d;

namespace {

SyntheticScene box_scene(double yaw, double sigma) {
  SyntheticScene s;
  s.x_min = 5.0;
  s.x_max = 15.0;
  s.y_min = -5.0;
  s.y_max = 5.0;
  s.spacing = 0.1;
  s.noise_sigma = sigma;
  s.boxes.push_back({10.0, 0.0, 1.0, 1.0, 1.0, yaw});
  s.seed = 4;
  return s;
}

std::vector<Vec3> positions(const PointCloud& pc) {
  std::vector<Vec3> out;
  for (const Point& p : pc.points) out.push_back({p.x, p.y, p.z});
  return out;
}

/// Worst angle between point-level PCA normals and the labelled face normal,
/// over points whose self plus 7 neighbours all share one label.
double worst_face_angle(const SyntheticScene& s, std::size_t& checked) {
  const LabeledCloud lc = generate_scene_labeled(s);
  const auto pts = positions(lc.cloud);
  const KdTree3 tree(pts);
  double worst = 0.0;
  checked = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (lc.labels[i] == 0) continue;
    const auto nb = tree.knn(pts[i], 8);
    bool same = true;
    std::vector<Vec3> hood;
    for (const Neighbor& n : nb) {
      same = same && lc.labels[n.index] == lc.labels[i];
      hood.push_back(pts[n.index]);
    }
    if (!same) continue;
    const Vec3 est = estimate_normal(hood);
    const Vec3 ref = face_normal(s, lc.labels[i]);
    worst = std::max(worst, std::acos(std::min(1.0, std::abs(dot(est, ref)))));
    ++checked;
  }
  return worst;
}

}  // namespace

TEST(Scene, NoiselessPlaneIsFlat) {
  SyntheticScene s;
  s.x_max = 10.0;
  s.y_min = -5.0;
  s.y_max = 5.0;
  const PointCloud pc = generate_scene(s);
  ASSERT_EQ(pc.size(), 100u * 100u);
  for (const Point& p : pc.points) EXPECT_EQ(p.z, static_cast<float>(-1.7));
}

TEST(Scene, NoiseIsGaussianWithTheGivenSigma) {
  SyntheticScene s;
  s.x_max = 10.0;
  s.y_min = -5.0;
  s.y_max = 5.0;
  s.noise_sigma = 0.02;
  const PointCloud pc = generate_scene(s);
  double sum = 0.0, sum2 = 0.0;
  for (const Point& p : pc.points) {
    const double d = p.z + 1.7;
    sum += d;
    sum2 += d * d;
  }
  const double n = static_cast<double>(pc.size());
  EXPECT_NEAR(sum / n, 0.0, 5 * 0.02 / std::sqrt(n));
  EXPECT_NEAR(std::sqrt(sum2 / n), 0.02, 0.02 * 0.05);
}

TEST(Scene, FaceNormalsNoiseless) {
  // yaw 0 keeps every face on a float-representable plane
  std::size_t checked = 0;
  EXPECT_LT(worst_face_angle(box_scene(0.0, 0.0), checked), 1e-6);
  EXPECT_GT(checked, 100u);
}

TEST(Scene, FaceNormalsRotatedAndNoisy) {
  std::size_t checked = 0;
  const double deg = 180.0 / std::numbers::pi;
  EXPECT_LT(worst_face_angle(box_scene(0.3, 0.0), checked) * deg, 0.01);
  EXPECT_GT(checked, 100u);
  EXPECT_LT(worst_face_angle(box_scene(0.3, 0.002), checked) * deg, 5.0);
}

TEST(Scene, FaceNormalTable) {
  const SyntheticScene s = box_scene(std::numbers::pi / 2, 0.0);
  const Vec3 n1 = face_normal(s, 2);  // +x' rotated a quarter turn
  EXPECT_NEAR(n1[0], 0.0, 1e-15);
  EXPECT_NEAR(n1[1], 1.0, 1e-15);
  EXPECT_EQ(face_normal(s, 0), (Vec3{0, 0, 1}));
  EXPECT_EQ(face_normal(s, 1), (Vec3{0, 0, 1}));
}

TEST(Scene, LabelsAgreeWithGeometry) {
  const SyntheticScene s = box_scene(0.0, 0.0);
  const LabeledCloud lc = generate_scene_labeled(s);
  ASSERT_EQ(lc.labels.size(), lc.cloud.size());
  for (std::size_t i = 0; i < lc.cloud.size(); ++i) {
    const Point& p = lc.cloud.points[i];
    switch (lc.labels[i]) {
      case 0: EXPECT_EQ(p.z, static_cast<float>(-1.7)); break;
      case 1: EXPECT_NEAR(p.z, -0.7, 1e-6); break;
      case 2: EXPECT_EQ(p.x, 10.5f); break;
      case 3: EXPECT_EQ(p.x, 9.5f); break;
      case 4: EXPECT_EQ(p.y, 0.5f); break;
      case 5: EXPECT_EQ(p.y, -0.5f); break;
      default: ADD_FAILURE() << "unexpected label " << lc.labels[i];
    }
    if (lc.labels[i] == 0) {
      EXPECT_FALSE(std::abs(p.x - 10.0) < 0.45 && std::abs(p.y) < 0.45) << "ground under the box";
    }
  }
}

TEST(Scene, VoxelNormalsOnGroundAwayFromTheBox) {
  const SyntheticScene s = box_scene(0.0, 0.0);
  VoxelConfig vc;
  vc.max_voxels.reset();
  const VoxelSet vs = voxelize(generate_scene(s), vc);
  const auto feats = extract_normals(vs, NormalConfig{});
  const auto pos = vs.positions();
  std::size_t checked = 0;
  for (std::size_t i = 0; i < vs.size(); ++i) {
    if (std::hypot(pos[i][0] - 10.0, pos[i][1]) < 2.0 || pos[i][2] > -1.6) continue;
    EXPECT_NEAR(feats[i].nz, 1.0, 1e-9);
    ++checked;
  }
  EXPECT_GT(checked, 1000u);
}

TEST(Scene, Deterministic) {
  const SyntheticScene s = SyntheticScene::street(3);
  const PointCloud a = generate_scene(s);
  const PointCloud b = generate_scene(s);
  EXPECT_EQ(a.points, b.points);
  EXPECT_NE(generate_scene(SyntheticScene::street(4)).points, a.points);
  EXPECT_EQ(SyntheticScene::street(3).boxes, s.boxes);
}

TEST(Scene, ThinningFollowsTheKeepProbability) {
  SyntheticScene s;
  s.x_min = 0.0;
  s.x_max = 60.0;
  s.y_min = -20.0;
  s.y_max = 20.0;
  s.spacing = 0.1;
  s.thinning = true;
  s.thinning_ref = 4.0;
  s.thinning_power = 2.0;
  const PointCloud pc = generate_scene(s);
  // Oracle: sum of Bernoulli keep probabilities over the same grid.
  double mean = 0.0, var = 0.0;
  for (int i = 0; i < 600; ++i) {
    for (int j = 0; j < 400; ++j) {
      const double x = (i + 0.5) * 0.1, y = -20.0 + (j + 0.5) * 0.1;
      const double r = std::hypot(x, y);
      const double p = r <= 4.0 ? 1.0 : (4.0 / r) * (4.0 / r);
      mean += p;
      var += p * (1 - p);
    }
  }
  EXPECT_NEAR(static_cast<double>(pc.size()), mean, 5.0 * std::sqrt(var));
}

TEST(Scene, StreetPresetShape) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const SyntheticScene s = SyntheticScene::street(seed);
    EXPECT_GE(s.boxes.size(), 14u);
    EXPECT_LE(s.boxes.size(), 21u);
    const PointCloud pc = generate_scene(s);
    EXPECT_GT(pc.size(), 15000u);
    EXPECT_LT(pc.size(), 40000u);
    const VoxelSet vs = voxelize(pc, VoxelConfig{});
    std::size_t near = 0;
    for (const Vec3& p : vs.positions()) near += std::hypot(p[0], p[1]) < 30.0 ? 1 : 0;
    EXPECT_GT(static_cast<double>(near) / static_cast<double>(vs.size()), 0.9);
  }
}

TEST(Scene, Validation) {
  SyntheticScene s;
  s.spacing = 0.0;
  test::expect_error(ErrorCode::InvalidConfig, [&] { generate_scene(s); });
  s = SyntheticScene{};
  s.boxes.push_back({10, 0, 1, -1, 1, 0});
  test::expect_error(ErrorCode::InvalidConfig, [&] { s.validate(); });
  s = SyntheticScene{};
  s.x_max = s.x_min;
  test::expect_error(ErrorCode::InvalidConfig, [&] { s.validate(); });
}
