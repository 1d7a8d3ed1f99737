#ifndef NV3D_SYM_EIGEN3_HPP
#define NV3D_SYM_EIGEN3_HPP

#include <algorithm>
#include <array>
#include <cmath>

#include "nv3d/vec3.hpp"

namespace nv3d {

using Mat3 = std::array<std::array<double, 3>, 3>;

/// Eigenpairs of a symmetric 3x3 matrix, eigenvalues ascending.
/// vectors[i] is the unit eigenvector for values[i].
struct SymEigen3 {
  std::array<double, 3> values{};
  std::array<Vec3, 3> vectors{};
};

/// Cyclic Jacobi rotations until the off-diagonal mass falls below
/// `tolerance` times the diagonal mass.
inline SymEigen3 eigen_symmetric3(const Mat3& m, double tolerance = 1e-12, int max_sweeps = 64) {
  Mat3 a = m;
  Mat3 v{{{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}}};

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    const double off = std::abs(a[0][1]) + std::abs(a[0][2]) + std::abs(a[1][2]);
    const double diag = std::abs(a[0][0]) + std::abs(a[1][1]) + std::abs(a[2][2]);
    if (off == 0.0 || off <= tolerance * diag) break;

    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        const double apq = a[p][q];
        if (apq == 0.0) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * apq);
        // smaller root of t^2 + 2 theta t - 1 = 0
        double t = std::abs(theta) > 1e150 ? 0.5 / std::abs(theta)
                                            : 1.0 / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        if (theta < 0.0) t = -t;
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        a[p][p] -= t * apq;
        a[q][q] += t * apq;
        a[p][q] = a[q][p] = 0.0;
        const int r = 3 - p - q;
        const double arp = a[r][p];
        const double arq = a[r][q];
        a[r][p] = a[p][r] = c * arp - s * arq;
        a[r][q] = a[q][r] = s * arp + c * arq;

        for (int k = 0; k < 3; ++k) {
          const double vkp = v[k][p];
          const double vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }

  std::array<int, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&a](int i, int j) { return a[i][i] < a[j][j]; });
  SymEigen3 out;
  for (int i = 0; i < 3; ++i) {
    const int col = order[i];
    out.values[i] = a[col][col];
    out.vectors[i] = normalized(Vec3{v[0][col], v[1][col], v[2][col]});
  }
  return out;
}

}  // namespace nv3d

#endif  // NV3D_SYM_EIGEN3_HPP
