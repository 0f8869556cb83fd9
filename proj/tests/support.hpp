#pragma once

// Test-only helpers: random generators, independent oracles, finite differences.

#include "liaf/roi.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace liaf::test {

inline Tensor4<double> random_tensor(std::mt19937_64& rng, Index n, Index c, Index h, Index w, double lo = -1,
                                     double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor4<double> t(n, c, h, w);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

// Random box inside [0,W]x[0,H] with extent at least min_side.
inline Box random_box(std::mt19937_64& rng, Index height, Index width, double min_side = 0.5) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double w = min_side + u(rng) * (static_cast<double>(width) - min_side);
  const double h = min_side + u(rng) * (static_cast<double>(height) - min_side);
  const double x1 = u(rng) * (static_cast<double>(width) - w);
  const double y1 = u(rng) * (static_cast<double>(height) - h);
  return Box{x1, y1, x1 + w, y1 + h};
}

// Bilinear interpolation written as a sum of tent functions over every
// pixel, with the same clamp-to-outer-pixel-centers convention. Shares no
// code with the implementation's floor/index path.
inline double tent_bilinear(const Tensor4<double>& f, Index n, Index c, double y, double x) {
  const double v = std::clamp(y - 0.5, 0.0, static_cast<double>(f.h() - 1));
  const double u = std::clamp(x - 0.5, 0.0, static_cast<double>(f.w() - 1));
  double acc = 0;
  for (Index i = 0; i < f.h(); ++i) {
    const double wy = std::max(0.0, 1.0 - std::abs(v - static_cast<double>(i)));
    if (wy == 0) continue;
    for (Index j = 0; j < f.w(); ++j) {
      const double wx = std::max(0.0, 1.0 - std::abs(u - static_cast<double>(j)));
      acc += wy * wx * f(n, c, i, j);
    }
  }
  return acc;
}

// Dense-sampling RoIAlign oracle: average of tent_bilinear over a grid x grid
// midpoint lattice inside each bin. Returns [C, ph*pw].
inline MatrixX<double> dense_roi_oracle(const Tensor4<double>& f, const Box& box, int n, int ph, int pw, int grid) {
  MatrixX<double> out(f.c(), ph * pw);
  const double bh = box.height() / ph, bw = box.width() / pw;
  for (Index c = 0; c < f.c(); ++c)
    for (int by = 0; by < ph; ++by)
      for (int bx = 0; bx < pw; ++bx) {
        double acc = 0;
        for (int iy = 0; iy < grid; ++iy)
          for (int ix = 0; ix < grid; ++ix)
            acc += tent_bilinear(f, n, c, box.y1 + bh * (by + (iy + 0.5) / grid), box.x1 + bw * (bx + (ix + 0.5) / grid));
        out(c, by * pw + bx) = acc / (grid * grid);
      }
  return out;
}

// Central difference of a scalar function with respect to one entry.
inline double central_difference(const std::function<double()>& f, double& x, double h = 1e-6) {
  const double saved = x;
  x = saved + h;
  const double fp = f();
  x = saved - h;
  const double fm = f();
  x = saved;
  return (fp - fm) / (2 * h);
}

// Relative error with an absolute floor so exact zeros compare sanely.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace liaf::test
