#pragma once

// Procedural shape generator with orthographic view rendering. Shapes are
// deterministic under seed; each view is rendered by marching rays through
// the voxel grid from a seeded random direction, so every lit silhouette
// pixel is backed by an occupied voxel on its ray by construction.
//
// View channels: 0 = silhouette, 1 = first-hit depth (near is bright,
// 0 on miss), 2 = occupancy fraction along the ray.

#include <array>
#include <cmath>
#include <string>

#include "voxfuse/common.hpp"
#include "voxfuse/dataset.hpp"
#include "voxfuse/voxel.hpp"

namespace voxfuse {

enum class ShapeKind { box, table, lshape, cross, sphere };

inline const char* shape_kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::box: return "box";
    case ShapeKind::table: return "table";
    case ShapeKind::lshape: return "lshape";
    case ShapeKind::cross: return "cross";
    case ShapeKind::sphere: return "sphere";
  }
  return "?";
}

inline ShapeKind parse_shape_kind(const std::string& s) {
  if (s == "box") return ShapeKind::box;
  if (s == "table") return ShapeKind::table;
  if (s == "lshape") return ShapeKind::lshape;
  if (s == "cross") return ShapeKind::cross;
  if (s == "sphere") return ShapeKind::sphere;
  throw ConfigError("unknown shape kind '" + s + "'");
}

inline const std::array<ShapeKind, 5>& all_shape_kinds() {
  static const std::array<ShapeKind, 5> kinds = {
      ShapeKind::box, ShapeKind::table, ShapeKind::lshape, ShapeKind::cross,
      ShapeKind::sphere};
  return kinds;
}

namespace detail {

inline void fill_box(BinaryGrid& g, double x0, double x1, double y0, double y1,
                     double z0, double z1) {
  const int R = g.res;
  for (int x = std::max(0, int(std::floor(x0))); x < std::min(R, int(std::ceil(x1))); ++x)
    for (int y = std::max(0, int(std::floor(y0))); y < std::min(R, int(std::ceil(y1))); ++y)
      for (int z = std::max(0, int(std::floor(z0))); z < std::min(R, int(std::ceil(z1))); ++z) {
        const double cx = x + 0.5, cy = y + 0.5, cz = z + 0.5;
        if (cx >= x0 && cx < x1 && cy >= y0 && cy < y1 && cz >= z0 && cz < z1)
          g.set(x, y, z, true);
      }
}

}  // namespace detail

// Randomized-proportion shapes centered in the grid. y is "up".
inline BinaryGrid make_shape(ShapeKind kind, int res, Rng& rng) {
  BinaryGrid g(res);
  const double R = res;
  const double c = R / 2.0;
  switch (kind) {
    case ShapeKind::box: {
      const double ex = rng.uniform(0.18, 0.40) * R;
      const double ey = rng.uniform(0.18, 0.40) * R;
      const double ez = rng.uniform(0.18, 0.40) * R;
      const double jx = c + rng.uniform(-0.05, 0.05) * R;
      const double jy = c + rng.uniform(-0.05, 0.05) * R;
      const double jz = c + rng.uniform(-0.05, 0.05) * R;
      detail::fill_box(g, jx - ex, jx + ex, jy - ey, jy + ey, jz - ez, jz + ez);
      break;
    }
    case ShapeKind::sphere: {
      const double r = rng.uniform(0.22, 0.42) * R;
      const double jx = c + rng.uniform(-0.04, 0.04) * R;
      const double jy = c + rng.uniform(-0.04, 0.04) * R;
      const double jz = c + rng.uniform(-0.04, 0.04) * R;
      for (int x = 0; x < res; ++x)
        for (int y = 0; y < res; ++y)
          for (int z = 0; z < res; ++z) {
            const double dx = x + 0.5 - jx, dy = y + 0.5 - jy, dz = z + 0.5 - jz;
            if (dx * dx + dy * dy + dz * dz < r * r) g.set(x, y, z, true);
          }
      break;
    }
    case ShapeKind::table: {
      const double wx = rng.uniform(0.32, 0.44) * R;   // slab half-width
      const double wz = rng.uniform(0.32, 0.44) * R;
      const double th = std::max(2.0, rng.uniform(0.09, 0.16) * R);
      const double ytop = rng.uniform(0.64, 0.84) * R;
      const double leg = std::max(2.0, rng.uniform(0.11, 0.17) * R);
      const double y0 = rng.uniform(0.04, 0.10) * R;
      detail::fill_box(g, c - wx, c + wx, ytop - th, ytop, c - wz, c + wz);
      const double ix = wx - leg, iz = wz - leg;  // leg center offsets
      for (int sx : {-1, 1}) {
        for (int sz : {-1, 1}) {
          const double lx = c + sx * ix, lz = c + sz * iz;
          detail::fill_box(g, lx - leg / 2, lx + leg / 2, y0, ytop - th,
                           lz - leg / 2, lz + leg / 2);
        }
      }
      break;
    }
    case ShapeKind::lshape: {
      const double w = rng.uniform(0.14, 0.22) * R;  // arm thickness
      const double lx = rng.uniform(0.60, 0.84) * R; // arm lengths
      const double ly = rng.uniform(0.60, 0.84) * R;
      const double x0 = c - lx / 2, y0 = c - ly / 2;
      const double z0 = c - rng.uniform(0.14, 0.30) * R;
      const double z1 = 2 * c - z0;
      detail::fill_box(g, x0, x0 + lx, y0, y0 + w, z0, z1);      // horizontal arm
      detail::fill_box(g, x0, x0 + w, y0, y0 + ly, z0, z1);      // vertical arm
      break;
    }
    case ShapeKind::cross: {
      const double a = rng.uniform(0.09, 0.16) * R;  // bar half-thickness
      const double l = rng.uniform(0.38, 0.50) * R;  // bar half-length
      const double b = rng.uniform(0.09, 0.16) * R;
      detail::fill_box(g, c - l, c + l, c - a, c + a, c - a, c + a);  // along x
      detail::fill_box(g, c - b, c + b, c - l, c + l, c - b, c + b);  // along y
      break;
    }
  }
  return g;
}

// Orthographic rendering along `dir`. The image plane is sized per view so
// the whole grid projects inside it, with equality for axis-aligned
// directions (a full grid seen along an axis fills the frame).
template <Scalar T>
Tensor<T> render_view(const BinaryGrid& grid, const std::array<double, 3>& dir,
                      int side) {
  const int R = grid.res;
  const double len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
  if (len < 1e-12) throw ContractError("render_view: zero direction");
  const std::array<double, 3> d{dir[0] / len, dir[1] / len, dir[2] / len};

  // orthonormal basis (u, v) spanning the image plane
  std::array<double, 3> up = std::abs(d[1]) < 0.9 ? std::array<double, 3>{0, 1, 0}
                                                  : std::array<double, 3>{1, 0, 0};
  std::array<double, 3> u{up[1] * d[2] - up[2] * d[1],
                          up[2] * d[0] - up[0] * d[2],
                          up[0] * d[1] - up[1] * d[0]};
  const double ul = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
  for (auto& e : u) e /= ul;
  const std::array<double, 3> v{d[1] * u[2] - d[2] * u[1],
                                d[2] * u[0] - d[0] * u[2],
                                d[0] * u[1] - d[1] * u[0]};

  const double cx = R / 2.0;
  const double he_u = cx * (std::abs(u[0]) + std::abs(u[1]) + std::abs(u[2]));
  const double he_v = cx * (std::abs(v[0]) + std::abs(v[1]) + std::abs(v[2]));

  const double step = 0.5;
  const double tmax = 2.0 * R;
  Tensor<T> img = Tensor<T>::zeros({3, side, side});
  T* sil = img.ptr();
  T* dep = img.ptr() + static_cast<std::int64_t>(side) * side;
  T* thick = img.ptr() + 2 * static_cast<std::int64_t>(side) * side;

  for (int py = 0; py < side; ++py) {
    const double b = ((py + 0.5) / side * 2.0 - 1.0) * he_v;
    for (int px = 0; px < side; ++px) {
      const double a = ((px + 0.5) / side * 2.0 - 1.0) * he_u;
      const double ox = cx + a * u[0] + b * v[0] - R * d[0];
      const double oy = cx + a * u[1] + b * v[1] - R * d[1];
      const double oz = cx + a * u[2] + b * v[2] - R * d[2];
      int hits = 0;
      double first = -1;
      for (double t = 0; t <= tmax; t += step) {
        const int ix = int(std::floor(ox + t * d[0]));
        const int iy = int(std::floor(oy + t * d[1]));
        const int iz = int(std::floor(oz + t * d[2]));
        if (ix < 0 || iy < 0 || iz < 0 || ix >= R || iy >= R || iz >= R) continue;
        if (grid.at(ix, iy, iz)) {
          ++hits;
          if (first < 0) first = t;
        }
      }
      const std::int64_t pi = static_cast<std::int64_t>(py) * side + px;
      if (first >= 0) {
        sil[pi] = T(1);
        dep[pi] = static_cast<T>(1.0 - first / tmax);
        thick[pi] = static_cast<T>(std::min(1.0, hits * step / tmax));
      }
    }
  }
  return img;
}

inline std::array<double, 3> random_direction(Rng& rng) {
  const double z = rng.uniform(-1.0, 1.0);
  const double phi = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * std::cos(phi), z, r * std::sin(phi)};
}

// Seeded per-view brightness/contrast jitter (augmentation hook).
template <Scalar T>
void jitter_image(Tensor<T>& img, Rng& rng) {
  const double contrast = rng.uniform(0.9, 1.1);
  const double brightness = rng.uniform(-0.08, 0.08);
  for (auto& x : img.values()) {
    const double y = contrast * (double(x) - 0.5) + 0.5 + brightness;
    x = static_cast<T>(std::min(1.0, std::max(0.0, y)));
  }
}

template <Scalar T>
Sample<T> synth_generate(ShapeKind kind, std::uint64_t seed, int n_views,
                         int image_side, int res, bool jitter = false) {
  if (res != 16 && res != 32) {
    throw ConfigError("synth: resolution must be 16 or 32");
  }
  if (n_views < 1) throw ConfigError("synth: need at least one view");
  if (image_side < 4) throw ConfigError("synth: image side too small");

  Rng rng(derive_seed(seed, shape_kind_name(kind)));
  Sample<T> s;
  s.id = std::string(shape_kind_name(kind)) + "-" + std::to_string(seed);
  s.category = shape_kind_name(kind);
  s.gt = make_shape(kind, res, rng);
  for (int i = 0; i < n_views; ++i) {
    auto dir = random_direction(rng);
    auto img = render_view<T>(s.gt, dir, image_side);
    if (jitter) jitter_image(img, rng);
    s.views.push_back(std::move(img));
  }
  return s;
}

}  // namespace voxfuse
