#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "errors.hpp"
#include "grid.hpp"
#include "material.hpp"
#include "math.hpp"
#include "transfer.hpp"

namespace ckmpm {

enum class ShapeKind { sphere, box, cylinder };

template <typename T>
struct ShapeSpec {
  ShapeKind kind = ShapeKind::sphere;
  Vec3<T> center{};     // sphere, cylinder
  T radius = 0;         // sphere radius / cylinder outer radius
  T inner_radius = 0;   // cylinder bore; > 0 makes an annular tube
  T half_length = 0;    // cylinder half extent along axis
  int axis = 1;         // cylinder axis (0 = x, 1 = y, 2 = z)
  Vec3<T> lo{}, hi{};   // box corners, half-open [lo, hi)

  // Membership: spheres and cylinders are strict-interior, boxes half-open,
  // so a point landing exactly on the surface never double-counts.
  bool contains(const Vec3<T>& x) const {
    switch (kind) {
      case ShapeKind::sphere:
        return norm2(x - center) < radius * radius;
      case ShapeKind::box:
        return x.x >= lo.x && x.x < hi.x && x.y >= lo.y && x.y < hi.y &&
               x.z >= lo.z && x.z < hi.z;
      case ShapeKind::cylinder: {
        Vec3<T> d = x - center;
        T along = d[axis];
        if (!(std::abs(along) < half_length)) return false;
        d[axis] = T(0);
        T r2 = norm2(d);
        if (!(r2 < radius * radius)) return false;
        return r2 >= inner_radius * inner_radius;
      }
    }
    return false;
  }

  void aabb(Vec3<T>& out_lo, Vec3<T>& out_hi) const {
    switch (kind) {
      case ShapeKind::sphere:
        out_lo = center - Vec3<T>{radius, radius, radius};
        out_hi = center + Vec3<T>{radius, radius, radius};
        return;
      case ShapeKind::box:
        out_lo = lo;
        out_hi = hi;
        return;
      case ShapeKind::cylinder: {
        Vec3<T> ext{radius, radius, radius};
        ext[axis] = half_length;
        out_lo = center - ext;
        out_hi = center + ext;
        return;
      }
    }
  }
};

// Deterministic particle seeding. ppc selects the per-cell pattern:
//   8  -> 2x2x2 sub-lattice at offsets {1/4, 3/4}
//   27 -> 3x3x3 sub-lattice at offsets {1/6, 1/2, 5/6}
//   16 -> 16 uniform jittered points per cell from a seeded mt19937_64;
//         draws are consumed for every candidate cell in order, so the
//         result depends only on (shape, dx, seed).
template <typename T>
inline std::vector<Vec3<T>> sample_shape(const ShapeSpec<T>& shape, T dx, int ppc,
                                         std::uint64_t seed = 0) {
  if (!(dx > T(0))) throw ConfigError("sample_shape: dx must be positive");
  Vec3<T> blo, bhi;
  shape.aabb(blo, bhi);
  int i0 = static_cast<int>(std::floor(blo.x / dx)) - 1;
  int j0 = static_cast<int>(std::floor(blo.y / dx)) - 1;
  int k0 = static_cast<int>(std::floor(blo.z / dx)) - 1;
  int i1 = static_cast<int>(std::ceil(bhi.x / dx)) + 1;
  int j1 = static_cast<int>(std::ceil(bhi.y / dx)) + 1;
  int k1 = static_cast<int>(std::ceil(bhi.z / dx)) + 1;

  std::vector<Vec3<T>> out;
  auto emit_lattice = [&](int nsub) {
    std::vector<T> offs(nsub);
    for (int s = 0; s < nsub; ++s) offs[s] = (T(2 * s + 1)) / T(2 * nsub);
    for (int i = i0; i <= i1; ++i)
      for (int j = j0; j <= j1; ++j)
        for (int k = k0; k <= k1; ++k)
          for (int a = 0; a < nsub; ++a)
            for (int b = 0; b < nsub; ++b)
              for (int c = 0; c < nsub; ++c) {
                Vec3<T> x{(T(i) + offs[a]) * dx, (T(j) + offs[b]) * dx,
                          (T(k) + offs[c]) * dx};
                if (shape.contains(x)) out.push_back(x);
              }
  };

  switch (ppc) {
    case 8:
      emit_lattice(2);
      break;
    case 27:
      emit_lattice(3);
      break;
    case 16: {
      std::mt19937_64 rng(seed);
      std::uniform_real_distribution<T> uni(T(0), T(1));
      for (int i = i0; i <= i1; ++i)
        for (int j = j0; j <= j1; ++j)
          for (int k = k0; k <= k1; ++k)
            for (int s = 0; s < 16; ++s) {
              T u = uni(rng), v = uni(rng), w = uni(rng);
              Vec3<T> x{(T(i) + u) * dx, (T(j) + v) * dx, (T(k) + w) * dx};
              if (shape.contains(x)) out.push_back(x);
            }
      break;
    }
    default:
      throw ConfigError("sample_shape: particles per cell must be 8, 16 or 27");
  }
  return out;
}

// Linear shear profile used to spin up an elongated body: the x velocity
// ramps with distance along y from the profile center.
template <typename T>
inline Vec3<T> rod_velocity_profile(const Vec3<T>& x, const Vec3<T>& center, T slope) {
  return {slope * (x.y - center.y), T(0), T(0)};
}

template <typename T>
struct BodySpec {
  ShapeSpec<T> shape;
  std::uint32_t material = 0;
  int ppc = 8;
  std::uint64_t seed = 0;
  Vec3<T> velocity{};        // uniform initial velocity
  T shear_slope = 0;         // adds rod_velocity_profile(x, shape.center, slope)
  Vec3<T> omega{};           // adds rigid rotation omega x (x - shape.center)
};

template <typename T>
struct OutputSpec {
  bool snapshots = true;
  bool binary_snapshots = false;
  bool diagnostics = true;
  int diagnostics_every = 1;  // substep stride for diagnostics rows
};

template <typename T>
struct SimConfig {
  std::string name = "scene";
  int resolution = 64;           // cubic grid, domain [0, extent]^3
  T extent = T(1);               // world size of the cube; dx = extent / resolution
  KernelKind kernel = KernelKind::compact;
  TransferScheme scheme = TransferScheme::apic;
  Vec3<T> gravity{};
  T cfl = T(0.5);
  T frame_dt = T(1) / T(60);
  int frames = 1;
  T max_dt = T(0);               // 0 = no cap beyond CFL / frame remainder
  bool deterministic = false;
  int threads = 0;               // 0 = hardware concurrency
  bool clamp_singular = false;
  T clamp_floor = T(0.05);
  std::uint64_t max_substeps_per_frame = 1000000;
  std::vector<Material<T>> materials;
  std::vector<BodySpec<T>> bodies;
  std::vector<BoundaryCondition<T>> boundaries;
  OutputSpec<T> output;

  T dx() const { return extent / T(resolution); }
};

template <typename T>
inline void validate_config(const SimConfig<T>& cfg) {
  if (cfg.resolution < 8) throw ConfigError("resolution: must be at least 8");
  if (!(cfg.extent > T(0))) throw ConfigError("extent: must be positive");
  if (!(cfg.cfl > T(0)) || cfg.cfl > T(1)) throw ConfigError("cfl: must be in (0, 1]");
  if (!(cfg.frame_dt > T(0))) throw ConfigError("frame_dt: must be positive");
  if (cfg.frames < 0) throw ConfigError("frames: must be non-negative");
  if (cfg.materials.empty()) throw ConfigError("materials: at least one required");
  if (cfg.bodies.empty()) throw ConfigError("bodies: at least one required");
  if (cfg.kernel == KernelKind::quadratic && cfg.scheme == TransferScheme::mls)
    throw ConfigError("scheme: mls requires the compact kernel");
  for (const BodySpec<T>& b : cfg.bodies)
    if (b.material >= cfg.materials.size())
      throw ConfigError("bodies: material index out of range");
  if (cfg.output.diagnostics_every < 1)
    throw ConfigError("diagnostics_every: must be >= 1");
}

// Expands the body list into the initial particle set. Mass and rest volume
// per particle are rho * dx^3 / ppc and dx^3 / ppc.
template <typename T>
inline std::vector<Particle<T>> seed_particles(const SimConfig<T>& cfg) {
  std::vector<Particle<T>> particles;
  T dx = cfg.dx();
  for (const BodySpec<T>& body : cfg.bodies) {
    const Material<T>& mat = cfg.materials[body.material];
    std::vector<Vec3<T>> xs = sample_shape(body.shape, dx, body.ppc, body.seed);
    T cell_vol = dx * dx * dx;
    T vol = cell_vol / T(body.ppc);
    T mass = mat.density * vol;
    particles.reserve(particles.size() + xs.size());
    for (const Vec3<T>& x : xs) {
      Particle<T> p;
      p.x = x;
      p.v = body.velocity;
      if (body.shear_slope != T(0))
        p.v += rod_velocity_profile(x, body.shape.center, body.shear_slope);
      if (norm2(body.omega) > T(0)) p.v += cross(body.omega, x - body.shape.center);
      p.mass = mass;
      p.volume0 = vol;
      p.material = body.material;
      particles.push_back(p);
    }
  }
  if (particles.empty()) throw ConfigError("bodies: seeding produced no particles");
  return particles;
}

}  // namespace ckmpm
