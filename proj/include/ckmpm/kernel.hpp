#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "errors.hpp"
#include "math.hpp"

namespace ckmpm {

// Test hook: when enabled, weights and gradients are evaluated per node from
// a coarse phase-offset sine table instead of the paired single-trig scheme.
// The residual table asymmetry violates the exact partition and gradient-pair
// identities; the validation suites exist to flag exactly that. Never enabled
// in normal runs.
inline bool& fast_trig_hook() {
  static bool enabled = false;
  return enabled;
}

namespace detail {

template <typename T>
inline constexpr T pi_v = std::numbers::pi_v<T>;
template <typename T>
inline constexpr T two_pi_v = T(2) * std::numbers::pi_v<T>;
template <typename T>
inline constexpr T inv_two_pi_v = T(1) / (T(2) * std::numbers::pi_v<T>);

// 16-segment linear-interpolation sine table sampled with a small phase
// offset (the classic off-by-a-fraction-of-a-sample table bug). Absolute
// error ~3e-2; crucially fast_sin(a) + fast_sin(2*pi - a) != 0.
template <typename T>
inline T fast_sin(T t) {  // t in [0, 2*pi)
  constexpr int kSegs = 16;
  static const std::array<double, kSegs + 1> table = [] {
    std::array<double, kSegs + 1> tb{};
    for (int j = 0; j <= kSegs; ++j)
      tb[j] = std::sin(double(j) * 2.0 * std::numbers::pi / kSegs + 0.01);
    return tb;
  }();
  T s = t * T(kSegs) / two_pi_v<T>;
  int j = static_cast<int>(s);
  if (j < 0) j = 0;
  if (j >= kSegs) j = kSegs - 1;
  T a = s - T(j);
  return static_cast<T>(table[j] * (T(1) - a) + table[j + 1] * a);
}

template <typename T>
inline T fast_cos(T t) {  // t in [0, 2*pi)
  T shifted = t + pi_v<T> / T(2);
  if (shifted >= two_pi_v<T>) shifted -= two_pi_v<T>;
  return fast_sin(shifted);
}

// sin(2*pi*f) and cos(2*pi*f) for f in [0, 1).
template <typename T>
inline T sin_2pi(T f) {
  if (fast_trig_hook()) [[unlikely]]
    return fast_sin(two_pi_v<T> * f);
  return std::sin(two_pi_v<T> * f);
}

template <typename T>
inline T cos_2pi(T f) {
  if (fast_trig_hook()) [[unlikely]]
    return fast_cos(two_pi_v<T> * f);
  return std::cos(two_pi_v<T> * f);
}

}  // namespace detail

// 1D compact kernel: 1 - |u| + sin(2*pi*|u|)/(2*pi), exactly zero for |u| >= 1.
template <typename T>
inline T ck_weight_1d(T u) {
  T a = std::abs(u);
  if (a >= T(1)) return T(0);
  return T(1) - a + detail::sin_2pi(a) * detail::inv_two_pi_v<T>;
}

// d/du of ck_weight_1d: sgn(u) * (cos(2*pi*u) - 1) inside the support,
// zero at u = 0 and for |u| >= 1 (the kernel is C1 at all three points).
template <typename T>
inline T ck_grad_1d(T u) {
  T a = std::abs(u);
  if (a >= T(1) || u == T(0)) return T(0);
  T g = detail::cos_2pi(a) - T(1);
  return u > T(0) ? g : -g;
}

// K1(u) + K1(1-u); identically 1 on [0,1] — the pair of nodes bracketing a
// particle on one grid always shares unit weight.
template <typename T>
inline T partition_pair_1d(T u) {
  if (!(u >= T(0) && u <= T(1)))
    throw std::domain_error("partition_pair_1d: u must lie in [0,1]");
  return ck_weight_1d(u) + ck_weight_1d(T(1) - u);
}

// Per-axis slice of a compact stencil on one grid: the bracketing node pair.
// w1 = f - sin(2*pi*f)/(2*pi) is K1(1-f) evaluated directly (same expression
// after reflection), so w0 + w1 = 1 holds to roundoff with a single sine.
template <typename T>
struct AxisPair {
  int base;   // lower node index on this axis
  T f;        // fractional coordinate in [0,1)
  T w0, w1;   // weights of nodes base, base+1
  T g0, g1;   // d(weight)/dx_p, units 1/m; g1 = -g0
};

template <typename T>
inline AxisPair<T> axis_pair(T x, int k, T dx) {
  T s = x / dx - T(k) * T(0.25);
  T fb = std::floor(s);
  AxisPair<T> p;
  p.base = static_cast<int>(fb);
  p.f = s - fb;
  if (fast_trig_hook()) [[unlikely]] {
    // Hooked path: each node evaluated independently, so the approximate
    // trig's asymmetry lands in the pair sums.
    p.w0 = ck_weight_1d(p.f);
    p.w1 = ck_weight_1d(p.f - T(1));
    p.g0 = ck_grad_1d(p.f) / dx;
    p.g1 = ck_grad_1d(p.f - T(1)) / dx;
    return p;
  }
  T sn = detail::sin_2pi(p.f) * detail::inv_two_pi_v<T>;
  T cs = detail::cos_2pi(p.f);
  p.w0 = T(1) - p.f + sn;
  p.w1 = p.f - sn;
  p.g0 = (cs - T(1)) / dx;
  p.g1 = -p.g0;
  return p;
}

// 2x2x2 stencil of one particle on one of the two staggered grids.
template <typename T>
struct KernelStencil {
  Int3 base;
  std::array<T, 8> weights;        // node (s,t,u) at index s*4 + t*2 + u
  std::array<Vec3<T>, 8> grads;    // d(weight)/d(x_p), 1/m
  int grid_tag;                    // k in {-1, +1}
};

template <typename T>
inline KernelStencil<T> stencil(const Vec3<T>& xp, int k, T dx) {
  AxisPair<T> ax = axis_pair(xp.x, k, dx);
  AxisPair<T> ay = axis_pair(xp.y, k, dx);
  AxisPair<T> az = axis_pair(xp.z, k, dx);
  KernelStencil<T> st;
  st.base = {ax.base, ay.base, az.base};
  st.grid_tag = k;
  const T wx[2] = {ax.w0, ax.w1}, wy[2] = {ay.w0, ay.w1}, wz[2] = {az.w0, az.w1};
  const T gx[2] = {ax.g0, ax.g1}, gy[2] = {ay.g0, ay.g1}, gz[2] = {az.g0, az.g1};
  for (int s = 0; s < 2; ++s)
    for (int t = 0; t < 2; ++t)
      for (int u = 0; u < 2; ++u) {
        int n = s * 4 + t * 2 + u;
        st.weights[n] = wx[s] * wy[t] * wz[u];
        st.grads[n] = {gx[s] * wy[t] * wz[u], wx[s] * gy[t] * wz[u],
                        wx[s] * wy[t] * gz[u]};
      }
  return st;
}

// True when every node of the stencil lies inside a grid with the given cell
// resolution (valid node indices are 0..resolution inclusive per axis).
template <typename T>
inline bool stencil_in_bounds(const KernelStencil<T>& st, Int3 resolution) {
  return st.base.x >= 0 && st.base.y >= 0 && st.base.z >= 0 &&
         st.base.x + 1 <= resolution.x && st.base.y + 1 <= resolution.y &&
         st.base.z + 1 <= resolution.z;
}

// Bounds-checked variant; the grid's activation path performs the same check
// with the particle index attached.
template <typename T>
inline KernelStencil<T> stencil(const Vec3<T>& xp, int k, T dx, Int3 resolution) {
  KernelStencil<T> st = stencil(xp, k, dx);
  if (!stencil_in_bounds(st, resolution))
    throw NumericalError("stencil leaves allocated grid bounds");
  return st;
}

// Both grids' axis pairs for the hot transfer loops; grid index 0 is k=-1,
// grid index 1 is k=+1.
template <typename T>
struct DualStencil {
  AxisPair<T> ax[2][3];
  static constexpr int tag(int g) { return g == 0 ? -1 : +1; }
};

template <typename T>
inline DualStencil<T> dual_stencil(const Vec3<T>& xp, T dx) {
  DualStencil<T> d;
  for (int g = 0; g < 2; ++g) {
    int k = DualStencil<T>::tag(g);
    d.ax[g][0] = axis_pair(xp.x, k, dx);
    d.ax[g][1] = axis_pair(xp.y, k, dx);
    d.ax[g][2] = axis_pair(xp.z, k, dx);
  }
  return d;
}

// Quadratic B-spline baseline on the unstaggered grid: 3 nodes per axis,
// 27 total. Weight and gradient products are formed on demand.
template <typename T>
struct QuadStencil {
  Int3 base;
  T w[3][3];  // [axis][offset]
  T g[3][3];  // d(weight)/dx_p, 1/m

  T weight(int s, int t, int u) const { return w[0][s] * w[1][t] * w[2][u]; }
  Vec3<T> grad(int s, int t, int u) const {
    return {g[0][s] * w[1][t] * w[2][u], w[0][s] * g[1][t] * w[2][u],
            w[0][s] * w[1][t] * g[2][u]};
  }
};

template <typename T>
inline QuadStencil<T> quad_bspline_stencil(const Vec3<T>& xp, T dx) {
  QuadStencil<T> st;
  for (int a = 0; a < 3; ++a) {
    T s = xp[a] / dx - T(0.5);
    T fb = std::floor(s);
    int base = static_cast<int>(fb);
    T f = xp[a] / dx - T(base);  // distance to node `base` in cells, [0.5, 1.5)
    (a == 0 ? st.base.x : a == 1 ? st.base.y : st.base.z) = base;
    T t0 = T(1.5) - f;        // node base
    T t1 = f - T(1);          // node base+1
    T t2 = f - T(0.5);        // node base+2
    st.w[a][0] = T(0.5) * t0 * t0;
    st.w[a][1] = T(0.75) - t1 * t1;
    st.w[a][2] = T(0.5) * t2 * t2;
    st.g[a][0] = -t0 / dx;
    st.g[a][1] = T(-2) * t1 / dx;
    st.g[a][2] = t2 / dx;
  }
  return st;
}

template <typename T>
inline bool quad_stencil_in_bounds(const QuadStencil<T>& st, Int3 resolution) {
  return st.base.x >= 0 && st.base.y >= 0 && st.base.z >= 0 &&
         st.base.x + 2 <= resolution.x && st.base.y + 2 <= resolution.y &&
         st.base.z + 2 <= resolution.z;
}

}  // namespace ckmpm
