// Particle-grid transfer pipeline: scatter/gather operators, the affine
// moment matrices, force integration, the fitted-shape (MLS) path and the
// full-step drivers. Every numerical claim is checked either against an
// exact conservation identity or against the dense brute-force reference
// that shares no stencil machinery with the library.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "ckmpm/grid.hpp"
#include "ckmpm/kernel.hpp"
#include "ckmpm/material.hpp"
#include "ckmpm/math.hpp"
#include "ckmpm/transfer.hpp"
#include "support/dense_reference.hpp"
#include "support/test_helpers.hpp"

using ckmpm::BlockSparseGrid;
using ckmpm::BoundaryCondition;
using ckmpm::GatherResult;
using ckmpm::GridNode;
using ckmpm::Int3;
using ckmpm::Mat3;
using ckmpm::Mat4;
using ckmpm::Material;
using ckmpm::MaterialModel;
using ckmpm::NumericalError;
using ckmpm::Particle;
using ckmpm::StepParams;
using ckmpm::TransferCounters;
using ckmpm::TransferScheme;
using ckmpm::Vec3;
using test_support::close;
using test_support::Rng;

namespace {

using Vec3d = Vec3<double>;
using Mat3d = Mat3<double>;
using Grid = BlockSparseGrid<double>;
using P = Particle<double>;

constexpr int kN = Grid::kNodesPerGrid;

Mat3d skew(const Vec3d& w) {
  Mat3d m{};
  m[0][1] = -w.z;
  m[0][2] = w.y;
  m[1][0] = w.z;
  m[1][2] = -w.x;
  m[2][0] = -w.y;
  m[2][1] = w.x;
  return m;
}

std::vector<P> random_cloud(int n, std::uint64_t seed, double lo, double hi,
                            double b_scale = 0.0, double f_scale = 0.0) {
  Rng rng(seed);
  std::vector<P> ps(n);
  for (P& p : ps) {
    p.x = rng.vec(lo, hi);
    p.v = rng.vec(-0.5, 0.5);
    p.mass = 1e-3 * rng.in(0.5, 2.0);
    p.volume0 = 1e-6;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        p.B[r][c] = b_scale * rng.symm();
        p.F[r][c] += f_scale * rng.symm();
      }
  }
  return ps;
}

void activate_for(Grid& grid, const std::vector<P>& ps) {
  std::vector<Vec3d> xs;
  xs.reserve(ps.size());
  for (const P& p : ps) xs.push_back(p.x);
  grid.activate(xs);
  grid.clear();
}

Vec3d body_momentum(const std::vector<P>& ps) {
  Vec3d m{};
  for (const P& p : ps) m += p.mass * p.v;
  return m;
}

double body_mass(const std::vector<P>& ps) {
  double m = 0;
  for (const P& p : ps) m += p.mass;
  return m;
}

// Angular momentum of the nodal field about a pivot, per grid slot, read
// while node.p still holds momentum.
Vec3d grid_angular_about(const Grid& grid, int slot, const Vec3d& pivot) {
  Vec3d L{};
  for (const auto& b : grid.blocks())
    for (int n = 0; n < kN; ++n) {
      const GridNode<double>& nd = b.nodes[slot * kN + n];
      if (nd.mass == 0.0 && norm2(nd.p) == 0.0) continue;
      L += cross(grid.node_position(b.coord, slot, n) - pivot, nd.p);
    }
  return L;
}

// Fill every node of every active block on both grids with a prescribed
// (mass, velocity) field; used to probe the gather operators directly.
template <typename F>
void fill_nodes(Grid& grid, F&& field) {
  for (const auto& b : grid.blocks())
    for (int g = 0; g < grid.grid_count(); ++g)
      for (int n = 0; n < kN; ++n) {
        Int3 node{b.coord.x * 4 + ((n >> 4) & 3), b.coord.y * 4 + ((n >> 2) & 3),
                  b.coord.z * 4 + (n & 3)};
        GridNode<double>& nd = grid.node_by_index(g, node.x, node.y, node.z);
        field(grid.node_position_from_index(node, grid.grid_tag(g)), nd);
      }
}

}  // namespace

TEST_CASE("plain scatter preserves body mass and momentum on each grid") {
  const double dx = 1.0 / 16.0;
  Grid grid({16, 16, 16}, dx, true);
  grid.set_checked(true);
  std::vector<P> ps = random_cloud(30, 101, 0.3, 0.7);
  activate_for(grid, ps);

  TransferCounters counters;
  ckmpm::p2g_pic<double>(ps, grid, &counters);

  const double m_body = body_mass(ps);
  const Vec3d p_body = body_momentum(ps);
  for (int g = 0; g < 2; ++g) {
    REQUIRE(close(grid.total_mass(g), m_body, 1e-13));
    Vec3d gm = grid.total_momentum(g);
    for (int a = 0; a < 3; ++a) REQUIRE(close(gm[a], p_body[a], 1e-13));
  }

  // Each particle visits exactly its 2x2x2 stencil on each of the two grids.
  REQUIRE(counters.p2g_node_visits == 16u * ps.size());
  REQUIRE(counters.p2g_transfers == ps.size());
  REQUIRE(counters.g2p_node_visits == 0u);

  // Dual-averaged angular momentum about the origin equals the body's.
  Vec3d L_body{};
  for (const P& p : ps) L_body += p.mass * cross(p.x, p.v);
  Vec3d L_avg = 0.5 * (grid_angular_about(grid, 0, {}) + grid_angular_about(grid, 1, {}));
  for (int a = 0; a < 3; ++a) REQUIRE(close(L_avg[a], L_body[a], 1e-10));

  // Node-level oracle: every node of every active block must hold exactly
  // the kernel-weighted sums, with weights recomputed from the closed form.
  int nonzero_nodes = 0;
  for (const auto& b : grid.blocks())
    for (int g = 0; g < 2; ++g)
      for (int n = 0; n < kN; ++n) {
        const GridNode<double>& nd = b.nodes[g * kN + n];
        Vec3d xn = grid.node_position(b.coord, g, n);
        double m_exp = 0;
        Vec3d p_exp{};
        for (const P& p : ps) {
          double w = dense_ref::k1((p.x.x - xn.x) / dx) *
                     dense_ref::k1((p.x.y - xn.y) / dx) *
                     dense_ref::k1((p.x.z - xn.z) / dx);
          m_exp += w * p.mass;
          p_exp += (w * p.mass) * p.v;
        }
        REQUIRE(close(nd.mass, m_exp, 1e-13));
        for (int a = 0; a < 3; ++a) REQUIRE(close(nd.p[a], p_exp[a], 1e-13));
        if (m_exp > 0) ++nonzero_nodes;
      }
  REQUIRE(nonzero_nodes >= 16 * 2);  // the cloud actually landed somewhere
}

TEST_CASE("a particle sitting on a node of one grid deposits its whole mass there") {
  const double dx = 1.0 / 16.0;
  Grid grid({16, 16, 16}, dx, true);
  grid.set_checked(true);
  std::vector<P> ps(1);
  ps[0].x = {6.25 * dx, 6.25 * dx, 6.25 * dx};  // node (6,6,6) of the +1 grid
  ps[0].v = {0.25, -0.5, 1.0};
  ps[0].mass = 3.0;
  activate_for(grid, ps);
  ckmpm::p2g_pic<double>(ps, grid);

  // Slot 1 is the +1-offset grid: full mass on one node, exactly.
  REQUIRE(grid.grid_tag(1) == 1);
  REQUIRE(grid.node_by_index(1, 6, 6, 6).mass == 3.0);
  REQUIRE(close(grid.total_mass(1), 3.0, 1e-15));

  // On the -1 grid the fractional offset is exactly 1/2 per axis, so the
  // mass splits into exact eighths across the stencil corners.
  for (int i = 6; i <= 7; ++i)
    for (int j = 6; j <= 7; ++j)
      for (int k = 6; k <= 7; ++k)
        REQUIRE(grid.node_by_index(0, i, j, k).mass == 3.0 * 0.125);

  // Momentum scatters in the same proportions.
  Vec3d pn = grid.node_by_index(1, 6, 6, 6).p;
  for (int a = 0; a < 3; ++a) REQUIRE(pn[a] == 3.0 * ps[0].v[a]);
}

TEST_CASE("opposite momenta cancel and resting bodies scatter no momentum") {
  const double dx = 1.0 / 16.0;
  Grid grid({16, 16, 16}, dx, true);
  grid.set_checked(true);

  std::vector<P> ps(2);
  ps[0].x = {0.41, 0.52, 0.47};
  ps[1].x = {0.58, 0.44, 0.55};
  ps[0].v = {0.3, -0.2, 0.7};
  ps[1].v = -1.0 * ps[0].v;
  ps[0].mass = ps[1].mass = 1.25e-3;
  activate_for(grid, ps);
  ckmpm::p2g_pic<double>(ps, grid);
  for (int g = 0; g < 2; ++g) {
    Vec3d gm = grid.total_momentum(g);
    for (int a = 0; a < 3; ++a)
      REQUIRE(std::abs(gm[a]) <= 1e-18 + 1e-15 * ps[0].mass);
  }

  // A resting body produces a strictly momentum-free field.
  for (P& p : ps) p.v = {};
  grid.clear();
  ckmpm::p2g_pic<double>(ps, grid);
  for (const auto& b : grid.blocks())
    for (int g = 0; g < 2; ++g)
      for (int n = 0; n < kN; ++n) REQUIRE(norm2(b.nodes[g * kN + n].p) == 0.0);
  REQUIRE(close(grid.total_mass(0), 2.5e-3, 1e-14));
}

TEST_CASE("affine second moment matrix is SPD and matches direct summation") {
  Rng rng(202);
  const int res = 16;
  const double dx = 1.0 / 16.0;

  for (int trial = 0; trial < 60; ++trial) {
    Vec3d xp = rng.vec(0.3, 0.7);
    Mat3d D = ckmpm::compute_apic_D(xp, dx);

    // Symmetric, positive definite, spectrum bounded by the stencil radius.
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) REQUIRE(close(D[a][b], D[b][a], 1e-15));
    auto eig = ckmpm::sym_eigen3(D);
    for (int a = 0; a < 3; ++a) {
      REQUIRE(eig.w[a] > 0.04 * dx * dx);
      REQUIRE(eig.w[a] < 0.25 * dx * dx);
    }

    // Brute-force summation over every node of both dense grids.
    Mat3d D_ref = dense_ref::dense_D(xp, res, dx);
    REQUIRE(test_support::max_abs_diff(D, D_ref) <= 5e-14 * dx * dx);

    // Shifting the query point by one full cell re-centers the stencil and
    // leaves the moment matrix unchanged.
    Mat3d D_shift = ckmpm::compute_apic_D(Vec3d{xp.x + dx, xp.y, xp.z}, dx);
    REQUIRE(test_support::max_abs_diff(D, D_shift) <= 1e-12 * dx * dx);
  }

  // The quadratic-spline baseline has the constant moment dx^2/4 I.
  for (int trial = 0; trial < 40; ++trial) {
    Vec3d xp = rng.vec(0.3, 0.7);
    Mat3d Dq = ckmpm::compute_apic_D(xp, dx, /*dual=*/false);
    Mat3d expect = Mat3d::diag(dx * dx / 4, dx * dx / 4, dx * dx / 4);
    REQUIRE(test_support::max_abs_diff(Dq, expect) <= 1e-12 * dx * dx);
  }

  // Guarded inverse: exact on healthy input, loud on a collapsed one.
  Vec3d xp = rng.vec(0.3, 0.7);
  Mat3d D = ckmpm::compute_apic_D(xp, dx);
  Mat3d prod = D * ckmpm::detail::apic_d_inverse(D);
  REQUIRE(test_support::max_abs_diff(prod, Mat3d::identity()) <= 1e-12);
  Mat3d degenerate = Mat3d::diag(dx * dx, dx * dx, 1e-20 * dx * dx);
  REQUIRE_THROWS_WITH(ckmpm::detail::apic_d_inverse(degenerate),
                      Catch::Matchers::ContainsSubstring("near-singular APIC D matrix"));
}

TEST_CASE("affine scatter with zero affine state reduces to plain scatter") {
  const double dx = 1.0 / 16.0;
  Grid pic_grid({16, 16, 16}, dx, true), apic_grid({16, 16, 16}, dx, true);
  std::vector<P> ps = random_cloud(12, 303, 0.3, 0.7);  // B stays zero
  activate_for(pic_grid, ps);
  activate_for(apic_grid, ps);
  ckmpm::p2g_pic<double>(ps, pic_grid);
  ckmpm::p2g_apic<double>(ps, apic_grid);

  REQUIRE(pic_grid.active_block_count() == apic_grid.active_block_count());
  auto pb = pic_grid.blocks(), ab = apic_grid.blocks();
  for (std::size_t i = 0; i < pb.size(); ++i)
    for (int n = 0; n < 2 * kN; ++n) {
      REQUIRE(pb[i].nodes[n].mass == ab[i].nodes[n].mass);
      for (int a = 0; a < 3; ++a) REQUIRE(pb[i].nodes[n].p[a] == ab[i].nodes[n].p[a]);
    }
}

TEST_CASE("affine scatter carries the affine state's angular momentum onto the grid") {
  const int res = 16;
  const double dx = 1.0 / 16.0;
  Grid grid({res, res, res}, dx, true);
  grid.set_checked(true);

  std::vector<P> ps(1);
  ps[0].x = {0.43791, 0.55213, 0.49627};
  ps[0].v = {};
  ps[0].mass = 2.0;
  Vec3d omega{0.3, -0.4, 0.5};
  Mat3d D = ckmpm::compute_apic_D(ps[0].x, dx);
  ps[0].B = skew(omega) * D;
  activate_for(grid, ps);
  ckmpm::p2g_apic<double>(ps, grid);

  // Direct-summation oracle over every node of both dense grids, with its
  // own weights, its own D and its own Gaussian-elimination inverse.
  Mat3d C_ref = ps[0].B * dense_ref::inverse3_local(dense_ref::dense_D(ps[0].x, res, dx));
  Vec3d L_ref[2] = {{}, {}};
  for (int slot = 0; slot < 2; ++slot) {
    int tag = grid.grid_tag(slot);
    for (int i = 0; i <= res; ++i)
      for (int j = 0; j <= res; ++j)
        for (int k = 0; k <= res; ++k) {
          Vec3d xn{i * dx + tag * dx / 4, j * dx + tag * dx / 4, k * dx + tag * dx / 4};
          double w = dense_ref::k1((ps[0].x.x - xn.x) / dx) *
                     dense_ref::k1((ps[0].x.y - xn.y) / dx) *
                     dense_ref::k1((ps[0].x.z - xn.z) / dx);
          if (w == 0.0) continue;
          Vec3d xi = xn - ps[0].x;
          Vec3d mom = (w * ps[0].mass) * (C_ref * xi);
          L_ref[slot] += cross(xi, mom);
        }
  }

  Vec3d L_eng[2] = {grid_angular_about(grid, 0, ps[0].x),
                    grid_angular_about(grid, 1, ps[0].x)};
  for (int slot = 0; slot < 2; ++slot)
    for (int a = 0; a < 3; ++a) REQUIRE(close(L_eng[slot][a], L_ref[slot][a], 1e-12));

  // Closed form: the dual-averaged angular momentum about the particle is
  // exactly m * axial(B), independent of the moment matrix.
  Vec3d L_avg = 0.5 * (L_eng[0] + L_eng[1]);
  Vec3d expect = ps[0].mass * ckmpm::axial(ps[0].B);
  for (int a = 0; a < 3; ++a) REQUIRE(close(L_avg[a], expect[a], 1e-12));

  // A pure affine state adds no net linear momentum in the dual average.
  Vec3d p_avg = 0.5 * (grid.total_momentum(0) + grid.total_momentum(1));
  double p_scale = ps[0].mass * ckmpm::frobenius_norm(C_ref) * dx;
  for (int a = 0; a < 3; ++a) REQUIRE(std::abs(p_avg[a]) <= 1e-12 * p_scale);
}

TEST_CASE("per-grid affine momentum bias cancels in the dual average") {
  const double dx = 1.0 / 16.0;
  Grid grid({16, 16, 16}, dx, true);
  std::vector<P> ps = random_cloud(20, 404, 0.3, 0.7, /*b_scale=*/0.02 * dx);
  activate_for(grid, ps);
  ckmpm::p2g_apic<double>(ps, grid);

  const Vec3d p_body = body_momentum(ps);
  Vec3d bias[2];
  for (int g = 0; g < 2; ++g) bias[g] = grid.total_momentum(g) - p_body;

  // The affine term leaves a genuine per-grid bias (the kernel's first
  // moment does not vanish on a single offset grid)...
  REQUIRE(norm_inf(bias[0]) > 1e-8);
  // ...the two biases are equal and opposite...
  for (int a = 0; a < 3; ++a) REQUIRE(close(bias[0][a], -bias[1][a], 1e-10));
  // ...so the dual average restores the body momentum exactly.
  Vec3d avg = 0.5 * (grid.total_momentum(0) + grid.total_momentum(1));
  for (int a = 0; a < 3; ++a) REQUIRE(close(avg[a], p_body[a], 1e-12));

  // Dual-averaged angular momentum about the origin carries both the orbital
  // part and the affine state's internal part.
  Vec3d L_body{};
  for (const P& p : ps) L_body += p.mass * (cross(p.x, p.v) + ckmpm::axial(p.B));
  Vec3d L_avg = 0.5 * (grid_angular_about(grid, 0, {}) + grid_angular_about(grid, 1, {}));
  for (int a = 0; a < 3; ++a) REQUIRE(close(L_avg[a], L_body[a], 1e-10));
}

TEST_CASE("rest-state solids scatter exactly zero force") {
  const double dx = 1.0 / 16.0;
  Grid grid({16, 16, 16}, dx, true);
  std::vector<P> ps = random_cloud(10, 505, 0.3, 0.7);  // F = identity

  Material<double> mat;
  mat.model = MaterialModel::fixed_corotated;
  mat.density = 1000;
  mat.E = 1e5;
  mat.nu = 0.3;
  ckmpm::finalize_material(mat);
  std::vector<Material<double>> mats{mat};

  activate_for(grid, ps);
  ckmpm::p2g_pic<double>(ps, grid);
  std::vector<GridNode<double>> before;
  for (const auto& b : grid.blocks())
    for (int n = 0; n < 2 * kN; ++n) before.push_back(b.nodes[n]);

  ckmpm::p2g_force<double>(ps, grid, mats, 1e-3);
  std::size_t idx = 0;
  for (const auto& b : grid.blocks())
    for (int n = 0; n < 2 * kN; ++n) {
      REQUIRE(b.nodes[n].mass == before[idx].mass);
      for (int a = 0; a < 3; ++a) REQUIRE(b.nodes[n].p[a] == before[idx].p[a]);
      ++idx;
    }
}

TEST_CASE("force scatter adds no net momentum and no mass on either grid") {
  const double dx = 1.0 / 16.0;
  Grid grid({16, 16, 16}, dx, true);
  std::vector<P> ps = random_cloud(10, 606, 0.3, 0.7, 0.0, /*f_scale=*/0.1);

  Material<double> mat;
  mat.model = MaterialModel::fixed_corotated;
  mat.density = 1000;
  mat.E = 1e5;
  mat.nu = 0.3;
  ckmpm::finalize_material(mat);
  std::vector<Material<double>> mats{mat};

  activate_for(grid, ps);
  ckmpm::p2g_pic<double>(ps, grid);
  const double dt = 1e-3;
  double mass_before[2] = {grid.total_mass(0), grid.total_mass(1)};
  Vec3d mom_before[2] = {grid.total_momentum(0), grid.total_momentum(1)};
  ckmpm::p2g_force<double>(ps, grid, mats, dt);

  // Impulse scale: dt * |A| / dx summed over particles bounds each nodal
  // contribution; the per-grid gradient sum collapses it by ~10 orders.
  double impulse_scale = 0;
  for (const P& p : ps)
    impulse_scale += dt * ckmpm::frobenius_norm(ckmpm::force_matrix(p, mat)) / dx;
  for (int g = 0; g < 2; ++g) {
    REQUIRE(grid.total_mass(g) == mass_before[g]);
    Vec3d dp = grid.total_momentum(g) - mom_before[g];
    REQUIRE(norm_inf(dp) <= 1e-10 * impulse_scale);
  }
}

TEST_CASE("pressurized fluid neighbors push apart and stretched ones pull together") {
  const double dx = 1.0 / 16.0;
  const double dt = 1e-2;

  Material<double> fluid;
  fluid.model = MaterialModel::j_fluid;
  fluid.density = 1000;
  fluid.bulk = 10.0;
  fluid.gamma = 7.15;
  ckmpm::finalize_material(fluid);
  std::vector<Material<double>> mats{fluid};

  auto run_pair = [&](double J) {
    Grid grid({16, 16, 16}, dx, true);
    Vec3d c{0.5031, 0.5017, 0.4983};
    std::vector<P> ps(2);
    ps[0].x = c - Vec3d{0.3 * dx, 0.0, 0.0};
    ps[1].x = c + Vec3d{0.3 * dx, 0.0, 0.0};
    for (P& p : ps) {
      p.mass = 1e-3;
      p.volume0 = 1e-6;
      p.J = J;
    }
    activate_for(grid, ps);
    ckmpm::p2g_pic<double>(ps, grid);
    ckmpm::p2g_force<double>(ps, grid, mats, dt);
    ckmpm::grid_update<double>(grid, 0.0, {}, {}, 0.0);
    Vec3d v0 = ckmpm::g2p_pic(ps[0], grid);
    Vec3d v1 = ckmpm::g2p_pic(ps[1], grid);
    return std::pair<double, double>{v0.x, v1.x};
  };

  auto [left_c, right_c] = run_pair(0.9);  // compressed: positive pressure
  REQUIRE(left_c < 0.0);
  REQUIRE(right_c > 0.0);

  auto [left_t, right_t] = run_pair(1.1);  // stretched: tension pulls inward
  REQUIRE(left_t > 0.0);
  REQUIRE(right_t < 0.0);
}

TEST_CASE("grid update normalizes momentum, applies gravity and zeroes dust") {
  const double dx = 1.0 / 16.0;
  Grid grid({16, 16, 16}, dx, true);
  grid.set_checked(true);
  std::vector<P> ps = random_cloud(15, 707, 0.3, 0.7);
  activate_for(grid, ps);
  ckmpm::p2g_pic<double>(ps, grid);

  // Plant a dust node (below threshold) inside an active block.
  Int3 dust{-1, -1, -1};
  for (const auto& b : grid.blocks()) {
    for (int n = 0; n < kN && dust.x < 0; ++n)
      if (b.nodes[n].mass == 0.0)
        dust = {b.coord.x * 4 + ((n >> 4) & 3), b.coord.y * 4 + ((n >> 2) & 3),
                b.coord.z * 4 + (n & 3)};
    if (dust.x >= 0) break;
  }
  REQUIRE(dust.x >= 0);
  GridNode<double>& dn = grid.node_by_index(0, dust.x, dust.y, dust.z);
  dn.mass = 1e-25;
  dn.p = {1.0, 1.0, 1.0};

  // Record the massive nodes, then normalize with gravity.
  struct Rec {
    int slot;
    Int3 node;
    double mass;
    Vec3d p;
  };
  std::vector<Rec> recs;
  for (const auto& b : grid.blocks())
    for (int g = 0; g < 2; ++g)
      for (int n = 0; n < kN; ++n) {
        const GridNode<double>& nd = b.nodes[g * kN + n];
        if (nd.mass > 1e-20)
          recs.push_back({g,
                          {b.coord.x * 4 + ((n >> 4) & 3), b.coord.y * 4 + ((n >> 2) & 3),
                           b.coord.z * 4 + (n & 3)},
                          nd.mass,
                          nd.p});
      }

  const double dt = 2e-3;
  const Vec3d gravity{0.0, -9.8, 0.0};
  ckmpm::grid_update<double>(grid, dt, gravity, {}, 1e-20);

  for (const Rec& r : recs) {
    Vec3d v = grid.node_by_index(r.slot, r.node.x, r.node.y, r.node.z).p;
    for (int a = 0; a < 3; ++a)
      REQUIRE(close(v[a], r.p[a] / r.mass + dt * gravity[a], 1e-14));
  }
  REQUIRE(dn.mass == 0.0);
  REQUIRE(norm2(dn.p) == 0.0);

  // A sticky wall region pins every contained node to zero velocity.
  grid.clear();
  ckmpm::p2g_pic<double>(ps, grid);
  BoundaryCondition<double> wall;
  wall.kind = ckmpm::BcKind::sticky;
  wall.lo = {0.0, 0.0, 0.0};
  wall.hi = {1.0, 0.45, 1.0};
  std::vector<BoundaryCondition<double>> bcs{wall};
  ckmpm::grid_update<double>(grid, dt, gravity, bcs, 1e-20);
  int pinned = 0;
  for (const auto& b : grid.blocks())
    for (int g = 0; g < 2; ++g)
      for (int n = 0; n < kN; ++n) {
        const GridNode<double>& nd = b.nodes[g * kN + n];
        if (nd.mass <= 0.0) continue;
        Vec3d x = grid.node_position(b.coord, g, n);
        if (wall.contains(x)) {
          REQUIRE(norm2(nd.p) == 0.0);
          ++pinned;
        }
      }
  REQUIRE(pinned > 0);
}

TEST_CASE("dual-average gather reproduces constant and affine nodal fields") {
  const double dx = 1.0 / 16.0;
  Grid grid({16, 16, 16}, dx, true);
  grid.set_checked(true);
  std::vector<P> ps = random_cloud(20, 808, 0.3, 0.7);
  activate_for(grid, ps);

  SECTION("constant field") {
    const Vec3d c{0.7, -1.3, 0.4};
    fill_nodes(grid, [&](const Vec3d&, GridNode<double>& nd) {
      nd.mass = 1.0;
      nd.p = c;
    });
    for (const P& p : ps) {
      GatherResult<double> g = ckmpm::gather_one(p.x, grid);
      for (int a = 0; a < 3; ++a) REQUIRE(close(g.v[a], c[a], 1e-14));
      REQUIRE(close(g.massive_weight, 1.0, 1e-14));
      REQUIRE(test_support::max_abs_diff(g.B, Mat3d{}) <= 1e-13 * dx * norm(c));
      REQUIRE(test_support::max_abs_diff(g.gradv, Mat3d{}) <= 1e-9 * norm(c) / dx);
    }
  }

  SECTION("affine and rotational fields") {
    Rng rng(809);
    Mat3d As[2] = {rng.mat(0.8), skew({0.4, -0.7, 0.9})};
    for (const Mat3d& A : As) {
      fill_nodes(grid, [&](const Vec3d& x, GridNode<double>& nd) {
        nd.mass = 1.0;
        nd.p = A * x;
      });
      for (const P& p : ps) {
        Vec3d v = ckmpm::g2p_pic(p, grid);
        Vec3d expect = A * p.x;
        for (int a = 0; a < 3; ++a) REQUIRE(close(v[a], expect[a], 1e-11));

        // Gathered affine state equals the field matrix times the joint
        // second-moment matrix.
        Mat3d B = ckmpm::g2p_apic_B(p, grid);
        Mat3d BD = A * ckmpm::compute_apic_D(p.x, dx);
        REQUIRE(test_support::max_abs_diff(B, BD) <=
                1e-10 * std::max(1.0, ckmpm::frobenius_norm(BD)));

        // The gradient gather reconstructs the field matrix itself.
        Mat3d G = ckmpm::velocity_gradient(p, grid);
        REQUIRE(test_support::max_abs_diff(G, A) <=
                1e-8 * std::max(1.0, ckmpm::frobenius_norm(A)));
      }
    }
  }

  SECTION("one offset grid alone misreads an affine field") {
    Rng rng(810);
    Mat3d A = rng.mat(0.8);
    fill_nodes(grid, [&](const Vec3d& x, GridNode<double>& nd) {
      nd.mass = 1.0;
      nd.p = A * x;
    });
    const P& p = ps[0];
    ckmpm::DualStencil<double> ds = ckmpm::dual_stencil(p.x, dx);
    for (int g = 0; g < 2; ++g) {
      Vec3d v_single{};
      const auto& ax = ds.ax[g];
      for (int s = 0; s < 2; ++s)
        for (int t = 0; t < 2; ++t)
          for (int u = 0; u < 2; ++u) {
            double w = (s ? ax[0].w1 : ax[0].w0) * (t ? ax[1].w1 : ax[1].w0) *
                       (u ? ax[2].w1 : ax[2].w0);
            v_single += w * grid
                                .node_by_index(g, ax[0].base + s, ax[1].base + t,
                                               ax[2].base + u)
                                .p;
          }
      // Full-weight single-grid read: biased by the kernel's first moment.
      REQUIRE(norm_inf(v_single - A * p.x) > 1e-5);
    }
    Vec3d v_dual = ckmpm::g2p_pic(p, grid);
    REQUIRE(norm_inf(v_dual - A * p.x) <= 1e-11);
  }
}

TEST_CASE("round trip returns a particle its velocity; mass weighting would shrink it") {
  const double dx = 1.0 / 16.0;
  Grid grid({16, 16, 16}, dx, true);
  grid.set_checked(true);
  std::vector<P> ps(1);
  ps[0].x = {0.4371, 0.5529, 0.4907};
  ps[0].v = {0.8, -0.6, 0.35};
  ps[0].mass = 2.5e-3;
  activate_for(grid, ps);
  ckmpm::p2g_pic<double>(ps, grid);
  ckmpm::grid_update<double>(grid, 0.0, {}, {}, 0.0);

  Vec3d v_back = ckmpm::g2p_pic(ps[0], grid);
  for (int a = 0; a < 3; ++a) REQUIRE(close(v_back[a], ps[0].v[a], 1e-13));

  // The alternative mass-weighted gather (1/(2m)) sum w m_i v_i contracts a
  // lone particle's velocity by the kernel's squared-weight sum (about half)
  // and is therefore not used: the plain dual average above is what keeps
  // the transfer momentum-exact.
  ckmpm::DualStencil<double> ds = ckmpm::dual_stencil(ps[0].x, dx);
  Vec3d v_mw{};
  for (int g = 0; g < 2; ++g) {
    const auto& ax = ds.ax[g];
    for (int s = 0; s < 2; ++s)
      for (int t = 0; t < 2; ++t)
        for (int u = 0; u < 2; ++u) {
          double w = (s ? ax[0].w1 : ax[0].w0) * (t ? ax[1].w1 : ax[1].w0) *
                     (u ? ax[2].w1 : ax[2].w0);
          const GridNode<double>& nd =
              grid.node_by_index(g, ax[0].base + s, ax[1].base + t, ax[2].base + u);
          v_mw += (0.5 * w / ps[0].mass) * (nd.mass * nd.p);
        }
  }
  for (int a = 0; a < 3; ++a) REQUIRE(std::abs(v_mw[a]) < std::abs(ps[0].v[a]));
  REQUIRE(norm(v_mw - ps[0].v) > 0.2 * norm(ps[0].v));
}

TEST_CASE("gather on an isolated particle reports the empty neighborhood") {
  const double dx = 1.0 / 16.0;
  Grid grid({16, 16, 16}, dx, true);
  grid.set_checked(true);
  std::vector<P> ps(1);
  ps[0].x = {0.5, 0.5, 0.5};
  ps[0].v = {1.0, 0.0, 0.0};
  ps[0].mass = 1.0;
  activate_for(grid, ps);  // active but never scattered: all nodes massless
  REQUIRE_THROWS_AS(ckmpm::g2p_pic(ps[0], grid), NumericalError);
  REQUIRE_THROWS_WITH(
      ckmpm::g2p_pic(ps[0], grid),
      Catch::Matchers::ContainsSubstring("no gathered mass around an isolated particle"));
}

TEST_CASE("deformation gradient update is exact for uniform velocity gradients") {
  Rng rng(909);
  Mat3d F = rng.near_identity(0.2);
  const double dt = 1e-3;

  Mat3d same = ckmpm::update_F(F, Mat3d{}, dt);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) REQUIRE(same[r][c] == F[r][c]);

  const double alpha = 0.7;
  Mat3d iso = ckmpm::update_F(Mat3d::identity(),
                              Mat3d::diag(alpha, alpha, alpha), dt);
  Mat3d expect = Mat3d::diag(1 + dt * alpha, 1 + dt * alpha, 1 + dt * alpha);
  REQUIRE(test_support::max_abs_diff(iso, expect) <= 1e-15);

  for (int trial = 0; trial < 25; ++trial) {
    Mat3d Fi = rng.near_identity(0.3);
    Mat3d G = rng.mat(2.0);
    Mat3d Fn = ckmpm::update_F(Fi, G, dt);
    double lhs = ckmpm::det(Fn);
    double rhs = ckmpm::det(Mat3d::identity() + dt * G) * ckmpm::det(Fi);
    REQUIRE(close(lhs, rhs, 1e-12));
  }
}

TEST_CASE("fitted shape functions reproduce affine fields exactly") {
  Rng rng(111);
  const int res = 16;
  const double dx = 1.0 / 16.0;

  for (int trial = 0; trial < 40; ++trial) {
    Vec3d xp = rng.vec(0.3, 0.7);
    Mat4<double> M = ckmpm::mls_moment(xp, dx);

    // Unit zeroth moment, vanishing first moments, symmetry; and agreement
    // with the dense double-grid summation.
    REQUIRE(close(M[0][0], 1.0, 1e-12));
    for (int i = 1; i < 4; ++i) {
      REQUIRE(std::abs(M[0][i]) <= 1e-12 * dx);
      REQUIRE(std::abs(M[i][0]) <= 1e-12 * dx);
    }
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) REQUIRE(close(M[i][j], M[j][i], 1e-14));
    dense_ref::Mat4Local M_ref = dense_ref::dense_M(xp, res, dx);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) REQUIRE(close(M[i][j], M_ref.a[i][j], 1e-12));

    Mat4<double> M_inv;
    REQUIRE(ckmpm::gauss_inverse4(M, M_inv));

    // Reproduction: fit the nodal samples of an affine field and evaluate at
    // the particle and at an offset query point. Sums run over every node of
    // both dense grids so the check is independent of stencil enumeration.
    Mat3d A = rng.mat(1.5);
    Vec3d c = rng.vec(-1.0, 1.0);
    Vec3d queries[2] = {xp, xp + Vec3d{0.2 * dx, -0.15 * dx, 0.1 * dx}};
    for (const Vec3d& z : queries) {
      Vec3d value{};
      Mat3d grad{};
      for (int tag = -1; tag <= 1; tag += 2) {
        double off = tag * dx / 4.0;
        for (int i = 0; i <= res; ++i)
          for (int j = 0; j <= res; ++j)
            for (int k = 0; k <= res; ++k) {
              Vec3d xn{i * dx + off, j * dx + off, k * dx + off};
              ckmpm::MlsShape<double> sh = ckmpm::mls_shape(xp, xn, z, dx, M_inv);
              if (sh.value == 0.0 && norm2(sh.grad) == 0.0) continue;
              Vec3d u = A * xn + c;
              value += (0.5 * sh.value) * u;
              for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) grad[a][b] += 0.5 * u[a] * sh.grad[b];
            }
      }
      Vec3d expect = A * z + c;
      for (int a = 0; a < 3; ++a) REQUIRE(close(value[a], expect[a], 1e-10));
      REQUIRE(test_support::max_abs_diff(grad, A) <=
              1e-8 * std::max(1.0, ckmpm::frobenius_norm(A)));
    }
  }
}

TEST_CASE("quadratic-spline baseline transfers on a single grid") {
  const double dx = 1.0 / 16.0;
  Grid grid({16, 16, 16}, dx, /*dual=*/false);
  grid.set_checked(true);
  REQUIRE(grid.grid_count() == 1);
  std::vector<P> ps = random_cloud(15, 212, 0.3, 0.7, /*b_scale=*/0.02 * dx);
  activate_for(grid, ps);

  TransferCounters counters;
  ckmpm::p2g_pic<double>(ps, grid, &counters);
  REQUIRE(counters.p2g_node_visits == 27u * ps.size());
  REQUIRE(close(grid.total_mass(0), body_mass(ps), 1e-13));
  Vec3d gm = grid.total_momentum(0);
  Vec3d p_body = body_momentum(ps);
  for (int a = 0; a < 3; ++a) REQUIRE(close(gm[a], p_body[a], 1e-13));

  // Splines reproduce linears on one grid, so even the affine scatter keeps
  // the per-grid momentum exact (no dual averaging needed).
  grid.clear();
  ckmpm::p2g_apic<double>(ps, grid);
  gm = grid.total_momentum(0);
  for (int a = 0; a < 3; ++a) REQUIRE(close(gm[a], p_body[a], 1e-12));

  // Gather-side reproduction on the single grid.
  Rng rng(213);
  Mat3d A = rng.mat(0.8);
  fill_nodes(grid, [&](const Vec3d& x, GridNode<double>& nd) {
    nd.mass = 1.0;
    nd.p = A * x;
  });
  TransferCounters gcount;
  for (const P& p : ps) {
    Vec3d v = ckmpm::g2p_pic(p, grid, &gcount);
    Vec3d expect = A * p.x;
    for (int a = 0; a < 3; ++a) REQUIRE(close(v[a], expect[a], 1e-11));
    Mat3d G = ckmpm::velocity_gradient(p, grid);
    REQUIRE(test_support::max_abs_diff(G, A) <=
            1e-8 * std::max(1.0, ckmpm::frobenius_norm(A)));
  }
  REQUIRE(gcount.g2p_node_visits == 27u * ps.size());
  REQUIRE(gcount.g2p_transfers == ps.size());
}

TEST_CASE("transfer counters track the exact stencil footprint") {
  const double dx = 1.0 / 16.0;
  Grid grid({16, 16, 16}, dx, true);
  std::vector<P> ps = random_cloud(7, 314, 0.3, 0.7);
  activate_for(grid, ps);

  TransferCounters counters;
  ckmpm::p2g_pic<double>(ps, grid, &counters);
  ckmpm::grid_update<double>(grid, 0.0, {}, {}, 0.0);
  for (const P& p : ps) (void)ckmpm::g2p_pic(p, grid, &counters);

  REQUIRE(counters.p2g_node_visits == 16u * ps.size());
  REQUIRE(counters.g2p_node_visits == 16u * ps.size());
  REQUIRE(counters.p2g_transfers == ps.size());
  REQUIRE(counters.g2p_transfers == ps.size());

  TransferCounters more;
  more.p2g_node_visits = 10;
  more += counters;
  REQUIRE(more.p2g_node_visits == 10 + counters.p2g_node_visits);
}

TEST_CASE("one full step matches the dense brute-force reference") {
  const int res = 8;
  const double dx = 1.0 / 8.0;
  const double dt = 1e-3;
  const Vec3d gravity{0.0, -10.0, 0.0};

  Material<double> solid;
  solid.model = MaterialModel::fixed_corotated;
  solid.density = 2.0;
  solid.E = 100.0;
  solid.nu = 0.3;
  ckmpm::finalize_material(solid);
  std::vector<Material<double>> mats{solid};

  auto seed_particles = [&](std::uint64_t seed, double b_scale, double f_scale) {
    return random_cloud(5, seed, 0.3, 0.7, b_scale, f_scale);
  };

  auto compare = [&](const std::vector<P>& eng, const std::vector<P>& ref, double tol,
                     bool check_B, bool check_J) {
    REQUIRE(eng.size() == ref.size());
    for (std::size_t i = 0; i < eng.size(); ++i) {
      for (int a = 0; a < 3; ++a) {
        REQUIRE(close(eng[i].x[a], ref[i].x[a], tol));
        REQUIRE(close(eng[i].v[a], ref[i].v[a], tol));
      }
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
          REQUIRE(close(eng[i].F[r][c], ref[i].F[r][c], tol));
          if (check_B) REQUIRE(close(eng[i].B[r][c], ref[i].B[r][c], tol));
        }
      if (check_J) REQUIRE(close(eng[i].J, ref[i].J, tol));
    }
  };

  auto run_engine = [&](std::vector<P>& parts, TransferScheme scheme,
                        std::span<const Material<double>> ms, int steps) {
    Grid grid({res, res, res}, dx, true);
    grid.set_checked(true);
    StepParams<double> sp;
    sp.scheme = scheme;
    sp.dt = dt;
    sp.dx = dx;
    for (int s = 0; s < steps; ++s)
      ckmpm::full_step(parts, grid, ms, sp, gravity, {}, 0.0);
  };

  SECTION("velocity transfer scheme, one step and three steps") {
    for (int steps : {1, 3}) {
      std::vector<P> eng = seed_particles(42, 0.0, 0.05);
      std::vector<P> ref = eng;
      run_engine(eng, TransferScheme::pic, mats, steps);
      for (int s = 0; s < steps; ++s)
        dense_ref::reference_step(ref, mats, TransferScheme::pic, res, dx, dt, gravity,
                                  0.0);
      compare(eng, ref, steps == 1 ? 1e-12 : 1e-10, false, false);
    }
  }

  SECTION("affine transfer scheme") {
    std::vector<P> eng = seed_particles(43, 0.005 * dx, 0.05);
    std::vector<P> ref = eng;
    run_engine(eng, TransferScheme::apic, mats, 1);
    dense_ref::reference_step(ref, mats, TransferScheme::apic, res, dx, dt, gravity,
                              0.0);
    compare(eng, ref, 1e-10, true, false);
  }

  SECTION("fitted-shape transfer scheme") {
    std::vector<P> eng = seed_particles(44, 0.005 * dx, 0.05);
    std::vector<P> ref = eng;
    run_engine(eng, TransferScheme::mls, mats, 1);
    dense_ref::reference_step(ref, mats, TransferScheme::mls, res, dx, dt, gravity,
                              0.0);
    compare(eng, ref, 1e-10, true, false);
  }

  SECTION("equation-of-state fluid under the affine scheme") {
    Material<double> fluid;
    fluid.model = MaterialModel::j_fluid;
    fluid.density = 1000.0;
    fluid.bulk = 10.0;
    fluid.gamma = 7.15;
    fluid.viscosity = 0.0;
    ckmpm::finalize_material(fluid);
    std::vector<Material<double>> fmats{fluid};

    std::vector<P> eng = seed_particles(45, 0.005 * dx, 0.0);
    Rng rng(46);
    for (P& p : eng) p.J = rng.in(0.95, 1.05);
    std::vector<P> ref = eng;
    run_engine(eng, TransferScheme::apic, fmats, 1);
    dense_ref::reference_step(ref, fmats, TransferScheme::apic, res, dx, dt, gravity,
                              0.0);
    compare(eng, ref, 1e-10, true, true);
  }
}

TEST_CASE("repeated stepping conserves mass, momentum and angular momentum") {
  const int res = 16;
  const double dx = 1.0 / 16.0;
  const double dt = 5e-4;
  const int steps = 1000;

  Material<double> soft;
  soft.model = MaterialModel::fixed_corotated;
  soft.density = 1000.0;
  soft.E = 50.0;
  soft.nu = 0.3;
  ckmpm::finalize_material(soft);
  std::vector<Material<double>> mats{soft};

  auto drift_run = [&](TransferScheme scheme, double b_scale) {
    Rng rng(515);
    std::vector<P> ps(25);
    for (P& p : ps) {
      p.x = rng.vec(0.38, 0.62);
      // Small random velocities around a net drift so the reference
      // momentum is far from a lucky zero.
      p.v = Vec3d{0.02, 0.01, -0.015} + rng.vec(-0.03, 0.03);
      p.mass = 1e-3 * rng.in(0.5, 2.0);
      p.volume0 = 1e-6;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) p.B[r][c] = b_scale * rng.symm();
    }

    Vec3d p0 = body_momentum(ps);
    Vec3d L0{};
    for (const P& p : ps) L0 += p.mass * (cross(p.x, p.v) + ckmpm::axial(p.B));
    double p_scale = 0, L_scale = 0;
    for (const P& p : ps) {
      p_scale += p.mass * norm(p.v);
      L_scale += p.mass * (norm(p.x) * norm(p.v) + ckmpm::frobenius_norm(p.B));
    }

    Grid grid({res, res, res}, dx, true);
    StepParams<double> sp;
    sp.scheme = scheme;
    sp.dt = dt;
    sp.dx = dx;

    double max_p_drift = 0, max_L_drift = 0, max_mass_dev = 0;
    const double m_body = body_mass(ps);
    for (int s = 0; s < steps; ++s) {
      ckmpm::full_step(ps, grid, std::span<const Material<double>>(mats), sp, Vec3d{},
                       {}, 0.0);
      for (int g = 0; g < 2; ++g)
        max_mass_dev =
            std::max(max_mass_dev, std::abs(grid.total_mass(g) - m_body) / m_body);
      Vec3d pn = body_momentum(ps);
      max_p_drift = std::max(max_p_drift, norm_inf(pn - p0));
      Vec3d Ln{};
      for (const P& p : ps) Ln += p.mass * (cross(p.x, p.v) + ckmpm::axial(p.B));
      max_L_drift = std::max(max_L_drift, norm_inf(Ln - L0));
    }
    return std::tuple<double, double, double, double, double>{
        max_p_drift, p_scale, max_L_drift, L_scale, max_mass_dev};
  };

  SECTION("velocity transfers") {
    auto [p_drift, p_scale, L_drift, L_scale, mass_dev] =
        drift_run(TransferScheme::pic, 0.0);
    REQUIRE(mass_dev <= 1e-10);
    REQUIRE(p_drift <= 1e-8 * p_scale);
    (void)L_drift;
    (void)L_scale;
  }

  SECTION("affine transfers") {
    auto [p_drift, p_scale, L_drift, L_scale, mass_dev] =
        drift_run(TransferScheme::apic, 0.005 * dx);
    REQUIRE(mass_dev <= 1e-10);
    REQUIRE(p_drift <= 1e-8 * p_scale);
    REQUIRE(L_drift <= 1e-6 * L_scale);
  }
}

TEST_CASE("fitted-shape step holds a resting body still and translates a moving one") {
  const int res = 16;
  const double dx = 1.0 / 16.0;
  const double dt = 1e-3;

  Material<double> solid;
  solid.model = MaterialModel::fixed_corotated;
  solid.density = 1000.0;
  solid.E = 1e4;
  solid.nu = 0.3;
  ckmpm::finalize_material(solid);
  std::vector<Material<double>> mats{solid};

  std::vector<P> ps = random_cloud(12, 616, 0.4, 0.6);
  for (P& p : ps) p.v = {};
  std::vector<Vec3d> x0;
  for (const P& p : ps) x0.push_back(p.x);

  Grid grid({res, res, res}, dx, true);
  ckmpm::mls_step_variant(ps, grid, std::span<const Material<double>>(mats), dt,
                          Vec3d{}, {}, 0.0);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    REQUIRE(norm_inf(ps[i].v) <= 1e-13);
    REQUIRE(norm_inf(ps[i].x - x0[i]) <= 1e-15);
    REQUIRE(test_support::max_abs_diff(ps[i].F, Mat3d::identity()) <= 1e-12);
  }

  const Vec3d v0{0.3, -0.2, 0.1};
  for (std::size_t i = 0; i < ps.size(); ++i) {
    ps[i].v = v0;
    ps[i].x = x0[i];
    ps[i].B = Mat3d{};
    ps[i].F = Mat3d::identity();
  }
  ckmpm::mls_step_variant(ps, grid, std::span<const Material<double>>(mats), dt,
                          Vec3d{}, {}, 0.0);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    REQUIRE(norm_inf(ps[i].v - v0) <= 1e-13);
    REQUIRE(norm_inf(ps[i].x - (x0[i] + dt * v0)) <= 1e-14);
    REQUIRE(test_support::max_abs_diff(ps[i].F, Mat3d::identity()) <= 1e-12);
  }
}
