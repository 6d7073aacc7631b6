#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "errors.hpp"
#include "kernel.hpp"
#include "math.hpp"

namespace ckmpm {

template <typename T>
struct GridNode {
  T mass{};
  Vec3<T> p{};  // momentum during scatter, velocity after the grid update
};

enum class BcKind { sticky, slip, separate };

// Region-based nodal boundary condition. The region is a world-space box
// (half-spaces expressed with infinite extents), identical on both grids.
// Sticky regions may prescribe a rigid velocity field v0 + omega x (x - c);
// the default (all zero) is the classic sticky wall.
template <typename T>
struct BoundaryCondition {
  BcKind kind = BcKind::sticky;
  Vec3<T> lo{}, hi{};
  Vec3<T> normal{};               // slip / separate, unit outward
  Vec3<T> velocity{};             // sticky
  Vec3<T> omega{}, center{};      // sticky rotation

  bool contains(const Vec3<T>& x) const {
    return x.x >= lo.x && x.x <= hi.x && x.y >= lo.y && x.y <= hi.y &&
           x.z >= lo.z && x.z <= hi.z;
  }
  Vec3<T> prescribed_velocity(const Vec3<T>& x) const {
    return velocity + cross(omega, x - center);
  }
  void apply(const Vec3<T>& x, Vec3<T>& v) const {
    switch (kind) {
      case BcKind::sticky:
        v = prescribed_velocity(x);
        break;
      case BcKind::slip:
        v -= dot(v, normal) * normal;
        break;
      case BcKind::separate: {
        T vn = dot(v, normal);
        if (vn < T(0)) v -= vn * normal;
        break;
      }
    }
  }
};

// Applies one boundary condition to a nodal velocity if the node lies inside
// the region; returns whether it matched.
template <typename T>
inline bool apply_boundary(const BoundaryCondition<T>& bc, const Vec3<T>& x,
                           Vec3<T>& v) {
  if (!bc.contains(x)) return false;
  bc.apply(x, v);
  return true;
}

// Paired sparse storage for the two staggered grids. Blocks span 4x4x4 nodes;
// a block coordinate addresses the same spatial block on both grids, whose
// node lattices differ only by the +/- dx/4 stagger. A dense block directory
// over the (inset) domain maps block coordinates to allocated slots.
//
// In single-grid mode (the quadratic baseline) only grid slot 0 exists and
// nodes sit at i*dx with no stagger.
template <typename T>
class BlockSparseGrid {
 public:
  static constexpr int kBlockDim = 4;
  static constexpr int kNodesPerGrid = kBlockDim * kBlockDim * kBlockDim;

  struct Block {
    Int3 coord;
    std::array<GridNode<T>, 2 * kNodesPerGrid> nodes;
  };

  BlockSparseGrid(Int3 resolution, T dx, bool dual)
      : res_(resolution), dx_(dx), dual_(dual) {
    if (resolution.x <= 0 || resolution.y <= 0 || resolution.z <= 0)
      throw ConfigError("grid resolution must be positive");
    if (!(dx > T(0))) throw ConfigError("grid dx must be positive");
    dir_dims_ = {resolution.x / kBlockDim + 2, resolution.y / kBlockDim + 2,
                 resolution.z / kBlockDim + 2};
    directory_.assign(static_cast<std::size_t>(dir_dims_.x) * dir_dims_.y * dir_dims_.z,
                      -1);
#ifndef NDEBUG
    checked_ = true;
#endif
  }

  Int3 resolution() const { return res_; }
  T dx() const { return dx_; }
  bool dual() const { return dual_; }
  int grid_count() const { return dual_ ? 2 : 1; }
  // Grid slot 0 holds k=-1 (dual) or the centered grid (single); slot 1 holds k=+1.
  int grid_tag(int slot) const { return dual_ ? (slot == 0 ? -1 : +1) : 0; }

  void set_checked(bool on) { checked_ = on; }
  bool checked() const { return checked_; }

  // Rebuilds the active block set from particle stencil footprints plus a
  // one-block halo in each positive direction; blocks no longer touched are
  // released. Throws OutOfDomainError for particles within 2 cells of the
  // domain boundary (or outside it).
  void activate(std::span<const Vec3<T>> positions) {
    std::fill(directory_.begin(), directory_.end(), int32_t(-1));
    blocks_.clear();
    const T inv_dx = T(1) / dx_;
    for (std::size_t pi = 0; pi < positions.size(); ++pi) {
      const Vec3<T>& x = positions[pi];
      Int3 lo_b, hi_b;
      for (int a = 0; a < 3; ++a) {
        T s = x[a] * inv_dx;
        if (!(s >= T(2) && s <= T(res_[a] - 2)))
          throw OutOfDomainError(
              pi, "particle " + std::to_string(pi) +
                      " violates the 2-cell domain inset on axis " + std::to_string(a));
        int lo_node, hi_node;
        if (dual_) {
          int base_plus = static_cast<int>(std::floor(s - T(0.25)));
          int base_minus = static_cast<int>(std::floor(s + T(0.25)));
          lo_node = base_plus;
          hi_node = base_minus + 1;
        } else {
          int base = static_cast<int>(std::floor(s - T(0.5)));
          lo_node = base;
          hi_node = base + 2;
        }
        (a == 0 ? lo_b.x : a == 1 ? lo_b.y : lo_b.z) = lo_node >> 2;
        (a == 0 ? hi_b.x : a == 1 ? hi_b.y : hi_b.z) = (hi_node >> 2) + 1;
      }
      for (int bi = lo_b.x; bi <= hi_b.x; ++bi)
        for (int bj = lo_b.y; bj <= hi_b.y; ++bj)
          for (int bk = lo_b.z; bk <= hi_b.z; ++bk) mark_block({bi, bj, bk});
    }
  }

  // Zeroes nodal fields, keeps the active set.
  void clear() {
    for (Block& b : blocks_)
      for (GridNode<T>& n : b.nodes) n = GridNode<T>{};
  }

  std::size_t active_block_count() const { return blocks_.size(); }
  std::span<Block> blocks() { return blocks_; }
  std::span<const Block> blocks() const { return blocks_; }

  int32_t block_slot(Int3 block) const {
    return directory_[dir_index(block)];
  }

  // Node lookup by global node index on one grid slot. In checked mode an
  // access that would land outside the active set throws (no pipeline phase
  // may touch inactive blocks).
  GridNode<T>& node_by_index(int grid_slot, int i, int j, int k) {
    int32_t slot = directory_[dir_index({i >> 2, j >> 2, k >> 2})];
    if (checked_ && slot < 0)
      throw NumericalError("access to inactive grid block at node (" +
                           std::to_string(i) + "," + std::to_string(j) + "," +
                           std::to_string(k) + ")");
    return blocks_[slot].nodes[node_offset(grid_slot, i, j, k)];
  }

  static int node_offset(int grid_slot, int i, int j, int k) {
    return (grid_slot << 6) | ((i & 3) << 4) | ((j & 3) << 2) | (k & 3);
  }

  // World position of a node addressed as (block, local cell) on grid k:
  // i*dx + k*(dx/4) per axis, with i the global node index.
  Vec3<T> node_world_position(Int3 block, int grid_tag_k, Int3 cell) const {
    if (block.x < 0 || block.y < 0 || block.z < 0 || block.x >= dir_dims_.x ||
        block.y >= dir_dims_.y || block.z >= dir_dims_.z)
      throw std::out_of_range("node_world_position: block index out of bounds");
    if (cell.x < 0 || cell.y < 0 || cell.z < 0 || cell.x >= kBlockDim ||
        cell.y >= kBlockDim || cell.z >= kBlockDim)
      throw std::out_of_range("node_world_position: cell index out of bounds");
    if (grid_tag_k != -1 && grid_tag_k != 0 && grid_tag_k != 1)
      throw std::out_of_range("node_world_position: grid tag must be -1, 0 or +1");
    return node_position_from_index(
        {block.x * kBlockDim + cell.x, block.y * kBlockDim + cell.y,
         block.z * kBlockDim + cell.z},
        grid_tag_k);
  }

  Vec3<T> node_position_from_index(Int3 node, int grid_tag_k) const {
    T off = T(grid_tag_k) * T(0.25) * dx_;
    return {T(node.x) * dx_ + off, T(node.y) * dx_ + off, T(node.z) * dx_ + off};
  }

  T total_mass(int grid_slot) const {
    T m = 0;
    for (const Block& b : blocks_)
      for (int n = 0; n < kNodesPerGrid; ++n)
        m += b.nodes[grid_slot * kNodesPerGrid + n].mass;
    return m;
  }

  Vec3<T> total_momentum(int grid_slot) const {
    Vec3<T> p{};
    for (const Block& b : blocks_)
      for (int n = 0; n < kNodesPerGrid; ++n)
        p += b.nodes[grid_slot * kNodesPerGrid + n].p;
    return p;
  }

  // Momentum-weighted angular momentum about the origin (valid after P2G,
  // while node.p still holds momentum).
  Vec3<T> total_angular_momentum(int grid_slot) const {
    Vec3<T> L{};
    for (const Block& b : blocks_)
      for (int n = 0; n < kNodesPerGrid; ++n) {
        const GridNode<T>& nd = b.nodes[grid_slot * kNodesPerGrid + n];
        if (nd.mass == T(0) && norm2(nd.p) == T(0)) continue;
        L += cross(node_position(b.coord, grid_slot, n), nd.p);
      }
    return L;
  }

  Vec3<T> node_position(Int3 block, int grid_slot, int packed_node) const {
    Int3 cell{(packed_node >> 4) & 3, (packed_node >> 2) & 3, packed_node & 3};
    return node_world_position(block, grid_tag(grid_slot), cell);
  }

  // Applies region boundary conditions to nodal velocities on every grid.
  void apply_boundaries(std::span<const BoundaryCondition<T>> bcs) {
    if (bcs.empty()) return;
    for (Block& b : blocks_)
      for (int g = 0; g < grid_count(); ++g)
        for (int n = 0; n < kNodesPerGrid; ++n) {
          GridNode<T>& nd = b.nodes[g * kNodesPerGrid + n];
          if (nd.mass <= T(0)) continue;
          Vec3<T> x = node_position(b.coord, g, n);
          for (const BoundaryCondition<T>& bc : bcs)
            if (bc.contains(x)) bc.apply(x, nd.p);
        }
  }

  // Debug dump: one row per (active block, grid), with that grid's block mass.
  void dump_blocks_csv(std::ostream& os) const {
    os << "block_i,block_j,block_k,grid_tag,mass_total\n";
    for (const Block& b : blocks_)
      for (int g = 0; g < grid_count(); ++g) {
        T m = 0;
        for (int n = 0; n < kNodesPerGrid; ++n)
          m += b.nodes[g * kNodesPerGrid + n].mass;
        os << b.coord.x << ',' << b.coord.y << ',' << b.coord.z << ','
           << grid_tag(g) << ',' << m << '\n';
      }
  }

 private:
  std::size_t dir_index(Int3 block) const {
    return (static_cast<std::size_t>(block.x) * dir_dims_.y + block.y) * dir_dims_.z +
           block.z;
  }

  void mark_block(Int3 coord) {
    int32_t& slot = directory_[dir_index(coord)];
    if (slot < 0) {
      slot = static_cast<int32_t>(blocks_.size());
      blocks_.push_back(Block{coord, {}});
    }
  }

  Int3 res_;
  T dx_;
  bool dual_;
  Int3 dir_dims_;
  std::vector<int32_t> directory_;
  std::vector<Block> blocks_;
  bool checked_ = false;
};

}  // namespace ckmpm
