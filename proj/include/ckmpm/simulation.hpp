#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "errors.hpp"
#include "grid.hpp"
#include "material.hpp"
#include "math.hpp"
#include "parallel.hpp"
#include "scene.hpp"
#include "transfer.hpp"

namespace ckmpm {

template <typename T>
inline Vec3<T> total_momentum(std::span<const Particle<T>> particles) {
  Vec3<T> m{};
  for (const Particle<T>& p : particles) m += p.mass * p.v;
  return m;
}

// Wall-clock seconds accumulated per pipeline phase across substeps.
struct PhaseTimers {
  double sort_s = 0, activate_s = 0, clear_s = 0, p2g_s = 0, grid_s = 0, g2p_s = 0;
  std::uint64_t substeps = 0;

  double total() const {
    return sort_s + activate_s + clear_s + p2g_s + grid_s + g2p_s;
  }
  double transfer_total() const { return p2g_s + g2p_s; }
};

template <typename T>
struct DiagnosticsRow {
  std::uint64_t step = 0;
  T time = 0;
  Vec3<T> momentum{};           // sum_p m v
  Vec3<T> angular{};            // sum_p m x cross v, about the origin
  Vec3<T> momentum_massfree{};  // sum_p v
  T kinetic_energy = 0;
  T vmax = 0;                   // max particle speed (2-norm)
};

template <typename T>
inline DiagnosticsRow<T> compute_diagnostics(std::span<const Particle<T>> particles,
                                             std::uint64_t step, T time) {
  DiagnosticsRow<T> row;
  row.step = step;
  row.time = time;
  for (const Particle<T>& p : particles) {
    row.momentum += p.mass * p.v;
    row.angular += p.mass * cross(p.x, p.v);
    row.momentum_massfree += p.v;
    row.kinetic_energy += T(0.5) * p.mass * norm2(p.v);
    row.vmax = std::max(row.vmax, norm(p.v));
  }
  return row;
}

// Elastic wave speed bounds used by the adaptive step: P-wave speed for
// solids, equation-of-state sound speed at the current tightest compression
// for fluids.
template <typename T>
inline T sound_speed_solid(const Material<T>& m) {
  return std::sqrt((m.lambda + T(2) * m.mu) / m.density);
}

template <typename T>
inline T sound_speed_fluid(const Material<T>& m, T J_min) {
  // c^2 = d p / d rho = B gamma J^(1-gamma) / rho0
  return std::sqrt(m.bulk * m.gamma * std::pow(J_min, T(1) - m.gamma) / m.density);
}

template <typename T>
class Simulation {
 public:
  explicit Simulation(SimConfig<T> cfg) : cfg_(validated(std::move(cfg))) {
    grid_.emplace(Int3{cfg_.resolution, cfg_.resolution, cfg_.resolution}, cfg_.dx(),
                  cfg_.kernel == KernelKind::compact);
    particles_ = seed_particles(cfg_);
    mass_eps_ = compute_mass_epsilon();
    min_j_.assign(cfg_.materials.size(), T(1));
    int want = cfg_.threads > 0
                   ? cfg_.threads
                   : static_cast<int>(std::thread::hardware_concurrency());
    if (want < 1) want = 1;
    if (ThreadPool::instance().thread_count() != want)
      ThreadPool::instance().set_thread_count(want);
    refresh_velocity_stats();
  }

  const SimConfig<T>& config() const { return cfg_; }
  BlockSparseGrid<T>& grid() { return *grid_; }
  const BlockSparseGrid<T>& grid() const { return *grid_; }
  std::vector<Particle<T>>& particles() { return particles_; }
  std::span<const Particle<T>> particles() const { return particles_; }
  T time() const { return time_; }
  std::uint64_t step_count() const { return step_count_; }
  int frame_index() const { return frame_index_; }
  T mass_epsilon() const { return mass_eps_; }
  const TransferCounters& counters() const { return counters_; }
  void reset_counters() { counters_ = {}; }
  const PhaseTimers& timers() const { return timers_; }
  void reset_timers() { timers_ = {}; }

  // Restart plumbing: restores exact particle/time/step state saved by a
  // checkpoint. mass_epsilon is part of the saved state so the thresholding
  // behavior is bit-identical after the reload.
  void restore(std::vector<Particle<T>> particles, T time, std::uint64_t step,
               int frame, T mass_eps) {
    particles_ = std::move(particles);
    time_ = time;
    step_count_ = step;
    frame_index_ = frame;
    mass_eps_ = mass_eps;
    min_j_.assign(cfg_.materials.size(), T(1));
    refresh_velocity_stats();
  }

  // Adaptive step bound: cfl * dx / max(particle speed, material wave speed),
  // clamped by the optional hard cap and the remaining span. When nothing
  // moves and no material carries stiffness the remaining span is used.
  T cfl_dt(T remaining) const {
    T cmax = 0;
    for (std::size_t mi = 0; mi < cfg_.materials.size(); ++mi) {
      const Material<T>& m = cfg_.materials[mi];
      T c = m.is_fluid() ? sound_speed_fluid(m, min_j_[mi]) : sound_speed_solid(m);
      cmax = std::max(cmax, c);
    }
    T denom = std::max(vmax_, cmax);
    T dt = denom > T(0) ? cfg_.cfl * cfg_.dx() / denom : remaining;
    if (cfg_.max_dt > T(0)) dt = std::min(dt, cfg_.max_dt);
    return std::min(dt, remaining);
  }

  // One explicit substep: sort -> activate -> clear -> P2G (mass, momentum
  // and dt*force fused) -> grid update (+ boundaries) -> G2P + particle
  // state update + advection.
  void step(T dt) {
    using clock = std::chrono::steady_clock;
    const std::size_t n = particles_.size();
    auto t0 = clock::now();
    sort_particles();
    auto t1 = clock::now();
    positions_.resize(n);
    for (std::size_t i = 0; i < n; ++i) positions_[i] = particles_[i].x;
    grid_->activate(positions_);
    auto t2 = clock::now();
    grid_->clear();
    auto t3 = clock::now();
    scatter_all(dt);
    auto t4 = clock::now();
    {
      auto blocks = grid_->blocks();
      const auto bcs = std::span<const BoundaryCondition<T>>(cfg_.boundaries);
      parallel_for(blocks.size(), [&](std::size_t b, std::size_t e, int) {
        for (std::size_t i = b; i < e; ++i)
          grid_update_block<T>(blocks[i], *grid_, dt, cfg_.gravity, bcs, mass_eps_);
      });
    }
    auto t5 = clock::now();
    gather_all(dt);
    auto t6 = clock::now();

    time_ += dt;
    ++step_count_;
    auto secs = [](auto a, auto b) {
      return std::chrono::duration<double>(b - a).count();
    };
    timers_.sort_s += secs(t0, t1);
    timers_.activate_s += secs(t1, t2);
    timers_.clear_s += secs(t2, t3);
    timers_.p2g_s += secs(t3, t4);
    timers_.grid_s += secs(t4, t5);
    timers_.g2p_s += secs(t5, t6);
    timers_.substeps += 1;
  }

  // Runs substeps to the next frame boundary, invoking cb(sim, dt) after each
  // substep. Frame boundaries are computed as multiples of frame_dt so that
  // accumulated rounding cannot drift the schedule.
  template <typename Cb>
  void advance_frame(Cb&& cb) {
    T frame_end = cfg_.frame_dt * T(frame_index_ + 1);
    std::uint64_t steps_this_frame = 0;
    for (;;) {
      T rem = frame_end - time_;
      if (rem <= cfg_.frame_dt * T(1e-9)) {
        time_ = frame_end;
        break;
      }
      T dt = cfl_dt(rem);
      step(dt);
      cb(*this, dt);
      if (++steps_this_frame > cfg_.max_substeps_per_frame)
        throw NumericalError("substep limit exceeded within one frame at t = " +
                             std::to_string(static_cast<double>(time_)));
    }
    ++frame_index_;
  }

  void advance_frame() {
    advance_frame([](Simulation&, T) {});
  }

  DiagnosticsRow<T> diagnostics() const {
    return compute_diagnostics<T>(particles_, step_count_, time_);
  }

 private:
  static SimConfig<T> validated(SimConfig<T> cfg) {
    validate_config(cfg);
    return cfg;
  }

  T compute_mass_epsilon() const {
    std::vector<T> masses(particles_.size());
    for (std::size_t i = 0; i < particles_.size(); ++i) masses[i] = particles_[i].mass;
    std::nth_element(masses.begin(), masses.begin() + masses.size() / 2, masses.end());
    return T(1e-12) * masses[masses.size() / 2];
  }

  void refresh_velocity_stats() {
    T vm = 0;
    for (const Particle<T>& p : particles_) vm = std::max(vm, norm(p.v));
    vmax_ = vm;
    for (const Particle<T>& p : particles_) {
      const Material<T>& m = cfg_.materials[p.material];
      if (m.is_fluid()) min_j_[p.material] = std::min(min_j_[p.material], p.J);
    }
  }

  // Stable counting sort by the reference block of the k = -1 grid (base node
  // floor(x/dx + 1/4), block = base >> 2), run every substep so the particle
  // walk matches the block walk. Keys are clamped into the directory range;
  // genuinely out-of-domain particles are reported by activate right after.
  void sort_particles() {
    const std::size_t n = particles_.size();
    const T inv_dx = T(1) / cfg_.dx();
    Int3 dims{cfg_.resolution / 4 + 2, cfg_.resolution / 4 + 2,
              cfg_.resolution / 4 + 2};
    const std::size_t nbuckets =
        static_cast<std::size_t>(dims.x) * dims.y * dims.z;
    keys_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3<T>& x = particles_[i].x;
      auto key1 = [&](T c, int dim) {
        int b = static_cast<int>(std::floor(c * inv_dx + T(0.25))) >> 2;
        return std::clamp(b, 0, dim - 1);
      };
      keys_[i] = (static_cast<std::size_t>(key1(x.x, dims.x)) * dims.y +
                  key1(x.y, dims.y)) *
                     dims.z +
                 key1(x.z, dims.z);
    }
    counts_.assign(nbuckets + 1, 0);
    for (std::size_t i = 0; i < n; ++i) ++counts_[keys_[i] + 1];
    for (std::size_t b = 1; b <= nbuckets; ++b) counts_[b] += counts_[b - 1];
    scratch_.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      scratch_[counts_[keys_[i]]++] = particles_[i];
    particles_.swap(scratch_);
  }

  // P2G fills the per-particle stencil cache as a side effect; positions do
  // not change until the G2P state update, so the gather pass reuses the
  // cached weights instead of re-evaluating the kernel.
  void scatter_all(T dt) {
    const std::size_t n = particles_.size();
    const bool dual = grid_->dual();
    const T dx = cfg_.dx();
    if (dual)
      dual_stencils_.resize(n);
    else
      quad_stencils_.resize(n);
    auto scatter_chunk = [&]<bool Atomic>(std::size_t b, std::size_t e,
                                          TransferCounters& tc) {
      for (std::size_t i = b; i < e; ++i) {
        const Particle<T>& p = particles_[i];
        const Material<T>& mat = cfg_.materials[p.material];
        Mat3<T> A = force_matrix(p, mat);
        if (dual) {
          DualStencil<T>& ds = dual_stencils_[i];
          ds = dual_stencil(p.x, dx);
          if (cfg_.scheme == TransferScheme::pic) {
            detail::scatter_one<Atomic>(p, ds, *grid_, nullptr, &A, dt, &tc);
          } else {
            Mat3<T> D = compute_apic_D(p.x, ds, dx);
            Mat3<T> C = p.B * detail::apic_d_inverse(D);
            if (cfg_.scheme == TransferScheme::mls) {
              detail::scatter_one<Atomic>(p, ds, *grid_, &C, nullptr, T(0), &tc);
              Mat4<T> M = mls_moment(p.x, ds, dx);
              Mat4<T> M_inv;
              if (!gauss_inverse4(M, M_inv))
                throw NumericalError("singular MLS moment matrix");
              detail::scatter_force_mls_one<Atomic>(p, ds, *grid_, A, M_inv, dt,
                                                    &tc);
            } else {
              detail::scatter_one<Atomic>(p, ds, *grid_, &C, &A, dt, &tc);
            }
          }
        } else {
          QuadStencil<T>& qs = quad_stencils_[i];
          qs = quad_bspline_stencil(p.x, dx);
          if (cfg_.scheme == TransferScheme::pic) {
            detail::scatter_one<Atomic>(p, qs, *grid_, nullptr, &A, dt, &tc);
          } else {
            Mat3<T> D = compute_apic_D(p.x, qs, dx);
            Mat3<T> C = p.B * detail::apic_d_inverse(D);
            detail::scatter_one<Atomic>(p, qs, *grid_, &C, &A, dt, &tc);
          }
        }
      }
    };
    if (cfg_.deterministic || ThreadPool::instance().thread_count() == 1) {
      scatter_chunk.template operator()<false>(0, n, counters_);
    } else {
      std::mutex mu;
      parallel_for(n, [&](std::size_t b, std::size_t e, int) {
        TransferCounters local;
        scatter_chunk.template operator()<true>(b, e, local);
        std::lock_guard lk(mu);
        counters_ += local;
      });
    }
  }

  void gather_all(T dt) {
    const std::size_t n = particles_.size();
    StepParams<T> sp;
    sp.scheme = cfg_.scheme;
    sp.dt = dt;
    sp.dx = cfg_.dx();
    sp.clamp_singular = cfg_.clamp_singular;
    sp.clamp_floor = cfg_.clamp_floor;
    const bool dual = grid_->dual();
    std::vector<T> chunk_vmax(ThreadPool::instance().thread_count(), T(0));
    std::vector<std::vector<T>> chunk_minj(
        ThreadPool::instance().thread_count(),
        std::vector<T>(cfg_.materials.size(), std::numeric_limits<T>::infinity()));
    std::atomic<bool> bad{false};
    std::mutex mu;
    parallel_for(n, [&](std::size_t b, std::size_t e, int w) {
      TransferCounters local;
      T vm = 0;
      std::vector<T>& mj = chunk_minj[static_cast<std::size_t>(w)];
      for (std::size_t i = b; i < e; ++i) {
        Particle<T>& p = particles_[i];
        if (dual) {
          const DualStencil<T>& ds = dual_stencils_[i];
          GatherResult<T> g = gather_one(p.x, ds, *grid_, &local);
          if (cfg_.scheme == TransferScheme::mls) {
            Mat3<T> D = compute_apic_D(p.x, ds, sp.dx);
            update_particle_state(p, g, cfg_.materials[p.material], sp, dual, &D);
          } else {
            update_particle_state(p, g, cfg_.materials[p.material], sp, dual);
          }
        } else {
          GatherResult<T> g = gather_one(p.x, quad_stencils_[i], *grid_, &local);
          update_particle_state(p, g, cfg_.materials[p.material], sp, dual);
        }
        T s2 = norm2(p.v);
        vm = std::max(vm, s2);
        if (cfg_.materials[p.material].is_fluid())
          mj[p.material] = std::min(mj[p.material], p.J);
        if (!std::isfinite(s2) || !std::isfinite(norm2(p.x)))
          bad.store(true, std::memory_order_relaxed);
      }
      chunk_vmax[static_cast<std::size_t>(w)] =
          std::max(chunk_vmax[static_cast<std::size_t>(w)], std::sqrt(vm));
      std::lock_guard lk(mu);
      counters_ += local;
    });
    if (bad.load())
      throw NumericalError("non-finite particle state after step " +
                           std::to_string(step_count_ + 1));
    T vm = 0;
    for (T v : chunk_vmax) vm = std::max(vm, v);
    vmax_ = vm;
    for (std::size_t mi = 0; mi < cfg_.materials.size(); ++mi) {
      T mj = std::numeric_limits<T>::infinity();
      for (const auto& cm : chunk_minj) mj = std::min(mj, cm[mi]);
      min_j_[mi] = std::isfinite(mj) ? mj : T(1);
    }
  }

  SimConfig<T> cfg_;
  std::optional<BlockSparseGrid<T>> grid_;
  std::vector<Particle<T>> particles_;
  std::vector<Particle<T>> scratch_;
  std::vector<Vec3<T>> positions_;
  std::vector<DualStencil<T>> dual_stencils_;
  std::vector<QuadStencil<T>> quad_stencils_;
  std::vector<std::size_t> keys_;
  std::vector<std::size_t> counts_;
  std::vector<T> min_j_;
  T time_ = 0;
  std::uint64_t step_count_ = 0;
  int frame_index_ = 0;
  T mass_eps_ = 0;
  T vmax_ = 0;
  TransferCounters counters_;
  PhaseTimers timers_;
};

}  // namespace ckmpm
