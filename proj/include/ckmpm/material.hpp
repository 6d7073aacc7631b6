#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "errors.hpp"
#include "math.hpp"

namespace ckmpm {

enum class MaterialModel { fixed_corotated, j_fluid, drucker_prager, nacc, von_mises };

inline const char* material_model_name(MaterialModel m) {
  switch (m) {
    case MaterialModel::fixed_corotated: return "fixed_corotated";
    case MaterialModel::j_fluid: return "j_fluid";
    case MaterialModel::drucker_prager: return "drucker_prager";
    case MaterialModel::nacc: return "nacc";
    case MaterialModel::von_mises: return "von_mises";
  }
  return "?";
}

template <typename T>
inline std::pair<T, T> lame_from_E_nu(T E, T nu) {
  if (!(E >= T(0))) throw ConfigError("E: must be >= 0");
  if (!(nu >= T(0) && nu < T(0.5))) throw ConfigError("nu: must satisfy 0 <= nu < 0.5");
  T mu = E / (T(2) * (T(1) + nu));
  T lambda = E * nu / ((T(1) + nu) * (T(1) - T(2) * nu));
  return {mu, lambda};
}

template <typename T>
struct Material {
  MaterialModel model = MaterialModel::fixed_corotated;
  T density = 0;
  // Solids.
  T E = 0, nu = 0;
  T mu = 0, lambda = 0;
  // Weakly compressible fluid (equation of state).
  T bulk = 0;       // B, Pa
  T gamma = 0;
  T viscosity = 0;  // mu_v
  // Granular plasticity.
  T friction_angle_deg = 0;
  T dp_alpha = 0;

  bool is_fluid() const { return model == MaterialModel::j_fluid; }
};

template <typename T>
inline T dp_alpha_from_friction_deg(T degrees) {
  T phi = degrees * std::numbers::pi_v<T> / T(180);
  T s = std::sin(phi);
  return std::sqrt(T(2) / T(3)) * T(2) * s / (T(3) - s);
}

// Validates invariants and fills derived coefficients. Field names in thrown
// messages match the config schema.
template <typename T>
inline void finalize_material(Material<T>& m) {
  if (!(m.density > T(0))) throw ConfigError("density: must be > 0");
  switch (m.model) {
    case MaterialModel::fixed_corotated:
    case MaterialModel::drucker_prager: {
      if (!(m.E > T(0))) throw ConfigError("E: must be > 0");
      auto [mu, lambda] = lame_from_E_nu(m.E, m.nu);
      m.mu = mu;
      m.lambda = lambda;
      if (m.model == MaterialModel::drucker_prager) {
        if (!(m.friction_angle_deg > T(0) && m.friction_angle_deg < T(90)))
          throw ConfigError("friction_angle: must lie in (0, 90) degrees");
        m.dp_alpha = dp_alpha_from_friction_deg(m.friction_angle_deg);
      }
      break;
    }
    case MaterialModel::j_fluid:
      if (!(m.bulk > T(0))) throw ConfigError("B: must be > 0");
      if (!(m.gamma > T(1))) throw ConfigError("gamma: must be > 1");
      if (!(m.viscosity >= T(0))) throw ConfigError("viscosity: must be >= 0");
      break;
    case MaterialModel::nacc:
    case MaterialModel::von_mises:
      throw ConfigError(std::string("material '") + material_model_name(m.model) +
                        "' is a reserved tag and not implemented");
  }
}

// Cofactor matrix of F, equal to det(F) * F^-T without any division.
template <typename T>
inline Mat3<T> cofactor(const Mat3<T>& F) {
  Mat3<T> c;
  c[0][0] = F[1][1] * F[2][2] - F[1][2] * F[2][1];
  c[0][1] = F[1][2] * F[2][0] - F[1][0] * F[2][2];
  c[0][2] = F[1][0] * F[2][1] - F[1][1] * F[2][0];
  c[1][0] = F[0][2] * F[2][1] - F[0][1] * F[2][2];
  c[1][1] = F[0][0] * F[2][2] - F[0][2] * F[2][0];
  c[1][2] = F[0][1] * F[2][0] - F[0][0] * F[2][1];
  c[2][0] = F[0][1] * F[1][2] - F[0][2] * F[1][1];
  c[2][1] = F[0][2] * F[1][0] - F[0][0] * F[1][2];
  c[2][2] = F[0][0] * F[1][1] - F[0][1] * F[1][0];
  return c;
}

// First Piola-Kirchhoff stress of the fixed-corotated model:
// P = 2 mu (F - R) + lambda (J - 1) J F^-T.
template <typename T>
inline Mat3<T> stress_fixed_corotated(const Mat3<T>& F, T mu, T lambda) {
  T J = det(F);
  if (!(J > T(0))) throw InvertedElementError("fixed corotated stress: det F <= 0");
  Mat3<T> R = polar_rotation(F);
  return T(2) * mu * (F - R) + (lambda * (J - T(1))) * cofactor(F);
}

// Energy density backing the stress (finite-difference oracle target):
// mu * sum (sigma_i - 1)^2 + lambda/2 (J - 1)^2.
template <typename T>
inline T psi_fixed_corotated(const Mat3<T>& F, T mu, T lambda) {
  Svd3<T> s = svd3(F);
  T e = 0;
  for (int i = 0; i < 3; ++i) {
    T d = s.sigma[i] - T(1);
    e += d * d;
  }
  T J = det(F);
  return mu * e + T(0.5) * lambda * (J - T(1)) * (J - T(1));
}

// Equation-of-state pressure p = B (J^-gamma - 1); the force pipeline consumes
// the Kirchhoff form P F^T = -J p I.
template <typename T>
inline T j_fluid_pressure(T J, T B, T gamma) {
  if (!(J > T(0))) throw NumericalError("fluid state: J must be > 0");
  return B * (std::pow(J, -gamma) - T(1));
}

// Kirchhoff stress of the J-based fluid: -J p(J) I.
template <typename T>
inline Mat3<T> stress_j_fluid(T J, T B, T gamma) {
  T s = -J * j_fluid_pressure(J, B, gamma);
  return Mat3<T>::diag(s, s, s);
}

// Drucker-Prager yield measure in Hencky-strain space; <= 0 inside the cone.
// This doubles as the plastic multiplier of the projection.
template <typename T>
inline T dp_yield(const Vec3<T>& eps, T alpha, T mu, T lambda) {
  T tr = eps.x + eps.y + eps.z;
  Vec3<T> dev = eps - Vec3<T>{tr / T(3), tr / T(3), tr / T(3)};
  return norm(dev) + alpha * (T(3) * lambda + T(2) * mu) / (T(2) * mu) * tr;
}

// Return mapping in principal Hencky space: expansion collapses to the cone
// tip, yielding states shrink the strain deviator so the yield measure lands
// exactly on zero. Idempotent.
template <typename T>
inline Mat3<T> return_map_drucker_prager(const Mat3<T>& F_trial, T alpha, T mu, T lambda) {
  if (!(det(F_trial) > T(0)))
    throw InvertedElementError("plastic return map: det F <= 0");
  Svd3<T> s = svd3(F_trial);
  Vec3<T> eps{std::log(s.sigma[0]), std::log(s.sigma[1]), std::log(s.sigma[2])};
  T tr = eps.x + eps.y + eps.z;
  if (tr > T(0)) {
    eps = {};  // cone tip
  } else {
    Vec3<T> dev = eps - Vec3<T>{tr / T(3), tr / T(3), tr / T(3)};
    T dev_norm = norm(dev);
    T dgamma = dev_norm + alpha * (T(3) * lambda + T(2) * mu) / (T(2) * mu) * tr;
    if (dgamma <= T(0)) return F_trial;
    eps -= (dgamma / dev_norm) * dev;
  }
  Mat3<T> S = Mat3<T>::diag(std::exp(eps.x), std::exp(eps.y), std::exp(eps.z));
  return s.U * S * transpose(s.V);
}

// Robustness option: clamps singular values of F away from zero (and the
// matching inverted branch) instead of aborting on near-degenerate states.
template <typename T>
inline Mat3<T> clamp_singular_values(const Mat3<T>& F, T floor_value) {
  Svd3<T> s = svd3(F);
  bool touched = false;
  for (int i = 0; i < 3; ++i) {
    if (s.sigma[i] < floor_value) {
      s.sigma[i] = floor_value;
      touched = true;
    }
  }
  if (!touched) return F;
  return s.U * Mat3<T>::diag(s.sigma[0], s.sigma[1], s.sigma[2]) * transpose(s.V);
}

// Per-substep deviatoric damping factor implementing the fluid viscosity:
// the deviatoric part of the particle's local velocity gradient is scaled by
// exp(-mu_v * dt / (rho * dx^2)).
template <typename T>
inline T viscous_deviatoric_factor(T mu_v, T rho, T dt, T dx) {
  return std::exp(-mu_v * dt / (rho * dx * dx));
}

}  // namespace ckmpm
