#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <algorithm>
#include <limits>

namespace ckmpm {

struct Int3 {
  int x = 0, y = 0, z = 0;

  friend bool operator==(const Int3& a, const Int3& b) {
    return a.x == b.x && a.y == b.y && a.z == b.z;
  }
  friend Int3 operator+(const Int3& a, const Int3& b) {
    return {a.x + b.x, a.y + b.y, a.z + b.z};
  }
  int operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

template <typename T>
struct Vec3 {
  T x = 0, y = 0, z = 0;

  T& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  T operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  Vec3& operator*=(T s) { x *= s; y *= s; z *= s; return *this; }

  friend Vec3 operator+(Vec3 a, const Vec3& b) { return a += b; }
  friend Vec3 operator-(Vec3 a, const Vec3& b) { return a -= b; }
  friend Vec3 operator-(const Vec3& a) { return {-a.x, -a.y, -a.z}; }
  friend Vec3 operator*(Vec3 a, T s) { return a *= s; }
  friend Vec3 operator*(T s, Vec3 a) { return a *= s; }
  friend Vec3 operator/(Vec3 a, T s) { return a *= (T(1) / s); }
};

template <typename T>
inline T dot(const Vec3<T>& a, const Vec3<T>& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}

template <typename T>
inline Vec3<T> cross(const Vec3<T>& a, const Vec3<T>& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

template <typename T>
inline T norm2(const Vec3<T>& a) { return dot(a, a); }

template <typename T>
inline T norm(const Vec3<T>& a) { return std::sqrt(norm2(a)); }

template <typename T>
inline T norm_inf(const Vec3<T>& a) {
  return std::max({std::abs(a.x), std::abs(a.y), std::abs(a.z)});
}

// Row-major 3x3 matrix: a[row][col].
template <typename T>
struct Mat3 {
  std::array<std::array<T, 3>, 3> a{};

  static Mat3 zero() { return {}; }
  static Mat3 identity() {
    Mat3 m;
    m.a[0][0] = m.a[1][1] = m.a[2][2] = T(1);
    return m;
  }
  static Mat3 diag(T d0, T d1, T d2) {
    Mat3 m;
    m.a[0][0] = d0; m.a[1][1] = d1; m.a[2][2] = d2;
    return m;
  }

  std::array<T, 3>& operator[](int r) { return a[r]; }
  const std::array<T, 3>& operator[](int r) const { return a[r]; }

  Mat3& operator+=(const Mat3& o) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) a[r][c] += o.a[r][c];
    return *this;
  }
  Mat3& operator-=(const Mat3& o) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) a[r][c] -= o.a[r][c];
    return *this;
  }
  Mat3& operator*=(T s) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) a[r][c] *= s;
    return *this;
  }

  friend Mat3 operator+(Mat3 x, const Mat3& y) { return x += y; }
  friend Mat3 operator-(Mat3 x, const Mat3& y) { return x -= y; }
  friend Mat3 operator*(Mat3 x, T s) { return x *= s; }
  friend Mat3 operator*(T s, Mat3 x) { return x *= s; }

  friend Mat3 operator*(const Mat3& x, const Mat3& y) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        r.a[i][j] = x.a[i][0] * y.a[0][j] + x.a[i][1] * y.a[1][j] + x.a[i][2] * y.a[2][j];
    return r;
  }
  friend Vec3<T> operator*(const Mat3& m, const Vec3<T>& v) {
    return {m.a[0][0] * v.x + m.a[0][1] * v.y + m.a[0][2] * v.z,
            m.a[1][0] * v.x + m.a[1][1] * v.y + m.a[1][2] * v.z,
            m.a[2][0] * v.x + m.a[2][1] * v.y + m.a[2][2] * v.z};
  }
};

template <typename T>
inline Mat3<T> transpose(const Mat3<T>& m) {
  Mat3<T> r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i][j] = m[j][i];
  return r;
}

template <typename T>
inline T trace(const Mat3<T>& m) { return m[0][0] + m[1][1] + m[2][2]; }

template <typename T>
inline T det(const Mat3<T>& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

template <typename T>
inline Mat3<T> outer(const Vec3<T>& u, const Vec3<T>& v) {
  Mat3<T> r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i][j] = u[i] * v[j];
  return r;
}

template <typename T>
inline T frobenius_norm(const Mat3<T>& m) {
  T s = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) s += m[i][j] * m[i][j];
  return std::sqrt(s);
}

// Adjugate-over-determinant inverse. Caller is responsible for conditioning;
// a singular input yields non-finite entries rather than a throw.
template <typename T>
inline Mat3<T> inverse(const Mat3<T>& m) {
  Mat3<T> adj;
  adj[0][0] = m[1][1] * m[2][2] - m[1][2] * m[2][1];
  adj[0][1] = m[0][2] * m[2][1] - m[0][1] * m[2][2];
  adj[0][2] = m[0][1] * m[1][2] - m[0][2] * m[1][1];
  adj[1][0] = m[1][2] * m[2][0] - m[1][0] * m[2][2];
  adj[1][1] = m[0][0] * m[2][2] - m[0][2] * m[2][0];
  adj[1][2] = m[0][2] * m[1][0] - m[0][0] * m[1][2];
  adj[2][0] = m[1][0] * m[2][1] - m[1][1] * m[2][0];
  adj[2][1] = m[0][1] * m[2][0] - m[0][0] * m[2][1];
  adj[2][2] = m[0][0] * m[1][1] - m[0][1] * m[1][0];
  return adj * (T(1) / det(m));
}

// Deviatoric part: m - (tr m / 3) I.
template <typename T>
inline Mat3<T> deviator(const Mat3<T>& m) {
  Mat3<T> r = m;
  T t = trace(m) / T(3);
  r[0][0] -= t; r[1][1] -= t; r[2][2] -= t;
  return r;
}

// Axial vector of the antisymmetric part: (m21-m12, m02-m20, m10-m01).
template <typename T>
inline Vec3<T> axial(const Mat3<T>& m) {
  return {m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]};
}

// Eigen-decomposition of a symmetric 3x3 by cyclic Jacobi rotations.
// Returns eigenvalues sorted descending; columns of V are the eigenvectors,
// with det V = +1.
template <typename T>
struct SymEigen3 {
  Vec3<T> w;
  Mat3<T> V;
};

template <typename T>
inline SymEigen3<T> sym_eigen3(Mat3<T> A) {
  Mat3<T> V = Mat3<T>::identity();
  for (int sweep = 0; sweep < 30; ++sweep) {
    T off = std::abs(A[0][1]) + std::abs(A[0][2]) + std::abs(A[1][2]);
    T diag = std::abs(A[0][0]) + std::abs(A[1][1]) + std::abs(A[2][2]);
    if (off <= std::numeric_limits<T>::epsilon() * (diag + std::numeric_limits<T>::min()))
      break;
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        if (A[p][q] == T(0)) continue;
        T theta = (A[q][q] - A[p][p]) / (T(2) * A[p][q]);
        T t = (theta >= 0 ? T(1) : T(-1)) /
              (std::abs(theta) + std::sqrt(theta * theta + T(1)));
        T c = T(1) / std::sqrt(t * t + T(1));
        T s = t * c;
        T app = A[p][p], aqq = A[q][q], apq = A[p][q];
        A[p][p] = c * c * app - T(2) * s * c * apq + s * s * aqq;
        A[q][q] = s * s * app + T(2) * s * c * apq + c * c * aqq;
        A[p][q] = A[q][p] = T(0);
        int r = 3 - p - q;
        T arp = A[r][p], arq = A[r][q];
        A[r][p] = A[p][r] = c * arp - s * arq;
        A[r][q] = A[q][r] = s * arp + c * arq;
        for (int i = 0; i < 3; ++i) {
          T vip = V[i][p], viq = V[i][q];
          V[i][p] = c * vip - s * viq;
          V[i][q] = s * vip + c * viq;
        }
      }
    }
  }
  std::array<int, 3> idx = {0, 1, 2};
  Vec3<T> w{A[0][0], A[1][1], A[2][2]};
  std::sort(idx.begin(), idx.end(), [&](int i, int j) { return w[i] > w[j]; });
  SymEigen3<T> out;
  Mat3<T> Vs;
  for (int c = 0; c < 3; ++c) {
    out.w[c] = w[idx[c]];
    for (int r = 0; r < 3; ++r) Vs[r][c] = V[r][idx[c]];
  }
  if (det(Vs) < T(0))
    for (int r = 0; r < 3; ++r) Vs[r][2] = -Vs[r][2];
  out.V = Vs;
  return out;
}

// SVD with rotation convention: F = U diag(sigma) V^T, det U = det V = +1,
// sigma[0] >= sigma[1] >= |sigma[2]|, a reflection carried as sigma[2] < 0.
template <typename T>
struct Svd3 {
  Mat3<T> U;
  Vec3<T> sigma;
  Mat3<T> V;
};

template <typename T>
inline Svd3<T> svd3(const Mat3<T>& F) {
  SymEigen3<T> eig = sym_eigen3(transpose(F) * F);
  const Mat3<T>& V = eig.V;
  Vec3<T> b0{F[0][0] * V[0][0] + F[0][1] * V[1][0] + F[0][2] * V[2][0],
             F[1][0] * V[0][0] + F[1][1] * V[1][0] + F[1][2] * V[2][0],
             F[2][0] * V[0][0] + F[2][1] * V[1][0] + F[2][2] * V[2][0]};
  Vec3<T> b1{F[0][0] * V[0][1] + F[0][1] * V[1][1] + F[0][2] * V[2][1],
             F[1][0] * V[0][1] + F[1][1] * V[1][1] + F[1][2] * V[2][1],
             F[2][0] * V[0][1] + F[2][1] * V[1][1] + F[2][2] * V[2][1]};
  Vec3<T> b2{F[0][0] * V[0][2] + F[0][1] * V[1][2] + F[0][2] * V[2][2],
             F[1][0] * V[0][2] + F[1][1] * V[1][2] + F[1][2] * V[2][2],
             F[2][0] * V[0][2] + F[2][1] * V[1][2] + F[2][2] * V[2][2]};

  T scale = std::sqrt(std::max(eig.w[0], T(0)));
  T tiny = scale * T(1e-12) + std::numeric_limits<T>::min();

  Vec3<T> u0 = b0;
  T n0 = norm(u0);
  if (n0 > tiny) u0 = u0 / n0; else u0 = {T(1), T(0), T(0)};

  Vec3<T> u1 = b1 - dot(b1, u0) * u0;
  T n1 = norm(u1);
  if (n1 > tiny) {
    u1 = u1 / n1;
  } else {
    // Any unit vector orthogonal to u0.
    Vec3<T> seed = std::abs(u0.x) < T(0.9) ? Vec3<T>{T(1), T(0), T(0)}
                                           : Vec3<T>{T(0), T(1), T(0)};
    u1 = cross(u0, seed);
    u1 = u1 / norm(u1);
  }
  Vec3<T> u2 = cross(u0, u1);  // det U = +1 by construction

  Svd3<T> out;
  for (int r = 0; r < 3; ++r) {
    out.U[r][0] = u0[r];
    out.U[r][1] = u1[r];
    out.U[r][2] = u2[r];
  }
  out.V = V;
  out.sigma = {dot(u0, b0), dot(u1, b1), dot(u2, b2)};
  return out;
}

// Closest rotation to F (polar decomposition rotation factor). Inputs with a
// safely positive determinant take the scaled Newton iteration
// R <- (g R + (g R)^-T) / 2, which converges quadratically to the same factor
// the singular value route produces; everything else (near-singular or
// reflecting inputs, where the closest rotation is not the orthogonal polar
// factor) falls back to the SVD construction.
template <typename T>
inline Mat3<T> polar_rotation(const Mat3<T>& F) {
  const T nf = frobenius_norm(F);
  const T d = det(F);
  if (!(d > T(1e-10) * nf * nf * nf)) {
    Svd3<T> s = svd3(F);
    return s.U * transpose(s.V);
  }
  const T tol = T(8) * std::numeric_limits<T>::epsilon();
  Mat3<T> R = F;
  T prev_diff = std::numeric_limits<T>::infinity();
  for (int it = 0; it < 40; ++it) {
    Mat3<T> Rit = transpose(inverse(R));
    T g = std::sqrt(frobenius_norm(Rit) / frobenius_norm(R));
    Mat3<T> Rn = (T(0.5) * g) * R + (T(0.5) / g) * Rit;
    T diff = frobenius_norm(Rn - R);
    R = Rn;
    if (diff <= tol * frobenius_norm(R) || diff >= prev_diff) break;
    prev_diff = diff;
  }
  return R;
}

// Condition number of a symmetric matrix from its eigenvalue spread.
template <typename T>
inline T sym_condition3(const Mat3<T>& m) {
  SymEigen3<T> e = sym_eigen3(m);
  T hi = std::max({std::abs(e.w[0]), std::abs(e.w[1]), std::abs(e.w[2])});
  T lo = std::min({std::abs(e.w[0]), std::abs(e.w[1]), std::abs(e.w[2])});
  if (lo == T(0)) return std::numeric_limits<T>::infinity();
  return hi / lo;
}

// Dense 4x4, used by the moving-least-squares moment matrix.
template <typename T>
struct Mat4 {
  std::array<std::array<T, 4>, 4> a{};

  static Mat4 identity() {
    Mat4 m;
    for (int i = 0; i < 4; ++i) m.a[i][i] = T(1);
    return m;
  }
  std::array<T, 4>& operator[](int r) { return a[r]; }
  const std::array<T, 4>& operator[](int r) const { return a[r]; }
};

template <typename T>
using Vec4 = std::array<T, 4>;

template <typename T>
inline Vec4<T> mat4_mul_vec(const Mat4<T>& m, const Vec4<T>& v) {
  Vec4<T> r{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) r[i] += m[i][j] * v[j];
  return r;
}

// Gauss-Jordan inverse with partial pivoting. Returns false when a pivot
// vanishes (singular input).
template <typename T>
inline bool gauss_inverse4(const Mat4<T>& in, Mat4<T>& out) {
  std::array<std::array<T, 8>, 4> w{};
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) w[i][j] = in[i][j];
    w[i][4 + i] = T(1);
  }
  for (int col = 0; col < 4; ++col) {
    int piv = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::abs(w[r][col]) > std::abs(w[piv][col])) piv = r;
    if (w[piv][col] == T(0)) return false;
    std::swap(w[piv], w[col]);
    T inv_p = T(1) / w[col][col];
    for (int j = 0; j < 8; ++j) w[col][j] *= inv_p;
    for (int r = 0; r < 4; ++r) {
      if (r == col) continue;
      T f = w[r][col];
      if (f == T(0)) continue;
      for (int j = 0; j < 8; ++j) w[r][j] -= f * w[col][j];
    }
  }
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) out[i][j] = w[i][4 + j];
  return true;
}

}  // namespace ckmpm
