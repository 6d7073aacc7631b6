#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "scene.hpp"
#include "simulation.hpp"

namespace ckmpm {

namespace cfgio {

using nlohmann::json;

inline void check_fields(const json& j, const std::string& ctx,
                         std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed)
      if (it.key() == a) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError(ctx + ": unknown field '" + it.key() + "'");
  }
}

inline const json& req(const json& j, const char* field, const std::string& ctx) {
  auto it = j.find(field);
  if (it == j.end()) throw ConfigError(ctx + "." + field + ": missing required field");
  return *it;
}

template <typename T>
inline T num(const json& v, const std::string& where) {
  if (!v.is_number()) throw ConfigError(where + ": expected a number");
  return static_cast<T>(v.template get<double>());
}

template <typename T>
inline T req_num(const json& j, const char* field, const std::string& ctx) {
  return num<T>(req(j, field, ctx), ctx + "." + field);
}

template <typename T>
inline T opt_num(const json& j, const char* field, const std::string& ctx, T dflt) {
  auto it = j.find(field);
  return it == j.end() ? dflt : num<T>(*it, ctx + "." + field);
}

inline int req_int(const json& j, const char* field, const std::string& ctx) {
  const json& v = req(j, field, ctx);
  if (!v.is_number_integer())
    throw ConfigError(ctx + "." + field + ": expected an integer");
  return v.get<int>();
}

inline int opt_int(const json& j, const char* field, const std::string& ctx, int dflt) {
  auto it = j.find(field);
  if (it == j.end()) return dflt;
  if (!it->is_number_integer())
    throw ConfigError(ctx + "." + field + ": expected an integer");
  return it->get<int>();
}

inline bool opt_bool(const json& j, const char* field, const std::string& ctx,
                     bool dflt) {
  auto it = j.find(field);
  if (it == j.end()) return dflt;
  if (!it->is_boolean()) throw ConfigError(ctx + "." + field + ": expected a boolean");
  return it->get<bool>();
}

inline std::string req_str(const json& j, const char* field, const std::string& ctx) {
  const json& v = req(j, field, ctx);
  if (!v.is_string()) throw ConfigError(ctx + "." + field + ": expected a string");
  return v.get<std::string>();
}

inline std::string opt_str(const json& j, const char* field, const std::string& ctx,
                           const std::string& dflt) {
  auto it = j.find(field);
  if (it == j.end()) return dflt;
  if (!it->is_string()) throw ConfigError(ctx + "." + field + ": expected a string");
  return it->get<std::string>();
}

template <typename T>
inline Vec3<T> vec3_of(const json& v, const std::string& where) {
  if (!v.is_array() || v.size() != 3)
    throw ConfigError(where + ": expected an array of 3 numbers");
  return {num<T>(v[0], where), num<T>(v[1], where), num<T>(v[2], where)};
}

template <typename T>
inline Vec3<T> req_vec3(const json& j, const char* field, const std::string& ctx) {
  return vec3_of<T>(req(j, field, ctx), ctx + "." + field);
}

template <typename T>
inline Vec3<T> opt_vec3(const json& j, const char* field, const std::string& ctx,
                        Vec3<T> dflt) {
  auto it = j.find(field);
  return it == j.end() ? dflt : vec3_of<T>(*it, ctx + "." + field);
}

template <typename T>
inline Material<T> material_from_json(const json& j, const std::string& ctx) {
  if (!j.is_object()) throw ConfigError(ctx + ": expected an object");
  check_fields(j, ctx,
               {"model", "density", "E", "nu", "bulk", "gamma", "viscosity",
                "friction_angle_deg"});
  Material<T> m;
  std::string model = req_str(j, "model", ctx);
  if (model == "fixed_corotated")
    m.model = MaterialModel::fixed_corotated;
  else if (model == "drucker_prager")
    m.model = MaterialModel::drucker_prager;
  else if (model == "j_fluid")
    m.model = MaterialModel::j_fluid;
  else if (model == "nacc")
    m.model = MaterialModel::nacc;
  else if (model == "von_mises")
    m.model = MaterialModel::von_mises;
  else
    throw ConfigError(ctx + ".model: unknown material model '" + model + "'");
  m.density = req_num<T>(j, "density", ctx);
  if (m.model == MaterialModel::j_fluid) {
    m.bulk = req_num<T>(j, "bulk", ctx);
    m.gamma = req_num<T>(j, "gamma", ctx);
    m.viscosity = opt_num<T>(j, "viscosity", ctx, T(0));
  } else {
    m.E = req_num<T>(j, "E", ctx);
    m.nu = req_num<T>(j, "nu", ctx);
    if (m.model == MaterialModel::drucker_prager)
      m.friction_angle_deg = req_num<T>(j, "friction_angle_deg", ctx);
  }
  try {
    finalize_material(m);
  } catch (const ConfigError& e) {
    throw ConfigError(ctx + "." + e.what());
  }
  return m;
}

template <typename T>
inline ShapeSpec<T> shape_from_json(const json& j, const std::string& ctx) {
  if (!j.is_object()) throw ConfigError(ctx + ": expected an object");
  check_fields(j, ctx,
               {"kind", "center", "radius", "inner_radius", "half_length", "axis",
                "lo", "hi"});
  ShapeSpec<T> s;
  std::string kind = req_str(j, "kind", ctx);
  if (kind == "sphere") {
    s.kind = ShapeKind::sphere;
    s.center = req_vec3<T>(j, "center", ctx);
    s.radius = req_num<T>(j, "radius", ctx);
    if (!(s.radius > T(0))) throw ConfigError(ctx + ".radius: must be positive");
  } else if (kind == "box") {
    s.kind = ShapeKind::box;
    s.lo = req_vec3<T>(j, "lo", ctx);
    s.hi = req_vec3<T>(j, "hi", ctx);
    for (int a = 0; a < 3; ++a)
      if (!(s.lo[a] < s.hi[a])) throw ConfigError(ctx + ": box needs lo < hi");
  } else if (kind == "cylinder") {
    s.kind = ShapeKind::cylinder;
    s.center = req_vec3<T>(j, "center", ctx);
    s.radius = req_num<T>(j, "radius", ctx);
    s.inner_radius = opt_num<T>(j, "inner_radius", ctx, T(0));
    s.half_length = req_num<T>(j, "half_length", ctx);
    s.axis = opt_int(j, "axis", ctx, 1);
    if (s.axis < 0 || s.axis > 2) throw ConfigError(ctx + ".axis: must be 0, 1 or 2");
    if (!(s.radius > T(0)) || !(s.half_length > T(0)))
      throw ConfigError(ctx + ": cylinder radius and half_length must be positive");
    if (s.inner_radius < T(0) || s.inner_radius >= s.radius)
      throw ConfigError(ctx + ".inner_radius: must be in [0, radius)");
  } else {
    throw ConfigError(ctx + ".kind: unknown shape '" + kind + "'");
  }
  return s;
}

template <typename T>
inline BoundaryCondition<T> boundary_from_json(const json& j, const std::string& ctx) {
  if (!j.is_object()) throw ConfigError(ctx + ": expected an object");
  check_fields(j, ctx, {"kind", "lo", "hi", "normal", "velocity", "omega", "center"});
  BoundaryCondition<T> bc;
  std::string kind = req_str(j, "kind", ctx);
  if (kind == "sticky")
    bc.kind = BcKind::sticky;
  else if (kind == "slip")
    bc.kind = BcKind::slip;
  else if (kind == "separate")
    bc.kind = BcKind::separate;
  else
    throw ConfigError(ctx + ".kind: unknown boundary kind '" + kind + "'");
  bc.lo = req_vec3<T>(j, "lo", ctx);
  bc.hi = req_vec3<T>(j, "hi", ctx);
  if (bc.kind != BcKind::sticky) {
    bc.normal = req_vec3<T>(j, "normal", ctx);
    T n = norm(bc.normal);
    if (!(n > T(0))) throw ConfigError(ctx + ".normal: must be nonzero");
    bc.normal = bc.normal * (T(1) / n);
  } else {
    bc.velocity = opt_vec3<T>(j, "velocity", ctx, {});
    bc.omega = opt_vec3<T>(j, "omega", ctx, {});
    bc.center = opt_vec3<T>(j, "center", ctx, {});
  }
  return bc;
}

template <typename T>
inline BodySpec<T> body_from_json(const json& j, const std::string& ctx) {
  if (!j.is_object()) throw ConfigError(ctx + ": expected an object");
  check_fields(j, ctx,
               {"shape", "material", "ppc", "seed", "velocity", "shear_slope",
                "omega"});
  BodySpec<T> b;
  b.shape = shape_from_json<T>(req(j, "shape", ctx), ctx + ".shape");
  int mi = req_int(j, "material", ctx);
  if (mi < 0) throw ConfigError(ctx + ".material: must be non-negative");
  b.material = static_cast<std::uint32_t>(mi);
  b.ppc = opt_int(j, "ppc", ctx, 8);
  b.seed = static_cast<std::uint64_t>(opt_int(j, "seed", ctx, 0));
  b.velocity = opt_vec3<T>(j, "velocity", ctx, {});
  b.shear_slope = opt_num<T>(j, "shear_slope", ctx, T(0));
  b.omega = opt_vec3<T>(j, "omega", ctx, {});
  return b;
}

}  // namespace cfgio

template <typename T>
inline SimConfig<T> config_from_json(const nlohmann::json& j) {
  using namespace cfgio;
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  check_fields(j, "config",
               {"name", "resolution", "extent", "kernel", "scheme", "gravity", "cfl",
                "frame_dt", "frames", "max_dt", "deterministic", "threads",
                "clamp_singular", "clamp_floor", "max_substeps_per_frame", "materials",
                "bodies", "boundaries", "output"});
  SimConfig<T> cfg;
  cfg.name = opt_str(j, "name", "config", "scene");
  cfg.resolution = req_int(j, "resolution", "config");
  cfg.extent = opt_num<T>(j, "extent", "config", T(1));
  std::string kernel = opt_str(j, "kernel", "config", "compact");
  if (kernel == "compact")
    cfg.kernel = KernelKind::compact;
  else if (kernel == "quadratic")
    cfg.kernel = KernelKind::quadratic;
  else
    throw ConfigError("config.kernel: expected 'compact' or 'quadratic'");
  std::string scheme = opt_str(j, "scheme", "config", "apic");
  if (scheme == "pic")
    cfg.scheme = TransferScheme::pic;
  else if (scheme == "apic")
    cfg.scheme = TransferScheme::apic;
  else if (scheme == "mls")
    cfg.scheme = TransferScheme::mls;
  else
    throw ConfigError("config.scheme: expected 'pic', 'apic' or 'mls'");
  cfg.gravity = opt_vec3<T>(j, "gravity", "config", {});
  cfg.cfl = opt_num<T>(j, "cfl", "config", T(0.5));
  cfg.frame_dt = opt_num<T>(j, "frame_dt", "config", T(1) / T(60));
  cfg.frames = opt_int(j, "frames", "config", 1);
  cfg.max_dt = opt_num<T>(j, "max_dt", "config", T(0));
  cfg.deterministic = opt_bool(j, "deterministic", "config", false);
  cfg.threads = opt_int(j, "threads", "config", 0);
  cfg.clamp_singular = opt_bool(j, "clamp_singular", "config", false);
  cfg.clamp_floor = opt_num<T>(j, "clamp_floor", "config", T(0.05));
  cfg.max_substeps_per_frame = static_cast<std::uint64_t>(
      opt_int(j, "max_substeps_per_frame", "config", 1000000));

  const json& mats = req(j, "materials", "config");
  if (!mats.is_array()) throw ConfigError("config.materials: expected an array");
  for (std::size_t i = 0; i < mats.size(); ++i)
    cfg.materials.push_back(
        material_from_json<T>(mats[i], "materials[" + std::to_string(i) + "]"));

  const json& bodies = req(j, "bodies", "config");
  if (!bodies.is_array()) throw ConfigError("config.bodies: expected an array");
  for (std::size_t i = 0; i < bodies.size(); ++i)
    cfg.bodies.push_back(
        body_from_json<T>(bodies[i], "bodies[" + std::to_string(i) + "]"));

  if (auto it = j.find("boundaries"); it != j.end()) {
    if (!it->is_array()) throw ConfigError("config.boundaries: expected an array");
    for (std::size_t i = 0; i < it->size(); ++i)
      cfg.boundaries.push_back(
          boundary_from_json<T>((*it)[i], "boundaries[" + std::to_string(i) + "]"));
  }

  if (auto it = j.find("output"); it != j.end()) {
    const nlohmann::json& o = *it;
    if (!o.is_object()) throw ConfigError("config.output: expected an object");
    check_fields(o, "output",
                 {"snapshots", "binary_snapshots", "diagnostics", "diagnostics_every"});
    cfg.output.snapshots = opt_bool(o, "snapshots", "output", true);
    cfg.output.binary_snapshots = opt_bool(o, "binary_snapshots", "output", false);
    cfg.output.diagnostics = opt_bool(o, "diagnostics", "output", true);
    cfg.output.diagnostics_every = opt_int(o, "diagnostics_every", "output", 1);
  }

  validate_config(cfg);
  return cfg;
}

template <typename T>
inline SimConfig<T> load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return config_from_json<T>(j);
}

// --- Snapshots, checkpoints, diagnostics -----------------------------------

namespace detail {

inline void fmt_g17(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

}  // namespace detail

// Human-readable per-frame snapshot. The volume-state column reports J for
// fluids and det(F) for solids.
template <typename T>
inline void write_snapshot_text(const std::string& path,
                                std::span<const Particle<T>> particles,
                                std::span<const Material<T>> materials, int frame,
                                T time, T dx) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open snapshot file for writing: " + path);
  std::string line;
  line += "# ckmpm-snapshot-v1\n";
  line += "frame " + std::to_string(frame) + "\n";
  line += "time ";
  detail::fmt_g17(line, static_cast<double>(time));
  line += "\ncount " + std::to_string(particles.size()) + "\n";
  line += "dx ";
  detail::fmt_g17(line, static_cast<double>(dx));
  line += "\n# x y z vx vy vz J_or_detF material_id\n";
  os << line;
  for (const Particle<T>& p : particles) {
    line.clear();
    T vol = materials[p.material].is_fluid() ? p.J : det(p.F);
    const double cols[7] = {double(p.x.x), double(p.x.y), double(p.x.z),
                            double(p.v.x), double(p.v.y), double(p.v.z),
                            double(vol)};
    for (double c : cols) {
      detail::fmt_g17(line, c);
      line += ' ';
    }
    line += std::to_string(p.material);
    line += '\n';
    os << line;
  }
  if (!os) throw IoError("snapshot write failed: " + path);
}

// Binary twin of the text snapshot: same header fields, then per particle
// seven doubles and the material id.
template <typename T>
inline void write_snapshot_binary(const std::string& path,
                                  std::span<const Particle<T>> particles,
                                  std::span<const Material<T>> materials, int frame,
                                  T time, T dx) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open snapshot file for writing: " + path);
  const char magic[8] = {'C', 'K', 'S', 'N', 'A', 'P', '1', '\0'};
  std::int64_t fr = frame, count = static_cast<std::int64_t>(particles.size());
  double t = static_cast<double>(time), d = static_cast<double>(dx);
  os.write(magic, 8);
  os.write(reinterpret_cast<const char*>(&fr), 8);
  os.write(reinterpret_cast<const char*>(&t), 8);
  os.write(reinterpret_cast<const char*>(&count), 8);
  os.write(reinterpret_cast<const char*>(&d), 8);
  for (const Particle<T>& p : particles) {
    double rec[7] = {double(p.x.x), double(p.x.y), double(p.x.z), double(p.v.x),
                     double(p.v.y), double(p.v.z),
                     double(materials[p.material].is_fluid() ? p.J : det(p.F))};
    os.write(reinterpret_cast<const char*>(rec), sizeof rec);
    std::uint32_t mid = p.material;
    os.write(reinterpret_cast<const char*>(&mid), 4);
  }
  if (!os) throw IoError("snapshot write failed: " + path);
}

// Bit-exact full-state checkpoint for restart. Field-by-field layout (no
// struct padding), scalar width recorded in the header.
template <typename T>
inline void write_checkpoint(const std::string& path, const Simulation<T>& sim) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint file for writing: " + path);
  const char magic[8] = {'C', 'K', 'C', 'H', 'K', 'P', 'T', '1'};
  os.write(magic, 8);
  std::uint32_t scalar = sizeof(T);
  std::uint64_t step = sim.step_count();
  std::int32_t frame = sim.frame_index();
  T time = sim.time(), eps = sim.mass_epsilon();
  std::uint64_t count = sim.particles().size();
  os.write(reinterpret_cast<const char*>(&scalar), 4);
  os.write(reinterpret_cast<const char*>(&step), 8);
  os.write(reinterpret_cast<const char*>(&frame), 4);
  os.write(reinterpret_cast<const char*>(&time), sizeof(T));
  os.write(reinterpret_cast<const char*>(&eps), sizeof(T));
  os.write(reinterpret_cast<const char*>(&count), 8);
  for (const Particle<T>& p : sim.particles()) {
    T fields[27];
    int k = 0;
    for (int a = 0; a < 3; ++a) fields[k++] = p.x[a];
    for (int a = 0; a < 3; ++a) fields[k++] = p.v[a];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) fields[k++] = p.F[r][c];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) fields[k++] = p.B[r][c];
    fields[k++] = p.J;
    fields[k++] = p.mass;
    fields[k++] = p.volume0;
    os.write(reinterpret_cast<const char*>(fields), sizeof fields);
    std::uint32_t mid = p.material;
    os.write(reinterpret_cast<const char*>(&mid), 4);
  }
  if (!os) throw IoError("checkpoint write failed: " + path);
}

template <typename T>
inline void read_checkpoint(const std::string& path, Simulation<T>& sim) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint file: " + path);
  char magic[8];
  is.read(magic, 8);
  const char want[8] = {'C', 'K', 'C', 'H', 'K', 'P', 'T', '1'};
  if (!is || std::memcmp(magic, want, 8) != 0)
    throw IoError("not a checkpoint file: " + path);
  std::uint32_t scalar = 0;
  is.read(reinterpret_cast<char*>(&scalar), 4);
  if (scalar != sizeof(T))
    throw IoError("checkpoint scalar width mismatch in " + path);
  std::uint64_t step = 0, count = 0;
  std::int32_t frame = 0;
  T time = 0, eps = 0;
  is.read(reinterpret_cast<char*>(&step), 8);
  is.read(reinterpret_cast<char*>(&frame), 4);
  is.read(reinterpret_cast<char*>(&time), sizeof(T));
  is.read(reinterpret_cast<char*>(&eps), sizeof(T));
  is.read(reinterpret_cast<char*>(&count), 8);
  if (!is) throw IoError("truncated checkpoint header: " + path);
  std::vector<Particle<T>> particles(count);
  for (Particle<T>& p : particles) {
    T fields[27];
    std::uint32_t mid = 0;
    is.read(reinterpret_cast<char*>(fields), sizeof fields);
    is.read(reinterpret_cast<char*>(&mid), 4);
    if (!is) throw IoError("truncated checkpoint particle data: " + path);
    int k = 0;
    for (int a = 0; a < 3; ++a) p.x[a] = fields[k++];
    for (int a = 0; a < 3; ++a) p.v[a] = fields[k++];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p.F[r][c] = fields[k++];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p.B[r][c] = fields[k++];
    p.J = fields[k++];
    p.mass = fields[k++];
    p.volume0 = fields[k++];
    p.material = mid;
  }
  sim.restore(std::move(particles), time, step, frame, eps);
}

// Streaming CSV writer for per-substep conservation diagnostics.
template <typename T>
class DiagnosticsWriter {
 public:
  explicit DiagnosticsWriter(const std::string& path) : os_(path) {
    if (!os_) throw IoError("cannot open diagnostics file for writing: " + path);
    os_ << "# ckmpm-diagnostics-v1\n"
        << "step,time,px,py,pz,Lx,Ly,Lz,px_massfree,py_massfree,pz_massfree,KE,"
           "vmax\n";
  }

  void append(const DiagnosticsRow<T>& r) {
    std::string line = std::to_string(r.step);
    const double cols[12] = {double(r.time),
                             double(r.momentum.x),
                             double(r.momentum.y),
                             double(r.momentum.z),
                             double(r.angular.x),
                             double(r.angular.y),
                             double(r.angular.z),
                             double(r.momentum_massfree.x),
                             double(r.momentum_massfree.y),
                             double(r.momentum_massfree.z),
                             double(r.kinetic_energy),
                             double(r.vmax)};
    for (double c : cols) {
      line += ',';
      detail::fmt_g17(line, c);
    }
    line += '\n';
    os_ << line;
    if (!os_) throw IoError("diagnostics write failed");
  }

  void close() {
    os_.close();
    if (os_.fail()) throw IoError("diagnostics close failed");
  }

 private:
  std::ofstream os_;
};

}  // namespace ckmpm
