#include "geoproj/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "geoproj/error.hpp"

namespace geoproj::dyn {

using lie::Mat3;
using lie::Vec3;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Fields

AmbientVector DiskRotExpandField::operator()(double, const AmbientVector& x) const {
  AmbientVector out(2);
  out << -x(1) + alpha_ * x(0), x(0) + alpha_ * x(1);
  return out;
}

double DiskRotExpandField::lipschitz() const { return std::sqrt(1.0 + alpha_ * alpha_); }

AmbientVector So3TraceField::operator()(double, const AmbientVector& x) const {
  const Mat3 r = lie::to_mat3(x);
  const double speed = (r * r + Mat3::Identity()).trace();
  const Mat3 generator = lie::hat(Vec3(1.0, 1.0, 1.0));  // E1 + E2 + E3
  return lie::flatten(Mat3(speed * generator * r));
}

namespace {

// One cosine mode A cos(k . p + phase) of the ambient generating field.
struct Mode {
  Eigen::Vector3d amplitude;
  Eigen::Vector3d wave;
  double phase;
};

std::vector<Mode> random_modes(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> amp(-1.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_int_distribution<int> freq(-2, 2);
  std::vector<Mode> modes(3);
  for (auto& m : modes) {
    m.amplitude = Eigen::Vector3d(amp(rng), amp(rng), amp(rng));
    m.wave = Eigen::Vector3d(freq(rng), freq(rng), freq(rng));
    m.phase = phase(rng);
  }
  return modes;
}

}  // namespace

// a(theta, phi) and b(theta, phi) are the d_theta / d_phi components of a
// smooth ambient field W, so the node vectors stay continuous through the
// poles where the (theta, phi) chart degenerates.
SphereGridField::SphereGridField(std::uint64_t seed) : seed_(seed) {
  std::mt19937_64 rng(mix_seed(seed));
  const auto modes = random_modes(rng);
  nodes_.resize(static_cast<std::size_t>(kThetaNodes * kPhiNodes));
  for (int i = 0; i < kThetaNodes; ++i) {
    const double th = theta_at(i);
    for (int j = 0; j < kPhiNodes; ++j) {
      const double ph = phi_at(j);
      const Eigen::Vector3d r(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th));
      Eigen::Vector3d w = Eigen::Vector3d::Zero();
      for (const auto& m : modes) w += m.amplitude * std::cos(m.wave.dot(r) + m.phase);
      const Eigen::Vector3d v = w - w.dot(r) * r;
      const double n = v.norm();
      nodes_[static_cast<std::size_t>(i * kPhiNodes + j)] = n > 1e-12 ? Eigen::Vector3d(v / n) : Eigen::Vector3d::Zero();
    }
  }
}

double SphereGridField::theta_at(int i) const {
  return kPoleEps + i * (std::numbers::pi - 2.0 * kPoleEps) / (kThetaNodes - 1);
}

double SphereGridField::phi_at(int j) const { return 2.0 * std::numbers::pi * j / kPhiNodes; }

Eigen::Vector3d SphereGridField::interpolate(const Eigen::Vector3d& p) const {
  const double dtheta = (std::numbers::pi - 2.0 * kPoleEps) / (kThetaNodes - 1);
  const double dphi = 2.0 * std::numbers::pi / kPhiNodes;

  double theta = std::atan2(std::hypot(p.x(), p.y()), p.z());
  theta = std::clamp(theta, kPoleEps, std::numbers::pi - kPoleEps);
  double phi = std::atan2(p.y(), p.x());
  if (phi < 0.0) phi += 2.0 * std::numbers::pi;

  const double u = (theta - kPoleEps) / dtheta;
  const int i0 = std::clamp(static_cast<int>(std::floor(u)), 0, kThetaNodes - 2);
  const double wu = std::clamp(u - i0, 0.0, 1.0);
  const double v = phi / dphi;
  const int j0 = static_cast<int>(std::floor(v)) % kPhiNodes;
  const int j1 = (j0 + 1) % kPhiNodes;
  const double wv = std::clamp(v - std::floor(v), 0.0, 1.0);

  return (1 - wu) * (1 - wv) * node(i0, j0) + (1 - wu) * wv * node(i0, j1) +
         wu * (1 - wv) * node(i0 + 1, j0) + wu * wv * node(i0 + 1, j1);
}

AmbientVector SphereGridField::operator()(double, const AmbientVector& p) const {
  const Eigen::Vector3d q = p.head<3>();
  const Eigen::Vector3d v = interpolate(q);
  return v - v.dot(q) * q;
}

AmbientVector sphere_field_eval(const SphereGridField& f, const AmbientVector& p) {
  if (p.size() != 3) throw Error(ErrorCode::DimensionMismatch, "sphere field lives on S^2 in R^3");
  return f(0.0, p);
}

// ---------------------------------------------------------------------------
// Integrators

Trajectory projected_euler_flow(const ManifoldKernel& m, const VectorField& f,
                                const AmbientVector& x0, double dt, int steps) {
  if (!(dt > 0.0)) throw Error(ErrorCode::Config, "projected_euler_flow: dt must be positive");
  if (!on_manifold(m, x0)) throw Error(ErrorCode::OffManifoldBase, "projected_euler_flow: x0 off manifold");
  Trajectory traj;
  traj.reserve(static_cast<std::size_t>(steps) + 1);
  traj.push_back(x0);
  AmbientVector x = x0;
  for (int k = 0; k < steps; ++k) {
    const AmbientVector y = x + dt * f(k * dt, x);
    try {
      x = metric_project(m, y);
    } catch (const Error& e) {
      throw Error(ErrorCode::ProjectionFailure, std::string("step ") + std::to_string(k) + ": " + e.what());
    }
    traj.push_back(x);
  }
  return traj;
}

AmbientVector rk2_retraction_step(const VectorField& f, const AmbientVector& p, double dt, double t) {
  if (dt == 0.0) return p;
  auto tangent = [](const AmbientVector& x, const AmbientVector& v) { return AmbientVector(v - v.dot(x) * x); };
  const AmbientVector mid_raw = p + 0.5 * dt * tangent(p, f(t, p));
  const AmbientVector mid = mid_raw / mid_raw.norm();
  const AmbientVector end_raw = p + dt * tangent(mid, f(t + 0.5 * dt, mid));
  return end_raw / end_raw.norm();
}

Trajectory rk2_sphere_flow(const VectorField& f, const AmbientVector& p0, double dt, int steps) {
  Trajectory traj{p0};
  traj.reserve(static_cast<std::size_t>(steps) + 1);
  AmbientVector p = p0;
  for (int k = 0; k < steps; ++k) {
    p = rk2_retraction_step(f, p, dt, k * dt);
    traj.push_back(p);
  }
  return traj;
}

Trajectory so3_trace_flow(const AmbientVector& x0, double dt, int steps) {
  return projected_euler_flow(ManifoldKernel::so3(), So3TraceField(), x0, dt, steps);
}

// ---------------------------------------------------------------------------
// Cucker-Smale

double cucker_smale_weight(double theta) {
  if (theta >= std::numbers::pi - 1e-6) return 0.0;
  return std::cos(0.5 * theta);
}

CuckerSmaleRates cucker_smale_rhs(const CuckerSmaleState& s, double kappa) {
  const std::size_t n = s.rotations.size();
  if (s.velocities.size() != n) throw Error(ErrorCode::DimensionMismatch, "cucker_smale_rhs: state sizes differ");
  CuckerSmaleRates out;
  out.rotation_rates.resize(n);
  out.velocity_rates.assign(n, Vec3::Zero());
  for (std::size_t i = 0; i < n; ++i) {
    out.rotation_rates[i] = s.rotations[i] * lie::hat(s.velocities[i]);
    Vec3 acc = Vec3::Zero();
    for (std::size_t k = 0; k < n; ++k) {
      const auto d = lie::geodesic_distance_so3_unchecked(s.rotations[k], s.rotations[i]);
      const double w = cucker_smale_weight(d.theta);
      if (w == 0.0) continue;
      const Vec3 axis = d.axis_defined ? d.axis : Vec3::Zero();
      const Vec3& ak = s.velocities[k];
      const double half = 0.5 * d.theta;
      const Vec3 term = (1.0 - std::cos(half)) * axis.dot(ak) * axis + std::sin(half) * ak.cross(axis) +
                        std::cos(half) * ak - s.velocities[i];
      acc += w * term;
    }
    out.velocity_rates[i] = (kappa / static_cast<double>(n)) * acc;
  }
  return out;
}

CuckerSmaleState cucker_smale_step(const CuckerSmaleState& s, double kappa, double dt) {
  const auto rates = cucker_smale_rhs(s, kappa);
  CuckerSmaleState next = s;
  for (std::size_t i = 0; i < s.rotations.size(); ++i) {
    // Body velocity a_i is the spatial velocity R_i a_i.
    const Vec3 spatial = s.rotations[i] * s.velocities[i];
    next.rotations[i] = lie::to_mat3(lie::lie_step(lie::flatten(s.rotations[i]), lie::So3Coords{spatial}, dt));
    next.velocities[i] = s.velocities[i] + dt * rates.velocity_rates[i];
  }
  return next;
}

Vec3 cucker_smale_initial_velocity(const Mat3& r) { return lie::vee(Mat3(0.5 * (r - r.transpose()))); }

// ---------------------------------------------------------------------------
// Backbone frames

lie::Mat4 frame_from_backbone(const BackboneAtoms& atoms) {
  const Eigen::Vector3d v1 = atoms.c - atoms.ca;
  const Eigen::Vector3d v2 = atoms.n - atoms.ca;
  const double n1 = v1.norm();
  if (n1 < 1e-12) throw Error(ErrorCode::DegenerateTriad, "C coincides with CA");
  const Eigen::Vector3d e1 = v1 / n1;
  const Eigen::Vector3d e2_raw = v2 - e1.dot(v2) * e1;
  const double n2 = e2_raw.norm();
  if (n2 <= 1e-9 * std::max(1.0, v2.norm())) throw Error(ErrorCode::DegenerateTriad, "collinear N-CA-C atoms");
  const Eigen::Vector3d e2 = e2_raw / n2;
  lie::Mat4 t = lie::Mat4::Identity();
  t.block<3, 1>(0, 0) = e1;
  t.block<3, 1>(0, 1) = e2;
  t.block<3, 1>(0, 2) = e1.cross(e2);
  t.block<3, 1>(0, 3) = atoms.ca;
  return t;
}

namespace {

// Places D so that |CD| = bond, angle BCD = angle, dihedral ABCD = torsion.
Eigen::Vector3d place_atom(const Eigen::Vector3d& a, const Eigen::Vector3d& b, const Eigen::Vector3d& c,
                           double bond, double angle, double torsion) {
  const Eigen::Vector3d bc = (c - b).normalized();
  const Eigen::Vector3d n = (b - a).cross(bc).normalized();
  const Eigen::Vector3d m = n.cross(bc);
  const Eigen::Vector3d d(-bond * std::cos(angle), bond * std::sin(angle) * std::cos(torsion),
                          bond * std::sin(angle) * std::sin(torsion));
  return c + d.x() * bc + d.y() * m + d.z() * n;
}

double deg(double d) { return d * std::numbers::pi / 180.0; }

}  // namespace

std::vector<BackboneAtoms> synthetic_backbone(int n_residues, std::uint64_t seed) {
  if (n_residues < 2) throw Error(ErrorCode::Config, "synthetic backbone needs >= 2 residues");
  constexpr double kNCa = 1.458, kCaC = 1.525, kCN = 1.329;
  const double ang_n_ca_c = deg(111.2), ang_ca_c_n = deg(116.2), ang_c_n_ca = deg(121.7);

  std::mt19937_64 rng(mix_seed(seed));
  std::normal_distribution<double> jitter(0.0, deg(10.0));
  std::bernoulli_distribution helix(0.6);

  std::vector<Eigen::Vector3d> atoms;
  atoms.reserve(static_cast<std::size_t>(3 * n_residues));
  atoms.emplace_back(0.0, 0.0, 0.0);
  atoms.emplace_back(kNCa, 0.0, 0.0);
  atoms.emplace_back(kNCa - kCaC * std::cos(ang_n_ca_c), kCaC * std::sin(ang_n_ca_c), 0.0);
  for (int r = 1; r < n_residues; ++r) {
    const bool h = helix(rng);
    const double psi = deg(h ? -47.0 : 113.0) + jitter(rng);
    const double phi = deg(h ? -57.0 : -119.0) + jitter(rng);
    const double omega = deg(180.0);
    const auto sz = atoms.size();
    const Eigen::Vector3d n = place_atom(atoms[sz - 3], atoms[sz - 2], atoms[sz - 1], kCN, ang_ca_c_n, psi);
    const Eigen::Vector3d ca = place_atom(atoms[sz - 2], atoms[sz - 1], n, kNCa, ang_c_n_ca, omega);
    const Eigen::Vector3d c = place_atom(atoms[sz - 1], n, ca, kCaC, ang_n_ca_c, phi);
    atoms.push_back(n);
    atoms.push_back(ca);
    atoms.push_back(c);
  }

  // Random rigid placement of the whole chain.
  const Mat3 rot = lie::to_mat3(random_point(ManifoldKernel::so3(), rng));
  std::normal_distribution<double> offset(0.0, 5.0);
  const Eigen::Vector3d shift(offset(rng), offset(rng), offset(rng));
  std::vector<BackboneAtoms> out(static_cast<std::size_t>(n_residues));
  for (int r = 0; r < n_residues; ++r) {
    const auto base = static_cast<std::size_t>(3 * r);
    out[static_cast<std::size_t>(r)] = {rot * atoms[base] + shift, rot * atoms[base + 1] + shift,
                                        rot * atoms[base + 2] + shift};
  }
  return out;
}

std::vector<AmbientVector> synthetic_se3_chain(int n_residues, std::uint64_t seed) {
  const auto atoms = synthetic_backbone(n_residues, seed);
  std::vector<AmbientVector> frames;
  frames.reserve(atoms.size());
  for (const auto& a : atoms) frames.push_back(lie::flatten(frame_from_backbone(a)));
  return frames;
}

std::vector<BackboneAtoms> read_backbone_atoms(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  std::vector<double> values;
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) {
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end == tok.c_str() || *end != '\0') throw Error(ErrorCode::Io, "bad number '" + tok + "' in " + path);
      values.push_back(v);
    }
  }
  if (values.empty() || values.size() % 9 != 0) {
    throw Error(ErrorCode::Io, path + ": expected 9 coordinates (N, CA, C) per residue");
  }
  std::vector<BackboneAtoms> out(values.size() / 9);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const double* v = values.data() + 9 * r;
    out[r] = {{v[0], v[1], v[2]}, {v[3], v[4], v[5]}, {v[6], v[7], v[8]}};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw Error(ErrorCode::Io, "unknown split tag '" + s + "'");
}

GeneratorSpec GeneratorSpec::resolved() const {
  GeneratorSpec g = *this;
  double def_t = 0.0;
  double def_dt = 0.01;
  if (name == "sphere") {
    def_t = 1.0;
  } else if (name == "so3") {
    def_t = 0.5;
    def_dt = 0.005;
  } else if (name == "disk") {
    def_t = 2.0;
  } else if (name == "cs") {
    def_t = 1.0;
  } else if (name == "protein" || name == "circle") {
    def_t = 0.0;
  } else {
    throw Error(ErrorCode::Config, "unknown generator '" + name + "'");
  }
  if (g.horizon < 0.0) g.horizon = def_t;
  if (g.dt <= 0.0) g.dt = def_dt;
  return g;
}

ManifoldKernel GeneratorSpec::kernel() const {
  if (name == "sphere") return ManifoldKernel::sphere(3);
  if (name == "circle") return ManifoldKernel::sphere(2);
  if (name == "so3") return ManifoldKernel::so3();
  if (name == "disk") return ManifoldKernel::disk();
  if (name == "cs") return ManifoldKernel::power(ManifoldKernel::so3(), agents);
  if (name == "protein") return ManifoldKernel::se3();
  throw Error(ErrorCode::Config, "unknown generator '" + name + "'");
}

std::vector<int> TrajectoryDataset::indices(Split s) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i)
    if (splits[static_cast<std::size_t>(i)] == s) out.push_back(i);
  return out;
}

std::vector<Split> assign_splits(int n, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const std::uint64_t salt = mix_seed(seed ^ 0x5f3759dfULL);
  std::vector<std::uint64_t> keys(order.size());
  for (int i = 0; i < n; ++i) keys[static_cast<std::size_t>(i)] = mix_seed(salt + static_cast<std::uint64_t>(i));
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return keys[static_cast<std::size_t>(a)] < keys[static_cast<std::size_t>(b)];
  });
  const int n_train = static_cast<int>(std::lround(0.8 * n));
  const int n_val = static_cast<int>(std::lround(0.1 * n));
  std::vector<Split> splits(static_cast<std::size_t>(n), Split::Test);
  for (int r = 0; r < n; ++r) {
    const auto idx = static_cast<std::size_t>(order[static_cast<std::size_t>(r)]);
    splits[idx] = r < n_train ? Split::Train : (r < n_train + n_val ? Split::Val : Split::Test);
  }
  return splits;
}

namespace {

int step_count(const GeneratorSpec& g) { return static_cast<int>(std::llround(g.horizon / g.dt)); }

CuckerSmaleState cs_state_from_flat(const AmbientVector& x, int agents) {
  CuckerSmaleState s;
  for (int i = 0; i < agents; ++i) {
    const Mat3 r = lie::to_mat3(x.segment(9 * i, 9));
    s.rotations.push_back(r);
    s.velocities.push_back(cucker_smale_initial_velocity(r));
  }
  return s;
}

AmbientVector cs_flat(const CuckerSmaleState& s) {
  AmbientVector x(9 * static_cast<Eigen::Index>(s.rotations.size()));
  for (std::size_t i = 0; i < s.rotations.size(); ++i) x.segment(9 * static_cast<Eigen::Index>(i), 9) = lie::flatten(s.rotations[i]);
  return x;
}

AmbientVector evolve_with(const GeneratorSpec& g, const AmbientVector& x0, const SphereGridField* field) {
  const int steps = step_count(g);
  if (steps == 0) return x0;
  if (g.name == "sphere") return rk2_sphere_flow(*field, x0, g.dt, steps).back();
  if (g.name == "so3") return so3_trace_flow(x0, g.dt, steps).back();
  if (g.name == "disk") {
    return projected_euler_flow(ManifoldKernel::disk(), DiskRotExpandField(g.alpha), x0, g.dt, steps).back();
  }
  if (g.name == "cs") {
    auto s = cs_state_from_flat(x0, g.agents);
    for (int k = 0; k < steps; ++k) s = cucker_smale_step(s, g.kappa, g.dt);
    return cs_flat(s);
  }
  if (g.name == "circle") return x0;
  throw Error(ErrorCode::Config, "generator '" + g.name + "' has no endpoint map");
}

}  // namespace

AmbientVector evolve(const GeneratorSpec& spec, const AmbientVector& x0) {
  const GeneratorSpec g = spec.resolved();
  if (g.name == "sphere") {
    const SphereGridField field(g.field_seed);
    return evolve_with(g, x0, &field);
  }
  return evolve_with(g, x0, nullptr);
}

TrajectoryDataset make_pairs(const GeneratorSpec& spec, int n_trajectories, std::uint64_t seed) {
  if (n_trajectories < 0) throw Error(ErrorCode::Config, "negative trajectory count");
  TrajectoryDataset ds;
  ds.generator = spec.resolved();
  ds.seed = seed;
  const ManifoldKernel kernel = ds.generator.kernel();
  const int d = kernel.ambient_dim();
  ds.x0.resize(n_trajectories, d);
  ds.xT.resize(n_trajectories, d);

  if (ds.generator.name == "protein") {
    int row = 0;
    for (std::uint64_t chain = 0; row < n_trajectories; ++chain) {
      const auto frames = synthetic_se3_chain(ds.generator.chain_length, mix_seed(seed) ^ mix_seed(chain + 1));
      for (std::size_t i = 0; i + 1 < frames.size() && row < n_trajectories; ++i, ++row) {
        ds.x0.row(row) = frames[i].transpose();
        ds.xT.row(row) = frames[i + 1].transpose();
      }
    }
  } else {
    std::unique_ptr<SphereGridField> field;
    if (ds.generator.name == "sphere") field = std::make_unique<SphereGridField>(ds.generator.field_seed);
    for (int i = 0; i < n_trajectories; ++i) {
      // Each trajectory owns its seed so results do not depend on order.
      const std::uint64_t traj_seed = mix_seed(seed) ^ mix_seed(static_cast<std::uint64_t>(i) + 1);
      const AmbientVector x0 = random_point(kernel, traj_seed);
      ds.x0.row(i) = x0.transpose();
      ds.xT.row(i) = evolve_with(ds.generator, x0, field.get()).transpose();
    }
  }
  ds.splits = assign_splits(n_trajectories, seed);
  return ds;
}

std::string manifest_path_for(const std::string& csv_path) {
  std::filesystem::path p(csv_path);
  p.replace_extension(".json");
  return p.string();
}

void save_dataset(const TrajectoryDataset& ds, const std::string& csv_path, const std::string& manifest_path) {
  std::ofstream out(csv_path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + csv_path);
  const int d = ds.dim();
  for (int j = 0; j < d; ++j) out << "x0_" << j << ',';
  for (int j = 0; j < d; ++j) out << "xT_" << j << ',';
  out << "split\n";
  char buf[32];
  for (int i = 0; i < ds.size(); ++i) {
    for (int j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.x0(i, j));
      out << buf << ',';
    }
    for (int j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.xT(i, j));
      out << buf << ',';
    }
    out << to_string(ds.splits[static_cast<std::size_t>(i)]) << '\n';
  }
  if (!out) throw Error(ErrorCode::Io, "write failed for " + csv_path);

  const auto& g = ds.generator;
  json m;
  m["generator"] = g.name;
  m["kernel"] = ds.kernel().name();
  m["params"] = {{"horizon", g.horizon}, {"dt", g.dt},           {"alpha", g.alpha},
                 {"kappa", g.kappa},     {"agents", g.agents}, {"chain_length", g.chain_length},
                 {"field_seed", g.field_seed}};
  m["seed"] = ds.seed;
  m["n"] = ds.size();
  m["dims"] = {{"ambient", d}, {"intrinsic", ds.kernel().intrinsic_dim()}};
  m["splits"] = {{"train", ds.indices(Split::Train).size()},
                 {"val", ds.indices(Split::Val).size()},
                 {"test", ds.indices(Split::Test).size()}};
  std::ofstream mo(manifest_path);
  if (!mo) throw Error(ErrorCode::Io, "cannot write " + manifest_path);
  mo << m.dump(2) << '\n';
}

TrajectoryDataset load_dataset(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw Error(ErrorCode::Io, "cannot open dataset " + csv_path);
  std::string header;
  std::getline(in, header);
  const auto n_cols = static_cast<int>(std::count(header.begin(), header.end(), ',')) + 1;
  if (n_cols < 3 || (n_cols - 1) % 2 != 0 || !header.starts_with("x0_")) {
    throw Error(ErrorCode::Io, csv_path + ": unexpected header");
  }
  const int d = (n_cols - 1) / 2;

  std::vector<double> values;
  std::vector<Split> splits;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t pos = 0;
    for (int j = 0; j < 2 * d; ++j) {
      const auto comma = line.find(',', pos);
      if (comma == std::string::npos) throw Error(ErrorCode::Io, csv_path + ": short row");
      values.push_back(std::strtod(line.c_str() + pos, nullptr));
      pos = comma + 1;
    }
    splits.push_back(parse_split(line.substr(pos)));
  }

  TrajectoryDataset ds;
  const auto n = static_cast<Eigen::Index>(splits.size());
  ds.x0.resize(n, d);
  ds.xT.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      ds.x0(i, j) = values[static_cast<std::size_t>(i * 2 * d + j)];
      ds.xT(i, j) = values[static_cast<std::size_t>(i * 2 * d + d + j)];
    }
  }
  ds.splits = std::move(splits);

  const std::string mpath = manifest_path_for(csv_path);
  if (std::filesystem::exists(mpath)) {
    std::ifstream mi(mpath);
    const json m = json::parse(mi);
    ds.generator.name = m.at("generator").get<std::string>();
    const auto& p = m.at("params");
    ds.generator.horizon = p.value("horizon", -1.0);
    ds.generator.dt = p.value("dt", -1.0);
    ds.generator.alpha = p.value("alpha", 0.3);
    ds.generator.kappa = p.value("kappa", 1.0);
    ds.generator.agents = p.value("agents", 10);
    ds.generator.chain_length = p.value("chain_length", 64);
    ds.generator.field_seed = p.value("field_seed", std::uint64_t{0});
    ds.seed = m.value("seed", std::uint64_t{0});
    if (ds.kernel().ambient_dim() != d) throw Error(ErrorCode::Io, mpath + ": manifest dims disagree with CSV");
  } else {
    throw Error(ErrorCode::Io, "missing dataset manifest " + mpath);
  }
  return ds;
}

}  // namespace geoproj::dyn
