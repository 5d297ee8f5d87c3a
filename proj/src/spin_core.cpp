#include "spincav/spin_core.hpp"

#include <unsupported/Eigen/KroneckerProduct>

#include <algorithm>
#include <cmath>

#include "spincav/error.hpp"

namespace spincav {

namespace {

bool is_half_integer(double v) {
  const double twice = 2.0 * v;
  return v >= 0.0 && std::abs(twice - std::round(twice)) < 1e-12;
}

bool finite(const Vec3& v) { return v.allFinite(); }

constexpr double kTieBreakField = 1e-9;

}  // namespace

int IsotopeParams::dimension() const {
  return static_cast<int>(std::lround((2 * S + 1) * (2 * I + 1)));
}

void IsotopeParams::validate() const {
  if (!is_half_integer(S) || !is_half_integer(I))
    throw PreconditionError("isotope '" + label + "': S and I must be non-negative half-integers");
  if (!(abundance >= 0.0 && abundance <= 1.0))
    throw PreconditionError("isotope '" + label + "': abundance outside [0, 1]");
  for (double v : {g_e_perp, g_e_par, g_I, A_perp, A_par, p})
    if (!std::isfinite(v)) throw PreconditionError("isotope '" + label + "': non-finite parameter");
  if (I == 0.0 && (g_I != 0.0 || A_perp != 0.0 || A_par != 0.0 || p != 0.0))
    throw PreconditionError("isotope '" + label + "': I = 0 requires g_I = A_perp = A_par = p = 0");
}

// Hyperfine constants: the larger-magnitude constant sits on S_z I_z, which
// is the assignment that scales with g_par/g_perp and places the 173Yb
// nuclear resonances of a 414 MHz cavity near 20 and 90 mT.
IsotopeParams yb171() {
  return {"171Yb", 0.14, 0.5, 0.5, 2.935, 4.225, -0.02592, 2.2221, 3.3729, 0.0};
}

IsotopeParams yb_even() { return {"I0Yb", 0.70, 0.5, 0.0, 2.935, 4.225, 0.0, 0.0, 0.0, 0.0}; }

IsotopeParams yb173() {
  return {"173Yb", 0.16, 0.5, 2.5, 2.935, 4.225, -0.02592, -0.615, -0.897, -0.066};
}

std::vector<IsotopeParams> builtin_isotopes() { return {yb171(), yb_even(), yb173()}; }

IsotopeParams builtin_isotope(std::string_view name) {
  if (name == "171Yb" || name == "171") return yb171();
  if (name == "173Yb" || name == "173") return yb173();
  if (name == "I0Yb" || name == "I0" || name == "0") return yb_even();
  throw PreconditionError("unknown isotope '" + std::string(name) + "'");
}

void to_json(nlohmann::json& j, const IsotopeParams& p) {
  j = nlohmann::json{{"label", p.label},       {"abundance", p.abundance}, {"S", p.S},
                     {"I", p.I},               {"g_e_perp", p.g_e_perp},   {"g_e_par", p.g_e_par},
                     {"g_I", p.g_I},           {"A_perp_GHz", p.A_perp},   {"A_par_GHz", p.A_par},
                     {"p_GHz", p.p}};
}

void from_json(const nlohmann::json& j, IsotopeParams& p) {
  j.at("label").get_to(p.label);
  j.at("abundance").get_to(p.abundance);
  j.at("S").get_to(p.S);
  j.at("I").get_to(p.I);
  j.at("g_e_perp").get_to(p.g_e_perp);
  j.at("g_e_par").get_to(p.g_e_par);
  j.at("g_I").get_to(p.g_I);
  j.at("A_perp_GHz").get_to(p.A_perp);
  j.at("A_par_GHz").get_to(p.A_par);
  j.at("p_GHz").get_to(p.p);
}

SpinSystem::SpinSystem(IsotopeParams params, PhysicalConstants constants)
    : params_(std::move(params)), constants_(constants) {
  params_.validate();
  dim_ = params_.dimension();
  const auto s = angular_momentum<double>(params_.S);
  const auto in = angular_momentum<double>(params_.I);
  const Eigen::MatrixXcd id_s = Eigen::MatrixXcd::Identity(s.z.rows(), s.z.cols());
  const Eigen::MatrixXcd id_i = Eigen::MatrixXcd::Identity(in.z.rows(), in.z.cols());
  const std::array<const Eigen::MatrixXcd*, 3> sc{&s.x, &s.y, &s.z};
  const std::array<const Eigen::MatrixXcd*, 3> ic{&in.x, &in.y, &in.z};
  for (int c = 0; c < 3; ++c) {
    s_[c] = Eigen::kroneckerProduct(*sc[c], id_i);
    i_[c] = Eigen::kroneckerProduct(id_s, *ic[c]);
  }
  const double mu_b = constants_.mu_B_over_h;
  const double mu_n = constants_.mu_N_over_h;
  const std::array<double, 3> g{params_.g_e_perp, params_.g_e_perp, params_.g_e_par};
  for (int c = 0; c < 3; ++c) v_[c] = g[c] * mu_b * s_[c] - params_.g_I * mu_n * i_[c];
}

Eigen::MatrixXcd build_hamiltonian(const SpinSystem& sys, const Vec3& B) {
  if (!finite(B)) throw PreconditionError("build_hamiltonian: non-finite field");
  const auto& p = sys.params();
  const auto& S = sys.S();
  const auto& I = sys.I();
  // The drive operators already carry the Zeeman prefactors.
  const auto& V = sys.drive_operators();
  Eigen::MatrixXcd H = B.x() * V[0] + B.y() * V[1] + B.z() * V[2];
  H += p.A_par * S[2] * I[2] + p.A_perp * (S[0] * I[0] + S[1] * I[1]) + p.p * I[2] * I[2];
  return H;
}

LevelSet diagonalize(const SpinSystem& sys, const Vec3& B) {
  const Vec3 applied = B.isZero(0.0) ? Vec3(0.0, 0.0, kTieBreakField) : B;
  const Eigen::MatrixXcd H = build_hamiltonian(sys, applied);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> solver(H);
  if (solver.info() != Eigen::Success) throw EigenSolverError("diagonalize: eigensolver did not converge");

  LevelSet out;
  out.field_B = B;
  out.energies = solver.eigenvalues();
  out.states = solver.eigenvectors();
  for (int c = 0; c < out.states.cols(); ++c) {
    Eigen::Index k = 0;
    out.states.col(c).cwiseAbs().maxCoeff(&k);
    const std::complex<double> pivot = out.states(k, c);
    out.states.col(c) *= std::conj(pivot) / std::abs(pivot);
  }
  for (int c = 0; c < 3; ++c)
    out.drive[c] = out.states.adjoint() * sys.drive_operators()[c] * out.states;
  return out;
}

std::complex<double> drive_element(const LevelSet& levels, int i, int j, const Vec3& b) {
  const int n = levels.size();
  if (i < 0 || j < 0 || i >= n || j >= n) throw OutOfBoundsError("level index out of range");
  return b.x() * levels.drive[0](j, i) + b.y() * levels.drive[1](j, i) + b.z() * levels.drive[2](j, i);
}

double transition_matrix_element(const LevelSet& levels, int i, int j, const Vec3& b_dir) {
  if (i == j) throw PreconditionError("transition_matrix_element: i == j");
  return std::abs(drive_element(levels, i, j, b_dir));
}

Eigen::VectorXd thermal_populations(const LevelSet& levels, double T) {
  if (!(T > 0.0)) throw PreconditionError("thermal_populations: T must be > 0");
  const double kT = kCodata.k_B_over_h * T;
  const double e0 = levels.energies.minCoeff();
  Eigen::VectorXd w = (-(levels.energies.array() - e0) / kT).exp().matrix();
  return w / w.sum();
}

std::vector<Transition> transitions(const LevelSet& levels, const Vec3& b_dir, double T) {
  const Eigen::VectorXd pop = thermal_populations(levels, T);
  std::vector<Transition> out;
  for (int i = 0; i < levels.size(); ++i)
    for (int j = i + 1; j < levels.size(); ++j)
      out.push_back({i, j, levels.energies(j) - levels.energies(i),
                     transition_matrix_element(levels, i, j, b_dir), delta_p(pop, i, j)});
  return out;
}

double transition_frequency(const SpinSystem& sys, int i, int j, double B) {
  const LevelSet lv = diagonalize(sys, along_z(B));
  if (i < 0 || j < 0 || i >= lv.size() || j >= lv.size()) throw OutOfBoundsError("level index out of range");
  return lv.energies(j) - lv.energies(i);
}

double resonance_field(const SpinSystem& sys, int i, int j, double f_target, FieldBracket bracket,
                       const Vec3& b_dir) {
  const Vec3 dir = b_dir.normalized();
  auto mismatch = [&](double B) {
    const LevelSet lv = diagonalize(sys, B * dir);
    if (i < 0 || j < 0 || i >= lv.size() || j >= lv.size()) throw OutOfBoundsError("level index out of range");
    return lv.energies(j) - lv.energies(i) - f_target;
  };
  double lo = bracket.lo;
  double hi = bracket.hi;
  double flo = mismatch(lo);
  const double fhi = mismatch(hi);
  if (flo == 0.0) return lo;
  if (fhi == 0.0) return hi;
  if ((flo > 0) == (fhi > 0)) throw NoResonanceError("no resonance in range");
  while (hi - lo > 1e-7) {
    const double mid = 0.5 * (lo + hi);
    const double fm = mismatch(mid);
    if ((fm > 0) == (flo > 0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

double effective_slope(const SpinSystem& sys, int i, int j, double B) {
  constexpr double kStep = 1e-5;
  const double up = transition_frequency(sys, i, j, B + kStep);
  const double down = transition_frequency(sys, i, j, B - kStep);
  return (up - down) / (2 * kStep * sys.constants().mu_B_over_h);
}

StrainParameter parse_strain_parameter(std::string_view name) {
  if (name == "A_par" || name == "A_z") return StrainParameter::A_par;
  if (name == "A_perp" || name == "A_x") return StrainParameter::A_perp;
  if (name == "p") return StrainParameter::quadrupole;
  throw PreconditionError("unknown strain parameter '" + std::string(name) + "'");
}

double strain_sensitivity(const SpinSystem& sys, int i, int j, double B, StrainParameter param,
                          double rel_step) {
  if (!(rel_step > 0.0 && rel_step <= 0.05))
    throw PreconditionError("strain_sensitivity: rel_step must be in (0, 0.05]");
  auto gap_with = [&](double factor) {
    IsotopeParams p = sys.params();
    switch (param) {
      case StrainParameter::A_par: p.A_par *= factor; break;
      case StrainParameter::A_perp: p.A_perp *= factor; break;
      case StrainParameter::quadrupole: p.p *= factor; break;
    }
    return transition_frequency(sys.with_params(p), i, j, B);
  };
  return (gap_with(1 + rel_step) - gap_with(1 - rel_step)) / (2 * rel_step);
}

}  // namespace spincav
