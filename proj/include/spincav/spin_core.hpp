#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <complex>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "spincav/constants.hpp"

namespace spincav {

using Vec3 = Eigen::Vector3d;

template <typename Scalar>
using ComplexMatrix = Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, Eigen::Dynamic>;

/// Cartesian angular-momentum matrices for spin j in the |j, m> basis with
/// m ordered j, j-1, ..., -j.
template <typename Scalar = double>
struct AngularMomentum {
  ComplexMatrix<Scalar> x, y, z;
};

template <typename Scalar = double>
AngularMomentum<Scalar> angular_momentum(double j) {
  using C = std::complex<Scalar>;
  const int n = static_cast<int>(std::lround(2.0 * j)) + 1;
  ComplexMatrix<Scalar> raise = ComplexMatrix<Scalar>::Zero(n, n);
  ComplexMatrix<Scalar> z = ComplexMatrix<Scalar>::Zero(n, n);
  for (int k = 0; k < n; ++k) {
    const Scalar m = static_cast<Scalar>(j - k);
    z(k, k) = C(m, 0);
    if (k > 0) {
      // <m+1| J+ |m>, row k-1 holds m+1.
      raise(k - 1, k) = C(std::sqrt(static_cast<Scalar>(j * (j + 1)) - m * (m + 1)), 0);
    }
  }
  const ComplexMatrix<Scalar> lower = raise.adjoint();
  AngularMomentum<Scalar> out;
  out.x = (raise + lower) * C(0.5, 0);
  out.y = (raise - lower) * C(0, -0.5);
  out.z = z;
  return out;
}

/// Effective-spin parameters of one isotope. Energies in GHz.
struct IsotopeParams {
  std::string label;
  double abundance = 1.0;
  double S = 0.5;
  double I = 0.0;
  double g_e_perp = 0.0;
  double g_e_par = 0.0;
  double g_I = 0.0;
  double A_perp = 0.0;
  double A_par = 0.0;
  double p = 0.0;

  int dimension() const;
  /// Throws PreconditionError when the invariants do not hold.
  void validate() const;
};

IsotopeParams yb171();
IsotopeParams yb_even();
IsotopeParams yb173();
/// 171Yb, I=0 Yb and 173Yb in that order.
std::vector<IsotopeParams> builtin_isotopes();
/// Looks up a built-in by label or short alias ("171", "173", "0", "I0").
IsotopeParams builtin_isotope(std::string_view name);

void to_json(nlohmann::json& j, const IsotopeParams& p);
void from_json(const nlohmann::json& j, IsotopeParams& p);

/// Immutable spin system: parameters plus the full-space spin operators.
class SpinSystem {
 public:
  explicit SpinSystem(IsotopeParams params, PhysicalConstants constants = kCodata);

  const IsotopeParams& params() const { return params_; }
  const PhysicalConstants& constants() const { return constants_; }
  int dimension() const { return dim_; }

  // Electronic and nuclear operators on the product space (S outer, I inner).
  const std::array<Eigen::MatrixXcd, 3>& S() const { return s_; }
  const std::array<Eigen::MatrixXcd, 3>& I() const { return i_; }

  /// Drive operator V for a unit field along axis c (0,1,2), GHz per tesla:
  /// g_e mu_B S_c - g_I mu_N I_c with the anisotropic g_e tensor.
  const std::array<Eigen::MatrixXcd, 3>& drive_operators() const { return v_; }

  /// Copy with one parameter replaced.
  SpinSystem with_params(IsotopeParams params) const { return SpinSystem(std::move(params), constants_); }

 private:
  IsotopeParams params_;
  PhysicalConstants constants_;
  int dim_;
  std::array<Eigen::MatrixXcd, 3> s_, i_, v_;
};

/// Effective spin Hamiltonian H/h in GHz at field B (tesla).
Eigen::MatrixXcd build_hamiltonian(const SpinSystem& sys, const Vec3& B);

/// Eigen-decomposition at one field point.
struct LevelSet {
  Vec3 field_B = Vec3::Zero();
  Eigen::VectorXd energies;  // GHz, ascending
  Eigen::MatrixXcd states;   // columns are eigenvectors
  // Drive operators (x, y, z) in the eigenbasis, GHz per tesla.
  std::array<Eigen::MatrixXcd, 3> drive;

  int size() const { return static_cast<int>(energies.size()); }
};

/// Diagonalizes H(B). Energies ascending; each eigenvector has its
/// largest-magnitude component real and positive. At exactly zero field a
/// 1e-9 T z tie-break field fixes the level order.
LevelSet diagonalize(const SpinSystem& sys, const Vec3& B);

inline Vec3 along_z(double B) { return Vec3(0.0, 0.0, B); }

/// Complex <psi_j| V(b) |psi_i> in GHz for drive field b (tesla, or any
/// per-unit field vector).
std::complex<double> drive_element(const LevelSet& levels, int i, int j, const Vec3& b);

/// |<psi_j| V(b_dir) |psi_i>| in GHz per tesla.
double transition_matrix_element(const LevelSet& levels, int i, int j, const Vec3& b_dir);

/// Boltzmann populations, summing to one.
Eigen::VectorXd thermal_populations(const LevelSet& levels, double T);

inline double delta_p(const Eigen::VectorXd& populations, int i, int j) {
  return populations(i) - populations(j);
}

struct Transition {
  int i = 0;
  int j = 0;
  double omega = 0.0;           // GHz
  double matrix_element = 0.0;  // GHz / T
  double delta_p = 0.0;
};

/// All transitions i < j at the given temperature for drive direction b_dir.
std::vector<Transition> transitions(const LevelSet& levels, const Vec3& b_dir, double T);

/// E_j - E_i at field B along z.
double transition_frequency(const SpinSystem& sys, int i, int j, double B);

struct FieldBracket {
  double lo = 0.0;
  double hi = 1.0;
};

/// Field B (along b_dir) with Omega_ij(B) = f_target, by bisection to 1e-7 T.
double resonance_field(const SpinSystem& sys, int i, int j, double f_target, FieldBracket bracket,
                       const Vec3& b_dir = Vec3::UnitZ());

/// (1/mu_B) dOmega_ij/dB by a central difference with a 1e-5 T step.
double effective_slope(const SpinSystem& sys, int i, int j, double B);

enum class StrainParameter { A_par, A_perp, quadrupole };

StrainParameter parse_strain_parameter(std::string_view name);

/// dOmega_ij / d(fractional change of the parameter), GHz, from a
/// symmetric +-rel_step variation.
double strain_sensitivity(const SpinSystem& sys, int i, int j, double B, StrainParameter param,
                          double rel_step);

}  // namespace spincav
