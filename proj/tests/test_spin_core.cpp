#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"

#include <algorithm>
#include <cmath>

#include "spincav/error.hpp"
#include "spincav/spin_core.hpp"

using namespace spincav;
using Eigen::MatrixXcd;
using cd = std::complex<double>;

namespace {

constexpr double kMuB = 13.996245;
constexpr double kMuN = 7.6225932e-3;

// Spin matrices written out element by element, m descending.
struct Ops {
  MatrixXcd x, y, z;
};

Ops spin_ops(double j) {
  const int n = static_cast<int>(std::lround(2 * j)) + 1;
  Ops o{MatrixXcd::Zero(n, n), MatrixXcd::Zero(n, n), MatrixXcd::Zero(n, n)};
  for (int a = 0; a < n; ++a) {
    const double ma = j - a;
    o.z(a, a) = ma;
    for (int b = 0; b < n; ++b) {
      const double mb = j - b;
      if (std::abs(ma - mb - 1) < 1e-12) {
        const double c = 0.5 * std::sqrt(j * (j + 1) - mb * (mb + 1));
        o.x(a, b) += c;
        o.y(a, b) += cd(0, -c);
      }
      if (std::abs(ma - mb + 1) < 1e-12) {
        const double c = 0.5 * std::sqrt(j * (j + 1) - mb * (mb - 1));
        o.x(a, b) += c;
        o.y(a, b) += cd(0, c);
      }
    }
  }
  return o;
}

MatrixXcd kron(const MatrixXcd& a, const MatrixXcd& b) {
  MatrixXcd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

MatrixXcd oracle_hamiltonian(const IsotopeParams& p, const Vec3& B) {
  const Ops s = spin_ops(p.S), in = spin_ops(p.I);
  const auto es = MatrixXcd::Identity(s.z.rows(), s.z.rows());
  const auto ei = MatrixXcd::Identity(in.z.rows(), in.z.rows());
  MatrixXcd H = kMuB * (p.g_e_perp * (B.x() * kron(s.x, ei) + B.y() * kron(s.y, ei)) + p.g_e_par * B.z() * kron(s.z, ei));
  H -= kMuN * p.g_I * (B.x() * kron(es, in.x) + B.y() * kron(es, in.y) + B.z() * kron(es, in.z));
  H += p.A_par * kron(s.z, in.z) + p.A_perp * (kron(s.x, in.x) + kron(s.y, in.y));
  H += p.p * kron(es, in.z * in.z);
  return H;
}

// General complex eigen-solver, sorted real parts.
std::vector<double> oracle_levels(const IsotopeParams& p, const Vec3& B) {
  Eigen::ComplexEigenSolver<MatrixXcd> es(oracle_hamiltonian(p, B));
  std::vector<double> e;
  for (int k = 0; k < es.eigenvalues().size(); ++k) e.push_back(es.eigenvalues()(k).real());
  std::sort(e.begin(), e.end());
  return e;
}

double max_abs_diff(const std::vector<double>& a, const Eigen::VectorXd& b) {
  double m = 0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b(static_cast<int>(k))));
  return m;
}

}  // namespace

TEST_CASE("hamiltonian of the I=0 isotope is diagonal Zeeman") {
  const Eigen::MatrixXcd H = build_hamiltonian(SpinSystem(yb_even()), along_z(0.1));
  REQUIRE(H.rows() == 2);
  CHECK(std::abs(H(0, 1)) == 0.0);
  const double e = 0.5 * 4.225 * kMuB * 0.1;
  CHECK(std::abs(std::abs(H(0, 0).real()) - e) < 1e-12);
  CHECK(H(0, 0).real() == near(-H(1, 1).real(), 1e-12));
  CHECK(e == near(2.9567, 1e-4));
}

TEST_CASE("173Yb zero-field trace equals 35 p") {
  const Eigen::MatrixXcd H = build_hamiltonian(SpinSystem(yb173()), Vec3::Zero());
  CHECK(H.rows() == 12);
  CHECK(H.trace().real() == near(35 * yb173().p, 1e-12));
  CHECK(H.trace().real() == near(-2.310, 1e-9));
}

TEST_CASE("hamiltonian matches element-wise oracle and is Hermitian") {
  for (const auto& p : builtin_isotopes()) {
    for (const Vec3& B : {Vec3(0.0, 0.0, 0.02), Vec3(0.013, -0.021, 0.05), Vec3(0.3, 0.1, -0.2)}) {
      const MatrixXcd H = build_hamiltonian(SpinSystem(p), B);
      const MatrixXcd ref = oracle_hamiltonian(p, B);
      CHECK((H - ref).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((H - H.adjoint()).cwiseAbs().maxCoeff() <= 1e-12 * H.cwiseAbs().maxCoeff());
    }
  }
}

TEST_CASE("NaN field is rejected") {
  CHECK_THROWS_AS(build_hamiltonian(SpinSystem(yb171()), Vec3(0, 0, std::nan(""))), PreconditionError);
}

TEST_CASE("eigenvalues agree with an independent general eigensolver") {
  SUBCASE("171Yb at 20 mT") {
    const auto ls = diagonalize(SpinSystem(yb171()), along_z(0.02));
    CHECK(max_abs_diff(oracle_levels(yb171(), along_z(0.02)), ls.energies) < 1e-9);
  }
  SUBCASE("171Yb at 0.5 T, top gap dominated by electron Zeeman") {
    const auto ls = diagonalize(SpinSystem(yb171()), along_z(0.5));
    CHECK(max_abs_diff(oracle_levels(yb171(), along_z(0.5)), ls.energies) < 1e-9);
    const double zeeman = 4.225 * kMuB * 0.5;
    CHECK(ls.energies(3) - ls.energies(0) == near(zeeman, 0.15));
  }
  SUBCASE("173Yb at zero field: five doublets and two m_F = 0 singlets") {
    const auto ls = diagonalize(SpinSystem(yb173()), Vec3::Zero());
    CHECK(max_abs_diff(oracle_levels(yb173(), along_z(1e-9)), ls.energies) < 1e-9);
    int pairs = 0;
    for (int k = 0; k + 1 < 12; ++k)
      if (std::abs(ls.energies(k + 1) - ls.energies(k)) < 1e-6) ++pairs, ++k;
    CHECK(pairs == 5);
  }
  SUBCASE("I=0 at zero field is degenerate at 0") {
    const auto ls = diagonalize(SpinSystem(yb_even()), Vec3::Zero());
    CHECK(std::abs(ls.energies(0)) < 1e-7);
    CHECK(std::abs(ls.energies(1)) < 1e-7);
  }
}

TEST_CASE("eigenvectors are unitary, reconstruct H and follow the phase convention") {
  for (const auto& p : builtin_isotopes()) {
    const SpinSystem sys(p);
    for (double b : {0.0, 0.017, 0.08, 0.3}) {
      const LevelSet ls = diagonalize(sys, along_z(b));
      const int n = ls.size();
      for (int k = 1; k < n; ++k) CHECK(ls.energies(k) >= ls.energies(k - 1));
      CHECK((ls.states.adjoint() * ls.states - MatrixXcd::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-10);
      const MatrixXcd rec = ls.states * ls.energies.cast<cd>().asDiagonal() * ls.states.adjoint();
      // Zero field is diagonalized with the 1e-9 T tie-break applied.
      const Vec3 used = b == 0.0 ? along_z(1e-9) : along_z(b);
      CHECK((rec - build_hamiltonian(sys, used)).cwiseAbs().maxCoeff() < 1e-9);
      for (int c = 0; c < n; ++c) {
        Eigen::Index r;
        ls.states.col(c).cwiseAbs().maxCoeff(&r);
        CHECK(std::abs(ls.states(r, c).imag()) < 1e-12);
        CHECK(ls.states(r, c).real() > 0);
      }
    }
  }
}

TEST_CASE("matrix elements of the I=0 doublet") {
  const LevelSet ls = diagonalize(SpinSystem(yb_even()), along_z(0.05));
  CHECK(transition_matrix_element(ls, 0, 1, Vec3::UnitX()) == near(2.935 * kMuB / 2, 1e-12));
  CHECK(transition_matrix_element(ls, 0, 1, Vec3::UnitX()) == near(20.540, 1e-4));
  CHECK(transition_matrix_element(ls, 0, 1, Vec3::UnitZ()) < 1e-12);
  CHECK_THROWS_AS(transition_matrix_element(ls, 0, 2, Vec3::UnitX()), OutOfBoundsError);
}

TEST_CASE("matrix elements are symmetric in the level pair") {
  const LevelSet ls = diagonalize(SpinSystem(yb173()), along_z(0.04));
  const Vec3 dir = Vec3(0.3, -0.5, 0.8).normalized();
  for (int i = 0; i < 12; ++i)
    for (int j = i + 1; j < 12; ++j)
      CHECK(transition_matrix_element(ls, i, j, dir) == near(transition_matrix_element(ls, j, i, dir), 1e-12));
}

TEST_CASE("without hyperfine, nuclear elements are the bare nuclear Zeeman ones") {
  IsotopeParams p = yb173();
  p.A_par = p.A_perp = 0.0;
  const LevelSet ls = diagonalize(SpinSystem(p), along_z(0.08));
  double nuclear = 0, electronic = 0;
  for (int i = 0; i < 12; ++i)
    for (int j = i + 1; j < 12; ++j) {
      const double e = transition_matrix_element(ls, i, j, Vec3::UnitX());
      // Nuclear transitions stay inside one electronic manifold.
      const bool same_manifold = (i < 6) == (j < 6);
      (same_manifold ? nuclear : electronic) = std::max(same_manifold ? nuclear : electronic, e);
    }
  const double ratio = nuclear / electronic;
  // Largest I_x element for I = 5/2 is 3/2, S_x element is 1/2.
  CHECK(ratio == near(3 * 0.02592 * kMuN / (2.935 * kMuB), 1e-9));
  CHECK(ratio < 1e-4);
}

TEST_CASE("thermal populations") {
  const LevelSet ls = diagonalize(SpinSystem(yb173()), along_z(0.017));
  SUBCASE("normalized and antisymmetric") {
    const auto P = thermal_populations(ls, 0.05);
    CHECK(std::abs(P.sum() - 1.0) < 1e-12);
    CHECK(delta_p(P, 1, 2) == near(-delta_p(P, 2, 1), 1e-12));
  }
  SUBCASE("infinite temperature limit") {
    const auto P = thermal_populations(ls, 1e6);
    for (int k = 1; k < 12; ++k) CHECK(std::abs(delta_p(P, 0, k)) < 1e-6);
  }
  SUBCASE("zero temperature limit") {
    const auto P = thermal_populations(ls, 1e-6);
    CHECK(P(0) == near(1.0, 1e-12));
    for (int k = 1; k < 12; ++k) CHECK(delta_p(P, 0, k) == near(1.0, 1e-12));
  }
  SUBCASE("Boltzmann oracle at 10 mK") {
    const auto P = thermal_populations(ls, 0.01);
    const auto E = oracle_levels(yb173(), along_z(0.017));
    const double kT = 20.836619 * 0.01;
    double Z = 0;
    for (double e : E) Z += std::exp(-(e - E[0]) / kT);
    const double dp = (std::exp(-(E[1] - E[0]) / kT) - std::exp(-(E[2] - E[0]) / kT)) / Z;
    CHECK(std::abs(delta_p(P, 1, 2) - dp) < 1e-10);
  }
  CHECK_THROWS_AS(thermal_populations(ls, 0.0), PreconditionError);
  CHECK_THROWS_AS(thermal_populations(ls, -1.0), PreconditionError);
}

TEST_CASE("resonance fields") {
  const SpinSystem even(yb_even()), y173(yb173());
  const double b01 = resonance_field(even, 0, 1, 2.93, {0.0, 0.2});
  CHECK(b01 == near(2.93 / (4.225 * kMuB), 1e-5));
  CHECK(std::abs(transition_frequency(even, 0, 1, b01) - 2.93) < 1e-5);
  // 173Yb nuclear transitions at 414.3 MHz: published "near 17 mT and 80 mT".
  const double b12 = resonance_field(y173, 1, 2, 0.4143, {0.001, 0.05});
  const double b23 = resonance_field(y173, 2, 3, 0.4143, {0.05, 0.15});
  CHECK(std::abs(transition_frequency(y173, 1, 2, b12) - 0.4143) < 1e-5);
  CHECK(b12 == near(0.0203, 0.01));
  CHECK(b23 == near(0.080, 0.15));
  CHECK_THROWS_AS(resonance_field(even, 0, 1, 2.93, {0.0, 0.01}), NoResonanceError);
}

TEST_CASE("effective slopes") {
  const SpinSystem even(yb_even()), y173(yb173());
  CHECK(effective_slope(even, 0, 1, 0.03) == near(4.225, 1e-9));
  const double B = 0.017, h = 2e-4;
  auto w = [&](double b) { return transition_frequency(y173, 1, 2, b); };
  const double five = (-w(B + 2 * h) + 8 * w(B + h) - 8 * w(B - h) + w(B - 2 * h)) / (12 * h) / kMuB;
  CHECK(std::abs(effective_slope(y173, 1, 2, B) - five) < 1e-4);
  const double d = 3e-5;
  CHECK(effective_slope(y173, 1, 2, B) == near((w(B + d) - w(B - d)) / (2 * d * kMuB), 1e-6));
  // Above the level crossing near 15.5 mT, {1,2} is the nuclear transition.
  for (double b = 0.016; b <= 0.1; b += 0.004) CHECK(std::abs(effective_slope(y173, 1, 2, b)) < 0.1 * 4.225);
}

TEST_CASE("strain sensitivity ordering and edge cases") {
  const SpinSystem y173(yb173());
  for (auto param : {StrainParameter::A_par, StrainParameter::A_perp, StrainParameter::quadrupole}) {
    const double s01 = std::abs(strain_sensitivity(y173, 0, 1, 0.020, param, 0.01));
    const double s12 = std::abs(strain_sensitivity(y173, 1, 2, 0.017, param, 0.01));
    const double s23 = std::abs(strain_sensitivity(y173, 2, 3, 0.080, param, 0.01));
    CHECK(s01 > s12);
    CHECK(s12 > s23);
  }
  CHECK_THROWS_AS(strain_sensitivity(y173, 0, 1, 0.02, StrainParameter::A_par, 0.0), PreconditionError);
  CHECK_THROWS_AS(parse_strain_parameter("bogus"), PreconditionError);
  CHECK(strain_sensitivity(SpinSystem(yb_even()), 0, 1, 0.05, StrainParameter::quadrupole, 0.01) == 0.0);
}

TEST_CASE("without hyperfine, quadrupole and nuclear g the 173Yb spectrum is six copies of I=0") {
  IsotopeParams p = yb173();
  p.A_par = p.A_perp = p.p = p.g_I = 0.0;
  const auto big = diagonalize(SpinSystem(p), along_z(0.06)).energies;
  const auto small = diagonalize(SpinSystem(yb_even()), along_z(0.06)).energies;
  for (int k = 0; k < 12; ++k) CHECK(std::abs(big(k) - small(k / 6)) < 1e-9);
}

TEST_CASE("isotope lookup and JSON round trip") {
  CHECK(builtin_isotope("171").label == "171Yb");
  CHECK(builtin_isotope("I0").I == 0.0);
  CHECK_THROWS_AS(builtin_isotope("175"), PreconditionError);
  nlohmann::json j = yb173();
  const auto back = j.get<IsotopeParams>();
  CHECK(back.A_par == yb173().A_par);
  CHECK(back.p == yb173().p);
}
