#pragma once

#include <Eigen/Dense>
#include <complex>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spincav/spin_core.hpp"

namespace spincav {

using Complex = std::complex<double>;

/// Lumped-element resonator. All rates are half-widths in GHz (ordinary
/// frequency); phi is the line-shape asymmetry phase.
struct ResonatorParams {
  double f_r = 1.0;
  double kappa_i = 0.0;
  double kappa_e = 1e-6;
  double phi = 0.0;
  Complex alpha{1.0, 0.0};

  double kappa() const { return kappa_i + kappa_e; }
  void validate() const;
};

/// One spin-transition oscillator. Gamma_line is the direct coupling to the
/// feedline (zero for spins that only see the resonator).
struct SpinModeParams {
  double omega = 0.0;
  double gamma = 1e-3;
  double G = 0.0;
  double Gamma_line = 0.0;
};

struct CoupledModeModel {
  ResonatorParams resonator;
  std::vector<SpinModeParams> spins;
};

/// (Omega, gamma, Gamma) of a transition seen directly by the line.
struct LineTransition {
  double omega = 0.0;
  double gamma = 1e-3;
  double Gamma = 0.0;
};

/// S21 = alpha / (1 + sum Gamma / (gamma + i (Omega - f))).
Complex broadband_s21(std::span<const LineTransition> transitions, double f, Complex alpha = {1.0, 0.0});

/// Bose-Einstein occupation of a mode at `omega` GHz and temperature T.
double bose_occupation(double omega, double T);

/// Line coupling of transition (i, j):
///   2 pi g |<psi_j|V|psi_i>|^2 dP_ij Omega_ij (n + 1)
/// with V evaluated for the unit drive direction b_dir.
double broadband_gamma(const LevelSet& levels, int i, int j, double T, double g_density, double n_occ = 0.0,
                       const Vec3& b_dir = Vec3::UnitX());

/// Complex transmission of the resonator coupled to M spin modes.
Complex coupled_s21_complex(const CoupledModeModel& model, double f);

/// |S21| = |alpha| |1 - i sqrt(kappa_e e^{i phi}) b_1 - ...|.
double coupled_s21(const CoupledModeModel& model, double f);

/// |S21| (or complex S21) as a function of field and frequency, stored
/// B-major: value(iB, jf) = values[iB * f.size() + jf].
struct TransmissionMap {
  std::vector<double> B;  // tesla
  std::vector<double> f;  // GHz
  std::vector<double> magnitude;
  std::optional<std::vector<double>> phase;  // radians

  std::size_t rows() const { return B.size(); }
  std::size_t cols() const { return f.size(); }
  double& at(std::size_t iB, std::size_t jf) { return magnitude[iB * f.size() + jf]; }
  double at(std::size_t iB, std::size_t jf) const { return magnitude[iB * f.size() + jf]; }
  std::span<const double> column(std::size_t iB) const {
    return std::span<const double>(magnitude).subspan(iB * f.size(), f.size());
  }
  /// Throws PreconditionError unless both axes are strictly monotone and
  /// the value grid matches them.
  void validate() const;
};

void save_map(const TransmissionMap& map, const std::string& path);
TransmissionMap load_map(const std::string& path);

/// Spin transition frequency as a function of field (GHz).
using FrequencyLaw = std::function<double(double B)>;

/// Omega(B) = g_eff mu_B B / h + Omega(0).
struct LinearLaw {
  double g_eff = 0.0;
  double omega0 = 0.0;
  double operator()(double B) const { return g_eff * kCodata.mu_B_over_h * B + omega0; }
};

/// Omega_ij(B) from diagonalizing the spin Hamiltonian at B along z.
FrequencyLaw hamiltonian_law(const SpinSystem& sys, int i, int j);

/// A spin branch of a cavity map: field-dependent frequency plus fixed
/// linewidth and couplings.
struct SpinBranch {
  FrequencyLaw omega;
  double gamma = 1e-3;
  double G = 0.0;
  double Gamma_line = 0.0;
};

/// Dense |S21| map; columns (fixed B) are independent and computed in
/// parallel. With keep_phase the complex phase is stored too.
TransmissionMap simulate_map(const ResonatorParams& resonator, std::span<const SpinBranch> branches,
                             const std::vector<double>& B, const std::vector<double>& f, int workers = 0,
                             bool keep_phase = false);

/// (S(B_k) - S(B_{k+d})) / S(B_{k+d}) with d the index offset between B1 and
/// B2, applied as a sliding pair over the whole sweep. The output B axis
/// holds B_k. Cells with a zero denominator are NaN (masked).
TransmissionMap normalize_map(const TransmissionMap& map, double B1, double B2);

std::size_t masked_cells(const TransmissionMap& map);

/// Photons stored in the resonator for drive power P_in (watts); rates
/// converted to rad/s internally.
double photon_number(double P_in, const ResonatorParams& resonator);

inline double dbm_to_watts(double dbm) { return 1e-3 * std::pow(10.0, dbm / 10.0); }

/// One isotope in a line-spectroscopy sample.
struct BroadbandSpecies {
  IsotopeParams params;
  double weight = 1.0;  // fraction of spins
  double gamma = 1e-2;  // GHz
};

/// A transition seen by the line at one field: Gamma = g weight strength,
/// strength = 2 pi |V|^2 dP Omega (n + 1).
struct BroadbandLine {
  int species = 0;
  int i = 0;
  int j = 0;
  double omega = 0.0;
  double strength = 0.0;
};

struct BroadbandOptions {
  double T = 0.01;
  bool thermal_occupation = false;  // Bose-Einstein n instead of n = 0
  Vec3 drive_dir = Vec3::UnitX();
  /// Lines weaker than this fraction of the strongest line are dropped.
  double min_relative_strength = 1e-9;
  int workers = 0;
};

/// Per-field list of all transitions of all species, strongest kept.
std::vector<std::vector<BroadbandLine>> broadband_lines(std::span<const BroadbandSpecies> species,
                                                        const std::vector<double>& B,
                                                        const BroadbandOptions& options);

/// Raw |S21|(B, f) of the line with the spins on it.
TransmissionMap simulate_broadband(std::span<const BroadbandSpecies> species, const std::vector<double>& B,
                                   const std::vector<double>& f, double g_density, Complex alpha,
                                   const BroadbandOptions& options);

/// Same, from precomputed lines and per-species amplitudes a_k = g weight_k.
TransmissionMap broadband_map_from_lines(const std::vector<std::vector<BroadbandLine>>& lines,
                                         std::span<const double> amplitudes, std::span<const double> gammas,
                                         const std::vector<double>& B, const std::vector<double>& f,
                                         Complex alpha, int workers);

// ---------------------------------------------------------------------------
// Time domain

/// Complex input amplitude as a function of time in microseconds.
using DriveEnvelope = std::function<Complex(double t_us)>;

DriveEnvelope square_pulse(double t_on_us, double t_off_us, double amplitude = 1.0);

struct PulseOptions {
  double duration_us = 1.0;
  /// Fixed RK4 step; <= 0 picks 0.05 / (fastest angular rate).
  double step_us = 0.0;
  /// Max tolerated step-doubling error of the one-step propagator, relative
  /// to a unit state.
  double tolerance = 1e-6;
  /// Keep every n-th step in the output traces.
  int record_stride = 1;
  /// Normalization of |S21|(t): |r_out| / reference_amplitude.
  double reference_amplitude = 1.0;
  /// Start of the ring-down used for the decay fit; negative disables it.
  double ringdown_start_us = -1.0;
  /// Initial mode amplitudes (resonator first); empty means all zero.
  Eigen::VectorXcd initial_state;
  int workers = 0;
};

struct PulseTrace {
  double f_drive = 0.0;
  std::vector<double> s21;      // |S21|(t)
  std::vector<Complex> cavity;  // x_1(t)
  double kappa_tilde = 0.0;     // GHz, from |S21| ~ exp(-2 pi kappa t)
  double fit_residual = 0.0;
};

struct PulseResult {
  std::vector<double> t_us;
  std::vector<PulseTrace> traces;
  double kappa_tilde = 0.0;  // from the first trace
  double fit_residual = 0.0;
  /// 1 / (2 pi x decay rate) of the most spin-like normal mode, microseconds.
  double T2_star_us = 0.0;
};

/// Integrates the driven coupled-mode equations in the frame rotating at
/// each drive frequency with classical RK4 and step-doubling error control.
PulseResult time_evolve(const CoupledModeModel& model, const DriveEnvelope& drive, std::span<const double> f_drive,
                        const PulseOptions& options);

void save_pulse(const PulseResult& result, const std::string& path);
/// Reads t_us, f_drive and |S21| back; derived quantities are not stored.
PulseResult load_pulse(const std::string& path);

// ---------------------------------------------------------------------------
// Effective resonance extraction

struct ExtractOptions {
  /// Dip depth must exceed this many median absolute deviations.
  double min_depth_mads = 3.0;
  double tolerance = 1e-14;
  int max_iterations = 200;
};

/// Single-resonance fit of one map column.
struct ColumnResonance {
  bool found = false;
  double f_r = 0.0;
  double kappa = 0.0;
  double kappa_i = 0.0;
  double kappa_e = 0.0;
  double phi = 0.0;
  double alpha = 1.0;
  double residual_norm = 0.0;
};

/// |S21| of a bare resonator, the single-resonance shape.
double bare_s21(const ResonatorParams& r, double f);

/// Least-squares fit of the bare-resonator shape to one column. A column
/// without a resolvable dip returns found = false.
ColumnResonance extract_effective_resonance(std::span<const double> f, std::span<const double> s21,
                                            const ExtractOptions& options = {});

struct RingdownFit {
  double kappa_tilde = 0.0;  // GHz
  double residual = 0.0;     // rms of log residuals
  std::size_t points = 0;
};

/// Exponential fit |S21| ~ exp(-2 pi kappa t) to a ring-down that starts at
/// t_off. The window starts once the signal has fallen to `start_fraction`
/// of its value at t_off and ends at `floor_fraction`.
RingdownFit extract_ringdown_rate(std::span<const double> t_us, std::span<const double> s21, double t_off_us,
                                  double start_fraction = 0.5, double floor_fraction = 1e-6);

}  // namespace spincav
