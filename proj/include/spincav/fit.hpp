#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spincav/io_model.hpp"
#include "spincav/least_squares.hpp"

namespace spincav {

/// One spin branch with the linear law Omega(B) = g_eff mu_B B + omega0.
struct LinearSpin {
  double G = 0.0;
  double gamma = 1e-3;
  double g_eff = 2.0;
  double omega0 = 0.0;
};

/// Parameters of the cavity-map model.
struct CavityModel {
  ResonatorParams resonator;
  std::vector<LinearSpin> spins;
};

/// Evaluates the cavity model on a grid. With `laws` given, branch m uses
/// laws[m](B) + omega0 and ignores g_eff.
TransmissionMap cavity_map(const CavityModel& model, const std::vector<double>& B, const std::vector<double>& f,
                           int workers = 0, bool keep_phase = false, std::span<const FrequencyLaw> laws = {});

/// Model map plus Gaussian magnitude noise of standard deviation sigma;
/// deterministic for a given seed.
TransmissionMap generate_synthetic(const CavityModel& truth, const std::vector<double>& B,
                                   const std::vector<double>& f, double sigma, std::uint64_t seed,
                                   int workers = 0, std::span<const FrequencyLaw> laws = {});

enum class FrequencyLawKind { linear, hamiltonian };

struct FitConfig {
  int transitions = 0;  // M
  FrequencyLawKind law = FrequencyLawKind::linear;
  /// Hamiltonian law: isotope name or parameters and one level pair per
  /// transition. omega0 then acts as an additive offset and g_eff is unused.
  std::optional<IsotopeParams> isotope;
  std::vector<std::pair<int, int>> levels;

  /// Initial values by parameter name; anything missing is seeded from the
  /// data. Names: f_r, kappa_i, kappa_e, phi, alpha, alpha_phase and
  /// G_m, gamma_m, g_eff_m, omega0_m for m = 1..M.
  std::map<std::string, double> initial;
  std::map<std::string, std::pair<double, double>> bounds;
  std::vector<std::string> frozen;

  double gradient_tol = 1e-12;
  double step_tol = 1e-12;
  int max_iterations = 300;
  int multistart = 4;
  double jitter = 0.3;  // relative spread of the G and omega0 restarts
  std::uint64_t seed = 1;
  bool complex_residuals = false;  // needs a phase column in the map
  int workers = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const FitConfig& c);
void from_json(const nlohmann::json& j, FitConfig& c);

/// Per-column single-resonance extraction kept for diagnostics.
struct ColumnTrace {
  double B = 0.0;
  ColumnResonance resonance;
};

struct FitParameter {
  std::string name;
  double value = 0.0;
  double sigma = 0.0;
  bool frozen = false;
};

struct FitResult {
  std::vector<FitParameter> parameters;
  CavityModel model;
  std::vector<double> cooperativity;  // per transition
  double residual_norm = 0.0;
  double initial_residual_norm = 0.0;
  std::vector<ColumnTrace> columns;
  std::string status;
  bool converged = false;
  int iterations = 0;
  int runs = 0;
  std::vector<std::string> degenerate;

  const FitParameter& parameter(const std::string& name) const;
};

void to_json(nlohmann::json& j, const FitResult& r);

/// Extracts (f_r, kappa) per column, in parallel.
std::vector<ColumnTrace> extract_columns(const TransmissionMap& map, const ExtractOptions& options = {},
                                         int workers = 0);

/// Fits the coupled-mode model to the whole map at once.
FitResult fit_resonator_map(const TransmissionMap& map, const FitConfig& config);

// ---------------------------------------------------------------------------
// Line spectroscopy

struct BroadbandFitConfig {
  std::vector<BroadbandSpecies> species;  // weights and gammas are initial values
  BroadbandOptions options;
  double g_density = 1.0;  // initial value
  /// Fit one amplitude per species instead of g with fixed weights; the
  /// weights are then reported as amplitude fractions.
  bool abundance_diagnostic = false;
  /// > 0: data and model are both normalized with this sliding B-index offset.
  int normalize_offset = 0;
  Complex alpha{1.0, 0.0};
  double gradient_tol = 1e-12;
  double step_tol = 1e-12;
  int max_iterations = 200;
};

struct BroadbandFitResult {
  double g_density = 0.0;
  std::vector<double> gammas;
  std::vector<double> gamma_sigmas;
  std::vector<double> weights;  // fitted fractions (diagnostic) or the fixed input
  double residual_norm = 0.0;
  double initial_residual_norm = 0.0;
  std::string status;
  bool converged = false;
  int iterations = 0;
};

void to_json(nlohmann::json& j, const BroadbandFitResult& r);

BroadbandFitResult fit_broadband_map(const TransmissionMap& map, const BroadbandFitConfig& config);

}  // namespace spincav
