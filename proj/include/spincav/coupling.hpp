#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spincav/field_map.hpp"
#include "spincav/spin_core.hpp"

namespace spincav {

/// Crystal occupying an axis-aligned box of the field grid.
struct CrystalSpec {
  Box box;                   // micrometers, field-grid coordinates
  double spin_density = 0.0; // spins per um^3 at 100% doping
  double doping = 1.0;       // x
  double abundance = 1.0;    // isotope fraction
  Vec3 axis = Vec3::UnitZ();

  void validate() const;
};

struct CouplingOptions {
  /// Power of the population difference in the per-cell coupling (1 or 0.5).
  double delta_p_exponent = 1.0;
  bool keep_cells = false;
  int workers = 0;
};

struct CouplingResult {
  int i = 0;
  int j = 0;
  double G = 0.0;  // GHz
  double temperature = 0.0;
  double scale = 1.0;
  double i_zpf = 0.0;
  std::size_t cells = 0;  // grid cells overlapping the crystal
  bool empty = false;     // no overlap: G = 0 and flagged
  std::vector<double> cell_couplings;  // per-cell g, only with keep_cells
};

/// Collective coupling G_ij = sqrt(sum_k g_k^2) over the grid cells inside
/// the crystal, with
///   g_k = scale * sqrt(A x rho dV w_k) * |<psi_j| V(b_k i_zpf) |psi_i>| * |dP_ij(T)|^e
/// where w_k is the fractional overlap of cell k with the crystal box and
/// each grid node is the center of its cell.
CouplingResult collective_coupling(const FieldGrid& grid, const CrystalSpec& crystal, const LevelSet& levels, int i,
                                   int j, double T, double i_zpf, double scale, const CouplingOptions& options = {});

using TransitionPair = std::pair<int, int>;

/// G(T) for each transition: result[t][k] is transition t at temperatures[k].
std::vector<std::vector<CouplingResult>> temperature_curve(const FieldGrid& grid, const CrystalSpec& crystal,
                                                           const LevelSet& levels,
                                                           const std::vector<TransitionPair>& transitions,
                                                           const std::vector<double>& temperatures, double i_zpf,
                                                           double scale, const CouplingOptions& options = {});

struct GapPoint {
  double gap = 0.0;  // um
  std::vector<CouplingResult> couplings;  // one per transition when ok
  std::optional<std::string> error;
};

/// Moves the crystal away from the chip (+z) by each gap and recomputes G.
/// Gaps that push the crystal out of the grid yield an error entry.
std::vector<GapPoint> gap_scan(const FieldGrid& grid, const CrystalSpec& crystal, const LevelSet& levels,
                               const std::vector<TransitionPair>& transitions, const std::vector<double>& gaps,
                               double T, double i_zpf, double scale, const CouplingOptions& options = {});

/// Gap at which a decreasing G(gap) curve crosses G_measured, by linear
/// interpolation. NoResonanceError if the value is not bracketed.
double infer_gap(const std::vector<double>& gaps, const std::vector<double>& G, double G_measured);

/// C = G^2 / (gamma kappa).
double cooperativity(double G, double gamma, double kappa);

nlohmann::json coupling_report(const CouplingResult& r, std::optional<double> gamma = std::nullopt,
                               std::optional<double> kappa = std::nullopt);

}  // namespace spincav
