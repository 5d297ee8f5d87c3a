#include "spincav/coupling.hpp"

#include <algorithm>
#include <cmath>

#include "spincav/error.hpp"
#include "spincav/parallel.hpp"

namespace spincav {

void CrystalSpec::validate() const {
  if (!(doping > 0.0 && doping <= 1.0)) throw PreconditionError("crystal: doping must be in (0, 1]");
  if (!(abundance > 0.0 && abundance <= 1.0)) throw PreconditionError("crystal: abundance must be in (0, 1]");
  if (!(spin_density >= 0.0)) throw PreconditionError("crystal: spin density must be >= 0");
  if (!((box.hi.array() >= box.lo.array()).all())) throw PreconditionError("crystal: box corners inverted");
}

namespace {

double overlap_1d(double a_lo, double a_hi, double b_lo, double b_hi) {
  return std::max(0.0, std::min(a_hi, b_hi) - std::max(a_lo, b_lo));
}

void require_inside(const GridSpec& s, const Box& box) {
  const Vec3 half = 0.5 * s.spacing;
  const Vec3 lo = s.origin - half;
  const Vec3 hi = s.upper() + half;
  constexpr double kSlack = 1e-9;
  for (int c = 0; c < 3; ++c)
    if (box.lo[c] < lo[c] - kSlack * s.spacing[c] || box.hi[c] > hi[c] + kSlack * s.spacing[c])
      throw OutOfBoundsError("crystal box extends beyond the field grid");
}

// Sum over cells of (A x rho dV w_k) |V(b_k i_zpf)|^2, without scale and dP.
struct FieldSum {
  double total = 0.0;
  std::size_t cells = 0;
  std::vector<double> per_cell;  // weight * |V|^2
};

FieldSum field_sum(const FieldGrid& grid, const CrystalSpec& crystal, const LevelSet& levels, int i, int j,
                   double i_zpf, bool keep, int workers) {
  crystal.validate();
  if (!(i_zpf > 0.0)) throw PreconditionError("collective_coupling: i_zpf must be > 0");
  if (i == j) throw PreconditionError("collective_coupling: i == j");
  const auto& s = grid.spec;
  require_inside(s, crystal.box);

  // Index range of cells that can overlap the box.
  std::array<int, 3> first{}, last{};
  for (int c = 0; c < 3; ++c) {
    first[c] = std::max(0, static_cast<int>(std::floor((crystal.box.lo[c] - s.origin[c]) / s.spacing[c] - 0.5)));
    last[c] = std::min(s.counts[c] - 1,
                       static_cast<int>(std::ceil((crystal.box.hi[c] - s.origin[c]) / s.spacing[c] + 0.5)));
  }
  const double density = crystal.abundance * crystal.doping * crystal.spin_density * s.cell_volume();
  const std::array<int, 3> n{last[0] - first[0] + 1, last[1] - first[1] + 1, last[2] - first[2] + 1};
  const std::size_t total = (n[0] > 0 && n[1] > 0 && n[2] > 0)
                                ? static_cast<std::size_t>(n[0]) * static_cast<std::size_t>(n[1]) * n[2]
                                : 0;
  std::vector<double> terms(total, 0.0);
  std::vector<char> inside(total, 0);
  parallel_for(total, workers, [&](std::size_t begin, std::size_t end, int) {
    for (std::size_t k = begin; k < end; ++k) {
      const int ix = first[0] + static_cast<int>(k % n[0]);
      const int iy = first[1] + static_cast<int>((k / n[0]) % n[1]);
      const int iz = first[2] + static_cast<int>(k / (static_cast<std::size_t>(n[0]) * n[1]));
      const Vec3 center = s.node(ix, iy, iz);
      double w = 1.0;
      for (int c = 0; c < 3; ++c) {
        const double h = 0.5 * s.spacing[c];
        if (s.counts[c] == 1 && crystal.box.lo[c] == crystal.box.hi[c]) continue;
        w *= overlap_1d(center[c] - h, center[c] + h, crystal.box.lo[c], crystal.box.hi[c]) / s.spacing[c];
      }
      if (w <= 0.0) continue;
      inside[k] = 1;
      const double v = std::abs(drive_element(levels, i, j, grid.at(ix, iy, iz) * i_zpf));
      terms[k] = density * w * v * v;
    }
  });
  FieldSum out;
  out.cells = static_cast<std::size_t>(std::count(inside.begin(), inside.end(), 1));
  out.total = pairwise_sum<double>(terms, 0.0);
  if (keep) {
    for (std::size_t k = 0; k < total; ++k)
      if (inside[k]) out.per_cell.push_back(terms[k]);
  }
  return out;
}

double population_factor(const LevelSet& levels, int i, int j, double T, double exponent) {
  if (!(exponent == 1.0 || exponent == 0.5)) throw PreconditionError("delta_p_exponent must be 1 or 0.5");
  const Eigen::VectorXd pop = thermal_populations(levels, T);
  return std::pow(std::abs(delta_p(pop, i, j)), exponent);
}

CouplingResult assemble(const FieldSum& sum, const LevelSet& levels, int i, int j, double T, double i_zpf,
                        double scale, const CouplingOptions& options) {
  const double dp = population_factor(levels, i, j, T, options.delta_p_exponent);
  CouplingResult r;
  r.i = i;
  r.j = j;
  r.temperature = T;
  r.scale = scale;
  r.i_zpf = i_zpf;
  r.cells = sum.cells;
  r.empty = sum.cells == 0;
  r.G = scale * std::sqrt(sum.total) * dp;
  if (options.keep_cells) {
    r.cell_couplings.reserve(sum.per_cell.size());
    for (double t : sum.per_cell) r.cell_couplings.push_back(scale * std::sqrt(t) * dp);
  }
  return r;
}

}  // namespace

CouplingResult collective_coupling(const FieldGrid& grid, const CrystalSpec& crystal, const LevelSet& levels, int i,
                                   int j, double T, double i_zpf, double scale, const CouplingOptions& options) {
  if (!(T > 0.0)) throw PreconditionError("collective_coupling: T must be > 0");
  const FieldSum sum = field_sum(grid, crystal, levels, i, j, i_zpf, options.keep_cells, options.workers);
  return assemble(sum, levels, i, j, T, i_zpf, scale, options);
}

std::vector<std::vector<CouplingResult>> temperature_curve(const FieldGrid& grid, const CrystalSpec& crystal,
                                                           const LevelSet& levels,
                                                           const std::vector<TransitionPair>& transitions,
                                                           const std::vector<double>& temperatures, double i_zpf,
                                                           double scale, const CouplingOptions& options) {
  for (double T : temperatures)
    if (!(T > 0.0)) throw PreconditionError("temperature_curve: all T must be > 0");
  std::vector<std::vector<CouplingResult>> out;
  for (const auto& [i, j] : transitions) {
    // Only the population difference depends on T.
    const FieldSum sum = field_sum(grid, crystal, levels, i, j, i_zpf, options.keep_cells, options.workers);
    auto& row = out.emplace_back();
    for (double T : temperatures) row.push_back(assemble(sum, levels, i, j, T, i_zpf, scale, options));
  }
  return out;
}

std::vector<GapPoint> gap_scan(const FieldGrid& grid, const CrystalSpec& crystal, const LevelSet& levels,
                               const std::vector<TransitionPair>& transitions, const std::vector<double>& gaps,
                               double T, double i_zpf, double scale, const CouplingOptions& options) {
  std::vector<GapPoint> out;
  for (double gap : gaps) {
    GapPoint point;
    point.gap = gap;
    CrystalSpec moved = crystal;
    moved.box = crystal.box.shifted(Vec3(0.0, 0.0, gap));
    try {
      for (const auto& [i, j] : transitions)
        point.couplings.push_back(collective_coupling(grid, moved, levels, i, j, T, i_zpf, scale, options));
    } catch (const OutOfBoundsError& e) {
      point.couplings.clear();
      point.error = e.what();
    }
    out.push_back(std::move(point));
  }
  return out;
}

double infer_gap(const std::vector<double>& gaps, const std::vector<double>& G, double G_measured) {
  if (gaps.size() != G.size() || gaps.size() < 2) throw PreconditionError("infer_gap: need >= 2 matching points");
  for (std::size_t k = 0; k + 1 < gaps.size(); ++k) {
    const double a = G[k] - G_measured;
    const double b = G[k + 1] - G_measured;
    if (a == 0.0) return gaps[k];
    if ((a > 0.0) != (b > 0.0) || b == 0.0) {
      const double t = a / (a - b);
      return gaps[k] + t * (gaps[k + 1] - gaps[k]);
    }
  }
  throw NoResonanceError("infer_gap: measured G outside the scanned range");
}

double cooperativity(double G, double gamma, double kappa) {
  if (!(gamma > 0.0 && kappa > 0.0)) throw PreconditionError("cooperativity: gamma and kappa must be > 0");
  return G * G / (gamma * kappa);
}

nlohmann::json coupling_report(const CouplingResult& r, std::optional<double> gamma, std::optional<double> kappa) {
  nlohmann::json j{{"transition", {r.i, r.j}}, {"T_K", r.temperature}, {"G_GHz", r.G}, {"cells", r.cells},
                   {"scale", r.scale},         {"i_zpf_A", r.i_zpf},   {"empty", r.empty}};
  if (gamma && kappa) j["C"] = cooperativity(r.G, *gamma, *kappa);
  return j;
}

}  // namespace spincav
