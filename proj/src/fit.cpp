#include "spincav/fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "spincav/coupling.hpp"
#include "spincav/error.hpp"
#include "spincav/parallel.hpp"

namespace spincav {

namespace {

constexpr Complex kI{0.0, 1.0};
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr int kResonatorParams = 6;
constexpr int kSpinParams = 4;
const char* const kResonatorNames[kResonatorParams] = {"f_r", "kappa_i", "kappa_e", "phi", "alpha", "alpha_phase"};
const char* const kSpinNames[kSpinParams] = {"G", "gamma", "g_eff", "omega0"};

std::vector<std::string> parameter_names(int M) {
  std::vector<std::string> names(kResonatorNames, kResonatorNames + kResonatorParams);
  for (int m = 1; m <= M; ++m)
    for (const char* n : kSpinNames) names.push_back(std::string(n) + "_" + std::to_string(m));
  return names;
}

// Star-topology S21 with explicit spin frequencies.
Complex star_s21(const double* x, std::span<const double> omegas, double f) {
  Complex denom = kI * (x[0] - f) + (x[1] + x[2]);
  for (std::size_t m = 0; m < omegas.size(); ++m) {
    const double G = x[kResonatorParams + kSpinParams * m];
    const double gamma = x[kResonatorParams + kSpinParams * m + 1];
    if (G == 0.0) continue;
    denom += G * G / (kI * (omegas[m] - f) + gamma);
  }
  return std::polar(x[4], x[5]) * (1.0 - x[2] * std::exp(kI * x[3]) / denom);
}

Eigen::VectorXd pack(const CavityModel& model) {
  const auto M = static_cast<Eigen::Index>(model.spins.size());
  Eigen::VectorXd x(kResonatorParams + kSpinParams * M);
  const auto& r = model.resonator;
  x.head(kResonatorParams) << r.f_r, r.kappa_i, r.kappa_e, r.phi, std::abs(r.alpha), std::arg(r.alpha);
  for (Eigen::Index m = 0; m < M; ++m) {
    const auto& s = model.spins[static_cast<std::size_t>(m)];
    x.segment(kResonatorParams + kSpinParams * m, kSpinParams) << s.G, s.gamma, s.g_eff, s.omega0;
  }
  return x;
}

CavityModel unpack(const Eigen::VectorXd& x, int M) {
  CavityModel model;
  model.resonator.f_r = x[0];
  model.resonator.kappa_i = x[1];
  model.resonator.kappa_e = x[2];
  model.resonator.phi = x[3];
  model.resonator.alpha = std::polar(x[4], x[5]);
  for (int m = 0; m < M; ++m) {
    const double* s = x.data() + kResonatorParams + kSpinParams * m;
    model.spins.push_back({s[0], s[1], s[2], s[3]});
  }
  return model;
}

// Spin frequencies per (column, branch): either the linear law from the
// parameters or a cached Hamiltonian law plus the omega0 offset.
// Internally the linear law is Omega(B) = Omega_ref + g_eff mu_B (B - B_ref),
// which keeps g_eff and the offset nearly orthogonal over a narrow sweep.
struct OmegaTable {
  std::vector<std::vector<double>> law;  // [branch][column], empty for linear
  std::vector<double> B_ref;             // per branch, linear law only

  void fill(const double* x, int M, double B, std::size_t column, std::vector<double>& out) const {
    out.resize(static_cast<std::size_t>(M));
    for (int m = 0; m < M; ++m) {
      const auto mm = static_cast<std::size_t>(m);
      const double* s = x + kResonatorParams + kSpinParams * m;
      out[mm] = law.empty() ? s[2] * kCodata.mu_B_over_h * (B - B_ref[mm]) + s[3] : law[mm][column] + s[3];
    }
  }

  // Offset slot <-> user omega0.
  double shift(const double* x, int m) const {
    if (!law.empty()) return 0.0;
    return x[kResonatorParams + kSpinParams * m + 2] * kCodata.mu_B_over_h * B_ref[static_cast<std::size_t>(m)];
  }
};

// Stage one of the map fit: matches f_r, kappa and the spin parameters to
// the per-column single-resonance extraction. Each extracted (f, kappa) is
// compared with the nearest complex eigenvalue of the non-Hermitian mode
// matrix [[f_r - i kappa, G], [G, Omega - i gamma]]. The landscape is smooth
// where the full |S21| residual is flat (narrow dips far from the model).
Eigen::VectorXd fit_traces(const std::vector<ColumnTrace>& columns, const OmegaTable& omega, int M,
                           const Eigen::VectorXd& x, const LeastSquaresProblem& full,
                           const LeastSquaresOptions& options) {
  std::vector<std::size_t> used;
  for (std::size_t b = 0; b < columns.size(); ++b)
    if (columns[b].resonance.found && columns[b].resonance.kappa > 0.0) used.push_back(b);
  const auto nt = static_cast<Eigen::Index>(2 + kSpinParams * M);
  if (M == 0 || static_cast<Eigen::Index>(2 * used.size()) <= nt) return x;

  auto is_frozen = [&](Eigen::Index k) { return !full.frozen.empty() && full.frozen[static_cast<std::size_t>(k)]; };
  LeastSquaresProblem p;
  p.lower = Eigen::VectorXd(nt);
  p.upper = Eigen::VectorXd(nt);
  p.scale = Eigen::VectorXd(nt);
  p.frozen.assign(static_cast<std::size_t>(nt), false);
  Eigen::VectorXd t0(nt);
  t0[0] = x[0];
  t0[1] = x[1] + x[2];
  p.lower.head(2) << full.lower[0], 1e-15;
  p.upper.head(2) << full.upper[0], kInf;
  p.scale.head(2) << full.scale[0], full.scale[1];
  p.frozen[0] = is_frozen(0);
  p.frozen[1] = is_frozen(1) && is_frozen(2);
  const Eigen::Index ns = kSpinParams * M;
  t0.tail(ns) = x.tail(ns);
  p.lower.tail(ns) = full.lower.tail(ns);
  p.upper.tail(ns) = full.upper.tail(ns);
  p.scale.tail(ns) = full.scale.tail(ns);
  for (Eigen::Index k = 0; k < ns; ++k) p.frozen[static_cast<std::size_t>(2 + k)] = is_frozen(kResonatorParams + k);

  // Columns where a second pole distorts the single-resonance shape carry a
  // biased extraction; their weight falls with the shape-fit residual.
  double res_ref = kInf;
  for (std::size_t b : used) res_ref = std::min(res_ref, columns[b].resonance.residual_norm);
  std::vector<double> weight;
  for (std::size_t b : used) {
    const double res = columns[b].resonance.residual_norm;
    weight.push_back(res_ref > 0.0 ? std::min(1.0, res_ref / res) : res == 0.0 ? 1.0 : 0.0);
  }

  p.residuals = [&](const Eigen::VectorXd& t, Eigen::VectorXd& r) {
    Eigen::VectorXd xf = x;
    xf[0] = t[0];
    xf.tail(ns) = t.tail(ns);
    std::vector<double> omegas;
    Eigen::MatrixXcd H = Eigen::MatrixXcd::Zero(M + 1, M + 1);
    Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es;
    r.resize(static_cast<Eigen::Index>(2 * used.size()));
    for (std::size_t u = 0; u < used.size(); ++u) {
      const auto& c = columns[used[u]];
      omega.fill(xf.data(), M, c.B, used[u], omegas);
      H(0, 0) = Complex(t[0], -t[1]);
      for (int m = 0; m < M; ++m) {
        const double* sp = xf.data() + kResonatorParams + kSpinParams * m;
        H(m + 1, m + 1) = Complex(omegas[static_cast<std::size_t>(m)], -sp[1]);
        H(0, m + 1) = H(m + 1, 0) = sp[0];
      }
      es.compute(H, false);
      const Complex observed(c.resonance.f_r, -c.resonance.kappa);
      Complex nearest = es.eigenvalues()(0);
      for (Eigen::Index k = 1; k <= M; ++k)
        if (std::abs(es.eigenvalues()(k) - observed) < std::abs(nearest - observed)) nearest = es.eigenvalues()(k);
      const double w = c.resonance.kappa / weight[u];
      r[static_cast<Eigen::Index>(2 * u)] = (nearest.real() - observed.real()) / w;
      r[static_cast<Eigen::Index>(2 * u + 1)] = (nearest.imag() - observed.imag()) / w;
    }
  };
  const LeastSquaresResult fit = levenberg_marquardt(p, t0.cwiseMax(p.lower).cwiseMin(p.upper), options);
  Eigen::VectorXd out = x;
  out[0] = fit.x[0];
  const double split = x[1] + x[2] > 0 ? x[1] / (x[1] + x[2]) : 0.5;
  if (!p.frozen[1]) {
    out[1] = is_frozen(1) ? x[1] : split * fit.x[1];
    out[2] = is_frozen(2) ? x[2] : fit.x[1] - out[1];
  }
  out.tail(ns) = fit.x.tail(ns);
  return out.cwiseMax(full.lower).cwiseMin(full.upper);
}

// In the dispersive regime the map mostly constrains G^2 / g_eff and
// gamma / g_eff at a fixed crossing field. Scans that family
// (G sqrt(s), gamma s, g_eff s) for each linear-law branch with a log grid
// and golden-section refinement, keeping the crossing where it is.
Eigen::VectorXd scan_scaling(const LeastSquaresProblem& problem, const OmegaTable& omega, int M,
                             Eigen::VectorXd x) {
  if (!omega.law.empty()) return x;
  auto frozen = [&](Eigen::Index k) { return !problem.frozen.empty() && problem.frozen[static_cast<std::size_t>(k)]; };
  Eigen::VectorXd r;
  for (int m = 0; m < M; ++m) {
    const Eigen::Index base = kResonatorParams + kSpinParams * m;
    if (frozen(base) || frozen(base + 1) || frozen(base + 2) || frozen(base + 3)) continue;
    const double slope = x[base + 2] * kCodata.mu_B_over_h;
    if (slope == 0.0 || x[base] == 0.0) continue;
    const double B_ref = omega.B_ref[static_cast<std::size_t>(m)];
    const double B_cross = B_ref + (x[0] - x[base + 3]) / slope;
    const Eigen::VectorXd start = x;
    auto scaled = [&](double u) {
      Eigen::VectorXd y = start;
      const double s = std::exp(u);
      y[base] *= std::sqrt(s);
      y[base + 1] *= s;
      y[base + 2] *= s;
      y[base + 3] = y[0] - y[base + 2] * kCodata.mu_B_over_h * (B_cross - B_ref);
      return y;
    };
    auto cost = [&](double u) {
      const Eigen::VectorXd y = scaled(u);
      if (((y - y.cwiseMax(problem.lower).cwiseMin(problem.upper)).array() != 0.0).any()) return kInf;
      problem.residuals(y, r);
      return r.squaredNorm();
    };
    constexpr int kGrid = 16;
    constexpr double kSpan = 1.2;  // ln 3.3
    double best_u = 0.0;
    double best = cost(0.0);
    for (int k = 0; k <= kGrid; ++k) {
      const double u = -kSpan + 2.0 * kSpan * k / kGrid;
      const double c = cost(u);
      if (c < best) best = c, best_u = u;
    }
    const double h = 2.0 * kSpan / kGrid;
    double a = best_u - h, b = best_u + h;
    constexpr double kRatio = 0.6180339887498949;
    double c1 = b - kRatio * (b - a), c2 = a + kRatio * (b - a);
    double f1 = cost(c1), f2 = cost(c2);
    for (int it = 0; it < 30; ++it) {
      if (f1 < f2) {
        b = c2, c2 = c1, f2 = f1;
        c1 = b - kRatio * (b - a), f1 = cost(c1);
      } else {
        a = c1, c1 = c2, f1 = f2;
        c2 = a + kRatio * (b - a), f2 = cost(c2);
      }
    }
    const double u = f1 < f2 ? c1 : c2;
    if (std::min(f1, f2) < best) best_u = u;
    x = scaled(best_u);
  }
  return x;
}

}  // namespace

TransmissionMap cavity_map(const CavityModel& model, const std::vector<double>& B, const std::vector<double>& f,
                           int workers, bool keep_phase, std::span<const FrequencyLaw> laws) {
  if (!laws.empty() && laws.size() != model.spins.size())
    throw PreconditionError("cavity_map: one frequency law per branch required");
  std::vector<SpinBranch> branches;
  for (std::size_t m = 0; m < model.spins.size(); ++m) {
    const auto& s = model.spins[m];
    FrequencyLaw omega = laws.empty() ? FrequencyLaw(LinearLaw{s.g_eff, s.omega0})
                                      : FrequencyLaw([law = laws[m], o = s.omega0](double b) { return law(b) + o; });
    branches.push_back({omega, s.gamma, s.G, 0.0});
  }
  return simulate_map(model.resonator, branches, B, f, workers, keep_phase);
}

TransmissionMap generate_synthetic(const CavityModel& truth, const std::vector<double>& B,
                                   const std::vector<double>& f, double sigma, std::uint64_t seed, int workers,
                                   std::span<const FrequencyLaw> laws) {
  if (!(sigma >= 0.0)) throw PreconditionError("generate_synthetic: sigma must be >= 0");
  TransmissionMap map = cavity_map(truth, B, f, workers, false, laws);
  if (sigma > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    for (double& v : map.magnitude) v += noise(rng);
  }
  return map;
}

void FitConfig::validate() const {
  if (transitions < 0) throw PreconditionError("fit config: transitions must be >= 0");
  if (!(gradient_tol > 0 && step_tol > 0 && max_iterations > 0))
    throw PreconditionError("fit config: tolerances and max_iterations must be > 0");
  if (multistart < 1) throw PreconditionError("fit config: multistart must be >= 1");
  if (law == FrequencyLawKind::hamiltonian &&
      (!isotope || levels.size() != static_cast<std::size_t>(transitions)))
    throw PreconditionError("fit config: hamiltonian law needs an isotope and one level pair per transition");
  const auto names = parameter_names(transitions);
  auto known = [&](const std::string& n) { return std::find(names.begin(), names.end(), n) != names.end(); };
  for (const auto& [n, v] : initial)
    if (!known(n)) throw PreconditionError("fit config: unknown parameter '" + n + "'");
  for (const auto& [n, b] : bounds) {
    if (!known(n)) throw PreconditionError("fit config: unknown parameter '" + n + "'");
    if (!(b.first <= b.second)) throw PreconditionError("fit config: inverted bounds for '" + n + "'");
    auto it = initial.find(n);
    if (it != initial.end() && !(it->second >= b.first && it->second <= b.second))
      throw PreconditionError("fit config: initial value of '" + n + "' outside its bounds");
  }
  for (const auto& n : frozen)
    if (!known(n)) throw PreconditionError("fit config: unknown parameter '" + n + "'");
}

void to_json(nlohmann::json& j, const FitConfig& c) {
  j = nlohmann::json{{"transitions", c.transitions},
                     {"law", c.law == FrequencyLawKind::linear ? "linear" : "hamiltonian"},
                     {"initial", c.initial},
                     {"frozen", c.frozen},
                     {"gradient_tol", c.gradient_tol},
                     {"step_tol", c.step_tol},
                     {"max_iterations", c.max_iterations},
                     {"multistart", c.multistart},
                     {"jitter", c.jitter},
                     {"seed", c.seed},
                     {"complex_residuals", c.complex_residuals}};
  nlohmann::json bounds = nlohmann::json::object();
  for (const auto& [n, b] : c.bounds) bounds[n] = {b.first, b.second};
  j["bounds"] = bounds;
  if (c.isotope) j["isotope"] = *c.isotope;
  if (!c.levels.empty()) j["levels"] = c.levels;
}

void from_json(const nlohmann::json& j, FitConfig& c) {
  c = FitConfig{};
  c.transitions = j.value("transitions", 0);
  const std::string law = j.value("law", "linear");
  if (law == "linear") {
    c.law = FrequencyLawKind::linear;
  } else if (law == "hamiltonian") {
    c.law = FrequencyLawKind::hamiltonian;
  } else {
    throw PreconditionError("fit config: law must be 'linear' or 'hamiltonian'");
  }
  if (j.contains("isotope")) {
    const auto& iso = j.at("isotope");
    c.isotope = iso.is_string() ? builtin_isotope(iso.get<std::string>()) : iso.get<IsotopeParams>();
  }
  if (j.contains("levels")) c.levels = j.at("levels").get<std::vector<std::pair<int, int>>>();
  if (j.contains("initial")) c.initial = j.at("initial").get<std::map<std::string, double>>();
  if (j.contains("bounds"))
    for (const auto& [n, b] : j.at("bounds").items()) c.bounds[n] = {b.at(0).get<double>(), b.at(1).get<double>()};
  if (j.contains("frozen")) c.frozen = j.at("frozen").get<std::vector<std::string>>();
  c.gradient_tol = j.value("gradient_tol", c.gradient_tol);
  c.step_tol = j.value("step_tol", c.step_tol);
  c.max_iterations = j.value("max_iterations", c.max_iterations);
  c.multistart = j.value("multistart", c.multistart);
  c.jitter = j.value("jitter", c.jitter);
  c.seed = j.value("seed", c.seed);
  c.complex_residuals = j.value("complex_residuals", c.complex_residuals);
  c.workers = j.value("workers", c.workers);
}

const FitParameter& FitResult::parameter(const std::string& name) const {
  for (const auto& p : parameters)
    if (p.name == name) return p;
  throw PreconditionError("fit result: unknown parameter '" + name + "'");
}

void to_json(nlohmann::json& j, const FitResult& r) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& p : r.parameters) params[p.name] = {{"value", p.value}, {"sigma", p.sigma}, {"frozen", p.frozen}};
  nlohmann::json columns = nlohmann::json::array();
  for (const auto& c : r.columns) {
    nlohmann::json col{{"B_T", c.B}, {"found", c.resonance.found}};
    if (c.resonance.found) {
      col["f_r_GHz"] = c.resonance.f_r;
      col["kappa_GHz"] = c.resonance.kappa;
    }
    columns.push_back(col);
  }
  j = nlohmann::json{{"status", r.status},
                     {"converged", r.converged},
                     {"iterations", r.iterations},
                     {"runs", r.runs},
                     {"residual_norm", r.residual_norm},
                     {"initial_residual_norm", r.initial_residual_norm},
                     {"parameters", params},
                     {"cooperativity", r.cooperativity},
                     {"degenerate", r.degenerate},
                     {"columns", columns}};
}

std::vector<ColumnTrace> extract_columns(const TransmissionMap& map, const ExtractOptions& options, int workers) {
  map.validate();
  std::vector<ColumnTrace> out(map.rows());
  parallel_for(map.rows(), workers, [&](std::size_t begin, std::size_t end, int) {
    for (std::size_t b = begin; b < end; ++b) {
      out[b].B = map.B[b];
      out[b].resonance = extract_effective_resonance(map.f, map.column(b), options);
    }
  });
  return out;
}

FitResult fit_resonator_map(const TransmissionMap& map, const FitConfig& config) {
  config.validate();
  map.validate();
  if (map.rows() < 1 || map.cols() < 3) throw PreconditionError("fit: map too small");
  for (double v : map.magnitude)
    if (!std::isfinite(v)) throw PreconditionError("fit: map contains non-finite values");
  if (config.complex_residuals && !map.phase) throw PreconditionError("fit: complex residuals need a phase column");
  const int M = config.transitions;
  const auto names = parameter_names(M);
  const auto n = static_cast<Eigen::Index>(names.size());
  auto index_of = [&](const std::string& name) {
    return static_cast<Eigen::Index>(std::find(names.begin(), names.end(), name) - names.begin());
  };

  // Hamiltonian law cache, or the reference field of the linear law.
  OmegaTable omega;
  if (config.law == FrequencyLawKind::linear) {
    const double mid = 0.5 * (map.B.front() + map.B.back());
    for (int m = 1; m <= M; ++m) {
      const std::string o = "omega0_" + std::to_string(m);
      const bool pinned = config.bounds.count(o) ||
                          std::find(config.frozen.begin(), config.frozen.end(), o) != config.frozen.end();
      omega.B_ref.push_back(pinned ? 0.0 : mid);
    }
  } else {
    const SpinSystem sys(*config.isotope);
    omega.law.assign(static_cast<std::size_t>(M), std::vector<double>(map.rows()));
    for (int m = 0; m < M; ++m)
      for (std::size_t b = 0; b < map.rows(); ++b)
        omega.law[static_cast<std::size_t>(m)][b] =
            transition_frequency(sys, config.levels[static_cast<std::size_t>(m)].first,
                                 config.levels[static_cast<std::size_t>(m)].second, map.B[b]);
  }

  // Seeds from per-column extraction.
  FitResult result;
  result.columns = extract_columns(map, {}, config.workers);
  const ColumnTrace* narrowest = nullptr;
  double widest = 0.0;
  for (const auto& c : result.columns) {
    if (!c.resonance.found) continue;
    if (!narrowest || c.resonance.kappa < narrowest->resonance.kappa) narrowest = &c;
    widest = std::max(widest, c.resonance.kappa);
  }
  const double f_lo = std::min(map.f.front(), map.f.back());
  const double f_hi = std::max(map.f.front(), map.f.back());
  const double f_span = f_hi - f_lo;
  Eigen::VectorXd x0 = Eigen::VectorXd::Zero(n);
  if (narrowest) {
    const auto& r = narrowest->resonance;
    x0.head(kResonatorParams) << r.f_r, r.kappa_i, r.kappa_e, r.phi, r.alpha, 0.0;
  } else {
    x0.head(kResonatorParams) << 0.5 * (f_lo + f_hi), 0.05 * f_span, 0.05 * f_span, 0.0,
        *std::max_element(map.magnitude.begin(), map.magnitude.end()), 0.0;
  }
  const double kappa0 = std::max(x0[1] + x0[2], 1e-3 * f_span / static_cast<double>(map.cols()));

  // Crossing field: largest column-to-column jump of the extracted resonance.
  double B_cross = map.B[map.rows() / 2];
  double jump = 0.0;
  const ColumnTrace* prev = nullptr;
  for (const auto& c : result.columns) {
    if (!c.resonance.found) continue;
    if (prev) {
      const double d = std::abs(c.resonance.f_r - prev->resonance.f_r);
      if (d > jump) {
        jump = d;
        B_cross = 0.5 * (c.B + prev->B);
      }
    }
    prev = &c;
  }
  const double coupling0 = std::max({jump, widest - kappa0, kappa0});
  for (int m = 0; m < M; ++m) {
    const Eigen::Index base = kResonatorParams + kSpinParams * m;
    x0[base] = coupling0;
    x0[base + 1] = coupling0;
    const std::string suffix = "_" + std::to_string(m + 1);
    const auto g_it = config.initial.find("g_eff" + suffix);
    x0[base + 2] = g_it != config.initial.end() ? g_it->second : 2.0;
    x0[base + 3] = omega.law.empty() ? x0[0] - x0[base + 2] * kCodata.mu_B_over_h * B_cross : 0.0;
  }
  for (int m = 0; m < M; ++m) x0[kResonatorParams + kSpinParams * m + 3] += omega.shift(x0.data(), m);
  for (const auto& [name, v] : config.initial) x0[index_of(name)] = v;
  for (int m = 0; m < M; ++m)
    if (config.initial.count("omega0_" + std::to_string(m + 1)))
      x0[kResonatorParams + kSpinParams * m + 3] += omega.shift(x0.data(), m);

  LeastSquaresProblem problem;
  problem.lower = Eigen::VectorXd::Constant(n, -kInf);
  problem.upper = Eigen::VectorXd::Constant(n, kInf);
  problem.lower.head(kResonatorParams) << f_lo - f_span, 0.0, 1e-15, -kPi, 0.0, -kPi;
  problem.upper.head(kResonatorParams) << f_hi + f_span, kInf, kInf, kPi, kInf, kPi;
  for (int m = 0; m < M; ++m) {
    problem.lower[kResonatorParams + kSpinParams * m] = 0.0;
    problem.lower[kResonatorParams + kSpinParams * m + 1] = 1e-15;
  }
  for (const auto& [name, b] : config.bounds) {
    problem.lower[index_of(name)] = b.first;
    problem.upper[index_of(name)] = b.second;
  }
  for (Eigen::Index k = 0; k < n; ++k)
    if (!(x0[k] >= problem.lower[k] && x0[k] <= problem.upper[k]))
      throw PreconditionError("fit: initial value of '" + names[static_cast<std::size_t>(k)] + "' outside its bounds");

  problem.scale = Eigen::VectorXd(n);
  problem.scale.head(kResonatorParams) << kappa0, kappa0, kappa0, 0.1, std::max(x0[4], 1e-12), 0.1;
  for (int m = 0; m < M; ++m) {
    const Eigen::Index base = kResonatorParams + kSpinParams * m;
    const double ref = omega.law.empty() ? omega.B_ref[static_cast<std::size_t>(m)] : 0.0;
    double lever = 0.0;
    for (double b : map.B) lever = std::max(lever, std::abs(b - ref));
    const double width = std::max({x0[base], x0[base + 1], kappa0});
    problem.scale.segment(base, kSpinParams) << std::max(x0[base], kappa0), std::max(x0[base + 1], kappa0),
        width / (kCodata.mu_B_over_h * std::max(lever, 1e-6)), width;
  }
  std::vector<bool> frozen(static_cast<std::size_t>(n), false);
  for (const auto& name : config.frozen) frozen[static_cast<std::size_t>(index_of(name))] = true;
  if (!config.complex_residuals) frozen[5] = true;
  if (!omega.law.empty())
    for (int m = 0; m < M; ++m) frozen[static_cast<std::size_t>(kResonatorParams + kSpinParams * m + 2)] = true;
  problem.frozen = frozen;

  const std::size_t cells = map.magnitude.size();
  const bool complex = config.complex_residuals;
  std::vector<Complex> data;
  if (complex) {
    data.resize(cells);
    for (std::size_t k = 0; k < cells; ++k) data[k] = std::polar(map.magnitude[k], (*map.phase)[k]);
  }
  problem.residuals = [&](const Eigen::VectorXd& x, Eigen::VectorXd& r) {
    r.resize(static_cast<Eigen::Index>(complex ? 2 * cells : cells));
    std::vector<double> omegas;
    for (std::size_t b = 0; b < map.rows(); ++b) {
      omega.fill(x.data(), M, map.B[b], b, omegas);
      for (std::size_t k = 0; k < map.cols(); ++k) {
        const std::size_t cell = b * map.cols() + k;
        const Complex s = star_s21(x.data(), omegas, map.f[k]);
        if (complex) {
          const Complex d = s - data[cell];
          r[static_cast<Eigen::Index>(2 * cell)] = d.real();
          r[static_cast<Eigen::Index>(2 * cell + 1)] = d.imag();
        } else {
          r[static_cast<Eigen::Index>(cell)] = std::abs(s) - map.magnitude[cell];
        }
      }
    }
  };

  // Multi-start: run 0 from the seed, the rest jitter G and omega0.
  std::vector<Eigen::VectorXd> starts{x0};
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int s = 1; s < config.multistart; ++s) {
    Eigen::VectorXd x = x0;
    for (int m = 0; m < M; ++m) {
      const Eigen::Index base = kResonatorParams + kSpinParams * m;
      if (!frozen[static_cast<std::size_t>(base)]) x[base] *= 1.0 + config.jitter * unit(rng);
      if (!frozen[static_cast<std::size_t>(base + 3)])
        x[base + 3] += config.jitter * unit(rng) * std::max(x0[base], x0[base + 1]);
    }
    starts.push_back(x.cwiseMax(problem.lower).cwiseMin(problem.upper));
  }
  LeastSquaresOptions lso;
  lso.gradient_tol = config.gradient_tol;
  lso.step_tol = config.step_tol;
  lso.max_iterations = config.max_iterations;
  std::vector<LeastSquaresResult> runs(starts.size());
  std::vector<double> start_cost(starts.size());
  parallel_for(starts.size(), config.workers, [&](std::size_t begin, std::size_t end, int) {
    for (std::size_t s = begin; s < end; ++s) {
      Eigen::VectorXd staged = fit_traces(result.columns, omega, M, starts[s], problem, lso);
      // Baseline, then line shape (kappa split, phi, alpha), with the pole
      // positions held.
      LeastSquaresProblem shape = problem;
      for (Eigen::Index k = 0; k < n; ++k) shape.frozen[static_cast<std::size_t>(k)] = k != 4 || frozen[4];
      staged = levenberg_marquardt(shape, staged, lso).x;
      for (Eigen::Index k = 1; k <= 3; ++k) shape.frozen[static_cast<std::size_t>(k)] = frozen[static_cast<std::size_t>(k)];
      staged = levenberg_marquardt(shape, staged, lso).x;
      staged = scan_scaling(problem, omega, M, staged);
      runs[s] = levenberg_marquardt(problem, staged, lso);
      // Staging must never end above the raw start.
      Eigen::VectorXd r0;
      problem.residuals(starts[s], r0);
      start_cost[s] = r0.squaredNorm();
      if (!(runs[s].cost <= start_cost[s])) runs[s] = levenberg_marquardt(problem, starts[s], lso);
    }
  });
  auto total_G = [&](const Eigen::VectorXd& x) {
    double g = 0.0;
    for (int m = 0; m < M; ++m) g += x[kResonatorParams + kSpinParams * m];
    return g;
  };
  std::size_t best = 0;
  for (std::size_t s = 1; s < runs.size(); ++s) {
    const double a = runs[s].cost, b = runs[best].cost;
    const double tie = 1e-12 * std::max({a, b, 1e-300});
    if (a < b - tie || (std::abs(a - b) <= tie && total_G(runs[s].x) < total_G(runs[best].x))) best = s;
  }
  const LeastSquaresResult& win = runs[best];

  // Back to the user parametrization: omega0 = Omega_ref - g_eff mu_B B_ref.
  Eigen::VectorXd xw = win.x;
  Eigen::MatrixXd T = Eigen::MatrixXd::Identity(n, n);
  for (int m = 0; m < M; ++m) {
    const Eigen::Index base = kResonatorParams + kSpinParams * m;
    xw[base + 3] -= omega.shift(win.x.data(), m);
    if (omega.law.empty()) T(base + 3, base + 2) = -kCodata.mu_B_over_h * omega.B_ref[static_cast<std::size_t>(m)];
  }
  const Eigen::MatrixXd cov = T * covariance(win, frozen) * T.transpose();
  result.model = unpack(xw, M);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto sk = static_cast<std::size_t>(k);
    result.parameters.push_back({names[sk], xw[k], std::sqrt(std::max(0.0, cov(k, k))), frozen[sk]});
  }
  for (int d : win.degenerate) result.degenerate.push_back(names[static_cast<std::size_t>(d)]);
  const double kappa = result.model.resonator.kappa();
  for (const auto& s : result.model.spins) result.cooperativity.push_back(cooperativity(s.G, s.gamma, kappa));
  result.residual_norm = std::sqrt(win.cost);
  result.initial_residual_norm = std::sqrt(start_cost[0]);
  result.status = to_string(win.status);
  result.converged = win.converged();
  result.iterations = win.iterations;
  result.runs = static_cast<int>(runs.size());
  return result;
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const BroadbandFitResult& r) {
  j = nlohmann::json{{"status", r.status},
                     {"converged", r.converged},
                     {"iterations", r.iterations},
                     {"g_density", r.g_density},
                     {"gamma_GHz", r.gammas},
                     {"gamma_sigma_GHz", r.gamma_sigmas},
                     {"weights", r.weights},
                     {"residual_norm", r.residual_norm},
                     {"initial_residual_norm", r.initial_residual_norm}};
}

BroadbandFitResult fit_broadband_map(const TransmissionMap& map, const BroadbandFitConfig& config) {
  map.validate();
  const auto ns = static_cast<Eigen::Index>(config.species.size());
  if (ns == 0) throw PreconditionError("fit_broadband: no species");
  if (!(config.g_density > 0.0)) throw PreconditionError("fit_broadband: initial g_density must be > 0");
  const int d = config.normalize_offset;
  if (d < 0 || static_cast<std::size_t>(d) >= map.rows()) throw PreconditionError("fit_broadband: bad offset");
  const auto lines = broadband_lines(config.species, map.B, config.options);

  auto normalized = [&](const std::vector<double>& raw) {
    if (d == 0) return raw;
    std::vector<double> out;
    const std::size_t nc = map.cols();
    for (std::size_t b = 0; b + static_cast<std::size_t>(d) < map.rows(); ++b)
      for (std::size_t k = 0; k < nc; ++k) {
        const double den = raw[(b + static_cast<std::size_t>(d)) * nc + k];
        out.push_back(den == 0.0 ? std::numeric_limits<double>::quiet_NaN() : (raw[b * nc + k] - den) / den);
      }
    return out;
  };
  const std::vector<double> target = normalized(map.magnitude);

  // x = [amplitudes or g, gammas]
  const bool diag = config.abundance_diagnostic;
  const Eigen::Index na = diag ? ns : 1;
  Eigen::VectorXd x0(na + ns);
  for (Eigen::Index s = 0; s < ns; ++s) {
    if (diag) x0[s] = config.g_density * config.species[static_cast<std::size_t>(s)].weight;
    x0[na + s] = config.species[static_cast<std::size_t>(s)].gamma;
  }
  if (!diag) x0[0] = config.g_density;

  LeastSquaresProblem problem;
  problem.lower = Eigen::VectorXd::Constant(na + ns, 1e-300);
  problem.upper = Eigen::VectorXd::Constant(na + ns, kInf);
  problem.scale = x0.cwiseAbs().cwiseMax(1e-300);
  std::vector<double> amplitudes(static_cast<std::size_t>(ns)), gammas(static_cast<std::size_t>(ns));
  problem.residuals = [&](const Eigen::VectorXd& x, Eigen::VectorXd& r) {
    for (Eigen::Index s = 0; s < ns; ++s) {
      const auto ss = static_cast<std::size_t>(s);
      amplitudes[ss] = diag ? x[s] : x[0] * config.species[ss].weight;
      gammas[ss] = x[na + s];
    }
    const TransmissionMap model =
        broadband_map_from_lines(lines, amplitudes, gammas, map.B, map.f, config.alpha, config.options.workers);
    const std::vector<double> pred = normalized(model.magnitude);
    r.resize(static_cast<Eigen::Index>(pred.size()));
    for (std::size_t k = 0; k < pred.size(); ++k) {
      const double e = pred[k] - target[k];
      r[static_cast<Eigen::Index>(k)] = std::isfinite(e) ? e : 0.0;
    }
  };
  LeastSquaresOptions lso;
  lso.gradient_tol = config.gradient_tol;
  lso.step_tol = config.step_tol;
  lso.max_iterations = config.max_iterations;
  const LeastSquaresResult fit = levenberg_marquardt(problem, x0, lso);
  const Eigen::MatrixXd cov = covariance(fit, {});

  BroadbandFitResult out;
  if (diag) {
    const double total = fit.x.head(ns).sum();
    out.g_density = total;
    for (Eigen::Index s = 0; s < ns; ++s) out.weights.push_back(fit.x[s] / total);
  } else {
    out.g_density = fit.x[0];
    for (const auto& sp : config.species) out.weights.push_back(sp.weight);
  }
  for (Eigen::Index s = 0; s < ns; ++s) {
    out.gammas.push_back(fit.x[na + s]);
    out.gamma_sigmas.push_back(std::sqrt(std::max(0.0, cov(na + s, na + s))));
  }
  out.residual_norm = std::sqrt(fit.cost);
  out.initial_residual_norm = std::sqrt(fit.initial_cost);
  out.status = to_string(fit.status);
  out.converged = fit.converged();
  out.iterations = fit.iterations;
  return out;
}

}  // namespace spincav
