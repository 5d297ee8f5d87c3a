#include "spincav/io_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "spincav/error.hpp"
#include "spincav/least_squares.hpp"
#include "spincav/parallel.hpp"
#include "spincav/text_io.hpp"

namespace spincav {

using text::format_double;
using text::parse_double;

namespace {

constexpr Complex kI{0.0, 1.0};
// Angular rate per microsecond of a 1 GHz ordinary-frequency rate.
constexpr double kRadPerUsPerGHz = 2.0 * kPi * 1e3;

bool strictly_monotone(const std::vector<double>& v) {
  if (v.size() < 2) return true;
  const bool up = v[1] > v[0];
  for (std::size_t k = 1; k < v.size(); ++k) {
    if (up ? !(v[k] > v[k - 1]) : !(v[k] < v[k - 1])) return false;
  }
  return true;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  double m = *mid;
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), mid));
  return m;
}

bool star_topology(const CoupledModeModel& model) {
  return std::all_of(model.spins.begin(), model.spins.end(), [](const auto& s) { return s.Gamma_line == 0.0; });
}

// Steady-state interaction matrix K(f) and drive vector c:
// K b = -i c, S21 = alpha (1 - i c^T b).
void interaction_system(const CoupledModeModel& model, double f, Eigen::MatrixXcd& K, Eigen::VectorXcd& c) {
  const auto& r = model.resonator;
  const auto n = static_cast<Eigen::Index>(model.spins.size()) + 1;
  K = Eigen::MatrixXcd::Zero(n, n);
  c = Eigen::VectorXcd::Zero(n);
  K(0, 0) = kI * (r.f_r - f) + r.kappa();
  c(0) = std::sqrt(r.kappa_e * std::exp(kI * r.phi));
  for (Eigen::Index k = 1; k < n; ++k) {
    const auto& s = model.spins[static_cast<std::size_t>(k - 1)];
    K(k, k) = kI * (s.omega - f) + s.gamma + s.Gamma_line;
    K(0, k) = K(k, 0) = kI * s.G;
    c(k) = std::sqrt(s.Gamma_line);
  }
}

}  // namespace

void ResonatorParams::validate() const {
  if (!std::isfinite(f_r)) throw PreconditionError("resonator: f_r must be finite");
  if (!(kappa_i >= 0.0) || !std::isfinite(kappa_i)) throw PreconditionError("resonator: kappa_i must be >= 0");
  if (!(kappa_e > 0.0) || !std::isfinite(kappa_e)) throw PreconditionError("resonator: kappa_e must be > 0");
  if (!std::isfinite(phi) || !std::isfinite(alpha.real()) || !std::isfinite(alpha.imag()))
    throw PreconditionError("resonator: phi and alpha must be finite");
}

Complex broadband_s21(std::span<const LineTransition> transitions, double f, Complex alpha) {
  Complex denom{1.0, 0.0};
  for (const auto& t : transitions) {
    if (!(t.gamma > 0.0)) throw PreconditionError("broadband_s21: gamma must be > 0");
    denom += t.Gamma / (t.gamma + kI * (t.omega - f));
  }
  return alpha / denom;
}

double bose_occupation(double omega, double T) {
  if (!(T > 0.0)) throw PreconditionError("bose_occupation: T must be > 0");
  const double x = omega / (kCodata.k_B_over_h * T);
  return 1.0 / std::expm1(x);
}

double broadband_gamma(const LevelSet& levels, int i, int j, double T, double g_density, double n_occ,
                       const Vec3& b_dir) {
  if (!(g_density >= 0.0)) throw PreconditionError("broadband_gamma: g_density must be >= 0");
  const double element = transition_matrix_element(levels, i, j, b_dir);
  const Eigen::VectorXd pop = thermal_populations(levels, T);
  const double omega = std::abs(levels.energies(j) - levels.energies(i));
  return 2.0 * kPi * g_density * element * element * delta_p(pop, i, j) * omega * (n_occ + 1.0);
}

Complex coupled_s21_complex(const CoupledModeModel& model, double f) {
  const auto& r = model.resonator;
  const Complex ce = r.kappa_e * std::exp(kI * r.phi);
  if (star_topology(model)) {
    Complex denom = kI * (r.f_r - f) + r.kappa();
    for (const auto& s : model.spins) {
      if (s.G == 0.0) continue;
      const Complex d2 = kI * (s.omega - f) + s.gamma;
      // A lossless spin mode driven exactly on resonance blocks the cavity.
      if (d2 == Complex{}) return r.alpha;
      denom += s.G * s.G / d2;
    }
    if (denom == Complex{}) throw SingularSystemError("coupled_s21: singular interaction matrix");
    return r.alpha * (1.0 - ce / denom);
  }
  Eigen::MatrixXcd K;
  Eigen::VectorXcd c;
  interaction_system(model, f, K, c);
  Eigen::FullPivLU<Eigen::MatrixXcd> lu(K);
  if (!lu.isInvertible()) throw SingularSystemError("coupled_s21: singular interaction matrix");
  const Eigen::VectorXcd b = lu.solve(-kI * c);
  return r.alpha * (1.0 - kI * (c.transpose() * b)(0));
}

double coupled_s21(const CoupledModeModel& model, double f) { return std::abs(coupled_s21_complex(model, f)); }

void TransmissionMap::validate() const {
  if (!strictly_monotone(B) || !strictly_monotone(f)) throw PreconditionError("map: axes must be strictly monotone");
  if (magnitude.size() != B.size() * f.size()) throw PreconditionError("map: value grid does not match axes");
  if (phase && phase->size() != magnitude.size()) throw PreconditionError("map: phase grid does not match axes");
}

void save_map(const TransmissionMap& map, const std::string& path) {
  map.validate();
  auto out = text::open_output(path);
  out << (map.phase ? "B_T,f_GHz,S21_mag,S21_phase_rad\n" : "B_T,f_GHz,S21_mag\n");
  for (std::size_t b = 0; b < map.rows(); ++b) {
    const std::string bs = format_double(map.B[b]);
    for (std::size_t k = 0; k < map.cols(); ++k) {
      out << bs << ',' << format_double(map.f[k]) << ',' << format_double(map.at(b, k));
      if (map.phase) out << ',' << format_double((*map.phase)[b * map.cols() + k]);
      out << '\n';
    }
  }
}

TransmissionMap load_map(const std::string& path) {
  auto in = text::open_input(path);
  std::string line;
  if (!text::next_line(in, line)) throw MalformedHeaderError("map: missing header");
  const auto head = text::split_csv(line);
  const bool has_phase = head.size() == 4 && head[3] == "S21_phase_rad";
  if (!(head.size() == 3 || has_phase) || head[0] != "B_T" || head[1] != "f_GHz" || head[2] != "S21_mag")
    throw MalformedHeaderError("map: header must be B_T,f_GHz,S21_mag[,S21_phase_rad]");
  TransmissionMap map;
  std::vector<double> phase;
  std::size_t in_block = 0;
  while (text::next_line(in, line)) {
    const auto fields = text::split_csv(line);
    if (fields.size() != head.size()) throw InputFormatError("map: wrong column count: " + line);
    const double b = parse_double(fields[0]);
    const double f = parse_double(fields[1]);
    const double v = parse_double(fields[2]);
    if (!std::isfinite(b) || !std::isfinite(f)) throw NonFiniteValueError("map: non-finite axis value: " + line);
    if (map.B.empty() || b != map.B.back()) {
      if (!map.B.empty() && in_block != map.f.size()) throw RowCountError("map: ragged B block");
      map.B.push_back(b);
      in_block = 0;
    }
    if (map.B.size() == 1) {
      map.f.push_back(f);
    } else if (in_block >= map.f.size() || map.f[in_block] != f) {
      throw RowCountError("map: f axis differs between B blocks: " + line);
    }
    ++in_block;
    map.magnitude.push_back(v);
    if (has_phase) phase.push_back(parse_double(fields[3]));
  }
  if (map.B.empty()) throw RowCountError("map: no data rows");
  if (in_block != map.f.size()) throw RowCountError("map: ragged B block");
  if (has_phase) map.phase = std::move(phase);
  try {
    map.validate();
  } catch (const PreconditionError& e) {
    throw InputFormatError(e.what());
  }
  return map;
}

FrequencyLaw hamiltonian_law(const SpinSystem& sys, int i, int j) {
  return [sys, i, j](double B) { return transition_frequency(sys, i, j, B); };
}

TransmissionMap simulate_map(const ResonatorParams& resonator, std::span<const SpinBranch> branches,
                             const std::vector<double>& B, const std::vector<double>& f, int workers,
                             bool keep_phase) {
  resonator.validate();
  TransmissionMap map;
  map.B = B;
  map.f = f;
  map.magnitude.assign(B.size() * f.size(), 0.0);
  if (keep_phase) map.phase = std::vector<double>(map.magnitude.size(), 0.0);
  map.validate();
  parallel_for(B.size(), workers, [&](std::size_t begin, std::size_t end, int) {
    CoupledModeModel model;
    model.resonator = resonator;
    model.spins.resize(branches.size());
    for (std::size_t b = begin; b < end; ++b) {
      for (std::size_t m = 0; m < branches.size(); ++m)
        model.spins[m] = {branches[m].omega(B[b]), branches[m].gamma, branches[m].G, branches[m].Gamma_line};
      for (std::size_t k = 0; k < f.size(); ++k) {
        const Complex s = coupled_s21_complex(model, f[k]);
        map.magnitude[b * f.size() + k] = std::abs(s);
        if (keep_phase) (*map.phase)[b * f.size() + k] = std::arg(s);
      }
    }
  });
  return map;
}

TransmissionMap normalize_map(const TransmissionMap& map, double B1, double B2) {
  map.validate();
  if (!(B1 < B2)) throw PreconditionError("normalize_map: requires B1 < B2");
  auto index_of = [&](double b) -> std::ptrdiff_t {
    for (std::size_t k = 0; k < map.B.size(); ++k) {
      const double step = map.B.size() > 1 ? std::abs(map.B[1] - map.B[0]) : 1.0;
      if (std::abs(map.B[k] - b) <= 1e-9 * step) return static_cast<std::ptrdiff_t>(k);
    }
    throw PreconditionError("normalize_map: field not on the B axis");
  };
  const std::ptrdiff_t d = index_of(B2) - index_of(B1);
  const std::size_t shift = static_cast<std::size_t>(std::abs(d));
  TransmissionMap out;
  out.f = map.f;
  if (shift >= map.rows()) throw PreconditionError("normalize_map: pair offset exceeds sweep");
  const std::size_t rows = map.rows() - shift;
  out.B.reserve(rows);
  out.magnitude.reserve(rows * map.cols());
  for (std::size_t k = 0; k < rows; ++k) {
    // On a decreasing axis B1 < B2 means the partner lies at lower index.
    const std::size_t a = d > 0 ? k : k + shift;
    const std::size_t b = d > 0 ? k + shift : k;
    out.B.push_back(map.B[a]);
    for (std::size_t j = 0; j < map.cols(); ++j) {
      const double den = map.at(b, j);
      out.magnitude.push_back(den == 0.0 ? std::numeric_limits<double>::quiet_NaN()
                                         : (map.at(a, j) - den) / den);
    }
  }
  if (d < 0) {
    std::reverse(out.B.begin(), out.B.end());
    std::vector<double> flipped;
    flipped.reserve(out.magnitude.size());
    for (std::size_t k = rows; k-- > 0;)
      flipped.insert(flipped.end(), out.magnitude.begin() + static_cast<std::ptrdiff_t>(k * map.cols()),
                     out.magnitude.begin() + static_cast<std::ptrdiff_t>((k + 1) * map.cols()));
    out.magnitude = std::move(flipped);
  }
  return out;
}

std::size_t masked_cells(const TransmissionMap& map) {
  return static_cast<std::size_t>(
      std::count_if(map.magnitude.begin(), map.magnitude.end(), [](double v) { return std::isnan(v); }));
}

double photon_number(double P_in, const ResonatorParams& resonator) {
  if (!(P_in >= 0.0)) throw PreconditionError("photon_number: P_in must be >= 0");
  const double to_rad = 2.0 * kPi * 1e9;
  const double ke = resonator.kappa_e * to_rad;
  const double k = resonator.kappa() * to_rad;
  const double omega_r = resonator.f_r * to_rad;
  return ke / (k * k) * P_in / (kCodata.hbar * omega_r);
}

std::vector<std::vector<BroadbandLine>> broadband_lines(std::span<const BroadbandSpecies> species,
                                                        const std::vector<double>& B,
                                                        const BroadbandOptions& options) {
  std::vector<SpinSystem> systems;
  for (const auto& sp : species) {
    sp.params.validate();
    systems.emplace_back(sp.params);
  }
  std::vector<std::vector<BroadbandLine>> all(B.size());
  parallel_for(B.size(), options.workers, [&](std::size_t begin, std::size_t end, int) {
    for (std::size_t b = begin; b < end; ++b) {
      for (std::size_t s = 0; s < systems.size(); ++s) {
        const LevelSet levels = diagonalize(systems[s], along_z(B[b]));
        const Eigen::VectorXd pop = thermal_populations(levels, options.T);
        for (int i = 0; i < levels.size(); ++i)
          for (int j = i + 1; j < levels.size(); ++j) {
            const double omega = levels.energies(j) - levels.energies(i);
            const double v = transition_matrix_element(levels, i, j, options.drive_dir);
            const double n = options.thermal_occupation && omega > 0 ? bose_occupation(omega, options.T) : 0.0;
            const double strength = 2.0 * kPi * v * v * delta_p(pop, i, j) * omega * (n + 1.0);
            all[b].push_back({static_cast<int>(s), i, j, omega, strength});
          }
      }
    }
  });
  double strongest = 0.0;
  for (const auto& col : all)
    for (const auto& l : col) strongest = std::max(strongest, std::abs(l.strength));
  for (auto& col : all)
    std::erase_if(col, [&](const BroadbandLine& l) {
      return !(std::abs(l.strength) > options.min_relative_strength * strongest);
    });
  return all;
}

TransmissionMap broadband_map_from_lines(const std::vector<std::vector<BroadbandLine>>& lines,
                                         std::span<const double> amplitudes, std::span<const double> gammas,
                                         const std::vector<double>& B, const std::vector<double>& f,
                                         Complex alpha, int workers) {
  if (lines.size() != B.size()) throw PreconditionError("broadband map: line table does not match B axis");
  TransmissionMap map;
  map.B = B;
  map.f = f;
  map.magnitude.assign(B.size() * f.size(), 0.0);
  map.validate();
  parallel_for(B.size(), workers, [&](std::size_t begin, std::size_t end, int) {
    std::vector<LineTransition> col;
    for (std::size_t b = begin; b < end; ++b) {
      col.clear();
      for (const auto& l : lines[b]) {
        const auto s = static_cast<std::size_t>(l.species);
        col.push_back({l.omega, gammas[s], amplitudes[s] * l.strength});
      }
      for (std::size_t k = 0; k < f.size(); ++k) map.magnitude[b * f.size() + k] = std::abs(broadband_s21(col, f[k], alpha));
    }
  });
  return map;
}

TransmissionMap simulate_broadband(std::span<const BroadbandSpecies> species, const std::vector<double>& B,
                                   const std::vector<double>& f, double g_density, Complex alpha,
                                   const BroadbandOptions& options) {
  if (!(g_density >= 0.0)) throw PreconditionError("simulate_broadband: g_density must be >= 0");
  const auto lines = broadband_lines(species, B, options);
  std::vector<double> amplitudes, gammas;
  for (const auto& sp : species) {
    amplitudes.push_back(g_density * sp.weight);
    gammas.push_back(sp.gamma);
  }
  return broadband_map_from_lines(lines, amplitudes, gammas, B, f, alpha, options.workers);
}

// ---------------------------------------------------------------------------
// Time domain

DriveEnvelope square_pulse(double t_on_us, double t_off_us, double amplitude) {
  return [=](double t) { return (t >= t_on_us && t < t_off_us) ? Complex{amplitude, 0.0} : Complex{}; };
}

namespace {

struct LinearOde {
  Eigen::MatrixXcd A;  // per microsecond
  Eigen::VectorXcd u;  // drive coupling per unit r_in
  Eigen::VectorXcd c;  // output coupling
};

LinearOde rotating_frame(const CoupledModeModel& model, double f) {
  Eigen::MatrixXcd K;
  Eigen::VectorXcd c;
  interaction_system(model, f, K, c);
  LinearOde ode;
  ode.A = -kRadPerUsPerGHz * K;
  ode.c = std::sqrt(kRadPerUsPerGHz) * c;
  ode.u = -kI * ode.c;
  return ode;
}

Eigen::MatrixXcd rk4_propagator(const Eigen::MatrixXcd& A, double h) {
  const auto n = A.rows();
  const Eigen::MatrixXcd hA = h * A;
  Eigen::MatrixXcd term = Eigen::MatrixXcd::Identity(n, n);
  Eigen::MatrixXcd P = term;
  for (int k = 1; k <= 4; ++k) {
    term = term * hA / static_cast<double>(k);
    P += term;
  }
  return P;
}

}  // namespace

PulseResult time_evolve(const CoupledModeModel& model, const DriveEnvelope& drive, std::span<const double> f_drive,
                        const PulseOptions& options) {
  model.resonator.validate();
  if (!(options.duration_us > 0.0)) throw PreconditionError("time_evolve: duration must be > 0");
  if (f_drive.empty()) throw PreconditionError("time_evolve: no drive frequencies");
  if (options.record_stride < 1) throw PreconditionError("time_evolve: record_stride must be >= 1");
  const auto n = static_cast<Eigen::Index>(model.spins.size()) + 1;
  if (options.initial_state.size() != 0 && options.initial_state.size() != n)
    throw PreconditionError("time_evolve: initial_state has the wrong dimension");

  // Fastest angular rate over all drive frequencies decides the step.
  double fastest = 0.0;
  for (double f : f_drive) {
    const LinearOde ode = rotating_frame(model, f);
    fastest = std::max(fastest, ode.A.cwiseAbs().rowwise().sum().maxCoeff());
  }
  const double h = options.step_us > 0.0 ? options.step_us : 0.05 / fastest;
  const auto steps = static_cast<std::size_t>(std::ceil(options.duration_us / h - 1e-9));

  PulseResult result;
  for (std::size_t s = 0; s <= steps; s += static_cast<std::size_t>(options.record_stride))
    result.t_us.push_back(static_cast<double>(s) * h);
  result.traces.resize(f_drive.size());

  std::vector<double> errors(f_drive.size(), 0.0);
  parallel_for(f_drive.size(), options.workers, [&](std::size_t begin, std::size_t end, int) {
    for (std::size_t q = begin; q < end; ++q) {
      const LinearOde ode = rotating_frame(model, f_drive[q]);
      // Embedded estimate: one step against two half steps of the propagator.
      const Eigen::MatrixXcd P = rk4_propagator(ode.A, h);
      const Eigen::MatrixXcd Ph = rk4_propagator(ode.A, 0.5 * h);
      errors[q] = (P - Ph * Ph).cwiseAbs().maxCoeff();
      if (!(errors[q] <= options.tolerance)) continue;

      PulseTrace& trace = result.traces[q];
      trace.f_drive = f_drive[q];
      Eigen::VectorXcd x = options.initial_state.size() ? options.initial_state : Eigen::VectorXcd::Zero(n);
      const double eps = 1e-9 * h;
      auto record = [&](double t, Complex rin) {
        const Complex rout = rin - kI * (ode.c.transpose() * x)(0);
        trace.s21.push_back(std::abs(rout) / options.reference_amplitude);
        trace.cavity.push_back(x(0));
        (void)t;
      };
      record(0.0, drive(eps));
      for (std::size_t s = 0; s < steps; ++s) {
        const double t = static_cast<double>(s) * h;
        const Complex u0 = drive(t + eps);
        const Complex um = drive(t + 0.5 * h);
        const Complex u1 = drive(t + h - eps);
        const Eigen::VectorXcd k1 = ode.A * x + ode.u * u0;
        const Eigen::VectorXcd k2 = ode.A * (x + 0.5 * h * k1) + ode.u * um;
        const Eigen::VectorXcd k3 = ode.A * (x + 0.5 * h * k2) + ode.u * um;
        const Eigen::VectorXcd k4 = ode.A * (x + h * k3) + ode.u * u1;
        x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if ((s + 1) % static_cast<std::size_t>(options.record_stride) == 0) record(t + h, drive(t + h + eps));
      }
      if (options.ringdown_start_us >= 0.0) {
        const RingdownFit fit = extract_ringdown_rate(result.t_us, trace.s21, options.ringdown_start_us);
        trace.kappa_tilde = fit.kappa_tilde;
        trace.fit_residual = fit.residual;
      }
    }
  });
  const double worst = *std::max_element(errors.begin(), errors.end());
  if (!(worst <= options.tolerance))
    throw AccuracyError("time_evolve: step " + format_double(h) + " us too large (error estimate " +
                        format_double(worst) + ")");

  result.kappa_tilde = result.traces.front().kappa_tilde;
  result.fit_residual = result.traces.front().fit_residual;
  if (n > 1) {
    Eigen::MatrixXcd K;
    Eigen::VectorXcd c;
    interaction_system(model, f_drive.front(), K, c);
    Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(K);
    if (es.info() != Eigen::Success) throw EigenSolverError("time_evolve: mode decomposition failed");
    Eigen::Index spin_like = 0;
    double least_cavity = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < n; ++k) {
      const double w = std::norm(es.eigenvectors()(0, k)) / es.eigenvectors().col(k).squaredNorm();
      if (w < least_cavity) {
        least_cavity = w;
        spin_like = k;
      }
    }
    result.T2_star_us = 1.0 / (kRadPerUsPerGHz * es.eigenvalues()(spin_like).real());
  }
  return result;
}

void save_pulse(const PulseResult& result, const std::string& path) {
  auto out = text::open_output(path);
  out << "t_us,f_GHz,S21_mag\n";
  for (const auto& trace : result.traces) {
    const std::string fs = format_double(trace.f_drive);
    for (std::size_t k = 0; k < trace.s21.size(); ++k)
      out << format_double(result.t_us[k]) << ',' << fs << ',' << format_double(trace.s21[k]) << '\n';
  }
}

PulseResult load_pulse(const std::string& path) {
  auto in = text::open_input(path);
  std::string line;
  if (!text::next_line(in, line) || line != "t_us,f_GHz,S21_mag")
    throw MalformedHeaderError("pulse: header must be t_us,f_GHz,S21_mag");
  PulseResult result;
  bool first_trace = true;
  std::size_t k = 0;
  while (text::next_line(in, line)) {
    const auto fields = text::split_csv(line);
    if (fields.size() != 3) throw InputFormatError("pulse: row needs 3 columns: " + line);
    const double t = parse_double(fields[0]);
    const double f = parse_double(fields[1]);
    const double v = parse_double(fields[2]);
    if (result.traces.empty() || f != result.traces.back().f_drive) {
      if (!result.traces.empty()) {
        if (first_trace) first_trace = false;
        if (k != result.t_us.size()) throw RowCountError("pulse: ragged trace");
      }
      result.traces.emplace_back();
      result.traces.back().f_drive = f;
      k = 0;
    }
    if (first_trace) {
      result.t_us.push_back(t);
    } else if (k >= result.t_us.size() || result.t_us[k] != t) {
      throw RowCountError("pulse: time axis differs between traces");
    }
    result.traces.back().s21.push_back(v);
    ++k;
  }
  if (result.traces.empty()) throw RowCountError("pulse: no data rows");
  if (k != result.t_us.size()) throw RowCountError("pulse: ragged trace");
  return result;
}

// ---------------------------------------------------------------------------
// Extraction

double bare_s21(const ResonatorParams& r, double f) {
  return std::abs(r.alpha * (1.0 - r.kappa_e * std::exp(kI * r.phi) / (kI * (r.f_r - f) + r.kappa())));
}

ColumnResonance extract_effective_resonance(std::span<const double> f, std::span<const double> s21,
                                            const ExtractOptions& options) {
  if (f.size() != s21.size()) throw PreconditionError("extract: axis and column sizes differ");
  ColumnResonance out;
  if (f.size() < 6) return out;
  std::vector<double> col(s21.begin(), s21.end());
  if (std::any_of(col.begin(), col.end(), [](double v) { return !std::isfinite(v); })) return out;

  const double med = median(col);
  std::vector<double> dev(col.size());
  std::transform(col.begin(), col.end(), dev.begin(), [&](double v) { return std::abs(v - med); });
  const double mad = median(dev);
  const auto kmin = static_cast<std::size_t>(std::min_element(col.begin(), col.end()) - col.begin());
  // Baseline from the column edges.
  const double base = std::max(std::max(col.front(), col.back()), med);
  const double depth = base - col[kmin];
  if (!(depth > 0.0) || depth < options.min_depth_mads * mad) return out;

  // 1 - |S/alpha|^2 is a Lorentzian of half-width kappa in f.
  const double floor = 1.0 - (col[kmin] / base) * (col[kmin] / base);
  const double half = 0.5 * floor;
  auto excess = [&](std::size_t k) { return 1.0 - (col[k] / base) * (col[k] / base); };
  std::size_t lo = kmin, hi = kmin;
  while (lo > 0 && excess(lo) > half) --lo;
  while (hi + 1 < col.size() && excess(hi) > half) ++hi;
  double kappa0 = 0.5 * std::abs(f[hi] - f[lo]);
  const double df = std::abs(f.back() - f.front()) / static_cast<double>(f.size() - 1);
  if (!(kappa0 > 0.0)) kappa0 = df;
  const double ratio = std::clamp(col[kmin] / base, 0.0, 0.999);

  const double span = std::abs(f.back() - f.front());
  const double fmin = std::min(f.front(), f.back());
  LeastSquaresProblem p;
  p.lower = Eigen::VectorXd(5);
  p.upper = Eigen::VectorXd(5);
  p.scale = Eigen::VectorXd(5);
  const double inf = std::numeric_limits<double>::infinity();
  p.lower << fmin - span, 0.0, 1e-3 * std::min(kappa0, df), -kPi, 0.0;
  p.upper << fmin + 2 * span, inf, inf, kPi, inf;
  p.scale << kappa0, kappa0, kappa0, 0.1, base;
  p.residuals = [&](const Eigen::VectorXd& x, Eigen::VectorXd& r) {
    ResonatorParams rp;
    rp.f_r = x[0];
    rp.kappa_i = x[1];
    rp.kappa_e = x[2];
    rp.phi = x[3];
    rp.alpha = x[4];
    r.resize(static_cast<Eigen::Index>(f.size()));
    for (std::size_t k = 0; k < f.size(); ++k) r[static_cast<Eigen::Index>(k)] = bare_s21(rp, f[k]) - col[k];
  };
  Eigen::VectorXd x0(5);
  x0 << f[kmin], ratio * kappa0, (1 - ratio) * kappa0, 0.0, base;
  LeastSquaresOptions lso;
  lso.max_iterations = options.max_iterations;
  lso.cost_tol = options.tolerance;
  const LeastSquaresResult fit = levenberg_marquardt(p, x0, lso);

  out.found = true;
  out.f_r = fit.x[0];
  out.kappa_i = fit.x[1];
  out.kappa_e = fit.x[2];
  out.kappa = out.kappa_i + out.kappa_e;
  out.phi = fit.x[3];
  out.alpha = fit.x[4];
  out.residual_norm = std::sqrt(fit.cost);
  return out;
}

RingdownFit extract_ringdown_rate(std::span<const double> t_us, std::span<const double> s21, double t_off_us,
                                  double start_fraction, double floor_fraction) {
  if (t_us.size() != s21.size()) throw PreconditionError("ringdown: time and trace sizes differ");
  if (!(start_fraction > floor_fraction && floor_fraction > 0.0 && start_fraction <= 1.0))
    throw PreconditionError("ringdown: need 0 < floor_fraction < start_fraction <= 1");
  const auto off = static_cast<std::size_t>(std::lower_bound(t_us.begin(), t_us.end(), t_off_us) - t_us.begin());
  if (off >= t_us.size()) throw PreconditionError("ringdown: t_off beyond trace");
  const double s0 = s21[off];
  std::size_t first = off;
  while (first < s21.size() && s21[first] > start_fraction * s0) ++first;
  std::size_t last = first;
  while (last < s21.size() && s21[last] >= floor_fraction * s0 && s21[last] > 0.0) ++last;
  RingdownFit out;
  out.points = last - first;
  if (out.points < 3) throw NoDipError("ringdown: too few points in the decay window");

  double mt = 0.0, my = 0.0;
  for (std::size_t k = first; k < last; ++k) {
    mt += t_us[k];
    my += std::log(s21[k]);
  }
  mt /= static_cast<double>(out.points);
  my /= static_cast<double>(out.points);
  double stt = 0.0, sty = 0.0;
  for (std::size_t k = first; k < last; ++k) {
    stt += (t_us[k] - mt) * (t_us[k] - mt);
    sty += (t_us[k] - mt) * (std::log(s21[k]) - my);
  }
  const double slope = sty / stt;
  double rss = 0.0;
  for (std::size_t k = first; k < last; ++k) {
    const double e = std::log(s21[k]) - (my + slope * (t_us[k] - mt));
    rss += e * e;
  }
  out.kappa_tilde = -slope / kRadPerUsPerGHz;
  out.residual = std::sqrt(rss / static_cast<double>(out.points));
  return out;
}

}  // namespace spincav
