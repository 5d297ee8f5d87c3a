#include "spincav/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <json.hpp>

#include "spincav/coupling.hpp"
#include "spincav/error.hpp"
#include "spincav/field_map.hpp"
#include "spincav/fit.hpp"
#include "spincav/io_model.hpp"
#include "spincav/spin_core.hpp"
#include "spincav/text_io.hpp"

namespace spincav {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;
using text::format_double;

struct Param {
  Param(std::string key, json def, std::string help = "", bool required = false, bool positional = false,
        bool any_type = false)
      : key(std::move(key)), def(std::move(def)), help(std::move(help)), required(required), positional(positional),
        any_type(any_type) {}

  std::string key;
  json def;  // null: no default
  std::string help;
  bool required = false;
  bool positional = false;
  bool any_type = false;  // string or JSON value
  std::string raw;
  CLI::Option* option = nullptr;
};

struct Context {
  fs::path out_dir;
  std::uint64_t seed = 1;
  int workers = 0;
  std::ostream& out;
};

struct Command {
  std::string name;
  std::string description;
  std::vector<Param> params;
  std::function<int(const json&, const Context&)> run;
  CLI::App* app = nullptr;
};

std::string env_name(const std::string& key) {
  std::string s = "SPINCAV_";
  for (char c : key) s += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string flag_name(const std::string& key) {
  std::string s = "--";
  for (char c : key) s += c == '_' ? '-' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool compatible(const Param& p, const json& v) {
  if (p.any_type || p.def.is_null() || v.is_null()) return true;
  if (p.def.is_number()) return v.is_number();
  if (p.def.is_boolean()) return v.is_boolean();
  if (p.def.is_string()) return v.is_string();
  if (p.def.is_array()) return v.is_array();
  if (p.def.is_object()) return v.is_object();
  return true;
}

json parse_raw(const Param& p, const std::string& raw, const std::string& source) {
  if (p.def.is_string() && !p.any_type) return raw;
  try {
    return json::parse(raw);
  } catch (const json::parse_error&) {
    if (p.any_type || p.def.is_null()) return raw;
    throw PreconditionError(source + ": cannot parse '" + raw + "' for " + p.key);
  }
}

json read_config(const std::string& path) {
  auto in = text::open_input(path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputFormatError("config " + path + ": " + e.what());
  }
}

std::vector<double> axis(const json& c, const std::string& name) {
  const double lo = c.at(name + "_min").get<double>();
  const double hi = c.at(name + "_max").get<double>();
  const long n = c.at(name + "_steps").get<long>();
  if (n < 1) throw PreconditionError("empty " + name + " axis: " + name + "_steps must be >= 1");
  if (n > 1 && !(hi > lo)) throw PreconditionError("empty " + name + " range: " + name + "_max must exceed " + name + "_min");
  std::vector<double> v(static_cast<std::size_t>(n));
  for (long k = 0; k < n; ++k) v[static_cast<std::size_t>(k)] = n == 1 ? lo : lo + (hi - lo) * k / static_cast<double>(n - 1);
  return v;
}

IsotopeParams isotope_from(const json& v) {
  if (v.is_string()) return builtin_isotope(v.get<std::string>());
  if (v.is_number_integer()) return builtin_isotope(std::to_string(v.get<long long>()));
  IsotopeParams p = v.get<IsotopeParams>();
  p.validate();
  return p;
}

Complex complex_from(const json& v) {
  if (v.is_array()) return {v.at(0).get<double>(), v.at(1).get<double>()};
  return {v.get<double>(), 0.0};
}

ResonatorParams resonator_from(const json& v) {
  ResonatorParams r;
  r.f_r = v.value("f_r", r.f_r);
  r.kappa_i = v.value("kappa_i", r.kappa_i);
  r.kappa_e = v.value("kappa_e", r.kappa_e);
  r.phi = v.value("phi", r.phi);
  if (v.contains("alpha")) r.alpha = complex_from(v.at("alpha"));
  r.validate();
  return r;
}

Vec3 vec3_from(const json& v) {
  if (!v.is_array() || v.size() != 3) throw PreconditionError("expected a 3-vector");
  return {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
}

std::vector<TransitionPair> pairs_from(const json& v) {
  return v.get<std::vector<TransitionPair>>();
}

void write_json(const fs::path& path, const json& j) {
  auto out = text::open_output(path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

int cmd_levels(const json& c, const Context& ctx) {
  const SpinSystem sys(isotope_from(c.at("isotope")));
  const auto B = axis(c, "b");
  auto out = text::open_output((ctx.out_dir / "levels.csv").string());
  out << "B_T,level,E_GHz\n";
  for (double b : B) {
    const LevelSet levels = diagonalize(sys, along_z(b));
    for (int k = 0; k < levels.size(); ++k) out << format_double(b) << ',' << k << ',' << format_double(levels.energies[k]) << '\n';
  }
  return kExitOk;
}

int cmd_broadband(const json& c, const Context& ctx) {
  std::vector<BroadbandSpecies> species;
  double total = 0.0;
  for (const auto& s : c.at("species")) {
    BroadbandSpecies sp;
    sp.params = isotope_from(s.at("isotope"));
    sp.weight = s.contains("weight") ? s.at("weight").get<double>() : sp.params.abundance;
    sp.gamma = s.value("gamma", c.at("gamma").get<double>());
    total += sp.weight;
    species.push_back(sp);
  }
  if (species.empty()) throw PreconditionError("broadband: no species");
  if (std::abs(total - 1.0) > 1e-9) throw PreconditionError("broadband: species weights sum to " + format_double(total) + ", not 1");
  BroadbandOptions opts;
  opts.T = c.at("temperature").get<double>();
  opts.thermal_occupation = c.at("thermal_occupation").get<bool>();
  opts.drive_dir = vec3_from(c.at("drive_dir"));
  opts.workers = ctx.workers;
  const auto B = axis(c, "b");
  const auto f = axis(c, "f");
  const int offset = c.at("norm_offset").get<int>();
  if (offset < 1 || static_cast<std::size_t>(offset) >= B.size())
    throw PreconditionError("broadband: norm_offset must be in [1, b_steps)");
  const TransmissionMap raw = simulate_broadband(species, B, f, c.at("g_density").get<double>(),
                                                 complex_from(c.at("alpha")), opts);
  save_map(raw, (ctx.out_dir / "broadband_raw.csv").string());
  save_map(normalize_map(raw, B[0], B[static_cast<std::size_t>(offset)]), (ctx.out_dir / "broadband.csv").string());
  return kExitOk;
}

// Linear-law spins, or Hamiltonian-law spins with one level pair each.
CavityModel cavity_model_from(const json& c, std::vector<FrequencyLaw>& laws) {
  CavityModel model;
  model.resonator = resonator_from(c.at("resonator"));
  const bool hamiltonian = c.at("law").get<std::string>() == "hamiltonian";
  if (!hamiltonian && c.at("law").get<std::string>() != "linear")
    throw PreconditionError("law must be 'linear' or 'hamiltonian'");
  for (const auto& s : c.at("spins")) {
    LinearSpin sp;
    sp.G = s.value("G", sp.G);
    sp.gamma = s.value("gamma", sp.gamma);
    sp.g_eff = s.value("g_eff", sp.g_eff);
    sp.omega0 = s.value("omega0", hamiltonian ? 0.0 : sp.omega0);
    if (!(sp.G >= 0.0 && sp.gamma > 0.0)) throw PreconditionError("spin needs G >= 0 and gamma > 0");
    model.spins.push_back(sp);
  }
  if (hamiltonian) {
    const SpinSystem sys(isotope_from(c.at("isotope")));
    const auto levels = pairs_from(c.at("levels"));
    if (levels.size() != model.spins.size()) throw PreconditionError("hamiltonian law: one level pair per spin");
    for (const auto& [i, j] : levels) {
      if (i < 0 || j < 0 || i >= sys.dimension() || j >= sys.dimension() || i == j)
        throw PreconditionError("hamiltonian law: level index out of range");
      laws.push_back(hamiltonian_law(sys, i, j));
    }
  }
  return model;
}

int cmd_cavity(const json& c, const Context& ctx) {
  std::vector<FrequencyLaw> laws;
  const CavityModel model = cavity_model_from(c, laws);
  const auto B = axis(c, "b");
  const auto f = axis(c, "f");
  const double noise = c.at("noise").get<double>();
  TransmissionMap map;
  if (c.at("keep_phase").get<bool>()) {
    if (noise > 0.0) throw PreconditionError("cavity: noise is applied to magnitudes only; drop keep_phase");
    map = cavity_map(model, B, f, ctx.workers, true, laws);
  } else {
    map = generate_synthetic(model, B, f, noise, ctx.seed, ctx.workers, laws);
  }
  save_map(map, (ctx.out_dir / "map.csv").string());
  return kExitOk;
}

int cmd_fieldmap(const json& c, const Context& ctx) {
  const CurrentSheet sheet = load_current_sheet(c.at("sheet").get<std::string>());
  GridSpec grid;
  grid.origin = vec3_from(c.at("origin"));
  grid.spacing = vec3_from(c.at("spacing"));
  const auto counts = c.at("counts").get<std::vector<int>>();
  if (counts.size() != 3) throw PreconditionError("counts must have three entries");
  for (int k = 0; k < 3; ++k) {
    if (counts[static_cast<std::size_t>(k)] < 1 || !(grid.spacing[k] > 0))
      throw PreconditionError("grid counts must be >= 1 and spacing > 0");
    grid.counts[static_cast<std::size_t>(k)] = counts[static_cast<std::size_t>(k)];
  }
  save_field_grid(biot_savart(sheet, grid, ctx.workers), (ctx.out_dir / "field.csv").string());
  return kExitOk;
}

int cmd_couple(const json& c, const Context& ctx) {
  const FieldGrid grid = load_field_grid(c.at("field").get<std::string>());
  const IsotopeParams iso = isotope_from(c.at("isotope"));
  const SpinSystem sys(iso);
  const LevelSet levels = diagonalize(sys, along_z(c.at("b_static").get<double>()));
  CrystalSpec crystal;
  crystal.box = {vec3_from(c.at("box_lo")), vec3_from(c.at("box_hi"))};
  crystal.spin_density = c.at("spin_density").get<double>();
  crystal.doping = c.at("doping").get<double>();
  crystal.abundance = c.at("abundance").is_null() ? iso.abundance : c.at("abundance").get<double>();
  crystal.validate();
  CouplingOptions opts;
  opts.delta_p_exponent = c.at("delta_p_exponent").get<double>();
  opts.workers = ctx.workers;
  const auto transitions = pairs_from(c.at("transitions"));
  const auto temperatures = c.at("temperatures").get<std::vector<double>>();
  const double i_zpf = c.at("i_zpf").get<double>();
  const double scale = c.at("scale").get<double>();
  std::optional<double> gamma, kappa;
  if (!c.at("gamma").is_null()) gamma = c.at("gamma").get<double>();
  if (!c.at("kappa").is_null()) kappa = c.at("kappa").get<double>();

  const auto curves = temperature_curve(grid, crystal, levels, transitions, temperatures, i_zpf, scale, opts);
  json report{{"couplings", json::array()}};
  auto csv = text::open_output((ctx.out_dir / "coupling.csv").string());
  csv << "T_K,i,j,G_GHz\n";
  for (std::size_t k = 0; k < temperatures.size(); ++k)
    for (std::size_t t = 0; t < transitions.size(); ++t) {
      const auto& r = curves[t][k];
      report["couplings"].push_back(coupling_report(r, gamma, kappa));
      csv << format_double(r.temperature) << ',' << r.i << ',' << r.j << ',' << format_double(r.G) << '\n';
    }
  const auto gaps = c.at("gaps").get<std::vector<double>>();
  if (!gaps.empty()) {
    const auto scan = gap_scan(grid, crystal, levels, transitions, gaps, temperatures.front(), i_zpf, scale, opts);
    report["gap_scan"] = json::array();
    for (const auto& p : scan) {
      json entry{{"gap_um", p.gap}};
      if (p.error) {
        entry["error"] = *p.error;
      } else {
        json G = json::array();
        for (const auto& r : p.couplings) G.push_back(r.G);
        entry["G_GHz"] = G;
      }
      report["gap_scan"].push_back(entry);
    }
  }
  write_json(ctx.out_dir / "coupling.json", report);
  return kExitOk;
}

int cmd_fit(const json& c, const Context& ctx) {
  const TransmissionMap map = load_map(c.at("map").get<std::string>());
  json fc = c;
  fc.erase("map");
  if (fc.at("isotope").is_null()) fc.erase("isotope");
  FitConfig config = fc.get<FitConfig>();
  config.seed = ctx.seed;
  config.workers = ctx.workers;
  const FitResult result = fit_resonator_map(map, config);
  write_json(ctx.out_dir / "fit.json", json(result));
  ctx.out << "status " << result.status << ", residual " << format_double(result.residual_norm) << '\n';
  for (const auto& p : result.parameters)
    ctx.out << p.name << " = " << format_double(p.value) << " +- " << format_double(p.sigma) << (p.frozen ? " (frozen)" : "")
            << '\n';
  if (!result.converged) {
    ctx.out << "fit did not converge\n";
    return kExitNonConvergence;
  }
  return kExitOk;
}

int cmd_pulse(const json& c, const Context& ctx) {
  CoupledModeModel model;
  model.resonator = resonator_from(c.at("resonator"));
  for (const auto& s : c.at("spins")) {
    SpinModeParams sp;
    sp.omega = s.at("omega").get<double>();
    sp.gamma = s.value("gamma", sp.gamma);
    sp.G = s.value("G", sp.G);
    sp.Gamma_line = s.value("Gamma_line", sp.Gamma_line);
    model.spins.push_back(sp);
  }
  auto f_drive = c.at("f_drive").get<std::vector<double>>();
  if (f_drive.empty()) f_drive.push_back(model.resonator.f_r);
  const double t_on = c.at("t_on").get<double>();
  const double t_off = c.at("t_off").get<double>();
  if (!(t_off > t_on)) throw PreconditionError("pulse: t_off must exceed t_on");
  PulseOptions opts;
  opts.duration_us = c.at("duration").get<double>();
  opts.step_us = c.at("step_us").get<double>();
  opts.tolerance = c.at("tolerance").get<double>();
  opts.record_stride = c.at("record_stride").get<int>();
  const double amplitude = c.at("amplitude").get<double>();
  opts.reference_amplitude = amplitude;
  opts.ringdown_start_us = c.at("ringdown").get<bool>() ? t_off : -1.0;
  opts.workers = ctx.workers;
  const PulseResult result = time_evolve(model, square_pulse(t_on, t_off, amplitude), f_drive, opts);
  save_pulse(result, (ctx.out_dir / "pulse.csv").string());
  json summary{{"T2_star_us", result.T2_star_us}, {"traces", json::array()}};
  for (const auto& t : result.traces)
    summary["traces"].push_back({{"f_GHz", t.f_drive}, {"kappa_tilde_GHz", t.kappa_tilde}, {"fit_residual", t.fit_residual}});
  write_json(ctx.out_dir / "pulse.json", summary);
  for (const auto& t : result.traces)
    ctx.out << "f " << format_double(t.f_drive) << " GHz: kappa_tilde " << format_double(t.kappa_tilde) << " GHz\n";
  return kExitOk;
}

int cmd_coop(const json& c, const Context& ctx) {
  const double G = c.at("G").get<double>();
  const double gamma = c.at("gamma").get<double>();
  const double kappa = c.at("kappa").get<double>();
  const double C = cooperativity(G, gamma, kappa);
  write_json(ctx.out_dir / "coop.json", {{"G_GHz", G}, {"gamma_GHz", gamma}, {"kappa_GHz", kappa}, {"C", C}});
  ctx.out << format_double(C) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

json natural_mixture() {
  return json::array({{{"isotope", "171"}, {"weight", 0.14}},
                      {{"isotope", "0"}, {"weight", 0.70}},
                      {{"isotope", "173"}, {"weight", 0.16}}});
}

json default_resonator() {
  return {{"f_r", 0.4036}, {"kappa_i", 1.89e-6}, {"kappa_e", 1.89e-6}, {"phi", 0.0}, {"alpha", 1.0}};
}

std::vector<Command> commands() {
  std::vector<Command> cmds;
  cmds.push_back({"levels", "Energy levels E_i(B) of one isotope, field along z", {
      {"isotope", "173", "built-in name (171, 0, 173) or parameter object", false, false, true},
      {"b_min", 0.0, "field start, T"},
      {"b_max", 0.3, "field end, T"},
      {"b_steps", 301, "number of field points"},
  }, cmd_levels});
  cmds.push_back({"broadband", "Normalized line-transmission map of an isotope mixture", {
      {"species", natural_mixture(), "[{isotope, weight, gamma}], weights summing to 1"},
      {"gamma", 0.02, "default line half-width, GHz"},
      {"g_density", 1e-5, "line coupling density"},
      {"temperature", 0.01, "K"},
      {"thermal_occupation", false, "Bose-Einstein photon occupation instead of n = 0"},
      {"drive_dir", json::array({1.0, 0.0, 0.0}), "rf field direction"},
      {"alpha", 1.0, "line transmission baseline (number or [re, im])", false, false, true},
      {"b_min", 0.0, "T"},
      {"b_max", 0.5, "T"},
      {"b_steps", 200, ""},
      {"f_min", 0.5, "GHz"},
      {"f_max", 8.0, "GHz"},
      {"f_steps", 400, ""},
      {"norm_offset", 1, "field-index offset of the normalization pair"},
  }, cmd_broadband});
  cmds.push_back({"cavity", "|S21|(B, f) of a resonator coupled to spin branches", {
      {"resonator", default_resonator(), "{f_r, kappa_i, kappa_e, phi, alpha}, GHz"},
      {"spins", json::array({{{"G", 2.4e-4}, {"gamma", 1.6e-3}, {"g_eff", 2.0}, {"omega0", 0.4036 - 2.0 * kCodata.mu_B_over_h * 0.017}}}),
       "[{G, gamma, g_eff, omega0}]; with the hamiltonian law omega0 is an offset"},
      {"law", "linear", "linear or hamiltonian"},
      {"isotope", "173", "isotope for the hamiltonian law", false, false, true},
      {"levels", json::array(), "[[i, j], ...] for the hamiltonian law"},
      {"b_min", 0.015, "T"},
      {"b_max", 0.019, "T"},
      {"b_steps", 81, ""},
      {"f_min", 0.4016, "GHz"},
      {"f_max", 0.4056, "GHz"},
      {"f_steps", 401, ""},
      {"noise", 0.0, "Gaussian magnitude noise sigma"},
      {"keep_phase", false, "also write the phase column"},
  }, cmd_cavity});
  cmds.push_back({"fieldmap", "Biot-Savart field of a current sheet on a grid", {
      {"sheet", nullptr, "current-sheet CSV", true},
      {"origin", json::array({0.0, 0.0, 1.0}), "grid origin, um"},
      {"spacing", json::array({1.0, 1.0, 1.0}), "grid spacing, um"},
      {"counts", json::array({10, 10, 10}), "grid counts"},
  }, cmd_fieldmap});
  cmds.push_back({"couple", "Collective coupling G_ij of a crystal in a field map", {
      {"field", nullptr, "field-grid CSV", true},
      {"isotope", "173", "", false, false, true},
      {"b_static", 0.017, "static field along z, T"},
      {"box_lo", nullptr, "crystal box corner, um", true},
      {"box_hi", nullptr, "crystal box corner, um", true},
      {"spin_density", nullptr, "spins per um^3 at full doping", true},
      {"doping", 1.0, "doping fraction x"},
      {"abundance", nullptr, "isotope fraction (default: the isotope's)"},
      {"transitions", json::array({json::array({1, 2})}), "[[i, j], ...]"},
      {"temperatures", json::array({0.01}), "K"},
      {"i_zpf", nullptr, "zero-point current, A", true},
      {"scale", 1.0, "overall filling scale"},
      {"delta_p_exponent", 1.0, "1 or 0.5"},
      {"gamma", nullptr, "spin half-width for C, GHz"},
      {"kappa", nullptr, "resonator half-width for C, GHz"},
      {"gaps", json::array(), "crystal-chip gaps to scan, um"},
  }, cmd_couple});
  cmds.push_back({"fit", "Coupled-mode fit of a whole |S21|(B, f) map", {
      {"map", nullptr, "TransmissionMap CSV", true},
      {"transitions", 1, "number of spin branches"},
      {"law", "linear", "linear or hamiltonian"},
      {"isotope", nullptr, "isotope for the hamiltonian law", false, false, true},
      {"levels", json::array(), "[[i, j], ...] for the hamiltonian law"},
      {"initial", json::object(), "initial values by parameter name"},
      {"bounds", json::object(), "{name: [lo, hi]}"},
      {"frozen", json::array(), "frozen parameter names"},
      {"gradient_tol", 1e-12, ""},
      {"step_tol", 1e-12, ""},
      {"max_iterations", 300, ""},
      {"multistart", 4, ""},
      {"jitter", 0.3, "relative spread of the restarts"},
      {"complex_residuals", false, "fit real and imaginary parts (needs phase)"},
  }, cmd_fit});
  cmds.push_back({"pulse", "Time-domain response to a square drive pulse", {
      {"resonator", default_resonator(), "{f_r, kappa_i, kappa_e, phi, alpha}, GHz"},
      {"spins", json::array(), "[{omega, gamma, G, Gamma_line}], GHz"},
      {"f_drive", json::array(), "drive frequencies, GHz (default f_r)"},
      {"t_on", 0.0, "us"},
      {"t_off", 100.0, "us"},
      {"duration", 300.0, "us"},
      {"step_us", 0.0, "RK4 step, us (0: automatic)"},
      {"tolerance", 1e-6, "step-doubling tolerance"},
      {"record_stride", 1, "keep every n-th step"},
      {"amplitude", 1.0, "drive amplitude"},
      {"ringdown", true, "fit the ring-down after t_off"},
  }, cmd_pulse});
  cmds.push_back({"coop", "Cooperativity C = G^2 / (gamma kappa)", {
      {"G", nullptr, "GHz", true, true},
      {"gamma", nullptr, "GHz", true, true},
      {"kappa", nullptr, "GHz", true, true},
  }, cmd_coop});
  return cmds;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spin ensemble / resonator spectroscopy toolkit", "spincav"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  std::string config_path, out_raw, seed_raw, workers_raw;
  auto* config_opt = app.add_option("--config", config_path, "JSON config file (keys as the long flags, with _)");
  auto* out_opt = app.add_option("--out", out_raw, "output directory (default spincav_out)");
  auto* seed_opt = app.add_option("--seed", seed_raw, "random seed (default 1)");
  auto* workers_opt = app.add_option("--workers", workers_raw, "worker threads, 0 = all cores");

  auto cmds = commands();
  for (auto& cmd : cmds) {
    cmd.app = app.add_subcommand(cmd.name, cmd.description);
    cmd.app->fallthrough();
    for (auto& p : cmd.params) {
      const std::string name = p.positional ? p.key : flag_name(p.key);
      std::string help = p.help;
      if (!p.def.is_null()) help += (help.empty() ? "" : " ") + std::string("[") + p.def.dump() + "]";
      p.option = cmd.app->add_option(name, p.raw, help);
    }
  }

  std::vector<char*> argv;
  std::vector<std::string> storage(args);
  for (auto& a : storage) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  Command* cmd = nullptr;
  for (auto& c : cmds)
    if (c.app->parsed()) cmd = &c;
  if (!cmd) return kExitUsage;

  if (!config_opt->count()) {
    if (const char* e = std::getenv("SPINCAV_CONFIG")) config_path = e;
  }
  json file = json::object();
  if (!config_path.empty()) {
    file = read_config(config_path);
    if (!file.is_object()) throw InputFormatError("config " + config_path + ": expected a JSON object");
  }

  // Globals.
  auto global = [&](CLI::Option* opt, const std::string& raw, const std::string& key, json def) -> json {
    if (opt->count()) return json::parse(raw, nullptr, false).is_discarded() ? json(raw) : json::parse(raw);
    if (const char* e = std::getenv(env_name(key).c_str())) {
      const json v = json::parse(e, nullptr, false);
      return v.is_discarded() ? json(std::string(e)) : v;
    }
    if (file.contains(key)) return file.at(key);
    return def;
  };
  json out_dir = global(out_opt, out_raw, "out", "spincav_out");
  if (out_dir.is_number()) out_dir = out_dir.dump();
  const json seed = global(seed_opt, seed_raw, "seed", 1);
  const json workers = global(workers_opt, workers_raw, "workers", 0);
  if (!out_dir.is_string()) throw PreconditionError("--out must be a path");
  if (!seed.is_number_integer() || seed.get<long long>() < 0) throw PreconditionError("--seed must be a non-negative integer");
  if (!workers.is_number_integer() || workers.get<long long>() < 0)
    throw PreconditionError("--workers must be a non-negative integer");

  // Command parameters: default < file < environment < flag.
  json resolved = json::object();
  for (auto& p : cmd->params) {
    json v = p.def;
    std::string source = "default";
    if (file.contains(p.key)) v = file.at(p.key), source = "config";
    if (const char* e = std::getenv(env_name(p.key).c_str())) v = parse_raw(p, e, env_name(p.key)), source = env_name(p.key);
    if (p.option->count()) v = parse_raw(p, p.raw, flag_name(p.key)), source = flag_name(p.key);
    if (!compatible(p, v)) throw PreconditionError(source + ": wrong type for " + p.key + " (expected like " + p.def.dump() + ")");
    if (p.required && v.is_null()) throw PreconditionError(cmd->name + ": missing required " + (p.positional ? p.key : flag_name(p.key)));
    resolved[p.key] = v;
  }
  for (const auto& [key, v] : file.items()) {
    if (key == "command" || key == "version" || key == "out" || key == "seed" || key == "workers") continue;
    if (!resolved.contains(key)) throw PreconditionError("config: unknown key '" + key + "' for " + cmd->name);
  }
  if (file.contains("command") && file.at("command") != cmd->name)
    throw PreconditionError("config was written for '" + file.at("command").get<std::string>() + "', not '" + cmd->name + "'");

  const Context ctx{fs::path(out_dir.get<std::string>()), seed.get<std::uint64_t>(), workers.get<int>(), out};
  fs::create_directories(ctx.out_dir);
  json manifest = resolved;
  manifest["command"] = cmd->name;
  manifest["version"] = kVersion;
  manifest["out"] = out_dir;
  manifest["seed"] = seed;
  manifest["workers"] = workers;
  write_json(ctx.out_dir / "manifest.json", manifest);
  return cmd->run(resolved, ctx);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err);
  } catch (const MissingFileError& e) {
    err << "missing input file: " << e.what() << '\n';
    return kExitInputFormat;
  } catch (const InputFormatError& e) {
    err << "input format error: " << e.what() << '\n';
    return kExitInputFormat;
  } catch (const PreconditionError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "usage error: bad config value: " << e.what() << '\n';
    return kExitUsage;
  } catch (const AccuracyError& e) {
    err << "not converged: " << e.what() << '\n';
    return kExitNonConvergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

int run_cli(int argc, char** argv) {
  return run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

}  // namespace spincav
