#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "spincav/cli.hpp"
#include "spincav/constants.hpp"
#include "spincav/field_map.hpp"
#include "spincav/io_model.hpp"
#include "spincav/spin_core.hpp"
#include "test_util.hpp"

using namespace spincav;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "spincav");
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("spincav_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

std::size_t data_rows(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') ++n;
  return n - 1;  // header
}

struct EnvGuard {
  std::string name;
  EnvGuard(std::string n, const std::string& v) : name(std::move(n)) { setenv(name.c_str(), v.c_str(), 1); }
  ~EnvGuard() { unsetenv(name.c_str()); }
};

}  // namespace

TEST_CASE("coop prints the nuclear cooperativity") {
  const auto d = scratch("coop");
  const auto r = cli({"--out", d.string(), "coop", "0.24e-3", "1.6e-3", "3.78e-6"});
  REQUIRE(r.code == 0);
  CHECK(std::stod(r.out) == near(9.5238, 1e-4));
  CHECK(std::abs(std::stod(r.out) - 9.1) / 9.1 < 0.05);
  const json m = read_json(d / "manifest.json");
  CHECK(m.at("command") == "coop");
  CHECK(m.at("version") == kVersion);
  CHECK(m.at("G").get<double>() == 0.24e-3);
  CHECK(read_json(d / "coop.json").at("C").get<double>() == near(9.5238, 1e-4));
}

TEST_CASE("usage errors exit with 2") {
  const auto d = scratch("usage");
  CHECK(cli({}).code == 2);
  CHECK(cli({"bogus"}).code == 2);
  CHECK(cli({"--out", d.string(), "coop", "1e-3"}).code == 2);
  CHECK(cli({"--out", d.string(), "levels", "--b-min", "0.1", "--b-max", "0.1"}).code == 2);
  CHECK(cli({"--out", d.string(), "levels", "--b-steps", "0"}).code == 2);
  CHECK(cli({"--out", d.string(), "levels", "--isotope", "175"}).code == 2);
  CHECK(cli({"--out", d.string(), "--seed", "-3", "coop", "1", "1", "1"}).code == 2);
  CHECK(cli({"--out", d.string(), "--workers", "two", "coop", "1", "1", "1"}).code == 2);
  CHECK(cli({"--out", d.string(), "levels", "--b-steps", "many"}).code == 2);
  const auto bad_sum = cli({"--out", d.string(), "broadband", "--species",
                            R"([{"isotope":"0","weight":0.5},{"isotope":"171","weight":0.4}])", "--b-steps", "4",
                            "--f-steps", "4"});
  CHECK(bad_sum.code == 2);
  CHECK(bad_sum.err.find("sum") != std::string::npos);
  write_text(d / "extra.json", R"({"b_stepz": 3})");
  CHECK(cli({"--out", d.string(), "--config", (d / "extra.json").string(), "levels"}).code == 2);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("input-format errors exit with 3") {
  const auto d = scratch("format");
  const auto missing = cli({"--out", d.string(), "fit", "--map", (d / "nope.csv").string()});
  CHECK(missing.code == 3);
  CHECK(missing.err.find("missing input file") != std::string::npos);
  write_text(d / "broken.csv", "B_T,f_GHz,S21\n0.1,zzz,1\n");
  CHECK(cli({"--out", d.string(), "fit", "--map", (d / "broken.csv").string()}).code == 3);
  write_text(d / "broken.json", "{ not json");
  CHECK(cli({"--out", d.string(), "--config", (d / "broken.json").string(), "levels"}).code == 3);
  write_text(d / "sheet.csv", "nx,ny,dx_um,dy_um,plane_z_um\n0,3,1,1,0\n");
  CHECK(cli({"--out", d.string(), "fieldmap", "--sheet", (d / "sheet.csv").string()}).code == 3);
}

TEST_CASE("a fit that cannot converge exits with 4") {
  const auto d = scratch("nonconv");
  REQUIRE(cli({"--out", d.string(), "cavity", "--b-steps", "21", "--f-steps", "201"}).code == 0);
  const auto r = cli({"--out", d.string(), "fit", "--map", (d / "map.csv").string(), "--max-iterations", "1",
                      "--multistart", "1", "--initial", R"({"G_1": 0.5e-3, "gamma_1": 0.8e-3})"});
  CHECK(r.code == 4);
  CHECK(r.out.find("did not converge") != std::string::npos);
  CHECK_FALSE(read_json(d / "fit.json").at("converged").get<bool>());
}

TEST_CASE("levels of a nuclear-spin-free isotope are two straight lines") {
  const auto d = scratch("levels0");
  REQUIRE(cli({"--out", d.string(), "levels", "--isotope", "0", "--b-min", "0", "--b-max", "0.1", "--b-steps", "11"}).code ==
          0);
  const auto map = slurp(d / "levels.csv");
  std::istringstream in(map);
  std::string line;
  std::getline(in, line);
  CHECK(line == "B_T,level,E_GHz");
  const double g = builtin_isotope("0").g_e_par;
  int rows = 0;
  while (std::getline(in, line)) {
    double b = 0, e = 0;
    int level = 0;
    char c1, c2;
    std::istringstream(line) >> b >> c1 >> level >> c2 >> e;
    const double expected = (level == 0 ? -0.5 : 0.5) * g * kCodata.mu_B_over_h * b;
    CHECK(std::abs(e - expected) < 5e-8);  // B = 0 is split by a 1 nT tie-break field
    ++rows;
  }
  CHECK(rows == 22);
}

TEST_CASE("levels of 173Yb match direct diagonalization") {
  const auto d = scratch("levels173");
  REQUIRE(cli({"--out", d.string(), "levels", "--b-steps", "31"}).code == 0);
  CHECK(data_rows(d / "levels.csv") == 31 * 12);
  const SpinSystem sys(builtin_isotope("173"));
  std::istringstream in(slurp(d / "levels.csv"));
  std::string line;
  std::getline(in, line);
  double worst = 0;
  while (std::getline(in, line)) {
    double b = 0, e = 0;
    int level = 0;
    char c1, c2;
    std::istringstream(line) >> b >> c1 >> level >> c2 >> e;
    worst = std::max(worst, std::abs(e - diagonalize(sys, along_z(b)).energies[level]));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("settings resolve as config, then environment, then flag") {
  const auto d = scratch("precedence");
  write_text(d / "cfg.json", R"({"b_steps": 5, "b_max": 0.05})");
  const std::string cfg = (d / "cfg.json").string();
  REQUIRE(cli({"--out", d.string(), "--config", cfg, "levels", "--isotope", "0"}).code == 0);
  CHECK(data_rows(d / "levels.csv") == 5 * 2);
  {
    EnvGuard env("SPINCAV_B_STEPS", "7");
    REQUIRE(cli({"--out", d.string(), "--config", cfg, "levels", "--isotope", "0"}).code == 0);
    CHECK(data_rows(d / "levels.csv") == 7 * 2);
    REQUIRE(cli({"--out", d.string(), "--config", cfg, "levels", "--isotope", "0", "--b-steps", "9"}).code == 0);
    CHECK(data_rows(d / "levels.csv") == 9 * 2);
    const json m = read_json(d / "manifest.json");
    CHECK(m.at("b_steps") == 9);
    CHECK(m.at("b_max").get<double>() == 0.05);
  }
  {
    EnvGuard env("SPINCAV_CONFIG", cfg);
    REQUIRE(cli({"--out", d.string(), "levels", "--isotope", "0"}).code == 0);
    CHECK(data_rows(d / "levels.csv") == 5 * 2);
  }
  {
    const auto other = scratch("precedence_env_out");
    EnvGuard env("SPINCAV_OUT", other.string());
    REQUIRE(cli({"coop", "1", "1", "1"}).code == 0);
    CHECK(fs::exists(other / "coop.json"));
  }
}

TEST_CASE("same seed gives byte-identical outputs and the manifest reproduces them") {
  const auto a = scratch("repro_a"), b = scratch("repro_b"), c = scratch("repro_c"), e = scratch("repro_e");
  const std::vector<std::string> args{"cavity", "--noise", "0.01", "--b-steps", "11", "--f-steps", "101"};
  auto with = [&](const fs::path& out, const std::string& seed, const std::string& workers) {
    std::vector<std::string> v{"--out", out.string(), "--seed", seed, "--workers", workers};
    v.insert(v.end(), args.begin(), args.end());
    return cli(v);
  };
  REQUIRE(with(a, "7", "1").code == 0);
  REQUIRE(with(b, "7", "3").code == 0);
  REQUIRE(with(c, "8", "1").code == 0);
  CHECK(slurp(a / "map.csv") == slurp(b / "map.csv"));
  CHECK(slurp(a / "map.csv") != slurp(c / "map.csv"));
  REQUIRE(cli({"--config", (a / "manifest.json").string(), "--out", e.string(), "cavity"}).code == 0);
  CHECK(slurp(a / "map.csv") == slurp(e / "map.csv"));

  const auto l1 = scratch("repro_levels1"), l2 = scratch("repro_levels2");
  REQUIRE(cli({"--out", l1.string(), "levels", "--b-steps", "11"}).code == 0);
  REQUIRE(cli({"--config", (l1 / "manifest.json").string(), "--out", l2.string(), "levels"}).code == 0);
  CHECK(slurp(l1 / "levels.csv") == slurp(l2 / "levels.csv"));
}

TEST_CASE("broadband with no coupling normalizes to zero") {
  const auto d = scratch("broadband");
  REQUIRE(cli({"--out", d.string(), "broadband", "--g-density", "0", "--b-steps", "12", "--f-steps", "15"}).code == 0);
  const TransmissionMap m = load_map((d / "broadband.csv").string());
  // Each row is a difference with the row norm_offset fields above it.
  REQUIRE(m.magnitude.size() == 11 * 15);
  for (double v : m.magnitude) CHECK(v == 0.0);
  const TransmissionMap raw = load_map((d / "broadband_raw.csv").string());
  for (double v : raw.magnitude) CHECK(v == 1.0);
}

TEST_CASE("broadband of the I = 0 isotope traces one straight line") {
  const auto d = scratch("broadband0");
  REQUIRE(cli({"--out", d.string(), "broadband", "--species", R"([{"isotope":"0","weight":1}])", "--b-min", "0.02",
               "--b-max", "0.1", "--b-steps", "9", "--f-min", "0.5", "--f-max", "6.5", "--f-steps", "1201"})
              .code == 0);
  const TransmissionMap m = load_map((d / "broadband_raw.csv").string());
  const double slope = builtin_isotope("0").g_e_par * kCodata.mu_B_over_h;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto col = m.column(i);
    const auto k = static_cast<std::size_t>(std::min_element(col.begin(), col.end()) - col.begin());
    CHECK(std::abs(m.f[k] - slope * m.B[i]) <= 0.005 + 1e-12);
  }
}

TEST_CASE("pulse ring-down without spins coupled equals kappa") {
  const auto d = scratch("pulse");
  const auto r = cli({"--out", d.string(), "pulse", "--spins", R"([{"omega": 0.4036, "gamma": 1e-3, "G": 0}])"});
  REQUIRE(r.code == 0);
  const json s = read_json(d / "pulse.json");
  CHECK(s.at("traces").at(0).at("kappa_tilde_GHz").get<double>() == near(2 * 1.89e-6, 0.01));
  CHECK(fs::exists(d / "pulse.csv"));
}

TEST_CASE("fit recovers a cavity map written by the cavity command") {
  const auto d = scratch("fit");
  REQUIRE(cli({"--out", d.string(), "cavity"}).code == 0);
  const auto r = cli({"--out", d.string(), "fit", "--map", (d / "map.csv").string(), "--initial",
                      R"({"G_1": 0.3e-3, "gamma_1": 1.3e-3, "g_eff_1": 2.3})"});
  REQUIRE(r.code == 0);
  const json p = read_json(d / "fit.json").at("parameters");
  CHECK(p.at("G_1").at("value").get<double>() == near(2.4e-4, 0.01));
  CHECK(p.at("gamma_1").at("value").get<double>() == near(1.6e-3, 0.01));
  CHECK(p.at("g_eff_1").at("value").get<double>() == near(2.0, 0.01));
  CHECK(p.at("kappa_e").at("value").get<double>() == near(1.89e-6, 0.01));
  CHECK(read_json(d / "manifest.json").at("command") == "fit");
}

TEST_CASE("fieldmap and couple run end to end") {
  const auto d = scratch("couple");
  CurrentSheet sheet = CurrentSheet::zeros(20, 3, 5.0, 5.0, 0.0);
  for (int i = 0; i < 20; ++i) sheet.at(i, 1) = Eigen::Vector2d(5.0, 0.0);
  save_current_sheet(sheet, (d / "sheet.csv").string());
  REQUIRE(cli({"--out", d.string(), "fieldmap", "--sheet", (d / "sheet.csv").string(), "--origin", "[20, -10, 5]",
               "--spacing", "[5, 5, 5]", "--counts", "[5, 9, 5]"})
              .code == 0);
  REQUIRE(fs::exists(d / "field.csv"));
  const auto r = cli({"--out", d.string(), "couple", "--field", (d / "field.csv").string(), "--box-lo", "[25, -5, 10]",
                      "--box-hi", "[35, 5, 20]", "--spin-density", "13.5", "--i-zpf", "1e-8", "--gamma", "1.6e-3",
                      "--kappa", "3.78e-6", "--temperatures", "[0.01, 0.1]"});
  REQUIRE(r.code == 0);
  const json rep = read_json(d / "coupling.json");
  REQUIRE(rep.at("couplings").size() == 2);
  CHECK(data_rows(d / "coupling.csv") == 2);
  CHECK(cli({"--out", d.string(), "couple", "--field", (d / "field.csv").string(), "--box-lo", "[25, -5, 10]",
             "--box-hi", "[35, 5, 20]", "--spin-density", "13.5"})
            .code == 2);
}
