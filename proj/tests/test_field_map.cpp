#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "spincav/constants.hpp"
#include "spincav/error.hpp"
#include "spincav/field_map.hpp"

using namespace spincav;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "spincav_test_field_map";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// Straight wire along x through the origin, built from unit-length segments.
std::vector<CurrentElement> wire(double length_um, double seg_um, double current_A) {
  std::vector<CurrentElement> e;
  const int n = static_cast<int>(std::lround(length_um / seg_um));
  for (int k = 0; k < n; ++k)
    e.push_back({Vec3(-0.5 * length_um + (k + 0.5) * seg_um, 0, 0), Vec3(current_A * seg_um, 0, 0)});
  return e;
}

std::vector<CurrentElement> loop(double R_um, int segments, double current_A) {
  std::vector<CurrentElement> e;
  for (int k = 0; k < segments; ++k) {
    const double a0 = 2 * kPi * k / segments, a1 = 2 * kPi * (k + 1) / segments;
    const Vec3 p0(R_um * std::cos(a0), R_um * std::sin(a0), 0), p1(R_um * std::cos(a1), R_um * std::sin(a1), 0);
    e.push_back({0.5 * (p0 + p1), current_A * (p1 - p0)});
  }
  return e;
}

// Direct element sum in tesla per ampere, geometry in micrometers.
Vec3 direct_field(const std::vector<CurrentElement>& els, const Vec3& r) {
  Vec3 b = Vec3::Zero();
  for (const auto& e : els) {
    const Vec3 d = r - e.position;
    b += kMu0Over4Pi * e.current.cross(d) / std::pow(d.norm(), 3) * 1e6;
  }
  return b;
}

CurrentSheet random_sheet(int nx, int ny, unsigned seed) {
  CurrentSheet s = CurrentSheet::zeros(nx, ny, 2.0, 3.0, 0.0);
  unsigned state = seed;
  auto next = [&] {
    state = state * 1664525u + 1013904223u;
    return (state >> 8) / double(1 << 24) - 0.5;
  };
  for (auto& e : s.elements) e = Eigen::Vector2d(next(), next());
  return s;
}

GridSpec above_grid() {
  GridSpec g;
  g.origin = Vec3(-5, -5, 2);
  g.spacing = Vec3(4, 4, 3);
  g.counts = {6, 6, 4};
  return g;
}

}  // namespace

TEST_CASE("current sheet parsing") {
  SUBCASE("empty sheet") {
    const auto p = temp_file("empty.csv");
    write_text(p, "nx,ny,dx_um,dy_um,plane_z_um\n0,0,1,1,0\n");
    CHECK_THROWS_AS(load_current_sheet(p.string()), EmptySheetError);
  }
  SUBCASE("single element") {
    const auto p = temp_file("one.csv");
    write_text(p, "1,1,2,2,0\n0,0,1,0\n");
    const CurrentSheet s = load_current_sheet(p.string());
    REQUIRE(s.elements.size() == 1);
    CHECK(s.at(0, 0).x() == 1.0);
    CHECK(s.at(0, 0).y() == 0.0);
    CHECK(s.to_elements().size() == 1);
  }
  SUBCASE("malformed header") {
    const auto p = temp_file("bad_header.csv");
    write_text(p, "1,1,2\n0,0,1,0\n");
    CHECK_THROWS_AS(load_current_sheet(p.string()), MalformedHeaderError);
  }
  SUBCASE("row count mismatch") {
    const auto p = temp_file("rows.csv");
    write_text(p, "2,1,1,1,0\n0,0,1,0\n");
    CHECK_THROWS_AS(load_current_sheet(p.string()), RowCountError);
  }
  SUBCASE("non-finite value") {
    const auto p = temp_file("nan.csv");
    write_text(p, "1,1,1,1,0\n0,0,nan,0\n");
    CHECK_THROWS_AS(load_current_sheet(p.string()), NonFiniteValueError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_current_sheet(temp_file("absent.csv").string()), MissingFileError);
  }
}

TEST_CASE("sheet and grid files round-trip bit-exactly") {
  const CurrentSheet s = random_sheet(7, 5, 3);
  const auto p = temp_file("sheet.csv");
  save_current_sheet(s, p.string());
  const CurrentSheet back = load_current_sheet(p.string());
  CHECK(back.nx == s.nx);
  CHECK(back.dy == s.dy);
  for (std::size_t k = 0; k < s.elements.size(); ++k) CHECK(back.elements[k] == s.elements[k]);

  const FieldGrid g = biot_savart(s, above_grid(), 1);
  const auto q = temp_file("grid.csv");
  save_field_grid(g, q.string());
  const FieldGrid gb = load_field_grid(q.string());
  CHECK(gb.spec.counts == g.spec.counts);
  for (std::size_t k = 0; k < g.values.size(); ++k) CHECK(gb.values[k] == g.values[k]);
}

TEST_CASE("parallel element has no field on its axis") {
  const std::vector<CurrentElement> e{{Vec3::Zero(), Vec3(1, 0, 0)}};
  const std::vector<Vec3> pts{Vec3(5, 0, 0), Vec3(-3, 0, 0)};
  for (const Vec3& b : biot_savart(e, pts, 0.1)) CHECK(b.norm() == 0.0);
}

TEST_CASE("single element decays as 1/r^2") {
  const std::vector<CurrentElement> e{{Vec3::Zero(), Vec3(0.3, 1, 0)}};
  const Vec3 dir = Vec3(0.2, -0.4, 0.9).normalized();
  for (double r : {1.0, 7.0, 40.0}) {
    const std::vector<Vec3> pts{r * dir, 2 * r * dir};
    const auto b = biot_savart(e, pts, 0.1);
    CHECK(b[0].norm() / b[1].norm() == near(4.0, 1e-9));
  }
}

TEST_CASE("long straight wire matches mu0 I / 2 pi d") {
  const auto e = wire(10000.0, 1.0, 1.0);
  const std::vector<Vec3> pts{Vec3(0, 0, 10.0)};
  const Vec3 b = biot_savart(e, pts, 0.1)[0];
  CHECK(b.norm() == near(0.02, 0.005));
  CHECK(std::abs(b.x()) < 1e-12);
}

TEST_CASE("loop on-axis field within 1% at 100 segments") {
  const double R = 50.0;
  for (double z : {0.0, 20.0, 80.0}) {
    const std::vector<Vec3> pts{Vec3(0, 0, z)};
    const double exact = 2 * kPi * kMu0Over4Pi * R * R / (std::pow(R * R + z * z, 1.5)) * 1e6;
    const double b100 = biot_savart(loop(R, 100, 1.0), pts, 0.1)[0].z();
    const double b200 = biot_savart(loop(R, 200, 1.0), pts, 0.1)[0].z();
    CHECK(b100 == near(exact, 0.01));
    CHECK(std::abs(b200 - exact) <= std::abs(b100 - exact));
  }
}

TEST_CASE("sheet field agrees with a direct sum and is deterministic across workers") {
  const CurrentSheet s = random_sheet(9, 8, 11);
  const FieldGrid g1 = biot_savart(s, above_grid(), 1);
  const FieldGrid g4 = biot_savart(s, above_grid(), 4);
  const FieldGrid g7 = biot_savart(s, above_grid(), 7);
  const auto els = s.to_elements();
  for (std::size_t k = 0; k < g1.values.size(); ++k) {
    CHECK(g1.values[k] == g4.values[k]);
    CHECK(g1.values[k] == g7.values[k]);
    const Vec3 ref = direct_field(els, g1.spec.node(k));
    CHECK((g1.values[k] - ref).norm() <= 1e-12 * ref.norm() + 1e-20);
  }
}

TEST_CASE("superposition and scaling") {
  const CurrentSheet a = random_sheet(6, 6, 1), b = random_sheet(6, 6, 2);
  CurrentSheet sum = a, scaled = a;
  for (std::size_t k = 0; k < a.elements.size(); ++k) {
    sum.elements[k] += b.elements[k];
    scaled.elements[k] *= 4.0;
  }
  const auto fa = biot_savart(a, above_grid()), fb = biot_savart(b, above_grid());
  const auto fs_ = biot_savart(sum, above_grid()), fc = biot_savart(scaled, above_grid());
  for (std::size_t k = 0; k < fa.values.size(); ++k) {
    const Vec3 lin = fa.values[k] + fb.values[k];
    CHECK((fs_.values[k] - lin).norm() <= 1e-12 * lin.norm());
    CHECK(fc.values[k] == 4.0 * fa.values[k]);
  }
}

TEST_CASE("field decays away from the sheet") {
  CurrentSheet s = CurrentSheet::zeros(10, 10, 2, 2, 0);
  for (auto& e : s.elements) e = Eigen::Vector2d(1, 0);
  GridSpec g;
  g.origin = Vec3(9, 9, 30);
  g.spacing = Vec3(1, 1, 10);
  g.counts = {1, 1, 8};
  const FieldGrid f = biot_savart(s, g);
  for (int iz = 1; iz < 8; ++iz) CHECK(f.at(0, 0, iz).norm() < f.at(0, 0, iz - 1).norm());
}

TEST_CASE("clearance violations name the offending point and element") {
  const std::vector<CurrentElement> e{{Vec3(0, 0, 0), Vec3(1, 0, 0)}, {Vec3(4, 0, 0), Vec3(1, 0, 0)}};
  const std::vector<Vec3> pts{Vec3(0, 0, 5), Vec3(4, 0, 0.01)};
  try {
    biot_savart(e, pts, 0.1);
    FAIL("expected ClearanceError");
  } catch (const ClearanceError& err) {
    CHECK(err.point_index == 1);
    CHECK(err.element_index == 1);
  }
  CurrentSheet s = CurrentSheet::zeros(2, 2, 1, 1, 0);
  GridSpec g;
  g.counts = {2, 2, 1};
  CHECK_THROWS_AS(biot_savart(s, g), ClearanceError);
}

TEST_CASE("trilinear sampling") {
  FieldGrid g;
  g.spec.origin = Vec3(1, 2, 3);
  g.spec.spacing = Vec3(2, 1, 0.5);
  g.spec.counts = {3, 3, 3};
  for (std::size_t k = 0; k < g.spec.size(); ++k) {
    const Vec3 r = g.spec.node(k);
    g.values.push_back(Vec3(r.x() * r.y(), std::sin(r.z()), r.x() + r.z()));
  }
  SUBCASE("exact at nodes") {
    for (std::size_t k = 0; k < g.spec.size(); ++k) CHECK(sample_field(g, g.spec.node(k)) == g.values[k]);
  }
  SUBCASE("midpoint is the mean") {
    const Vec3 mid = 0.5 * (g.spec.node(0, 1, 1) + g.spec.node(1, 1, 1));
    const Vec3 ref = 0.5 * (g.at(0, 1, 1) + g.at(1, 1, 1));
    CHECK((sample_field(g, mid) - ref).norm() < 1e-14);
  }
  SUBCASE("uniform grid") {
    for (auto& v : g.values) v = Vec3(0.1, -0.2, 0.3);
    for (const Vec3& r : {Vec3(1.3, 2.2, 3.9), Vec3(4.9, 3.7, 3.1)})
      CHECK((sample_field(g, r) - Vec3(0.1, -0.2, 0.3)).norm() < 1e-15);
  }
  SUBCASE("out of bounds") { CHECK_THROWS_AS(sample_field(g, Vec3(0, 2, 3)), OutOfBoundsError); }
}

TEST_CASE("transverse fraction") {
  FieldGrid g;
  g.spec.counts = {3, 3, 3};
  g.values.assign(g.spec.size(), Vec3::UnitX());
  const Box all{Vec3(-1, -1, -1), Vec3(5, 5, 5)};
  CHECK(transverse_fraction(g, all) == near(1.0, 1e-12));
  g.values.assign(g.spec.size(), Vec3::UnitZ());
  CHECK(transverse_fraction(g, all) == 0.0);
  CHECK_THROWS_AS(transverse_fraction(g, Box{Vec3(10, 10, 10), Vec3(11, 11, 11)}), PreconditionError);

  SUBCASE("wire above a plane, against a direct sum") {
    const auto e = wire(400.0, 2.0, 1.0);
    GridSpec spec;
    spec.origin = Vec3(-20, -30, 5);
    spec.spacing = Vec3(10, 10, 5);
    spec.counts = {5, 7, 4};
    FieldGrid wg;
    wg.spec = spec;
    const auto nodes = spec.nodes();
    wg.values = biot_savart(e, nodes, 0.1);
    const Box lateral{Vec3(-20, 5, 5), Vec3(20, 30, 20)};
    double acc = 0;
    int n = 0;
    for (const Vec3& r : nodes) {
      if (!lateral.contains(r)) continue;
      const Vec3 b = direct_field(e, r);
      const double t = (b.x() * b.x() + b.y() * b.y()) / b.squaredNorm();
      acc += t * t;
      ++n;
    }
    CHECK(transverse_fraction(wg, lateral) == near(std::sqrt(acc / n), 1e-9));
  }
}
