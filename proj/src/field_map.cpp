#include "spincav/field_map.hpp"

#include <cmath>
#include <limits>

#include "spincav/constants.hpp"
#include "spincav/error.hpp"
#include "spincav/parallel.hpp"
#include "spincav/text_io.hpp"

namespace spincav {

using text::format_double;
using text::parse_double;

CurrentSheet CurrentSheet::zeros(int nx, int ny, double dx, double dy, double plane_z) {
  CurrentSheet s;
  s.nx = nx;
  s.ny = ny;
  s.dx = dx;
  s.dy = dy;
  s.plane_z = plane_z;
  s.elements.assign(static_cast<std::size_t>(nx) * ny, Eigen::Vector2d::Zero());
  return s;
}

std::vector<CurrentElement> CurrentSheet::to_elements() const {
  std::vector<CurrentElement> out;
  out.reserve(elements.size());
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const auto& e = at(i, j);
      out.push_back({position(i, j), Vec3(e.x(), e.y(), 0.0)});
    }
  return out;
}

Vec3 GridSpec::node(std::size_t flat) const {
  const auto nx = static_cast<std::size_t>(counts[0]);
  const auto ny = static_cast<std::size_t>(counts[1]);
  return node(static_cast<int>(flat % nx), static_cast<int>((flat / nx) % ny), static_cast<int>(flat / (nx * ny)));
}

std::vector<Vec3> GridSpec::nodes() const {
  std::vector<Vec3> out;
  out.reserve(size());
  for (std::size_t k = 0; k < size(); ++k) out.push_back(node(k));
  return out;
}

CurrentSheet load_current_sheet(const std::string& path) {
  auto in = text::open_input(path);
  std::string line;
  if (!text::next_line(in, line)) throw MalformedHeaderError("current sheet: missing header");
  if (line.rfind("nx", 0) == 0 && !text::next_line(in, line))
    throw MalformedHeaderError("current sheet: missing header values");
  const auto head = text::split_csv(line);
  if (head.size() != 5) throw MalformedHeaderError("current sheet: header needs nx,ny,dx_um,dy_um,plane_z_um");
  CurrentSheet s;
  try {
    s.nx = static_cast<int>(text::parse_long(head[0]));
    s.ny = static_cast<int>(text::parse_long(head[1]));
    s.dx = parse_double(head[2]);
    s.dy = parse_double(head[3]);
    s.plane_z = parse_double(head[4]);
  } catch (const InputFormatError& e) {
    throw MalformedHeaderError(std::string("current sheet header: ") + e.what());
  }
  if (s.nx < 0 || s.ny < 0) throw MalformedHeaderError("current sheet: negative grid counts");
  if (s.nx == 0 || s.ny == 0) throw EmptySheetError("empty sheet");
  if (!(s.dx > 0 && s.dy > 0 && std::isfinite(s.plane_z)))
    throw MalformedHeaderError("current sheet: spacing must be positive and finite");

  s.elements.assign(static_cast<std::size_t>(s.nx) * s.ny, Eigen::Vector2d::Zero());
  std::vector<char> seen(s.elements.size(), 0);
  std::size_t rows = 0;
  while (text::next_line(in, line)) {
    const auto f = text::split_csv(line);
    if (f.size() != 4) throw InputFormatError("current sheet: row needs i,j,dIx_Aum,dIy_Aum: " + line);
    const long i = text::parse_long(f[0]);
    const long j = text::parse_long(f[1]);
    const double ix = parse_double(f[2]);
    const double iy = parse_double(f[3]);
    if (!std::isfinite(ix) || !std::isfinite(iy)) throw NonFiniteValueError("current sheet: non-finite value: " + line);
    if (i < 0 || j < 0 || i >= s.nx || j >= s.ny) throw RowCountError("current sheet: index out of range: " + line);
    const std::size_t k = static_cast<std::size_t>(j) * s.nx + i;
    if (seen[k]) throw RowCountError("current sheet: duplicate element: " + line);
    seen[k] = 1;
    s.elements[k] = {ix, iy};
    ++rows;
  }
  if (rows != s.elements.size())
    throw RowCountError("current sheet: expected " + std::to_string(s.elements.size()) + " rows, got " +
                        std::to_string(rows));
  return s;
}

void save_current_sheet(const CurrentSheet& sheet, const std::string& path) {
  auto out = text::open_output(path);
  out << sheet.nx << ',' << sheet.ny << ',' << format_double(sheet.dx) << ',' << format_double(sheet.dy) << ','
      << format_double(sheet.plane_z) << '\n';
  for (int j = 0; j < sheet.ny; ++j)
    for (int i = 0; i < sheet.nx; ++i) {
      const auto& e = sheet.at(i, j);
      out << i << ',' << j << ',' << format_double(e.x()) << ',' << format_double(e.y()) << '\n';
    }
}

FieldGrid load_field_grid(const std::string& path) {
  auto in = text::open_input(path);
  std::string line;
  if (!text::next_line(in, line)) throw MalformedHeaderError("field grid: missing header");
  const auto head = text::split_csv(line);
  if (head.size() != 9) throw MalformedHeaderError("field grid: header needs x0,y0,z0,dx,dy,dz,nx,ny,nz");
  FieldGrid g;
  try {
    for (int c = 0; c < 3; ++c) {
      g.spec.origin[c] = parse_double(head[c]);
      g.spec.spacing[c] = parse_double(head[3 + c]);
      g.spec.counts[c] = static_cast<int>(text::parse_long(head[6 + c]));
    }
  } catch (const InputFormatError& e) {
    throw MalformedHeaderError(std::string("field grid header: ") + e.what());
  }
  for (int c = 0; c < 3; ++c)
    if (g.spec.counts[c] < 1 || !(g.spec.spacing[c] > 0))
      throw MalformedHeaderError("field grid: counts must be >= 1 and spacing > 0");
  g.values.reserve(g.spec.size());
  while (text::next_line(in, line)) {
    const auto f = text::split_csv(line);
    if (f.size() != 6) throw InputFormatError("field grid: row needs 6 columns: " + line);
    Vec3 b;
    for (int c = 0; c < 3; ++c) b[c] = parse_double(f[3 + c]);
    if (!b.allFinite()) throw NonFiniteValueError("field grid: non-finite value: " + line);
    if (g.values.size() >= g.spec.size()) throw RowCountError("field grid: too many rows");
    g.values.push_back(b);
  }
  if (g.values.size() != g.spec.size())
    throw RowCountError("field grid: expected " + std::to_string(g.spec.size()) + " rows, got " +
                        std::to_string(g.values.size()));
  return g;
}

void save_field_grid(const FieldGrid& grid, const std::string& path) {
  auto out = text::open_output(path);
  const auto& s = grid.spec;
  out << format_double(s.origin.x()) << ',' << format_double(s.origin.y()) << ',' << format_double(s.origin.z()) << ','
      << format_double(s.spacing.x()) << ',' << format_double(s.spacing.y()) << ',' << format_double(s.spacing.z())
      << ',' << s.counts[0] << ',' << s.counts[1] << ',' << s.counts[2] << '\n';
  for (std::size_t k = 0; k < s.size(); ++k) {
    const Vec3 r = s.node(k);
    const Vec3& b = grid.values[k];
    out << format_double(r.x()) << ',' << format_double(r.y()) << ',' << format_double(r.z()) << ','
        << format_double(b.x()) << ',' << format_double(b.y()) << ',' << format_double(b.z()) << '\n';
  }
}

std::vector<Vec3> biot_savart(std::span<const CurrentElement> elements, std::span<const Vec3> points,
                              double clearance, int workers) {
  // dI [A um] x dr [um] / |dr|^3 [um^3] is in A/um; times mu0/4pi [T m/A]
  // and 1e6 um/m gives tesla.
  constexpr double kPrefactor = kMu0Over4Pi * 1e6;
  const double clearance2 = clearance * clearance;
  std::vector<Vec3> out(points.size(), Vec3::Zero());
  parallel_for(points.size(), workers, [&](std::size_t begin, std::size_t end, int) {
    std::vector<Vec3> terms(elements.size());
    for (std::size_t k = begin; k < end; ++k) {
      const Vec3& r = points[k];
      for (std::size_t e = 0; e < elements.size(); ++e) {
        const Vec3 d = r - elements[e].position;
        const double d2 = d.squaredNorm();
        if (d2 < clearance2)
          throw ClearanceError("biot_savart: evaluation point " + std::to_string(k) + " within clearance of element " +
                                   std::to_string(e),
                               static_cast<long>(k), static_cast<long>(e));
        terms[e] = elements[e].current.cross(d) / (d2 * std::sqrt(d2));
      }
      out[k] = kPrefactor * pairwise_sum<Vec3>(terms, Vec3::Zero());
    }
  });
  return out;
}

FieldGrid biot_savart(const CurrentSheet& sheet, const GridSpec& grid, int workers) {
  const auto elements = sheet.to_elements();
  const auto points = grid.nodes();
  const double clearance = 0.1 * std::min(sheet.dx, sheet.dy);
  FieldGrid out;
  out.spec = grid;
  try {
    out.values = biot_savart(elements, points, clearance, workers);
  } catch (const ClearanceError& e) {
    const auto n = static_cast<std::size_t>(e.point_index);
    const int ix = static_cast<int>(n % grid.counts[0]);
    const int iy = static_cast<int>((n / grid.counts[0]) % grid.counts[1]);
    const int iz = static_cast<int>(n / (static_cast<std::size_t>(grid.counts[0]) * grid.counts[1]));
    const int ei = static_cast<int>(e.element_index % sheet.nx);
    const int ej = static_cast<int>(e.element_index / sheet.nx);
    throw ClearanceError("biot_savart: grid cell (" + std::to_string(ix) + "," + std::to_string(iy) + "," +
                             std::to_string(iz) + ") within clearance of current element (" + std::to_string(ei) +
                             "," + std::to_string(ej) + ")",
                         e.point_index, e.element_index);
  }
  return out;
}

Vec3 sample_field(const FieldGrid& grid, const Vec3& r) {
  const auto& s = grid.spec;
  std::array<int, 3> i0{};
  std::array<double, 3> t{};
  for (int c = 0; c < 3; ++c) {
    const double u = (r[c] - s.origin[c]) / s.spacing[c];
    const int n = s.counts[c];
    constexpr double kSlack = 1e-12;
    if (!(u >= -kSlack && u <= (n - 1) + kSlack)) throw OutOfBoundsError("sample_field: point outside grid");
    if (n == 1) {
      i0[c] = 0;
      t[c] = 0.0;
      continue;
    }
    const double uc = std::clamp(u, 0.0, static_cast<double>(n - 1));
    int k = static_cast<int>(std::floor(uc));
    if (k >= n - 1) k = n - 2;
    i0[c] = k;
    t[c] = uc - k;
  }
  Vec3 acc = Vec3::Zero();
  for (int corner = 0; corner < 8; ++corner) {
    double w = 1.0;
    std::array<int, 3> idx{};
    for (int c = 0; c < 3; ++c) {
      const int bit = (corner >> c) & 1;
      w *= bit ? t[c] : 1.0 - t[c];
      idx[c] = std::min(i0[c] + bit, s.counts[c] - 1);
    }
    if (w != 0.0) acc += w * grid.at(idx[0], idx[1], idx[2]);
  }
  return acc;
}

double transverse_fraction(const FieldGrid& grid, const Box& region) {
  const auto& s = grid.spec;
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (!region.contains(s.node(k))) continue;
    const Vec3& b = grid.values[k];
    const double b2 = b.squaredNorm();
    if (b2 == 0.0) continue;
    const double ratio = (b.x() * b.x() + b.y() * b.y()) / b2;
    sum += ratio * ratio;
    ++n;
  }
  if (n == 0) throw PreconditionError("transverse_fraction: empty region");
  return std::sqrt(sum / static_cast<double>(n));
}

}  // namespace spincav
