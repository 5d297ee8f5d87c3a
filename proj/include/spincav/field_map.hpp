#pragma once

#include <Eigen/Dense>
#include <array>
#include <span>
#include <string>
#include <vector>

namespace spincav {

using Vec3 = Eigen::Vector3d;

/// One straight current element: position in micrometers and current
/// element dI (ampere * micrometer).
struct CurrentElement {
  Vec3 position;
  Vec3 current;
};

/// Discretized 2D current distribution of a resonator in the plane
/// z = plane_z. Element (i, j) sits at (i*dx, j*dy, plane_z).
struct CurrentSheet {
  int nx = 0;
  int ny = 0;
  double dx = 1.0;  // um
  double dy = 1.0;  // um
  double plane_z = 0.0;
  std::vector<Eigen::Vector2d> elements;  // (dIx, dIy) in A um, index j*nx + i

  Eigen::Vector2d& at(int i, int j) { return elements[static_cast<std::size_t>(j) * nx + i]; }
  const Eigen::Vector2d& at(int i, int j) const { return elements[static_cast<std::size_t>(j) * nx + i]; }
  Vec3 position(int i, int j) const { return Vec3(i * dx, j * dy, plane_z); }

  static CurrentSheet zeros(int nx, int ny, double dx, double dy, double plane_z = 0.0);
  std::vector<CurrentElement> to_elements() const;
};

/// Regular 3D evaluation grid. Node (ix, iy, iz) sits at origin + i * spacing.
struct GridSpec {
  Vec3 origin = Vec3::Zero();
  Vec3 spacing = Vec3::Ones();
  std::array<int, 3> counts{1, 1, 1};

  std::size_t size() const {
    return static_cast<std::size_t>(counts[0]) * counts[1] * counts[2];
  }
  std::size_t index(int ix, int iy, int iz) const {
    return (static_cast<std::size_t>(iz) * counts[1] + iy) * counts[0] + ix;
  }
  Vec3 node(int ix, int iy, int iz) const {
    return origin + Vec3(ix * spacing.x(), iy * spacing.y(), iz * spacing.z());
  }
  Vec3 node(std::size_t flat) const;
  Vec3 upper() const { return node(counts[0] - 1, counts[1] - 1, counts[2] - 1); }
  double cell_volume() const { return spacing.prod(); }
  std::vector<Vec3> nodes() const;
};

/// Field map in tesla per ampere of resonator peak current.
struct FieldGrid {
  GridSpec spec;
  std::vector<Vec3> values;

  const Vec3& at(int ix, int iy, int iz) const { return values[spec.index(ix, iy, iz)]; }
  Vec3& at(int ix, int iy, int iz) { return values[spec.index(ix, iy, iz)]; }
};

CurrentSheet load_current_sheet(const std::string& path);
void save_current_sheet(const CurrentSheet& sheet, const std::string& path);

FieldGrid load_field_grid(const std::string& path);
void save_field_grid(const FieldGrid& grid, const std::string& path);

/// Biot-Savart sum over explicit elements at arbitrary points. Each point's
/// sum uses a fixed pairwise reduction over the elements, so the result is
/// bit-identical for any worker count. Points closer than `clearance` (um)
/// to any element raise ClearanceError.
std::vector<Vec3> biot_savart(std::span<const CurrentElement> elements, std::span<const Vec3> points,
                              double clearance, int workers = 0);

/// Field of a current sheet on a grid; clearance is 0.1 * min(dx, dy).
FieldGrid biot_savart(const CurrentSheet& sheet, const GridSpec& grid, int workers = 0);

/// Trilinear interpolation; exact at nodes. OutOfBoundsError outside.
Vec3 sample_field(const FieldGrid& grid, const Vec3& r);

/// Axis-aligned box in micrometers.
struct Box {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Zero();

  bool contains(const Vec3& r) const {
    return (r.array() >= lo.array()).all() && (r.array() <= hi.array()).all();
  }
  Box shifted(const Vec3& d) const { return {lo + d, hi + d}; }
};

/// sqrt(mean(((bx^2 + by^2) / |b|^2)^2)) over grid nodes inside the region.
/// Nodes with zero field are skipped. PreconditionError if no node qualifies.
double transverse_fraction(const FieldGrid& grid, const Box& region);

}  // namespace spincav
