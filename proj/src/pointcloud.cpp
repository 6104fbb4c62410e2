#include "pcadv/pointcloud.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <functional>
#include <numbers>
#include <random>

namespace pcadv {

namespace {

constexpr double kPi = std::numbers::pi;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// A surface piece that maps the unit square area-uniformly onto itself.
struct Patch {
  double area;
  std::function<Point3(double, double)> map;
};

Patch rectangle(Point3 origin, Point3 edge_u, Point3 edge_v) {
  const double area = edge_u.cross(edge_v).norm();
  return {area, [=](double u, double v) -> Point3 { return origin + u * edge_u + v * edge_v; }};
}

Patch disk(Point3 center, double radius, double z_sign) {
  return {kPi * radius * radius, [=](double u, double v) -> Point3 {
            const double rho = radius * std::sqrt(u);
            const double theta = 2.0 * kPi * v;
            return center + Point3(rho * std::cos(theta), z_sign * rho * std::sin(theta), 0.0);
          }};
}

std::vector<Patch> box_patches(double a, double b, double c) {
  const Point3 lo(-a / 2, -b / 2, -c / 2);
  const Point3 ex(a, 0, 0), ey(0, b, 0), ez(0, 0, c);
  return {
      rectangle(lo, ex, ey),      rectangle(lo + ez, ex, ey),  // z faces
      rectangle(lo, ex, ez),      rectangle(lo + ey, ex, ez),  // y faces
      rectangle(lo, ey, ez),      rectangle(lo + ex, ey, ez),  // x faces
  };
}

std::vector<Patch> sphere_patches() {
  return {{kPi, [](double u, double v) -> Point3 {
             const double z = 1.0 - 2.0 * u;
             const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
             const double phi = 2.0 * kPi * v;
             return 0.5 * Point3(s * std::cos(phi), s * std::sin(phi), z);
           }}};
}

std::vector<Patch> cylinder_patches(double radius, double height) {
  Patch side{2.0 * kPi * radius * height, [=](double u, double v) -> Point3 {
               const double theta = 2.0 * kPi * u;
               return {radius * std::cos(theta), radius * std::sin(theta), height * (v - 0.5)};
             }};
  return {side, disk(Point3(0, 0, -height / 2), radius, 1.0), disk(Point3(0, 0, height / 2), radius, -1.0)};
}

/// Inverse of F(phi) = (R phi + r sin phi) / (2 pi R) on [0, 2 pi).
double torus_minor_angle(double target, double major, double minor) {
  double lo = 0.0, hi = 2.0 * kPi;
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double f = (major * mid + minor * std::sin(mid)) / (2.0 * kPi * major);
    (f < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<Patch> torus_patches(double major, double minor) {
  return {{4.0 * kPi * kPi * major * minor, [=](double u, double v) -> Point3 {
             const double theta = 2.0 * kPi * u;
             const double phi = torus_minor_angle(v, major, minor);
             const double ring = major + minor * std::cos(phi);
             return {ring * std::cos(theta), ring * std::sin(theta), minor * std::sin(phi)};
           }}};
}

std::vector<Patch> plane_cross_patches(double width_a, double width_b, double height) {
  return {
      rectangle(Point3(-width_a / 2, 0, -height / 2), Point3(width_a, 0, 0), Point3(0, 0, height)),
      rectangle(Point3(0, -width_b / 2, -height / 2), Point3(0, width_b, 0), Point3(0, 0, height)),
  };
}

std::vector<Patch> cone_patches(double radius, double height) {
  const double slant = std::hypot(radius, height);
  Patch side{kPi * radius * slant, [=](double u, double v) -> Point3 {
               const double t = std::sqrt(u);  // fraction of the way from apex to rim
               const double theta = 2.0 * kPi * v;
               return {t * radius * std::cos(theta), t * radius * std::sin(theta), height / 2 - t * height};
             }};
  return {side, disk(Point3(0, 0, -height / 2), radius, 1.0)};
}

/// Split n points over patches proportionally to area (largest remainder),
/// giving every patch at least one point.
std::vector<Index> allocate(const std::vector<Patch>& patches, Index n) {
  double total = 0.0;
  for (const auto& p : patches) total += p.area;
  const auto count = static_cast<Index>(patches.size());
  std::vector<Index> alloc(patches.size(), 1);
  Index remaining = n - count;
  std::vector<std::pair<double, Index>> remainders;
  Index assigned = 0;
  for (Index i = 0; i < count; ++i) {
    const double exact = static_cast<double>(remaining) * patches[i].area / total;
    const auto whole = static_cast<Index>(std::floor(exact));
    alloc[i] += whole;
    assigned += whole;
    remainders.emplace_back(exact - static_cast<double>(whole), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (Index i = 0; i < remaining - assigned; ++i) ++alloc[remainders[i].second];
  return alloc;
}

}  // namespace

const std::vector<ShapeClass>& shape_classes() {
  static const std::vector<ShapeClass> classes = {
      {0, "sphere"}, {1, "box"}, {2, "torus"}, {3, "cylinder"}, {4, "plane-cross"}, {5, "cone"},
  };
  return classes;
}

const ShapeClass& shape_class(int id) {
  const auto& all = shape_classes();
  if (id < 0 || id >= static_cast<int>(all.size())) {
    throw InvalidInput("unknown shape class id " + std::to_string(id));
  }
  return all[id];
}

const ShapeClass& shape_class(std::string_view name) {
  for (const auto& c : shape_classes()) {
    if (c.name == name) return c;
  }
  throw InvalidInput("unknown shape class '" + std::string(name) + "'");
}

PointCloud::PointCloud(Points points, std::optional<int> label)
    : points_(std::move(points)), label_(label) {
  if (points_.rows() < 1) throw InvalidInput("point cloud must contain at least one point");
  if (!all_finite(points_)) throw InvalidInput("point cloud contains a non-finite coordinate");
}

PointCloud PointCloud::subset(const std::vector<Index>& ids) const {
  Points out(static_cast<Index>(ids.size()), 3);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= size()) throw InvalidInput("subset: point id out of range");
    out.row(static_cast<Index>(i)) = points_.row(ids[i]);
  }
  return PointCloud(std::move(out), label_);
}

PointCloud normalize_unit_cube(const PointCloud& cloud) {
  return PointCloud(normalize_unit_cube(cloud.points()), cloud.label());
}

PointCloud generate_shape(int class_id, Index n, Seed seed) {
  const ShapeClass& cls = shape_class(class_id);
  if (n < 8) throw InvalidInput("generate_shape: need at least 8 points");

  std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(class_id) + 1)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto jitter = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  std::vector<Patch> patches;
  if (cls.name == "sphere") {
    patches = sphere_patches();
  } else if (cls.name == "box") {
    patches = box_patches(1.0, jitter(0.35, 1.0), jitter(0.35, 1.0));
  } else if (cls.name == "torus") {
    patches = torus_patches(1.0, jitter(0.2, 0.45));
  } else if (cls.name == "cylinder") {
    patches = cylinder_patches(jitter(0.15, 0.35), 1.0);
  } else if (cls.name == "plane-cross") {
    patches = plane_cross_patches(jitter(0.5, 1.0), jitter(0.5, 1.0), 1.0);
  } else {
    patches = cone_patches(jitter(0.3, 0.5), 1.0);
  }

  // R2 low-discrepancy sequence with a per-seed Cranley-Patterson shift.
  constexpr double plastic = 1.32471795724474602596;
  constexpr double a1 = 1.0 / plastic;
  constexpr double a2 = 1.0 / (plastic * plastic);

  const std::vector<Index> counts = allocate(patches, n);
  Points points(n, 3);
  Index row = 0;
  for (std::size_t p = 0; p < patches.size(); ++p) {
    const double su = unit(rng);
    const double sv = unit(rng);
    for (Index i = 0; i < counts[p]; ++i) {
      const double k = static_cast<double>(i) + 0.5;
      const double u = std::fmod(su + k * a1, 1.0);
      const double v = std::fmod(sv + k * a2, 1.0);
      points.row(row++) = patches[p].map(u, v);
    }
  }
  return PointCloud(normalize_unit_cube(points), class_id);
}

}  // namespace pcadv
