#include "eventcap/raster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace eventcap {
namespace {

constexpr double kNearPlane = 1e-3;

double edge(const Vec2& a, const Vec2& b, const Vec2& p) {
  return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

}  // namespace

DepthRaster::DepthRaster(std::span<const Vec3> camera_vertices,
                         std::span<const std::array<int, 3>> faces, const CameraIntrinsics& camera)
    : sensor_(camera.sensor), vertices_(camera_vertices), faces_(faces) {
  projected_.resize(camera_vertices.size());
  for (std::size_t i = 0; i < camera_vertices.size(); ++i) {
    const Vec3& v = camera_vertices[i];
    projected_[i] = v.z() > kNearPlane
                        ? Vec2(camera.fx * v.x() / v.z() + camera.cx, camera.fy * v.y() / v.z() + camera.cy)
                        : Vec2(std::numeric_limits<double>::quiet_NaN(), 0.0);
  }
  faces_at_.assign(sensor_.pixel_count(), -1);
  depth_.assign(sensor_.pixel_count(), std::numeric_limits<double>::infinity());

  for (std::size_t f = 0; f < faces.size(); ++f) {
    const auto& tri = faces[f];
    const Vec3& va = camera_vertices[static_cast<std::size_t>(tri[0])];
    const Vec3& vb = camera_vertices[static_cast<std::size_t>(tri[1])];
    const Vec3& vc = camera_vertices[static_cast<std::size_t>(tri[2])];
    if (va.z() <= kNearPlane || vb.z() <= kNearPlane || vc.z() <= kNearPlane) continue;
    const Vec2& a = projected_[static_cast<std::size_t>(tri[0])];
    const Vec2& b = projected_[static_cast<std::size_t>(tri[1])];
    const Vec2& c = projected_[static_cast<std::size_t>(tri[2])];
    const double area = edge(a, b, c);
    if (std::abs(area) < 1e-12) continue;
    const int x0 = std::max(0, static_cast<int>(std::ceil(std::min({a.x(), b.x(), c.x()}))));
    const int x1 = std::min(sensor_.width - 1, static_cast<int>(std::floor(std::max({a.x(), b.x(), c.x()}))));
    const int y0 = std::max(0, static_cast<int>(std::ceil(std::min({a.y(), b.y(), c.y()}))));
    const int y1 = std::min(sensor_.height - 1, static_cast<int>(std::floor(std::max({a.y(), b.y(), c.y()}))));
    const double inv_area = 1.0 / area;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const Vec2 p(x, y);
        const double l0 = edge(b, c, p) * inv_area;
        const double l1 = edge(c, a, p) * inv_area;
        const double l2 = edge(a, b, p) * inv_area;
        if (l0 < 0.0 || l1 < 0.0 || l2 < 0.0) continue;
        const double inv_z = l0 / va.z() + l1 / vb.z() + l2 / vc.z();
        const double z = 1.0 / inv_z;
        const std::size_t i = index(x, y);
        if (z < depth_[i]) {
          depth_[i] = z;
          faces_at_[i] = static_cast<int>(f);
        }
      }
    }
  }
}

std::size_t DepthRaster::covered_pixels() const {
  return static_cast<std::size_t>(std::count_if(faces_at_.begin(), faces_at_.end(), [](int f) { return f >= 0; }));
}

Vec3 DepthRaster::barycentric(int face, const Vec2& pixel) const {
  const auto& tri = faces_[static_cast<std::size_t>(face)];
  const Vec2& a = projected_[static_cast<std::size_t>(tri[0])];
  const Vec2& b = projected_[static_cast<std::size_t>(tri[1])];
  const Vec2& c = projected_[static_cast<std::size_t>(tri[2])];
  const double area = edge(a, b, c);
  Vec3 l(edge(b, c, pixel) / area, edge(c, a, pixel) / area, edge(a, b, pixel) / area);
  l = l.cwiseMax(0.0);
  l /= l.sum();
  const Vec3 persp(l[0] / vertices_[static_cast<std::size_t>(tri[0])].z(),
                   l[1] / vertices_[static_cast<std::size_t>(tri[1])].z(),
                   l[2] / vertices_[static_cast<std::size_t>(tri[2])].z());
  return persp / persp.sum();
}

}  // namespace eventcap
