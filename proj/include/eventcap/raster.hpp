#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "eventcap/body_model.hpp"

namespace eventcap {

/// Depth-buffer rasterization of a posed mesh in camera coordinates. Pixel centers
/// sit at integer coordinates. Faces touching the near plane are skipped.
class DepthRaster {
 public:
  DepthRaster(std::span<const Vec3> camera_vertices, std::span<const std::array<int, 3>> faces,
              const CameraIntrinsics& camera);

  const SensorSize& sensor() const { return sensor_; }
  /// Face covering the pixel, or -1 for background.
  int face(int x, int y) const { return faces_at_[index(x, y)]; }
  double depth(int x, int y) const { return depth_[index(x, y)]; }
  bool foreground(int x, int y) const { return sensor_.contains(x, y) && face(x, y) >= 0; }
  std::size_t covered_pixels() const;

  /// Perspective-correct barycentric coordinates of a (sub)pixel location inside
  /// `face`, clamped onto the triangle.
  Vec3 barycentric(int face, const Vec2& pixel) const;
  const Vec2& projected(int vertex) const { return projected_[static_cast<std::size_t>(vertex)]; }

 private:
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * sensor_.width + x; }

  SensorSize sensor_;
  std::span<const Vec3> vertices_;
  std::span<const std::array<int, 3>> faces_;
  std::vector<Vec2> projected_;
  std::vector<int> faces_at_;
  std::vector<double> depth_;
};

}  // namespace eventcap
