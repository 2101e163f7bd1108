#pragma once

// Independent evaluations of the energy terms and the closest-event search, written
// from the formulas with skinned vertices and a scalar pinhole rather than the
// library's SkinnedPoint and Jacobian machinery. Shared by the unit tests and the
// acceptance run.

#include <cmath>
#include <optional>
#include <tuple>
#include <vector>

#include "eventcap/batch_opt.hpp"
#include "eventcap/refine.hpp"

namespace eventcap::oracle {

inline Vec2 pinhole(const CameraIntrinsics& k, const Vec3& p) {
  return Vec2(k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy);
}

inline Vec3 anchor_position(const std::vector<Vec3>& skinned, const SurfaceAnchor& a) {
  Vec3 p = Vec3::Zero();
  for (int k = 0; k < 3; ++k) p += a.barycentric[k] * skinned[static_cast<std::size_t>(a.vertices[k])];
  return p;
}

inline std::vector<double> event_correspondence(const Batch& batch, const ModelBundle& body) {
  std::vector<double> out;
  for (const CorrespondenceSet& set : batch.correspondences) {
    const auto verts = skin_vertices(body.skeleton, body.mesh, batch.poses[static_cast<std::size_t>(set.neighbor)]);
    for (const CorrespondencePair& p : set.pairs) {
      if (!p.anchor.valid) continue;
      const Vec2 r = std::sqrt(p.weight) * (pinhole(body.camera, anchor_position(verts, p.anchor)) - p.p_neighbor);
      out.push_back(r.x());
      out.push_back(r.y());
    }
  }
  return out;
}

inline std::vector<double> detections_2d(const ModelBundle& body, const SkeletonPose& pose, const DetectionSet& d) {
  const auto lm = forward_kinematics(body.skeleton, pose);
  std::vector<double> out;
  for (std::size_t l = 0; l < d.joints2d.size(); ++l) {
    if (!d.joints2d[l].present) continue;
    const Vec2 r = std::sqrt(d.joints2d[l].confidence) * (pinhole(body.camera, lm[l]) - d.joints2d[l].position);
    out.push_back(r.x());
    out.push_back(r.y());
  }
  return out;
}

// Millimeters.
inline std::vector<double> detections_3d(const SkeletonModel& m, const SkeletonPose& pose, const DetectionSet& d,
                                         const Vec3& t_prime) {
  const auto lm = forward_kinematics(m, pose);
  std::vector<double> out;
  for (std::size_t l = 0; l < d.joints3d.size(); ++l) {
    if (!d.joints3d[l].present) continue;
    const Vec3 r = 1000.0 * std::sqrt(d.joints3d[l].confidence) * (lm[l] - d.joints3d[l].position - t_prime);
    out.insert(out.end(), {r.x(), r.y(), r.z()});
  }
  return out;
}

// Millimeters.
inline std::vector<double> temporal(const Batch& batch, const SkeletonModel& m, const std::vector<bool>& flagged) {
  std::vector<double> out;
  for (int i = 0; i < batch.n(); ++i) {
    const auto a = forward_kinematics(m, batch.poses[static_cast<std::size_t>(i)]);
    const auto b = forward_kinematics(m, batch.poses[static_cast<std::size_t>(i + 1)]);
    for (std::size_t l = 0; l < flagged.size(); ++l) {
      if (!flagged[l]) continue;
      const Vec3 r = 1000.0 * (a[l] - b[l]);
      out.insert(out.end(), {r.x(), r.y(), r.z()});
    }
  }
  return out;
}

inline std::vector<double> silhouette(const ModelBundle& body, const SkeletonPose& pose,
                                      const std::vector<BoundaryPair>& pairs) {
  const auto verts = skin_vertices(body.skeleton, body.mesh, pose);
  std::vector<double> out;
  for (const BoundaryPair& p : pairs) {
    const Vec2 uv = pinhole(body.camera, anchor_position(verts, p.boundary.anchor));
    out.push_back(p.boundary.normal.x() * (uv.x() - p.target.x()) + p.boundary.normal.y() * (uv.y() - p.target.y()));
  }
  return out;
}

// Centimeters.
inline std::vector<double> stability(const SkeletonModel& m, const SkeletonPose& pose, const SkeletonPose& hat) {
  const auto a = forward_kinematics(m, pose);
  const auto b = forward_kinematics(m, hat);
  std::vector<double> out;
  for (int l = 0; l < m.joint_count(); ++l) {
    const Vec3 r = 100.0 * (a[static_cast<std::size_t>(l)] - b[static_cast<std::size_t>(l)]);
    out.insert(out.end(), {r.x(), r.y(), r.z()});
  }
  return out;
}

/// Exhaustive scan over every event; ties by timestamp, then row, then column.
inline std::optional<ClosestEvent> closest_event(const EventStream& stream, const Vec2& s_b, TimestampUs t_f,
                                                 TimestampUs d, const RefineWeights& w) {
  const int cx = static_cast<int>(std::lround(s_b.x()));
  const int cy = static_cast<int>(std::lround(s_b.y()));
  const int lo_x = cx - w.patch_size / 2, lo_y = cy - w.patch_size / 2;
  std::optional<ClosestEvent> best;
  for (const Event& e : stream.events()) {
    if (e.x < lo_x || e.x >= lo_x + w.patch_size || e.y < lo_y || e.y >= lo_y + w.patch_size) continue;
    if (2 * std::abs(e.t - t_f) > d) continue;
    const double dt = static_cast<double>(t_f - e.t) / static_cast<double>(d);
    const double dx = s_b.x() - e.x, dy = s_b.y() - e.y;
    const double dist = w.lambda_dist * dt * dt + (dx * dx + dy * dy);
    if (!best || std::tie(dist, e.t, e.y, e.x) <
                     std::tie(best->distance, best->event.t, best->event.y, best->event.x)) {
      best = ClosestEvent{e, dist};
    }
  }
  return best;
}

inline double max_relative_gap(const Eigen::VectorXd& got, const std::vector<double>& want) {
  if (got.size() != static_cast<Eigen::Index>(want.size())) return INFINITY;
  double worst = 0.0;
  for (std::size_t k = 0; k < want.size(); ++k) {
    worst = std::max(worst, std::abs(got[static_cast<Eigen::Index>(k)] - want[k]) / std::max(1.0, std::abs(want[k])));
  }
  return worst;
}

}  // namespace eventcap::oracle
