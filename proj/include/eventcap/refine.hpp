#pragma once

#include <optional>
#include <span>
#include <vector>

#include "eventcap/body_model.hpp"
#include "eventcap/event_core.hpp"
#include "eventcap/solver.hpp"
#include "eventcap/trajectories.hpp"

namespace eventcap {

/// Silhouette pixel of the projected mesh with its outward 2D normal and the
/// surface point it back-projects to.
struct BoundaryPixel {
  Vec2 position = Vec2::Zero();  // s_b, integer pixel center
  Vec2 normal = Vec2::UnitX();   // n_b, unit length, pointing out of the silhouette
  SurfaceAnchor anchor;          // v_b
};

struct RefineWeights {
  double lambda_sil = 1.0;
  double lambda_stab = 5.0;
  double lambda_dist = 4.0;
  int icp_iterations = 4;
  int patch_size = 8;
  int solver_iterations = 20;

  void validate() const;
};

/// Foreground pixels with a background 4-neighbor in the depth-buffer silhouette.
/// Normals follow the gradient of the Gaussian-smoothed (sigma = 1 px) signed
/// distance to the silhouette. Empty when the mesh misses the sensor.
std::vector<BoundaryPixel> extract_boundary(const ModelBundle& body, const SkeletonPose& pose);

struct ClosestEvent {
  Event event;
  double distance = 0.0;  // D(s_b, e)
};

/// argmin over events in the patch [x - P/2, x + P/2) x [y - P/2, y + P/2) around s_b
/// and the window [t_f - d/2, t_f + d/2] (d = batch duration) of
/// D = lambda_dist * ((t_f - t) / d)^2 + |s_b - u|^2. Ties go to the earlier
/// timestamp, then to row-major pixel order.
std::optional<ClosestEvent> closest_event(const Vec2& s_b, const PixelEventIndex& index, TimestampUs t_f,
                                          TimestampUs batch_duration, const RefineWeights& weights);

struct BoundaryPair {
  BoundaryPixel boundary;
  Vec2 target = Vec2::Zero();  // u_b
};

/// n_b^T (pi(v_b(S)) - u_b) per pair; pairs whose anchor falls behind the camera give 0.
Eigen::VectorXd residual_silhouette(const ModelBundle& body, const SkeletonPose& pose,
                                    std::span<const BoundaryPair> pairs,
                                    Eigen::MatrixXd* jacobian = nullptr);
/// J_l(S) - J_l(S_hat) for every joint, in centimeters.
Eigen::VectorXd residual_stability(const SkeletonModel& model, const SkeletonPose& pose,
                                   const SkeletonPose& anchor_pose);

struct RefineResult {
  SkeletonPose pose;
  bool no_op = false;                 // empty boundary or no event pairs
  std::vector<double> e_sil_before;   // per ICP iteration, at the start pose with its pairs
  std::vector<double> e_sil_after;    // per ICP iteration, after the solve
  std::vector<int> pair_counts;
  bool solver_monotone = true;        // every inner solve had a non-increasing cost trace
};

/// ICP: icp_iterations rounds of boundary extraction, closest-event pairing and
/// minimization of lambda_sil * E_sil + lambda_stab * E_stab (E_stab anchored at
/// pose_hat). Returns pose_hat unchanged, flagged, if no pairs are found.
RefineResult refine_pose(const SkeletonPose& pose_hat, const PixelEventIndex& index, TimestampUs t_f,
                         TimestampUs batch_duration, const ModelBundle& body,
                         const RefineWeights& weights);

}  // namespace eventcap
