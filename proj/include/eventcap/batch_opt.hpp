#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "eventcap/body_model.hpp"
#include "eventcap/solver.hpp"
#include "eventcap/trajectories.hpp"
#include "json.hpp"

namespace eventcap {

struct Detection2D {
  Vec2 position = Vec2::Zero();  // pixels
  double confidence = 1.0;
  bool present = true;
};

struct Detection3D {
  Vec3 position = Vec3::Zero();  // meters, relative to the root joint
  double confidence = 1.0;
  bool present = true;
};

/// Detector output for one intensity frame: N_J + 4 2D landmarks (joints, then face
/// landmarks) and N_J root-relative 3D joints.
struct DetectionSet {
  TimestampUs t = 0;
  std::vector<Detection2D> joints2d;
  std::vector<Detection3D> joints3d;

  bool any_present() const;
  /// Throws DomainError on wrong sizes, non-finite values or confidences outside [0, 1].
  void validate(const SkeletonModel& model) const;
};

// Detections file: JSON array, one object per intensity frame:
// {"t_us": int, "joints2d": [{"x","y","c"} | null, ...], "joints3d": [{"x","y","z","c"} | null, ...]}
// Entries are ordered like detection_layout(); null marks a missing entry.
std::vector<DetectionSet> read_detections(const std::filesystem::path& path, const SkeletonModel& model);
void write_detections(const std::filesystem::path& path, std::span<const DetectionSet> detections);
nlohmann::json detection_layout(const SkeletonModel& model);

struct EnergyWeights {
  double lambda_adj = 50.0;
  double lambda_2d = 200.0;
  double lambda_3d = 1.0;
  double lambda_temp = 80.0;

  void validate() const;
};

/// All tracking-frame poses and measurements between two adjacent intensity frames.
struct Batch {
  int index = 0;
  std::vector<TimestampUs> frame_timestamps;  // N + 1, evenly spaced
  std::vector<SkeletonPose> poses;            // N + 1
  std::vector<CorrespondenceSet> correspondences;
  std::optional<DetectionSet> detections_begin;
  std::optional<DetectionSet> detections_end;
  Vec3 aux_translation = Vec3::Zero();        // t'
  /// Previous batch's terminal pose; pulls S_0 when the start detections are missing.
  std::optional<SkeletonPose> prior_pose;

  int n() const { return static_cast<int>(poses.size()) - 1; }
};

// Residual vectors. Confidence c scales a residual by sqrt(c) and a correspondence
// weight w by sqrt(w), so each squared norm is the corresponding energy term
// before its lambda.

/// pi(v_h(S_j)) - p_{j,h} for every correspondence with a valid anchor. Anchors
/// behind the camera are skipped and counted in `dropped`.
Eigen::VectorXd residual_event_correspondence(const Batch& batch, const ModelBundle& body,
                                              int* dropped = nullptr);
/// pi(J_l(S)) - P2D_l over present 2D detections.
Eigen::VectorXd residual_2d(const ModelBundle& body, const SkeletonPose& pose,
                            const DetectionSet& detections);
/// J_l(S) - (P3D_l + t') over present 3D detections, in millimeters.
Eigen::VectorXd residual_3d(const SkeletonModel& model, const SkeletonPose& pose,
                            const DetectionSet& detections, const Vec3& t_prime);
/// J_l(S_i) - J_l(S_{i+1}) in millimeters for i = 0..N-1 and every joint with flagged[l].
Eigen::VectorXd residual_temporal(const Batch& batch, const SkeletonModel& model,
                                  const std::vector<bool>& flagged);

/// phi(l): true for joints not associated with any valid anchor. A joint is
/// associated when it is an anchor's dominant skinning joint or a child of it.
std::vector<bool> compute_phi(const ModelBundle& body, std::span<const SurfaceAnchor> anchors);
/// Anchors carried by the batch's correspondence pairs (one per distinct feature).
std::vector<SurfaceAnchor> batch_anchors(const Batch& batch);

/// lambda_adj*E_adj + lambda_2D*E_2D + lambda_3D*E_3D + lambda_temp*E_temp (+ the
/// previous-pose prior when the start detections are missing).
double batch_energy(const Batch& batch, const ModelBundle& body, const EnergyWeights& weights,
                    const std::vector<bool>& flagged);

/// Least-squares problem over x = [S_0, ..., S_N, t'].
struct BatchProblem {
  std::vector<ResidualBlock> blocks;
  Eigen::VectorXd x0;
  BoundsSpec bounds;
};
BatchProblem build_batch_problem(const Batch& batch, const ModelBundle& body,
                                 const EnergyWeights& weights, const std::vector<bool>& flagged);
/// Writes x back into batch.poses and batch.aux_translation.
void unpack_batch(const Eigen::VectorXd& x, Batch& batch);

struct BatchInit {
  std::vector<SkeletonPose> poses;
  Vec3 t_prime = Vec3::Zero();
  bool reliable = true;
  SolverReport report;
};

/// Rough pose from one detection set: rest posture facing the camera, root placed
/// by back-projecting the 2D root at a depth from the 2D/3D extent ratio.
SkeletonPose guess_pose(const ModelBundle& body, const DetectionSet& detections);

/// Endpoint poses from E_2D + E_3D alone, then per-parameter linear interpolation in
/// time for the interior frames. A missing endpoint drops its detection terms; a
/// missing start leans on `previous_terminal`. When the endpoint solve fails or
/// ends with a mean reprojection error above `max_reprojection_px`, the result is
/// flagged unreliable and S_0 is replaced by `previous_terminal` if given.
BatchInit initialize_batch(const DetectionSet* begin, const DetectionSet* end,
                           std::span<const TimestampUs> frame_timestamps, const ModelBundle& body,
                           const EnergyWeights& weights,
                           const std::optional<SkeletonPose>& previous_terminal,
                           double max_reprojection_px = 15.0);

struct BatchReport {
  SolverReport solver;
  int dropped_correspondences = 0;  // anchors behind the camera at the final poses
  int correspondence_count = 0;
  int flagged_joints = 0;
};

/// Minimizes the batch energy from the batch's current poses; poses stay in bounds.
BatchReport optimize_batch(Batch& batch, const ModelBundle& body, const EnergyWeights& weights,
                           const SolverOptions& options = {});

/// Mean pixel distance between projected model landmarks and present 2D detections.
double mean_reprojection_error(const ModelBundle& body, const SkeletonPose& pose,
                               const DetectionSet& detections);

}  // namespace eventcap
