#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "eventcap/common.hpp"

namespace eventcap {

inline constexpr int kJointAngleDof = 27;
inline constexpr int kPoseParams = kJointAngleDof + 6;  // theta, root axis-angle, root translation
inline constexpr int kFaceLandmarks = 4;

using PoseVector = Eigen::Matrix<double, kPoseParams, 1>;
using PointJacobian = Eigen::Matrix<double, 3, kPoseParams>;

/// One node of the kinematic tree. `axes` are the joint's rotational DOF axes in its
/// local frame, applied in order (each DOF is an angle about one axis).
struct Joint {
  std::string name;
  int parent = -1;
  Vec3 offset = Vec3::Zero();  // rest offset from the parent joint, meters
  std::vector<Vec3> axes;
  int dof_begin = 0;  // filled by SkeletonModel
};

struct FaceLandmark {
  std::string name;
  int joint = 0;
  Vec3 offset = Vec3::Zero();  // in the joint's frame, meters
};

class SkeletonModel {
 public:
  SkeletonModel() = default;

  /// Validates the tree (single root listed first, parents precede children),
  /// the 27-DOF total, the bound ordering and the 4 face landmarks.
  SkeletonModel(std::vector<Joint> joints, Eigen::VectorXd angle_lower,
                Eigen::VectorXd angle_upper, std::vector<FaceLandmark> landmarks);

  int joint_count() const { return static_cast<int>(joints_.size()); }
  /// Joints followed by face landmarks (N_J + 4).
  int landmark_count() const { return joint_count() + kFaceLandmarks; }
  const Joint& joint(int j) const { return joints_[static_cast<std::size_t>(j)]; }
  const std::vector<Joint>& joints() const { return joints_; }
  const std::vector<FaceLandmark>& face_landmarks() const { return landmarks_; }
  const Eigen::VectorXd& angle_lower() const { return lower_; }
  const Eigen::VectorXd& angle_upper() const { return upper_; }
  const std::vector<int>& children(int j) const { return children_[static_cast<std::size_t>(j)]; }
  int dof_joint(int dof) const { return dof_joint_[static_cast<std::size_t>(dof)]; }
  int joint_index(const std::string& name) const;

  /// True when `ancestor` is `joint` or lies on its path to the root.
  bool moves(int ancestor, int joint) const {
    return (ancestor_mask_[static_cast<std::size_t>(joint)] >> ancestor) & 1ULL;
  }
  const std::vector<Vec3>& rest_joint_positions() const { return rest_positions_; }

 private:
  std::vector<Joint> joints_;
  Eigen::VectorXd lower_;
  Eigen::VectorXd upper_;
  std::vector<FaceLandmark> landmarks_;
  std::vector<std::vector<int>> children_;
  std::vector<int> dof_joint_;
  std::vector<std::uint64_t> ancestor_mask_;
  std::vector<Vec3> rest_positions_;
};

/// S = [theta, R, t]: 27 joint angles, root axis-angle rotation, root translation.
struct SkeletonPose {
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(kJointAngleDof);
  Vec3 root_rotation = Vec3::Zero();
  Vec3 root_translation = Vec3::Zero();

  PoseVector to_vector() const;
  static SkeletonPose from_vector(const Eigen::Ref<const Eigen::VectorXd>& v);
  bool is_finite() const;
  bool within_bounds(const SkeletonModel& model, double slack = 0.0) const;
};

SkeletonPose clamp_to_bounds(const SkeletonModel& model, SkeletonPose pose);
/// Per-parameter linear blend (1-a)*p + a*q.
SkeletonPose interpolate(const SkeletonPose& p, const SkeletonPose& q, double a);

struct BodyMesh {
  std::vector<Vec3> vertices;                 // rest positions, meters
  std::vector<std::array<int, 3>> faces;
  Eigen::MatrixXd weights;                    // V x N_J, rows sum to 1

  /// Throws DomainError on a bad face index, negative weight or unnormalized row.
  void validate(int joint_count) const;
};

struct CameraIntrinsics {
  double fx = 200.0;
  double fy = 200.0;
  double cx = 119.5;
  double cy = 89.5;
  SensorSize sensor{240, 180};
};

/// Perspective projection. Throws DomainError for points with z <= 0.
Vec2 project(const CameraIntrinsics& k, const Vec3& p);
std::optional<Vec2> try_project(const CameraIntrinsics& k, const Vec3& p);
Eigen::Matrix<double, 2, 3> projection_jacobian(const CameraIntrinsics& k, const Vec3& p);

/// A point carried by one or more joint frames and linearly blended:
/// world = sum_j weight_j * (R_j * local_j + p_j). Joint positions, face landmarks,
/// skinned vertices and barycentric surface points are all of this form.
struct SkinnedPoint {
  struct Influence {
    int joint = 0;
    double weight = 1.0;
    Vec3 local = Vec3::Zero();
  };
  std::vector<Influence> influences;

  /// The joint with the largest weight.
  int dominant_joint() const;
};

SkinnedPoint joint_point(int joint);
/// Landmark l in [0, N_J + 4): joints first, then face landmarks.
SkinnedPoint landmark_point(const SkeletonModel& model, int l);
SkinnedPoint vertex_point(const SkeletonModel& model, const BodyMesh& mesh, int vertex);
SkinnedPoint surface_point(const SkeletonModel& model, const BodyMesh& mesh,
                           const std::array<int, 3>& face_vertices, const Vec3& barycentric);

/// Global joint frames for one pose; evaluates skinned points and their Jacobians
/// with respect to the 33 pose parameters.
class PosedSkeleton {
 public:
  PosedSkeleton(const SkeletonModel& model, const SkeletonPose& pose);

  const Mat3& rotation(int j) const { return rotations_[static_cast<std::size_t>(j)]; }
  const Vec3& position(int j) const { return positions_[static_cast<std::size_t>(j)]; }

  Vec3 point(const SkinnedPoint& p) const;
  PointJacobian jacobian(const SkinnedPoint& p) const;

 private:
  const SkeletonModel* model_;
  Vec3 translation_;
  Mat3 root_left_jacobian_;
  std::vector<Mat3> rotations_;
  std::vector<Vec3> positions_;
  std::vector<Vec3> dof_axes_;  // world-frame axis per DOF
};

/// N_J joint positions followed by the 4 face landmarks.
std::vector<Vec3> forward_kinematics(const SkeletonModel& model, const SkeletonPose& pose);
std::vector<Vec3> skin_vertices(const SkeletonModel& model, const BodyMesh& mesh,
                                const SkeletonPose& pose);

/// d(position)/d(pose parameters) for a landmark, a vertex or a barycentric surface point.
struct PoseQuery {
  enum class Kind { kLandmark, kVertex, kSurface } kind = Kind::kLandmark;
  int index = 0;                      // landmark or vertex id
  std::array<int, 3> face{0, 0, 0};   // for kSurface
  Vec3 barycentric = Vec3::Zero();
};
PointJacobian pose_jacobians(const SkeletonModel& model, const BodyMesh& mesh,
                             const SkeletonPose& pose, const PoseQuery& query);

Mat3 axis_angle_to_matrix(const Vec3& w);
Vec3 matrix_to_axis_angle(const Mat3& r);
Mat3 skew(const Vec3& v);

// Shipped default body: a 17-joint, 27-DOF skeleton with capsule limbs, and a
// 240x180 camera looking down +z (y down).
SkeletonModel default_skeleton();
BodyMesh default_body_mesh(const SkeletonModel& model);
CameraIntrinsics default_intrinsics();

struct ModelBundle {
  SkeletonModel skeleton;
  BodyMesh mesh;
  CameraIntrinsics camera;
};

ModelBundle default_model_bundle();
void save_model_file(const std::filesystem::path& path, const ModelBundle& bundle);
ModelBundle load_model_file(const std::filesystem::path& path);

}  // namespace eventcap
