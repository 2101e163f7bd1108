#include "eventcap/body_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <Eigen/Geometry>

#include "json.hpp"

namespace eventcap {

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

Mat3 axis_angle_to_matrix(const Vec3& w) {
  const double angle = w.norm();
  if (angle < 1e-12) return Mat3::Identity() + skew(w);
  return Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
}

Vec3 matrix_to_axis_angle(const Mat3& r) {
  const Eigen::AngleAxisd aa(r);
  return aa.axis() * aa.angle();
}

namespace {

// Left Jacobian of SO(3): Exp(w + d) ~ Exp(J_l(w) d) Exp(w).
Mat3 left_jacobian(const Vec3& w) {
  const double a = w.norm();
  const Mat3 k = skew(w);
  if (a < 1e-6) return Mat3::Identity() + 0.5 * k + (1.0 / 6.0) * k * k;
  const double a2 = a * a;
  return Mat3::Identity() + ((1.0 - std::cos(a)) / a2) * k + ((a - std::sin(a)) / (a2 * a)) * k * k;
}

}  // namespace

SkeletonModel::SkeletonModel(std::vector<Joint> joints, Eigen::VectorXd angle_lower,
                             Eigen::VectorXd angle_upper, std::vector<FaceLandmark> landmarks)
    : joints_(std::move(joints)),
      lower_(std::move(angle_lower)),
      upper_(std::move(angle_upper)),
      landmarks_(std::move(landmarks)) {
  if (joints_.empty() || joints_.size() > 64) throw DomainError("skeleton: need 1..64 joints");
  if (joints_[0].parent != -1) throw DomainError("skeleton: joint 0 must be the root");
  int dof = 0;
  children_.assign(joints_.size(), {});
  ancestor_mask_.assign(joints_.size(), 0);
  rest_positions_.assign(joints_.size(), Vec3::Zero());
  for (std::size_t j = 0; j < joints_.size(); ++j) {
    Joint& joint = joints_[j];
    if (j > 0 && (joint.parent < 0 || joint.parent >= static_cast<int>(j))) {
      throw DomainError("skeleton: joint '" + joint.name + "' must have an earlier parent");
    }
    joint.dof_begin = dof;
    for (Vec3& axis : joint.axes) {
      if (!(axis.norm() > 0.0)) throw DomainError("skeleton: zero DOF axis on " + joint.name);
      axis.normalize();
      dof_joint_.push_back(static_cast<int>(j));
    }
    dof += static_cast<int>(joint.axes.size());
    ancestor_mask_[j] = 1ULL << j;
    if (joint.parent >= 0) {
      children_[static_cast<std::size_t>(joint.parent)].push_back(static_cast<int>(j));
      ancestor_mask_[j] |= ancestor_mask_[static_cast<std::size_t>(joint.parent)];
      rest_positions_[j] = rest_positions_[static_cast<std::size_t>(joint.parent)] + joint.offset;
    } else {
      rest_positions_[j] = joint.offset;
    }
  }
  if (dof != kJointAngleDof) {
    throw DomainError("skeleton: total angular DOF is " + std::to_string(dof) + ", expected 27");
  }
  if (lower_.size() != kJointAngleDof || upper_.size() != kJointAngleDof) {
    throw DomainError("skeleton: angle bounds must have 27 entries");
  }
  if ((lower_.array() > upper_.array()).any()) throw DomainError("skeleton: lower > upper bound");
  if (landmarks_.size() != kFaceLandmarks) throw DomainError("skeleton: expected 4 face landmarks");
  for (const FaceLandmark& f : landmarks_) {
    if (f.joint < 0 || f.joint >= joint_count()) {
      throw DomainError("skeleton: face landmark '" + f.name + "' has a bad joint");
    }
  }
}

int SkeletonModel::joint_index(const std::string& name) const {
  for (int j = 0; j < joint_count(); ++j) {
    if (joints_[static_cast<std::size_t>(j)].name == name) return j;
  }
  throw DomainError("skeleton: no joint named '" + name + "'");
}

PoseVector SkeletonPose::to_vector() const {
  PoseVector v;
  v.head<kJointAngleDof>() = theta;
  v.segment<3>(kJointAngleDof) = root_rotation;
  v.segment<3>(kJointAngleDof + 3) = root_translation;
  return v;
}

SkeletonPose SkeletonPose::from_vector(const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (v.size() != kPoseParams) throw DomainError("pose vector must have 33 entries");
  SkeletonPose p;
  p.theta = v.head<kJointAngleDof>();
  p.root_rotation = v.segment<3>(kJointAngleDof);
  p.root_translation = v.segment<3>(kJointAngleDof + 3);
  return p;
}

bool SkeletonPose::is_finite() const {
  return theta.allFinite() && root_rotation.allFinite() && root_translation.allFinite();
}

bool SkeletonPose::within_bounds(const SkeletonModel& model, double slack) const {
  return (theta.array() >= model.angle_lower().array() - slack).all() &&
         (theta.array() <= model.angle_upper().array() + slack).all();
}

SkeletonPose clamp_to_bounds(const SkeletonModel& model, SkeletonPose pose) {
  pose.theta = pose.theta.cwiseMax(model.angle_lower()).cwiseMin(model.angle_upper());
  return pose;
}

SkeletonPose interpolate(const SkeletonPose& p, const SkeletonPose& q, double a) {
  return SkeletonPose::from_vector((1.0 - a) * p.to_vector() + a * q.to_vector());
}

void BodyMesh::validate(int joint_count) const {
  const auto v = static_cast<int>(vertices.size());
  if (weights.rows() != v || weights.cols() != joint_count) {
    throw DomainError("mesh: weight matrix must be V x N_J");
  }
  for (const auto& f : faces) {
    for (int i : f) {
      if (i < 0 || i >= v) throw DomainError("mesh: face references a missing vertex");
    }
  }
  for (int r = 0; r < v; ++r) {
    if ((weights.row(r).array() < 0.0).any()) throw DomainError("mesh: negative skinning weight");
    if (std::abs(weights.row(r).sum() - 1.0) > 1e-6) {
      throw DomainError("mesh: skinning weights of vertex " + std::to_string(r) +
                        " do not sum to 1");
    }
  }
}

Vec2 project(const CameraIntrinsics& k, const Vec3& p) {
  if (!(p.z() > 0.0)) throw DomainError("project: point behind the camera");
  return {k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy};
}

std::optional<Vec2> try_project(const CameraIntrinsics& k, const Vec3& p) {
  if (!(p.z() > 0.0)) return std::nullopt;
  return Vec2{k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy};
}

Eigen::Matrix<double, 2, 3> projection_jacobian(const CameraIntrinsics& k, const Vec3& p) {
  const double iz = 1.0 / p.z();
  Eigen::Matrix<double, 2, 3> j;
  j << k.fx * iz, 0.0, -k.fx * p.x() * iz * iz, 0.0, k.fy * iz, -k.fy * p.y() * iz * iz;
  return j;
}

int SkinnedPoint::dominant_joint() const {
  int best = influences.empty() ? 0 : influences.front().joint;
  double w = -1.0;
  for (const Influence& inf : influences) {
    if (inf.weight > w) {
      w = inf.weight;
      best = inf.joint;
    }
  }
  return best;
}

SkinnedPoint joint_point(int joint) { return SkinnedPoint{{{joint, 1.0, Vec3::Zero()}}}; }

SkinnedPoint landmark_point(const SkeletonModel& model, int l) {
  if (l < 0 || l >= model.landmark_count()) throw DomainError("landmark index out of range");
  if (l < model.joint_count()) return joint_point(l);
  const FaceLandmark& f = model.face_landmarks()[static_cast<std::size_t>(l - model.joint_count())];
  return SkinnedPoint{{{f.joint, 1.0, f.offset}}};
}

SkinnedPoint vertex_point(const SkeletonModel& model, const BodyMesh& mesh, int vertex) {
  SkinnedPoint p;
  const Vec3& v = mesh.vertices[static_cast<std::size_t>(vertex)];
  for (int j = 0; j < model.joint_count(); ++j) {
    const double w = mesh.weights(vertex, j);
    if (w > 0.0) p.influences.push_back({j, w, v - model.rest_joint_positions()[static_cast<std::size_t>(j)]});
  }
  return p;
}

SkinnedPoint surface_point(const SkeletonModel& model, const BodyMesh& mesh,
                           const std::array<int, 3>& face_vertices, const Vec3& barycentric) {
  SkinnedPoint p;
  for (int j = 0; j < model.joint_count(); ++j) {
    double weight = 0.0;
    Vec3 rest = Vec3::Zero();
    for (int c = 0; c < 3; ++c) {
      const int v = face_vertices[static_cast<std::size_t>(c)];
      const double w = barycentric[c] * mesh.weights(v, j);
      weight += w;
      rest += w * mesh.vertices[static_cast<std::size_t>(v)];
    }
    if (weight > 0.0) {
      p.influences.push_back(
          {j, weight, rest / weight - model.rest_joint_positions()[static_cast<std::size_t>(j)]});
    }
  }
  return p;
}

PosedSkeleton::PosedSkeleton(const SkeletonModel& model, const SkeletonPose& pose)
    : model_(&model),
      translation_(pose.root_translation),
      root_left_jacobian_(left_jacobian(pose.root_rotation)) {
  const int nj = model.joint_count();
  rotations_.resize(static_cast<std::size_t>(nj));
  positions_.resize(static_cast<std::size_t>(nj));
  dof_axes_.resize(kJointAngleDof);
  const Mat3 root_rot = axis_angle_to_matrix(pose.root_rotation);
  for (int j = 0; j < nj; ++j) {
    const Joint& joint = model.joint(j);
    Mat3 r;
    Vec3 p;
    if (joint.parent < 0) {
      r = root_rot;
      p = root_rot * joint.offset + pose.root_translation;
    } else {
      const auto parent = static_cast<std::size_t>(joint.parent);
      r = rotations_[parent];
      p = rotations_[parent] * joint.offset + positions_[parent];
    }
    for (std::size_t a = 0; a < joint.axes.size(); ++a) {
      const int dof = joint.dof_begin + static_cast<int>(a);
      dof_axes_[static_cast<std::size_t>(dof)] = r * joint.axes[a];
      r = r * Eigen::AngleAxisd(pose.theta[dof], joint.axes[a]).toRotationMatrix();
    }
    rotations_[static_cast<std::size_t>(j)] = r;
    positions_[static_cast<std::size_t>(j)] = p;
  }
}

Vec3 PosedSkeleton::point(const SkinnedPoint& sp) const {
  Vec3 out = Vec3::Zero();
  for (const auto& inf : sp.influences) {
    const auto j = static_cast<std::size_t>(inf.joint);
    out += inf.weight * (rotations_[j] * inf.local + positions_[j]);
  }
  return out;
}

PointJacobian PosedSkeleton::jacobian(const SkinnedPoint& sp) const {
  PointJacobian jac = PointJacobian::Zero();
  const auto n = sp.influences.size();
  // Transformed point per influence, and the blended point relative to the root translation.
  std::array<Vec3, 8> local_q;
  std::vector<Vec3> heap_q;
  Vec3* q = local_q.data();
  if (n > local_q.size()) {
    heap_q.resize(n);
    q = heap_q.data();
  }
  Vec3 blended = Vec3::Zero();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& inf = sp.influences[i];
    const auto j = static_cast<std::size_t>(inf.joint);
    q[i] = rotations_[j] * inf.local + positions_[j];
    blended += inf.weight * q[i];
    total += inf.weight;
  }
  for (int dof = 0; dof < kJointAngleDof; ++dof) {
    const int owner = model_->dof_joint(dof);
    const Vec3& center = positions_[static_cast<std::size_t>(owner)];
    Vec3 moved = Vec3::Zero();
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (model_->moves(owner, sp.influences[i].joint)) {
        moved += sp.influences[i].weight * q[i];
        w += sp.influences[i].weight;
      }
    }
    if (w == 0.0) continue;
    jac.col(dof) = dof_axes_[static_cast<std::size_t>(dof)].cross(moved - w * center);
  }
  jac.block<3, 3>(0, kJointAngleDof) = -skew(blended - total * translation_) * root_left_jacobian_;
  jac.block<3, 3>(0, kJointAngleDof + 3) = total * Mat3::Identity();
  return jac;
}

std::vector<Vec3> forward_kinematics(const SkeletonModel& model, const SkeletonPose& pose) {
  const PosedSkeleton posed(model, pose);
  std::vector<Vec3> out;
  out.reserve(static_cast<std::size_t>(model.landmark_count()));
  for (int l = 0; l < model.landmark_count(); ++l) out.push_back(posed.point(landmark_point(model, l)));
  return out;
}

std::vector<Vec3> skin_vertices(const SkeletonModel& model, const BodyMesh& mesh,
                                const SkeletonPose& pose) {
  const PosedSkeleton posed(model, pose);
  const auto& rest = model.rest_joint_positions();
  const int nj = model.joint_count();
  std::vector<Vec3> out(mesh.vertices.size());
  for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
    Vec3 acc = Vec3::Zero();
    for (int j = 0; j < nj; ++j) {
      const double w = mesh.weights(static_cast<Eigen::Index>(v), j);
      if (w == 0.0) continue;
      const auto ju = static_cast<std::size_t>(j);
      acc += w * (posed.rotation(j) * (mesh.vertices[v] - rest[ju]) + posed.position(j));
    }
    out[v] = acc;
  }
  return out;
}

PointJacobian pose_jacobians(const SkeletonModel& model, const BodyMesh& mesh,
                             const SkeletonPose& pose, const PoseQuery& query) {
  const PosedSkeleton posed(model, pose);
  switch (query.kind) {
    case PoseQuery::Kind::kLandmark:
      return posed.jacobian(landmark_point(model, query.index));
    case PoseQuery::Kind::kVertex:
      return posed.jacobian(vertex_point(model, mesh, query.index));
    case PoseQuery::Kind::kSurface:
      return posed.jacobian(surface_point(model, mesh, query.face, query.barycentric));
  }
  return PointJacobian::Zero();
}

// ---------------------------------------------------------------------------
// Default body.

SkeletonModel default_skeleton() {
  const Vec3 x = Vec3::UnitX();
  const Vec3 y = Vec3::UnitY();
  const Vec3 z = Vec3::UnitZ();
  const std::vector<Vec3> ball{x, y, z};
  const std::vector<Vec3> hinge{x};
  // y points down, z away from the camera; the actor faces -z.
  std::vector<Joint> joints{
      {"pelvis", -1, Vec3(0.0, 0.0, 0.0), {}},
      {"spine", 0, Vec3(0.0, -0.10, 0.0), ball},
      {"chest", 1, Vec3(0.0, -0.25, 0.0), ball},
      {"neck", 2, Vec3(0.0, -0.20, 0.0), ball},
      {"head", 3, Vec3(0.0, -0.12, 0.0), {}},
      {"l_shoulder", 2, Vec3(0.18, -0.17, 0.0), ball},
      {"l_elbow", 5, Vec3(0.0, 0.28, 0.0), hinge},
      {"l_wrist", 6, Vec3(0.0, 0.25, 0.0), {}},
      {"r_shoulder", 2, Vec3(-0.18, -0.17, 0.0), ball},
      {"r_elbow", 8, Vec3(0.0, 0.28, 0.0), hinge},
      {"r_wrist", 9, Vec3(0.0, 0.25, 0.0), {}},
      {"l_hip", 0, Vec3(0.10, 0.05, 0.0), ball},
      {"l_knee", 11, Vec3(0.0, 0.42, 0.0), hinge},
      {"l_ankle", 12, Vec3(0.0, 0.40, 0.0), hinge},
      {"r_hip", 0, Vec3(-0.10, 0.05, 0.0), ball},
      {"r_knee", 14, Vec3(0.0, 0.42, 0.0), hinge},
      {"r_ankle", 15, Vec3(0.0, 0.40, 0.0), hinge},
  };
  // Ranges per DOF in joint order (radians).
  const std::vector<std::pair<double, double>> ranges{
      {-0.6, 0.6}, {-0.6, 0.6}, {-0.4, 0.4},    // spine
      {-0.5, 0.5}, {-0.5, 0.5}, {-0.4, 0.4},    // chest
      {-0.8, 0.8}, {-1.0, 1.0}, {-0.6, 0.6},    // neck
      {-3.0, 1.0}, {-1.5, 1.5}, {-2.8, 0.5},    // l_shoulder
      {-2.6, 0.0},                              // l_elbow
      {-3.0, 1.0}, {-1.5, 1.5}, {-0.5, 2.8},    // r_shoulder
      {-2.6, 0.0},                              // r_elbow
      {-2.0, 0.6}, {-0.8, 0.8}, {-0.8, 0.4},    // l_hip
      {0.0, 2.6},                               // l_knee
      {-0.8, 0.6},                              // l_ankle
      {-2.0, 0.6}, {-0.8, 0.8}, {-0.4, 0.8},    // r_hip
      {0.0, 2.6},                               // r_knee
      {-0.8, 0.6},                              // r_ankle
  };
  Eigen::VectorXd lower(kJointAngleDof);
  Eigen::VectorXd upper(kJointAngleDof);
  for (int i = 0; i < kJointAngleDof; ++i) {
    lower[i] = ranges[static_cast<std::size_t>(i)].first;
    upper[i] = ranges[static_cast<std::size_t>(i)].second;
  }
  std::vector<FaceLandmark> face{
      {"l_eye", 4, Vec3(0.035, -0.02, -0.09)},
      {"r_eye", 4, Vec3(-0.035, -0.02, -0.09)},
      {"l_ear", 4, Vec3(0.09, 0.0, -0.01)},
      {"r_ear", 4, Vec3(-0.09, 0.0, -0.01)},
  };
  return SkeletonModel(std::move(joints), lower, upper, std::move(face));
}

namespace {

struct CapsuleSpec {
  Vec3 a;
  Vec3 b;
  double radius_u;
  double radius_v;
  int driver;       // joint whose frame carries the segment
  int start_blend;  // joint blended in near `a` (-1: none)
  int end_blend;    // joint blended in near `b` (-1: none)
};

void append_capsule(const CapsuleSpec& c, int joint_count, std::vector<Vec3>& verts,
                    std::vector<std::array<int, 3>>& faces, std::vector<Eigen::VectorXd>& weights) {
  constexpr int kAround = 12;
  constexpr double kBlend = 0.2;
  const Vec3 axis = c.b - c.a;
  const double length = axis.norm();
  const Vec3 dir = axis / length;
  Vec3 u = dir.cross(Vec3::UnitZ());
  if (u.norm() < 1e-6) u = dir.cross(Vec3::UnitX());
  u.normalize();
  const Vec3 v = dir.cross(u);
  const int rings = std::max(3, static_cast<int>(std::ceil(length / 0.04)) + 1);

  auto weight_at = [&](double s) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(joint_count);
    double own = 1.0;
    if (s < kBlend && c.start_blend >= 0) {
      own = 0.5 + 0.5 * s / kBlend;
      w[c.start_blend] = 1.0 - own;
    } else if (s > 1.0 - kBlend && c.end_blend >= 0) {
      own = 0.5 + 0.5 * (1.0 - s) / kBlend;
      w[c.end_blend] = 1.0 - own;
    }
    w[c.driver] += own;
    return w;
  };

  const int base = static_cast<int>(verts.size());
  for (int r = 0; r < rings; ++r) {
    const double s = static_cast<double>(r) / (rings - 1);
    for (int k = 0; k < kAround; ++k) {
      const double phi = 2.0 * std::numbers::pi * k / kAround;
      verts.push_back(c.a + s * axis + c.radius_u * std::cos(phi) * u + c.radius_v * std::sin(phi) * v);
      weights.push_back(weight_at(s));
    }
  }
  for (int r = 0; r + 1 < rings; ++r) {
    for (int k = 0; k < kAround; ++k) {
      const int i0 = base + r * kAround + k;
      const int i1 = base + r * kAround + (k + 1) % kAround;
      const int j0 = i0 + kAround;
      const int j1 = i1 + kAround;
      faces.push_back({i0, j0, i1});
      faces.push_back({i1, j0, j1});
    }
  }
  // Rounded caps: a tip vertex beyond each end ring.
  const double cap = 0.7 * std::min(c.radius_u, c.radius_v);
  const int tip_a = static_cast<int>(verts.size());
  verts.push_back(c.a - cap * dir);
  weights.push_back(weight_at(0.0));
  const int tip_b = static_cast<int>(verts.size());
  verts.push_back(c.b + cap * dir);
  weights.push_back(weight_at(1.0));
  const int last = base + (rings - 1) * kAround;
  for (int k = 0; k < kAround; ++k) {
    faces.push_back({tip_a, base + (k + 1) % kAround, base + k});
    faces.push_back({tip_b, last + k, last + (k + 1) % kAround});
  }
}

void append_sphere(const Vec3& center, double radius, int joint, int joint_count,
                   std::vector<Vec3>& verts, std::vector<std::array<int, 3>>& faces,
                   std::vector<Eigen::VectorXd>& weights) {
  constexpr int kRings = 8;
  constexpr int kAround = 14;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(joint_count);
  w[joint] = 1.0;
  const int top = static_cast<int>(verts.size());
  verts.push_back(center - radius * Vec3::UnitY());
  weights.push_back(w);
  for (int r = 1; r < kRings; ++r) {
    const double polar = std::numbers::pi * r / kRings;
    for (int k = 0; k < kAround; ++k) {
      const double phi = 2.0 * std::numbers::pi * k / kAround;
      verts.push_back(center + radius * Vec3(std::sin(polar) * std::cos(phi), -std::cos(polar),
                                             std::sin(polar) * std::sin(phi)));
      weights.push_back(w);
    }
  }
  const int bottom = static_cast<int>(verts.size());
  verts.push_back(center + radius * Vec3::UnitY());
  weights.push_back(w);
  for (int k = 0; k < kAround; ++k) {
    faces.push_back({top, top + 1 + k, top + 1 + (k + 1) % kAround});
  }
  for (int r = 0; r + 2 < kRings; ++r) {
    for (int k = 0; k < kAround; ++k) {
      const int i0 = top + 1 + r * kAround + k;
      const int i1 = top + 1 + r * kAround + (k + 1) % kAround;
      faces.push_back({i0, i0 + kAround, i1});
      faces.push_back({i1, i0 + kAround, i1 + kAround});
    }
  }
  const int last = top + 1 + (kRings - 2) * kAround;
  for (int k = 0; k < kAround; ++k) {
    faces.push_back({bottom, last + (k + 1) % kAround, last + k});
  }
}

}  // namespace

BodyMesh default_body_mesh(const SkeletonModel& model) {
  const auto& rest = model.rest_joint_positions();
  const int nj = model.joint_count();
  auto pos = [&](const char* name) { return rest[static_cast<std::size_t>(model.joint_index(name))]; };
  auto id = [&](const char* name) { return model.joint_index(name); };

  std::vector<CapsuleSpec> capsules{
      {pos("pelvis") + Vec3(0, 0.08, 0), pos("spine"), 0.15, 0.10, id("pelvis"), -1, id("spine")},
      {pos("spine"), pos("chest"), 0.14, 0.095, id("spine"), id("pelvis"), id("chest")},
      {pos("chest"), pos("neck") + Vec3(0, 0.03, 0), 0.16, 0.10, id("chest"), id("spine"), -1},
      {pos("neck"), pos("head"), 0.05, 0.05, id("neck"), id("chest"), id("head")},
  };
  for (const char* side : {"l", "r"}) {
    const std::string s(side);
    const int shoulder = id((s + "_shoulder").c_str());
    const int elbow = id((s + "_elbow").c_str());
    const int wrist = id((s + "_wrist").c_str());
    const int hip = id((s + "_hip").c_str());
    const int knee = id((s + "_knee").c_str());
    const int ankle = id((s + "_ankle").c_str());
    const auto p = [&](int j) { return rest[static_cast<std::size_t>(j)]; };
    capsules.push_back({p(shoulder), p(elbow), 0.05, 0.05, shoulder, id("chest"), elbow});
    capsules.push_back({p(elbow), p(wrist), 0.04, 0.04, elbow, shoulder, wrist});
    capsules.push_back({p(wrist), p(wrist) + Vec3(0, 0.09, 0), 0.035, 0.025, wrist, elbow, -1});
    capsules.push_back({p(hip), p(knee), 0.07, 0.07, hip, id("pelvis"), knee});
    capsules.push_back({p(knee), p(ankle), 0.05, 0.05, knee, hip, ankle});
    capsules.push_back({p(ankle), p(ankle) + Vec3(0, 0.05, -0.15), 0.04, 0.035, ankle, knee, -1});
  }

  std::vector<Vec3> verts;
  std::vector<std::array<int, 3>> faces;
  std::vector<Eigen::VectorXd> weights;
  for (const CapsuleSpec& c : capsules) append_capsule(c, nj, verts, faces, weights);
  append_sphere(pos("head"), 0.10, id("head"), nj, verts, faces, weights);

  BodyMesh mesh;
  mesh.vertices = std::move(verts);
  mesh.faces = std::move(faces);
  mesh.weights.resize(static_cast<Eigen::Index>(weights.size()), nj);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    mesh.weights.row(static_cast<Eigen::Index>(i)) = weights[i].transpose();
  }
  mesh.validate(nj);
  return mesh;
}

CameraIntrinsics default_intrinsics() { return CameraIntrinsics{}; }

ModelBundle default_model_bundle() {
  ModelBundle b;
  b.skeleton = default_skeleton();
  b.mesh = default_body_mesh(b.skeleton);
  b.camera = default_intrinsics();
  return b;
}

// ---------------------------------------------------------------------------
// Model file.

namespace {

using nlohmann::json;

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 json_vec(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("model file: expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

void save_model_file(const std::filesystem::path& path, const ModelBundle& bundle) {
  json j;
  json joints = json::array();
  for (const Joint& jt : bundle.skeleton.joints()) {
    json axes = json::array();
    for (const Vec3& a : jt.axes) axes.push_back(vec_json(a));
    joints.push_back({{"name", jt.name}, {"parent", jt.parent}, {"offset", vec_json(jt.offset)},
                      {"axes", axes}});
  }
  j["joints"] = joints;
  j["angle_lower"] = std::vector<double>(bundle.skeleton.angle_lower().data(),
                                         bundle.skeleton.angle_lower().data() + kJointAngleDof);
  j["angle_upper"] = std::vector<double>(bundle.skeleton.angle_upper().data(),
                                         bundle.skeleton.angle_upper().data() + kJointAngleDof);
  json face = json::array();
  for (const FaceLandmark& f : bundle.skeleton.face_landmarks()) {
    face.push_back({{"name", f.name}, {"joint", f.joint}, {"offset", vec_json(f.offset)}});
  }
  j["face_landmarks"] = face;
  json verts = json::array();
  for (const Vec3& v : bundle.mesh.vertices) verts.push_back(vec_json(v));
  json faces = json::array();
  for (const auto& f : bundle.mesh.faces) faces.push_back(json::array({f[0], f[1], f[2]}));
  json weights = json::array();
  for (Eigen::Index r = 0; r < bundle.mesh.weights.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < bundle.mesh.weights.cols(); ++c) row.push_back(bundle.mesh.weights(r, c));
    weights.push_back(row);
  }
  j["mesh"] = {{"vertices", verts}, {"faces", faces}, {"weights", weights}};
  const CameraIntrinsics& k = bundle.camera;
  j["camera"] = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy},
                 {"width", k.sensor.width}, {"height", k.sensor.height}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write model file " + path.string());
  out << j.dump() << '\n';
}

ModelBundle load_model_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open model file " + path.string());
  json j;
  try {
    in >> j;
    std::vector<Joint> joints;
    for (const json& jt : j.at("joints")) {
      Joint joint;
      joint.name = jt.at("name").get<std::string>();
      joint.parent = jt.at("parent").get<int>();
      joint.offset = json_vec(jt.at("offset"));
      for (const json& a : jt.at("axes")) joint.axes.push_back(json_vec(a));
      joints.push_back(std::move(joint));
    }
    const auto lower = j.at("angle_lower").get<std::vector<double>>();
    const auto upper = j.at("angle_upper").get<std::vector<double>>();
    std::vector<FaceLandmark> face;
    for (const json& f : j.at("face_landmarks")) {
      face.push_back({f.at("name").get<std::string>(), f.at("joint").get<int>(), json_vec(f.at("offset"))});
    }
    ModelBundle b;
    b.skeleton = SkeletonModel(std::move(joints),
                               Eigen::Map<const Eigen::VectorXd>(lower.data(), static_cast<Eigen::Index>(lower.size())),
                               Eigen::Map<const Eigen::VectorXd>(upper.data(), static_cast<Eigen::Index>(upper.size())),
                               std::move(face));
    const json& mesh = j.at("mesh");
    for (const json& v : mesh.at("vertices")) b.mesh.vertices.push_back(json_vec(v));
    for (const json& f : mesh.at("faces")) b.mesh.faces.push_back(f.get<std::array<int, 3>>());
    const json& weights = mesh.at("weights");
    const int nj = b.skeleton.joint_count();
    b.mesh.weights.resize(static_cast<Eigen::Index>(weights.size()), nj);
    for (std::size_t r = 0; r < weights.size(); ++r) {
      const auto row = weights[r].get<std::vector<double>>();
      if (static_cast<int>(row.size()) != nj) throw ConfigError("model file: weight row size != N_J");
      for (int c = 0; c < nj; ++c) b.mesh.weights(static_cast<Eigen::Index>(r), c) = row[static_cast<std::size_t>(c)];
    }
    b.mesh.validate(nj);
    const json& cam = j.at("camera");
    b.camera.fx = cam.at("fx").get<double>();
    b.camera.fy = cam.at("fy").get<double>();
    b.camera.cx = cam.at("cx").get<double>();
    b.camera.cy = cam.at("cy").get<double>();
    b.camera.sensor = {cam.at("width").get<int>(), cam.at("height").get<int>()};
    if (!(b.camera.fx > 0.0 && b.camera.fy > 0.0)) throw ConfigError("model file: focal lengths must be positive");
    return b;
  } catch (const json::exception& e) {
    throw ConfigError("model file " + path.string() + ": " + e.what());
  }
}

}  // namespace eventcap
