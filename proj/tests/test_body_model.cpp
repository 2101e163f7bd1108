#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include <Eigen/Geometry>

#include "eventcap/body_model.hpp"
#include "test_support.hpp"

using namespace eventcap;
using eventcap::testing::numeric_jacobian;
using eventcap::testing::random_pose;
using eventcap::testing::relative_error;

namespace {

// Rodrigues, written out by components.
Mat3 rodrigues(const Vec3& axis, double angle) {
  const double n = std::sqrt(axis.x() * axis.x() + axis.y() * axis.y() + axis.z() * axis.z());
  Mat3 r = Mat3::Identity();
  if (n < 1e-300) return r;
  const double x = axis.x() / n, y = axis.y() / n, z = axis.z() / n;
  const double c = std::cos(angle), s = std::sin(angle), v = 1.0 - c;
  r << c + x * x * v, x * y * v - z * s, x * z * v + y * s,
       y * x * v + z * s, c + y * y * v, y * z * v - x * s,
       z * x * v - y * s, z * y * v + x * s, c + z * z * v;
  return r;
}

struct Frames {
  std::vector<Mat3> r;
  std::vector<Vec3> p;
};

Frames oracle_frames(const SkeletonModel& m, const SkeletonPose& pose) {
  Frames f;
  const double angle = pose.root_rotation.norm();
  const Mat3 root = rodrigues(pose.root_rotation, angle);
  for (int j = 0; j < m.joint_count(); ++j) {
    const Joint& jt = m.joint(j);
    Mat3 r = jt.parent < 0 ? root : f.r[static_cast<std::size_t>(jt.parent)];
    Vec3 p = jt.parent < 0 ? Vec3(root * jt.offset + pose.root_translation)
                           : Vec3(f.r[static_cast<std::size_t>(jt.parent)] * jt.offset + f.p[static_cast<std::size_t>(jt.parent)]);
    for (std::size_t a = 0; a < jt.axes.size(); ++a) r = r * rodrigues(jt.axes[a], pose.theta[jt.dof_begin + static_cast<int>(a)]);
    f.r.push_back(r);
    f.p.push_back(p);
  }
  return f;
}

std::vector<Vec3> rest_positions(const SkeletonModel& m) {
  std::vector<Vec3> out;
  for (int j = 0; j < m.joint_count(); ++j) {
    const Joint& jt = m.joint(j);
    out.push_back(jt.parent < 0 ? jt.offset : Vec3(out[static_cast<std::size_t>(jt.parent)] + jt.offset));
  }
  return out;
}

}  // namespace

TEST_CASE("default model shape") {
  const ModelBundle b = default_model_bundle();
  CHECK(b.skeleton.joint_count() == 17);
  CHECK(b.skeleton.landmark_count() == 21);
  CHECK(b.skeleton.angle_lower().size() == kJointAngleDof);
  CHECK(b.skeleton.joint(0).parent == -1);
  CHECK_NOTHROW(b.mesh.validate(17));
  CHECK(b.mesh.weights.rows() == static_cast<Eigen::Index>(b.mesh.vertices.size()));
  int dof = 0;
  for (const Joint& j : b.skeleton.joints()) dof += static_cast<int>(j.axes.size());
  CHECK(dof == kJointAngleDof);
  const auto rest = rest_positions(b.skeleton);
  for (int j = 0; j < 17; ++j) CHECK((rest[j] - b.skeleton.rest_joint_positions()[j]).norm() < 1e-12);
}

TEST_CASE("forward kinematics matches a scalar transcription") {
  const SkeletonModel m = default_skeleton();
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const SkeletonPose pose = random_pose(m, rng);
    const auto fk = forward_kinematics(m, pose);
    const Frames f = oracle_frames(m, pose);
    REQUIRE(fk.size() == 21u);
    for (int j = 0; j < 17; ++j) CHECK((fk[j] - f.p[j]).norm() < 1e-12);
    for (int l = 0; l < 4; ++l) {
      const FaceLandmark& lm = m.face_landmarks()[l];
      const Vec3 want = f.r[lm.joint] * lm.offset + f.p[lm.joint];
      CHECK((fk[17 + l] - want).norm() < 1e-12);
    }
  }
}

TEST_CASE("skinning matches the blend formula") {
  const ModelBundle b = default_model_bundle();
  const auto rest = rest_positions(b.skeleton);
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const SkeletonPose pose = random_pose(b.skeleton, rng);
    const auto verts = skin_vertices(b.skeleton, b.mesh, pose);
    const Frames f = oracle_frames(b.skeleton, pose);
    for (std::size_t v = 0; v < verts.size(); v += 37) {
      Vec3 want = Vec3::Zero();
      for (int j = 0; j < 17; ++j) {
        const double w = b.mesh.weights(static_cast<Eigen::Index>(v), j);
        want += w * (f.r[j] * (b.mesh.vertices[v] - rest[j]) + f.p[j]);
      }
      CHECK((verts[v] - want).norm() < 1e-12);
    }
  }
}

TEST_CASE("identity pose leaves the mesh at rest plus translation") {
  const ModelBundle b = default_model_bundle();
  SkeletonPose pose;
  pose.root_translation = Vec3(0.1, -0.2, 3.0);
  const auto verts = skin_vertices(b.skeleton, b.mesh, pose);
  for (std::size_t v = 0; v < verts.size(); v += 11) {
    CHECK((verts[v] - (b.mesh.vertices[v] + pose.root_translation)).norm() < 1e-12);
  }
}

TEST_CASE("pose Jacobians match central differences") {
  const ModelBundle b = default_model_bundle();
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const SkeletonPose pose = random_pose(b.skeleton, rng);
    const Eigen::VectorXd x = pose.to_vector();
    std::vector<PoseQuery> queries;
    for (int l = 0; l < b.skeleton.landmark_count(); ++l) queries.push_back({PoseQuery::Kind::kLandmark, l});
    for (int k = 0; k < 5; ++k) {
      queries.push_back({PoseQuery::Kind::kVertex, static_cast<int>(rng() % b.mesh.vertices.size())});
      const auto& face = b.mesh.faces[rng() % b.mesh.faces.size()];
      queries.push_back({PoseQuery::Kind::kSurface, 0, face, Vec3(0.2, 0.3, 0.5)});
    }
    for (const PoseQuery& q : queries) {
      const PointJacobian analytic = pose_jacobians(b.skeleton, b.mesh, pose, q);
      const auto f = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
        const SkeletonPose p = SkeletonPose::from_vector(v);
        const PosedSkeleton posed(b.skeleton, p);
        SkinnedPoint sp = q.kind == PoseQuery::Kind::kLandmark ? landmark_point(b.skeleton, q.index)
                          : q.kind == PoseQuery::Kind::kVertex ? vertex_point(b.skeleton, b.mesh, q.index)
                                                               : surface_point(b.skeleton, b.mesh, q.face, q.barycentric);
        return posed.point(sp);
      };
      CHECK(relative_error(analytic, numeric_jacobian(f, x)) < 1e-4);
    }
  }
}

TEST_CASE("projection and its Jacobian") {
  const CameraIntrinsics k = default_intrinsics();
  const Vec3 p(0.3, -0.2, 2.0);
  const Vec2 uv = project(k, p);
  CHECK(uv.x() == doctest::Approx(200.0 * 0.15 + 119.5));
  CHECK(uv.y() == doctest::Approx(200.0 * -0.1 + 89.5));
  const auto f = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return project(k, Vec3(v)); };
  CHECK(relative_error(projection_jacobian(k, p), numeric_jacobian(f, p)) < 1e-6);
  CHECK_THROWS_AS(project(k, Vec3(0.0, 0.0, -1.0)), DomainError);
  CHECK(!try_project(k, Vec3(0.0, 0.0, 0.0)));
}

TEST_CASE("axis-angle conversions") {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    Vec3 w(u(rng), u(rng), u(rng));
    w *= (3.1 * std::abs(u(rng))) / std::max(1e-9, w.norm());
    const Mat3 r = axis_angle_to_matrix(w);
    CHECK((r - rodrigues(w, w.norm())).norm() < 1e-12);
    CHECK((axis_angle_to_matrix(matrix_to_axis_angle(r)) - r).norm() < 1e-9);
  }
  CHECK(axis_angle_to_matrix(Vec3::Zero()).isIdentity(1e-15));
  CHECK(matrix_to_axis_angle(Mat3::Identity()).norm() < 1e-15);
  const Vec3 half_turn(0.0, std::numbers::pi, 0.0);
  CHECK((axis_angle_to_matrix(matrix_to_axis_angle(axis_angle_to_matrix(half_turn))) -
         axis_angle_to_matrix(half_turn)).norm() < 1e-9);
  CHECK((skew(Vec3(1, 2, 3)) * Vec3(4, 5, 6) - Vec3(1, 2, 3).cross(Vec3(4, 5, 6))).norm() < 1e-15);
}

TEST_CASE("bounds and interpolation") {
  const SkeletonModel m = default_skeleton();
  SkeletonPose p;
  p.theta.setConstant(10.0);
  CHECK(!p.within_bounds(m));
  const SkeletonPose c = clamp_to_bounds(m, p);
  CHECK(c.within_bounds(m));
  CHECK((c.theta - m.angle_upper()).norm() < 1e-15);
  SkeletonPose a, b;
  b.root_translation = Vec3(2, 0, 0);
  CHECK(interpolate(a, b, 0.25).root_translation.x() == doctest::Approx(0.5));
  const SkeletonPose round = SkeletonPose::from_vector(c.to_vector());
  CHECK((round.theta - c.theta).norm() == 0.0);
}

TEST_CASE("model file round trip") {
  const ModelBundle b = default_model_bundle();
  const auto path = std::filesystem::temp_directory_path() / "eventcap_test_model.json";
  save_model_file(path, b);
  const ModelBundle c = load_model_file(path);
  CHECK(c.skeleton.joint_count() == b.skeleton.joint_count());
  CHECK(c.mesh.vertices.size() == b.mesh.vertices.size());
  CHECK((c.mesh.weights - b.mesh.weights).norm() < 1e-12);
  CHECK(c.camera.fx == b.camera.fx);
  std::mt19937_64 rng(15);
  const SkeletonPose pose = random_pose(b.skeleton, rng);
  const auto fa = forward_kinematics(b.skeleton, pose), fb = forward_kinematics(c.skeleton, pose);
  for (std::size_t i = 0; i < fa.size(); ++i) CHECK((fa[i] - fb[i]).norm() < 1e-12);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_model_file(path), IoError);
}
