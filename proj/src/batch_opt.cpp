#include "eventcap/batch_opt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <fstream>
#include <memory>

namespace eventcap {
namespace {

using Jac2 = Eigen::Matrix<double, 2, kPoseParams>;

// 3D joint residuals are measured in millimeters.
constexpr double kMm = 1000.0;

SkeletonPose pose_at(const Eigen::VectorXd& x, int f) {
  return SkeletonPose::from_vector(x.segment(static_cast<Eigen::Index>(f) * kPoseParams, kPoseParams));
}

std::vector<SkinnedPoint> landmark_points(const SkeletonModel& model) {
  std::vector<SkinnedPoint> out;
  for (int l = 0; l < model.landmark_count(); ++l) out.push_back(landmark_point(model, l));
  return out;
}

std::vector<int> pose_params(int f) {
  std::vector<int> p(kPoseParams);
  for (int i = 0; i < kPoseParams; ++i) p[static_cast<std::size_t>(i)] = f * kPoseParams + i;
  return p;
}

SkinnedPoint anchor_point(const ModelBundle& body, const SurfaceAnchor& a) {
  return surface_point(body.skeleton, body.mesh, a.vertices, a.barycentric);
}

// Residual blocks. Each owns copies of the data it needs; `body` must outlive them.

ResidualBlock correspondence_block(const ModelBundle& body, const CorrespondenceSet& set, double lambda) {
  struct Item {
    SkinnedPoint point;
    Vec2 target;
    double scale;
  };
  auto items = std::make_shared<std::vector<Item>>();
  for (const CorrespondencePair& p : set.pairs) {
    if (!p.anchor.valid) continue;
    items->push_back({anchor_point(body, p.anchor), p.p_neighbor, std::sqrt(p.weight)});
  }
  ResidualBlock b;
  b.parameters = pose_params(set.neighbor);
  b.residual_count = 2 * static_cast<int>(items->size());
  b.weight = lambda;
  const int frame = set.neighbor;
  const ModelBundle* bp = &body;
  b.evaluate = [items, frame, bp](const Eigen::VectorXd& x, Eigen::Ref<Eigen::VectorXd> r,
                                  Eigen::MatrixXd* jac) {
    const PosedSkeleton posed(bp->skeleton, pose_at(x, frame));
    for (std::size_t k = 0; k < items->size(); ++k) {
      const Item& it = (*items)[k];
      const auto row = static_cast<Eigen::Index>(2 * k);
      const Vec3 p = posed.point(it.point);
      const auto uv = try_project(bp->camera, p);
      if (!uv) {
        r.segment<2>(row).setZero();
        continue;
      }
      r.segment<2>(row) = it.scale * (*uv - it.target);
      if (jac) {
        jac->middleRows<2>(row) = it.scale * projection_jacobian(bp->camera, p) * posed.jacobian(it.point);
      }
    }
  };
  return b;
}

ResidualBlock detection2d_block(const ModelBundle& body, const DetectionSet& det, int frame, double lambda) {
  auto points = std::make_shared<std::vector<SkinnedPoint>>(landmark_points(body.skeleton));
  auto d = std::make_shared<std::vector<Detection2D>>(det.joints2d);
  ResidualBlock b;
  b.parameters = pose_params(frame);
  b.residual_count = 2 * static_cast<int>(d->size());
  b.weight = lambda;
  const ModelBundle* bp = &body;
  b.evaluate = [points, d, frame, bp](const Eigen::VectorXd& x, Eigen::Ref<Eigen::VectorXd> r,
                                      Eigen::MatrixXd* jac) {
    const PosedSkeleton posed(bp->skeleton, pose_at(x, frame));
    for (std::size_t l = 0; l < d->size(); ++l) {
      const auto row = static_cast<Eigen::Index>(2 * l);
      const Detection2D& e = (*d)[l];
      r.segment<2>(row).setZero();
      if (!e.present) continue;
      const Vec3 p = posed.point((*points)[l]);
      const auto uv = try_project(bp->camera, p);
      if (!uv) continue;
      const double s = std::sqrt(e.confidence);
      r.segment<2>(row) = s * (*uv - e.position);
      if (jac) jac->middleRows<2>(row) = s * projection_jacobian(bp->camera, p) * posed.jacobian((*points)[l]);
    }
  };
  return b;
}

ResidualBlock detection3d_block(const ModelBundle& body, const DetectionSet& det, int frame,
                                int t_prime_index, double lambda) {
  auto d = std::make_shared<std::vector<Detection3D>>(det.joints3d);
  ResidualBlock b;
  b.parameters = pose_params(frame);
  for (int i = 0; i < 3; ++i) b.parameters.push_back(t_prime_index + i);
  b.residual_count = 3 * static_cast<int>(d->size());
  b.weight = lambda;
  const SkeletonModel* model = &body.skeleton;
  b.evaluate = [d, frame, t_prime_index, model](const Eigen::VectorXd& x, Eigen::Ref<Eigen::VectorXd> r,
                                                Eigen::MatrixXd* jac) {
    const PosedSkeleton posed(*model, pose_at(x, frame));
    const Vec3 tp = x.segment<3>(t_prime_index);
    for (std::size_t l = 0; l < d->size(); ++l) {
      const auto row = static_cast<Eigen::Index>(3 * l);
      const Detection3D& e = (*d)[l];
      r.segment<3>(row).setZero();
      if (!e.present) continue;
      const double s = kMm * std::sqrt(e.confidence);
      r.segment<3>(row) = s * (posed.position(static_cast<int>(l)) - (e.position + tp));
      if (jac) {
        jac->block<3, kPoseParams>(row, 0) = s * posed.jacobian(joint_point(static_cast<int>(l)));
        jac->block<3, 3>(row, kPoseParams) = -s * Mat3::Identity();
      }
    }
  };
  return b;
}

ResidualBlock temporal_block(const SkeletonModel& model, int i, const std::vector<int>& joints, double lambda) {
  auto js = std::make_shared<std::vector<int>>(joints);
  ResidualBlock b;
  b.parameters = pose_params(i);
  const auto next = pose_params(i + 1);
  b.parameters.insert(b.parameters.end(), next.begin(), next.end());
  b.residual_count = 3 * static_cast<int>(js->size());
  b.weight = lambda;
  const SkeletonModel* mp = &model;
  b.evaluate = [js, i, mp](const Eigen::VectorXd& x, Eigen::Ref<Eigen::VectorXd> r, Eigen::MatrixXd* jac) {
    const PosedSkeleton a(*mp, pose_at(x, i));
    const PosedSkeleton c(*mp, pose_at(x, i + 1));
    for (std::size_t k = 0; k < js->size(); ++k) {
      const int l = (*js)[k];
      const auto row = static_cast<Eigen::Index>(3 * k);
      r.segment<3>(row) = kMm * (a.position(l) - c.position(l));
      if (jac) {
        jac->block<3, kPoseParams>(row, 0) = kMm * a.jacobian(joint_point(l));
        jac->block<3, kPoseParams>(row, kPoseParams) = -kMm * c.jacobian(joint_point(l));
      }
    }
  };
  return b;
}

ResidualBlock prior_block(const SkeletonModel& model, const SkeletonPose& prior, int frame, double lambda) {
  auto target = std::make_shared<std::vector<Vec3>>();
  const PosedSkeleton posed(model, prior);
  for (int l = 0; l < model.joint_count(); ++l) target->push_back(posed.position(l));
  ResidualBlock b;
  b.parameters = pose_params(frame);
  b.residual_count = 3 * model.joint_count();
  b.weight = lambda;
  const SkeletonModel* mp = &model;
  b.evaluate = [target, frame, mp](const Eigen::VectorXd& x, Eigen::Ref<Eigen::VectorXd> r,
                                   Eigen::MatrixXd* jac) {
    const PosedSkeleton s(*mp, pose_at(x, frame));
    for (int l = 0; l < mp->joint_count(); ++l) {
      r.segment<3>(3 * l) = kMm * (s.position(l) - (*target)[static_cast<std::size_t>(l)]);
      if (jac) jac->block<3, kPoseParams>(3 * l, 0) = kMm * s.jacobian(joint_point(l));
    }
  };
  return b;
}

BoundsSpec pose_bounds(const SkeletonModel& model, int frames, int extra) {
  BoundsSpec bounds = BoundsSpec::unbounded(static_cast<Eigen::Index>(frames) * kPoseParams + extra);
  for (int f = 0; f < frames; ++f) {
    bounds.lower.segment(f * kPoseParams, kJointAngleDof) = model.angle_lower();
    bounds.upper.segment(f * kPoseParams, kJointAngleDof) = model.angle_upper();
  }
  return bounds;
}

std::vector<int> flagged_joints(const std::vector<bool>& flagged) {
  std::vector<int> out;
  for (std::size_t l = 0; l < flagged.size(); ++l) {
    if (flagged[l]) out.push_back(static_cast<int>(l));
  }
  return out;
}

}  // namespace

bool DetectionSet::any_present() const {
  for (const auto& d : joints2d) {
    if (d.present) return true;
  }
  for (const auto& d : joints3d) {
    if (d.present) return true;
  }
  return false;
}

void DetectionSet::validate(const SkeletonModel& model) const {
  if (static_cast<int>(joints2d.size()) != model.landmark_count()) {
    throw DomainError("detections: expected " + std::to_string(model.landmark_count()) + " 2D entries");
  }
  if (static_cast<int>(joints3d.size()) != model.joint_count()) {
    throw DomainError("detections: expected " + std::to_string(model.joint_count()) + " 3D entries");
  }
  auto check_c = [](double c) {
    if (!(c >= 0.0 && c <= 1.0)) throw DomainError("detections: confidence outside [0, 1]");
  };
  for (const auto& d : joints2d) {
    if (!d.present) continue;
    check_c(d.confidence);
    if (!d.position.allFinite()) throw DomainError("detections: non-finite 2D position");
  }
  for (const auto& d : joints3d) {
    if (!d.present) continue;
    check_c(d.confidence);
    if (!d.position.allFinite()) throw DomainError("detections: non-finite 3D position");
  }
}

std::vector<DetectionSet> read_detections(const std::filesystem::path& path, const SkeletonModel& model) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open detections file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("detections: " + std::string(e.what()));
  }
  if (!j.is_array()) throw IoError("detections: top level must be an array");
  std::vector<DetectionSet> out;
  try {
    for (const auto& item : j) {
      DetectionSet d;
      d.t = item.at("t_us").get<TimestampUs>();
      for (const auto& e : item.at("joints2d")) {
        Detection2D x;
        if (e.is_null()) {
          x.present = false;
          x.confidence = 0.0;
        } else {
          x.position = Vec2(e.at("x").get<double>(), e.at("y").get<double>());
          x.confidence = e.value("c", 1.0);
        }
        d.joints2d.push_back(x);
      }
      for (const auto& e : item.at("joints3d")) {
        Detection3D x;
        if (e.is_null()) {
          x.present = false;
          x.confidence = 0.0;
        } else {
          x.position = Vec3(e.at("x").get<double>(), e.at("y").get<double>(), e.at("z").get<double>());
          x.confidence = e.value("c", 1.0);
        }
        d.joints3d.push_back(x);
      }
      d.validate(model);
      out.push_back(std::move(d));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("detections: " + std::string(e.what()));
  }
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].t <= out[i - 1].t) throw IoError("detections: timestamps must be strictly increasing");
  }
  return out;
}

void write_detections(const std::filesystem::path& path, std::span<const DetectionSet> detections) {
  nlohmann::json j = nlohmann::json::array();
  for (const DetectionSet& d : detections) {
    nlohmann::json j2 = nlohmann::json::array();
    for (const auto& e : d.joints2d) {
      j2.push_back(e.present ? nlohmann::json{{"x", e.position.x()}, {"y", e.position.y()}, {"c", e.confidence}}
                             : nlohmann::json(nullptr));
    }
    nlohmann::json j3 = nlohmann::json::array();
    for (const auto& e : d.joints3d) {
      j3.push_back(e.present ? nlohmann::json{{"x", e.position.x()},
                                              {"y", e.position.y()},
                                              {"z", e.position.z()},
                                              {"c", e.confidence}}
                             : nlohmann::json(nullptr));
    }
    j.push_back({{"t_us", d.t}, {"joints2d", j2}, {"joints3d", j3}});
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write detections file " + path.string());
  out << j.dump(1) << '\n';
}

nlohmann::json detection_layout(const SkeletonModel& model) {
  nlohmann::json j2 = nlohmann::json::array();
  nlohmann::json j3 = nlohmann::json::array();
  for (const Joint& joint : model.joints()) {
    j2.push_back(joint.name);
    j3.push_back(joint.name);
  }
  for (const FaceLandmark& f : model.face_landmarks()) j2.push_back(f.name);
  return {{"joints2d", j2},
          {"joints3d", j3},
          {"joints3d_frame", "camera axes, meters, relative to joint '" + model.joint(0).name + "'"}};
}

void EnergyWeights::validate() const {
  for (double w : {lambda_adj, lambda_2d, lambda_3d, lambda_temp}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("energy weights must be finite and >= 0");
  }
}

Eigen::VectorXd residual_event_correspondence(const Batch& batch, const ModelBundle& body, int* dropped) {
  std::vector<double> out;
  int drop = 0;
  for (const CorrespondenceSet& set : batch.correspondences) {
    const PosedSkeleton posed(body.skeleton, batch.poses.at(static_cast<std::size_t>(set.neighbor)));
    for (const CorrespondencePair& p : set.pairs) {
      if (!p.anchor.valid) continue;
      const auto uv = try_project(body.camera, posed.point(anchor_point(body, p.anchor)));
      if (!uv) {
        ++drop;
        continue;
      }
      const Vec2 r = std::sqrt(p.weight) * (*uv - p.p_neighbor);
      out.push_back(r.x());
      out.push_back(r.y());
    }
  }
  if (dropped) *dropped = drop;
  return Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

Eigen::VectorXd residual_2d(const ModelBundle& body, const SkeletonPose& pose, const DetectionSet& detections) {
  const std::vector<Vec3> lm = forward_kinematics(body.skeleton, pose);
  std::vector<double> out;
  for (std::size_t l = 0; l < detections.joints2d.size() && l < lm.size(); ++l) {
    const Detection2D& d = detections.joints2d[l];
    if (!d.present) continue;
    const auto uv = try_project(body.camera, lm[l]);
    if (!uv) continue;
    const Vec2 r = std::sqrt(d.confidence) * (*uv - d.position);
    out.push_back(r.x());
    out.push_back(r.y());
  }
  return Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

Eigen::VectorXd residual_3d(const SkeletonModel& model, const SkeletonPose& pose,
                            const DetectionSet& detections, const Vec3& t_prime) {
  const std::vector<Vec3> lm = forward_kinematics(model, pose);
  std::vector<double> out;
  for (std::size_t l = 0; l < detections.joints3d.size() && l < static_cast<std::size_t>(model.joint_count()); ++l) {
    const Detection3D& d = detections.joints3d[l];
    if (!d.present) continue;
    const Vec3 r = kMm * std::sqrt(d.confidence) * (lm[l] - (d.position + t_prime));
    out.insert(out.end(), {r.x(), r.y(), r.z()});
  }
  return Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

Eigen::VectorXd residual_temporal(const Batch& batch, const SkeletonModel& model,
                                  const std::vector<bool>& flagged) {
  std::vector<double> out;
  for (int i = 0; i < batch.n(); ++i) {
    const auto a = forward_kinematics(model, batch.poses[static_cast<std::size_t>(i)]);
    const auto b = forward_kinematics(model, batch.poses[static_cast<std::size_t>(i + 1)]);
    for (int l = 0; l < model.joint_count(); ++l) {
      if (!flagged.at(static_cast<std::size_t>(l))) continue;
      const Vec3 r = kMm * (a[static_cast<std::size_t>(l)] - b[static_cast<std::size_t>(l)]);
      out.insert(out.end(), {r.x(), r.y(), r.z()});
    }
  }
  return Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

std::vector<bool> compute_phi(const ModelBundle& body, std::span<const SurfaceAnchor> anchors) {
  const SkeletonModel& model = body.skeleton;
  std::vector<bool> associated(static_cast<std::size_t>(model.joint_count()), false);
  for (const SurfaceAnchor& a : anchors) {
    if (!a.valid) continue;
    const int d = anchor_point(body, a).dominant_joint();
    associated[static_cast<std::size_t>(d)] = true;
    for (int c : model.children(d)) associated[static_cast<std::size_t>(c)] = true;
  }
  std::vector<bool> flagged(associated.size());
  for (std::size_t l = 0; l < associated.size(); ++l) flagged[l] = !associated[l];
  return flagged;
}

std::vector<SurfaceAnchor> batch_anchors(const Batch& batch) {
  std::vector<int> seen;
  std::vector<SurfaceAnchor> out;
  for (const CorrespondenceSet& set : batch.correspondences) {
    for (const CorrespondencePair& p : set.pairs) {
      if (std::find(seen.begin(), seen.end(), p.feature) != seen.end()) continue;
      seen.push_back(p.feature);
      out.push_back(p.anchor);
    }
  }
  return out;
}

double batch_energy(const Batch& batch, const ModelBundle& body, const EnergyWeights& weights,
                    const std::vector<bool>& flagged) {
  double e = weights.lambda_adj * residual_event_correspondence(batch, body).squaredNorm();
  const SkeletonPose& first = batch.poses.front();
  const SkeletonPose& last = batch.poses.back();
  if (batch.detections_begin) {
    e += weights.lambda_2d * residual_2d(body, first, *batch.detections_begin).squaredNorm();
    e += weights.lambda_3d *
         residual_3d(body.skeleton, first, *batch.detections_begin, batch.aux_translation).squaredNorm();
  } else if (batch.prior_pose) {
    const auto a = forward_kinematics(body.skeleton, first);
    const auto b = forward_kinematics(body.skeleton, *batch.prior_pose);
    for (int l = 0; l < body.skeleton.joint_count(); ++l) {
      e += weights.lambda_temp * (kMm * (a[static_cast<std::size_t>(l)] - b[static_cast<std::size_t>(l)])).squaredNorm();
    }
  }
  if (batch.detections_end) {
    e += weights.lambda_2d * residual_2d(body, last, *batch.detections_end).squaredNorm();
    e += weights.lambda_3d *
         residual_3d(body.skeleton, last, *batch.detections_end, batch.aux_translation).squaredNorm();
  }
  e += weights.lambda_temp * residual_temporal(batch, body.skeleton, flagged).squaredNorm();
  return e;
}

BatchProblem build_batch_problem(const Batch& batch, const ModelBundle& body, const EnergyWeights& weights,
                                 const std::vector<bool>& flagged) {
  weights.validate();
  const int n = batch.n();
  if (n < 1) throw DomainError("batch needs at least two frames");
  if (static_cast<int>(batch.frame_timestamps.size()) != n + 1) {
    throw DomainError("batch: timestamp and pose counts differ");
  }
  const int frames = n + 1;
  const int tp = frames * kPoseParams;
  BatchProblem prob;
  prob.x0.resize(tp + 3);
  for (int f = 0; f < frames; ++f) {
    prob.x0.segment<kPoseParams>(f * kPoseParams) = batch.poses[static_cast<std::size_t>(f)].to_vector();
  }
  prob.x0.segment<3>(tp) = batch.aux_translation;
  prob.bounds = pose_bounds(body.skeleton, frames, 3);

  for (const CorrespondenceSet& set : batch.correspondences) {
    if (set.neighbor < 0 || set.neighbor > n) throw DomainError("batch: correspondence frame out of range");
    ResidualBlock b = correspondence_block(body, set, weights.lambda_adj);
    if (b.residual_count > 0) prob.blocks.push_back(std::move(b));
  }
  if (batch.detections_begin) {
    batch.detections_begin->validate(body.skeleton);
    prob.blocks.push_back(detection2d_block(body, *batch.detections_begin, 0, weights.lambda_2d));
    prob.blocks.push_back(detection3d_block(body, *batch.detections_begin, 0, tp, weights.lambda_3d));
  } else if (batch.prior_pose) {
    prob.blocks.push_back(prior_block(body.skeleton, *batch.prior_pose, 0, weights.lambda_temp));
  }
  if (batch.detections_end) {
    batch.detections_end->validate(body.skeleton);
    prob.blocks.push_back(detection2d_block(body, *batch.detections_end, n, weights.lambda_2d));
    prob.blocks.push_back(detection3d_block(body, *batch.detections_end, n, tp, weights.lambda_3d));
  }
  const std::vector<int> joints = flagged_joints(flagged);
  if (!joints.empty()) {
    for (int i = 0; i < n; ++i) prob.blocks.push_back(temporal_block(body.skeleton, i, joints, weights.lambda_temp));
  }
  return prob;
}

void unpack_batch(const Eigen::VectorXd& x, Batch& batch) {
  const int frames = batch.n() + 1;
  for (int f = 0; f < frames; ++f) batch.poses[static_cast<std::size_t>(f)] = pose_at(x, f);
  batch.aux_translation = x.segment<3>(static_cast<Eigen::Index>(frames) * kPoseParams);
}

double mean_reprojection_error(const ModelBundle& body, const SkeletonPose& pose, const DetectionSet& detections) {
  const std::vector<Vec3> lm = forward_kinematics(body.skeleton, pose);
  double sum = 0.0;
  int count = 0;
  for (std::size_t l = 0; l < detections.joints2d.size() && l < lm.size(); ++l) {
    if (!detections.joints2d[l].present) continue;
    const auto uv = try_project(body.camera, lm[l]);
    if (!uv) return std::numeric_limits<double>::infinity();
    sum += (*uv - detections.joints2d[l].position).norm();
    ++count;
  }
  return count ? sum / count : 0.0;
}

SkeletonPose guess_pose(const ModelBundle& body, const DetectionSet& det) {
  const SkeletonModel& model = body.skeleton;
  const CameraIntrinsics& k = body.camera;
  SkeletonPose pose;
  double extent3 = 0.0;
  double extent2 = 0.0;
  const auto& root2 = det.joints2d.at(0);
  for (int l = 1; l < model.joint_count(); ++l) {
    const auto& a = det.joints3d.at(static_cast<std::size_t>(l));
    const auto& b = det.joints2d.at(static_cast<std::size_t>(l));
    if (!a.present || !b.present || !root2.present || !det.joints3d[0].present) continue;
    extent3 += (a.position - det.joints3d[0].position).head<2>().norm();
    extent2 += (b.position - root2.position).norm();
  }
  const double z = (extent2 > 1.0 && extent3 > 0.0) ? 0.5 * (k.fx + k.fy) * extent3 / extent2 : 3.0;
  Vec2 uv(k.cx, k.cy);
  if (root2.present) uv = root2.position;
  pose.root_translation =
      Vec3((uv.x() - k.cx) / k.fx * z, (uv.y() - k.cy) / k.fy * z, z) - model.joint(0).offset;
  return clamp_to_bounds(model, pose);
}

BatchInit initialize_batch(const DetectionSet* begin, const DetectionSet* end,
                           std::span<const TimestampUs> frame_timestamps, const ModelBundle& body,
                           const EnergyWeights& weights, const std::optional<SkeletonPose>& previous_terminal,
                           double max_reprojection_px) {
  weights.validate();
  if (frame_timestamps.size() < 2) throw DomainError("initialize_batch: need at least two frames");
  if (begin && !begin->any_present()) begin = nullptr;
  if (end && !end->any_present()) end = nullptr;
  const std::size_t frames = frame_timestamps.size();
  BatchInit init;
  if (!begin && !end) {
    if (!previous_terminal) throw DomainError("initialize_batch: no detections and no previous pose");
    init.poses.assign(frames, *previous_terminal);
    init.reliable = false;
    return init;
  }

  SkeletonPose guess = previous_terminal ? *previous_terminal : guess_pose(body, begin ? *begin : *end);
  guess = clamp_to_bounds(body.skeleton, guess);
  // Endpoint problem: x = [S_0, S_N, t'].
  Eigen::VectorXd x0(2 * kPoseParams + 3);
  x0.segment<kPoseParams>(0) = guess.to_vector();
  x0.segment<kPoseParams>(kPoseParams) = guess.to_vector();
  {
    const DetectionSet& d = begin ? *begin : *end;
    const auto lm = forward_kinematics(body.skeleton, guess);
    Vec3 sum = Vec3::Zero();
    int count = 0;
    for (std::size_t l = 0; l < d.joints3d.size(); ++l) {
      if (!d.joints3d[l].present) continue;
      sum += lm[l] - d.joints3d[l].position;
      ++count;
    }
    x0.segment<3>(2 * kPoseParams) = count ? Vec3(sum / count) : guess.root_translation;
  }
  std::vector<ResidualBlock> blocks;
  const int tp = 2 * kPoseParams;
  if (begin) {
    begin->validate(body.skeleton);
    blocks.push_back(detection2d_block(body, *begin, 0, weights.lambda_2d));
    blocks.push_back(detection3d_block(body, *begin, 0, tp, weights.lambda_3d));
  } else if (previous_terminal) {
    blocks.push_back(prior_block(body.skeleton, *previous_terminal, 0, weights.lambda_temp));
  }
  if (end) {
    end->validate(body.skeleton);
    blocks.push_back(detection2d_block(body, *end, 1, weights.lambda_2d));
    blocks.push_back(detection3d_block(body, *end, 1, tp, weights.lambda_3d));
  }

  SkeletonPose s0 = guess;
  SkeletonPose sn = guess;
  try {
    SolverOptions opts;
    opts.max_iterations = 200;
    const SolveResult res = minimize(blocks, x0, pose_bounds(body.skeleton, 2, 3), opts);
    init.report = res.report;
    s0 = pose_at(res.x, 0);
    sn = pose_at(res.x, 1);
    init.t_prime = res.x.segment<3>(tp);
    if (!begin && !previous_terminal) s0 = sn;
    if (!end) sn = s0;
    if (!std::isfinite(res.report.final_cost)) init.reliable = false;
    if (begin && mean_reprojection_error(body, s0, *begin) > max_reprojection_px) init.reliable = false;
    if (end && mean_reprojection_error(body, sn, *end) > max_reprojection_px) init.reliable = false;
  } catch (const DomainError&) {
    init.reliable = false;
  }
  if (!init.reliable && previous_terminal) s0 = *previous_terminal;

  const double span = static_cast<double>(frame_timestamps.back() - frame_timestamps.front());
  for (std::size_t f = 0; f < frames; ++f) {
    const double a = static_cast<double>(frame_timestamps[f] - frame_timestamps.front()) / span;
    init.poses.push_back(f == 0 ? s0 : f + 1 == frames ? sn : interpolate(s0, sn, a));
  }
  return init;
}

BatchReport optimize_batch(Batch& batch, const ModelBundle& body, const EnergyWeights& weights,
                           const SolverOptions& options) {
  const std::vector<bool> flagged = compute_phi(body, batch_anchors(batch));
  const BatchProblem prob = build_batch_problem(batch, body, weights, flagged);
  BatchReport report;
  for (bool f : flagged) report.flagged_joints += f ? 1 : 0;
  const SolveResult res = minimize(prob.blocks, prob.x0, prob.bounds, options);
  report.solver = res.report;
  unpack_batch(res.x, batch);
  const Eigen::VectorXd r = residual_event_correspondence(batch, body, &report.dropped_correspondences);
  report.correspondence_count = static_cast<int>(r.size() / 2);
  return report;
}

}  // namespace eventcap
