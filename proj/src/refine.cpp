#include "eventcap/refine.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "eventcap/raster.hpp"

namespace eventcap {

void RefineWeights::validate() const {
  for (double w : {lambda_sil, lambda_stab, lambda_dist}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("refine weights must be finite and >= 0");
  }
  if (icp_iterations < 0) throw ConfigError("icp_iterations must be >= 0");
  if (patch_size < 1) throw ConfigError("patch_size must be >= 1");
  if (solver_iterations < 1) throw ConfigError("solver_iterations must be >= 1");
}

std::vector<BoundaryPixel> extract_boundary(const ModelBundle& body, const SkeletonPose& pose) {
  const std::vector<Vec3> verts = skin_vertices(body.skeleton, body.mesh, pose);
  const DepthRaster raster(verts, body.mesh.faces, body.camera);
  const SensorSize s = body.camera.sensor;
  cv::Mat1b fg(s.height, s.width, static_cast<unsigned char>(0));
  bool any = false;
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      if (raster.foreground(x, y)) {
        fg(y, x) = 255;
        any = true;
      }
    }
  }
  if (!any) return {};

  cv::Mat1b bg;
  cv::bitwise_not(fg, bg);
  cv::Mat1f inside, outside;
  cv::distanceTransform(fg, inside, cv::DIST_L2, cv::DIST_MASK_PRECISE);
  cv::distanceTransform(bg, outside, cv::DIST_L2, cv::DIST_MASK_PRECISE);
  cv::Mat1f sdf = outside - inside;
  cv::GaussianBlur(sdf, sdf, cv::Size(0, 0), 1.0, 1.0, cv::BORDER_REPLICATE);

  std::vector<BoundaryPixel> out;
  constexpr int dx[4] = {1, -1, 0, 0};
  constexpr int dy[4] = {0, 0, 1, -1};
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      if (!fg(y, x)) continue;
      bool edge = false;
      for (int k = 0; k < 4 && !edge; ++k) {
        const int nx = x + dx[k];
        const int ny = y + dy[k];
        edge = s.contains(nx, ny) && !fg(ny, nx);
      }
      if (!edge) continue;
      const int xl = std::max(x - 1, 0), xr = std::min(x + 1, s.width - 1);
      const int yu = std::max(y - 1, 0), yd = std::min(y + 1, s.height - 1);
      const Vec2 g((sdf(y, xr) - sdf(y, xl)) / (xr - xl), (sdf(yd, x) - sdf(yu, x)) / (yd - yu));
      const double norm = g.norm();
      if (!(norm > 1e-9)) continue;
      BoundaryPixel b;
      b.position = Vec2(x, y);
      b.normal = g / norm;
      b.anchor.valid = true;
      b.anchor.face = raster.face(x, y);
      b.anchor.vertices = body.mesh.faces[static_cast<std::size_t>(b.anchor.face)];
      b.anchor.barycentric = raster.barycentric(b.anchor.face, b.position);
      out.push_back(b);
    }
  }
  return out;
}

std::optional<ClosestEvent> closest_event(const Vec2& s_b, const PixelEventIndex& index, TimestampUs t_f,
                                          TimestampUs batch_duration, const RefineWeights& weights) {
  if (batch_duration <= 0) throw DomainError("closest_event: batch duration must be positive");
  const SensorSize& s = index.sensor();
  const int cx = static_cast<int>(std::lround(s_b.x()));
  const int cy = static_cast<int>(std::lround(s_b.y()));
  const int half = weights.patch_size / 2;
  const double d = static_cast<double>(batch_duration);
  std::optional<ClosestEvent> best;
  for (int y = cy - half; y < cy - half + weights.patch_size; ++y) {
    for (int x = cx - half; x < cx - half + weights.patch_size; ++x) {
      if (!s.contains(x, y)) continue;
      const auto ts = index.times(x, y);
      if (ts.empty()) continue;
      // The spatial term is fixed per pixel, so only the events nearest t_f matter:
      // the last one at or before t_f and the first one after it. Without the
      // temporal term every event in the window ties and the earliest one wins.
      const auto it = weights.lambda_dist > 0.0
                          ? std::upper_bound(ts.begin(), ts.end(), t_f)
                          : std::lower_bound(ts.begin(), ts.end(), t_f - batch_duration / 2);
      const double spatial = (s_b - Vec2(x, y)).squaredNorm();
      const auto first = weights.lambda_dist > 0.0 && it != ts.begin() ? it - 1 : it;
      for (auto cand = first; cand != ts.end() && cand <= it; ++cand) {
        const TimestampUs t = *cand;
        if (2 * std::abs(t - t_f) > batch_duration) continue;
        const double dt = static_cast<double>(t_f - t) / d;
        const double dist = weights.lambda_dist * dt * dt + spatial;
        // Pixels are visited in row-major order, so only a strictly smaller D or an
        // earlier timestamp displaces the current best.
        if (!best || dist < best->distance || (dist == best->distance && t < best->event.t)) {
          const auto k = static_cast<std::size_t>(cand - ts.begin());
          best = ClosestEvent{Event{t, static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y),
                                    index.polarities(x, y)[k]},
                              dist};
        }
      }
    }
  }
  return best;
}

namespace {

constexpr double kCm = 100.0;

std::vector<SkinnedPoint> boundary_points(const ModelBundle& body, std::span<const BoundaryPair> pairs) {
  std::vector<SkinnedPoint> out;
  out.reserve(pairs.size());
  for (const BoundaryPair& p : pairs) {
    out.push_back(surface_point(body.skeleton, body.mesh, p.boundary.anchor.vertices, p.boundary.anchor.barycentric));
  }
  return out;
}

void silhouette_terms(const ModelBundle& body, const SkeletonPose& pose, std::span<const BoundaryPair> pairs,
                      std::span<const SkinnedPoint> points, Eigen::Ref<Eigen::VectorXd> r,
                      Eigen::MatrixXd* jacobian) {
  const PosedSkeleton posed(body.skeleton, pose);
  r.setZero();
  if (jacobian) jacobian->setZero(static_cast<Eigen::Index>(pairs.size()), kPoseParams);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const BoundaryPair& p = pairs[i];
    const Vec3 v = posed.point(points[i]);
    const auto uv = try_project(body.camera, v);
    if (!uv) continue;
    const auto row = static_cast<Eigen::Index>(i);
    r[row] = p.boundary.normal.dot(*uv - p.target);
    if (jacobian) {
      jacobian->row(row) =
          p.boundary.normal.transpose() * projection_jacobian(body.camera, v) * posed.jacobian(points[i]);
    }
  }
}

}  // namespace

Eigen::VectorXd residual_silhouette(const ModelBundle& body, const SkeletonPose& pose,
                                    std::span<const BoundaryPair> pairs, Eigen::MatrixXd* jacobian) {
  Eigen::VectorXd r(static_cast<Eigen::Index>(pairs.size()));
  silhouette_terms(body, pose, pairs, boundary_points(body, pairs), r, jacobian);
  return r;
}

Eigen::VectorXd residual_stability(const SkeletonModel& model, const SkeletonPose& pose,
                                   const SkeletonPose& anchor_pose) {
  const auto a = forward_kinematics(model, pose);
  const auto b = forward_kinematics(model, anchor_pose);
  Eigen::VectorXd r(3 * model.joint_count());
  for (int l = 0; l < model.joint_count(); ++l) {
    r.segment<3>(3 * l) = kCm * (a[static_cast<std::size_t>(l)] - b[static_cast<std::size_t>(l)]);
  }
  return r;
}

RefineResult refine_pose(const SkeletonPose& pose_hat, const PixelEventIndex& index, TimestampUs t_f,
                         TimestampUs batch_duration, const ModelBundle& body, const RefineWeights& weights) {
  weights.validate();
  RefineResult result;
  result.pose = pose_hat;
  const SkeletonModel& model = body.skeleton;
  const ModelBundle* bp = &body;

  auto stab_target = std::make_shared<std::vector<Vec3>>();
  {
    const PosedSkeleton posed(model, pose_hat);
    for (int l = 0; l < model.joint_count(); ++l) stab_target->push_back(posed.position(l));
  }
  BoundsSpec bounds = BoundsSpec::unbounded(kPoseParams);
  bounds.lower.head(kJointAngleDof) = model.angle_lower();
  bounds.upper.head(kJointAngleDof) = model.angle_upper();
  SolverOptions opts;
  opts.max_iterations = weights.solver_iterations;

  for (int it = 0; it < weights.icp_iterations; ++it) {
    auto pairs = std::make_shared<std::vector<BoundaryPair>>();
    for (const BoundaryPixel& b : extract_boundary(body, result.pose)) {
      const auto e = closest_event(b.position, index, t_f, batch_duration, weights);
      if (e) pairs->push_back({b, Vec2(e->event.x, e->event.y)});
    }
    if (pairs->empty()) {
      if (it == 0) result.no_op = true;
      break;
    }
    result.pair_counts.push_back(static_cast<int>(pairs->size()));
    result.e_sil_before.push_back(residual_silhouette(body, result.pose, *pairs).squaredNorm());

    std::vector<ResidualBlock> blocks(2);
    blocks[0].parameters.resize(kPoseParams);
    std::iota(blocks[0].parameters.begin(), blocks[0].parameters.end(), 0);
    blocks[0].residual_count = static_cast<int>(pairs->size());
    blocks[0].weight = weights.lambda_sil;
    auto points = std::make_shared<std::vector<SkinnedPoint>>(boundary_points(body, *pairs));
    blocks[0].evaluate = [pairs, points, bp](const Eigen::VectorXd& x, Eigen::Ref<Eigen::VectorXd> r,
                                             Eigen::MatrixXd* jac) {
      silhouette_terms(*bp, SkeletonPose::from_vector(x), *pairs, *points, r, jac);
    };
    blocks[1].parameters = blocks[0].parameters;
    blocks[1].residual_count = 3 * model.joint_count();
    blocks[1].weight = weights.lambda_stab;
    blocks[1].evaluate = [stab_target, bp](const Eigen::VectorXd& x, Eigen::Ref<Eigen::VectorXd> r,
                                           Eigen::MatrixXd* jac) {
      const PosedSkeleton posed(bp->skeleton, SkeletonPose::from_vector(x));
      for (int l = 0; l < bp->skeleton.joint_count(); ++l) {
        r.segment<3>(3 * l) = kCm * (posed.position(l) - (*stab_target)[static_cast<std::size_t>(l)]);
        if (jac) jac->block<3, kPoseParams>(3 * l, 0) = kCm * posed.jacobian(joint_point(l));
      }
    };
    const SolveResult res = minimize(blocks, result.pose.to_vector(), bounds, opts);
    result.solver_monotone = result.solver_monotone && res.report.monotone();
    result.pose = SkeletonPose::from_vector(res.x);
    result.e_sil_after.push_back(residual_silhouette(body, result.pose, *pairs).squaredNorm());
  }
  return result;
}

}  // namespace eventcap
