#include "eventcap/trajectories.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>
#include <opencv2/imgproc.hpp>

#include "eventcap/raster.hpp"

namespace eventcap {
namespace {

double bilinear(const cv::Mat1d& img, double x, double y) {
  x = std::clamp(x, 0.0, img.cols - 1.0);
  y = std::clamp(y, 0.0, img.rows - 1.0);
  const int x0 = std::min(static_cast<int>(x), img.cols - 2);
  const int y0 = std::min(static_cast<int>(y), img.rows - 2);
  const double ax = x - x0;
  const double ay = y - y0;
  return (1 - ay) * ((1 - ax) * img(y0, x0) + ax * img(y0, x0 + 1)) +
         ay * ((1 - ax) * img(y0 + 1, x0) + ax * img(y0 + 1, x0 + 1));
}

// Translational inverse-compositional Lucas-Kanade state for one feature.
struct PatchTracker {
  int id = 0;
  Vec2 position = Vec2::Zero();
  std::vector<Vec2> offsets;
  Eigen::VectorXd templ;
  Eigen::Matrix<double, Eigen::Dynamic, 2> gradient;
  Eigen::Matrix2d hessian_inv = Eigen::Matrix2d::Zero();
  bool alive = true;
  FeatureTrack track;
};

bool patch_inside(const Vec2& p, int half, SensorSize sensor) {
  return p.x() - half >= 0.0 && p.y() - half >= 0.0 && p.x() + half <= sensor.width - 1.0 &&
         p.y() + half <= sensor.height - 1.0;
}

PatchTracker make_tracker(int id, const Vec2& seed, const cv::Mat1d& image, const cv::Mat1d& gx,
                          const cv::Mat1d& gy, int half) {
  PatchTracker tr;
  tr.id = id;
  tr.position = seed;
  const int n = (2 * half + 1) * (2 * half + 1);
  tr.templ.resize(n);
  tr.gradient.resize(n, 2);
  int k = 0;
  for (int dy = -half; dy <= half; ++dy) {
    for (int dx = -half; dx <= half; ++dx, ++k) {
      tr.offsets.emplace_back(dx, dy);
      const double x = seed.x() + dx;
      const double y = seed.y() + dy;
      tr.templ[k] = bilinear(image, x, y);
      tr.gradient(k, 0) = bilinear(gx, x, y);
      tr.gradient(k, 1) = bilinear(gy, x, y);
    }
  }
  tr.templ.array() -= tr.templ.mean();
  const Eigen::Matrix2d h = tr.gradient.transpose() * tr.gradient;
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(h);
  if (eig.eigenvalues()(0) < 1e-6 * n) {
    tr.alive = false;
  } else {
    tr.hessian_inv = h.inverse();
  }
  return tr;
}

// Registers the template against `image` starting at `guess`; returns the RMS
// residual, or +inf if the patch left the sensor.
double register_patch(PatchTracker& tr, const cv::Mat1d& image, Vec2 guess, int half,
                      int iterations, SensorSize sensor) {
  Eigen::VectorXd warped(tr.templ.size());
  auto sample = [&](const Vec2& p) {
    for (Eigen::Index k = 0; k < warped.size(); ++k) {
      const Vec2& o = tr.offsets[static_cast<std::size_t>(k)];
      warped[k] = bilinear(image, p.x() + o.x(), p.y() + o.y());
    }
    warped.array() -= warped.mean();
  };
  Vec2 p = guess;
  for (int it = 0; it < iterations; ++it) {
    if (!patch_inside(p, half, sensor)) return std::numeric_limits<double>::infinity();
    sample(p);
    const Vec2 delta = tr.hessian_inv * (tr.gradient.transpose() * (warped - tr.templ));
    p -= delta;
    if (!p.allFinite()) return std::numeric_limits<double>::infinity();
    if (delta.norm() < 1e-2) break;
  }
  if (!patch_inside(p, half, sensor)) return std::numeric_limits<double>::infinity();
  sample(p);
  tr.position = p;
  return std::sqrt((warped - tr.templ).squaredNorm() / static_cast<double>(warped.size()));
}

void push_sample(FeatureTrack& track, TimestampUs t, const Vec2& p) {
  if (!track.samples.empty() && track.samples.back().t == t) {
    track.samples.back().position = p;
  } else {
    track.samples.push_back({t, p});
  }
}

Vec2 predict(const FeatureTrack& track, const Vec2& current, TimestampUs t) {
  const auto& s = track.samples;
  if (s.size() < 2) return current;
  const auto& a = s[s.size() - 2];
  const auto& b = s.back();
  const double dt = static_cast<double>(b.t - a.t);
  if (dt == 0.0) return current;
  return current + (b.position - a.position) * (static_cast<double>(t - b.t) / dt);
}

// Cox-de Boor for a clamped cubic with m control points.
Eigen::VectorXd bspline_basis(const std::vector<double>& knots, int m, double u) {
  constexpr int p = 3;
  u = std::clamp(u, 0.0, 1.0);
  int span = m - 1;
  if (u < knots[static_cast<std::size_t>(m)]) {
    span = p;
    while (span < m - 1 && u >= knots[static_cast<std::size_t>(span + 1)]) ++span;
  }
  std::array<double, p + 1> n{}, left{}, right{};
  n[0] = 1.0;
  for (int j = 1; j <= p; ++j) {
    left[j] = u - knots[static_cast<std::size_t>(span + 1 - j)];
    right[j] = knots[static_cast<std::size_t>(span + j)] - u;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double temp = n[r] / (right[r + 1] + left[j - r]);
      n[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    n[j] = saved;
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(m);
  for (int r = 0; r <= p; ++r) out[span - p + r] = n[r];
  return out;
}

}  // namespace

std::vector<Vec2> detect_features(const LatentImage& latent, int max_features, const cv::Mat1b* mask,
                                  double min_distance, double quality_level, int border) {
  if (latent.log_pixels.empty()) throw DomainError("detect_features: empty image");
  if (max_features <= 0) return {};
  if (mask && (mask->rows != latent.log_pixels.rows || mask->cols != latent.log_pixels.cols)) {
    throw DomainError("detect_features: mask size does not match the image");
  }
  cv::Mat1f image;
  latent.log_pixels.convertTo(image, CV_32F);
  cv::Mat1f eig;
  cv::cornerMinEigenVal(image, eig, 5, 3);
  double max_val = 0.0;
  cv::minMaxLoc(eig, nullptr, &max_val);
  if (max_val <= 1e-9) return {};
  const double threshold = quality_level * max_val;

  struct Candidate {
    float score;
    Vec2 position;
  };
  std::vector<Candidate> candidates;
  for (int y = std::max(border, 1); y < eig.rows - std::max(border, 1); ++y) {
    for (int x = std::max(border, 1); x < eig.cols - std::max(border, 1); ++x) {
      const float v = eig(y, x);
      if (v < threshold) continue;
      if (mask && (*mask)(y, x) == 0) continue;
      bool peak = true;
      for (int dy = -1; dy <= 1 && peak; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if ((dx || dy) && eig(y + dy, x + dx) > v) {
            peak = false;
            break;
          }
        }
      }
      if (!peak) continue;
      // Parabolic sub-pixel peak.
      auto offset = [](double a, double b, double c) {
        const double d = a - 2 * b + c;
        return d < 0.0 ? std::clamp(0.5 * (a - c) / d, -0.5, 0.5) : 0.0;
      };
      const double ox = offset(eig(y, x - 1), v, eig(y, x + 1));
      const double oy = offset(eig(y - 1, x), v, eig(y + 1, x));
      candidates.push_back({v, Vec2(x + ox, y + oy)});
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  std::vector<Vec2> out;
  const double d2 = min_distance * min_distance;
  for (const Candidate& c : candidates) {
    const bool far = std::all_of(out.begin(), out.end(), [&](const Vec2& q) {
      return (q - c.position).squaredNorm() >= d2;
    });
    if (!far) continue;
    out.push_back(c.position);
    if (static_cast<int>(out.size()) == max_features) break;
  }
  return out;
}

std::vector<FeatureTrack> track_features(std::span<const Vec2> seeds, const EventStream& stream,
                                         const LatentImage& latent_start, TrackDirection direction,
                                         TimestampUs t_stop, double contrast,
                                         const TrackerOptions& options) {
  const SensorSize sensor = stream.sensor();
  if (latent_start.log_pixels.rows != sensor.height || latent_start.log_pixels.cols != sensor.width) {
    throw DomainError("track_features: latent image does not match the sensor");
  }
  if (options.patch_size < 3 || options.patch_size % 2 == 0) {
    throw DomainError("track_features: patch size must be odd and >= 3");
  }
  if (options.window_events <= 0) throw DomainError("track_features: window_events must be > 0");
  const bool forward = direction == TrackDirection::kForward;
  const TimestampUs t_start = latent_start.timestamp;
  if (forward ? t_stop < t_start : t_stop > t_start) {
    throw DomainError("track_features: t_stop lies on the wrong side of the start image");
  }
  const int half = options.patch_size / 2;

  cv::Mat1d gx, gy;
  cv::Sobel(latent_start.log_pixels, gx, CV_64F, 1, 0, 3, 1.0 / 8.0);
  cv::Sobel(latent_start.log_pixels, gy, CV_64F, 0, 1, 3, 1.0 / 8.0);

  std::vector<PatchTracker> trackers;
  trackers.reserve(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    PatchTracker tr = make_tracker(static_cast<int>(i), seeds[i], latent_start.log_pixels, gx, gy, half);
    tr.track.feature_id = static_cast<int>(i);
    tr.track.direction = direction;
    tr.track.samples.push_back({t_start, seeds[i]});
    if (!patch_inside(seeds[i], half, sensor)) tr.alive = false;
    trackers.push_back(std::move(tr));
  }

  cv::Mat1d image = latent_start.log_pixels.clone();
  // Between events a pixel sits on average half a threshold past its last crossing.
  cv::Mat1d pending(image.size(), 0.0);
  cv::Mat1d current;
  const auto events = forward ? stream.between(t_start + 1, t_stop) : stream.between(t_stop + 1, t_start);
  const std::size_t count = events.size();

  auto step_all = [&](TimestampUs t) {
    cv::add(image, pending, current);
    for (PatchTracker& tr : trackers) {
      if (!tr.alive) continue;
      const Vec2 guess = predict(tr.track, tr.position, t);
      const double rms = register_patch(tr, current, guess, half, options.registration_iterations, sensor);
      if (!(rms <= options.max_residual)) {
        tr.alive = false;
        continue;
      }
      push_sample(tr.track, t, tr.position);
    }
  };

  std::size_t since = 0;
  for (std::size_t k = 0; k < count; ++k) {
    const Event& e = forward ? events[k] : events[count - 1 - k];
    const double step = (forward ? 1.0 : -1.0) * e.polarity * contrast;
    image(e.y, e.x) += step;
    pending(e.y, e.x) = 0.5 * step;
    if (++since == static_cast<std::size_t>(options.window_events)) {
      since = 0;
      // Backward: the image now shows the brightness just before this event.
      TimestampUs t = forward ? e.t : e.t - 1;
      if (k + 1 == count) t = t_stop;
      step_all(t);
    }
  }
  if (since > 0) step_all(t_stop);

  std::vector<FeatureTrack> out;
  out.reserve(trackers.size());
  for (PatchTracker& tr : trackers) {
    if (!forward) std::reverse(tr.track.samples.begin(), tr.track.samples.end());
    out.push_back(std::move(tr.track));
  }
  return out;
}

std::optional<Vec2> track_position(std::span<const TrackSample> samples, TimestampUs t) {
  if (samples.empty() || t < samples.front().t || t > samples.back().t) return std::nullopt;
  auto it = std::lower_bound(samples.begin(), samples.end(), t,
                             [](const TrackSample& s, TimestampUs v) { return s.t < v; });
  if (it->t == t) return it->position;
  const TrackSample& b = *it;
  const TrackSample& a = *(it - 1);
  const double alpha = static_cast<double>(t - a.t) / static_cast<double>(b.t - a.t);
  return Vec2((1 - alpha) * a.position + alpha * b.position);
}

std::vector<StitchedTrack> stitch_bidirectional(std::span<const FeatureTrack> forward,
                                                std::span<const FeatureTrack> backward,
                                                TimestampUs t_mid, double threshold) {
  struct Pair {
    double distance;
    std::size_t f;
    std::size_t b;
  };
  std::vector<std::optional<Vec2>> fpos(forward.size()), bpos(backward.size());
  for (std::size_t i = 0; i < forward.size(); ++i) fpos[i] = track_position(forward[i].samples, t_mid);
  for (std::size_t j = 0; j < backward.size(); ++j) bpos[j] = track_position(backward[j].samples, t_mid);
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < forward.size(); ++i) {
    if (!fpos[i]) continue;
    for (std::size_t j = 0; j < backward.size(); ++j) {
      if (!bpos[j]) continue;
      const double d = (*fpos[i] - *bpos[j]).norm();
      if (d <= threshold) pairs.push_back({d, i, j});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const Pair& a, const Pair& b) { return a.distance < b.distance; });
  std::vector<int> match(forward.size(), -1);
  std::vector<double> gap(forward.size(), 0.0);
  std::vector<bool> used(backward.size(), false);
  for (const Pair& p : pairs) {
    if (match[p.f] >= 0 || used[p.b]) continue;
    match[p.f] = static_cast<int>(p.b);
    gap[p.f] = p.distance;
    used[p.b] = true;
  }

  std::vector<StitchedTrack> out;
  for (std::size_t i = 0; i < forward.size(); ++i) {
    StitchedTrack s;
    s.feature_id = forward[i].feature_id;
    if (match[i] < 0) {
      s.samples = forward[i].samples;
      s.stitched = false;
    } else {
      s.stitched = true;
      s.midpoint_gap = gap[i];
      for (const TrackSample& a : forward[i].samples) {
        if (a.t <= t_mid) s.samples.push_back(a);
      }
      const auto j = static_cast<std::size_t>(match[i]);
      const Vec2 offset = *fpos[i] - *bpos[j];
      for (const TrackSample& b : backward[j].samples) {
        if (b.t > t_mid) s.samples.push_back({b.t, b.position + offset});
      }
    }
    out.push_back(std::move(s));
  }
  std::stable_sort(out.begin(), out.end(), [](const StitchedTrack& a, const StitchedTrack& b) {
    return a.feature_id < b.feature_id;
  });
  return out;
}

Vec2 FeatureTrajectory::evaluate(TimestampUs t) const {
  if (control_points.empty()) {
    if (linear.empty()) throw DomainError("trajectory has no samples");
    if (t <= linear.front().t) return linear.front().position;
    if (t >= linear.back().t) return linear.back().position;
    return *track_position(linear, t);
  }
  const double span = static_cast<double>(t_end - t_begin);
  const double u = static_cast<double>(t - t_begin) / span;
  const int m = static_cast<int>(control_points.size());
  const Eigen::VectorXd basis = bspline_basis(knots, m, u);
  Vec2 p = Vec2::Zero();
  for (int i = 0; i < m; ++i) p += basis[i] * control_points[static_cast<std::size_t>(i)];
  return p;
}

nlohmann::json FeatureTrajectory::to_json() const {
  nlohmann::json j{{"feature_id", feature_id},
                   {"stitched", stitched},
                   {"t_begin_us", t_begin},
                   {"t_end_us", t_end},
                   {"rms_residual_px", rms_residual}};
  if (control_points.empty()) {
    nlohmann::json samples = nlohmann::json::array();
    for (const TrackSample& s : linear) samples.push_back({s.t, s.position.x(), s.position.y()});
    j["linear"] = samples;
  } else {
    j["knots"] = knots;
    nlohmann::json ctrl = nlohmann::json::array();
    for (const Vec2& c : control_points) ctrl.push_back({c.x(), c.y()});
    j["control_points"] = ctrl;
  }
  return j;
}

FeatureTrajectory fit_spline(int feature_id, std::span<const TrackSample> samples, bool stitched) {
  if (samples.empty()) throw DomainError("fit_spline: track has no samples");
  for (std::size_t i = 1; i < samples.size(); ++i) {
    if (samples[i].t <= samples[i - 1].t) {
      throw DomainError("fit_spline: sample times must be strictly increasing");
    }
  }
  if (samples.size() < 2) throw DomainError("fit_spline: need at least two distinct sample times");

  FeatureTrajectory traj;
  traj.feature_id = feature_id;
  traj.stitched = stitched;
  traj.t_begin = samples.front().t;
  traj.t_end = samples.back().t;
  const int n = static_cast<int>(samples.size());
  if (n < 4) {
    traj.linear.assign(samples.begin(), samples.end());
    return traj;
  }

  const int m = std::max(4, n / 5);
  traj.knots.assign(static_cast<std::size_t>(m + 4), 0.0);
  for (int i = 4; i < m; ++i) traj.knots[static_cast<std::size_t>(i)] = (i - 3.0) / (m - 3.0);
  for (int i = m; i < m + 4; ++i) traj.knots[static_cast<std::size_t>(i)] = 1.0;

  // Sample rows plus a faint second-difference prior on the control polygon; it only
  // matters when a knot span happens to contain no samples.
  const int prior_rows = m - 2;
  const double prior = 1e-4;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + prior_rows, m);
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n + prior_rows, 2);
  const double span = static_cast<double>(traj.t_end - traj.t_begin);
  for (int i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    a.row(i) = bspline_basis(traj.knots, m, static_cast<double>(s.t - traj.t_begin) / span).transpose();
    b.row(i) = s.position.transpose();
  }
  for (int r = 0; r < prior_rows; ++r) {
    a(n + r, r) = prior;
    a(n + r, r + 1) = -2 * prior;
    a(n + r, r + 2) = prior;
  }
  const Eigen::MatrixXd ctrl = a.completeOrthogonalDecomposition().solve(b);
  for (int i = 0; i < m; ++i) traj.control_points.emplace_back(ctrl(i, 0), ctrl(i, 1));
  double sq = 0.0;
  for (int i = 0; i < n; ++i) {
    sq += (traj.evaluate(samples[static_cast<std::size_t>(i)].t) - samples[static_cast<std::size_t>(i)].position)
              .squaredNorm();
  }
  traj.rms_residual = std::sqrt(sq / n);
  return traj;
}

std::vector<TimestampUs> tracking_frame_times(TimestampUs t_begin, TimestampUs t_end, int n) {
  if (n < 2) throw DomainError("tracking frames: N must be >= 2");
  if (t_end <= t_begin) throw DomainError("tracking frames: empty interval");
  std::vector<TimestampUs> out;
  out.reserve(static_cast<std::size_t>(n) + 1);
  const double delta = static_cast<double>(t_end - t_begin);
  for (int f = 0; f <= n; ++f) out.push_back(t_begin + std::llround(f * delta / n));
  return out;
}

SlicedBatch slice_trajectories(std::span<const FeatureTrajectory> trajectories, TimestampUs t_begin,
                               TimestampUs t_end, int n, SensorSize sensor) {
  SlicedBatch out;
  out.frame_times = tracking_frame_times(t_begin, t_end, n);
  for (const FeatureTrajectory& tr : trajectories) {
    std::vector<std::optional<Vec2>> row(out.frame_times.size());
    for (std::size_t f = 0; f < out.frame_times.size(); ++f) {
      if (!tr.alive(out.frame_times[f])) continue;
      const Vec2 p = tr.evaluate(out.frame_times[f]);
      if (sensor.contains(p)) row[f] = p;
    }
    out.feature_ids.push_back(tr.feature_id);
    out.feature_weights.push_back(tr.stitched ? 1.0 : 0.5);
    out.positions.push_back(std::move(row));
  }
  for (int i = 1; i < n; ++i) {
    for (int j : {i - 1, i + 1}) {
      CorrespondenceSet set;
      set.frame = i;
      set.neighbor = j;
      for (std::size_t h = 0; h < out.positions.size(); ++h) {
        const auto& pi = out.positions[h][static_cast<std::size_t>(i)];
        const auto& pj = out.positions[h][static_cast<std::size_t>(j)];
        if (!pi || !pj) continue;
        set.pairs.push_back({static_cast<int>(h), *pi, *pj, out.feature_weights[h], {}});
      }
      out.correspondences.push_back(std::move(set));
    }
  }
  return out;
}

std::vector<SurfaceAnchor> bind_anchors(SlicedBatch& batch, const SkeletonModel& model,
                                        const BodyMesh& mesh, const CameraIntrinsics& camera,
                                        const SkeletonPose& pose0) {
  const std::vector<Vec3> verts = skin_vertices(model, mesh, pose0);
  const DepthRaster raster(verts, mesh.faces, camera);
  std::vector<SurfaceAnchor> anchors(batch.positions.size());
  for (std::size_t h = 0; h < batch.positions.size(); ++h) {
    const auto& p0 = batch.positions[h].front();
    if (!p0) continue;
    const int x = static_cast<int>(std::lround(p0->x()));
    const int y = static_cast<int>(std::lround(p0->y()));
    if (!raster.foreground(x, y)) continue;
    SurfaceAnchor& a = anchors[h];
    a.valid = true;
    a.face = raster.face(x, y);
    a.vertices = mesh.faces[static_cast<std::size_t>(a.face)];
    a.barycentric = raster.barycentric(a.face, *p0);
  }
  for (CorrespondenceSet& set : batch.correspondences) {
    for (CorrespondencePair& pair : set.pairs) pair.anchor = anchors[static_cast<std::size_t>(pair.feature)];
  }
  return anchors;
}

}  // namespace eventcap
