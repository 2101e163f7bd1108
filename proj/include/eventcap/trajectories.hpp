#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include <opencv2/core.hpp>

#include "eventcap/body_model.hpp"
#include "eventcap/event_core.hpp"
#include "json.hpp"

namespace eventcap {

enum class TrackDirection { kForward, kBackward };

struct TrackSample {
  TimestampUs t = 0;
  Vec2 position = Vec2::Zero();
};

/// Discretely tracked feature positions, time-ordered regardless of direction.
struct FeatureTrack {
  int feature_id = 0;
  std::vector<TrackSample> samples;
  TrackDirection direction = TrackDirection::kForward;
};

struct TrackerOptions {
  int max_features = 150;
  int patch_size = 11;
  int window_events = 300;    // sensor-wide events per registration step
  double min_distance = 5.0;  // feature spacing, pixels
  double quality_level = 0.05;
  int registration_iterations = 15;
  double max_residual = 0.35;  // RMS log-intensity residual at which a track is dropped
};

/// Shi-Tomasi (minimum eigenvalue) corners of a log image with non-maximum
/// suppression and a minimum spacing; at most `max_features`, strongest first.
/// An optional mask (non-zero = allowed) restricts where features may lie.
std::vector<Vec2> detect_features(const LatentImage& latent, int max_features,
                                  const cv::Mat1b* mask = nullptr, double min_distance = 5.0,
                                  double quality_level = 0.05, int border = 8);

/// Tracks seeds through the event stream starting at latent_start.timestamp and
/// moving towards t_stop (later for forward, earlier for backward).
///
/// Events are folded into a running log image (latent_start +/- p*C). Every
/// `window_events` events each live feature's template patch, cut from
/// latent_start, is registered against that image by inverse-compositional
/// Lucas-Kanade. A track ends when its residual exceeds max_residual or the patch
/// leaves the sensor.
std::vector<FeatureTrack> track_features(std::span<const Vec2> seeds, const EventStream& stream,
                                         const LatentImage& latent_start, TrackDirection direction,
                                         TimestampUs t_stop, double contrast,
                                         const TrackerOptions& options = {});

/// Forward/backward tracks joined at the midpoint of the batch.
struct StitchedTrack {
  int feature_id = 0;
  std::vector<TrackSample> samples;
  bool stitched = false;         // false: forward-only track kept as is
  double midpoint_gap = 0.0;     // |forward(t_mid) - backward(t_mid)| for stitched tracks
};

inline constexpr double kStitchThresholdPx = 4.0;

/// Position of a track at t by linear interpolation between samples; nullopt
/// outside the sampled interval.
std::optional<Vec2> track_position(std::span<const TrackSample> samples, TimestampUs t);

/// Greedy closest-pair association at t_mid. Pairs farther apart than `threshold`
/// stay unstitched; unmatched forward tracks are kept (flagged), unmatched backward
/// tracks are dropped. Stitched tracks take forward samples up to t_mid and
/// backward samples after it, shifted by the midpoint gap so the track stays
/// continuous. Output is sorted by forward feature id.
std::vector<StitchedTrack> stitch_bidirectional(std::span<const FeatureTrack> forward,
                                                std::span<const FeatureTrack> backward,
                                                TimestampUs t_mid,
                                                double threshold = kStitchThresholdPx);

/// Continuous 2D trajectory: a least-squares cubic B-spline with clamped uniform
/// knots, or a piecewise-linear curve for tracks with fewer than 4 samples.
class FeatureTrajectory {
 public:
  int feature_id = 0;
  bool stitched = true;
  TimestampUs t_begin = 0;
  TimestampUs t_end = 0;
  double rms_residual = 0.0;  // px, at the sample times

  std::vector<double> knots;        // normalized time in [0, 1]
  std::vector<Vec2> control_points;
  std::vector<TrackSample> linear;  // used when control_points is empty

  bool alive(TimestampUs t) const { return t >= t_begin && t <= t_end; }
  Vec2 evaluate(TimestampUs t) const;
  nlohmann::json to_json() const;
};

/// Throws DomainError when the track has no samples or all samples share one time.
FeatureTrajectory fit_spline(int feature_id, std::span<const TrackSample> samples,
                             bool stitched = true);

/// Binding of a feature to a point on the body surface (tau plus v_h).
struct SurfaceAnchor {
  bool valid = false;
  int face = -1;
  std::array<int, 3> vertices{0, 0, 0};
  Vec3 barycentric = Vec3::Zero();
};

struct CorrespondencePair {
  int feature = 0;                 // index into SlicedBatch::feature_ids
  Vec2 p_frame = Vec2::Zero();     // p_{i,h}
  Vec2 p_neighbor = Vec2::Zero();  // p_{j,h}
  double weight = 1.0;             // 0.5 for unstitched tracks
  SurfaceAnchor anchor;
};

/// P_{i,j}: correspondences from frame i to its neighbor j = i -/+ 1.
struct CorrespondenceSet {
  int frame = 0;
  int neighbor = 0;
  std::vector<CorrespondencePair> pairs;
};

struct SlicedBatch {
  std::vector<TimestampUs> frame_times;                   // N + 1 entries
  std::vector<int> feature_ids;                           // per trajectory
  std::vector<double> feature_weights;                    // per trajectory
  std::vector<std::vector<std::optional<Vec2>>> positions;  // [trajectory][frame]
  std::vector<CorrespondenceSet> correspondences;         // P_{1,0}, P_{1,2}, P_{2,1}, ...
};

std::vector<TimestampUs> tracking_frame_times(TimestampUs t_begin, TimestampUs t_end, int n);

/// Evaluates trajectories at N + 1 evenly spaced timestamps and emits, for every
/// interior frame i, P_{i,i-1} and P_{i,i+1} over trajectories alive (and in bounds)
/// at both timestamps.
SlicedBatch slice_trajectories(std::span<const FeatureTrajectory> trajectories, TimestampUs t_begin,
                               TimestampUs t_end, int n, SensorSize sensor);

/// Ray-casts each trajectory's frame-0 position against the mesh posed at `pose0`
/// and stores the hit (or tau = 0) on every correspondence pair. Returns the
/// per-trajectory anchors in SlicedBatch order.
std::vector<SurfaceAnchor> bind_anchors(SlicedBatch& batch, const SkeletonModel& model,
                                        const BodyMesh& mesh, const CameraIntrinsics& camera,
                                        const SkeletonPose& pose0);

}  // namespace eventcap
