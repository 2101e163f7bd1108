#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "eventcap/batch_opt.hpp"
#include "eventcap/body_model.hpp"
#include "eventcap/event_core.hpp"
#include "json.hpp"

namespace eventcap {

/// Ground-truth motion sampled on a regular clock.
struct MotionClip {
  std::vector<TimestampUs> times;
  std::vector<SkeletonPose> poses;

  double duration_seconds() const;
  /// Per-parameter linear interpolation, clamped to the clip's ends.
  SkeletonPose sample(TimestampUs t) const;
  /// Throws DomainError on non-increasing times, size mismatch or out-of-bounds poses.
  void validate(const SkeletonModel& model) const;
};

void save_clip(const std::filesystem::path& path, const MotionClip& clip);
MotionClip load_clip(const std::filesystem::path& path);

/// The default benchmark: fast two-arm swings with elbow flexion, a spine twist, a
/// sway of the root and a jump with knee bend, `duration_us` long at `rate_hz`.
MotionClip benchmark_clip(const SkeletonModel& model, TimestampUs duration_us, double rate_hz = 2000.0);

struct SceneOptions {
  int checker_px = 12;            // background checker size
  double background_log_contrast = 0.5;
  double background_noise = 0.05;  // uniform log-brightness noise amplitude
  double body_cell_m = 0.09;       // body texture cell size in rest coordinates
  double albedo_dark = 0.45;
  double albedo_light = 0.85;
  double ambient = 0.35;
  Vec3 light_direction{-0.3, -0.5, -1.0};
  int supersample = 3;             // sub-samples per pixel side
  std::uint64_t seed = 7;
};

/// Renders log-brightness images of the posed body over a static textured background.
class LatentRenderer {
 public:
  LatentRenderer(const ModelBundle& body, const SceneOptions& options);

  cv::Mat1d render(const SkeletonPose& pose) const;
  const cv::Mat1d& background() const { return background_; }

 private:
  const ModelBundle* body_;
  SceneOptions options_;
  cv::Mat1d background_;  // log DN
};

/// Log images at the clip's sample times; empty clip -> empty sequence.
std::vector<LatentImage> render_latent(const MotionClip& clip, const ModelBundle& body,
                                       const SceneOptions& options);

struct DetectionNoise {
  double sigma_2d_px = 2.0;
  double sigma_3d_mm = 20.0;
  double dropout = 0.05;
};

/// Ground-truth 2D projections and root-relative 3D joints at `frame_times`, plus
/// seeded Gaussian noise and Bernoulli dropout per entry.
std::vector<DetectionSet> synthesize_detections(const MotionClip& clip, const ModelBundle& body,
                                                std::span<const TimestampUs> frame_times,
                                                const DetectionNoise& noise, std::uint64_t seed);

struct ProcrustesResult {
  std::vector<Vec3> aligned;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
};

/// Rotation + translation (no scale) of `predicted` that best fits `truth` in the
/// least-squares sense. Throws DomainError for fewer than 3 points or size mismatch.
ProcrustesResult procrustes_align(std::span<const Vec3> predicted, std::span<const Vec3> truth);

/// Mean per-joint distance after alignment, in millimeters.
double aligned_joint_error_mm(const SkeletonModel& model, const SkeletonPose& predicted,
                              const SkeletonPose& truth);

struct TimedPose {
  TimestampUs t = 0;
  SkeletonPose pose;
};

struct EvalReport {
  std::vector<TimestampUs> frame_times;
  std::vector<double> per_frame_ae_mm;
  double mean_ae_mm = 0.0;
  double std_ae_mm = 0.0;
  std::uintmax_t input_bytes = 0;
  double capture_seconds = 0.0;
  double bytes_per_second = 0.0;
  double baseline_bytes_per_second = 0.0;  // 8-bit images at sensor resolution, 1000 fps

  nlohmann::json to_json() const;
};

/// AE on every stride-th output pose against the clip.
EvalReport evaluate(std::span<const TimedPose> output, const MotionClip& clip, const SkeletonModel& model,
                    int stride = 10);

/// Sets the throughput fields from on-disk sizes: the event file plus every frame
/// image and sidecar, over the span between the first and last frame centers.
void account_throughput(EvalReport& report, const std::filesystem::path& event_file,
                        std::span<const std::filesystem::path> frame_files, double capture_seconds,
                        SensorSize sensor);

struct MethodRow {
  std::string name;
  EvalReport report;
};
std::string comparison_table(std::span<const MethodRow> rows);

struct SynthOptions {
  std::uint64_t seed = 7;
  double capture_seconds = 2.0;  // span between the first and last intensity frame centers
  double latent_rate_hz = 2000.0;
  EventCameraConfig camera;
  DetectionNoise noise;
  SceneOptions scene;

  nlohmann::json to_json() const;
  static SynthOptions from_json(const nlohmann::json& j);
};

/// Files of a synthetic dataset directory.
struct DatasetPaths {
  std::filesystem::path root;
  std::filesystem::path events() const { return root / "events.bin"; }
  std::filesystem::path frames_dir() const { return root / "frames"; }
  std::filesystem::path detections() const { return root / "detections.json"; }
  std::filesystem::path model() const { return root / "model.json"; }
  std::filesystem::path clip() const { return root / "clip.json"; }
  std::filesystem::path camera() const { return root / "camera.json"; }
  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::vector<std::filesystem::path> frame_files() const;  // sorted PNGs
};

struct SynthSummary {
  std::size_t event_count = 0;
  std::size_t frame_count = 0;
  std::size_t latent_samples = 0;
  double events_per_second = 0.0;
};

/// Renders the benchmark clip, simulates events and frames, synthesizes detections
/// and writes everything under `out_dir`. Rendering is streamed into the simulator.
SynthSummary write_synthetic_dataset(const std::filesystem::path& out_dir, const ModelBundle& body,
                                     const SynthOptions& options);

}  // namespace eventcap
