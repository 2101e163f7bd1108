#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "eventcap/batch_opt.hpp"
#include "eventcap/body_model.hpp"
#include "eventcap/event_core.hpp"
#include "eventcap/refine.hpp"
#include "eventcap/solver.hpp"
#include "eventcap/trajectories.hpp"
#include "json.hpp"

namespace eventcap {

struct PipelineConfig {
  int tracking_fps = 1000;
  EnergyWeights energy;
  RefineWeights refine;
  TrackerOptions tracker;
  SolverOptions solver;
  bool disable_batch = false;   // poses = interpolated endpoint initialization
  bool disable_refine = false;
  bool mask_features = true;    // detect features only near the initial silhouette
  std::uint64_t seed = 7;

  /// Throws ConfigError on negative weights or a tracking rate that is not an
  /// integer multiple of the intensity rate.
  void validate(double intensity_fps) const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static PipelineConfig from_json(const nlohmann::json& j);
};

PipelineConfig load_pipeline_config(const std::filesystem::path& path);

/// Input files of one recording.
struct PipelineInputs {
  std::filesystem::path events;
  std::vector<std::filesystem::path> frames;  // PNGs with JSON sidecars, time-ordered
  std::filesystem::path detections;
  std::filesystem::path model;
  std::filesystem::path camera;

  /// events.bin (or events.csv), frames/*.png, detections.json, model.json, camera.json.
  static PipelineInputs from_directory(const std::filesystem::path& dir);
};

struct MotionFrame {
  TimestampUs t = 0;
  SkeletonPose pose;
  int batch = 0;
  double e_sil_before = 0.0;  // first ICP iteration; 0 when refinement is off or a no-op
  double e_sil_after = 0.0;   // last ICP iteration
  bool refine_no_op = false;
};

struct MotionOutput {
  int tracking_fps = 1000;
  std::vector<MotionFrame> frames;

  nlohmann::json to_json() const;
  static MotionOutput from_json(const nlohmann::json& j);
};

struct CaptureResult {
  MotionOutput motion;
  nlohmann::json report;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Trajectories -> batch optimization -> refinement for every pair of adjacent
/// intensity frames. Frame N of batch k is frame 0 of batch k+1; the later batch's
/// pose is emitted. Events and frames are read one batch at a time.
CaptureResult run_capture(const PipelineConfig& config, const PipelineInputs& inputs,
                          const ProgressFn& progress = {});

enum class MotionFormat { kJson, kBvh };

void export_motion(const std::filesystem::path& path, const MotionOutput& motion, const SkeletonModel& model,
                   MotionFormat format);
MotionOutput import_motion_json(const std::filesystem::path& path);

/// Per-frame joint positions recomputed from a BVH file written by export_motion.
std::vector<std::vector<Vec3>> bvh_joint_positions(const std::filesystem::path& path);

/// Rotation as Z-X-Y Euler angles in radians: R = Rz(a) * Rx(b) * Ry(c).
Vec3 rotation_to_zxy(const Mat3& r);
Mat3 zxy_to_rotation(const Vec3& zxy);

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j, int indent = 1);

}  // namespace eventcap
