#include "eventcap/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <Eigen/Geometry>
#include <opencv2/imgproc.hpp>

#include "eventcap/event_io.hpp"
#include "eventcap/raster.hpp"

namespace eventcap {
namespace {

using nlohmann::json;

// Reads known keys from a JSON object and rejects anything else.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
  }
  template <typename T>
  void get(const char* key, T& value) {
    known_.insert(key);
    if (!j_.contains(key)) return;
    try {
      value = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: bad value for " + name_ + "." + key + ": " + e.what());
    }
  }
  const json* child(const char* key) {
    known_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!known_.count(k)) throw ConfigError("config: unknown key " + name_ + "." + k);
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> known_;
};

std::pair<TimestampUs, TimestampUs> read_frame_meta(const std::filesystem::path& png) {
  std::ifstream in(frame_sidecar_path(png));
  if (!in) throw IoError("missing sidecar for frame " + png.string());
  try {
    json j;
    in >> j;
    return {j.at("center_timestamp_us").get<TimestampUs>(), j.at("exposure_us").get<TimestampUs>()};
  } catch (const json::exception& e) {
    throw IoError("bad sidecar for frame " + png.string() + ": " + e.what());
  }
}

cv::Mat1b silhouette_mask(const ModelBundle& body, const SkeletonPose& pose, int dilate_px) {
  const std::vector<Vec3> verts = skin_vertices(body.skeleton, body.mesh, pose);
  const DepthRaster raster(verts, body.mesh.faces, body.camera);
  const SensorSize s = body.camera.sensor;
  cv::Mat1b mask(s.height, s.width, static_cast<unsigned char>(0));
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      if (raster.foreground(x, y)) mask(y, x) = 255;
    }
  }
  if (dilate_px > 0) {
    cv::dilate(mask, mask,
               cv::getStructuringElement(cv::MORPH_ELLIPSE, cv::Size(2 * dilate_px + 1, 2 * dilate_px + 1)));
  }
  return mask;
}

json solver_json(const SolverReport& r) {
  return {{"iterations", r.iterations},
          {"accepted_steps", r.accepted_steps},
          {"rejected_steps", r.rejected_steps},
          {"initial_cost", r.initial_cost},
          {"final_cost", r.final_cost},
          {"monotone", r.monotone()},
          {"termination", to_string(r.termination)}};
}

json pose_json(const SkeletonPose& p) {
  const PoseVector v = p.to_vector();
  return std::vector<double>(v.data(), v.data() + kPoseParams);
}

SkeletonPose pose_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != kPoseParams) throw IoError("pose vectors must have 33 entries");
  return SkeletonPose::from_vector(Eigen::Map<const Eigen::VectorXd>(v.data(), kPoseParams));
}

// Local rotation of a joint from its DOF angles.
Mat3 local_rotation(const Joint& joint, const SkeletonPose& pose) {
  Mat3 r = Mat3::Identity();
  for (std::size_t a = 0; a < joint.axes.size(); ++a) {
    r = r * Eigen::AngleAxisd(pose.theta[joint.dof_begin + static_cast<int>(a)], joint.axes[a]).toRotationMatrix();
  }
  return r;
}

}  // namespace

void PipelineConfig::validate(double intensity_fps) const {
  energy.validate();
  refine.validate();
  if (tracking_fps <= 0) throw ConfigError("tracking_fps must be positive");
  if (!(intensity_fps > 0.0)) throw ConfigError("intensity fps must be positive");
  const double ratio = tracking_fps / intensity_fps;
  if (std::abs(ratio - std::round(ratio)) > 1e-9 || std::round(ratio) < 2) {
    throw ConfigError("tracking_fps must be an integer multiple (>= 2) of the intensity frame rate");
  }
  if (tracker.max_features < 0 || tracker.window_events <= 0 || tracker.patch_size < 3 ||
      tracker.patch_size % 2 == 0 || !(tracker.max_residual > 0.0)) {
    throw ConfigError("tracker settings out of range");
  }
  if (solver.max_iterations < 1 || !(solver.initial_damping > 0.0)) throw ConfigError("solver settings out of range");
}

json PipelineConfig::to_json() const {
  return {{"tracking_fps", tracking_fps},
          {"energy",
           {{"lambda_adj", energy.lambda_adj},
            {"lambda_2d", energy.lambda_2d},
            {"lambda_3d", energy.lambda_3d},
            {"lambda_temp", energy.lambda_temp}}},
          {"refine",
           {{"lambda_sil", refine.lambda_sil},
            {"lambda_stab", refine.lambda_stab},
            {"lambda_dist", refine.lambda_dist},
            {"icp_iterations", refine.icp_iterations},
            {"patch_size", refine.patch_size},
            {"solver_iterations", refine.solver_iterations}}},
          {"tracker",
           {{"max_features", tracker.max_features},
            {"patch_size", tracker.patch_size},
            {"window_events", tracker.window_events},
            {"min_distance", tracker.min_distance},
            {"quality_level", tracker.quality_level},
            {"registration_iterations", tracker.registration_iterations},
            {"max_residual", tracker.max_residual}}},
          {"solver",
           {{"initial_damping", solver.initial_damping},
            {"f_tol", solver.f_tol},
            {"g_tol", solver.g_tol},
            {"max_iterations", solver.max_iterations}}},
          {"disable_batch", disable_batch},
          {"disable_refine", disable_refine},
          {"mask_features", mask_features},
          {"seed", seed}};
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  Section top(j, "config");
  top.get("tracking_fps", c.tracking_fps);
  top.get("disable_batch", c.disable_batch);
  top.get("disable_refine", c.disable_refine);
  top.get("mask_features", c.mask_features);
  top.get("seed", c.seed);
  if (const json* e = top.child("energy")) {
    Section s(*e, "energy");
    s.get("lambda_adj", c.energy.lambda_adj);
    s.get("lambda_2d", c.energy.lambda_2d);
    s.get("lambda_3d", c.energy.lambda_3d);
    s.get("lambda_temp", c.energy.lambda_temp);
    s.finish();
  }
  if (const json* e = top.child("refine")) {
    Section s(*e, "refine");
    s.get("lambda_sil", c.refine.lambda_sil);
    s.get("lambda_stab", c.refine.lambda_stab);
    s.get("lambda_dist", c.refine.lambda_dist);
    s.get("icp_iterations", c.refine.icp_iterations);
    s.get("patch_size", c.refine.patch_size);
    s.get("solver_iterations", c.refine.solver_iterations);
    s.finish();
  }
  if (const json* e = top.child("tracker")) {
    Section s(*e, "tracker");
    s.get("max_features", c.tracker.max_features);
    s.get("patch_size", c.tracker.patch_size);
    s.get("window_events", c.tracker.window_events);
    s.get("min_distance", c.tracker.min_distance);
    s.get("quality_level", c.tracker.quality_level);
    s.get("registration_iterations", c.tracker.registration_iterations);
    s.get("max_residual", c.tracker.max_residual);
    s.finish();
  }
  if (const json* e = top.child("solver")) {
    Section s(*e, "solver");
    s.get("initial_damping", c.solver.initial_damping);
    s.get("f_tol", c.solver.f_tol);
    s.get("g_tol", c.solver.g_tol);
    s.get("max_iterations", c.solver.max_iterations);
    s.finish();
  }
  top.finish();
  return c;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return PipelineConfig::from_json(j);
}

PipelineInputs PipelineInputs::from_directory(const std::filesystem::path& dir) {
  PipelineInputs in;
  in.events = dir / "events.bin";
  if (!std::filesystem::exists(in.events) && std::filesystem::exists(dir / "events.csv")) in.events = dir / "events.csv";
  in.detections = dir / "detections.json";
  in.model = dir / "model.json";
  in.camera = dir / "camera.json";
  for (const auto& p : {in.events, in.detections, in.model, in.camera}) {
    if (!std::filesystem::exists(p)) throw IoError("missing input file " + p.string());
  }
  const auto frames_dir = dir / "frames";
  if (!std::filesystem::is_directory(frames_dir)) throw IoError("missing frames directory " + frames_dir.string());
  for (const auto& e : std::filesystem::directory_iterator(frames_dir)) {
    if (e.path().extension() == ".png") in.frames.push_back(e.path());
  }
  std::sort(in.frames.begin(), in.frames.end());
  return in;
}

json MotionOutput::to_json() const {
  json frames_j = json::array();
  for (const MotionFrame& f : frames) {
    frames_j.push_back({{"t_us", f.t},
                        {"batch", f.batch},
                        {"pose", pose_json(f.pose)},
                        {"e_sil_before", f.e_sil_before},
                        {"e_sil_after", f.e_sil_after},
                        {"refine_no_op", f.refine_no_op}});
  }
  return {{"tracking_fps", tracking_fps}, {"frames", frames_j}};
}

MotionOutput MotionOutput::from_json(const json& j) {
  MotionOutput m;
  try {
    m.tracking_fps = j.at("tracking_fps").get<int>();
    for (const auto& f : j.at("frames")) {
      MotionFrame fr;
      fr.t = f.at("t_us").get<TimestampUs>();
      fr.batch = f.value("batch", 0);
      fr.pose = pose_from_json(f.at("pose"));
      fr.e_sil_before = f.value("e_sil_before", 0.0);
      fr.e_sil_after = f.value("e_sil_after", 0.0);
      fr.refine_no_op = f.value("refine_no_op", false);
      m.frames.push_back(fr);
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("motion json: ") + e.what());
  }
  return m;
}

CaptureResult run_capture(const PipelineConfig& config, const PipelineInputs& inputs, const ProgressFn& progress) {
  const auto started = std::chrono::steady_clock::now();
  auto log = [&](const std::string& msg) {
    if (progress) progress(msg);
  };
  const ModelBundle body = load_model_file(inputs.model);
  const EventCameraConfig cam = load_camera_config(inputs.camera);
  config.validate(cam.intensity_fps);
  if (!(body.camera.sensor == cam.sensor)) throw ConfigError("model camera and event camera sensor sizes differ");
  const std::vector<DetectionSet> detections = read_detections(inputs.detections, body.skeleton);
  if (inputs.frames.size() < 2) throw DomainError("need at least two intensity frames");

  std::vector<TimestampUs> centers;
  for (const auto& f : inputs.frames) {
    const auto [center, exposure] = read_frame_meta(f);
    if (exposure != cam.exposure_us) {
      throw DomainError("misaligned input: frame " + f.filename().string() + " exposure " + std::to_string(exposure) +
                        " us differs from the camera config (" + std::to_string(cam.exposure_us) + " us)");
    }
    if (!centers.empty() && center <= centers.back()) {
      throw DomainError("misaligned input: frame timestamps must be strictly increasing (" + f.filename().string() + ")");
    }
    centers.push_back(center);
  }
  std::map<TimestampUs, const DetectionSet*> det_at;
  for (const DetectionSet& d : detections) {
    if (!std::binary_search(centers.begin(), centers.end(), d.t)) {
      throw DomainError("misaligned input: detection at t=" + std::to_string(d.t) + " us matches no intensity frame");
    }
    det_at[d.t] = &d;
  }
  json warnings = json::array();
  auto detection_for = [&](std::size_t k) -> const DetectionSet* {
    const auto it = det_at.find(centers[k]);
    return it == det_at.end() ? nullptr : it->second;
  };
  for (std::size_t k = 0; k < centers.size(); ++k) {
    if (!detection_for(k)) {
      const std::string w = "no detections for frame at t=" + std::to_string(centers[k]) + " us; using fallback";
      warnings.push_back(w);
      log("warning: " + w);
    }
  }

  EventFileSource source(inputs.events, cam.sensor);
  CaptureResult result;
  result.motion.tracking_fps = config.tracking_fps;
  json batches = json::array();
  std::optional<SkeletonPose> previous_terminal;
  std::optional<LatentImage> cached_latent;
  bool all_monotone = true;
  int solver_runs = 0;

  for (std::size_t k = 0; k + 1 < centers.size(); ++k) {
    const TimestampUs t0 = centers[k];
    const TimestampUs t1 = centers[k + 1];
    const TimestampUs span = t1 - t0;
    const int n = static_cast<int>(std::llround(us_to_seconds(span) * config.tracking_fps));
    if (n < 2) throw DomainError("intensity frames too close for the tracking rate");
    const bool last = k + 2 == centers.size();
    const TimestampUs lo = std::max<TimestampUs>(0, std::min(t0 - cam.exposure_us / 2, t0 - span / 2));
    const TimestampUs hi = std::max(t1 - cam.exposure_us / 2 + cam.exposure_us, t1 + span / 2);
    const EventStream events = source.window(lo, hi);

    const LatentImage latent0 = cached_latent ? *cached_latent : edi_sharpen(read_frame(inputs.frames[k]), events, cam).latent;
    const LatentImage latent1 = edi_sharpen(read_frame(inputs.frames[k + 1]), events, cam).latent;
    cached_latent = latent1;
    if (latent0.timestamp != t0 || latent1.timestamp != t1) throw DomainError("frame sidecar and image disagree");

    const std::vector<TimestampUs> times = tracking_frame_times(t0, t1, n);
    const DetectionSet* d0 = detection_for(k);
    const DetectionSet* d1 = detection_for(k + 1);
    const BatchInit init = initialize_batch(d0, d1, times, body, config.energy, previous_terminal);
    ++solver_runs;
    all_monotone = all_monotone && init.report.monotone();

    Batch batch;
    batch.index = static_cast<int>(k);
    batch.frame_timestamps = times;
    batch.poses = init.poses;
    batch.aux_translation = init.t_prime;
    if (d0 && d0->any_present()) batch.detections_begin = *d0;
    if (d1 && d1->any_present()) batch.detections_end = *d1;
    if (!batch.detections_begin) batch.prior_pose = previous_terminal;

    json bj{{"index", k},
            {"t0_us", t0},
            {"t1_us", t1},
            {"n", n},
            {"events", events.size()},
            {"init_reliable", init.reliable},
            {"init_solver", solver_json(init.report)}};
    if (!init.reliable) {
      const std::string w = "batch " + std::to_string(k) + ": endpoint initialization unreliable";
      warnings.push_back(w);
      log("warning: " + w);
    }

    if (!config.disable_batch) {
      const int border = config.tracker.patch_size / 2 + 1;
      const cv::Mat1b mask0 = silhouette_mask(body, batch.poses.front(), 4);
      const cv::Mat1b mask1 = silhouette_mask(body, batch.poses.back(), 4);
      const auto seeds_f = detect_features(latent0, config.tracker.max_features, config.mask_features ? &mask0 : nullptr,
                                           config.tracker.min_distance, config.tracker.quality_level, border);
      const auto seeds_b = detect_features(latent1, config.tracker.max_features, config.mask_features ? &mask1 : nullptr,
                                           config.tracker.min_distance, config.tracker.quality_level, border);
      const auto fwd = track_features(seeds_f, events, latent0, TrackDirection::kForward, t1,
                                      cam.contrast_threshold, config.tracker);
      const auto bwd = track_features(seeds_b, events, latent1, TrackDirection::kBackward, t0,
                                      cam.contrast_threshold, config.tracker);
      const auto stitched = stitch_bidirectional(fwd, bwd, t0 + span / 2);
      std::vector<FeatureTrajectory> trajectories;
      int stitched_count = 0;
      for (const StitchedTrack& s : stitched) {
        if (s.samples.size() < 2) continue;
        trajectories.push_back(fit_spline(s.feature_id, s.samples, s.stitched));
        stitched_count += s.stitched ? 1 : 0;
      }
      SlicedBatch sliced = slice_trajectories(trajectories, t0, t1, n, cam.sensor);
      const auto anchors = bind_anchors(sliced, body.skeleton, body.mesh, body.camera, batch.poses.front());
      batch.correspondences = std::move(sliced.correspondences);
      const BatchReport rep = optimize_batch(batch, body, config.energy, config.solver);
      ++solver_runs;
      all_monotone = all_monotone && rep.solver.monotone();
      bj["features_forward"] = seeds_f.size();
      bj["features_backward"] = seeds_b.size();
      bj["trajectories"] = trajectories.size();
      bj["stitched"] = stitched_count;
      bj["anchored"] = std::count_if(anchors.begin(), anchors.end(), [](const SurfaceAnchor& a) { return a.valid; });
      bj["correspondences"] = rep.correspondence_count;
      bj["dropped_correspondences"] = rep.dropped_correspondences;
      bj["flagged_joints"] = rep.flagged_joints;
      bj["batch_solver"] = solver_json(rep.solver);
    }
    previous_terminal = batch.poses.back();

    const PixelEventIndex index(events);
    const int emit = last ? n + 1 : n;
    int no_op = 0;
    int sil_decreased = 0;
    for (int f = 0; f < emit; ++f) {
      MotionFrame frame;
      frame.t = times[static_cast<std::size_t>(f)];
      frame.batch = static_cast<int>(k);
      frame.pose = batch.poses[static_cast<std::size_t>(f)];
      if (!config.disable_refine) {
        const RefineResult r = refine_pose(frame.pose, index, frame.t, span, body, config.refine);
        solver_runs += static_cast<int>(r.e_sil_after.size());
        all_monotone = all_monotone && r.solver_monotone;
        frame.pose = r.pose;
        frame.refine_no_op = r.no_op;
        no_op += r.no_op ? 1 : 0;
        if (!r.e_sil_before.empty()) {
          frame.e_sil_before = r.e_sil_before.front();
          frame.e_sil_after = r.e_sil_after.back();
          sil_decreased += frame.e_sil_after <= frame.e_sil_before ? 1 : 0;
        }
      }
      result.motion.frames.push_back(frame);
    }
    if (!config.disable_refine) {
      bj["refine_no_op_frames"] = no_op;
      bj["refine_e_sil_decreased_frames"] = sil_decreased;
    }
    batches.push_back(bj);
    log("batch " + std::to_string(k + 1) + "/" + std::to_string(centers.size() - 1) + " done (" +
        std::to_string(events.size()) + " events)");
  }

  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  result.report = {{"config", config.to_json()},
                   {"inputs",
                    {{"events", inputs.events.string()},
                     {"detections", inputs.detections.string()},
                     {"model", inputs.model.string()},
                     {"camera", inputs.camera.string()},
                     {"frames", inputs.frames.size()}}},
                   {"output_frames", result.motion.frames.size()},
                   {"solver_runs", solver_runs},
                   {"all_solver_runs_monotone", all_monotone},
                   {"warnings", warnings},
                   {"batches", batches},
                   {"elapsed_seconds", elapsed}};
  return result;
}

Vec3 rotation_to_zxy(const Mat3& r) {
  const double b = std::asin(std::clamp(r(2, 1), -1.0, 1.0));
  double a, c;
  if (std::abs(r(2, 1)) < 1.0 - 1e-12) {
    a = std::atan2(-r(0, 1), r(1, 1));
    c = std::atan2(-r(2, 0), r(2, 2));
  } else {
    // Gimbal lock: only a + c (or a - c) is defined; put it all in a.
    a = std::atan2(r(1, 0), r(0, 0));
    c = 0.0;
  }
  return Vec3(a, b, c);
}

Mat3 zxy_to_rotation(const Vec3& zxy) {
  return (Eigen::AngleAxisd(zxy[0], Vec3::UnitZ()) * Eigen::AngleAxisd(zxy[1], Vec3::UnitX()) *
          Eigen::AngleAxisd(zxy[2], Vec3::UnitY()))
      .toRotationMatrix();
}

void write_json_file(const std::filesystem::path& path, const json& j, int indent) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(indent) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

void export_motion(const std::filesystem::path& path, const MotionOutput& motion, const SkeletonModel& model,
                   MotionFormat format) {
  if (format == MotionFormat::kJson) {
    write_json_file(path, motion.to_json());
    return;
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  char buf[256];
  const int nj = model.joint_count();
  std::vector<int> depth(static_cast<std::size_t>(nj), 0);
  // Depth-first order so that the hierarchy nests properly.
  std::vector<int> order;
  std::function<void(int)> visit = [&](int j) {
    order.push_back(j);
    for (int c : model.children(j)) {
      depth[static_cast<std::size_t>(c)] = depth[static_cast<std::size_t>(j)] + 1;
      visit(c);
    }
  };
  visit(0);
  out << "HIERARCHY\n";
  std::function<void(int)> emit = [&](int j) {
    const std::string pad(static_cast<std::size_t>(2 * depth[static_cast<std::size_t>(j)]), ' ');
    const Joint& joint = model.joint(j);
    out << pad << (j == 0 ? "ROOT " : "JOINT ") << joint.name << "\n" << pad << "{\n";
    std::snprintf(buf, sizeof buf, "%s  OFFSET %.8f %.8f %.8f\n", pad.c_str(), joint.offset.x(), joint.offset.y(),
                  joint.offset.z());
    out << buf;
    out << pad << (j == 0 ? "  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation\n"
                          : "  CHANNELS 3 Zrotation Xrotation Yrotation\n");
    if (model.children(j).empty()) {
      out << pad << "  End Site\n" << pad << "  {\n" << pad << "    OFFSET 0.00000000 0.00000000 0.00000000\n"
          << pad << "  }\n";
    }
    for (int c : model.children(j)) emit(c);
    out << pad << "}\n";
  };
  emit(0);
  out << "MOTION\nFrames: " << motion.frames.size() << "\n";
  std::snprintf(buf, sizeof buf, "Frame Time: %.8f\n", 1.0 / motion.tracking_fps);
  out << buf;
  const double deg = 180.0 / std::numbers::pi;
  for (const MotionFrame& f : motion.frames) {
    std::string line;
    for (int j : order) {
      Mat3 r = local_rotation(model.joint(j), f.pose);
      if (j == 0) {
        const Mat3 root = axis_angle_to_matrix(f.pose.root_rotation);
        r = root * r;
        // BVH adds the root OFFSET unrotated.
        const Vec3 p = f.pose.root_translation + root * model.joint(0).offset - model.joint(0).offset;
        std::snprintf(buf, sizeof buf, "%.8f %.8f %.8f ", p.x(), p.y(), p.z());
        line += buf;
      }
      const Vec3 e = rotation_to_zxy(r) * deg;
      std::snprintf(buf, sizeof buf, "%.8f %.8f %.8f ", e[0], e[1], e[2]);
      line += buf;
    }
    line.pop_back();
    out << line << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

MotionOutput import_motion_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("motion json " + path.string() + ": " + e.what());
  }
  return MotionOutput::from_json(j);
}

std::vector<std::vector<Vec3>> bvh_joint_positions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  struct Node {
    int parent;
    Vec3 offset;
    int channels;
  };
  std::vector<Node> nodes;
  std::vector<int> stack;
  std::string tok;
  bool in_end_site = false;
  int pending_parent = -1;
  while (in >> tok) {
    if (tok == "ROOT" || tok == "JOINT") {
      std::string name;
      in >> name;
      nodes.push_back({stack.empty() ? -1 : stack.back(), Vec3::Zero(), 0});
      pending_parent = static_cast<int>(nodes.size()) - 1;
    } else if (tok == "End") {
      in >> tok;  // "Site"
      in_end_site = true;
    } else if (tok == "{") {
      if (in_end_site) {
        stack.push_back(-1);
      } else {
        stack.push_back(pending_parent);
      }
    } else if (tok == "}") {
      if (stack.empty()) throw IoError("bvh: unbalanced braces");
      if (stack.back() == -1) in_end_site = false;
      stack.pop_back();
    } else if (tok == "OFFSET") {
      Vec3 o;
      in >> o.x() >> o.y() >> o.z();
      if (!in_end_site) nodes.back().offset = o;
    } else if (tok == "CHANNELS") {
      int n = 0;
      in >> n;
      for (int i = 0; i < n; ++i) in >> tok;
      nodes.back().channels = n;
    } else if (tok == "MOTION") {
      break;
    }
  }
  if (nodes.empty()) throw IoError("bvh: no joints");
  std::size_t frames = 0;
  double frame_time = 0.0;
  in >> tok >> frames >> tok >> tok >> frame_time;  // "Frames:" n "Frame" "Time:" dt
  if (!in) throw IoError("bvh: malformed MOTION header");
  const double rad = std::numbers::pi / 180.0;
  std::vector<std::vector<Vec3>> out;
  for (std::size_t f = 0; f < frames; ++f) {
    std::vector<Mat3> rot(nodes.size());
    std::vector<Vec3> pos(nodes.size());
    for (std::size_t j = 0; j < nodes.size(); ++j) {
      Vec3 t = Vec3::Zero();
      if (nodes[j].channels == 6) in >> t.x() >> t.y() >> t.z();
      Vec3 e;
      in >> e[0] >> e[1] >> e[2];
      if (!in) throw IoError("bvh: truncated motion data");
      const Mat3 local = zxy_to_rotation(e * rad);
      if (nodes[j].parent < 0) {
        rot[j] = local;
        pos[j] = t + nodes[j].offset;
      } else {
        const auto p = static_cast<std::size_t>(nodes[j].parent);
        rot[j] = rot[p] * local;
        pos[j] = rot[p] * nodes[j].offset + pos[p];
      }
    }
    out.push_back(pos);
  }
  return out;
}

}  // namespace eventcap
