#include "eventcap/synth_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <Eigen/Dense>

#include "eventcap/event_io.hpp"
#include "eventcap/raster.hpp"

namespace eventcap {

double MotionClip::duration_seconds() const {
  return times.empty() ? 0.0 : us_to_seconds(times.back() - times.front());
}

SkeletonPose MotionClip::sample(TimestampUs t) const {
  if (times.empty()) throw DomainError("motion clip is empty");
  if (t <= times.front()) return poses.front();
  if (t >= times.back()) return poses.back();
  const auto it = std::upper_bound(times.begin(), times.end(), t);
  const auto i = static_cast<std::size_t>(it - times.begin());
  const double a = static_cast<double>(t - times[i - 1]) / static_cast<double>(times[i] - times[i - 1]);
  return interpolate(poses[i - 1], poses[i], a);
}

void MotionClip::validate(const SkeletonModel& model) const {
  if (times.size() != poses.size()) throw DomainError("motion clip: times and poses differ in length");
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (times[i] <= times[i - 1]) throw DomainError("motion clip: times must be strictly increasing");
  }
  for (const SkeletonPose& p : poses) {
    if (!p.is_finite() || !p.within_bounds(model, 1e-9)) throw DomainError("motion clip: pose out of bounds");
  }
}

void save_clip(const std::filesystem::path& path, const MotionClip& clip) {
  nlohmann::json poses = nlohmann::json::array();
  for (const SkeletonPose& p : clip.poses) {
    const PoseVector v = p.to_vector();
    poses.push_back(std::vector<double>(v.data(), v.data() + kPoseParams));
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write clip " + path.string());
  out << nlohmann::json{{"times_us", clip.times}, {"poses", poses}}.dump() << '\n';
}

MotionClip load_clip(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open clip " + path.string());
  MotionClip clip;
  try {
    nlohmann::json j;
    in >> j;
    clip.times = j.at("times_us").get<std::vector<TimestampUs>>();
    for (const auto& p : j.at("poses")) {
      const auto v = p.get<std::vector<double>>();
      if (v.size() != kPoseParams) throw IoError("clip: pose vectors must have 33 entries");
      clip.poses.push_back(SkeletonPose::from_vector(Eigen::Map<const Eigen::VectorXd>(v.data(), kPoseParams)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("clip " + path.string() + ": " + e.what());
  }
  if (clip.times.size() != clip.poses.size()) throw IoError("clip: times and poses differ in length");
  return clip;
}

MotionClip benchmark_clip(const SkeletonModel& model, TimestampUs duration_us, double rate_hz) {
  if (duration_us <= 0 || !(rate_hz > 0.0)) throw DomainError("benchmark clip: bad duration or rate");
  auto dof = [&](const char* joint, int axis) {
    return static_cast<Eigen::Index>(model.joint(model.joint_index(joint)).dof_begin + axis);
  };
  const double tau = 2.0 * std::numbers::pi;
  auto bump = [](double s, double c, double w) { return std::exp(-((s - c) / w) * ((s - c) / w)); };

  MotionClip clip;
  const double step = 1e6 / rate_hz;
  for (long k = 0;; ++k) {
    TimestampUs t = std::llround(k * step);
    if (t >= duration_us) t = duration_us;
    const double s = us_to_seconds(t);
    SkeletonPose p;
    p.theta[dof("l_shoulder", 0)] = -0.9 + 0.8 * std::sin(tau * 3.6 * s);
    p.theta[dof("r_shoulder", 0)] = -0.9 - 0.8 * std::sin(tau * 3.1 * s + 0.6);
    p.theta[dof("l_shoulder", 2)] = -0.5 - 0.35 * std::sin(tau * 2.3 * s + 0.3);
    p.theta[dof("r_shoulder", 2)] = 0.5 + 0.35 * std::sin(tau * 2.7 * s + 1.1);
    p.theta[dof("l_elbow", 0)] = -1.1 - 0.8 * std::sin(tau * 4.2 * s + 0.4);
    p.theta[dof("r_elbow", 0)] = -1.1 - 0.8 * std::sin(tau * 3.8 * s + 1.9);
    p.theta[dof("spine", 1)] = 0.3 * std::sin(tau * 0.8 * s);
    p.theta[dof("chest", 0)] = 0.1 * std::sin(tau * 0.8 * s + 0.5);
    p.theta[dof("neck", 1)] = 0.25 * std::sin(tau * 0.6 * s);

    // Crouch, jump (0.8 s - 1.3 s), crouch.
    const double flight = (s > 0.8 && s < 1.3) ? std::sin(std::numbers::pi * (s - 0.8) / 0.5) : 0.0;
    const double crouch = bump(s, 0.72, 0.12) + bump(s, 1.38, 0.12);
    for (const char* side : {"l", "r"}) {
      const std::string hip = std::string(side) + "_hip";
      const std::string knee = std::string(side) + "_knee";
      const std::string ankle = std::string(side) + "_ankle";
      p.theta[dof(hip.c_str(), 0)] = -0.5 * crouch - 0.35 * flight;
      p.theta[dof(knee.c_str(), 0)] = 0.9 * crouch + 0.5 * flight;
      p.theta[dof(ankle.c_str(), 0)] = 0.4 * crouch;
    }
    p.root_translation = Vec3(0.04 * std::sin(tau * 0.5 * s), 0.10 * crouch - 0.14 * flight, 2.6);
    p.root_rotation = Vec3(0.0, 0.2 * std::sin(tau * 0.45 * s), 0.0);
    clip.times.push_back(t);
    clip.poses.push_back(clamp_to_bounds(model, p));
    if (t == duration_us) break;
  }
  return clip;
}

LatentRenderer::LatentRenderer(const ModelBundle& body, const SceneOptions& options)
    : body_(&body), options_(options) {
  const SensorSize s = body.camera.sensor;
  background_.create(s.height, s.width);
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> noise(-options.background_noise, options.background_noise);
  const double base = std::log(90.0);
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      const int parity = (x / options.checker_px + y / options.checker_px) & 1;
      background_(y, x) = base + (parity ? 0.5 : -0.5) * options.background_log_contrast + noise(rng);
    }
  }
}

cv::Mat1d LatentRenderer::render(const SkeletonPose& pose) const {
  const BodyMesh& mesh = body_->mesh;
  const std::vector<Vec3> verts = skin_vertices(body_->skeleton, mesh, pose);
  // Area-weighted vertex normals for smooth shading.
  std::vector<Vec3> normals(verts.size(), Vec3::Zero());
  for (const auto& tri : mesh.faces) {
    const Vec3& a = verts[static_cast<std::size_t>(tri[0])];
    const Vec3 n = (verts[static_cast<std::size_t>(tri[1])] - a).cross(verts[static_cast<std::size_t>(tri[2])] - a);
    for (int k = 0; k < 3; ++k) normals[static_cast<std::size_t>(tri[k])] += n;
  }
  for (Vec3& n : normals) {
    if (n.norm() > 0.0) n.normalize();
  }

  // Each pixel averages irradiance over ss x ss sub-samples.
  const int ss = std::max(1, options_.supersample);
  CameraIntrinsics fine = body_->camera;
  fine.fx *= ss;
  fine.fy *= ss;
  fine.cx = ss * (fine.cx + 0.5) - 0.5;
  fine.cy = ss * (fine.cy + 0.5) - 0.5;
  fine.sensor = {body_->camera.sensor.width * ss, body_->camera.sensor.height * ss};
  const DepthRaster raster(verts, mesh.faces, fine);

  const Vec3 light = options_.light_direction.normalized();
  const double cell = options_.body_cell_m;
  cv::Mat1d out(background_.size());
  const double inv = 1.0 / (ss * ss);
  for (int y = 0; y < out.rows; ++y) {
    for (int x = 0; x < out.cols; ++x) {
      const double bg = std::exp(background_(y, x));
      double sum = 0.0;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const int fx = x * ss + sx;
          const int fy = y * ss + sy;
          const int f = raster.face(fx, fy);
          if (f < 0) {
            sum += bg;
            continue;
          }
          const auto& tri = mesh.faces[static_cast<std::size_t>(f)];
          const Vec3 bary = raster.barycentric(f, Vec2(fx, fy));
          Vec3 rest = Vec3::Zero();
          Vec3 n = Vec3::Zero();
          for (int k = 0; k < 3; ++k) {
            rest += bary[k] * mesh.vertices[static_cast<std::size_t>(tri[k])];
            n += bary[k] * normals[static_cast<std::size_t>(tri[k])];
          }
          const double len = n.norm();
          const double sh = options_.ambient + (1.0 - options_.ambient) * (len > 0.0 ? std::abs(n.dot(light)) / len : 0.0);
          const long parity = static_cast<long>(std::floor(rest.x() / cell)) +
                              static_cast<long>(std::floor(rest.y() / cell)) +
                              static_cast<long>(std::floor(rest.z() / cell));
          const double albedo = (parity & 1) ? options_.albedo_light : options_.albedo_dark;
          sum += 255.0 * albedo * sh;
        }
      }
      out(y, x) = std::log(sum * inv);
    }
  }
  return out;
}

std::vector<LatentImage> render_latent(const MotionClip& clip, const ModelBundle& body, const SceneOptions& options) {
  std::vector<LatentImage> out;
  if (clip.times.empty()) return out;
  const LatentRenderer renderer(body, options);
  out.reserve(clip.times.size());
  for (std::size_t i = 0; i < clip.times.size(); ++i) out.push_back({renderer.render(clip.poses[i]), clip.times[i]});
  return out;
}

std::vector<DetectionSet> synthesize_detections(const MotionClip& clip, const ModelBundle& body,
                                                std::span<const TimestampUs> frame_times,
                                                const DetectionNoise& noise, std::uint64_t seed) {
  if (noise.sigma_2d_px < 0 || noise.sigma_3d_mm < 0 || noise.dropout < 0 || noise.dropout > 1) {
    throw ConfigError("detection noise parameters out of range");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const SkeletonModel& model = body.skeleton;
  std::vector<DetectionSet> out;
  for (TimestampUs t : frame_times) {
    const std::vector<Vec3> lm = forward_kinematics(model, clip.sample(t));
    DetectionSet d;
    d.t = t;
    for (int l = 0; l < model.landmark_count(); ++l) {
      Detection2D e;
      const auto uv = try_project(body.camera, lm[static_cast<std::size_t>(l)]);
      const double nx = gauss(rng);
      const double ny = gauss(rng);
      const bool drop = uniform(rng) < noise.dropout;
      e.present = uv.has_value() && !drop;
      e.confidence = e.present ? 1.0 : 0.0;
      if (uv) e.position = *uv + noise.sigma_2d_px * Vec2(nx, ny);
      d.joints2d.push_back(e);
    }
    for (int l = 0; l < model.joint_count(); ++l) {
      Detection3D e;
      const Vec3 n(gauss(rng), gauss(rng), gauss(rng));
      e.present = !(uniform(rng) < noise.dropout);
      e.confidence = e.present ? 1.0 : 0.0;
      e.position = lm[static_cast<std::size_t>(l)] - lm[0] + 1e-3 * noise.sigma_3d_mm * n;
      d.joints3d.push_back(e);
    }
    out.push_back(std::move(d));
  }
  return out;
}

ProcrustesResult procrustes_align(std::span<const Vec3> predicted, std::span<const Vec3> truth) {
  if (predicted.size() != truth.size()) throw DomainError("procrustes: point counts differ");
  if (predicted.size() < 3) throw DomainError("procrustes: need at least 3 points");
  const auto n = static_cast<double>(predicted.size());
  Vec3 cp = Vec3::Zero(), ct = Vec3::Zero();
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    cp += predicted[i];
    ct += truth[i];
  }
  cp /= n;
  ct /= n;
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < predicted.size(); ++i) h += (predicted[i] - cp) * (truth[i] - ct).transpose();
  const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  ProcrustesResult r;
  r.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  r.translation = ct - r.rotation * cp;
  for (const Vec3& p : predicted) r.aligned.push_back(r.rotation * p + r.translation);
  return r;
}

double aligned_joint_error_mm(const SkeletonModel& model, const SkeletonPose& predicted, const SkeletonPose& truth) {
  std::vector<Vec3> a = forward_kinematics(model, predicted);
  std::vector<Vec3> b = forward_kinematics(model, truth);
  a.resize(static_cast<std::size_t>(model.joint_count()));
  b.resize(static_cast<std::size_t>(model.joint_count()));
  const ProcrustesResult r = procrustes_align(a, b);
  double sum = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) sum += (r.aligned[i] - b[i]).norm();
  return 1000.0 * sum / static_cast<double>(b.size());
}

nlohmann::json EvalReport::to_json() const {
  return {{"frames_evaluated", per_frame_ae_mm.size()},
          {"frame_times_us", frame_times},
          {"per_frame_ae_mm", per_frame_ae_mm},
          {"mean_ae_mm", mean_ae_mm},
          {"std_ae_mm", std_ae_mm},
          {"input_bytes", input_bytes},
          {"capture_seconds", capture_seconds},
          {"bytes_per_second", bytes_per_second},
          {"baseline_bytes_per_second", baseline_bytes_per_second}};
}

EvalReport evaluate(std::span<const TimedPose> output, const MotionClip& clip, const SkeletonModel& model,
                    int stride) {
  if (stride < 1) throw DomainError("evaluate: stride must be >= 1");
  EvalReport report;
  for (std::size_t i = 0; i < output.size(); i += static_cast<std::size_t>(stride)) {
    report.frame_times.push_back(output[i].t);
    report.per_frame_ae_mm.push_back(aligned_joint_error_mm(model, output[i].pose, clip.sample(output[i].t)));
  }
  if (!report.per_frame_ae_mm.empty()) {
    const auto n = static_cast<double>(report.per_frame_ae_mm.size());
    double sum = 0.0;
    for (double v : report.per_frame_ae_mm) sum += v;
    report.mean_ae_mm = sum / n;
    double sq = 0.0;
    for (double v : report.per_frame_ae_mm) sq += (v - report.mean_ae_mm) * (v - report.mean_ae_mm);
    report.std_ae_mm = std::sqrt(sq / n);
  }
  return report;
}

void account_throughput(EvalReport& report, const std::filesystem::path& event_file,
                        std::span<const std::filesystem::path> frame_files, double capture_seconds,
                        SensorSize sensor) {
  if (!(capture_seconds > 0.0)) throw DomainError("throughput: capture span must be positive");
  std::error_code ec;
  std::uintmax_t bytes = std::filesystem::file_size(event_file, ec);
  if (ec) throw IoError("cannot stat " + event_file.string());
  for (const auto& f : frame_files) {
    bytes += std::filesystem::file_size(f, ec);
    if (ec) throw IoError("cannot stat " + f.string());
    const auto side = frame_sidecar_path(f);
    if (std::filesystem::exists(side)) bytes += std::filesystem::file_size(side);
  }
  report.input_bytes = bytes;
  report.capture_seconds = capture_seconds;
  report.bytes_per_second = static_cast<double>(bytes) / capture_seconds;
  report.baseline_bytes_per_second = static_cast<double>(sensor.pixel_count()) * 1000.0;
}

std::string comparison_table(std::span<const MethodRow> rows) {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "%-12s %10s %10s %8s\n", "method", "AE [mm]", "STD [mm]", "frames");
  out << line;
  for (const MethodRow& r : rows) {
    std::snprintf(line, sizeof line, "%-12s %10.2f %10.2f %8zu\n", r.name.c_str(), r.report.mean_ae_mm,
                  r.report.std_ae_mm, r.report.per_frame_ae_mm.size());
    out << line;
  }
  return out.str();
}

nlohmann::json SynthOptions::to_json() const {
  return {{"seed", seed},
          {"capture_seconds", capture_seconds},
          {"latent_rate_hz", latent_rate_hz},
          {"camera",
           {{"contrast_threshold", camera.contrast_threshold},
            {"exposure_us", camera.exposure_us},
            {"intensity_fps", camera.intensity_fps},
            {"width", camera.sensor.width},
            {"height", camera.sensor.height}}},
          {"noise",
           {{"sigma_2d_px", noise.sigma_2d_px}, {"sigma_3d_mm", noise.sigma_3d_mm}, {"dropout", noise.dropout}}},
          {"scene",
           {{"checker_px", scene.checker_px},
            {"background_log_contrast", scene.background_log_contrast},
            {"background_noise", scene.background_noise},
            {"body_cell_m", scene.body_cell_m},
            {"albedo_dark", scene.albedo_dark},
            {"albedo_light", scene.albedo_light},
            {"ambient", scene.ambient},
            {"supersample", scene.supersample}}}};
}

SynthOptions SynthOptions::from_json(const nlohmann::json& j) {
  SynthOptions o;
  try {
    o.seed = j.value("seed", o.seed);
    o.capture_seconds = j.value("capture_seconds", o.capture_seconds);
    o.latent_rate_hz = j.value("latent_rate_hz", o.latent_rate_hz);
    if (j.contains("camera")) {
      const auto& c = j.at("camera");
      o.camera.contrast_threshold = c.value("contrast_threshold", o.camera.contrast_threshold);
      o.camera.exposure_us = c.value("exposure_us", o.camera.exposure_us);
      o.camera.intensity_fps = c.value("intensity_fps", o.camera.intensity_fps);
      o.camera.sensor.width = c.value("width", o.camera.sensor.width);
      o.camera.sensor.height = c.value("height", o.camera.sensor.height);
    }
    if (j.contains("noise")) {
      const auto& n = j.at("noise");
      o.noise.sigma_2d_px = n.value("sigma_2d_px", o.noise.sigma_2d_px);
      o.noise.sigma_3d_mm = n.value("sigma_3d_mm", o.noise.sigma_3d_mm);
      o.noise.dropout = n.value("dropout", o.noise.dropout);
    }
    if (j.contains("scene")) {
      const auto& s = j.at("scene");
      o.scene.checker_px = s.value("checker_px", o.scene.checker_px);
      o.scene.background_log_contrast = s.value("background_log_contrast", o.scene.background_log_contrast);
      o.scene.background_noise = s.value("background_noise", o.scene.background_noise);
      o.scene.body_cell_m = s.value("body_cell_m", o.scene.body_cell_m);
      o.scene.albedo_dark = s.value("albedo_dark", o.scene.albedo_dark);
      o.scene.albedo_light = s.value("albedo_light", o.scene.albedo_light);
      o.scene.ambient = s.value("ambient", o.scene.ambient);
      o.scene.supersample = s.value("supersample", o.scene.supersample);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth options: ") + e.what());
  }
  o.scene.seed = o.seed;
  o.camera.validate();
  if (!(o.capture_seconds > 0.0) || !(o.latent_rate_hz > 0.0)) throw ConfigError("synth: bad duration or rate");
  return o;
}

std::vector<std::filesystem::path> DatasetPaths::frame_files() const {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(frames_dir())) return out;
  for (const auto& e : std::filesystem::directory_iterator(frames_dir())) {
    if (e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

SynthSummary write_synthetic_dataset(const std::filesystem::path& out_dir, const ModelBundle& body,
                                     const SynthOptions& options) {
  options.camera.validate();
  if (body.camera.sensor != options.camera.sensor) throw ConfigError("synth: camera and model sensor sizes differ");
  const DatasetPaths paths{out_dir};
  std::filesystem::create_directories(paths.frames_dir());

  const TimestampUs period = options.camera.frame_period_us();
  const auto n_frames = static_cast<TimestampUs>(std::llround(options.capture_seconds * options.camera.intensity_fps)) + 1;
  const TimestampUs duration = (n_frames - 1) * period + options.camera.exposure_us;
  const MotionClip clip = benchmark_clip(body.skeleton, duration, options.latent_rate_hz);
  const std::vector<TimestampUs> centers = frame_centers_for(0, duration, options.camera);

  SceneOptions scene = options.scene;
  scene.seed = options.seed;
  const LatentRenderer renderer(body, scene);
  EventSimulator sim(options.camera, centers);
  for (std::size_t i = 0; i < clip.times.size(); ++i) sim.push({renderer.render(clip.poses[i]), clip.times[i]});
  SimulationResult sim_out = sim.finish();

  write_events(paths.events(), sim_out.events);
  for (std::size_t i = 0; i < sim_out.frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.png", i);
    write_frame(paths.frames_dir() / name, sim_out.frames[i]);
  }
  const std::vector<DetectionSet> dets = synthesize_detections(clip, body, centers, options.noise, options.seed);
  write_detections(paths.detections(), dets);
  save_model_file(paths.model(), body);
  save_clip(paths.clip(), clip);
  save_camera_config(paths.camera(), options.camera);

  SynthSummary summary;
  summary.event_count = sim_out.events.size();
  summary.frame_count = sim_out.frames.size();
  summary.latent_samples = clip.times.size();
  summary.events_per_second = static_cast<double>(summary.event_count) / us_to_seconds(duration);
  std::ofstream manifest(paths.manifest());
  if (!manifest) throw IoError("cannot write " + paths.manifest().string());
  manifest << nlohmann::json{{"options", options.to_json()},
                             {"event_count", summary.event_count},
                             {"frame_count", summary.frame_count},
                             {"latent_samples", summary.latent_samples},
                             {"duration_us", duration}}
                  .dump(2)
           << '\n';
  return summary;
}

}  // namespace eventcap
