// eventcap: synth / capture / eval / overlay / ablate.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "eventcap/event_io.hpp"
#include "eventcap/pipeline.hpp"
#include "eventcap/refine.hpp"
#include "eventcap/synth_eval.hpp"

namespace fs = std::filesystem;
using namespace eventcap;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kConfig = 3, kIo = 4, kInput = 5 };

void log(const std::string& msg) { std::cerr << "[eventcap] " << msg << '\n'; }

PipelineConfig capture_config(const std::string& path, std::optional<std::uint64_t> seed) {
  PipelineConfig c = path.empty() ? PipelineConfig{} : load_pipeline_config(path);
  if (seed) c.seed = *seed;
  return c;
}

std::vector<TimedPose> timed(const MotionOutput& m) {
  std::vector<TimedPose> out;
  out.reserve(m.frames.size());
  for (const auto& f : m.frames) out.push_back({f.t, f.pose});
  return out;
}

EvalReport score(const fs::path& data_dir, const MotionOutput& motion) {
  const DatasetPaths paths{data_dir};
  const ModelBundle body = load_model_file(paths.model());
  const MotionClip clip = load_clip(paths.clip());
  const auto poses = timed(motion);
  EvalReport report = evaluate(poses, clip, body.skeleton, 10);
  const auto frames = paths.frame_files();
  if (frames.size() >= 2) {
    const double span = us_to_seconds(read_frame(frames.back()).center_timestamp -
                                      read_frame(frames.front()).center_timestamp);
    account_throughput(report, paths.events(), frames, span, body.camera.sensor);
  }
  return report;
}

void print_throughput(const EvalReport& r) {
  std::printf("input %.0f B/s vs %.0f B/s for 1000 fps frames (%.2f%%)\n", r.bytes_per_second,
              r.baseline_bytes_per_second, 100.0 * r.bytes_per_second / r.baseline_bytes_per_second);
}

MotionOutput capture_to(const PipelineConfig& config, const fs::path& data_dir, const fs::path& out_dir,
                        const std::string& stem) {
  fs::create_directories(out_dir);
  const auto inputs = PipelineInputs::from_directory(data_dir);
  const CaptureResult res = run_capture(config, inputs, log);
  write_json_file(out_dir / (stem + ".json"), res.motion.to_json());
  write_json_file(out_dir / (stem + "_report.json"), res.report, 2);
  log("wrote " + (out_dir / (stem + ".json")).string());
  return res.motion;
}

int run_synth(const fs::path& out_dir, const std::string& config_path, std::optional<std::uint64_t> seed) {
  SynthOptions opt;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw IoError("cannot open " + config_path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(config_path + ": " + e.what());
    }
    opt = SynthOptions::from_json(j);
  }
  if (seed) opt.seed = *seed;
  const SynthSummary s = write_synthetic_dataset(out_dir, default_model_bundle(), opt);
  std::printf("%zu events (%.0f/s), %zu frames, %zu latent samples -> %s\n", s.event_count, s.events_per_second,
              s.frame_count, s.latent_samples, out_dir.string().c_str());
  return kOk;
}

int run_eval(const fs::path& data_dir, const fs::path& motion_path, const fs::path& out_dir) {
  const EvalReport r = score(data_dir, import_motion_json(motion_path));
  const MethodRow row{motion_path.stem().string(), r};
  std::cout << comparison_table({&row, 1});
  print_throughput(r);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_json_file(out_dir / "eval.json", r.to_json(), 2);
  }
  return kOk;
}

int run_overlay(const fs::path& data_dir, const fs::path& motion_path, const fs::path& out_dir, int every,
                double window_ms) {
  if (every < 1 || !(window_ms > 0.0)) throw ConfigError("overlay: --every and --window-ms must be positive");
  const DatasetPaths paths{data_dir};
  const ModelBundle body = load_model_file(paths.model());
  const MotionOutput motion = import_motion_json(motion_path);
  fs::create_directories(out_dir);
  EventFileSource source(PipelineInputs::from_directory(data_dir).events, body.camera.sensor);
  const auto half = static_cast<TimestampUs>(window_ms * 500.0);
  int written = 0;
  for (std::size_t i = 0; i < motion.frames.size(); i += static_cast<std::size_t>(every)) {
    const MotionFrame& f = motion.frames[i];
    const TimestampUs lo = std::max<TimestampUs>(0, f.t - half);
    const EventStream events = source.window(lo, f.t + half);
    std::vector<Vec2> boundary;
    for (const auto& b : extract_boundary(body, f.pose)) boundary.push_back(b.position);
    char name[48];
    std::snprintf(name, sizeof name, "overlay_%06zu.png", i);
    render_event_overlay(events, lo, f.t + half, boundary, out_dir / name);
    ++written;
  }
  log("wrote " + std::to_string(written) + " overlays to " + out_dir.string());
  return kOk;
}

int run_ablate(const fs::path& data_dir, const fs::path& out_dir, const PipelineConfig& base) {
  PipelineConfig full = base;
  full.disable_batch = false;
  full.disable_refine = false;
  PipelineConfig no_refine = full;
  no_refine.disable_refine = true;
  PipelineConfig no_batch = no_refine;
  no_batch.disable_batch = true;
  std::vector<MethodRow> rows;
  for (const auto& [name, cfg] : {std::pair{"full", full}, {"w/o_refine", no_refine}, {"w/o_batch", no_batch}}) {
    log(std::string("variant ") + name);
    std::string stem = name;
    std::replace(stem.begin(), stem.end(), '/', '_');
    rows.push_back({name, score(data_dir, capture_to(cfg, data_dir, out_dir, "motion_" + stem))});
  }
  std::cout << comparison_table(rows);
  print_throughput(rows.front().report);
  nlohmann::json j = nlohmann::json::object();
  for (const auto& r : rows) j[r.name] = r.report.to_json();
  write_json_file(out_dir / "ablation.json", j, 2);
  const bool ordered = rows[0].report.mean_ae_mm < rows[1].report.mean_ae_mm &&
                       rows[1].report.mean_ae_mm < rows[2].report.mean_ae_mm;
  std::printf("ordering full < w/o_refine < w/o_batch: %s\n", ordered ? "yes" : "no");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Event-based human motion capture"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "random seed");
  app.add_option("--out-dir", out_dir, "output directory");

  std::string data_dir;
  std::string motion_path;
  std::string format = "json";
  int every = 10;
  double window_ms = 5.0;

  auto* synth = app.add_subcommand("synth", "write the synthetic benchmark recording");
  auto* capture = app.add_subcommand("capture", "run the capture pipeline on a recording");
  capture->add_option("--input", data_dir, "recording directory")->required()->check(CLI::ExistingDirectory);
  capture->add_option("--format", format, "extra motion export")->check(CLI::IsMember({"json", "bvh"}));
  auto* eval = app.add_subcommand("eval", "score a motion file against the recording's ground truth");
  eval->add_option("--input", data_dir, "recording directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--motion", motion_path, "motion JSON")->required()->check(CLI::ExistingFile);
  auto* overlay = app.add_subcommand("overlay", "event images with the model silhouette boundary");
  overlay->add_option("--input", data_dir, "recording directory")->required()->check(CLI::ExistingDirectory);
  overlay->add_option("--motion", motion_path, "motion JSON")->required()->check(CLI::ExistingFile);
  overlay->add_option("--every", every, "write every n-th output frame");
  overlay->add_option("--window-ms", window_ms, "event window around each frame");
  auto* ablate = app.add_subcommand("ablate", "full pipeline vs w/o_refine vs w/o_batch");
  ablate->add_option("--input", data_dir, "recording directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    if (rc == 0) return kOk;
    std::cerr << app.help();
    return kUsage;
  }

  try {
    if (*synth) {
      if (out_dir.empty()) throw ConfigError("synth: --out-dir is required");
      return run_synth(out_dir, config_path, seed);
    }
    if (*capture) {
      if (out_dir.empty()) throw ConfigError("capture: --out-dir is required");
      const PipelineConfig cfg = capture_config(config_path, seed);
      const MotionOutput m = capture_to(cfg, data_dir, out_dir, "motion");
      if (format == "bvh") {
        const ModelBundle body = load_model_file(DatasetPaths{data_dir}.model());
        export_motion(fs::path(out_dir) / "motion.bvh", m, body.skeleton, MotionFormat::kBvh);
      }
      return kOk;
    }
    if (*eval) return run_eval(data_dir, motion_path, out_dir);
    if (*overlay) {
      if (out_dir.empty()) throw ConfigError("overlay: --out-dir is required");
      return run_overlay(data_dir, motion_path, out_dir, every, window_ms);
    }
    if (*ablate) {
      if (out_dir.empty()) throw ConfigError("ablate: --out-dir is required");
      return run_ablate(data_dir, out_dir, capture_config(config_path, seed));
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const DomainError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
