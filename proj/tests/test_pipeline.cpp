#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <sys/wait.h>

#include <Eigen/Geometry>

#include "eventcap/pipeline.hpp"
#include "eventcap/synth_eval.hpp"
#include "test_support.hpp"

using namespace eventcap;
using eventcap::testing::random_pose;
namespace fs = std::filesystem;

namespace {

const ModelBundle& body() {
  static const ModelBundle b = default_model_bundle();
  return b;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("eventcap_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

MotionOutput random_motion(std::mt19937_64& rng, int frames) {
  MotionOutput m;
  for (int i = 0; i < frames; ++i) m.frames.push_back({i * 1000, random_pose(body().skeleton, rng), i / 10});
  return m;
}

std::vector<std::string> motion_lines(const fs::path& bvh) {
  std::ifstream in(bvh);
  std::string line;
  std::vector<std::string> out;
  bool motion = false;
  while (std::getline(in, line)) {
    if (line.rfind("Frame Time:", 0) == 0) {
      motion = true;
      continue;
    }
    if (motion) out.push_back(line);
  }
  return out;
}

// Built once, shared by the capture cases.
const fs::path& tiny_dataset() {
  static const fs::path dir = [] {
    const fs::path d = scratch("tiny_dataset");
    SynthOptions o;
    o.capture_seconds = 0.08;
    o.scene.supersample = 1;
    write_synthetic_dataset(d, body(), o);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("Z-X-Y Euler angles") {
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> u(-1.4, 1.4);
  for (int i = 0; i < 200; ++i) {
    const Vec3 e(u(rng), u(rng), u(rng));
    const Mat3 want = (Eigen::AngleAxisd(e[0], Vec3::UnitZ()) * Eigen::AngleAxisd(e[1], Vec3::UnitX()) *
                       Eigen::AngleAxisd(e[2], Vec3::UnitY()))
                          .toRotationMatrix();
    CHECK((zxy_to_rotation(e) - want).norm() < 1e-12);
    CHECK((rotation_to_zxy(want) - e).norm() < 1e-9);
  }
  // Gimbal lock still reproduces the rotation.
  const Mat3 lock = zxy_to_rotation(Vec3(0.3, std::numbers::pi / 2, -0.2));
  CHECK((zxy_to_rotation(rotation_to_zxy(lock)) - lock).norm() < 1e-9);
}

TEST_CASE("BVH export reproduces the joint positions") {
  std::mt19937_64 rng(62);
  const fs::path dir = scratch("bvh");
  const MotionOutput m = random_motion(rng, 12);
  export_motion(dir / "m.bvh", m, body().skeleton, MotionFormat::kBvh);
  const auto frames = bvh_joint_positions(dir / "m.bvh");
  REQUIRE(frames.size() == m.frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto fk = forward_kinematics(body().skeleton, m.frames[f].pose);
    REQUIRE(frames[f].size() == 17);
    for (std::size_t l = 0; l < 17; ++l) CHECK((frames[f][l] - fk[l]).norm() < 1e-6);
  }
}

TEST_CASE("identity pose exports zero rotations") {
  const fs::path dir = scratch("bvh_identity");
  MotionOutput m;
  SkeletonPose p;
  p.root_translation = Vec3(0.1, 0.2, 2.5);
  m.frames.push_back({0, p, 0});
  export_motion(dir / "m.bvh", m, body().skeleton, MotionFormat::kBvh);
  const auto lines = motion_lines(dir / "m.bvh");
  REQUIRE(lines.size() == 1);
  std::istringstream in(lines[0]);
  std::vector<double> v;
  for (double x; in >> x;) v.push_back(x);
  REQUIRE(v.size() == 6 + 3 * 16);
  CHECK(v[0] == doctest::Approx(0.1));
  CHECK(v[1] == doctest::Approx(0.2));
  CHECK(v[2] == doctest::Approx(2.5));
  for (std::size_t i = 3; i < v.size(); ++i) CHECK(v[i] == 0.0);
}

TEST_CASE("motion JSON round trip") {
  std::mt19937_64 rng(63);
  const fs::path dir = scratch("json");
  MotionOutput m = random_motion(rng, 5);
  m.frames[2].refine_no_op = true;
  m.frames[3].e_sil_before = 12.5;
  export_motion(dir / "m.json", m, body().skeleton, MotionFormat::kJson);
  const MotionOutput back = import_motion_json(dir / "m.json");
  REQUIRE(back.frames.size() == 5);
  CHECK(back.tracking_fps == m.tracking_fps);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(back.frames[i].t == m.frames[i].t);
    CHECK(back.frames[i].batch == m.frames[i].batch);
    CHECK((back.frames[i].pose.to_vector() - m.frames[i].pose.to_vector()).norm() == 0.0);
  }
  CHECK(back.frames[2].refine_no_op);
  CHECK(back.frames[3].e_sil_before == 12.5);
  CHECK_THROWS_AS(import_motion_json(dir / "missing.json"), IoError);
}

TEST_CASE("pipeline config") {
  const PipelineConfig d;
  const PipelineConfig back = PipelineConfig::from_json(d.to_json());
  CHECK(back.to_json() == d.to_json());
  const PipelineConfig partial = PipelineConfig::from_json({{"tracking_fps", 500}, {"disable_refine", true}});
  CHECK(partial.tracking_fps == 500);
  CHECK(partial.disable_refine);
  CHECK(partial.energy.lambda_2d == d.energy.lambda_2d);
  CHECK_THROWS_AS(PipelineConfig::from_json({{"trackng_fps", 500}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json({{"energy", {{"lambda_x", 1.0}}}}), ConfigError);
  CHECK_NOTHROW(d.validate(25.0));
  CHECK_THROWS_AS(d.validate(30.0), ConfigError);
  PipelineConfig neg;
  neg.energy.lambda_temp = -1.0;
  CHECK_THROWS_AS(neg.validate(25.0), ConfigError);
}

TEST_CASE("capture on a short recording is monotone and repeatable") {
  const PipelineInputs in = PipelineInputs::from_directory(tiny_dataset());
  PipelineConfig cfg;
  const CaptureResult a = run_capture(cfg, in);
  const CaptureResult b = run_capture(cfg, in);
  REQUIRE(!a.motion.frames.empty());
  CHECK(a.report["all_solver_runs_monotone"].get<bool>());
  CHECK(a.motion.to_json().dump() == b.motion.to_json().dump());
  for (std::size_t i = 1; i < a.motion.frames.size(); ++i) {
    CHECK(a.motion.frames[i].t - a.motion.frames[i - 1].t == 1000);
    CHECK(a.motion.frames[i].pose.within_bounds(body().skeleton));
  }
  const MotionClip clip = load_clip(DatasetPaths{tiny_dataset()}.clip());
  std::vector<TimedPose> out;
  for (const MotionFrame& f : a.motion.frames) out.push_back({f.t, f.pose});
  const EvalReport rep = evaluate(out, clip, body().skeleton);
  MESSAGE("short capture AE " << rep.mean_ae_mm << " mm");
  CHECK(rep.mean_ae_mm < 100.0);
}

TEST_CASE("command line") {
  const std::string cli = EVENTCAP_CLI;
  const auto run = [&](const std::string& args) {
    const int status = std::system((cli + " " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(status);
  };
  CHECK(run("--help") == 0);
  CHECK(run("synth --no-such-flag") == 2);
  CHECK(run("") == 2);
  CHECK(run("capture --input " + (fs::temp_directory_path() / "eventcap_missing_dir").string() + " --out-dir /tmp") == 2);
  const fs::path out = scratch("cli_capture");
  const fs::path bad = out / "bad.json";
  std::ofstream(bad) << R"({"unknown_key": 1})";
  CHECK(run("capture --input " + tiny_dataset().string() + " --out-dir " + out.string() + " --config " + bad.string()) == 3);
  CHECK(run("capture --input " + tiny_dataset().string() + " --out-dir " + out.string() + " --format bvh") == 0);
  CHECK(fs::exists(out / "motion.json"));
  CHECK(fs::exists(out / "motion.bvh"));
  CHECK(run("eval --input " + tiny_dataset().string() + " --motion " + (out / "motion.json").string() + " --out-dir " +
            out.string()) == 0);
}
