#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <Eigen/Geometry>

#include "eventcap/synth_eval.hpp"
#include "test_support.hpp"

using namespace eventcap;
using eventcap::testing::random_pose;

namespace {

const ModelBundle& body() {
  static const ModelBundle b = default_model_bundle();
  return b;
}

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  return q.normalized().toRotationMatrix();
}

double aligned_rms(const std::vector<Vec3>& p, const std::vector<Vec3>& t, const Mat3& r) {
  Vec3 cp = Vec3::Zero(), ct = Vec3::Zero();
  for (std::size_t i = 0; i < p.size(); ++i) {
    cp += p[i];
    ct += t[i];
  }
  cp /= static_cast<double>(p.size());
  ct /= static_cast<double>(p.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (r * (p[i] - cp) + ct - t[i]).squaredNorm();
  return s;
}

MotionClip two_pose_clip(const SkeletonPose& a, const SkeletonPose& b) {
  MotionClip c;
  c.times = {0, 10000};
  c.poses = {a, b};
  return c;
}

}  // namespace

TEST_CASE("Procrustes undoes a rigid motion") {
  std::mt19937_64 rng(51);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Vec3> truth, pred;
    const Mat3 r = random_rotation(rng);
    const Vec3 t(g(rng), g(rng), g(rng));
    for (int i = 0; i < 17; ++i) {
      truth.push_back(Vec3(g(rng), g(rng), g(rng)));
      pred.push_back(r * truth.back() + t);
    }
    const ProcrustesResult res = procrustes_align(pred, truth);
    for (std::size_t i = 0; i < truth.size(); ++i) CHECK((res.aligned[i] - truth[i]).norm() < 1e-9);
    CHECK((res.rotation * r - Mat3::Identity()).norm() < 1e-9);
    for (std::size_t i = 0; i < truth.size(); ++i) CHECK((res.rotation * pred[i] + res.translation - res.aligned[i]).norm() < 1e-12);
  }
}

TEST_CASE("Procrustes beats every sampled rotation and never reflects") {
  std::mt19937_64 rng(52);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Vec3> truth, pred;
    for (int i = 0; i < 8; ++i) {
      truth.push_back(Vec3(g(rng), g(rng), g(rng)));
      // Mirrored and noisy: the best proper rotation is not exact.
      pred.push_back(Vec3(-truth.back().x(), truth.back().y(), truth.back().z()) + 0.3 * Vec3(g(rng), g(rng), g(rng)));
    }
    const ProcrustesResult res = procrustes_align(pred, truth);
    CHECK(res.rotation.determinant() == doctest::Approx(1.0));
    CHECK((res.rotation.transpose() * res.rotation - Mat3::Identity()).norm() < 1e-9);
    double got = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) got += (res.aligned[i] - truth[i]).squaredNorm();
    CHECK(got == doctest::Approx(aligned_rms(pred, truth, res.rotation)));
    for (int k = 0; k < 2000; ++k) CHECK(got <= aligned_rms(pred, truth, random_rotation(rng)) + 1e-9);
  }
  const std::vector<Vec3> two{Vec3::Zero(), Vec3::Ones()};
  CHECK_THROWS_AS(procrustes_align(two, two), DomainError);
  const std::vector<Vec3> three(3, Vec3::Ones());
  CHECK_THROWS_AS(procrustes_align(three, two), DomainError);
}

TEST_CASE("aligned joint error ignores rigid motion") {
  std::mt19937_64 rng(53);
  const SkeletonModel& m = body().skeleton;
  const SkeletonPose p = random_pose(m, rng);
  SkeletonPose q = p;
  q.root_rotation = matrix_to_axis_angle(axis_angle_to_matrix(Vec3(0.1, 0.4, -0.2)) * axis_angle_to_matrix(p.root_rotation));
  q.root_translation += Vec3(0.3, -0.1, 0.5);
  CHECK(aligned_joint_error_mm(m, q, p) < 1e-6);
  SkeletonPose r = p;
  r.theta.array() += 0.1;
  r = clamp_to_bounds(m, r);
  const double e = aligned_joint_error_mm(m, r, p);
  CHECK(e > 1.0);
  const auto a = forward_kinematics(m, r), b = forward_kinematics(m, p);
  double unaligned = 0.0;
  for (int l = 0; l < 17; ++l) unaligned += 1000.0 * (a[static_cast<std::size_t>(l)] - b[static_cast<std::size_t>(l)]).norm() / 17.0;
  CHECK(e <= unaligned + 1e-9);
}

TEST_CASE("clip sampling and the benchmark motion") {
  std::mt19937_64 rng(54);
  const SkeletonPose a = random_pose(body().skeleton, rng), b = random_pose(body().skeleton, rng);
  const MotionClip c = two_pose_clip(a, b);
  CHECK((c.sample(2500).to_vector() - interpolate(a, b, 0.25).to_vector()).norm() < 1e-12);
  CHECK((c.sample(-5).to_vector() - a.to_vector()).norm() == 0.0);
  CHECK((c.sample(20000).to_vector() - b.to_vector()).norm() == 0.0);
  MotionClip bad = c;
  bad.times = {0, 0};
  CHECK_THROWS_AS(bad.validate(body().skeleton), DomainError);

  const MotionClip bench = benchmark_clip(body().skeleton, 200000, 1000.0);
  CHECK(bench.times.size() == 201);
  CHECK_NOTHROW(bench.validate(body().skeleton));
  CHECK(bench.duration_seconds() == doctest::Approx(0.2));
  // Every frame keeps the body in front of the camera and inside the image.
  for (std::size_t i = 0; i < bench.poses.size(); i += 20) {
    for (const Vec3& p : forward_kinematics(body().skeleton, bench.poses[i])) {
      const auto uv = try_project(body().camera, p);
      REQUIRE(uv);
      CHECK(body().camera.sensor.contains(static_cast<int>(uv->x()), static_cast<int>(uv->y())));
    }
  }
}

TEST_CASE("detection noise has the configured statistics") {
  std::mt19937_64 rng(55);
  const SkeletonPose p = random_pose(body().skeleton, rng);
  const MotionClip c = two_pose_clip(p, p);
  std::vector<TimestampUs> times(400, 5000);
  const auto clean = synthesize_detections(c, body(), times, {0.0, 0.0, 0.0}, 1);
  const auto lm = forward_kinematics(body().skeleton, p);
  for (std::size_t l = 0; l < lm.size(); ++l) {
    CHECK(clean[0].joints2d[l].present);
    CHECK((clean[0].joints2d[l].position - project(body().camera, lm[l])).norm() < 1e-12);
  }
  for (std::size_t l = 0; l < 17; ++l) CHECK((clean[0].joints3d[l].position - (lm[l] - lm[0])).norm() < 1e-12);

  const DetectionNoise noise{2.0, 20.0, 0.1};
  const auto noisy = synthesize_detections(c, body(), times, noise, 9);
  double s2 = 0.0, s3 = 0.0;
  int n2 = 0, n3 = 0, missing = 0, total = 0;
  for (const DetectionSet& d : noisy) {
    for (std::size_t l = 0; l < d.joints2d.size(); ++l) {
      ++total;
      if (!d.joints2d[l].present) {
        ++missing;
        continue;
      }
      s2 += (d.joints2d[l].position - clean[0].joints2d[l].position).squaredNorm();
      n2 += 2;
    }
    for (std::size_t l = 0; l < d.joints3d.size(); ++l) {
      ++total;
      if (!d.joints3d[l].present) {
        ++missing;
        continue;
      }
      s3 += (1000.0 * (d.joints3d[l].position - clean[0].joints3d[l].position)).squaredNorm();
      n3 += 3;
    }
  }
  CHECK(std::sqrt(s2 / n2) == doctest::Approx(2.0).epsilon(0.05));
  CHECK(std::sqrt(s3 / n3) == doctest::Approx(20.0).epsilon(0.05));
  CHECK(static_cast<double>(missing) / total == doctest::Approx(0.1).epsilon(0.15));
  const auto again = synthesize_detections(c, body(), times, noise, 9);
  CHECK(again[7].joints2d[3].position == noisy[7].joints2d[3].position);
  CHECK_THROWS_AS(synthesize_detections(c, body(), times, {1.0, 1.0, 1.5}, 1), ConfigError);
}

TEST_CASE("renderer shows the background where the body is not") {
  SceneOptions opt;
  opt.supersample = 1;
  const LatentRenderer r(body(), opt);
  SkeletonPose away;
  away.root_translation = Vec3(100.0, 0.0, 3.0);
  const cv::Mat1d img = r.render(away);
  CHECK(cv::norm(img, r.background(), cv::NORM_INF) == 0.0);
  SkeletonPose front;
  front.root_translation = Vec3(0.0, 0.0, 2.6);
  const cv::Mat1d a = r.render(front), b = r.render(front);
  CHECK(cv::norm(a, b, cv::NORM_INF) == 0.0);
  CHECK(cv::norm(a, r.background(), cv::NORM_INF) > 0.1);
  // The root projects to the image center, which is covered by the torso.
  const Vec2 c = project(body().camera, forward_kinematics(body().skeleton, front)[0]);
  const int x = static_cast<int>(c.x()), y = static_cast<int>(c.y());
  CHECK(a(y, x) != r.background()(y, x));
}

TEST_CASE("evaluation and throughput accounting") {
  std::mt19937_64 rng(56);
  const SkeletonPose a = random_pose(body().skeleton, rng), b = random_pose(body().skeleton, rng);
  const MotionClip c = two_pose_clip(a, b);
  std::vector<TimedPose> out;
  for (TimestampUs t = 0; t <= 10000; t += 1000) out.push_back({t, c.sample(t)});
  const EvalReport perfect = evaluate(out, c, body().skeleton, 3);
  CHECK(perfect.frame_times == std::vector<TimestampUs>{0, 3000, 6000, 9000});
  CHECK(perfect.mean_ae_mm < 1e-6);
  out[3].pose = a;
  const EvalReport off = evaluate(out, c, body().skeleton, 3);
  CHECK(off.per_frame_ae_mm[1] == doctest::Approx(aligned_joint_error_mm(body().skeleton, a, c.sample(3000))));
  CHECK(off.mean_ae_mm == doctest::Approx(off.per_frame_ae_mm[1] / 4.0));
  CHECK_THROWS_AS(evaluate(out, c, body().skeleton, 0), DomainError);

  const auto dir = std::filesystem::temp_directory_path() / "eventcap_test_throughput";
  std::filesystem::create_directories(dir);
  const auto write = [](const std::filesystem::path& p, std::size_t n) { std::ofstream(p, std::ios::binary) << std::string(n, 'x'); };
  write(dir / "events.bin", 1000);
  write(dir / "f0.png", 300);
  write(dir / "f0.json", 20);
  write(dir / "f1.png", 200);
  const std::vector<std::filesystem::path> frames{dir / "f0.png", dir / "f1.png"};
  EvalReport rep;
  account_throughput(rep, dir / "events.bin", frames, 0.5, SensorSize{240, 180});
  CHECK(rep.input_bytes == 1520);
  CHECK(rep.bytes_per_second == doctest::Approx(3040.0));
  CHECK(rep.baseline_bytes_per_second == doctest::Approx(240.0 * 180.0 * 1000.0));
  CHECK_THROWS_AS(account_throughput(rep, dir / "missing.bin", frames, 0.5, SensorSize{240, 180}), IoError);
  std::filesystem::remove_all(dir);

  const std::vector<MethodRow> rows{{"full", perfect}, {"w/o_batch", off}};
  const std::string table = comparison_table(rows);
  CHECK(table.find("full") != std::string::npos);
  CHECK(table.find("w/o_batch") != std::string::npos);
}

TEST_CASE("synthetic options round trip through JSON") {
  SynthOptions o;
  o.seed = 99;
  o.capture_seconds = 0.5;
  o.noise.sigma_2d_px = 3.5;
  o.scene.supersample = 2;
  const SynthOptions back = SynthOptions::from_json(o.to_json());
  CHECK(back.to_json() == o.to_json());
  CHECK(back.seed == 99);
  CHECK(back.scene.supersample == 2);
}

TEST_CASE("small synthetic dataset") {
  const auto dir = std::filesystem::temp_directory_path() / "eventcap_test_dataset";
  std::filesystem::remove_all(dir);
  SynthOptions o;
  o.capture_seconds = 0.08;
  o.scene.supersample = 1;
  const SynthSummary s = write_synthetic_dataset(dir, body(), o);
  const DatasetPaths paths{dir};
  CHECK(s.event_count > 1000);
  CHECK(paths.frame_files().size() == s.frame_count);
  CHECK(s.frame_count >= 3);
  for (const auto& p : {paths.events(), paths.detections(), paths.model(), paths.clip(), paths.camera(), paths.manifest()}) {
    CHECK(std::filesystem::exists(p));
  }
  const auto dets = read_detections(paths.detections(), body().skeleton);
  CHECK(dets.size() == s.frame_count);
  const MotionClip clip = load_clip(paths.clip());
  CHECK_NOTHROW(clip.validate(body().skeleton));
  std::filesystem::remove_all(dir);
}
