#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>

#include "eventcap/raster.hpp"
#include "eventcap/trajectories.hpp"
#include "test_support.hpp"

using namespace eventcap;

namespace {

constexpr SensorSize kSensor{64, 48};
constexpr double kC = 0.25;

double smooth_step(double d) { return 1.0 / (1.0 + std::exp(-d / 0.6)); }

// Bright rounded square of side 14 px centered at c on a flat background.
LatentImage square_scene(const Vec2& c, TimestampUs t) {
  LatentImage l;
  l.timestamp = t;
  l.log_pixels.create(kSensor.height, kSensor.width);
  for (int y = 0; y < kSensor.height; ++y) {
    for (int x = 0; x < kSensor.width; ++x) {
      const double dx = 7.0 - std::abs(x - c.x()), dy = 7.0 - std::abs(y - c.y());
      l.log_pixels(y, x) = std::log(40.0) + 1.2 * smooth_step(dx) * smooth_step(dy);
    }
  }
  return l;
}

struct MovingSquare {
  std::vector<LatentImage> video;
  EventStream events;
};

// Square moving from c0 at velocity v (px per ms) for `ms` milliseconds.
MovingSquare moving_square(const Vec2& c0, const Vec2& v, int ms) {
  MovingSquare out;
  EventCameraConfig cam;
  cam.sensor = kSensor;
  cam.contrast_threshold = kC;
  EventSimulator sim(cam, {});
  for (TimestampUs t = 0; t <= ms * 1000; t += 100) {
    LatentImage l = square_scene(c0 + v * (t / 1000.0), t);
    sim.push(l);
    if (t % 1000 == 0) out.video.push_back(std::move(l));
  }
  out.events = sim.finish().events;
  return out;
}

FeatureTrajectory line_track(int id, const Vec2& p0, const Vec2& v, TimestampUs t0, TimestampUs t1) {
  std::vector<TrackSample> s;
  for (TimestampUs t = t0; t <= t1; t += 1000) s.push_back({t, p0 + v * ((t - t0) / 1000.0)});
  return fit_spline(id, s);
}

}  // namespace

TEST_CASE("corner detection on a square") {
  const LatentImage l = square_scene(Vec2(30.0, 22.0), 0);
  const auto pts = detect_features(l, 10, nullptr, 5.0, 0.05, 4);
  REQUIRE(pts.size() >= 4);
  for (const Vec2& want : {Vec2(23, 15), Vec2(37, 15), Vec2(23, 29), Vec2(37, 29)}) {
    double best = 1e9;
    for (const Vec2& p : pts) best = std::min(best, (p - want).norm());
    CHECK(best < 2.5);
  }
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) CHECK((pts[i] - pts[j]).norm() >= 5.0);
  CHECK(detect_features(l, 2, nullptr, 5.0, 0.05, 4).size() == 2);
  cv::Mat1b mask(kSensor.height, kSensor.width, uchar{0});
  mask(cv::Rect(0, 0, 30, 48)).setTo(255);
  for (const Vec2& p : detect_features(l, 10, &mask, 5.0, 0.05, 4)) CHECK(p.x() < 30.0);
}

TEST_CASE("no events leaves every track at its seed") {
  const LatentImage l = square_scene(Vec2(30.0, 22.0), 0);
  const std::vector<Vec2> seeds{{23.0, 15.0}, {37.0, 29.0}};
  const auto tracks = track_features(seeds, EventStream(kSensor, {}), l, TrackDirection::kForward, 40000, kC);
  REQUIRE(tracks.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    REQUIRE(tracks[i].samples.size() == 1);
    CHECK(tracks[i].samples[0].t == 0);
    CHECK(tracks[i].samples[0].position == seeds[i]);
  }
}

TEST_CASE("constant-velocity square is tracked with the right slope") {
  const Vec2 v(0.10, 0.05);
  const MovingSquare s = moving_square(Vec2(26.0, 20.0), v, 40);
  const std::vector<Vec2> seeds{{19.0, 13.0}, {33.0, 27.0}};
  TrackerOptions opt;
  opt.window_events = 40;
  const auto tracks = track_features(seeds, s.events, s.video.front(), TrackDirection::kForward, 40000, kC, opt);
  for (const FeatureTrack& tr : tracks) {
    REQUIRE(tr.samples.size() > 5);
    const TrackSample& a = tr.samples.front();
    const TrackSample& b = tr.samples.back();
    const Vec2 slope = (b.position - a.position) / ((b.t - a.t) / 1000.0);
    CHECK((slope - v).norm() <= 0.1 * v.norm());
  }
}

TEST_CASE("mirrored stream tracked backward mirrors the forward track") {
  const MovingSquare s = moving_square(Vec2(26.0, 20.0), Vec2(0.08, -0.06), 40);
  const TimestampUs span = 40000;
  std::vector<Event> rev;
  for (auto it = s.events.events().rbegin(); it != s.events.events().rend(); ++it) {
    rev.push_back({span - it->t, it->x, it->y, static_cast<std::int8_t>(-it->polarity)});
  }
  const EventStream mirrored(kSensor, rev);
  LatentImage start = s.video.front();
  start.timestamp = span;
  TrackerOptions opt;
  opt.window_events = 40;
  const std::vector<Vec2> seeds{{19.0, 13.0}};
  const auto fwd = track_features(seeds, s.events, s.video.front(), TrackDirection::kForward, span, kC, opt);
  const auto bwd = track_features(seeds, mirrored, start, TrackDirection::kBackward, 0, kC, opt);
  REQUIRE(fwd[0].samples.size() > 5);
  REQUIRE(bwd[0].samples.size() > 5);
  for (const TrackSample& f : fwd[0].samples) {
    const auto m = track_position(bwd[0].samples, span - f.t);
    if (!m) continue;
    CHECK((*m - f.position).norm() < 1.0);
  }
}

TEST_CASE("tracker argument checks") {
  const LatentImage l = square_scene(Vec2(30.0, 22.0), 1000);
  const std::vector<Vec2> seeds{{23.0, 15.0}};
  TrackerOptions even;
  even.patch_size = 10;
  CHECK_THROWS_AS(track_features(seeds, EventStream(kSensor, {}), l, TrackDirection::kForward, 2000, kC, even),
                  DomainError);
  CHECK_THROWS_AS(track_features(seeds, EventStream(kSensor, {}), l, TrackDirection::kForward, 500, kC), DomainError);
  CHECK_THROWS_AS(track_features(seeds, EventStream(kSensor, {}), l, TrackDirection::kBackward, 2000, kC), DomainError);
}

TEST_CASE("stitching") {
  const auto track = [](int id, TrackDirection d, std::vector<TrackSample> s) { return FeatureTrack{id, std::move(s), d}; };
  SUBCASE("identical tracks stitch with zero gap") {
    const std::vector<TrackSample> s{{0, {10, 10}}, {20, {12, 10}}, {40, {14, 10}}};
    const std::vector<FeatureTrack> f{track(0, TrackDirection::kForward, s)};
    const std::vector<FeatureTrack> b{track(0, TrackDirection::kBackward, s)};
    const auto out = stitch_bidirectional(f, b, 20);
    REQUIRE(out.size() == 1);
    CHECK(out[0].stitched);
    CHECK(out[0].midpoint_gap == 0.0);
    CHECK(out[0].samples.size() == 3);
  }
  SUBCASE("5 px apart stays unstitched") {
    const std::vector<FeatureTrack> f{track(0, TrackDirection::kForward, {{0, {10, 10}}, {40, {10, 10}}})};
    const std::vector<FeatureTrack> b{track(0, TrackDirection::kBackward, {{0, {15, 10}}, {40, {15, 10}}})};
    const auto out = stitch_bidirectional(f, b, 20);
    REQUIRE(out.size() == 1);
    CHECK(!out[0].stitched);
    CHECK(out[0].samples.size() == 2);
  }
  SUBCASE("nearer forward track wins the single backward candidate") {
    const std::vector<FeatureTrack> f{track(0, TrackDirection::kForward, {{0, {10, 10}}, {40, {10, 10}}}),
                                      track(1, TrackDirection::kForward, {{0, {11, 10}}, {40, {11, 10}}})};
    const std::vector<FeatureTrack> b{track(0, TrackDirection::kBackward, {{0, {11.5, 10}}, {40, {11.5, 10}}})};
    const auto out = stitch_bidirectional(f, b, 20);
    REQUIRE(out.size() == 2);
    CHECK(!out[0].stitched);
    CHECK(out[1].stitched);
    CHECK(out[1].midpoint_gap == doctest::Approx(0.5));
  }
  SUBCASE("backward half is shifted onto the forward point at the midpoint") {
    const std::vector<FeatureTrack> f{track(0, TrackDirection::kForward, {{0, {10, 10}}, {20, {12, 10}}, {30, {13, 10}}})};
    const std::vector<FeatureTrack> b{track(0, TrackDirection::kBackward, {{10, {11, 11}}, {20, {13, 11}}, {40, {17, 11}}})};
    const auto out = stitch_bidirectional(f, b, 20);
    REQUIRE(out[0].stitched);
    REQUIRE(out[0].samples.size() == 3);
    CHECK(out[0].samples[1].position == Vec2(12, 10));
    CHECK(out[0].samples[2].t == 40);
    CHECK((out[0].samples[2].position - Vec2(16, 10)).norm() < 1e-12);
  }
  SUBCASE("tracks that miss the midpoint are ineligible") {
    const std::vector<FeatureTrack> f{track(0, TrackDirection::kForward, {{0, {10, 10}}, {10, {10, 10}}})};
    const std::vector<FeatureTrack> b{track(0, TrackDirection::kBackward, {{30, {10, 10}}, {40, {10, 10}}})};
    const auto out = stitch_bidirectional(f, b, 20);
    REQUIRE(out.size() == 1);
    CHECK(!out[0].stitched);
  }
}

TEST_CASE("spline fitting") {
  SUBCASE("line and parabola are reproduced") {
    std::vector<TrackSample> line, para;
    for (int i = 0; i <= 40; ++i) {
      const double s = i;
      line.push_back({i * 1000, {3.0 + 0.2 * s, 7.0 - 0.1 * s}});
      para.push_back({i * 1000, {3.0 + 0.05 * s * s, 7.0 + 0.3 * s - 0.01 * s * s}});
    }
    for (const auto* s : {&line, &para}) {
      const FeatureTrajectory tr = fit_spline(0, *s);
      CHECK(tr.rms_residual < 1e-6);
      for (const TrackSample& x : *s) CHECK((tr.evaluate(x.t) - x.position).norm() < 1e-6);
      CHECK(!tr.control_points.empty());
    }
  }
  SUBCASE("noisy arc stays under 1.5 sigma") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 0.3);
    std::vector<TrackSample> arc;
    for (int i = 0; i <= 60; ++i) {
      const double a = 0.02 * i;
      arc.push_back({i * 700, {30.0 + 10.0 * std::cos(a) + n(rng), 20.0 + 10.0 * std::sin(a) + n(rng)}});
    }
    CHECK(fit_spline(0, arc).rms_residual < 1.5 * 0.3 * std::sqrt(2.0));
  }
  SUBCASE("short tracks are piecewise linear") {
    const std::vector<TrackSample> s{{0, {0, 0}}, {10, {10, 0}}, {30, {10, 20}}};
    const FeatureTrajectory tr = fit_spline(3, s, false);
    CHECK(tr.control_points.empty());
    CHECK(!tr.stitched);
    CHECK((tr.evaluate(5) - Vec2(5, 0)).norm() < 1e-12);
    CHECK((tr.evaluate(20) - Vec2(10, 10)).norm() < 1e-12);
  }
  SUBCASE("degenerate input") {
    CHECK_THROWS_AS(fit_spline(0, std::vector<TrackSample>{}), DomainError);
    CHECK_THROWS_AS(fit_spline(0, std::vector<TrackSample>{{5, {0, 0}}, {5, {1, 1}}}), DomainError);
  }
}

TEST_CASE("slicing") {
  SUBCASE("N + 1 evenly spaced frames and linear positions") {
    const std::vector<FeatureTrajectory> tr{line_track(0, {10, 10}, {0.1, 0.2}, 0, 40000)};
    const SlicedBatch b = slice_trajectories(tr, 0, 40000, 40, kSensor);
    REQUIRE(b.frame_times.size() == 41);
    for (int f = 0; f <= 40; ++f) {
      CHECK(b.frame_times[f] == f * 1000);
      REQUIRE(b.positions[0][f]);
      CHECK((*b.positions[0][f] - Vec2(10 + 0.1 * f, 10 + 0.2 * f)).norm() < 1e-6);
    }
    CHECK(b.correspondences.size() == 2 * 39);
    CHECK(tracking_frame_times(0, 40001, 3)[1] == 13334);
  }
  SUBCASE("N = 2 gives frame 1 pairs to frames 0 and 2") {
    const std::vector<FeatureTrajectory> tr{line_track(0, {10, 10}, {0.1, 0.2}, 0, 40000)};
    const SlicedBatch b = slice_trajectories(tr, 0, 40000, 2, kSensor);
    REQUIRE(b.correspondences.size() == 2);
    CHECK(b.correspondences[0].frame == 1);
    CHECK(b.correspondences[0].neighbor == 0);
    CHECK(b.correspondences[1].neighbor == 2);
  }
  SUBCASE("correspondence symmetry and weights") {
    FeatureTrajectory unstitched = line_track(1, {20, 30}, {-0.1, 0.0}, 5000, 40000);
    unstitched.stitched = false;
    const std::vector<FeatureTrajectory> tr{line_track(0, {10, 10}, {0.1, 0.2}, 0, 40000), unstitched};
    const SlicedBatch b = slice_trajectories(tr, 0, 40000, 40, kSensor);
    CHECK(b.feature_weights[1] == 0.5);
    CHECK(!b.positions[1][4]);
    for (const CorrespondenceSet& fwd : b.correspondences) {
      if (fwd.neighbor != fwd.frame + 1 || fwd.neighbor == 40) continue;
      const CorrespondenceSet* back = nullptr;
      for (const CorrespondenceSet& c : b.correspondences)
        if (c.frame == fwd.neighbor && c.neighbor == fwd.frame) back = &c;
      REQUIRE(back);
      REQUIRE(back->pairs.size() == fwd.pairs.size());
      for (std::size_t k = 0; k < fwd.pairs.size(); ++k) {
        CHECK(fwd.pairs[k].p_frame == back->pairs[k].p_neighbor);
        CHECK(fwd.pairs[k].p_neighbor == back->pairs[k].p_frame);
      }
    }
  }
  CHECK_THROWS_AS(tracking_frame_times(0, 100, 1), DomainError);
}

TEST_CASE("anchors bind to the surface under the frame-0 pixel") {
  const ModelBundle body = default_model_bundle();
  std::mt19937_64 rng(21);
  const SkeletonPose pose = testing::random_pose(body.skeleton, rng);
  const auto verts = skin_vertices(body.skeleton, body.mesh, pose);
  const DepthRaster raster(verts, body.mesh.faces, body.camera);
  std::vector<FeatureTrajectory> tr;
  std::vector<Vec2> starts;
  for (int y = 10; y < 170 && starts.size() < 30; y += 7) {
    for (int x = 10; x < 230 && starts.size() < 30; x += 9) {
      if (raster.foreground(x, y)) starts.push_back(Vec2(x, y + (starts.size() % 2 ? 0.3 : 0.0)));
    }
  }
  starts.push_back(Vec2(1.0, 1.0));  // background
  for (std::size_t i = 0; i < starts.size(); ++i)
    tr.push_back(line_track(static_cast<int>(i), starts[i], {0.0, 0.0}, 0, 40000));
  SlicedBatch b = slice_trajectories(tr, 0, 40000, 4, body.camera.sensor);
  const auto anchors = bind_anchors(b, body.skeleton, body.mesh, body.camera, pose);
  REQUIRE(anchors.size() == starts.size());
  CHECK(!anchors.back().valid);
  int valid = 0;
  for (std::size_t h = 0; h + 1 < anchors.size(); ++h) {
    if (!anchors[h].valid) continue;
    ++valid;
    const PosedSkeleton posed(body.skeleton, pose);
    const Vec3 p = posed.point(surface_point(body.skeleton, body.mesh, anchors[h].vertices, anchors[h].barycentric));
    // Pixel centers hit their own face exactly; off-center points may clamp to its edge.
    CHECK((project(body.camera, p) - starts[h]).norm() < (h % 2 ? 0.5 : 1e-6));
  }
  CHECK(valid >= 25);
  for (const CorrespondenceSet& set : b.correspondences)
    for (const CorrespondencePair& pr : set.pairs) CHECK(pr.anchor.valid == anchors[pr.feature].valid);
}
