#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <opencv2/core.hpp>

#include "eventcap/common.hpp"

namespace eventcap {

/// One brightness-change event: pixel, timestamp and polarity (+1 brighter, -1 darker).
struct Event {
  TimestampUs t = 0;
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::int8_t polarity = 1;

  friend bool operator==(const Event&, const Event&) = default;
};

/// Time-ordered events of one sensor.
///
/// Construction validates the stream: every pixel in bounds, polarity exactly +-1,
/// timestamps non-decreasing overall and strictly increasing per pixel.
class EventStream {
 public:
  EventStream() = default;
  EventStream(SensorSize sensor, std::vector<Event> events);

  const SensorSize& sensor() const { return sensor_; }
  std::span<const Event> events() const { return events_; }
  std::size_t size() const { return events_.size(); }
  bool empty() const { return events_.empty(); }

  /// Events with lo <= t <= hi.
  std::span<const Event> between(TimestampUs lo, TimestampUs hi) const;

 private:
  SensorSize sensor_;
  std::vector<Event> events_;
};

struct EventCameraConfig {
  double contrast_threshold = 0.25;  // C, log-brightness units
  TimestampUs exposure_us = 20000;   // T
  double intensity_fps = 25.0;
  SensorSize sensor{240, 180};

  TimestampUs frame_period_us() const;
  void validate() const;
};

/// Exposure-averaged intensity image. Pixel values are linear (DN), not log.
struct IntensityFrame {
  cv::Mat1d pixels;
  TimestampUs center_timestamp = 0;
  TimestampUs exposure_us = 0;

  TimestampUs exposure_begin() const { return center_timestamp - exposure_us / 2; }
  TimestampUs exposure_end() const { return exposure_begin() + exposure_us; }
};

/// Sharp log-brightness image L(t).
struct LatentImage {
  cv::Mat1d log_pixels;
  TimestampUs timestamp = 0;
};

/// Per-pixel, time-sorted view of a stream (CSR layout) for windowed queries.
class PixelEventIndex {
 public:
  PixelEventIndex() = default;
  explicit PixelEventIndex(const EventStream& stream);

  const SensorSize& sensor() const { return sensor_; }
  std::span<const TimestampUs> times(int x, int y) const;
  std::span<const std::int8_t> polarities(int x, int y) const;

  /// Sum of p*C over the pixel's events with t_start < t <= t_end.
  double accumulate(int x, int y, TimestampUs t_start, TimestampUs t_end, double contrast) const;

 private:
  SensorSize sensor_;
  std::vector<std::size_t> offsets_;
  std::vector<TimestampUs> times_;
  std::vector<std::int8_t> polarities_;
};

/// Sum of p*C over events at `pixel` with t_start < t <= t_end. Throws DomainError
/// for an out-of-bounds pixel or t_start > t_end.
double accumulate_events(const EventStream& stream, int x, int y, TimestampUs t_start,
                         TimestampUs t_end, double contrast);

struct EdiResult {
  LatentImage latent;
  int clamped_pixels = 0;  // pixels below 1 DN, clamped before the log
};

/// Recovers the sharp log image at the frame's center timestamp from a blurred
/// exposure and the events inside that exposure window.
///
/// The exposure integral of exp(E(t)) is evaluated exactly: E is piecewise constant
/// between events, so the integral is a sum over inter-event intervals.
EdiResult edi_sharpen(const IntensityFrame& frame, const EventStream& stream,
                      const EventCameraConfig& config);

struct SimulationResult {
  EventStream events;
  std::vector<IntensityFrame> frames;
};

/// Frame centers whose full exposure window fits in [t_begin, t_end], spaced by the
/// frame period and starting at t_begin + T/2.
std::vector<TimestampUs> frame_centers_for(TimestampUs t_begin, TimestampUs t_end,
                                           const EventCameraConfig& config);

/// Streaming event-camera forward model.
///
/// Latent samples are pushed in time order; L is linearly interpolated between
/// samples. A pixel fires each time L moves a full C away from its reference level,
/// the reference then steps by C. Frames integrate exp(L) over their exposure.
class EventSimulator {
 public:
  EventSimulator(EventCameraConfig config, std::vector<TimestampUs> frame_centers);

  void push(const LatentImage& sample);
  std::size_t sample_count() const { return samples_; }
  std::size_t event_count() const { return events_.size(); }

  /// Throws DomainError if fewer than 2 samples were pushed or a requested frame's
  /// exposure is not covered by the pushed samples.
  SimulationResult finish();

 private:
  struct FrameAccumulator {
    TimestampUs center = 0;
    TimestampUs begin = 0;
    TimestampUs end = 0;
    TimestampUs covered = 0;
    cv::Mat1d integral;
  };

  void integrate_frames(const cv::Mat1d& l0, const cv::Mat1d& l1, TimestampUs t0, TimestampUs t1);

  EventCameraConfig config_;
  std::vector<FrameAccumulator> frames_;
  std::vector<Event> events_;
  cv::Mat1d last_log_;
  cv::Mat1d reference_;
  std::vector<TimestampUs> last_event_t_;
  TimestampUs last_t_ = 0;
  std::size_t samples_ = 0;
};

/// Batch wrapper around EventSimulator; frames follow frame_centers_for() over the
/// video's time span.
SimulationResult simulate_events(std::span<const LatentImage> latent_video,
                                 const EventCameraConfig& config);

/// Polarity-colored accumulation of events with lo <= t <= hi on a white canvas,
/// with `boundary` points drawn on top. Out-of-bounds points are clipped.
cv::Mat3b draw_event_overlay(const EventStream& stream, TimestampUs lo, TimestampUs hi,
                             std::span<const Vec2> boundary);

/// Writes draw_event_overlay() as PNG. Throws IoError if the file cannot be written.
void render_event_overlay(const EventStream& stream, TimestampUs lo, TimestampUs hi,
                          std::span<const Vec2> boundary, const std::filesystem::path& path);

}  // namespace eventcap
