#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <vector>

#include "eventcap/event_core.hpp"

namespace eventcap {

// Event files: ".csv" holds a `t_us,x,y,p` header and one event per line;
// ".bin" holds packed little-endian records (u64 t_us, u16 x, u16 y, i8 p).
inline constexpr std::size_t kBinaryEventRecordSize = 13;

void write_events(const std::filesystem::path& path, const EventStream& stream);
EventStream read_events(const std::filesystem::path& path, SensorSize sensor);

/// Forward-only windowed reader over an event file. Only the events between the
/// oldest requested window start and the newest window end are kept in memory.
class EventFileSource {
 public:
  EventFileSource(const std::filesystem::path& path, SensorSize sensor);

  /// Events with lo <= t <= hi. `lo` must not decrease between calls.
  EventStream window(TimestampUs lo, TimestampUs hi);

 private:
  bool read_next(Event& e);

  std::ifstream in_;
  bool binary_ = false;
  SensorSize sensor_;
  std::vector<Event> buffer_;
  bool has_pending_ = false;
  Event pending_;
  TimestampUs last_lo_ = 0;
  std::size_t line_ = 1;
};

// Intensity frames: 16-bit grayscale PNG plus a JSON sidecar (same stem, ".json")
// carrying `center_timestamp_us` and `exposure_us`. Pixel values are rounded and
// clamped to [0, 65535].
std::filesystem::path frame_sidecar_path(const std::filesystem::path& png_path);
void write_frame(const std::filesystem::path& png_path, const IntensityFrame& frame);
IntensityFrame read_frame(const std::filesystem::path& png_path);

// Event camera settings as JSON: contrast_threshold, exposure_us, intensity_fps,
// width, height.
void save_camera_config(const std::filesystem::path& path, const EventCameraConfig& config);
EventCameraConfig load_camera_config(const std::filesystem::path& path);

}  // namespace eventcap
