#include "eventcap/event_io.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstring>
#include <string>

#include "json.hpp"
#include <opencv2/imgcodecs.hpp>

namespace eventcap {
namespace {

bool is_binary_path(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".bin") return true;
  if (ext == ".csv") return false;
  throw IoError("unsupported event file extension '" + ext + "' (expected .csv or .bin)");
}

template <typename T>
void put_le(std::array<unsigned char, kBinaryEventRecordSize>& buf, std::size_t at, T value) {
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf[at + i] = static_cast<unsigned char>(u & 0xFF);
    u = static_cast<U>(u >> 8);
  }
}

template <typename T>
T get_le(const std::array<unsigned char, kBinaryEventRecordSize>& buf, std::size_t at) {
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = sizeof(T); i-- > 0;) u = static_cast<U>((u << 8) | buf[at + i]);
  return static_cast<T>(u);
}

template <typename T>
T parse_field(std::string_view s, std::size_t line) {
  T value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw IoError("event csv: malformed field '" + std::string(s) + "' on line " +
                  std::to_string(line));
  }
  return value;
}

}  // namespace

void write_events(const std::filesystem::path& path, const EventStream& stream) {
  const bool binary = is_binary_path(path);
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  if (binary) {
    std::array<unsigned char, kBinaryEventRecordSize> buf{};
    for (const Event& e : stream.events()) {
      put_le<std::uint64_t>(buf, 0, static_cast<std::uint64_t>(e.t));
      put_le<std::uint16_t>(buf, 8, e.x);
      put_le<std::uint16_t>(buf, 10, e.y);
      put_le<std::int8_t>(buf, 12, e.polarity);
      out.write(reinterpret_cast<const char*>(buf.data()), buf.size());
    }
  } else {
    out << "t_us,x,y,p\n";
    for (const Event& e : stream.events()) {
      out << e.t << ',' << e.x << ',' << e.y << ',' << static_cast<int>(e.polarity) << '\n';
    }
  }
  if (!out) throw IoError("write failed for " + path.string());
}

EventFileSource::EventFileSource(const std::filesystem::path& path, SensorSize sensor)
    : binary_(is_binary_path(path)), sensor_(sensor) {
  in_.open(path, binary_ ? std::ios::binary : std::ios::in);
  if (!in_) throw IoError("cannot open event file " + path.string());
  if (!binary_) {
    std::string header;
    std::getline(in_, header);
    if (!header.empty() && header.back() == '\r') header.pop_back();
    if (header != "t_us,x,y,p") throw IoError("event csv: expected header 't_us,x,y,p'");
  }
}

bool EventFileSource::read_next(Event& e) {
  if (binary_) {
    std::array<unsigned char, kBinaryEventRecordSize> buf{};
    in_.read(reinterpret_cast<char*>(buf.data()), buf.size());
    if (in_.gcount() == 0) return false;
    if (static_cast<std::size_t>(in_.gcount()) != buf.size()) {
      throw IoError("event bin: truncated record");
    }
    e.t = static_cast<TimestampUs>(get_le<std::uint64_t>(buf, 0));
    e.x = get_le<std::uint16_t>(buf, 8);
    e.y = get_le<std::uint16_t>(buf, 10);
    e.polarity = get_le<std::int8_t>(buf, 12);
    return true;
  }
  std::string line;
  while (std::getline(in_, line)) {
    ++line_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::array<std::string_view, 4> fields;
    std::string_view rest(line);
    for (std::size_t i = 0; i < 4; ++i) {
      const auto comma = rest.find(',');
      if ((comma == std::string_view::npos) != (i == 3)) {
        throw IoError("event csv: expected 4 fields on line " + std::to_string(line_));
      }
      fields[i] = rest.substr(0, comma);
      rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    }
    e.t = parse_field<TimestampUs>(fields[0], line_);
    e.x = parse_field<std::uint16_t>(fields[1], line_);
    e.y = parse_field<std::uint16_t>(fields[2], line_);
    e.polarity = static_cast<std::int8_t>(parse_field<int>(fields[3], line_));
    return true;
  }
  return false;
}

EventStream EventFileSource::window(TimestampUs lo, TimestampUs hi) {
  if (lo < last_lo_) throw DomainError("event source: windows must move forward in time");
  last_lo_ = lo;
  buffer_.erase(buffer_.begin(), std::lower_bound(buffer_.begin(), buffer_.end(), lo,
                                                  [](const Event& e, TimestampUs t) {
                                                    return e.t < t;
                                                  }));
  for (;;) {
    if (!has_pending_) {
      if (!read_next(pending_)) break;
      has_pending_ = true;
    }
    if (pending_.t > hi) break;
    if (!buffer_.empty() && pending_.t < buffer_.back().t) {
      throw DomainError("event source: file is not time-ordered");
    }
    if (pending_.t >= lo) buffer_.push_back(pending_);
    has_pending_ = false;
  }
  std::vector<Event> out;
  for (const Event& e : buffer_) {
    if (e.t > hi) break;
    out.push_back(e);
  }
  return EventStream(sensor_, std::move(out));
}

EventStream read_events(const std::filesystem::path& path, SensorSize sensor) {
  EventFileSource source(path, sensor);
  return source.window(0, std::numeric_limits<TimestampUs>::max());
}

std::filesystem::path frame_sidecar_path(const std::filesystem::path& png_path) {
  std::filesystem::path p = png_path;
  p.replace_extension(".json");
  return p;
}

void write_frame(const std::filesystem::path& png_path, const IntensityFrame& frame) {
  cv::Mat1w pixels(frame.pixels.rows, frame.pixels.cols);
  for (int y = 0; y < pixels.rows; ++y) {
    for (int x = 0; x < pixels.cols; ++x) {
      const double v = std::clamp(std::round(frame.pixels(y, x)), 0.0, 65535.0);
      pixels(y, x) = static_cast<std::uint16_t>(v);
    }
  }
  bool ok = false;
  try {
    ok = cv::imwrite(png_path.string(), pixels);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write frame " + png_path.string() + ": " + e.what());
  }
  if (!ok) throw IoError("cannot write frame " + png_path.string());
  std::ofstream side(frame_sidecar_path(png_path));
  if (!side) throw IoError("cannot write frame sidecar for " + png_path.string());
  nlohmann::json j{{"center_timestamp_us", frame.center_timestamp},
                   {"exposure_us", frame.exposure_us}};
  side << j.dump(2) << '\n';
}

IntensityFrame read_frame(const std::filesystem::path& png_path) {
  const cv::Mat raw = cv::imread(png_path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_GRAYSCALE);
  if (raw.empty()) throw IoError("cannot read frame " + png_path.string());
  if (raw.depth() != CV_16U) throw IoError("frame " + png_path.string() + " is not 16-bit");
  std::ifstream side(frame_sidecar_path(png_path));
  if (!side) throw IoError("missing sidecar for frame " + png_path.string());
  nlohmann::json j;
  try {
    side >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad sidecar for frame " + png_path.string() + ": " + e.what());
  }
  IntensityFrame frame;
  raw.convertTo(frame.pixels, CV_64F);
  frame.center_timestamp = j.at("center_timestamp_us").get<TimestampUs>();
  frame.exposure_us = j.at("exposure_us").get<TimestampUs>();
  return frame;
}

void save_camera_config(const std::filesystem::path& path, const EventCameraConfig& config) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write camera config " + path.string());
  const nlohmann::json j{{"contrast_threshold", config.contrast_threshold},
                         {"exposure_us", config.exposure_us},
                         {"intensity_fps", config.intensity_fps},
                         {"width", config.sensor.width},
                         {"height", config.sensor.height}};
  out << j.dump(2) << '\n';
}

EventCameraConfig load_camera_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open camera config " + path.string());
  EventCameraConfig c;
  try {
    nlohmann::json j;
    in >> j;
    c.contrast_threshold = j.at("contrast_threshold").get<double>();
    c.exposure_us = j.at("exposure_us").get<TimestampUs>();
    c.intensity_fps = j.at("intensity_fps").get<double>();
    c.sensor = {j.at("width").get<int>(), j.at("height").get<int>()};
  } catch (const nlohmann::json::exception& e) {
    throw IoError("camera config " + path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

}  // namespace eventcap
