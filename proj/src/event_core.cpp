#include "eventcap/event_core.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <opencv2/imgcodecs.hpp>

namespace eventcap {

EventStream::EventStream(SensorSize sensor, std::vector<Event> events)
    : sensor_(sensor), events_(std::move(events)) {
  if (sensor_.width <= 0 || sensor_.height <= 0) {
    throw DomainError("event stream: sensor size must be positive");
  }
  std::vector<TimestampUs> last(sensor_.pixel_count(), -1);
  TimestampUs prev = -1;
  for (std::size_t i = 0; i < events_.size(); ++i) {
    const Event& e = events_[i];
    if (!sensor_.contains(e.x, e.y)) {
      throw DomainError("event stream: event " + std::to_string(i) + " out of sensor bounds");
    }
    if (e.polarity != 1 && e.polarity != -1) {
      throw DomainError("event stream: event " + std::to_string(i) + " has polarity not in {-1,1}");
    }
    if (e.t < 0 || e.t < prev) {
      throw DomainError("event stream: timestamps not non-decreasing at event " +
                        std::to_string(i));
    }
    TimestampUs& lp = last[static_cast<std::size_t>(e.y) * sensor_.width + e.x];
    if (e.t <= lp) {
      throw DomainError("event stream: repeated timestamp at pixel (" + std::to_string(e.x) + "," +
                        std::to_string(e.y) + ")");
    }
    lp = e.t;
    prev = e.t;
  }
}

std::span<const Event> EventStream::between(TimestampUs lo, TimestampUs hi) const {
  if (hi < lo) return {};
  auto first = std::lower_bound(events_.begin(), events_.end(), lo,
                                [](const Event& e, TimestampUs t) { return e.t < t; });
  auto last = std::upper_bound(first, events_.end(), hi,
                               [](TimestampUs t, const Event& e) { return t < e.t; });
  return {first, last};
}

TimestampUs EventCameraConfig::frame_period_us() const {
  return static_cast<TimestampUs>(std::llround(1e6 / intensity_fps));
}

void EventCameraConfig::validate() const {
  if (!(contrast_threshold > 0.0)) throw ConfigError("contrast threshold must be positive");
  if (!(intensity_fps > 0.0)) throw ConfigError("intensity fps must be positive");
  if (exposure_us <= 0) throw ConfigError("exposure must be positive");
  if (exposure_us > frame_period_us()) throw ConfigError("exposure exceeds the frame period");
  if (sensor.width <= 0 || sensor.height <= 0) throw ConfigError("sensor size must be positive");
}

PixelEventIndex::PixelEventIndex(const EventStream& stream) : sensor_(stream.sensor()) {
  const std::size_t n_pix = sensor_.pixel_count();
  offsets_.assign(n_pix + 1, 0);
  for (const Event& e : stream.events()) {
    ++offsets_[static_cast<std::size_t>(e.y) * sensor_.width + e.x + 1];
  }
  for (std::size_t i = 0; i < n_pix; ++i) offsets_[i + 1] += offsets_[i];
  times_.resize(stream.size());
  polarities_.resize(stream.size());
  std::vector<std::size_t> fill(offsets_.begin(), offsets_.end() - 1);
  // Stream order is time order, so each pixel's slice comes out sorted.
  for (const Event& e : stream.events()) {
    std::size_t& slot = fill[static_cast<std::size_t>(e.y) * sensor_.width + e.x];
    times_[slot] = e.t;
    polarities_[slot] = e.polarity;
    ++slot;
  }
}

std::span<const TimestampUs> PixelEventIndex::times(int x, int y) const {
  const std::size_t p = static_cast<std::size_t>(y) * sensor_.width + x;
  return {times_.data() + offsets_[p], offsets_[p + 1] - offsets_[p]};
}

std::span<const std::int8_t> PixelEventIndex::polarities(int x, int y) const {
  const std::size_t p = static_cast<std::size_t>(y) * sensor_.width + x;
  return {polarities_.data() + offsets_[p], offsets_[p + 1] - offsets_[p]};
}

double PixelEventIndex::accumulate(int x, int y, TimestampUs t_start, TimestampUs t_end,
                                   double contrast) const {
  if (!sensor_.contains(x, y)) throw DomainError("accumulate: pixel out of bounds");
  if (t_start > t_end) throw DomainError("accumulate: t_start > t_end");
  auto ts = times(x, y);
  auto ps = polarities(x, y);
  const auto first = std::upper_bound(ts.begin(), ts.end(), t_start) - ts.begin();
  const auto last = std::upper_bound(ts.begin(), ts.end(), t_end) - ts.begin();
  int sum = 0;
  for (auto i = first; i < last; ++i) sum += ps[static_cast<std::size_t>(i)];
  return sum * contrast;
}

double accumulate_events(const EventStream& stream, int x, int y, TimestampUs t_start,
                         TimestampUs t_end, double contrast) {
  if (!stream.sensor().contains(x, y)) throw DomainError("accumulate_events: pixel out of bounds");
  if (t_start > t_end) throw DomainError("accumulate_events: t_start > t_end");
  int sum = 0;
  for (const Event& e : stream.between(t_start + 1, t_end)) {
    if (e.x == x && e.y == y) sum += e.polarity;
  }
  return sum * contrast;
}

EdiResult edi_sharpen(const IntensityFrame& frame, const EventStream& stream,
                      const EventCameraConfig& config) {
  if (frame.exposure_us <= 0) throw DomainError("edi_sharpen: empty exposure window");
  if (frame.pixels.rows != config.sensor.height || frame.pixels.cols != config.sensor.width) {
    throw DomainError("edi_sharpen: frame size does not match the sensor");
  }
  const TimestampUs t_begin = frame.exposure_begin();
  const TimestampUs t_end = frame.exposure_end();
  const TimestampUs t_center = frame.center_timestamp;
  const double c = config.contrast_threshold;
  const int w = config.sensor.width;
  const std::size_t n_pix = config.sensor.pixel_count();

  // Per pixel: E_s(t) accumulated from the window start, its value at t_center,
  // and the running integral of exp(E_s) over the window.
  std::vector<int> steps(n_pix, 0);
  std::vector<int> steps_at_center(n_pix, 0);
  std::vector<TimestampUs> last_t(n_pix, t_begin);
  std::vector<double> integral(n_pix, 0.0);

  for (const Event& e : stream.between(t_begin + 1, t_end)) {
    const std::size_t p = static_cast<std::size_t>(e.y) * w + e.x;
    integral[p] += std::exp(steps[p] * c) * static_cast<double>(e.t - last_t[p]);
    last_t[p] = e.t;
    steps[p] += e.polarity;
    if (e.t <= t_center) steps_at_center[p] = steps[p];
  }

  EdiResult out;
  out.latent.timestamp = t_center;
  out.latent.log_pixels.create(config.sensor.height, w);
  const double exposure = static_cast<double>(frame.exposure_us);
  for (int y = 0; y < config.sensor.height; ++y) {
    const double* src = frame.pixels[y];
    double* dst = out.latent.log_pixels[y];
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      const double total =
          integral[p] + std::exp(steps[p] * c) * static_cast<double>(t_end - last_t[p]);
      double intensity = src[x];
      if (!(intensity >= 1.0)) {
        intensity = 1.0;
        ++out.clamped_pixels;
      }
      dst[x] = std::log(intensity) + steps_at_center[p] * c - std::log(total / exposure);
    }
  }
  return out;
}

std::vector<TimestampUs> frame_centers_for(TimestampUs t_begin, TimestampUs t_end,
                                           const EventCameraConfig& config) {
  config.validate();
  std::vector<TimestampUs> centers;
  const TimestampUs half = config.exposure_us - config.exposure_us / 2;
  for (TimestampUs c = t_begin + half;; c += config.frame_period_us()) {
    const TimestampUs begin = c - config.exposure_us / 2;
    if (begin + config.exposure_us > t_end) break;
    centers.push_back(c);
  }
  return centers;
}

EventSimulator::EventSimulator(EventCameraConfig config, std::vector<TimestampUs> frame_centers)
    : config_(config) {
  config_.validate();
  std::sort(frame_centers.begin(), frame_centers.end());
  for (TimestampUs c : frame_centers) {
    FrameAccumulator f;
    f.center = c;
    f.begin = c - config_.exposure_us / 2;
    f.end = f.begin + config_.exposure_us;
    frames_.push_back(f);
  }
}

namespace {

// Integral over [a, b] (in microseconds) of exp of a linear function going from la to lb.
double exp_linear_integral(double la, double lb, double duration) {
  const double d = lb - la;
  if (std::abs(d) < 1e-9) return duration * std::exp(0.5 * (la + lb));
  return duration * (std::exp(lb) - std::exp(la)) / d;
}

constexpr double kThresholdSlack = 1e-9;

}  // namespace

void EventSimulator::integrate_frames(const cv::Mat1d& l0, const cv::Mat1d& l1, TimestampUs t0,
                                      TimestampUs t1) {
  const double span = static_cast<double>(t1 - t0);
  for (FrameAccumulator& f : frames_) {
    const TimestampUs a = std::max(f.begin, t0);
    const TimestampUs b = std::min(f.end, t1);
    if (b <= a) continue;
    if (f.integral.empty()) f.integral = cv::Mat1d::zeros(l0.rows, l0.cols);
    const double wa = static_cast<double>(a - t0) / span;
    const double wb = static_cast<double>(b - t0) / span;
    const double duration = static_cast<double>(b - a);
    for (int y = 0; y < l0.rows; ++y) {
      const double* p0 = l0[y];
      const double* p1 = l1[y];
      double* acc = f.integral[y];
      for (int x = 0; x < l0.cols; ++x) {
        const double la = p0[x] + (p1[x] - p0[x]) * wa;
        const double lb = p0[x] + (p1[x] - p0[x]) * wb;
        acc[x] += exp_linear_integral(la, lb, duration);
      }
    }
    f.covered += b - a;
  }
}

void EventSimulator::push(const LatentImage& sample) {
  const SensorSize& s = config_.sensor;
  if (sample.log_pixels.rows != s.height || sample.log_pixels.cols != s.width) {
    throw DomainError("simulator: latent sample size does not match the sensor");
  }
  if (samples_ == 0) {
    last_log_ = sample.log_pixels.clone();
    reference_ = sample.log_pixels.clone();
    last_event_t_.assign(s.pixel_count(), -1);
    last_t_ = sample.timestamp;
    ++samples_;
    return;
  }
  if (sample.timestamp <= last_t_) throw DomainError("simulator: latent samples must be time-ordered");

  const TimestampUs t0 = last_t_;
  const TimestampUs t1 = sample.timestamp;
  const double span = static_cast<double>(t1 - t0);
  const double c = config_.contrast_threshold;

  for (int y = 0; y < s.height; ++y) {
    const double* l0_row = last_log_[y];
    const double* l1_row = sample.log_pixels[y];
    double* ref_row = reference_[y];
    for (int x = 0; x < s.width; ++x) {
      const double l0 = l0_row[x];
      const double l1 = l1_row[x];
      double& ref = ref_row[x];
      int polarity = 0;
      if (l1 - ref >= c - kThresholdSlack) {
        polarity = 1;
      } else if (ref - l1 >= c - kThresholdSlack) {
        polarity = -1;
      }
      if (polarity == 0) continue;
      TimestampUs& last_t = last_event_t_[static_cast<std::size_t>(y) * s.width + x];
      while (polarity * (l1 - ref) >= c - kThresholdSlack) {
        const double level = ref + polarity * c;
        double frac = (l1 != l0) ? (level - l0) / (l1 - l0) : 1.0;
        frac = std::clamp(frac, 0.0, 1.0);
        TimestampUs t = t0 + static_cast<TimestampUs>(std::llround(frac * span));
        if (t <= last_t) t = last_t + 1;
        last_t = t;
        events_.push_back(Event{t, static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y),
                                static_cast<std::int8_t>(polarity)});
        ref = level;
      }
    }
  }

  integrate_frames(last_log_, sample.log_pixels, t0, t1);
  sample.log_pixels.copyTo(last_log_);
  last_t_ = t1;
  ++samples_;
}

SimulationResult EventSimulator::finish() {
  if (samples_ < 2) throw DomainError("simulator: at least 2 latent samples are required");
  std::sort(events_.begin(), events_.end(), [](const Event& a, const Event& b) {
    if (a.t != b.t) return a.t < b.t;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  SimulationResult out;
  out.events = EventStream(config_.sensor, std::move(events_));
  events_.clear();
  for (FrameAccumulator& f : frames_) {
    if (f.covered != config_.exposure_us) {
      throw DomainError("simulator: frame at t=" + std::to_string(f.center) +
                        " us is not covered by the latent samples");
    }
    IntensityFrame frame;
    frame.center_timestamp = f.center;
    frame.exposure_us = config_.exposure_us;
    frame.pixels = f.integral / static_cast<double>(config_.exposure_us);
    out.frames.push_back(std::move(frame));
  }
  return out;
}

SimulationResult simulate_events(std::span<const LatentImage> latent_video,
                                 const EventCameraConfig& config) {
  if (latent_video.size() < 2) throw DomainError("simulate_events: fewer than 2 latent samples");
  EventSimulator sim(config, frame_centers_for(latent_video.front().timestamp,
                                               latent_video.back().timestamp, config));
  for (const LatentImage& l : latent_video) sim.push(l);
  return sim.finish();
}

cv::Mat3b draw_event_overlay(const EventStream& stream, TimestampUs lo, TimestampUs hi,
                             std::span<const Vec2> boundary) {
  const SensorSize& s = stream.sensor();
  cv::Mat1i net = cv::Mat1i::zeros(s.height, s.width);
  for (const Event& e : stream.between(lo, hi)) net(e.y, e.x) += e.polarity;

  cv::Mat3b canvas(s.height, s.width, cv::Vec3b(255, 255, 255));
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      const int n = net(y, x);
      if (n == 0) continue;
      const int shade = std::max(0, 200 - 50 * (std::abs(n) - 1));
      // BGR: positive red, negative blue.
      canvas(y, x) = n > 0 ? cv::Vec3b(static_cast<uchar>(shade), static_cast<uchar>(shade), 255)
                           : cv::Vec3b(255, static_cast<uchar>(shade), static_cast<uchar>(shade));
    }
  }
  for (const Vec2& p : boundary) {
    if (!std::isfinite(p.x()) || !std::isfinite(p.y())) continue;
    const long x = std::lround(p.x());
    const long y = std::lround(p.y());
    if (x < 0 || y < 0 || x >= s.width || y >= s.height) continue;
    canvas(static_cast<int>(y), static_cast<int>(x)) = cv::Vec3b(0, 160, 0);
  }
  return canvas;
}

void render_event_overlay(const EventStream& stream, TimestampUs lo, TimestampUs hi,
                          std::span<const Vec2> boundary, const std::filesystem::path& path) {
  const cv::Mat3b canvas = draw_event_overlay(stream, lo, hi, boundary);
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), canvas);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write overlay " + path.string() + ": " + e.what());
  }
  if (!ok) throw IoError("cannot write overlay " + path.string());
}

}  // namespace eventcap
