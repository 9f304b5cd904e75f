#include "dunet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

namespace dunet {

namespace fs = std::filesystem;

const char* filter_kind_name(FilterKind k) {
  switch (k) {
    case FilterKind::brightness: return "brightness";
    case FilterKind::contrast: return "contrast";
    case FilterKind::rotation: return "rotation";
    case FilterKind::flip: return "flip";
    case FilterKind::shadow: return "shadow";
    case FilterKind::background: return "background";
    case FilterKind::color_shift: return "color_shift";
  }
  return "?";
}

FilterKind filter_kind_from_name(const std::string& name) {
  for (FilterKind k :
       {FilterKind::brightness, FilterKind::contrast, FilterKind::rotation, FilterKind::flip,
        FilterKind::shadow, FilterKind::background, FilterKind::color_shift})
    if (name == filter_kind_name(k)) return k;
  throw std::invalid_argument("unknown filter kind: " + name);
}

namespace {

uint8_t clamp_u8(double v) {
  return static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

// Captures must be spaced strictly more than min_gap apart: at 30 fps with a
// 500 ms gap frame 15 lands exactly on the boundary and is excluded, so the
// capture indices are 0, 16, 32, ... The epsilon absorbs ulp drift in i*P.
bool gap_elapsed(double ts, double last_ts, double min_gap) {
  return ts >= last_ts + min_gap + 1e-6;
}

Box clamp_box(const Box& b, int w, int h) {
  auto cx = [&](double v) { return std::clamp(v, 0.0, static_cast<double>(w)); };
  auto cy = [&](double v) { return std::clamp(v, 0.0, static_cast<double>(h)); };
  return {cx(b.xmin), cy(b.ymin), cx(b.xmax), cy(b.ymax)};
}

}  // namespace

std::optional<std::pair<Image, Box>> apply_filter(const Image& frame, const Box& box,
                                                  const FilterSpec& f, std::mt19937_64& rng) {
  const int W = frame.width, H = frame.height;
  Image out = frame;
  Box out_box = box;

  switch (f.kind) {
    case FilterKind::brightness: {
      std::uniform_real_distribution<double> d(f.gain_lo, f.gain_hi);
      const double g = d(rng);
      if (g != 1.0)
        for (auto& p : out.rgb) p = clamp_u8(p * g);
      break;
    }
    case FilterKind::contrast: {
      std::uniform_real_distribution<double> d(f.gain_lo, f.gain_hi);
      const double c = d(rng);
      for (auto& p : out.rgb) p = clamp_u8((p - 128.0) * c + 128.0);
      break;
    }
    case FilterKind::color_shift: {
      std::uniform_real_distribution<double> d(-f.color_shift_max, f.color_shift_max);
      const double sh[3] = {d(rng), d(rng), d(rng)};
      for (size_t i = 0; i < out.rgb.size(); ++i)
        out.rgb[i] = clamp_u8(out.rgb[i] + sh[i % 3]);
      break;
    }
    case FilterKind::shadow: {
      // Darken one side of a random line through the image.
      std::uniform_real_distribution<double> ang(0, 2 * M_PI);
      std::uniform_real_distribution<double> off(0.25, 0.75);
      std::uniform_real_distribution<double> gd(f.shadow_lo, f.shadow_hi);
      const double theta = ang(rng), g = gd(rng);
      const double nx = std::cos(theta), ny = std::sin(theta);
      const double d0 = nx * off(rng) * W + ny * off(rng) * H;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          if (nx * x + ny * y > d0) {
            uint8_t* p = out.px(x, y);
            for (int c = 0; c < 3; ++c) p[c] = clamp_u8(p[c] * g);
          }
      break;
    }
    case FilterKind::flip: {
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W / 2; ++x)
          for (int c = 0; c < 3; ++c) std::swap(out.px(x, y)[c], out.px(W - 1 - x, y)[c]);
      out_box = {W - box.xmax, box.ymin, W - box.xmin, box.ymax};
      break;
    }
    case FilterKind::rotation: {
      std::uniform_real_distribution<double> d(-f.rotation_max_deg, f.rotation_max_deg);
      const double a = d(rng) * M_PI / 180.0;
      const double ca = std::cos(a), sa = std::sin(a);
      const double cx = W / 2.0, cy = H / 2.0;
      // Inverse-map each output pixel; clamp-to-edge sampling.
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double sxf = ca * dx + sa * dy + cx - 0.5;
          const double syf = -sa * dx + ca * dy + cy - 0.5;
          const int sx = std::clamp(static_cast<int>(std::lround(sxf)), 0, W - 1);
          const int sy = std::clamp(static_cast<int>(std::lround(syf)), 0, H - 1);
          const uint8_t* s = frame.px(sx, sy);
          uint8_t* p = out.px(x, y);
          p[0] = s[0];
          p[1] = s[1];
          p[2] = s[2];
        }
      // Axis-aligned hull of the four rotated corners.
      const double corners[4][2] = {{box.xmin, box.ymin},
                                    {box.xmax, box.ymin},
                                    {box.xmin, box.ymax},
                                    {box.xmax, box.ymax}};
      Box hull{1e300, 1e300, -1e300, -1e300};
      for (const auto& c : corners) {
        const double dx = c[0] - cx, dy = c[1] - cy;
        const double rx = ca * dx - sa * dy + cx;
        const double ry = sa * dx + ca * dy + cy;
        hull.xmin = std::min(hull.xmin, rx);
        hull.ymin = std::min(hull.ymin, ry);
        hull.xmax = std::max(hull.xmax, rx);
        hull.ymax = std::max(hull.ymax, ry);
      }
      out_box = clamp_box(hull, W, H);
      break;
    }
    case FilterKind::background: {
      const int x0 = std::clamp(static_cast<int>(std::floor(box.xmin)), 0, W);
      const int y0 = std::clamp(static_cast<int>(std::floor(box.ymin)), 0, H);
      const int x1 = std::clamp(static_cast<int>(std::ceil(box.xmax)), 0, W);
      const int y1 = std::clamp(static_cast<int>(std::ceil(box.ymax)), 0, H);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          if (x >= x0 && x < x1 && y >= y0 && y < y1) continue;
          uint8_t* p = out.px(x, y);
          p[0] = f.background_color[0];
          p[1] = f.background_color[1];
          p[2] = f.background_color[2];
        }
      break;
    }
  }

  out_box = clamp_box(out_box, W, H);
  if (out_box.w() <= 0 || out_box.h() <= 0) return std::nullopt;
  return std::make_pair(std::move(out), out_box);
}

FrameSource directory_source(const std::string& dir, double fps) {
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (ext == ".ppm" || ext == ".png") files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("directory_source: no frames in " + dir);
  const double period = 1000.0 / fps;
  auto index = std::make_shared<size_t>(0);
  return [files = std::move(files), index, period]() -> std::optional<SourceFrame> {
    if (*index >= files.size()) return std::nullopt;
    const size_t i = (*index)++;
    return SourceFrame{i * period, read_image(files[i])};
  };
}

FilterScheduler::FilterScheduler(const std::vector<FilterSpec>& filters) {
  if (filters.empty()) throw std::invalid_argument("FilterScheduler: no filters");
  for (const auto& f : filters) {
    if (f.weight <= 0) throw std::invalid_argument("FilterScheduler: weights must be > 0");
    weights_.push_back(f.weight);
    total_ += f.weight;
  }
  current_.assign(weights_.size(), 0.0);
}

size_t FilterScheduler::next() {
  size_t best = 0;
  for (size_t i = 0; i < current_.size(); ++i) {
    current_[i] += weights_[i];
    if (current_[i] > current_[best]) best = i;  // ties keep the lowest index
  }
  current_[best] -= total_;
  return best;
}

std::vector<Capture> schedule_captures(FrameSource source,
                                       const std::vector<FilterSpec>& filters,
                                       double min_gap_ms) {
  FilterScheduler sched(filters);
  std::vector<Capture> captures;
  bool first = true;
  double last_ts = 0;
  while (auto frame = source()) {
    if (!first && !gap_elapsed(frame->timestamp_ms, last_ts, min_gap_ms)) continue;
    last_ts = frame->timestamp_ms;
    first = false;
    captures.push_back({std::move(*frame), sched.next()});
  }
  return captures;
}

// ---------------------------------------------------------------------------
// NCC template tracker.

namespace {

std::vector<double> gray_patch(const Image& img, int x0, int y0, int w, int h) {
  std::vector<double> out(static_cast<size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int sx = std::clamp(x0 + x, 0, img.width - 1);
      const int sy = std::clamp(y0 + y, 0, img.height - 1);
      const uint8_t* p = img.px(sx, sy);
      out[static_cast<size_t>(y) * w + x] = (p[0] + p[1] + p[2]) / 3.0;
    }
  return out;
}

double ncc(const std::vector<double>& a, const std::vector<double>& b) {
  const size_t n = a.size();
  double ma = 0, mb = 0;
  for (size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double num = 0, va = 0, vb = 0;
  for (size_t i = 0; i < n; ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    num += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va <= 0 || vb <= 0) return 0.0;
  return num / std::sqrt(va * vb);
}

}  // namespace

TrackState track_init(const Image& frame, const Box& box) {
  TrackState s;
  s.box = clamp_box(box, frame.width, frame.height);
  if (s.box.w() < 2 || s.box.h() < 2)
    throw std::invalid_argument("track_init: box too small or outside frame");
  s.templ_w = static_cast<int>(std::lround(s.box.w()));
  s.templ_h = static_cast<int>(std::lround(s.box.h()));
  s.templ = gray_patch(frame, static_cast<int>(std::lround(s.box.xmin)),
                       static_cast<int>(std::lround(s.box.ymin)), s.templ_w, s.templ_h);
  s.confidence = 1.0;
  return s;
}

TrackState track_update(const TrackState& state, const Image& next_frame) {
  if (state.templ.empty()) throw std::logic_error("track_update: empty template");
  const int rx = std::max(2, static_cast<int>(std::lround(0.25 * state.templ_w)));
  const int ry = std::max(2, static_cast<int>(std::lround(0.25 * state.templ_h)));
  const int bx = static_cast<int>(std::lround(state.box.xmin));
  const int by = static_cast<int>(std::lround(state.box.ymin));

  // Zero displacement is evaluated first so it wins exact ties.
  int best_dx = 0, best_dy = 0;
  auto patch_at = [&](int dx, int dy) {
    return gray_patch(next_frame, bx + dx, by + dy, state.templ_w, state.templ_h);
  };
  double best = ncc(state.templ, patch_at(0, 0));
  for (int dy = -ry; dy <= ry; ++dy)
    for (int dx = -rx; dx <= rx; ++dx) {
      if (dx == 0 && dy == 0) continue;
      const double v = ncc(state.templ, patch_at(dx, dy));
      if (v > best) {
        best = v;
        best_dx = dx;
        best_dy = dy;
      }
    }

  TrackState out = state;
  out.confidence = best;
  out.box = clamp_box({state.box.xmin + best_dx, state.box.ymin + best_dy,
                       state.box.xmax + best_dx, state.box.ymax + best_dy},
                      next_frame.width, next_frame.height);
  const auto fresh = patch_at(best_dx, best_dy);
  for (size_t i = 0; i < out.templ.size(); ++i)
    out.templ[i] = 0.9 * out.templ[i] + 0.1 * fresh[i];
  return out;
}

// ---------------------------------------------------------------------------

BuildDatasetResult build_dataset(FrameSource source, const Box& initial_box,
                                 const std::vector<FilterSpec>& filters,
                                 const std::string& out_dir, uint64_t seed,
                                 double min_gap_ms, const std::string& class_name) {
  if (filters.empty()) throw std::invalid_argument("build_dataset: no filters");

  BuildDatasetResult result;
  result.dataset.root = out_dir;
  result.dataset.label_map = {class_name};
  fs::create_directories(out_dir + "/frames");

  FilterScheduler sched(filters);
  std::mt19937_64 rng(seed);

  TrackState track;
  bool tracking = false;
  bool first_capture_done = false;
  double last_capture_ts = 0;
  int sample_idx = 0;

  while (auto frame = source()) {
    if (!tracking) {
      track = track_init(frame->image, initial_box);
      tracking = true;
    } else {
      track = track_update(track, frame->image);
      if (track.lost()) {
        result.tracking_lost = true;
        break;
      }
    }

    if (first_capture_done && !gap_elapsed(frame->timestamp_ms, last_capture_ts, min_gap_ms))
      continue;

    const FilterSpec& f = filters[sched.next()];
    auto augmented = apply_filter(frame->image, track.box, f, rng);
    last_capture_ts = frame->timestamp_ms;
    first_capture_done = true;
    if (!augmented) continue;  // degenerate box, sample skipped

    const auto& [img, box] = *augmented;
    FrameRecord rec;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d.ppm", sample_idx);
    rec.image_path = std::string("frames/") + buf;
    rec.timestamp_ms = frame->timestamp_ms;
    rec.width = img.width;
    rec.height = img.height;
    rec.sequence = 0;
    rec.boxes.push_back(
        {1, Box{box.xmin / img.width, box.ymin / img.height, box.xmax / img.width,
                box.ymax / img.height}});
    write_ppm(out_dir + "/frames/" + buf, img);
    result.dataset.frames.push_back(std::move(rec));
    ++result.per_filter_counts[f.kind];
    ++sample_idx;
  }

  save_dataset(result.dataset);
  return result;
}

}  // namespace dunet
