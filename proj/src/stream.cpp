#include "dunet/stream.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <thread>

namespace dunet {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Scores one processed frame and folds the outcome into the report.
void score_frame(const StreamFrame& frame, const std::vector<Detection>& dets,
                 int category, const ReplayParams& params, StreamReport& report) {
  std::vector<Detection> hits;
  for (const Detection& d : dets)
    if (d.class_id == category && d.score >= params.score_threshold) hits.push_back(d);
  std::sort(hits.begin(), hits.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.anchor_index < b.anchor_index;
  });
  if (!hits.empty() && iou(hits.front().box, frame.gt) >= params.iou_threshold) {
    ++report.tp;
    report.fp += static_cast<int>(hits.size()) - 1;
  } else {
    ++report.fn;
    report.fp += static_cast<int>(hits.size());
  }
}

StreamReport replay_simulated(const StreamSpec& spec, const DetectorFn& detector,
                              double latency_ms, const ReplayParams& params) {
  StreamReport report;
  report.frames_total = static_cast<int>(spec.frames.size());
  double total_latency = 0;
  // Processing always starts at an arrival instant, on the newest frame at
  // that moment: anything that arrived while the detector was busy has been
  // dropped, and a detector freeing mid-period waits for the next arrival.
  size_t idx = 0;  // next frame to process
  while (idx < spec.frames.size()) {
    const StreamFrame& f = spec.frames[idx];
    const auto dets = detector(f.image);
    score_frame(f, dets, spec.category, params, report);
    ++report.frames_processed;
    total_latency += latency_ms;
    const double free_at = f.timestamp_ms + latency_ms;
    // Tolerance absorbs ulp drift between i*P + k*P and (i+k)*P so frames
    // arriving exactly when the detector frees are processed.
    constexpr double kEps = 1e-6;
    size_t next = idx + 1;
    while (next < spec.frames.size() && spec.frames[next].timestamp_ms < free_at - kEps)
      ++next;
    idx = next;
  }
  report.wall_time_per_frame_ms =
      report.frames_processed ? total_latency / report.frames_processed : 0;
  report.normalized_time = report.wall_time_per_frame_ms / spec.frame_period_ms;
  report.recall = (report.tp + report.fn)
                      ? static_cast<double>(report.tp) / (report.tp + report.fn)
                      : 0.0;
  return report;
}

// Latest-wins single-slot mailbox shared by the frame source and detector
// threads in real-clock mode.
struct Mailbox {
  std::mutex mu;
  std::condition_variable cv;
  std::optional<size_t> slot;
  bool done = false;

  void push(size_t i) {
    {
      std::lock_guard lock(mu);
      slot = i;  // overwrites a stale frame
    }
    cv.notify_one();
  }
  void close() {
    {
      std::lock_guard lock(mu);
      done = true;
    }
    cv.notify_one();
  }
  std::optional<size_t> pop() {
    std::unique_lock lock(mu);
    cv.wait(lock, [&] { return slot.has_value() || done; });
    auto v = slot;
    slot.reset();
    return v;
  }
};

StreamReport replay_real(const StreamSpec& spec, const DetectorFn& detector,
                         const ReplayParams& params) {
  StreamReport report;
  report.frames_total = static_cast<int>(spec.frames.size());
  Mailbox box;

  std::thread source([&] {
    const auto start = std::chrono::steady_clock::now();
    for (size_t i = 0; i < spec.frames.size(); ++i) {
      std::this_thread::sleep_until(
          start + std::chrono::duration<double, std::milli>(spec.frames[i].timestamp_ms));
      box.push(i);
    }
    box.close();
  });

  double total_latency = 0;
  while (auto i = box.pop()) {
    const StreamFrame& f = spec.frames[*i];
    const auto t0 = std::chrono::steady_clock::now();
    const auto dets = detector(f.image);
    const auto t1 = std::chrono::steady_clock::now();
    total_latency += std::chrono::duration<double, std::milli>(t1 - t0).count();
    score_frame(f, dets, spec.category, params, report);
    ++report.frames_processed;
  }
  source.join();

  report.wall_time_per_frame_ms =
      report.frames_processed ? total_latency / report.frames_processed : 0;
  report.normalized_time = report.wall_time_per_frame_ms / spec.frame_period_ms;
  report.recall = (report.tp + report.fn)
                      ? static_cast<double>(report.tp) / (report.tp + report.fn)
                      : 0.0;
  return report;
}

}  // namespace

StreamReport replay(const StreamSpec& spec, const DetectorFn& detector,
                    const ReplayClock& clock, const ReplayParams& params) {
  if (spec.frames.empty()) throw std::runtime_error("replay: empty stream");
  return clock.simulated ? replay_simulated(spec, detector, clock.latency_ms, params)
                         : replay_real(spec, detector, params);
}

DetectorFn oracle_detector(const StreamSpec& spec) {
  // Looks the frame up by identity of its pixel buffer position; frames are
  // matched by pointer into the spec, so capture by reference.
  return [&spec](const Image& img) -> std::vector<Detection> {
    for (const StreamFrame& f : spec.frames)
      if (&f.image == &img || f.image == img)
        return {{f.gt, spec.category, 1.0, 0}};
    return {};
  };
}

StreamSpec make_bag(const AnnotatedDataset& ds, int category, const std::string& out_dir,
                    double frame_period_ms) {
  if (category < 1 || category > ds.num_classes())
    throw std::runtime_error("make_bag: category out of range");
  StreamSpec spec;
  spec.frame_period_ms = frame_period_ms;
  spec.category = category;
  spec.category_name = ds.label_map[static_cast<size_t>(category - 1)];

  int idx = 0;
  for (const FrameRecord& f : ds.frames) {
    int count = 0;
    const GtBox* only = nullptr;
    for (const GtBox& b : f.boxes)
      if (b.class_id == category) {
        ++count;
        only = &b;
      }
    if (count != 1) continue;
    StreamFrame sf;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d.ppm", idx);
    sf.image_name = buf;
    sf.timestamp_ms = idx * frame_period_ms;
    sf.gt = only->box;
    sf.image = read_image(ds.image_file(f));
    spec.frames.push_back(std::move(sf));
    ++idx;
  }
  if (spec.frames.empty())
    throw std::runtime_error("make_bag: no frames with exactly one instance of category " +
                             std::to_string(category));
  write_bag(spec, out_dir);
  return spec;
}

void write_bag(const StreamSpec& spec, const std::string& dir) {
  fs::create_directories(dir);
  json frames = json::array();
  for (const StreamFrame& f : spec.frames) {
    frames.push_back({{"image", f.image_name},
                      {"ts", f.timestamp_ms},
                      {"box", {{"x0", f.gt.xmin}, {"y0", f.gt.ymin}, {"x1", f.gt.xmax},
                               {"y1", f.gt.ymax}}}});
    write_ppm(dir + "/" + f.image_name, f.image);
  }
  json j{{"period_ms", spec.frame_period_ms},
         {"category", spec.category},
         {"category_name", spec.category_name},
         {"frames", frames}};
  std::ofstream os(dir + "/stream.json");
  os << j.dump(1) << "\n";
}

StreamSpec read_bag(const std::string& dir) {
  std::ifstream is(dir + "/stream.json");
  if (!is) throw std::runtime_error("read_bag: missing " + dir + "/stream.json");
  const json j = json::parse(is);
  StreamSpec spec;
  spec.frame_period_ms = j.at("period_ms");
  spec.category = j.at("category");
  spec.category_name = j.value("category_name", std::string());
  for (const auto& fj : j.at("frames")) {
    StreamFrame f;
    f.image_name = fj.at("image");
    f.timestamp_ms = fj.at("ts");
    const auto& b = fj.at("box");
    f.gt = {b.at("x0"), b.at("y0"), b.at("x1"), b.at("y1")};
    f.image = read_image(dir + "/" + f.image_name);
    spec.frames.push_back(std::move(f));
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Reports

void compare_runs(const std::vector<StreamReport>& reports, const std::string& out_prefix) {
  if (reports.empty()) throw std::runtime_error("compare_runs: no reports");
  auto sorted = reports;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const StreamReport& a, const StreamReport& b) {
                     return a.normalized_time < b.normalized_time;
                   });

  {
    std::ofstream os(out_prefix + ".csv");
    os << "label,frames_total,frames_processed,tp,fn,fp,wall_time_per_frame_ms,"
          "normalized_time,recall\n";
    for (const auto& r : sorted)
      os << r.label << "," << r.frames_total << "," << r.frames_processed << "," << r.tp
         << "," << r.fn << "," << r.fp << "," << r.wall_time_per_frame_ms << ","
         << r.normalized_time << "," << r.recall << "\n";
  }

  const int W = 640, H = 400, margin = 50;
  double max_t = 0, max_q = 1;
  for (const auto& r : sorted) {
    max_t = std::max(max_t, r.normalized_time);
    max_q = std::max({max_q, double(r.tp), double(r.fn), double(r.fp)});
  }
  if (max_t <= 0) max_t = 1;
  auto sx = [&](double t) { return margin + t / max_t * (W - 2 * margin); };
  auto sy = [&](double q) { return H - margin - q / max_q * (H - 2 * margin); };

  {
    std::ofstream os(out_prefix + "_scatter.svg");
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\">\n";
    os << "<line x1=\"" << margin << "\" y1=\"" << H - margin << "\" x2=\"" << W - margin
       << "\" y2=\"" << H - margin << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin
       << "\" y2=\"" << H - margin << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"" << H - 10
       << "\" font-size=\"12\">processing time (normalized to real-time)</text>\n";
    const char* colors[3] = {"#2a9d2a", "#d62728", "#ff9900"};
    const char* names[3] = {"TP", "FN", "FP"};
    for (const auto& r : sorted) {
      const double vals[3] = {double(r.tp), double(r.fn), double(r.fp)};
      for (int k = 0; k < 3; ++k)
        os << "<circle cx=\"" << sx(r.normalized_time) << "\" cy=\"" << sy(vals[k])
           << "\" r=\"4\" fill=\"" << colors[k] << "\"><title>" << r.label << " " << names[k]
           << "=" << vals[k] << "</title></circle>\n";
    }
    os << "</svg>\n";
  }

  {
    std::ofstream os(out_prefix + "_bars.svg");
    const int n = static_cast<int>(sorted.size());
    const double band = double(W - 2 * margin) / n;
    double max_frames = 1;
    for (const auto& r : sorted) max_frames = std::max(max_frames, double(r.frames_total));
    auto by = [&](double v) { return H - margin - v / max_frames * (H - 2 * margin); };
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\">\n";
    os << "<line x1=\"" << margin << "\" y1=\"" << H - margin << "\" x2=\"" << W - margin
       << "\" y2=\"" << H - margin << "\" stroke=\"black\"/>\n";
    for (int i = 0; i < n; ++i) {
      const auto& r = sorted[static_cast<size_t>(i)];
      const double x0 = margin + i * band + band * 0.15;
      const double bw = band * 0.7;
      os << "<rect x=\"" << x0 << "\" y=\"" << by(r.frames_processed) << "\" width=\"" << bw
         << "\" height=\"" << (H - margin - by(r.frames_processed))
         << "\" fill=\"#4477cc\" fill-opacity=\"0.35\"/>\n";
      os << "<rect x=\"" << x0 + bw * 0.25 << "\" y=\"" << by(r.tp) << "\" width=\""
         << bw * 0.5 << "\" height=\"" << (H - margin - by(r.tp))
         << "\" fill=\"#4477cc\"/>\n";
      os << "<text x=\"" << x0 << "\" y=\"" << H - margin + 14 << "\" font-size=\"10\">"
         << r.label << "</text>\n";
    }
    os << "</svg>\n";
  }
}

}  // namespace dunet
