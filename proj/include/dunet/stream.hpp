#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dunet/dataset.hpp"
#include "dunet/geometry.hpp"
#include "dunet/image.hpp"

namespace dunet {

struct StreamFrame {
  std::string image_name;  // file name inside the bag directory
  double timestamp_ms = 0;
  Box gt;                  // exactly one instance of the bag's category
  Image image;
};

struct StreamSpec {
  double frame_period_ms = 1000.0 / 30.6;
  int category = 0;
  std::string category_name;
  std::vector<StreamFrame> frames;
};

struct StreamReport {
  std::string label;
  int frames_total = 0, frames_processed = 0;
  int tp = 0, fn = 0, fp = 0;
  double wall_time_per_frame_ms = 0;
  double normalized_time = 0;  // mean latency / frame period
  double recall = 0;           // tp / (tp + fn), over processed frames
  int frames_dropped() const { return frames_total - frames_processed; }
};

// A detector under test: frame in, detections (frame coordinates) out.
using DetectorFn = std::function<std::vector<Detection>(const Image&)>;

struct ReplayClock {
  bool simulated = true;
  double latency_ms = 0;  // per-frame latency in simulated mode
  static ReplayClock sim(double latency) { return {true, latency}; }
  static ReplayClock real() { return {false, 0}; }
};

struct ReplayParams {
  double iou_threshold = 0.5;
  double score_threshold = 0.5;
};

// Drop-stale discrete-event replay: frames arriving while the detector is
// busy are dropped and the most recent arrival is processed next. Real-clock
// mode runs source and detector on two threads with a latest-wins mailbox.
StreamReport replay(const StreamSpec& spec, const DetectorFn& detector,
                    const ReplayClock& clock, const ReplayParams& params = {});

// Ideal detector that returns the frame's ground truth with score 1.
DetectorFn oracle_detector(const StreamSpec& spec);

// Filters the dataset to frames holding exactly one instance of the category
// and writes a replayable bag (stream.json + PPM frames) under out_dir.
StreamSpec make_bag(const AnnotatedDataset& ds, int category, const std::string& out_dir,
                    double frame_period_ms = 1000.0 / 30.6);

void write_bag(const StreamSpec& spec, const std::string& dir);
StreamSpec read_bag(const std::string& dir);

// CSV rows sorted by normalized time, a quality-vs-time SVG scatter and a
// per-report bar chart (processed translucent, correct detections solid).
void compare_runs(const std::vector<StreamReport>& reports, const std::string& out_prefix);

}  // namespace dunet
