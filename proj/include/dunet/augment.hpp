#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dunet/dataset.hpp"
#include "dunet/image.hpp"

namespace dunet {

// Boxes in this module are in continuous pixel coordinates of their frame.

enum class FilterKind {
  brightness,
  contrast,
  rotation,
  flip,
  shadow,
  background,
  color_shift,
};

const char* filter_kind_name(FilterKind k);
FilterKind filter_kind_from_name(const std::string& name);

struct FilterSpec {
  FilterKind kind = FilterKind::brightness;
  double weight = 1.0;
  // Kind-specific parameter ranges; unused fields are ignored.
  double gain_lo = 0.6, gain_hi = 1.4;          // brightness / contrast
  double rotation_max_deg = 15.0;               // rotation, sampled in +-range
  double shadow_lo = 0.4, shadow_hi = 0.8;      // shadow gain range
  std::array<uint8_t, 3> background_color = {128, 128, 128};
  double color_shift_max = 40.0;                // per-channel offset range
};

// Photometric filters keep the box bit-exact; geometric filters transform
// it. Returns nullopt when the transformed box degenerates (skip signal).
std::optional<std::pair<Image, Box>> apply_filter(const Image& frame, const Box& box,
                                                  const FilterSpec& filter,
                                                  std::mt19937_64& rng);

struct SourceFrame {
  double timestamp_ms = 0;
  Image image;
};

// Pull-based frame source; returns nullopt at end of stream.
using FrameSource = std::function<std::optional<SourceFrame>()>;

// Frame source over a directory of numbered .ppm/.png frames, timestamps
// synthesized at the given rate.
FrameSource directory_source(const std::string& dir, double fps = 30.0);

struct Capture {
  SourceFrame frame;
  size_t filter_index;
};

// Emits the first source frame at least min_gap_ms after the previous
// capture; filters are assigned by smooth weighted round-robin, so each
// frame is consumed by at most one filter.
std::vector<Capture> schedule_captures(FrameSource source,
                                       const std::vector<FilterSpec>& filters,
                                       double min_gap_ms = 500.0);

// Deterministic smooth weighted round-robin over filter weights.
class FilterScheduler {
 public:
  explicit FilterScheduler(const std::vector<FilterSpec>& filters);
  size_t next();

 private:
  std::vector<double> weights_, current_;
  double total_ = 0;
};

// Normalized-cross-correlation template tracker state.
struct TrackState {
  std::vector<double> templ;  // grayscale template, row-major
  int templ_w = 0, templ_h = 0;
  Box box;  // pixel coordinates
  double confidence = 1.0;

  bool lost() const { return confidence < 0.3; }
};

TrackState track_init(const Image& frame, const Box& box);

// Searches a window of +-25% of the box size around the current position,
// moves the box to the NCC peak and refreshes the template (0.9 old/0.1 new).
TrackState track_update(const TrackState& state, const Image& next_frame);

struct BuildDatasetResult {
  AnnotatedDataset dataset;
  std::map<FilterKind, int> per_filter_counts;
  bool tracking_lost = false;
};

// Tracker + capture scheduler + filters: consumes the source, propagates the
// seed box, writes filtered samples in dataset-io format under out_dir.
BuildDatasetResult build_dataset(FrameSource source, const Box& initial_box,
                                 const std::vector<FilterSpec>& filters,
                                 const std::string& out_dir, uint64_t seed,
                                 double min_gap_ms = 500.0,
                                 const std::string& class_name = "object");

}  // namespace dunet
