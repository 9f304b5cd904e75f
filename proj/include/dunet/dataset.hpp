#pragma once

#include <array>
#include <string>
#include <vector>

#include "dunet/geometry.hpp"
#include "dunet/image.hpp"

namespace dunet {

struct GtBox {
  int class_id = 0;  // 1..K, 0 reserved for background
  Box box;           // normalized coordinates
  bool operator==(const GtBox&) const = default;
};

struct FrameRecord {
  std::string image_path;  // relative to the dataset root
  double timestamp_ms = 0;
  int width = 0, height = 0;
  std::vector<GtBox> boxes;
  int sequence = 0;        // capture-sequence id; the split unit
  bool small_tier = false; // all objects <= 10% of image width
  bool operator==(const FrameRecord&) const = default;
};

struct AnnotatedDataset {
  std::string root;
  std::vector<std::string> label_map;  // class_id - 1 indexes this
  std::vector<FrameRecord> frames;
  // Frame indices per split: train, val, test. Empty until split.
  std::array<std::vector<int>, 3> splits;

  int num_classes() const { return static_cast<int>(label_map.size()); }
  std::string image_file(const FrameRecord& f) const { return root + "/" + f.image_path; }
};

// Loads labels.json + annotations.jsonl (+ splits.json when present) and
// validates every record; throws std::runtime_error listing all offenders
// with their line numbers.
AnnotatedDataset load_dataset(const std::string& root);

// Writes labels.json, annotations.jsonl and splits.json under ds.root.
// Images are expected to exist already.
void save_dataset(const AnnotatedDataset& ds);

// Assigns whole capture sequences to train/val/test so near-duplicate
// frames never straddle a split. Sequence order is shuffled by seed.
std::array<std::vector<int>, 3> split_dataset(const std::vector<FrameRecord>& frames,
                                              std::array<double, 3> ratios,
                                              uint64_t seed);

struct ShapesConfig {
  int n_frames = 1000;
  int image_size = 64;
  double min_size = 0.15, max_size = 0.45;        // normal-tier shape width range
  double small_min = 0.08, small_max = 0.10;      // small-tier range
  int frames_per_sequence = 10;
  int small_tier_every = 3;  // every n-th sequence is all-small
  uint64_t seed = 1;
};

// Synthetic desk-scale dataset: noise background, colored distractor blobs,
// and flat-colored shapes (circle/square/triangle) with raster-exact boxes.
// Normal frames carry 1..3 shapes, at most one per class. Small-tier frames
// carry one large exemplar plus 1-2 small objects of the same class drawn as
// a class-ambiguous glyph, so small-object class is only readable from the
// in-frame context. Writes PPM frames under out_dir/frames and annotations.
AnnotatedDataset gen_shapes_dataset(const ShapesConfig& cfg, const std::string& out_dir);

// Flat colors used by the generator; index = class_id - 1.
std::array<std::array<uint8_t, 3>, 3> shapes_class_colors();

}  // namespace dunet
