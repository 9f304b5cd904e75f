#include "dunet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>

namespace dunet {

namespace fs = std::filesystem;
using json = nlohmann::json;

AnnotatedDataset load_dataset(const std::string& root) {
  AnnotatedDataset ds;
  ds.root = root;

  {
    std::ifstream is(root + "/labels.json");
    if (!is) throw std::runtime_error("load_dataset: missing " + root + "/labels.json");
    json j = json::parse(is);
    ds.label_map = j.get<std::vector<std::string>>();
  }
  if (ds.label_map.empty())
    throw std::runtime_error("load_dataset: empty label map in " + root);

  std::ifstream is(root + "/annotations.jsonl");
  if (!is) throw std::runtime_error("load_dataset: missing " + root + "/annotations.jsonl");

  std::vector<std::string> errors;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fail = [&](const std::string& msg) {
      errors.push_back("line " + std::to_string(lineno) + ": " + msg);
    };
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(std::string("bad JSON: ") + e.what());
      continue;
    }
    FrameRecord f;
    try {
      f.image_path = j.at("image");
      f.timestamp_ms = j.at("ts");
      f.width = j.at("w");
      f.height = j.at("h");
      f.sequence = j.value("seq", 0);
      f.small_tier = j.value("tier", std::string()) == "small";
      for (const auto& b : j.at("boxes")) {
        GtBox gb;
        gb.class_id = b.at("c");
        gb.box = {b.at("x0"), b.at("y0"), b.at("x1"), b.at("y1")};
        f.boxes.push_back(gb);
      }
    } catch (const json::exception& e) {
      fail(std::string("missing field: ") + e.what());
      continue;
    }
    bool ok = true;
    for (const auto& gb : f.boxes) {
      if (gb.class_id < 1 || gb.class_id > ds.num_classes()) {
        fail("unknown class id " + std::to_string(gb.class_id));
        ok = false;
      }
      const Box& b = gb.box;
      if (b.xmax < b.xmin || b.ymax < b.ymin) {
        fail("inverted box");
        ok = false;
      } else if (b.xmin < 0 || b.ymin < 0 || b.xmax > 1 || b.ymax > 1) {
        fail("box outside [0,1]");
        ok = false;
      }
    }
    if (!fs::exists(root + "/" + f.image_path)) {
      fail("missing image file " + f.image_path);
      ok = false;
    }
    if (ok) ds.frames.push_back(std::move(f));
  }
  if (!errors.empty()) {
    std::ostringstream os;
    os << "load_dataset: " << errors.size() << " invalid record(s) in " << root << ":";
    for (const auto& e : errors) os << "\n  " << e;
    throw std::runtime_error(os.str());
  }

  if (fs::exists(root + "/splits.json")) {
    std::ifstream ss(root + "/splits.json");
    json j = json::parse(ss);
    ds.splits[0] = j.value("train", std::vector<int>{});
    ds.splits[1] = j.value("val", std::vector<int>{});
    ds.splits[2] = j.value("test", std::vector<int>{});
  }
  return ds;
}

void save_dataset(const AnnotatedDataset& ds) {
  fs::create_directories(ds.root);
  {
    std::ofstream os(ds.root + "/labels.json");
    os << json(ds.label_map).dump() << "\n";
  }
  {
    std::ofstream os(ds.root + "/annotations.jsonl");
    for (const auto& f : ds.frames) {
      json boxes = json::array();
      for (const auto& gb : f.boxes)
        boxes.push_back({{"c", gb.class_id},
                         {"x0", gb.box.xmin},
                         {"y0", gb.box.ymin},
                         {"x1", gb.box.xmax},
                         {"y1", gb.box.ymax}});
      json j{{"image", f.image_path}, {"ts", f.timestamp_ms}, {"w", f.width},
             {"h", f.height},         {"seq", f.sequence},    {"boxes", boxes}};
      if (f.small_tier) j["tier"] = "small";
      os << j.dump() << "\n";
    }
  }
  {
    std::ofstream os(ds.root + "/splits.json");
    os << json{{"train", ds.splits[0]}, {"val", ds.splits[1]}, {"test", ds.splits[2]}}.dump()
       << "\n";
  }
}

std::array<std::vector<int>, 3> split_dataset(const std::vector<FrameRecord>& frames,
                                              std::array<double, 3> ratios, uint64_t seed) {
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("split_dataset: ratios must sum to 1");

  // Group frame indices by sequence, keeping first-appearance order.
  std::vector<int> seq_ids;
  std::vector<std::vector<int>> groups;
  for (size_t i = 0; i < frames.size(); ++i) {
    auto it = std::find(seq_ids.begin(), seq_ids.end(), frames[i].sequence);
    if (it == seq_ids.end()) {
      seq_ids.push_back(frames[i].sequence);
      groups.emplace_back();
      it = seq_ids.end() - 1;
    }
    groups[static_cast<size_t>(it - seq_ids.begin())].push_back(static_cast<int>(i));
  }

  int wanted_splits = 0;
  for (double r : ratios)
    if (r > 0) ++wanted_splits;
  if (static_cast<int>(groups.size()) < wanted_splits)
    throw std::invalid_argument("split_dataset: fewer sequences than requested splits");

  std::vector<size_t> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const double total = static_cast<double>(frames.size());
  std::array<std::vector<int>, 3> splits;
  size_t gi = 0;
  for (int s = 0; s < 3; ++s) {
    const double target = ratios[s] * total;
    // Last nonzero split takes the remainder.
    bool last_nonzero = true;
    for (int t = s + 1; t < 3; ++t)
      if (ratios[t] > 0) last_nonzero = false;
    while (gi < order.size() &&
           (last_nonzero ||
            static_cast<double>(splits[s].size()) + groups[order[gi]].size() / 2.0 <= target)) {
      if (!last_nonzero && static_cast<double>(splits[s].size()) >= target) break;
      auto& grp = groups[order[gi++]];
      splits[s].insert(splits[s].end(), grp.begin(), grp.end());
    }
    if (ratios[s] == 0) continue;
  }
  // Any leftover sequences (rounding) go to the last nonzero split.
  int last = 2;
  while (last > 0 && ratios[last] == 0) --last;
  while (gi < order.size()) {
    auto& grp = groups[order[gi++]];
    splits[last].insert(splits[last].end(), grp.begin(), grp.end());
  }
  for (auto& s : splits) std::sort(s.begin(), s.end());
  return splits;
}

// ---------------------------------------------------------------------------
// Synthetic shapes generator.

std::array<std::array<uint8_t, 3>, 3> shapes_class_colors() {
  // All classes share one saturated color so class identity must be read from
  // geometry (circle vs square vs triangle), not from a trivial color cue.
  // The distractor palette keeps at least two channels equal at >= 60, so it
  // can never collide with this color.
  return {{{230, 40, 40}, {230, 40, 40}, {230, 40, 40}}};
}

namespace {

struct Extent {
  int x0 = 1 << 30, y0 = 1 << 30, x1 = -1, y1 = -1;
  void add(int x, int y) {
    x0 = std::min(x0, x);
    y0 = std::min(y0, y);
    x1 = std::max(x1, x);
    y1 = std::max(y1, y);
  }
  bool empty() const { return x1 < 0; }
};

// Draws a filled shape of class `cls` (1=circle, 2=square, 3=triangle) whose
// raster footprint fits a size x size square at (ox, oy). Returns the exact
// pixel extent of the drawn pixels.
Extent draw_shape(Image& img, int cls, int ox, int oy, int size,
                  const std::array<uint8_t, 3>& color) {
  Extent e;
  auto put = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    uint8_t* p = img.px(x, y);
    p[0] = color[0];
    p[1] = color[1];
    p[2] = color[2];
    e.add(x, y);
  };
  if (cls == 1) {  // circle
    const double r = size / 2.0, cx = ox + r - 0.5, cy = oy + r - 0.5;
    for (int y = oy; y < oy + size; ++y)
      for (int x = ox; x < ox + size; ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) put(x, y);
  } else if (cls == 2) {  // square
    for (int y = oy; y < oy + size; ++y)
      for (int x = ox; x < ox + size; ++x) put(x, y);
  } else {  // triangle, apex up
    const double apex_x = ox + (size - 1) / 2.0;
    for (int y = oy; y < oy + size; ++y) {
      const double t = size == 1 ? 1.0 : static_cast<double>(y - oy) / (size - 1);
      const double half = t * (size - 1) / 2.0;
      for (int x = ox; x < ox + size; ++x)
        if (std::abs(x - apex_x) <= half + 1e-9) put(x, y);
    }
  }
  return e;
}

}  // namespace

AnnotatedDataset gen_shapes_dataset(const ShapesConfig& cfg, const std::string& out_dir) {
  if (cfg.image_size < 32)
    throw std::invalid_argument("gen_shapes_dataset: image_size must be >= 32");
  if (cfg.n_frames < 1) throw std::invalid_argument("gen_shapes_dataset: n_frames must be >= 1");

  fs::create_directories(out_dir + "/frames");
  AnnotatedDataset ds;
  ds.root = out_dir;
  ds.label_map = {"circle", "square", "triangle"};

  std::mt19937_64 rng(cfg.seed);
  const int S = cfg.image_size;
  const auto colors = shapes_class_colors();
  const double frame_period = 1000.0 / 30.6;

  for (int i = 0; i < cfg.n_frames; ++i) {
    const int seq = i / cfg.frames_per_sequence;
    const bool small = cfg.small_tier_every > 0 && seq % cfg.small_tier_every == cfg.small_tier_every - 1;

    Image img(S, S);
    // Gray noise background with slight channel jitter.
    std::uniform_int_distribution<int> bg(80, 170), jit(-10, 10);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const int v = bg(rng);
        uint8_t* p = img.px(x, y);
        for (int c = 0; c < 3; ++c)
          p[c] = static_cast<uint8_t>(std::clamp(v + jit(rng), 0, 255));
      }
    // Desaturated colored distractor blobs; channel spread capped so they can
    // never collide with the saturated class colors.
    std::uniform_int_distribution<int> nblobs(3, 8), blob_size(2, S / 6), coord(0, S - 1);
    std::uniform_int_distribution<int> base(60, 190), spread(10, 60);
    const int nb = nblobs(rng);
    for (int b = 0; b < nb; ++b) {
      const int bs = blob_size(rng), bx = coord(rng), by = coord(rng);
      std::array<uint8_t, 3> c;
      const int lo = base(rng);
      for (int k = 0; k < 3; ++k)
        c[static_cast<size_t>(k)] =
            static_cast<uint8_t>(std::clamp(lo + (k == b % 3 ? spread(rng) : 0), 0, 230));
      const bool round = (b % 2) == 0;
      draw_shape(img, round ? 1 : 2, bx, by, bs, c);
    }

    FrameRecord f;
    f.image_path = "frames/" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%06d.ppm", i);
      return std::string(buf);
    }();
    f.timestamp_ms = i * frame_period;
    f.width = S;
    f.height = S;
    f.sequence = seq;
    f.small_tier = small;

    std::vector<Box> placed;
    // Places one object: true class geometry when `glyph` is false, the
    // class-ambiguous small glyph (a filled square raster) when true.
    auto place_one = [&](int cls, double lo, double hi, bool glyph) {
      std::uniform_real_distribution<double> size_dist(lo, hi);
      for (int attempt = 0; attempt < 40; ++attempt) {
        const int sz = std::max(3, static_cast<int>(std::lround(size_dist(rng) * S)));
        if (sz >= S - 2) continue;
        std::uniform_int_distribution<int> pos(1, S - sz - 1);
        const int ox = pos(rng), oy = pos(rng);
        const Box cand{(ox - 1.0) / S, (oy - 1.0) / S, (ox + sz + 1.0) / S,
                       (oy + sz + 1.0) / S};
        bool clash = false;
        for (const Box& p : placed)
          if (iou(cand, p) > 0) clash = true;
        if (clash) continue;
        const Extent e = draw_shape(img, glyph ? 2 : cls, ox, oy, sz,
                                    colors[static_cast<size_t>(cls - 1)]);
        if (e.empty()) continue;
        GtBox gb;
        gb.class_id = cls;
        gb.box = {static_cast<double>(e.x0) / S, static_cast<double>(e.y0) / S,
                  (e.x1 + 1.0) / S, (e.y1 + 1.0) / S};
        f.boxes.push_back(gb);
        placed.push_back(cand);
        return;
      }
    };

    if (small) {
      // Small-tier frame: a sequence "theme" class shown by one large
      // exemplar, plus 1-2 small objects of that class. The small objects are
      // rendered as a shared glyph — at these sizes the raster cannot carry
      // class geometry — so their class is only readable from the in-frame
      // exemplar, the way context disambiguates small objects in real scenes.
      std::uniform_int_distribution<int> theme_dist(1, 3), nsmall(2, 3);
      const int theme = theme_dist(rng);
      place_one(theme, cfg.min_size, cfg.max_size, false);
      const int n = nsmall(rng);
      for (int k = 0; k < n; ++k) place_one(theme, cfg.small_min, cfg.small_max, true);
    } else {
      // Normal frame: 1..3 shapes, at most one per class, non-overlapping.
      std::uniform_int_distribution<int> nshapes(1, 3);
      std::vector<int> classes{1, 2, 3};
      std::shuffle(classes.begin(), classes.end(), rng);
      classes.resize(static_cast<size_t>(nshapes(rng)));
      std::sort(classes.begin(), classes.end());  // stable order in annotations
      for (int cls : classes) place_one(cls, cfg.min_size, cfg.max_size, false);
    }
    if (f.boxes.empty()) {
      // Extremely unlikely placement failure; guarantee one object.
      const int sz = std::max(3, S / 5);
      const Extent e = draw_shape(img, 2, S / 4, S / 4, sz, colors[1]);
      f.boxes.push_back({2,
                         {static_cast<double>(e.x0) / S, static_cast<double>(e.y0) / S,
                          (e.x1 + 1.0) / S, (e.y1 + 1.0) / S}});
      placed.push_back({(S / 4 - 1.0) / S, (S / 4 - 1.0) / S,
                        (S / 4 + sz + 1.0) / S, (S / 4 + sz + 1.0) / S});
    }

    // Confuser marks drawn in the shapes' exact color: rings, crosses and
    // diagonal stripes. A detector that keys on color alone fires on these;
    // telling them from the real filled shapes requires reading geometry.
    // They never intersect an annotated box (the pixel-scan oracle relies on
    // that), though they may overlap each other.
    {
      const auto& col = colors[0];
      std::uniform_int_distribution<int> nconf(2, 5), conf_size(4, std::max(5, S / 6));
      const int want = nconf(rng);
      int placed_conf = 0;
      for (int attempt = 0; attempt < 120 && placed_conf < want; ++attempt) {
        const int cs = conf_size(rng);
        if (cs >= S - 2) continue;
        std::uniform_int_distribution<int> pos(1, S - cs - 1);
        const int ox = pos(rng), oy = pos(rng);
        const Box cand{(ox - 1.0) / S, (oy - 1.0) / S, (ox + cs + 1.0) / S,
                       (oy + cs + 1.0) / S};
        bool clash = false;
        for (const Box& p : placed)
          if (iou(cand, p) > 0) clash = true;
        if (clash) continue;
        const int kind = placed_conf % 3;
        auto put = [&](int x, int y) {
          if (x < 0 || y < 0 || x >= S || y >= S) return;
          uint8_t* p = img.px(x, y);
          p[0] = col[0];
          p[1] = col[1];
          p[2] = col[2];
        };
        if (kind == 0) {  // ring: circle outline, 1 px thick
          const double r = cs / 2.0, cx = ox + r - 0.5, cy = oy + r - 0.5;
          for (int y = oy; y < oy + cs; ++y)
            for (int x = ox; x < ox + cs; ++x) {
              const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
              if (d2 <= r * r && d2 > (r - 1.2) * (r - 1.2)) put(x, y);
            }
        } else if (kind == 1) {  // cross / plus sign
          const int mid = cs / 2;
          for (int t = 0; t < cs; ++t) {
            put(ox + t, oy + mid);
            put(ox + mid, oy + t);
          }
        } else {  // diagonal stripe
          for (int t = 0; t < cs; ++t) {
            put(ox + t, oy + t);
            if (t + 1 < cs) put(ox + t + 1, oy + t);
          }
        }
        ++placed_conf;
      }
    }

    write_ppm(ds.image_file(f), img);
    ds.frames.push_back(std::move(f));
  }

  save_dataset(ds);
  return ds;
}

}  // namespace dunet
