#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "dunet/augment.hpp"

using namespace dunet;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
};

Image textured_image(int w, int h, uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_int_distribution<int> d(0, 255);
  Image img(w, h);
  for (auto& p : img.rgb) p = static_cast<uint8_t>(d(rng));
  return img;
}

// Frame source yielding a textured 20x20 square moving 1 px right per frame
// over a flat background, at the given fps.
FrameSource moving_square_source(int n_frames, double fps, Image* tex_out = nullptr) {
  auto tex = std::make_shared<Image>(textured_image(20, 20, 77));
  if (tex_out) *tex_out = *tex;
  auto i = std::make_shared<int>(0);
  const double period = 1000.0 / fps;
  return [tex, i, n_frames, period]() -> std::optional<SourceFrame> {
    if (*i >= n_frames) return std::nullopt;
    const int k = (*i)++;
    Image img(160, 60, 90);
    const int ox = 10 + k, oy = 20;
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 20; ++x)
        for (int c = 0; c < 3; ++c) img.px(ox + x, oy + y)[c] = tex->px(x, y)[c];
    return SourceFrame{k * period, std::move(img)};
  };
}

}  // namespace

TEST_CASE("filter kind names round-trip") {
  for (FilterKind k : {FilterKind::brightness, FilterKind::contrast, FilterKind::rotation,
                       FilterKind::flip, FilterKind::shadow, FilterKind::background,
                       FilterKind::color_shift})
    CHECK(filter_kind_from_name(filter_kind_name(k)) == k);
  CHECK_THROWS_AS(filter_kind_from_name("sepia"), std::invalid_argument);
}

TEST_CASE("double flip is a bit-exact identity") {
  const Image img = textured_image(37, 23, 1);
  const Box box{5, 4, 20, 18};
  FilterSpec flip{.kind = FilterKind::flip};
  std::mt19937_64 rng(2);
  const auto once = apply_filter(img, box, flip, rng);
  REQUIRE(once);
  const auto twice = apply_filter(once->first, once->second, flip, rng);
  REQUIRE(twice);
  CHECK(twice->first == img);
  CHECK(twice->second == box);
}

TEST_CASE("flip maps the box across the vertical axis") {
  const Image img = textured_image(100, 50, 3);
  FilterSpec flip{.kind = FilterKind::flip};
  std::mt19937_64 rng(4);
  const auto out = apply_filter(img, {10, 5, 30, 25}, flip, rng);
  REQUIRE(out);
  CHECK(out->second == Box{70, 5, 90, 25});
  // Pixels actually mirrored.
  CHECK(out->first.px(0, 0)[0] == img.px(99, 0)[0]);
  CHECK(out->first.px(42, 17)[2] == img.px(57, 17)[2]);
}

TEST_CASE("photometric filters keep the box bit-exact") {
  const Image img = textured_image(64, 64, 5);
  const Box box{7.5, 8.25, 40.0, 41.75};
  std::mt19937_64 rng(6);
  for (FilterKind k : {FilterKind::brightness, FilterKind::contrast, FilterKind::shadow,
                       FilterKind::color_shift, FilterKind::background}) {
    FilterSpec f{.kind = k};
    const auto out = apply_filter(img, box, f, rng);
    REQUIRE(out);
    CHECK(out->second == box);
    CHECK(out->first.width == img.width);
    CHECK(out->first.height == img.height);
  }
}

TEST_CASE("background filter preserves box pixels, replaces the rest") {
  const Image img = textured_image(32, 32, 7);
  FilterSpec f{.kind = FilterKind::background};
  f.background_color = {1, 2, 3};
  std::mt19937_64 rng(8);
  const Box box{8, 8, 16, 16};
  const auto out = apply_filter(img, box, f, rng);
  REQUIRE(out);
  for (int c = 0; c < 3; ++c) CHECK(out->first.px(10, 10)[c] == img.px(10, 10)[c]);
  CHECK(out->first.px(0, 0)[0] == 1);
  CHECK(out->first.px(31, 31)[2] == 3);
}

TEST_CASE("rotation hull contains the rotated object and stays in frame") {
  const Image img = textured_image(100, 100, 9);
  const Box box{30, 40, 60, 70};
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    FilterSpec f{.kind = FilterKind::rotation};
    const auto out = apply_filter(img, box, f, rng);
    REQUIRE(out);
    const Box& b = out->second;
    CHECK(b.xmin >= 0);
    CHECK(b.ymin >= 0);
    CHECK(b.xmax <= 100);
    CHECK(b.ymax <= 100);
    // The hull of a rotation by <= 15 degrees contains the center and is at
    // least as large as the original box.
    CHECK(b.w() >= box.w() - 1e-9);
    CHECK(b.h() >= box.h() - 1e-9);
    CHECK(b.xmin <= box.cx());
    CHECK(b.xmax >= box.cx());
  }
}

TEST_CASE("degenerate transformed box returns nullopt") {
  const Image img = textured_image(50, 50, 11);
  FilterSpec f{.kind = FilterKind::flip};
  std::mt19937_64 rng(12);
  // A box fully outside the frame clamps to zero area after the transform.
  const auto out = apply_filter(img, {-30, 10, -10, 20}, f, rng);
  CHECK_FALSE(apply_filter(img, {60, 10, 80, 20}, f, rng).has_value());
  (void)out;
}

TEST_CASE("capture schedule: 30 fps + 500 ms gap selects frames 0,16,32,...") {
  std::vector<FilterSpec> filters = {{.kind = FilterKind::brightness}};
  auto src = moving_square_source(50, 30.0);
  const auto captures = schedule_captures(std::move(src), filters, 500.0);
  // Gaps of >= 500 ms at 33.3 ms per frame land on indices 0, 16, 32, 48.
  REQUIRE(captures.size() == 4);
  const double period = 1000.0 / 30.0;
  CHECK(captures[0].frame.timestamp_ms == doctest::Approx(0.0));
  CHECK(captures[1].frame.timestamp_ms == doctest::Approx(16 * period));
  CHECK(captures[2].frame.timestamp_ms == doctest::Approx(32 * period));
  CHECK(captures[3].frame.timestamp_ms == doctest::Approx(48 * period));
}

TEST_CASE("equal-weight scheduler alternates round-robin") {
  std::vector<FilterSpec> filters(3);
  FilterScheduler sched(filters);
  std::vector<size_t> got;
  for (int i = 0; i < 6; ++i) got.push_back(sched.next());
  CHECK(got == std::vector<size_t>{0, 1, 2, 0, 1, 2});
}

TEST_CASE("weighted scheduler respects the 2:1 ratio smoothly") {
  std::vector<FilterSpec> filters(2);
  filters[0].weight = 2.0;
  filters[1].weight = 1.0;
  FilterScheduler sched(filters);
  std::map<size_t, int> counts;
  std::vector<size_t> first6;
  for (int i = 0; i < 300; ++i) {
    const size_t k = sched.next();
    ++counts[k];
    if (i < 6) first6.push_back(k);
  }
  CHECK(counts[0] == 200);
  CHECK(counts[1] == 100);
  // Smooth interleaving, not 2 in a row then 1: 0,1,0,0,1,0...
  CHECK(first6 == std::vector<size_t>{0, 1, 0, 0, 1, 0});
}

TEST_CASE("tracker autocorrelation: identical frame gives confidence 1, zero motion") {
  const Image img = textured_image(60, 60, 13);
  const TrackState s0 = track_init(img, {20, 20, 40, 40});
  const TrackState s1 = track_update(s0, img);
  CHECK(s1.confidence == doctest::Approx(1.0));
  CHECK(s1.box == Box{20, 20, 40, 40});
  CHECK_FALSE(s1.lost());
}

TEST_CASE("tracker recovers an exact (3,5) translation") {
  Image a(80, 80, 100);
  const Image tex = textured_image(24, 24, 14);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 24; ++x)
      for (int c = 0; c < 3; ++c) a.px(20 + x, 20 + y)[c] = tex.px(x, y)[c];
  Image b(80, 80, 100);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 24; ++x)
      for (int c = 0; c < 3; ++c) b.px(23 + x, 25 + y)[c] = tex.px(x, y)[c];

  const TrackState s0 = track_init(a, {20, 20, 44, 44});
  const TrackState s1 = track_update(s0, b);
  CHECK(s1.box.xmin == doctest::Approx(23));
  CHECK(s1.box.ymin == doctest::Approx(25));
  CHECK(s1.confidence > 0.99);
}

TEST_CASE("tracker reports lost on a noise fixture") {
  const Image img = textured_image(60, 60, 15);
  TrackState s = track_init(img, {20, 20, 40, 40});
  // Uncorrelated noise frames destroy the match.
  s = track_update(s, textured_image(60, 60, 16));
  s = track_update(s, textured_image(60, 60, 17));
  CHECK(s.lost());
}

TEST_CASE("track_init rejects degenerate boxes") {
  const Image img = textured_image(30, 30, 18);
  CHECK_THROWS_AS(track_init(img, {5, 5, 5.5, 20}), std::invalid_argument);
  CHECK_THROWS_AS(track_init(img, {40, 40, 50, 50}), std::invalid_argument);
}

TEST_CASE("build_dataset: translating square, >=10 captures with IoU >= 0.7") {
  TmpDir out("dunet_aug_build");
  // 30 fps, 100 ms gap -> capture every 3rd frame; 40 frames -> 14 captures.
  auto src = moving_square_source(40, 30.0);
  std::vector<FilterSpec> filters;
  for (FilterKind k : {FilterKind::brightness, FilterKind::contrast, FilterKind::shadow,
                       FilterKind::color_shift})
    filters.push_back({.kind = k});  // photometric only: boxes stay comparable

  const Box seed{10, 20, 30, 40};
  const auto r = build_dataset(std::move(src), seed, filters, out.path.string(), 3, 100.0);
  CHECK_FALSE(r.tracking_lost);
  REQUIRE(r.dataset.frames.size() >= 10);

  const double period = 1000.0 / 30.0;
  for (const FrameRecord& f : r.dataset.frames) {
    const int frame_idx = static_cast<int>(std::lround(f.timestamp_ms / period));
    const Box truth{10.0 + frame_idx, 20, 30.0 + frame_idx, 40};
    const Box got{f.boxes[0].box.xmin * f.width, f.boxes[0].box.ymin * f.height,
                  f.boxes[0].box.xmax * f.width, f.boxes[0].box.ymax * f.height};
    CHECK(iou(got, truth) >= 0.7);
  }

  // Filter usage is balanced by the scheduler.
  int total = 0;
  for (const auto& [k, n] : r.per_filter_counts) total += n;
  CHECK(total == static_cast<int>(r.dataset.frames.size()));
  for (const auto& [k, n] : r.per_filter_counts) CHECK(n >= total / 4 - 1);

  // Output is loadable dataset-io format.
  const AnnotatedDataset back = load_dataset(out.path.string());
  CHECK(back.frames.size() == r.dataset.frames.size());
  CHECK(back.label_map == std::vector<std::string>{"object"});
}

TEST_CASE("build_dataset is deterministic under the seed") {
  TmpDir o1("dunet_aug_d1"), o2("dunet_aug_d2");
  std::vector<FilterSpec> filters = {{.kind = FilterKind::brightness},
                                     {.kind = FilterKind::rotation}};
  const Box seed{10, 20, 30, 40};
  const auto a =
      build_dataset(moving_square_source(30, 30.0), seed, filters, o1.path.string(), 9, 100);
  const auto b =
      build_dataset(moving_square_source(30, 30.0), seed, filters, o2.path.string(), 9, 100);
  REQUIRE(a.dataset.frames.size() == b.dataset.frames.size());
  for (size_t i = 0; i < a.dataset.frames.size(); ++i) {
    CHECK(a.dataset.frames[i].boxes == b.dataset.frames[i].boxes);
    CHECK(read_ppm(o1.path / a.dataset.frames[i].image_path) ==
          read_ppm(o2.path / b.dataset.frames[i].image_path));
  }
}
