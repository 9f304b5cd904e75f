#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dunet/stream.hpp"

using namespace dunet;
namespace fs = std::filesystem;

namespace {

// 100-frame synthetic bag: a small box sliding across distinct images.
StreamSpec synthetic_spec(int n_frames = 100, double period = 1000.0 / 30.6) {
  StreamSpec spec;
  spec.frame_period_ms = period;
  spec.category = 1;
  spec.category_name = "target";
  for (int i = 0; i < n_frames; ++i) {
    StreamFrame f;
    f.timestamp_ms = i * period;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d.ppm", i);
    f.image_name = buf;
    const double x = 0.1 + 0.6 * i / n_frames;
    f.gt = {x, 0.4, x + 0.2, 0.6};
    f.image = Image(16, 16);
    // Make frames distinguishable so the oracle can identify them.
    f.image.px(i % 16, i / 16)[0] = 255;
    spec.frames.push_back(std::move(f));
  }
  return spec;
}

struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("latency 2x period drops every other frame; normalized time 2.0") {
  const StreamSpec spec = synthetic_spec(100);
  const double P = spec.frame_period_ms;
  const StreamReport r =
      replay(spec, oracle_detector(spec), ReplayClock::sim(2 * P));
  CHECK(r.frames_total == 100);
  CHECK(r.frames_processed == 50);
  CHECK(r.frames_dropped() == 50);
  CHECK(r.normalized_time == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(r.tp + r.fn == r.frames_processed);  // one gt per processed frame
  CHECK(r.tp == 50);
  CHECK(r.recall == doctest::Approx(1.0));
}

TEST_CASE("latency below the period processes every frame") {
  const StreamSpec spec = synthetic_spec(100);
  const StreamReport r =
      replay(spec, oracle_detector(spec), ReplayClock::sim(0.5 * spec.frame_period_ms));
  CHECK(r.frames_processed == 100);
  CHECK(r.frames_dropped() == 0);
  CHECK(r.normalized_time == doctest::Approx(0.5));
  CHECK(r.recall == doctest::Approx(1.0));
}

TEST_CASE("zero latency with the oracle scores perfect recall") {
  const StreamSpec spec = synthetic_spec(100);
  const StreamReport r = replay(spec, oracle_detector(spec), ReplayClock::sim(0));
  CHECK(r.frames_processed == 100);
  CHECK(r.recall == doctest::Approx(1.0));
  CHECK(r.fp == 0);
  CHECK(r.fn == 0);
}

TEST_CASE("processed count is monotone non-increasing in latency") {
  const StreamSpec spec = synthetic_spec(60);
  int prev = 1000;
  for (double lat : {0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0}) {
    const StreamReport r =
        replay(spec, oracle_detector(spec), ReplayClock::sim(lat * spec.frame_period_ms));
    CHECK(r.frames_processed <= prev);
    CHECK(r.frames_processed + r.frames_dropped() == r.frames_total);
    prev = r.frames_processed;
  }
}

TEST_CASE("fractional latency trace: 1.5x period") {
  // At latency 1.5P the detector frees mid-period (1.5P, 3.5P, ...) and
  // waits for the next arrival, so it processes frames 0, 2, 4, ...
  const StreamSpec spec = synthetic_spec(90);
  const StreamReport r =
      replay(spec, oracle_detector(spec), ReplayClock::sim(1.5 * spec.frame_period_ms));
  CHECK(r.frames_processed == 45);
}

TEST_CASE("empty stream is an error") {
  StreamSpec spec;
  CHECK_THROWS_AS(replay(spec, oracle_detector(spec), ReplayClock::sim(0)),
                  std::runtime_error);
}

TEST_CASE("detections below the score threshold are ignored") {
  const StreamSpec spec = synthetic_spec(10);
  DetectorFn weak = [&](const Image&) {
    return std::vector<Detection>{{spec.frames[0].gt, 1, 0.3, 0}};
  };
  ReplayParams params;  // score_threshold 0.5
  const StreamReport r = replay(spec, weak, ReplayClock::sim(0), params);
  CHECK(r.tp == 0);
  CHECK(r.fp == 0);  // filtered out entirely, not counted as FP
  CHECK(r.fn == 10);
}

TEST_CASE("wrong-position detections are false positives") {
  const StreamSpec spec = synthetic_spec(10);
  DetectorFn wrong = [](const Image&) {
    return std::vector<Detection>{{{0.0, 0.0, 0.05, 0.05}, 1, 0.9, 0}};
  };
  const StreamReport r = replay(spec, wrong, ReplayClock::sim(0));
  CHECK(r.tp == 0);
  CHECK(r.fp == 10);
  CHECK(r.fn == 10);
}

TEST_CASE("make_bag keeps only single-instance frames and restamps time") {
  TmpDir src("dunet_bag_src"), out("dunet_bag_out");
  AnnotatedDataset ds;
  ds.root = src.path.string();
  ds.label_map = {"a", "b"};
  fs::create_directories(src.path / "frames");
  for (int i = 0; i < 6; ++i) {
    FrameRecord f;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d.ppm", i);
    f.image_path = std::string("frames/") + buf;
    f.width = 8;
    f.height = 8;
    f.timestamp_ms = i * 10.0;
    f.boxes.push_back({1, {0.1, 0.1, 0.3, 0.3}});
    if (i == 2) f.boxes.push_back({1, {0.5, 0.5, 0.7, 0.7}});  // two instances
    if (i == 4) f.boxes[0].class_id = 2;                       // other category
    write_ppm(ds.image_file(f), Image(8, 8, static_cast<uint8_t>(i)));
    ds.frames.push_back(std::move(f));
  }

  const StreamSpec spec = make_bag(ds, 1, out.path.string(), 20.0);
  CHECK(spec.frames.size() == 4);  // frames 0,1,3,5
  for (size_t i = 0; i < spec.frames.size(); ++i)
    CHECK(spec.frames[i].timestamp_ms == doctest::Approx(i * 20.0));

  // Round-trip through disk is bit-exact.
  const StreamSpec back = read_bag(out.path.string());
  CHECK(back.category == 1);
  CHECK(back.frame_period_ms == doctest::Approx(20.0));
  REQUIRE(back.frames.size() == spec.frames.size());
  for (size_t i = 0; i < back.frames.size(); ++i) {
    CHECK(back.frames[i].image == spec.frames[i].image);
    CHECK(back.frames[i].gt == spec.frames[i].gt);
  }

  // No qualifying frame -> error.
  CHECK_THROWS_AS(make_bag(ds, 7, (out.path / "x").string()), std::runtime_error);
}

TEST_CASE("real-clock replay produces a sane report") {
  const StreamSpec spec = synthetic_spec(20, 5.0);  // 5 ms period, ~100 ms run
  const StreamReport r = replay(spec, oracle_detector(spec), ReplayClock::real());
  CHECK(r.frames_total == 20);
  CHECK(r.frames_processed >= 1);
  CHECK(r.frames_processed <= 20);
  CHECK(r.frames_processed + r.frames_dropped() == r.frames_total);
  CHECK(r.tp + r.fn == r.frames_processed);
  CHECK(r.wall_time_per_frame_ms >= 0.0);
}

TEST_CASE("compare_runs emits sorted CSV and well-formed SVGs") {
  const StreamSpec spec = synthetic_spec(50);
  std::vector<StreamReport> reports;
  for (double lat : {2.0, 0.5}) {
    StreamReport r =
        replay(spec, oracle_detector(spec), ReplayClock::sim(lat * spec.frame_period_ms));
    r.label = "oracle@" + std::to_string(lat);
    reports.push_back(r);
  }
  const std::string prefix = (fs::temp_directory_path() / "dunet_cmp").string();
  compare_runs(reports, prefix);

  std::ifstream csv(prefix + ".csv");
  REQUIRE(csv.good());
  std::string header, row1, row2;
  std::getline(csv, header);
  std::getline(csv, row1);
  std::getline(csv, row2);
  CHECK(header.find("normalized_time") != std::string::npos);
  // Sorted ascending by normalized time: the 0.5 run comes first.
  CHECK(row1.find("oracle@0.5") != std::string::npos);

  for (const char* suffix : {"_scatter.svg", "_bars.svg"}) {
    std::ifstream svg(prefix + suffix);
    REQUIRE(svg.good());
    std::string all((std::istreambuf_iterator<char>(svg)), {});
    CHECK(all.rfind("<svg", 0) != std::string::npos);
    CHECK(all.find("</svg>") != std::string::npos);
  }
  for (const char* suffix : {".csv", "_scatter.svg", "_bars.svg"})
    fs::remove(prefix + suffix);
}
