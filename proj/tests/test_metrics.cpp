#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "dunet/metrics.hpp"

using namespace dunet;

namespace {

// Oracle AP: explicit precision/recall curve walk with the running-max
// precision envelope integrated over recall.
double ap_oracle(std::vector<std::pair<double, bool>> scored, int num_gt) {
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> prec, rec;
  int tp = 0, fp = 0;
  for (const auto& [s, hit] : scored) {
    (hit ? tp : fp)++;
    prec.push_back(static_cast<double>(tp) / (tp + fp));
    rec.push_back(num_gt > 0 ? static_cast<double>(tp) / num_gt : 0.0);
  }
  // Envelope.
  for (int i = static_cast<int>(prec.size()) - 2; i >= 0; --i)
    prec[static_cast<size_t>(i)] = std::max(prec[static_cast<size_t>(i)],
                                            prec[static_cast<size_t>(i) + 1]);
  double ap = 0, prev_r = 0;
  for (size_t i = 0; i < prec.size(); ++i) {
    ap += (rec[i] - prev_r) * prec[i];
    prev_r = rec[i];
  }
  return ap;
}

Box box_at(double x, double y, double s = 0.1) { return {x, y, x + s, y + s}; }

}  // namespace

TEST_CASE("FP at 0.9 then TP at 0.8 over one gt gives AP 0.5") {
  const std::vector<std::pair<double, bool>> scored = {{0.9, false}, {0.8, true}};
  CHECK(average_precision(scored, 1, ApInterp::all_points) == doctest::Approx(0.5));
  // 11-point: recall grid {0,...,1}; precision max over recall >= r is 0.5
  // everywhere, so AP is 0.5 there too.
  CHECK(average_precision(scored, 1, ApInterp::eleven_point) == doctest::Approx(0.5));
}

TEST_CASE("perfect detector has AP 1, empty detector AP 0") {
  CHECK(average_precision({{0.9, true}, {0.8, true}}, 2) == doctest::Approx(1.0));
  CHECK(average_precision({}, 3) == 0.0);
}

TEST_CASE("all-point and 11-point disagree on a sawtooth fixture") {
  // TP, FP, TP over 2 gts: all-point = 1*0.5 + 2/3*0.5 = 0.8333;
  // 11-point averages the envelope at recalls 0,0.1,...,1.0.
  const std::vector<std::pair<double, bool>> scored = {
      {0.9, true}, {0.8, false}, {0.7, true}};
  const double all = average_precision(scored, 2, ApInterp::all_points);
  const double eleven = average_precision(scored, 2, ApInterp::eleven_point);
  CHECK(all == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0));
  // Envelope precision: 1.0 for recall <= 0.5, 2/3 above. Grid points
  // 0..0.5 (6 of them) get 1.0, the rest (5) get 2/3.
  CHECK(eleven == doctest::Approx((6 * 1.0 + 5 * 2.0 / 3.0) / 11));
  CHECK(all != eleven);
}

TEST_CASE("average_precision equals the oracle on 1000 random instances") {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> n_det(0, 20);
  std::uniform_real_distribution<double> score(0, 1);
  std::bernoulli_distribution hit(0.4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::pair<double, bool>> scored;
    const int n = n_det(rng);
    int tps = 0;
    for (int i = 0; i < n; ++i) {
      const bool h = hit(rng);
      tps += h;
      scored.emplace_back(score(rng), h);
    }
    std::uniform_int_distribution<int> extra(0, 5);
    const int num_gt = tps + extra(rng);
    if (num_gt == 0) continue;
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    CHECK(average_precision(scored, num_gt) ==
          doctest::Approx(ap_oracle(scored, num_gt)).epsilon(1e-12));
  }
}

TEST_CASE("match_detections greedy claim: best IoU unclaimed gt wins") {
  const std::vector<Box> gts = {box_at(0.0, 0.0), box_at(0.5, 0.5)};
  std::vector<Detection> dets = {
      {box_at(0.01, 0.0), 1, 0.9, 0},   // overlaps gt 0
      {box_at(0.02, 0.0), 1, 0.8, 1},   // also gt 0 -> FP (claimed)
      {box_at(0.5, 0.5), 1, 0.7, 2},    // exact gt 1
  };
  const auto flags = match_detections(dets, gts, 0.5);
  REQUIRE(flags.size() == 3);
  CHECK(flags[0]);
  CHECK_FALSE(flags[1]);
  CHECK(flags[2]);
}

TEST_CASE("three-frame hand fixture: per-class AP, counts and accuracy") {
  // Class 1: 3 gts; detector finds 2 (one per frame 0/1), misses frame 2,
  // plus one low-score FP. Class 2: 1 gt, found exactly.
  std::vector<std::vector<Detection>> dets(3);
  std::vector<std::vector<std::pair<int, Box>>> gts(3);

  gts[0] = {{1, box_at(0.1, 0.1)}, {2, box_at(0.6, 0.6)}};
  gts[1] = {{1, box_at(0.2, 0.2)}};
  gts[2] = {{1, box_at(0.3, 0.3)}};

  dets[0] = {{box_at(0.1, 0.1), 1, 0.95, 0}, {box_at(0.6, 0.6), 2, 0.9, 1}};
  dets[1] = {{box_at(0.2, 0.2), 1, 0.85, 0}, {box_at(0.8, 0.8), 1, 0.6, 1}};  // FP
  dets[2] = {};

  EvalThresholds th;  // iou 0.5, count_score 0.5
  const EvalResult r = evaluate_detections(dets, gts, 2, th);

  // Class 1: TP .95, TP .85, FP .6 over 3 gts.
  CHECK(r.ap.at(1) == doctest::Approx(2.0 / 3.0));
  CHECK(r.ap.at(2) == doctest::Approx(1.0));
  CHECK(r.map == doctest::Approx((2.0 / 3.0 + 1.0) / 2));

  CHECK(r.counts.at(1).tp == 2);
  CHECK(r.counts.at(1).fp == 1);
  CHECK(r.counts.at(1).fn == 1);
  CHECK(r.counts.at(2).tp == 1);
  CHECK(r.tp == 3);
  CHECK(r.fp == 1);
  CHECK(r.fn == 1);
  CHECK(r.precision == doctest::Approx(3.0 / 4.0));
  CHECK(r.recall == doctest::Approx(3.0 / 4.0));
  CHECK(r.accuracy == doctest::Approx(3.0 / 5.0));
  CHECK(r.accuracy <= std::min(r.precision, r.recall));
}

TEST_CASE("classes with no ground truth are excluded from mAP") {
  std::vector<std::vector<Detection>> dets(1);
  std::vector<std::vector<std::pair<int, Box>>> gts(1);
  gts[0] = {{1, box_at(0.1, 0.1)}};
  dets[0] = {{box_at(0.1, 0.1), 1, 0.9, 0}, {box_at(0.5, 0.5), 3, 0.9, 1}};
  const EvalResult r = evaluate_detections(dets, gts, 3, EvalThresholds{});
  CHECK(r.ap.count(1) == 1);
  CHECK(r.ap.count(3) == 0);  // no gt -> no AP entry
  CHECK(r.map == doctest::Approx(1.0));
  CHECK(r.fp == 1);  // the class-3 detection still counts as FP
}

TEST_CASE("counting threshold ignores low-score detections") {
  std::vector<std::vector<Detection>> dets(1);
  std::vector<std::vector<std::pair<int, Box>>> gts(1);
  gts[0] = {{1, box_at(0.1, 0.1)}};
  dets[0] = {{box_at(0.1, 0.1), 1, 0.4, 0}};  // below count_score 0.5
  const EvalResult r = evaluate_detections(dets, gts, 1, EvalThresholds{});
  CHECK(r.tp == 0);
  CHECK(r.fn == 1);
  CHECK(r.ap.at(1) == doctest::Approx(1.0));  // AP sweep still sees it
}

TEST_CASE("eval csv has one row per class plus the overall footer") {
  std::vector<std::vector<Detection>> dets(1);
  std::vector<std::vector<std::pair<int, Box>>> gts(1);
  gts[0] = {{1, box_at(0.1, 0.1)}, {2, box_at(0.5, 0.5)}};
  dets[0] = {{box_at(0.1, 0.1), 1, 0.9, 0}};
  const EvalResult r = evaluate_detections(dets, gts, 2, EvalThresholds{});
  const std::string path = "/tmp/dunet_test_eval.csv";
  write_eval_csv(path, r, {"circle", "square"});
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  CHECK(line == "class,ap,tp,fp,fn");
  int rows = 0;
  bool saw_overall = false;
  while (std::getline(is, line)) {
    ++rows;
    saw_overall = saw_overall || line.rfind("overall,", 0) == 0;
  }
  CHECK(rows == 3);
  CHECK(saw_overall);
  std::filesystem::remove(path);
}
