#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "dunet/augment.hpp"
#include "dunet/checkpoint.hpp"
#include "dunet/dataset.hpp"
#include "dunet/detector.hpp"
#include "dunet/metrics.hpp"
#include "dunet/model.hpp"
#include "dunet/stream.hpp"
#include "dunet/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dunet;

// Exit codes: 0 ok, 2 usage/config, 3 numeric failure, 4 incompatibility.
namespace exit_code {
constexpr int ok = 0, usage = 2, numeric = 3, incompatible = 4;
}

static json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return json::parse(is);
}

static TrainConfig parse_train_config(const json& j) {
  TrainConfig cfg;
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.momentum = j.value("momentum", cfg.momentum);
  cfg.neg_pos_ratio = j.value("neg_pos_ratio", cfg.neg_pos_ratio);
  cfg.loc_weight = j.value("loc_weight", cfg.loc_weight);
  cfg.pos_iou_threshold = j.value("pos_iou_threshold", cfg.pos_iou_threshold);
  cfg.max_steps = j.value("max_steps", cfg.max_steps);
  cfg.checkpoint_interval = j.value("checkpoint_interval", cfg.checkpoint_interval);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("lr_schedule")) {
    cfg.lr_schedule.clear();
    for (const auto& e : j.at("lr_schedule"))
      cfg.lr_schedule.emplace_back(e.at(0).get<int>(), e.at(1).get<double>());
  }
  return cfg;
}

static std::vector<FilterSpec> parse_filters(const json& arr) {
  std::vector<FilterSpec> filters;
  for (const auto& fj : arr) {
    FilterSpec f;
    f.kind = filter_kind_from_name(fj.at("kind"));
    f.weight = fj.value("weight", 1.0);
    if (fj.contains("params")) {
      const auto& p = fj.at("params");
      f.gain_lo = p.value("gain_lo", f.gain_lo);
      f.gain_hi = p.value("gain_hi", f.gain_hi);
      f.rotation_max_deg = p.value("rotation_max_deg", f.rotation_max_deg);
      f.shadow_lo = p.value("shadow_lo", f.shadow_lo);
      f.shadow_hi = p.value("shadow_hi", f.shadow_hi);
      f.color_shift_max = p.value("color_shift_max", f.color_shift_max);
      if (p.contains("background_color")) {
        auto c = p.at("background_color").get<std::array<int, 3>>();
        f.background_color = {static_cast<uint8_t>(c[0]), static_cast<uint8_t>(c[1]),
                              static_cast<uint8_t>(c[2])};
      }
    }
    filters.push_back(f);
  }
  return filters;
}

static int cmd_train(const std::string& config_path, int64_t seed_override) {
  json cfg_json;
  try {
    cfg_json = load_json_file(config_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code::usage;
  }
  try {
    DUNetConfig mcfg = DUNetConfig::from_json(cfg_json.at("model").dump());
    TrainConfig tcfg = parse_train_config(cfg_json.value("train", json::object()));
    if (seed_override >= 0) tcfg.seed = static_cast<uint64_t>(seed_override);
    const std::string ds_root = cfg_json.at("dataset").at("root");
    const std::string out_dir = cfg_json.value("out_dir", "runs/out");

    AnnotatedDataset ds = load_dataset(ds_root);
    if (ds.num_classes() != mcfg.num_classes) {
      std::cerr << "error: dataset has " << ds.num_classes() << " classes, model expects "
                << mcfg.num_classes << "\n";
      return exit_code::incompatible;
    }
    std::vector<int> train_idx = ds.splits[0];
    if (train_idx.empty()) {
      train_idx.resize(ds.frames.size());
      std::iota(train_idx.begin(), train_idx.end(), 0);
    }

    std::mt19937 rng(static_cast<uint32_t>(tcfg.seed));
    DUNetModel model = build_dunet(mcfg, tcfg.batch_size, rng);
    const TrainResult r = train(model, ds, train_idx, tcfg, out_dir);
    std::cout << "trained " << r.steps << " steps, loss " << r.initial_loss << " -> "
              << r.final_loss << "\n";
    std::cout << "checkpoint: " << out_dir << "/model.ckpt\n";
    return exit_code::ok;
  } catch (const NanLossError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code::numeric;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return exit_code::usage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return exit_code::usage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code::usage;
  }
}

static int cmd_eval(const std::string& ckpt, const std::string& ds_root, double iou_thresh,
                    const std::string& ap_interp, double score_thresh,
                    const std::string& split, const std::string& out_csv) {
  Detector det = [&]() -> Detector {
    try {
      return Detector::load(ckpt);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      std::exit(exit_code::incompatible);
    }
  }();
  AnnotatedDataset ds;
  try {
    ds = load_dataset(ds_root);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code::usage;
  }
  if (ds.num_classes() != det.config().num_classes) {
    std::cerr << "error: dataset has " << ds.num_classes() << " classes, checkpoint expects "
              << det.config().num_classes << "\n";
    return exit_code::incompatible;
  }

  std::vector<int> idx;
  if (split == "all" || (ds.splits[0].empty() && ds.splits[2].empty())) {
    idx.resize(ds.frames.size());
    std::iota(idx.begin(), idx.end(), 0);
  } else {
    const int s = split == "train" ? 0 : (split == "val" ? 1 : 2);
    idx = ds.splits[static_cast<size_t>(s)];
  }
  if (idx.empty()) {
    std::cerr << "error: split '" << split << "' is empty\n";
    return exit_code::usage;
  }

  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<std::pair<int, Box>>> gts;
  for (int i : idx) {
    const FrameRecord& f = ds.frames[static_cast<size_t>(i)];
    dets.push_back(det.detect(read_image(ds.image_file(f))));
    std::vector<std::pair<int, Box>> g;
    for (const GtBox& b : f.boxes) g.emplace_back(b.class_id, b.box);
    gts.push_back(std::move(g));
  }

  EvalThresholds th;
  th.iou = iou_thresh;
  th.count_score = score_thresh;
  th.interp = ap_interp == "11point" ? ApInterp::eleven_point : ApInterp::all_points;
  const EvalResult r = evaluate_detections(dets, gts, ds.num_classes(), th);
  write_eval_csv(out_csv, r, ds.label_map);
  for (const auto& [cls, ap] : r.ap)
    std::cout << ds.label_map[static_cast<size_t>(cls - 1)] << " AP=" << ap << "\n";
  std::cout << "mAP@" << iou_thresh << " = " << r.map << "\n";
  std::cout << "precision=" << r.precision << " recall=" << r.recall
            << " accuracy=" << r.accuracy << "\n";
  std::cout << "wrote " << out_csv << "\n";
  return exit_code::ok;
}

static int cmd_streambench(const std::string& bag_dir, const std::string& ckpt, bool oracle,
                           double latency_ms, double score_thresh,
                           const std::string& out_prefix) {
  StreamSpec spec;
  try {
    spec = read_bag(bag_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code::usage;
  }

  DetectorFn fn;
  std::unique_ptr<Detector> det;
  std::string label;
  if (oracle) {
    fn = oracle_detector(spec);
    label = "oracle";
  } else {
    try {
      det = std::make_unique<Detector>(Detector::load(ckpt));
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return exit_code::incompatible;
    }
    fn = [&](const Image& img) { return det->detect(img); };
    label = fs::path(ckpt).parent_path().filename().string();
    if (label.empty()) label = "model";
  }

  ReplayParams params;
  params.score_threshold = score_thresh;
  const ReplayClock clock =
      latency_ms >= 0 ? ReplayClock::sim(latency_ms) : ReplayClock::real();
  StreamReport report = replay(spec, fn, clock, params);
  report.label = label + "/" + (spec.category_name.empty()
                                    ? std::to_string(spec.category)
                                    : spec.category_name);
  compare_runs({report}, out_prefix);

  std::cout << "frames total=" << report.frames_total
            << " processed=" << report.frames_processed << " tp=" << report.tp
            << " fn=" << report.fn << " fp=" << report.fp << "\n";
  std::cout << "normalized_time=" << report.normalized_time
            << " recall=" << report.recall << "\n";
  if (report.wall_time_per_frame_ms > 0)
    std::cout << "frames/sec=" << 1000.0 / report.wall_time_per_frame_ms << "\n";
  std::cout << "wrote " << out_prefix << ".csv and SVG plots\n";
  return exit_code::ok;
}

static int cmd_augment(const std::string& source_dir, const std::vector<double>& seed_box,
                       const std::string& filters_path, const std::string& out_dir,
                       uint64_t seed, double fps, double min_gap) {
  std::vector<FilterSpec> filters;
  try {
    if (filters_path.empty()) {
      for (FilterKind k : {FilterKind::brightness, FilterKind::contrast, FilterKind::rotation,
                           FilterKind::flip, FilterKind::shadow, FilterKind::background,
                           FilterKind::color_shift})
        filters.push_back({.kind = k});
    } else {
      json j = load_json_file(filters_path);
      filters = parse_filters(j.contains("filters") ? j.at("filters") : j);
    }
    if (filters.empty()) {
      std::cerr << "error: no filters configured\n";
      return exit_code::usage;
    }
    FrameSource src = directory_source(source_dir, fps);
    // Validate the seed box against the first frame.
    auto first = src();
    if (!first) {
      std::cerr << "error: empty frame source\n";
      return exit_code::usage;
    }
    const Box box{seed_box[0], seed_box[1], seed_box[2], seed_box[3]};
    if (box.xmin < 0 || box.ymin < 0 || box.xmax > first->image.width ||
        box.ymax > first->image.height || box.w() < 2 || box.h() < 2) {
      std::cerr << "error: seed box outside frame or degenerate\n";
      return exit_code::usage;
    }
    FrameSource fresh = directory_source(source_dir, fps);
    const BuildDatasetResult r = build_dataset(fresh, box, filters, out_dir, seed, min_gap);
    for (const auto& [kind, count] : r.per_filter_counts)
      std::cout << filter_kind_name(kind) << ": " << count << "\n";
    std::cout << "samples: " << r.dataset.frames.size() << "\n";
    if (r.tracking_lost)
      std::cerr << "warning: tracking lost; partial dataset written to " << out_dir << "\n";
    return exit_code::ok;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code::usage;
  }
}

static int cmd_genshapes(int n, int size, const std::string& out_dir, uint64_t seed) {
  try {
    ShapesConfig cfg;
    cfg.n_frames = n;
    cfg.image_size = size;
    cfg.seed = seed;
    AnnotatedDataset ds = gen_shapes_dataset(cfg, out_dir);
    ds.splits = split_dataset(ds.frames, {0.75, 0.15, 0.10}, seed);
    save_dataset(ds);
    std::cout << "wrote " << ds.frames.size() << " frames to " << out_dir << "\n";
    return exit_code::ok;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code::usage;
  }
}

int main(int argc, char** argv) {
  CLI::App app{"DUNet object-detection toolkit"};
  app.require_subcommand(1);

  // train
  std::string config_path;
  int64_t seed_override = -1;
  auto* train_cmd = app.add_subcommand("train", "train a model from a JSON config");
  train_cmd->add_option("--config", config_path, "JSON config file")->required();
  train_cmd->add_option("--seed", seed_override, "override training seed");

  // eval
  std::string ckpt, ds_root, ap_interp = "all", split = "test", out_csv = "eval.csv";
  double iou_thresh = 0.5, score_thresh = 0.5;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", ckpt, "model.ckpt path")->required();
  eval_cmd->add_option("--dataset", ds_root, "dataset root")->required();
  eval_cmd->add_option("--iou-thresh", iou_thresh, "TP IoU threshold");
  eval_cmd->add_option("--ap-interp", ap_interp, "all | 11point")
      ->check(CLI::IsMember({"all", "11point"}));
  eval_cmd->add_option("--score-thresh", score_thresh, "operating score threshold");
  eval_cmd->add_option("--split", split, "train | val | test | all");
  eval_cmd->add_option("--out", out_csv, "per-class results CSV");

  // streambench
  std::string bag_dir, sb_ckpt, sb_out = "streambench";
  bool oracle = false;
  double latency_ms = -1, sb_score = 0.5;
  auto* sb_cmd = app.add_subcommand("streambench", "replay a bag against a detector");
  sb_cmd->add_option("bag", bag_dir, "bag directory")->required();
  sb_cmd->add_option("--checkpoint", sb_ckpt, "model.ckpt path");
  sb_cmd->add_flag("--oracle", oracle, "use the ground-truth oracle detector");
  sb_cmd->add_option("--latency-ms", latency_ms,
                     "simulated per-frame latency (omit for real clock)");
  sb_cmd->add_option("--score-thresh", sb_score, "detection score threshold");
  sb_cmd->add_option("--out", sb_out, "output prefix for CSV/SVG");

  // augment
  std::string aug_src, aug_filters, aug_out = "augmented";
  std::vector<double> seed_box;
  uint64_t aug_seed = 1;
  double fps = 30.0, min_gap = 500.0;
  auto* aug_cmd = app.add_subcommand("augment", "tracker + live augmentation pipeline");
  aug_cmd->add_option("source", aug_src, "directory of numbered frames")->required();
  aug_cmd->add_option("--seed-box", seed_box, "x0 y0 x1 y1 in pixels")
      ->expected(4)
      ->required();
  aug_cmd->add_option("--filters", aug_filters, "filter config JSON");
  aug_cmd->add_option("--out", aug_out, "output dataset directory");
  aug_cmd->add_option("--seed", aug_seed, "rng seed");
  aug_cmd->add_option("--fps", fps, "source frame rate");
  aug_cmd->add_option("--min-gap-ms", min_gap, "minimum capture spacing");

  // genshapes
  int gs_n = 1000, gs_size = 64;
  std::string gs_out = "shapes";
  uint64_t gs_seed = 1;
  auto* gs_cmd = app.add_subcommand("genshapes", "generate the synthetic shapes dataset");
  gs_cmd->add_option("--n", gs_n, "number of frames")->check(CLI::PositiveNumber);
  gs_cmd->add_option("--size", gs_size, "image size");
  gs_cmd->add_option("--out", gs_out, "output directory");
  gs_cmd->add_option("--seed", gs_seed, "rng seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : exit_code::usage;
  }

  if (train_cmd->parsed()) return cmd_train(config_path, seed_override);
  if (eval_cmd->parsed())
    return cmd_eval(ckpt, ds_root, iou_thresh, ap_interp, score_thresh, split, out_csv);
  if (sb_cmd->parsed()) {
    if (!oracle && sb_ckpt.empty()) {
      std::cerr << "error: provide --checkpoint or --oracle\n";
      return exit_code::usage;
    }
    return cmd_streambench(bag_dir, sb_ckpt, oracle, latency_ms, sb_score, sb_out);
  }
  if (aug_cmd->parsed())
    return cmd_augment(aug_src, seed_box, aug_filters, aug_out, aug_seed, fps, min_gap);
  if (gs_cmd->parsed()) return cmd_genshapes(gs_n, gs_size, gs_out, gs_seed);
  return exit_code::usage;
}
