#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "dunet/checkpoint.hpp"
#include "dunet/model.hpp"

using namespace dunet;
namespace fs = std::filesystem;

TEST_CASE("checkpoint round-trips bit-exactly") {
  const std::string path = (fs::temp_directory_path() / "dunet_ckpt_test.ckpt").string();
  std::mt19937 rng(1);
  Tensor a({3, 2}, std::vector<double>{1.5, -2.25, 1e-300, 7.0, 0.0, -0.125});
  Tensor b({4});
  std::uniform_real_distribution<double> d(-1, 1);
  for (int64_t i = 0; i < b.size(); ++i) b[i] = d(rng);

  std::map<std::string, Tensor*> state{{"layer.w", &a}, {"layer.b", &b}};
  save_checkpoint(path, state);

  Tensor a2({3, 2}), b2({4});
  std::map<std::string, Tensor*> loaded{{"layer.w", &a2}, {"layer.b", &b2}};
  load_checkpoint(path, loaded);
  for (int64_t i = 0; i < a.size(); ++i) CHECK(a2[i] == a[i]);
  for (int64_t i = 0; i < b.size(); ++i) CHECK(b2[i] == b[i]);

  const auto index = read_checkpoint_index(path);
  REQUIRE(index.size() == 2);
  CHECK(index.at("layer.w") == std::vector<int64_t>{3, 2});
  CHECK(index.at("layer.b") == std::vector<int64_t>{4});
  fs::remove(path);
}

TEST_CASE("load rejects unknown names and shape mismatches") {
  const std::string path = (fs::temp_directory_path() / "dunet_ckpt_test2.ckpt").string();
  Tensor a({2, 2});
  std::map<std::string, Tensor*> state{{"w", &a}};
  save_checkpoint(path, state);

  Tensor wrong_shape({2, 3});
  std::map<std::string, Tensor*> bad1{{"w", &wrong_shape}};
  CHECK_THROWS_AS(load_checkpoint(path, bad1), std::runtime_error);

  Tensor other({2, 2});
  std::map<std::string, Tensor*> bad2{{"v", &other}};
  CHECK_THROWS_AS(load_checkpoint(path, bad2), std::runtime_error);
  fs::remove(path);
}

TEST_CASE("load rejects corrupt files") {
  const std::string path = (fs::temp_directory_path() / "dunet_ckpt_test3.ckpt").string();
  std::ofstream(path) << "not a checkpoint";
  Tensor a({2});
  std::map<std::string, Tensor*> state{{"w", &a}};
  CHECK_THROWS_AS(load_checkpoint(path, state), std::runtime_error);
  CHECK_THROWS_AS(read_checkpoint_index(path), std::runtime_error);
  fs::remove(path);
}

TEST_CASE("full model state round-trips through a checkpoint") {
  const std::string path = (fs::temp_directory_path() / "dunet_ckpt_model.ckpt").string();
  const DUNetConfig cfg = DUNetConfig::desk(3);
  std::mt19937 r1(7), r2(8);
  DUNetModel a = build_dunet(cfg, 1, r1);
  DUNetModel b = build_dunet(cfg, 1, r2);  // different init

  auto sa = a.graph->named_state();
  save_checkpoint(path, sa);
  auto sb = b.graph->named_state();
  load_checkpoint(path, sb);

  for (const auto& [name, t] : sa) {
    const Tensor* other = sb.at(name);
    REQUIRE(t->size() == other->size());
    for (int64_t i = 0; i < t->size(); ++i) REQUIRE((*t)[i] == (*other)[i]);
  }

  // Identical state => identical inference.
  Tensor img({1, 3, 64, 64});
  std::mt19937 ir(9);
  std::uniform_real_distribution<double> d(0, 1);
  for (int64_t i = 0; i < img.size(); ++i) img[i] = d(ir);
  a.forward_infer(img);
  b.forward_infer(img);
  for (int64_t i = 0; i < a.conf_flat->value().size(); ++i)
    REQUIRE(a.conf_flat->value()[i] == b.conf_flat->value()[i]);
  fs::remove(path);
}
