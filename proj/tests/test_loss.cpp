#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "dunet/graph.hpp"
#include "dunet/train.hpp"
#include "fd_check.hpp"

using namespace dunet;
using namespace dunet::testing;

TEST_CASE("uniform logits over 3 classes cost ln 3 per row") {
  Graph g;
  InputNode* logits = g.input({2, 3});
  SoftmaxCENode* ce = g.softmax_ce(logits);
  ce->set_labels({0, 2});
  logits->set(Tensor({2, 3}, std::vector<double>{1, 1, 1, -2, -2, -2}));
  g.forward(true);
  CHECK(ce->value()[0] == doctest::Approx(2 * std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("smooth-L1 of a 0.5 residual is 0.125") {
  Graph g;
  InputNode* x = g.input({1});
  SmoothL1Node* l = g.smooth_l1(x);
  l->set_target(Tensor({1}, std::vector<double>{1.0}));
  x->set(Tensor({1}, std::vector<double>{1.5}));
  g.forward(true);
  CHECK(l->value()[0] == doctest::Approx(0.125).epsilon(1e-12));
}

namespace {

struct MultiboxFixture {
  Graph g;
  InputNode* conf;
  InputNode* loc;
  MultiboxLossNode* loss;

  MultiboxFixture(int M, int K, double ratio = 3.0, double alpha = 1.0) {
    conf = g.input({M, K + 1});
    loc = g.input({M, 4});
    loss = g.multibox_loss(conf, loc, ratio, alpha);
  }
};

}  // namespace

TEST_CASE("perfect predictions give near-zero multibox loss") {
  MultiboxFixture f(4, 2);
  // Anchor 0 positive class 1, rest background. Confident correct logits.
  f.loss->set_targets({1, 0, 0, 0}, {{{0, 0, 0, 0}},
                                     {{0, 0, 0, 0}},
                                     {{0, 0, 0, 0}},
                                     {{0, 0, 0, 0}}});
  Tensor conf({4, 3});
  conf[0 * 3 + 1] = 60.0;  // positive: class 1
  conf[1 * 3 + 0] = 60.0;  // negatives: background
  conf[2 * 3 + 0] = 60.0;
  conf[3 * 3 + 0] = 60.0;
  f.conf->set(conf);
  f.loc->set(Tensor({4, 4}));  // exact offsets
  f.g.forward(true);
  CHECK(f.loss->value()[0] < 1e-8);
  CHECK(f.loss->num_positives() == 1);
}

TEST_CASE("hard negative mining keeps min(ratio*N, negatives) highest-loss rows") {
  MultiboxFixture f(8, 1, 3.0, 1.0);
  // One positive, seven negatives -> 3 selected negatives.
  f.loss->set_targets({1, 0, 0, 0, 0, 0, 0, 0},
                      std::vector<std::array<double, 4>>(8, {{0, 0, 0, 0}}));
  Tensor conf({8, 2});
  // Background loss rises with the class-1 logit; rows 5,6,7 are hardest.
  for (int m = 1; m < 8; ++m) conf[m * 2 + 1] = m * 0.5;
  f.conf->set(conf);
  f.loc->set(Tensor({8, 4}));
  f.g.forward(true);
  CHECK(f.loss->num_positives() == 1);
  CHECK(f.loss->num_selected_negatives() == 3);

  // With only 2 negatives available, selection is capped at 2.
  MultiboxFixture f2(3, 1);
  f2.loss->set_targets({1, 0, 0}, std::vector<std::array<double, 4>>(3, {{0, 0, 0, 0}}));
  f2.conf->set(Tensor({3, 2}));
  f2.loc->set(Tensor({3, 4}));
  f2.g.forward(true);
  CHECK(f2.loss->num_selected_negatives() == 2);
}

TEST_CASE("no positives: single hardest negative, normalizer max(N,1)") {
  MultiboxFixture f(4, 1);
  f.loss->set_targets({0, 0, 0, 0}, std::vector<std::array<double, 4>>(4, {{0, 0, 0, 0}}));
  Tensor conf({4, 2});
  conf[2 * 2 + 1] = 3.0;  // row 2 is the hardest background
  f.conf->set(conf);
  f.loc->set(Tensor({4, 4}));
  f.g.forward(true);
  CHECK(f.loss->num_positives() == 0);
  CHECK(f.loss->num_selected_negatives() == 1);
  // Loss = CE of row 2 at background / max(N,1)=1; no localization term.
  const double ce = -std::log(1.0 / (1.0 + std::exp(3.0)));
  CHECK(f.loss->value()[0] == doctest::Approx(ce).epsilon(1e-10));
  CHECK(f.loss->loc_loss() == 0.0);
}

TEST_CASE("loss decomposition: total = (conf + alpha*loc) / N") {
  MultiboxFixture f(4, 2, 3.0, 2.0);
  f.loss->set_targets({1, 2, 0, 0}, {{{0.1, 0.2, 0.3, 0.4}},
                                     {{-0.1, 0.0, 0.2, -0.3}},
                                     {{0, 0, 0, 0}},
                                     {{0, 0, 0, 0}}});
  std::mt19937 rng(3);
  f.conf->set(random_tensor({4, 3}, rng, -1, 1));
  f.loc->set(random_tensor({4, 4}, rng, -1, 1));
  f.g.forward(true);
  // conf_loss()/loc_loss() are already normalized by max(N,1).
  CHECK(f.loss->value()[0] ==
        doctest::Approx(f.loss->conf_loss() + 2.0 * f.loss->loc_loss()).epsilon(1e-12));
  CHECK(f.loss->loc_loss() > 0);
  CHECK(f.loss->num_positives() == 2);
}

TEST_CASE("multibox loss gradients pass the finite-difference check") {
  MultiboxFixture f(10, 2);
  std::vector<int> labels = {1, 0, 2, 0, 0, 0, 1, 0, 0, 0};
  std::vector<std::array<double, 4>> targets(10, {{0, 0, 0, 0}});
  targets[0] = {0.3, -0.2, 0.5, 0.1};
  targets[2] = {-0.4, 0.1, -0.2, 0.6};
  targets[6] = {0.05, 0.05, -0.3, 0.2};
  f.loss->set_targets(labels, targets);
  std::mt19937 rng(4);
  f.conf->set(random_tensor({10, 3}, rng, -2, 2));
  f.loc->set(random_tensor({10, 4}, rng, -1, 1));
  CHECK(max_grad_rel_err(f.g, f.loss, f.conf) < 1e-4);
  CHECK(max_grad_rel_err(f.g, f.loss, f.loc) < 1e-4);
}

TEST_CASE("multibox loss through a conv head passes finite differences") {
  // End-to-end: image -> conv -> flatten -> multibox.
  std::mt19937 rng(5);
  Graph g;
  const int K = 2, A = 2;
  InputNode* x = g.input({1, 3, 4, 4});
  ParamNode* cw = g.param("cls.w", he_uniform({A * (K + 1), 3, 3, 3}, rng));
  ParamNode* cb = g.param("cls.b", Tensor({A * (K + 1)}));
  ParamNode* bw = g.param("box.w", he_uniform({A * 4, 3, 3, 3}, rng));
  ParamNode* bb = g.param("box.b", Tensor({A * 4}));
  Node* cls = g.conv2d(x, cw, cb, 2, 1);  // 2x2 grid -> 8 anchors
  Node* box = g.conv2d(x, bw, bb, 2, 1);
  FlattenHeadsNode* conf = g.flatten_heads({cls}, K + 1);
  FlattenHeadsNode* loc = g.flatten_heads({box}, 4);
  MultiboxLossNode* loss = g.multibox_loss(conf, loc, 3.0, 1.0);
  loss->set_targets({1, 0, 0, 0, 2, 0, 0, 0},
                    std::vector<std::array<double, 4>>(8, {{0.1, -0.1, 0.2, 0.0}}));
  x->set(random_tensor({1, 3, 4, 4}, rng, 0, 1));
  CHECK(max_grad_rel_err(g, loss, x) < 1e-4);
  CHECK(max_grad_rel_err(g, loss, cw) < 1e-4);
  CHECK(max_grad_rel_err(g, loss, bw) < 1e-4);
}

TEST_CASE("sgd recurrence: v <- mu v + g + lambda w; w <- w - eta v") {
  Tensor w({2}, std::vector<double>{1.0, -2.0});
  Tensor grad({2}, std::vector<double>{0.5, 0.25});
  Tensor v({2}, std::vector<double>{0.1, 0.0});
  sgd_step(w, grad, v, /*rate=*/0.1, /*weight_decay=*/0.01, /*momentum=*/0.9);
  const double v0 = 0.9 * 0.1 + 0.5 + 0.01 * 1.0;
  const double v1 = 0.9 * 0.0 + 0.25 + 0.01 * -2.0;
  CHECK(v[0] == doctest::Approx(v0).epsilon(1e-12));
  CHECK(v[1] == doctest::Approx(v1).epsilon(1e-12));
  CHECK(w[0] == doctest::Approx(1.0 - 0.1 * v0).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(-2.0 - 0.1 * v1).epsilon(1e-12));
}

TEST_CASE("lr schedule picks the last rate at or before the step") {
  TrainConfig cfg;
  cfg.lr_schedule = {{0, 0.1}, {100, 0.01}, {200, 0.001}};
  CHECK(cfg.rate_at(0) == 0.1);
  CHECK(cfg.rate_at(99) == 0.1);
  CHECK(cfg.rate_at(100) == 0.01);
  CHECK(cfg.rate_at(250) == 0.001);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.lr_schedule.clear();
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
