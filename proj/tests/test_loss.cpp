#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "mpcseg/loss.hpp"

namespace mpcseg {
namespace {

const double kLn3 = std::log(3.0);

Matrix row(std::initializer_list<double> v) { return Matrix::from_rows({v}); }

TEST(ClassWeights, UniformHistogram) {
  const std::vector<std::size_t> h{10, 10, 10, 10};
  for (double tau : {0.0, 0.05, 1.0}) {
    const auto w = compute_class_weights(h, tau);
    for (double v : w.w) EXPECT_DOUBLE_EQ(v, 0.25);
  }
}

TEST(ClassWeights, TruncationFixture) {
  // Shares 0.99 / 0.01: raw inverse frequencies normalize to (0.01, 0.99);
  // 0.01 < 0.05 * 0.99 is lifted to 0.0495 and the pair renormalized.
  const std::vector<std::size_t> h{99, 1};
  const auto w = compute_class_weights(h, 0.05);
  EXPECT_NEAR(w.w[0], 0.0495 / 1.0395, 1e-12);
  EXPECT_NEAR(w.w[1], 0.99 / 1.0395, 1e-12);
  EXPECT_NEAR(w.w[0], 0.047619047619047616, 1e-12);
  EXPECT_NEAR(w.w[1], 0.952380952380952380, 1e-12);
}

TEST(ClassWeights, FullTruncationIsUniform) {
  const std::vector<std::size_t> h{1000, 30, 1};
  const auto w = compute_class_weights(h, 1.0);
  for (double v : w.w) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(ClassWeights, InvariantsOnRandomHistograms) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> count(0, 5000);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<std::size_t> h(6);
    for (auto& c : h) c = count(rng);
    h[0] += 1;
    const auto w = compute_class_weights(h, 0.05);
    const double mx = *std::max_element(w.w.begin(), w.w.end());
    EXPECT_NEAR(std::accumulate(w.w.begin(), w.w.end(), 0.0), 1.0, 1e-12);
    for (double v : w.w) EXPECT_GE(v, 0.05 * mx * (1 - 1e-12));
  }
}

TEST(ClassWeights, ZeroCountGetsMaximumAndAllZeroRejected) {
  const std::vector<std::size_t> h{50, 0, 10};
  const auto w = compute_class_weights(h, 0.0);
  EXPECT_DOUBLE_EQ(w.w[1], w.w[2]);
  EXPECT_GT(w.w[2], w.w[0]);
  const std::vector<std::size_t> zero{0, 0};
  EXPECT_THROW(compute_class_weights(zero, 0.05), ValidationError);
}

TEST(Tail, StrictThreshold) {
  const std::vector<std::size_t> a{50, 45, 5};
  EXPECT_TRUE(determine_tail(a).classes().empty());
  const std::vector<std::size_t> b{90, 6, 4};
  EXPECT_EQ(determine_tail(b).classes(), (std::vector<int>{2}));
}

TEST(Tail, LongTailedCountsMatchShareOracle) {
  const std::vector<std::size_t> h{1229, 307, 77, 19, 5};
  const double total = 1229 + 307 + 77 + 19 + 5;
  const auto t = determine_tail(h);
  for (std::size_t c = 0; c < h.size(); ++c) EXPECT_EQ(t.contains(c), double(h[c]) / total < 0.05);
  EXPECT_EQ(t.classes(), (std::vector<int>{2, 3, 4}));
}

TEST(OneHot, UnlabeledRowsAreZero) {
  const std::vector<int> l{1, kUnlabeled, 0};
  EXPECT_EQ(one_hot(l, 2), Matrix::from_rows({{0, 1}, {0, 0}, {1, 0}}));
  const std::vector<int> bad{2};
  EXPECT_THROW(one_hot(bad, 2), std::invalid_argument);
}

TEST(DownsampleLabels, IdentityChain) {
  EncoderState st;
  for (auto& a : st.absolute) a = {0, 1, 2, 3};
  const std::vector<int> labels{2, kUnlabeled, 0, 1};
  for (const auto& level : downsample_labels(labels, st)) EXPECT_EQ(level, labels);
}

TEST(DownsampleLabels, MatchesComposedKeptChains) {
  const std::size_t n = 300;
  std::mt19937_64 rng(4);
  std::vector<int> labels(n);
  for (auto& l : labels) l = std::uniform_int_distribution<int>(-1, 3)(rng);
  NetworkConfig nc;
  nc.base_channels = 1;
  nc.classes = 4;
  const auto p = init_network(nc, {false, false, false});
  SampleInput in;
  in.features = Matrix(n, nc.input_features());
  for (std::size_t i = 0; i < n; ++i) in.positions.push_back({double(i), 0.0, 0.0});
  const Sampling s = draw_sampling(n, 5);
  Tape t;
  Binding bind(t, p.store);
  const auto st = encode(bind, p, local_feature_encode(bind, p, in), in.positions, s);
  const auto got = downsample_labels(labels, st);
  for (std::size_t level = 1; level < kLevels; ++level) {
    const auto& out = got[kLevels - 1 - level];
    ASSERT_EQ(out.size(), s.kept[level - 1].size());
    for (std::size_t j = 0; j < out.size(); ++j) {
      std::size_t idx = j;
      for (std::size_t l = level; l >= 1; --l) idx = s.kept[l - 1][idx];
      EXPECT_EQ(out[j], labels[idx]);
    }
  }
}

TEST(ScaleLoss, HandTracedLevel) {
  // softmax rows: [0, ln3] -> (1/4, 3/4); [0, 0] -> (1/2, 1/2); [ln3, 0] -> (3/4, 1/4)
  // gating by omega = (1, 3) and renormalizing:
  //   (1/4, 9/4) -> (1/10, 9/10); (1/2, 3/2) -> (1/4, 3/4); (3/4, 3/4) -> (1/2, 1/2)
  Tape t;
  const Var logits = t.constant(Matrix::from_rows({{0, kLn3}, {0, 0}, {kLn3, 0}, {0, 5}}));
  const Var omega = t.constant(row({1, 3}));
  const Var z = scale_probabilities(logits, omega);
  EXPECT_NEAR(z.value()(0, 1), 0.9, 1e-15);
  EXPECT_NEAR(z.value()(1, 0), 0.25, 1e-15);
  EXPECT_NEAR(z.value()(2, 0), 0.5, 1e-15);
  ClassWeights w;
  w.w = {0.25, 0.75};
  const std::vector<int> labels{1, 0, 0, kUnlabeled};
  // 0.75 * -log2(9/10) + 0.25 * -log2(1/4) + 0.25 * -log2(1/2)
  const double expected = 0.75 * std::log2(10.0 / 9.0) + 0.25 * 2.0 + 0.25 * 1.0;
  EXPECT_NEAR(scale_level_loss(z, labels, w).item(), expected, 1e-12);
}

TEST(ScaleLoss, UnlabeledLevelIsZero) {
  Tape t;
  const Var z = scale_probabilities(t.constant(Matrix(3, 2, 0.3)), t.constant(row({1, 1})));
  const std::vector<int> labels(3, kUnlabeled);
  EXPECT_EQ(scale_level_loss(z, labels, ClassWeights::uniform(2)).item(), 0.0);
}

TEST(ScaleLoss, ClosedFormWithUnitLossesAndUnitOmegas) {
  Tape t;
  const std::vector<Var> losses(4, t.constant(row({1.0})));
  const std::vector<Var> omegas{t.constant(row({1, 0})), t.constant(row({0.6, 0.8})),
                                t.constant(row({0, 1})), t.constant(row({0.8, -0.6}))};
  EXPECT_NEAR(combine_scale_losses(losses, omegas).item(), 1.328125, 1e-12);
}

TEST(ScaleLoss, DoublingOmegaHalvesTerms) {
  Tape t;
  const std::vector<Var> losses{t.constant(row({0.7})), t.constant(row({1.3})), t.constant(row({2.0})),
                                t.constant(row({0.1}))};
  std::vector<Var> omegas, doubled;
  const std::vector<Matrix> base{row({1, 2}), row({0.5, 0.5}), row({3, 1}), row({1, 1})};
  for (const auto& m : base) {
    omegas.push_back(t.constant(m));
    Matrix d = m;
    for (double& v : d.data) v *= 2.0;
    doubled.push_back(t.constant(d));
  }
  double expected = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double norm = std::hypot(base[i].data[0], base[i].data[1]);
    expected += losses[i].item() / (std::pow(4.0, double(i)) * norm);
  }
  EXPECT_NEAR(combine_scale_losses(losses, omegas).item(), expected, 1e-12);
  EXPECT_NEAR(combine_scale_losses(losses, doubled).item(), expected / 2.0, 1e-12);
}

struct TailFixture {
  Tape t;
  // Head 1 softmax rows (1/4, 3/4), (3/4, 1/4), (1/2, 1/2); head 2 rows
  // (1/2, 1/2), (1/4, 3/4), (1/2, 1/2).
  std::array<Var, 2> logits{t.constant(Matrix::from_rows({{0, kLn3}, {kLn3, 0}, {0, 0}})),
                            t.constant(Matrix::from_rows({{0, 0}, {0, kLn3}, {0, 0}}))};
  std::array<Var, 2> omegas{t.constant(row({1, 2})), t.constant(row({0.5, 1.5}))};
  std::vector<int> labels{1, 0, kUnlabeled};
  TailSet tail{{false, true}};
};

TEST(TailLoss, HandTracedHeads) {
  TailFixture f;
  const auto r = longtail_loss_from_logits(f.logits, f.omegas, f.labels, f.tail);
  // Head 1 gated rows (1/4, 3/2), (3/4, 1/2) vs targets (0,1), (1,0):
  //   errors 1/16 + 1/4 twice -> mean 5/16.
  EXPECT_NEAR(r.head_losses[0].item(), 5.0 / 16.0, 1e-15);
  // Head 2 gated rows (1/4, 3/4), (1/8, 9/8) vs targets (0,1), (0,0):
  //   errors 1/8 and 82/64 -> mean 45/64.
  EXPECT_NEAR(r.head_losses[1].item(), 45.0 / 64.0, 1e-15);
  const double expected = (5.0 / 16.0) / std::sqrt(5.0) + (45.0 / 64.0) / std::sqrt(2.5);
  EXPECT_NEAR(r.total.item(), expected, 1e-12);
  EXPECT_NEAR(r.z_tail.value()(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(r.z_tail.value()(0, 1), 2.25, 1e-15);
  EXPECT_EQ(r.z_tail.rows(), 3u);
}

TEST(TailLoss, TargetsZeroHeadRows) {
  const std::vector<int> labels{0, 1, 2, kUnlabeled, 2};
  const TailSet tail{{false, false, true}};
  const Matrix y = tail_targets(labels, tail, 3);
  EXPECT_EQ(y, Matrix::from_rows({{0, 0, 0}, {0, 0, 0}, {0, 0, 1}, {0, 0, 0}, {0, 0, 1}}));
  const TailSet none{{false, false, false}};
  for (double v : tail_targets(labels, none, 3).data) EXPECT_EQ(v, 0.0);
}

TEST(TailLoss, PerfectPredictionOnHeadPointIsZero) {
  Tape t;
  // Large logit margins make head 1 one-hot; head 2 is gated to zero.
  const std::array<Var, 2> logits{t.constant(row({60, 0})), t.constant(row({0, 0}))};
  const std::array<Var, 2> omegas{t.constant(row({1, 1})), t.constant(row({0, 0}))};
  const std::vector<int> labels{0};
  const auto r = longtail_loss_from_logits(logits, omegas, labels, TailSet{{false, true}});
  EXPECT_NEAR(r.head_losses[0].item(), 0.0, 1e-24);
  EXPECT_EQ(r.head_losses[1].item(), 0.0);
}

TEST(TailLoss, SecondHeadSuppressedOnHeadClassPoint) {
  Tape t;
  const Var l2 = t.leaf(Matrix::from_rows({{0.3, -0.2, 0.5}, {1.0, 0.0, -1.0}}), true);
  const Var w2 = t.leaf(row({0.9, 1.1, 0.7}), true);
  const std::array<Var, 2> logits{t.constant(Matrix(2, 3)), l2};
  const std::array<Var, 2> omegas{t.constant(row({1, 1, 1})), w2};
  const std::vector<int> labels{0, 1};  // both head classes
  const TailSet tail{{false, false, true}};
  const auto r = longtail_loss_from_logits(logits, omegas, labels, tail);
  t.backward(r.head_losses[1]);
  // Descent on the gate shrinks every class output toward zero.
  for (double g : t.grad(w2).data) EXPECT_GT(g, 0.0);
  // A small descent step on the logits lowers the head-2 loss.
  Matrix stepped = l2.value();
  for (std::size_t i = 0; i < stepped.size(); ++i) stepped.data[i] -= 1e-3 * t.grad(l2).data[i];
  Tape t2;
  const std::array<Var, 2> logits2{t2.constant(Matrix(2, 3)), t2.constant(stepped)};
  const std::array<Var, 2> omegas2{t2.constant(row({1, 1, 1})), t2.constant(w2.value())};
  EXPECT_LT(longtail_loss_from_logits(logits2, omegas2, labels, tail).head_losses[1].item(),
            r.head_losses[1].item());
}

TEST(Hybrid, Arithmetic) {
  Tape t;
  const Var s = t.constant(row({0.5})), tl = t.constant(row({0.25}));
  EXPECT_EQ(hybrid_loss(s, tl, 10.0).item(), 5.25);
  EXPECT_EQ(hybrid_loss(s, tl, 0.0).item(), 0.25);
  EXPECT_EQ(hybrid_loss(s, tl, 1.0).item(), 0.75);
  EXPECT_THROW(hybrid_loss(s, tl, -1.0), ValidationError);
}

TEST(Predict, ArgmaxWithTieToSmallest) {
  EXPECT_EQ(predict(Matrix::from_rows({{0.1, 0.9}, {0.5, 0.5}, {0.2, 0.2, }})), (std::vector<int>{1, 0, 0}));
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> u(0, 3);  // coarse values force ties
  Matrix m(200, 4);
  for (double& v : m.data) v = u(rng);
  const auto p = predict(m);
  for (std::size_t r = 0; r < m.rows; ++r) {
    int best = 0;
    for (int c = 1; c < 4; ++c) {
      if (m(r, static_cast<std::size_t>(c)) > m(r, static_cast<std::size_t>(best))) best = c;
    }
    EXPECT_EQ(p[r], best);
  }
}

TEST(OmegaGuard, RescalesCollapsedWeights) {
  Matrix ok = row({0.3, 0.4});
  EXPECT_FALSE(guard_omega_norm(ok));
  Matrix tiny = row({3e-8, 4e-8});
  EXPECT_TRUE(guard_omega_norm(tiny));
  EXPECT_NEAR(std::hypot(tiny.data[0], tiny.data[1]), kOmegaMinNorm, 1e-20);
  EXPECT_NEAR(tiny.data[0] / tiny.data[1], 0.75, 1e-12);
  Matrix zero = row({0, 0, 0, 0});
  EXPECT_TRUE(guard_omega_norm(zero));
  for (double v : zero.data) EXPECT_NEAR(v, kOmegaMinNorm / 2.0, 1e-20);
}

TEST(Heads, MultiscaleLossComposesParts) {
  NetworkConfig nc;
  nc.base_channels = 1;
  nc.classes = 3;
  nc.head_hidden = 4;
  nc.seed = 2;
  const auto p = init_network(nc, {false, true, false});
  std::array<Var, kLevels> decoder;
  std::array<std::vector<int>, kLevels - 1> labels;
  Tape t;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < kLevels; ++i) {
    const std::size_t level = kLevels - 1 - i;
    Matrix m(5, nc.channels(level));
    for (double& v : m.data) v = u(rng);
    decoder[i] = t.constant(m);
    if (i + 1 < kLevels) labels[i] = {0, 1, 2, kUnlabeled, 1};
  }
  const ClassWeights w = ClassWeights::uniform(3);
  Binding bind(t, p.store);
  const auto ms = multiscale_loss(bind, p, decoder, labels, w);
  double expected = 0.0;
  for (std::size_t i = 0; i < kLevels - 1; ++i) {
    const Var l = scale_level_loss(ms.probabilities[i], labels[i], w);
    EXPECT_EQ(l.item(), ms.level_losses[i].item());
    expected += l.item() / (std::pow(4.0, double(i)) * std::sqrt(3.0));
  }
  EXPECT_NEAR(ms.total.item(), expected, 1e-12);
}

TEST(Heads, CeHeadOnlyWithoutTailLoss) {
  NetworkConfig nc;
  nc.base_channels = 2;
  nc.classes = 2;
  const auto with_tail = init_network(nc, {false, false, true});
  const auto without = init_network(nc, {false, false, false});
  Tape t;
  Binding b1(t, with_tail.store), b2(t, without.store);
  const Var f = t.constant(Matrix(3, 2, 0.5));
  const std::vector<int> labels{0, 1, kUnlabeled};
  EXPECT_THROW(ce_head_loss(b1, with_tail, f, labels, ClassWeights::uniform(2)), std::invalid_argument);
  EXPECT_THROW(longtail_loss(b2, without, f, labels, TailSet{{false, false}}), std::invalid_argument);
  const auto ce = ce_head_loss(b2, without, f, labels, ClassWeights::uniform(2));
  EXPECT_GE(ce.total.item(), 0.0);
  EXPECT_EQ(ce.probabilities.rows(), 3u);
}

}  // namespace
}  // namespace mpcseg
