#include <cmath>
#include <algorithm>
#include <numeric>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "metrics_oracle.hpp"
#include "mpcseg/metrics.hpp"

namespace mpcseg {
namespace {

void expect_same(double got, double want, double tol) {
  if (std::isnan(want)) {
    EXPECT_TRUE(std::isnan(got));
  } else {
    EXPECT_NEAR(got, want, tol);
  }
}

ConfusionMatrix from_pairs(const oracle::Pairs& p, std::size_t classes) {
  ConfusionMatrix cm(classes);
  cm.accumulate(p.truth, p.pred);
  return cm;
}

TEST(Metrics, MatchesOracleOnRandomMatrices) {
  const TailSet tail{{false, false, false, true, true}};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto pairs = oracle::random_pairs(5, seed);
    const auto want = oracle::compute(pairs, 5, tail.is_tail);
    const auto got = compute_report(from_pairs(pairs, 5), tail);
    expect_same(got.oa, want.oa, 1e-12);
    expect_same(got.aa, want.aa, 1e-12);
    expect_same(got.kappa, want.kappa, 1e-12);
    expect_same(got.miou, want.miou, 1e-12);
    expect_same(got.head_avg, want.head_avg, 1e-12);
    expect_same(got.tail_avg, want.tail_avg, 1e-12);
    expect_same(got.head_min, want.head_min, 1e-12);
    expect_same(got.tail_min, want.tail_min, 1e-12);
    EXPECT_EQ(got.total, pairs.truth.size());
  }
}

TEST(Metrics, PerfectPrediction) {
  const std::vector<int> truth{0, 1, 2, 2, 1, 0, 3};
  ConfusionMatrix cm(4);
  cm.accumulate(truth, truth);
  const auto r = compute_report(cm, TailSet{{false, false, false, true}});
  EXPECT_EQ(r.oa, 1.0);
  EXPECT_EQ(r.aa, 1.0);
  EXPECT_EQ(r.kappa, 1.0);
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_EQ(r.tail_min, 1.0);
}

TEST(Metrics, ChanceLevelHasZeroKappa) {
  // Balanced truth, constant prediction.
  const std::vector<int> truth{0, 0, 1, 1}, pred{0, 0, 0, 0};
  ConfusionMatrix cm(2);
  cm.accumulate(truth, pred);
  const auto r = compute_report(cm, TailSet{{false, false}});
  EXPECT_EQ(r.oa, 0.5);
  EXPECT_EQ(r.kappa, 0.0);
  EXPECT_EQ(r.aa, 0.5);
  EXPECT_EQ(r.miou, 0.25);
  EXPECT_TRUE(std::isnan(r.tail_avg));
}

TEST(Metrics, AbsentClassesExcluded) {
  const std::vector<int> truth{0, 0, 2}, pred{0, 1, 2};
  ConfusionMatrix cm(3);
  cm.accumulate(truth, pred);
  const auto r = compute_report(cm, TailSet{{false, true, false}});
  EXPECT_EQ(r.absent_classes, (std::vector<int>{1}));
  EXPECT_TRUE(std::isnan(r.per_class_acc[1]));
  EXPECT_DOUBLE_EQ(r.aa, 0.75);
  EXPECT_TRUE(std::isnan(r.tail_avg));
  EXPECT_DOUBLE_EQ(r.head_min, 0.5);
}

TEST(Metrics, MaskAndUnlabeledSkipped) {
  const std::vector<int> truth{0, kUnlabeled, 1, 1}, pred{0, 1, 0, 1};
  const std::vector<std::uint8_t> mask{1, 1, 0, 1};
  ConfusionMatrix cm(2);
  cm.accumulate(truth, pred, mask);
  EXPECT_EQ(cm.total(), 2u);
  EXPECT_EQ(cm(0, 0), 1u);
  EXPECT_EQ(cm(1, 1), 1u);
}

TEST(Metrics, MergeEqualsSingleAccumulation) {
  const auto a = oracle::random_pairs(5, 7), b = oracle::random_pairs(5, 8);
  ConfusionMatrix ab = from_pairs(a, 5), ba = from_pairs(b, 5);
  ab.merge(from_pairs(b, 5));
  ba.merge(from_pairs(a, 5));
  oracle::Pairs all = a;
  all.truth.insert(all.truth.end(), b.truth.begin(), b.truth.end());
  all.pred.insert(all.pred.end(), b.pred.begin(), b.pred.end());
  EXPECT_EQ(ab, from_pairs(all, 5));
  EXPECT_EQ(ab, ba);
  EXPECT_THROW(ab.merge(ConfusionMatrix(4)), std::invalid_argument);
}

TEST(Metrics, InvariantToPointOrder) {
  auto p = oracle::random_pairs(5, 11);
  const auto before = compute_report(from_pairs(p, 5), TailSet{{false, false, false, false, true}});
  std::reverse(p.truth.begin(), p.truth.end());
  std::reverse(p.pred.begin(), p.pred.end());
  const auto after = compute_report(from_pairs(p, 5), TailSet{{false, false, false, false, true}});
  EXPECT_EQ(before.oa, after.oa);
  EXPECT_EQ(before.kappa, after.kappa);
  EXPECT_EQ(before.miou, after.miou);
}

TEST(Metrics, RangeChecksAndEmpty) {
  ConfusionMatrix cm(2);
  EXPECT_THROW(cm.add(2, 0), std::invalid_argument);
  EXPECT_THROW(cm.add(0, -1), std::invalid_argument);
  EXPECT_THROW(compute_report(cm, TailSet{{false, false}}), std::invalid_argument);
}

TEST(Metrics, ReportSerialization) {
  const std::vector<int> truth{0, 1, 1}, pred{0, 1, 0};
  ConfusionMatrix cm(2);
  cm.accumulate(truth, pred);
  const auto r = compute_report(cm, TailSet{{false, true}});
  const std::vector<std::string> names{"ground", "pole"};
  const auto j = nlohmann::json::parse(report_json(r, names));
  EXPECT_DOUBLE_EQ(j["oa"].get<double>(), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(j["tail_avg"].get<double>(), 0.5);
  const std::string csv = report_csv(r, names);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "ground,pole,OA,AA,kappa,mIoU,head_avg,tail_avg,head_min,tail_min");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
}

}  // namespace
}  // namespace mpcseg
