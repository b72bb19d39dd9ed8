#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metrics_oracle.hpp"
#include "mpcseg/config.hpp"
#include "mpcseg/gradcheck.hpp"
#include "mpcseg/kernels.hpp"
#include "mpcseg/pipeline.hpp"

namespace mpcseg {
namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

ExperimentConfig longtail_experiment(SceneSpec& scene) {
  const auto rc = load_run_config(std::filesystem::path(MPCSEG_SOURCE_DIR) / "tools/configs/longtail.json");
  scene = *rc.scene;
  ExperimentConfig ex = rc.experiment;
  ex.network.bands = scene.bands();
  ex.network.classes = scene.classes.size();
  return ex;
}

const std::vector<std::uint64_t> kSeeds{0, 1, 2};

Outcome gradient_suite() {
  GradSuiteOptions opts;
  opts.points = 64;
  opts.base_channels = 2;
  opts.classes = 3;
  opts.max_entries_per_input = 48;
  opts.eps = 1e-5;
  const auto t0 = Clock::now();
  const auto entries = run_gradient_suite(kSeeds, opts);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::set<std::string> components;
  for (const auto& e : entries) {
    worst = std::max(worst, e.report.max_rel_error);
    components.insert(e.component);
  }
  const bool ok = worst <= 1e-3 && components.size() == 6 && entries.size() == 18 && secs < 120.0;
  return {ok, std::to_string(components.size()) + " components x 3 seeds, max_rel_error=" + fmt(worst) +
                  ", " + fmt(secs) + " s"};
}

Outcome sampling_invariants() {
  const auto t0 = Clock::now();
  SceneSpec spec;
  spec.classes = {{"ground", 30000, 8.0, {0.3, 0.25, 0.2}},
                  {"vegetation", 12000, 4.0, {0.2, 0.45, 0.3}},
                  {"building", 6000, 3.0, {0.55, 0.5, 0.45}},
                  {"car", 1500, 1.0, {0.7, 0.2, 0.25}},
                  {"pole", 500, 0.5, {0.4, 0.35, 0.6}}};
  spec.label_rate = 0.3;
  spec.extent = 60.0;
  spec.seed = 11;
  const auto cloud = generate_synthetic_scene(spec);
  SamplingConfig cfg;
  cfg.k = 128;
  const auto plan = plan_grid_balanced(cloud, cfg);

  bool ok = cloud.size() == 50000;
  std::vector<std::size_t> labeled(5, 0), train(5, 0);
  std::size_t n_train = 0;
  for (const auto& c : plan.selection.centroids) {
    if (c.majority_label != kUnlabeled) ++labeled[static_cast<std::size_t>(c.majority_label)];
    if (c.role == Role::kTrain) {
      ++n_train;
      if (c.majority_label == kUnlabeled) ok = false;
      else ++train[static_cast<std::size_t>(c.majority_label)];
    }
  }
  for (std::size_t c = 0; c < 5; ++c) {
    const std::size_t want =
        labeled[c] == 0 ? 0 : std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.05 * double(labeled[c]))));
    ok = ok && train[c] == want;
  }
  ok = ok && plan.train.samples.size() == n_train;

  std::vector<std::size_t> seen(cloud.size(), 0);
  for (std::size_t cell = 0; cell < plan.grid.num_cells(); ++cell) {
    for (std::size_t i : plan.grid.members[cell]) {
      ++seen[i];
      ok = ok && plan.grid.cell_of_point[i] == cell && cell_key(cloud.positions[i], plan.grid.cell_size) == plan.grid.keys[cell];
    }
  }
  for (std::size_t s : seen) ok = ok && s == 1;

  std::vector<Point3> subset(cloud.positions.begin(), cloud.positions.begin() + 2000);
  const KnnIndex index(subset, plan.grid.cell_size);
  std::size_t mismatches = 0;
  for (std::size_t q = 0; q < subset.size(); q += 10) {
    if (index.query(subset[q], 16) != kernels::serial::knn_brute(subset, subset[q], 16)) ++mismatches;
  }
  const double secs = seconds_since(t0);
  ok = ok && mismatches == 0 && secs < 60.0;
  return {ok, std::to_string(plan.grid.num_cells()) + " cells, " + std::to_string(n_train) +
                  " TRAIN centroids, knn mismatches=" + std::to_string(mismatches) + ", " + fmt(secs) + " s"};
}

Outcome loss_fixtures() {
  const double ln3 = std::log(3.0);
  double worst = 0.0;
  auto check = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };
  Tape t;

  // Scale loss on one level: softmax rows (1/4, 3/4), (1/2, 1/2), (3/4, 1/4),
  // gated by (1, 3) and renormalized to (1/10, 9/10), (1/4, 3/4), (1/2, 1/2).
  const Var z = scale_probabilities(t.constant(Matrix::from_rows({{0, ln3}, {0, 0}, {ln3, 0}, {0, 5}})),
                                    t.constant(Matrix::from_rows({{1, 3}})));
  ClassWeights w;
  w.w = {0.25, 0.75};
  const std::vector<int> labels{1, 0, 0, kUnlabeled};
  const Var level = scale_level_loss(z, labels, w);
  const double level_want = 0.75 * std::log2(10.0 / 9.0) + 0.25 * 2.0 + 0.25 * 1.0;
  check(level.item(), level_want);
  const std::vector<Var> levels(4, level);
  const std::vector<Var> omegas(4, t.constant(Matrix::from_rows({{1, 3}})));
  check(combine_scale_losses(levels, omegas).item(), level_want * 1.328125 / std::sqrt(10.0));

  // Closed form with unit omegas and unit per-level losses.
  const std::vector<Var> ones(4, t.constant(Matrix::from_rows({{1.0}})));
  const std::vector<Var> unit(4, t.constant(Matrix::from_rows({{0.6, 0.8}})));
  const double closed = combine_scale_losses(ones, unit).item();
  check(closed, 1.328125);

  // Dual-head tail loss: head 1 errors 5/16 per row, head 2 errors 1/8 and
  // 82/64 with the head-class row's target zeroed.
  const std::array<Var, 2> logits{t.constant(Matrix::from_rows({{0, ln3}, {ln3, 0}, {0, 0}, {1, 2}})),
                                  t.constant(Matrix::from_rows({{0, 0}, {0, ln3}, {0, 0}, {2, 1}}))};
  const std::array<Var, 2> tail_omegas{t.constant(Matrix::from_rows({{1, 2}})),
                                       t.constant(Matrix::from_rows({{0.5, 1.5}}))};
  const std::vector<int> tail_labels{1, 0, kUnlabeled, kUnlabeled};
  const auto tl = longtail_loss_from_logits(logits, tail_omegas, tail_labels, TailSet{{false, true}});
  check(tl.head_losses[0].item(), 5.0 / 16.0);
  check(tl.head_losses[1].item(), 45.0 / 64.0);
  check(tl.total.item(), (5.0 / 16.0) / std::sqrt(5.0) + (45.0 / 64.0) / std::sqrt(2.5));
  check(tl.z_tail.value()(0, 1), 2.25);

  const Var s = t.constant(Matrix::from_rows({{0.5}})), tail = t.constant(Matrix::from_rows({{0.25}}));
  const bool exact = hybrid_loss(s, tail, 10.0).item() == 5.25 && hybrid_loss(s, tail, 0.0).item() == 0.25;
  const bool ok = worst <= 1e-12 && closed == 1.328125 && exact;
  return {ok, "max abs error=" + fmt(worst) + ", closed form=" + fmt(closed) + (exact ? ", hybrid exact" : ", hybrid inexact")};
}

Outcome metrics_oracle() {
  const TailSet tail{{false, false, false, true, true}};
  double worst = 0.0;
  bool nan_ok = true;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto pairs = oracle::random_pairs(5, seed);
    const auto want = oracle::compute(pairs, 5, tail.is_tail);
    ConfusionMatrix cm(5);
    cm.accumulate(pairs.truth, pairs.pred);
    const auto got = compute_report(cm, tail);
    const std::pair<double, double> cmp[] = {{got.oa, want.oa},           {got.aa, want.aa},
                                             {got.kappa, want.kappa},     {got.miou, want.miou},
                                             {got.head_avg, want.head_avg}, {got.tail_avg, want.tail_avg},
                                             {got.head_min, want.head_min}, {got.tail_min, want.tail_min}};
    for (const auto& [g, w] : cmp) {
      if (std::isnan(w) || std::isnan(g)) nan_ok = nan_ok && std::isnan(w) && std::isnan(g);
      else worst = std::max(worst, std::abs(g - w));
    }
  }
  const std::vector<int> truth{0, 1, 2, 3, 4, 0, 1}, constant(4, 0), balanced{0, 0, 1, 1};
  ConfusionMatrix perfect(5), chance(2);
  perfect.accumulate(truth, truth);
  chance.accumulate(balanced, constant);
  const auto p = compute_report(perfect, tail);
  const auto c = compute_report(chance, TailSet{{false, false}});
  const bool fixtures = p.oa == 1.0 && p.aa == 1.0 && p.kappa == 1.0 && p.miou == 1.0 && c.kappa == 0.0;
  return {worst <= 1e-12 && nan_ok && fixtures,
          "100 matrices, max abs error=" + fmt(worst) + ", perfect OA=" + fmt(p.oa) + ", chance kappa=" + fmt(c.kappa)};
}

Outcome overfit() {
  const auto t0 = Clock::now();
  SceneSpec spec;
  spec.classes = {{"a", 600, 2.0, {0.2, 0.3, 0.4}}, {"b", 500, 1.5, {0.5, 0.3, 0.2}}, {"c", 400, 1.0, {0.3, 0.6, 0.3}}};
  spec.label_rate = 1.0;
  spec.extent = 6.0;
  spec.seed = 0;
  const auto cloud = generate_synthetic_scene(spec);
  const SampleSet set = random_sampling_baseline(cloud, 2, 512, 0);
  NetworkConfig nc;
  nc.base_channels = 4;
  nc.receptive_field = 512;
  nc.knn_neighbors = 8;
  const auto inputs = prepare_samples(cloud, set, nc.knn_neighbors);
  TrainConfig tc;
  tc.epochs = 100;
  tc.batch_size = 1;
  tc.learning_rate = 0.01;
  tc.lr_decay = 0.98;
  tc.optimizer = Optimizer::kAdam;
  const auto result = train(cloud, inputs, nc, tc);
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Matrix scores =
        sample_scores(result.model, inputs[i], draw_sampling(inputs[i].positions.size(), forward_seed(99, 0, i)));
    const auto pred = predict(scores);
    for (std::size_t r = 0; r < pred.size(); ++r) {
      if (inputs[i].labels[r] == kUnlabeled) continue;
      ++total;
      correct += pred[r] == inputs[i].labels[r];
    }
  }
  const double oa = total ? double(correct) / double(total) : 0.0;
  const double secs = seconds_since(t0);
  return {oa >= 0.9 && secs < 300.0, "train OA=" + fmt(oa) + ", final loss=" +
                                         fmt(result.log.epochs.back().total_loss) + ", " + fmt(secs) + " s"};
}

struct Experiment {
  MultispectralPointCloud cloud;
  ExperimentConfig ex;
};

const Experiment& longtail() {
  static const Experiment e = [] {
    SceneSpec scene;
    Experiment out;
    out.ex = longtail_experiment(scene);
    out.cloud = generate_synthetic_scene(scene);
    return out;
  }();
  return e;
}

std::size_t row_index(const AblationTable& t, const std::string& name) {
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    if (t.rows[i].name == name) return i;
  }
  throw std::runtime_error("missing ablation row " + name);
}

AblationTable first_ablation;
double first_ablation_seconds = 0.0;

Outcome directional_ablation() {
  const auto t0 = Clock::now();
  first_ablation = ablate(longtail().cloud, longtail().ex, kSeeds);
  first_ablation_seconds = seconds_since(t0);
  std::cout << ablation_csv(first_ablation);
  const auto& base = first_ablation.rows[row_index(first_ablation, "baseline")];
  const auto& full = first_ablation.rows[row_index(first_ablation, "full")];
  const double oa_b = base.mean[0], oa_f = full.mean[0], tail_b = base.mean[5], tail_f = full.mean[5];
  const bool ok = oa_f > oa_b && tail_f > tail_b && first_ablation_seconds < 1800.0;
  return {ok, "OA full=" + fmt(oa_f) + " baseline=" + fmt(oa_b) + ", tail_avg full=" + fmt(tail_f) +
                  " baseline=" + fmt(tail_b) + ", " + fmt(first_ablation_seconds) + " s"};
}

Outcome sampling_direction() {
  const auto t0 = Clock::now();
  const auto cmp = compare_sampling(longtail().cloud, longtail().ex, kSeeds);
  std::cout << sampling_comparison_csv(cmp);
  const double rs = cmp.table[0][0], gbs = cmp.table[0][1];
  return {gbs >= rs, "OA GBS=" + fmt(gbs) + " RS=" + fmt(rs) + ", " + fmt(seconds_since(t0)) + " s"};
}

void append_bits(std::vector<std::uint64_t>& out, double v) { out.push_back(std::bit_cast<std::uint64_t>(v)); }

std::vector<std::uint64_t> fingerprint(const AblationTable& t) {
  std::vector<std::uint64_t> out;
  for (const auto& row : t.rows) {
    for (const auto* vec : {&row.mean, &row.stdev, &row.delta}) {
      for (double v : *vec) append_bits(out, v);
    }
    for (const auto& run : row.runs) {
      const auto& r = run.report;
      for (double v : {r.oa, r.aa, r.kappa, r.miou, r.head_avg, r.tail_avg, r.head_min, r.tail_min}) append_bits(out, v);
      for (double v : r.per_class_acc) append_bits(out, v);
      for (double v : r.per_class_iou) append_bits(out, v);
      for (const auto& e : run.log.epochs) {
        for (double v : {e.scale_loss, e.tail_loss, e.total_loss, e.learning_rate}) append_bits(out, v);
      }
      out.push_back(run.train_samples);
      out.push_back(run.uncovered_points);
      out.push_back(r.total);
    }
  }
  return out;
}

Outcome determinism() {
  if (first_ablation.rows.empty()) directional_ablation();
  const auto t0 = Clock::now();
  const AblationTable again = ablate(longtail().cloud, longtail().ex, kSeeds);
  const auto a = fingerprint(first_ablation), b = fingerprint(again);
  std::size_t diffs = a.size() == b.size() ? 0 : std::max(a.size(), b.size());
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) diffs += a[i] != b[i];
  return {diffs == 0, std::to_string(a.size()) + " values compared, " + std::to_string(diffs) +
                          " differ, " + fmt(seconds_since(t0)) + " s"};
}

}  // namespace
}  // namespace mpcseg

int main(int argc, char** argv) {
  using namespace mpcseg;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"sampling invariants", sampling_invariants},
      {"loss fixtures", loss_fixtures},
      {"metrics oracle", metrics_oracle},
      {"overfit smoke test", overfit},
      {"directional ablation", directional_ablation},
      {"sampling comparison", sampling_direction},
      {"determinism", determinism},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));

  std::vector<std::string> lines;
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::ostringstream line;
    line << (o.pass ? "PASS" : "FAIL") << " [" << (i + 1) << "] " << criteria[i].first << ": " << o.detail;
    lines.push_back(line.str());
    std::cout << lines.back() << std::endl;
  }
  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l << "\n";
  return all ? 0 : 1;
}
