#include "mpcseg/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>
#include <omp.h>

namespace mpcseg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Evaluation uses its own stream of encoder downsampling seeds.
constexpr std::uint64_t kEvalEpoch = std::numeric_limits<std::uint64_t>::max();

std::vector<ParamId> omega_ids(const NetworkParams& p) {
  std::vector<ParamId> ids;
  for (const auto& h : p.scale_heads) ids.push_back(h.omega);
  if (p.tail) ids.insert(ids.end(), p.tail->omegas.begin(), p.tail->omegas.end());
  return ids;
}

nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

std::string csv_number(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream s;
  s.precision(10);
  s << v;
  return s.str();
}

}  // namespace

Optimizer parse_optimizer(const std::string& name) {
  if (name == "sgd") return Optimizer::kSgd;
  if (name == "adam") return Optimizer::kAdam;
  throw ValidationError("optimizer: expected 'sgd' or 'adam', got '" + name + "'");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ValidationError("batch_size: must be > 0");
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate: must be > 0");
  if (!(lr_decay > 0.0)) throw ValidationError("lr_decay: must be > 0");
  if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay: must be >= 0");
  if (!(grad_clip >= 0.0)) throw ValidationError("grad_clip: must be >= 0");
  if (!(loss.lambda >= 0.0)) throw ValidationError("lambda: must be >= 0");
  if (!(loss.tail_threshold >= 0.0 && loss.tail_threshold <= 1.0)) {
    throw ValidationError("tail_threshold: must lie in [0, 1]");
  }
  if (!(loss.weight_truncation >= 0.0 && loss.weight_truncation <= 1.0)) {
    throw ValidationError("weight_truncation: must lie in [0, 1]");
  }
}

double learning_rate_at(const TrainConfig& config, std::size_t epoch) {
  return config.learning_rate * std::pow(config.lr_decay, static_cast<double>(epoch));
}

std::vector<SampleInput> prepare_samples(const MultispectralPointCloud& cloud, const SampleSet& set,
                                         std::size_t knn_neighbors) {
  std::vector<SampleInput> out(set.samples.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < set.samples.size(); ++i) {
    out[i] = prepare_sample(cloud, set.samples[i].indices, knn_neighbors);
  }
  return out;
}

std::vector<std::size_t> training_histogram(std::span<const SampleInput> samples,
                                            std::size_t num_classes) {
  std::vector<std::size_t> hist(num_classes, 0);
  for (const auto& s : samples) {
    for (int l : s.labels) {
      if (l != kUnlabeled) ++hist.at(static_cast<std::size_t>(l));
    }
  }
  return hist;
}

std::uint64_t forward_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample) {
  return splitmix(splitmix(splitmix(seed) ^ epoch) ^ sample);
}

SampleLoss sample_loss(Binding& bind, const TrainedModel& model, const SampleInput& input,
                       const Sampling& sampling, double lambda) {
  const NetworkParams& p = model.params;
  const ForwardResult fr = forward(bind, p, input, sampling);
  const Var& f5 = fr.decoder[kLevels - 1];
  SampleLoss out;
  if (p.toggles.ltl) {
    TailLoss t = longtail_loss(bind, p, f5, input.labels, model.tail);
    out.final = t.total;
    out.scores = t.z_tail;
  } else {
    CeHeadLoss c = ce_head_loss(bind, p, f5, input.labels, model.weights);
    out.final = c.total;
    out.scores = c.probabilities;
  }
  if (p.toggles.msl) {
    const auto level_labels = downsample_labels(input.labels, fr.encoder);
    ScaleLoss s = multiscale_loss(bind, p, fr.decoder, level_labels, model.weights);
    out.scale = s.total;
    out.total = hybrid_loss(s.total, out.final, lambda);
  } else {
    out.total = out.final;
  }
  return out;
}

Matrix sample_scores(const TrainedModel& model, const SampleInput& input, const Sampling& sampling) {
  Tape tape;
  Binding bind(tape, model.params.store, false);
  const NetworkParams& p = model.params;
  const ForwardResult fr = forward(bind, p, input, sampling);
  const Var& f5 = fr.decoder[kLevels - 1];
  if (p.toggles.ltl) {
    std::array<Var, 2> gated;
    for (std::size_t i = 0; i < 2; ++i) {
      gated[i] = mul_broadcast(softmax_rows(dense(bind, p.tail->classifiers[i], f5, false)),
                               bind(p.tail->omegas[i]));
    }
    return add(gated[0], gated[1]).value();
  }
  return softmax_rows(dense(bind, *p.ce_head, f5, false)).value();
}

TrainResult train(const MultispectralPointCloud& cloud, std::span<const SampleInput> train_samples,
                  const NetworkConfig& net_config, const TrainConfig& config) {
  NetworkConfig nc = net_config;
  nc.bands = cloud.bands;
  nc.classes = cloud.num_classes();
  return train_from(init_network(nc, config.toggles), train_samples, config);
}

TrainResult train_from(NetworkParams params, std::span<const SampleInput> train_samples,
                       const TrainConfig& config) {
  config.validate();
  if (train_samples.empty()) throw ValidationError("train: no TRAIN samples");
  const std::size_t num_classes = params.config.classes;
  const auto hist = training_histogram(train_samples, num_classes);
  if (std::accumulate(hist.begin(), hist.end(), std::size_t{0}) == 0) {
    throw ValidationError("train: TRAIN samples contain no labeled points");
  }

  TrainResult result;
  TrainedModel& model = result.model;
  model.tail = determine_tail(hist, config.loss.tail_threshold);
  model.weights = config.loss.class_weighting
                      ? compute_class_weights(hist, config.loss.weight_truncation)
                      : ClassWeights::uniform(num_classes);
  model.params = std::move(params);
  ParameterStore& store = model.params.store;
  const auto omegas = omega_ids(model.params);

  const std::size_t n = train_samples.size();
  const std::size_t chunk = static_cast<std::size_t>(std::max(1, omp_get_max_threads()));
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(n);
  std::vector<Matrix> adam_m, adam_v;
  if (config.optimizer == Optimizer::kAdam) {
    for (const auto& p : store.all()) {
      adam_m.emplace_back(p.value.rows, p.value.cols);
      adam_v.emplace_back(p.value.rows, p.value.cols);
    }
  }
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = Clock::now();
    const double lr = learning_rate_at(config, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    log.learning_rate = lr;

    for (std::size_t b = 0; b < n; b += config.batch_size) {
      const std::size_t m = std::min(config.batch_size, n - b);
      std::vector<Matrix> grads(store.size());
      for (std::size_t c0 = 0; c0 < m; c0 += chunk) {
        const std::size_t cm = std::min(chunk, m - c0);
        std::vector<std::unique_ptr<Tape>> tapes(cm);
        std::vector<std::unique_ptr<Binding>> bindings(cm);
        std::vector<std::array<double, 3>> losses(cm);
        std::vector<std::exception_ptr> errors(cm);
#pragma omp parallel for schedule(dynamic)
        for (std::size_t j = 0; j < cm; ++j) {
          try {
            const std::size_t idx = order[b + c0 + j];
            const SampleInput& input = train_samples[idx];
            tapes[j] = std::make_unique<Tape>();
            bindings[j] = std::make_unique<Binding>(*tapes[j], store);
            const Sampling sampling =
                draw_sampling(input.positions.size(), forward_seed(config.seed, epoch, idx));
            const SampleLoss sl = sample_loss(*bindings[j], model, input, sampling, config.loss.lambda);
            losses[j] = {sl.scale.valid() ? sl.scale.item() : 0.0, sl.final.item(), sl.total.item()};
            tapes[j]->backward(sl.total);
          } catch (...) {
            errors[j] = std::current_exception();
          }
        }
        // Reduction in member order keeps results independent of the thread count.
        for (std::size_t j = 0; j < cm; ++j) {
          if (errors[j]) std::rethrow_exception(errors[j]);
          if (!std::isfinite(losses[j][0]) || !std::isfinite(losses[j][1]) || !std::isfinite(losses[j][2])) {
            std::ostringstream msg;
            msg << "non-finite loss at epoch " << epoch << ", sample " << order[b + c0 + j]
                << ": L^scale=" << losses[j][0] << " final=" << losses[j][1] << " L=" << losses[j][2]
                << ", lr=" << lr;
            throw TrainingError(msg.str());
          }
          log.scale_loss += losses[j][0];
          log.tail_loss += losses[j][1];
          log.total_loss += losses[j][2];
          result.log.clamp_events += tapes[j]->clamp_events();
          bindings[j]->accumulate_grads(grads);
          bindings[j].reset();
          tapes[j].reset();
        }
      }
      double clip = 1.0;
      if (config.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& g : grads) {
          for (double v : g.data) sq += v * v;
        }
        const double norm = std::sqrt(sq);
        if (norm > config.grad_clip) clip = config.grad_clip / norm;
      }
      ++step;
      for (std::size_t id = 0; id < store.size(); ++id) {
        if (grads[id].data.empty()) continue;
        Parameter& p = store[id];
        const double wd = p.decay ? config.weight_decay : 0.0;
        if (config.optimizer == Optimizer::kSgd) {
          for (std::size_t e = 0; e < p.value.data.size(); ++e) {
            p.value.data[e] -= lr * (clip * grads[id].data[e] + wd * p.value.data[e]);
          }
          continue;
        }
        constexpr double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
        auto& m = adam_m[id].data;
        auto& v = adam_v[id].data;
        for (std::size_t e = 0; e < p.value.data.size(); ++e) {
          const double g = clip * grads[id].data[e];
          m[e] = b1 * m[e] + (1.0 - b1) * g;
          v[e] = b2 * v[e] + (1.0 - b2) * g * g;
          p.value.data[e] -= lr * ((m[e] / c1) / (std::sqrt(v[e] / c2) + adam_eps) + wd * p.value.data[e]);
        }
      }
      for (ParamId id : omegas) {
        if (guard_omega_norm(store[id].value)) ++result.log.omega_rescales;
      }
    }
    const double dn = static_cast<double>(n);
    log.scale_loss /= dn;
    log.tail_loss /= dn;
    log.total_loss /= dn;
    log.seconds = seconds_since(t0);
    result.log.epochs.push_back(log);
  }
  return result;
}

void PredictionAccumulator::add(std::span<const std::size_t> point_index, const Matrix& scores) {
  if (scores.rows != point_index.size() || scores.cols != num_classes_) {
    throw std::invalid_argument("PredictionAccumulator::add: shape mismatch");
  }
  for (std::size_t r = 0; r < scores.rows; ++r) {
    const std::size_t p = point_index[r];
    double* dst = sums_.data() + p * num_classes_;
    const auto row = scores.row(r);
    for (std::size_t c = 0; c < num_classes_; ++c) dst[c] += row[c];
    ++counts_[p];
  }
}

void PredictionAccumulator::merge(const PredictionAccumulator& other) {
  if (other.sums_.size() != sums_.size()) {
    throw std::invalid_argument("PredictionAccumulator::merge: size mismatch");
  }
  for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i] += other.sums_[i];
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::vector<int> PredictionAccumulator::predictions() const {
  std::vector<int> out(counts_.size(), kUnlabeled);
  Matrix row(1, num_classes_);
  for (std::size_t p = 0; p < counts_.size(); ++p) {
    if (counts_[p] == 0) continue;
    for (std::size_t c = 0; c < num_classes_; ++c) {
      row.data[c] = sums_[p * num_classes_ + c] / static_cast<double>(counts_[p]);
    }
    out[p] = predict(row)[0];
  }
  return out;
}

PredictionAccumulator predict_samples(const TrainedModel& model, std::span<const SampleInput> samples,
                                      std::size_t num_points, const EvalOptions& options) {
  const std::size_t num_classes = model.params.config.classes;
  std::vector<Matrix> scores(samples.size());
  std::vector<std::exception_ptr> errors(samples.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < samples.size(); ++i) {
    try {
      const Sampling sampling =
          draw_sampling(samples[i].positions.size(), forward_seed(options.seed, kEvalEpoch, i));
      scores[i] = sample_scores(model, samples[i], sampling);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  const std::size_t shards = std::clamp<std::size_t>(options.shards, 1, std::max<std::size_t>(1, samples.size()));
  PredictionAccumulator total(num_points, num_classes);
  for (std::size_t s = 0; s < shards; ++s) {
    const std::size_t lo = samples.size() * s / shards;
    const std::size_t hi = samples.size() * (s + 1) / shards;
    PredictionAccumulator part(num_points, num_classes);
    for (std::size_t i = lo; i < hi; ++i) part.add(samples[i].point_index, scores[i]);
    total.merge(part);
  }
  return total;
}

EvalResult evaluate(const MultispectralPointCloud& cloud, std::span<const SampleInput> test_samples,
                    const TrainedModel& model, std::span<const std::uint8_t> eval_mask,
                    const EvalOptions& options) {
  if (eval_mask.size() != cloud.size()) throw ValidationError("eval_mask: length must equal N");
  const PredictionAccumulator acc = predict_samples(model, test_samples, cloud.size(), options);
  const std::vector<int> pred = acc.predictions();
  EvalResult r;
  r.confusion = ConfusionMatrix(cloud.num_classes());
  for (std::size_t p = 0; p < cloud.size(); ++p) {
    if (!eval_mask[p] || cloud.labels[p] == kUnlabeled) continue;
    ++r.eval_points;
    if (acc.covered(p) == 0) {
      ++r.uncovered_points;
      continue;
    }
    r.confusion.add(cloud.labels[p], pred[p]);
  }
  if (r.confusion.total() == 0) throw ValidationError("evaluate: no labeled EVAL point was predicted");
  r.report = compute_report(r.confusion, model.tail);
  return r;
}

std::vector<NamedToggles> ablation_configs() {
  return {{"baseline", {false, false, false}}, {"+MSFF", {true, false, false}},
          {"+MSL", {false, true, false}},      {"+LTL", {false, false, true}},
          {"+AHL", {false, true, true}},       {"full", {true, true, true}}};
}

double metric_value(const MetricsReport& report, const std::string& name) {
  if (name == "OA") return report.oa;
  if (name == "AA") return report.aa;
  if (name == "kappa") return report.kappa;
  if (name == "mIoU") return report.miou;
  if (name == "head_avg") return report.head_avg;
  if (name == "tail_avg") return report.tail_avg;
  if (name == "head_min") return report.head_min;
  if (name == "tail_min") return report.tail_min;
  throw std::invalid_argument("unknown metric " + name);
}

namespace {

struct PreparedPlan {
  SamplingPlan plan;
  std::vector<SampleInput> train;
  std::vector<SampleInput> test;
};

PreparedPlan prepare_plan(const MultispectralPointCloud& cloud, const ExperimentConfig& ex) {
  PreparedPlan pp;
  pp.plan = plan_grid_balanced(cloud, ex.sampling);
  pp.train = prepare_samples(cloud, pp.plan.train, ex.network.knn_neighbors);
  pp.test = prepare_samples(cloud, pp.plan.test, ex.network.knn_neighbors);
  return pp;
}

ExperimentConfig seeded(const ExperimentConfig& base, std::uint64_t seed) {
  ExperimentConfig ex = base;
  ex.sampling.seed = seed;
  ex.network.seed = seed;
  ex.train.seed = seed;
  ex.network.receptive_field = ex.sampling.k;
  return ex;
}

RunOutcome run_one(const MultispectralPointCloud& cloud, std::span<const SampleInput> train_inputs,
                   std::span<const SampleInput> test_inputs, std::span<const std::uint8_t> eval_mask,
                   const ExperimentConfig& ex) {
  const auto t0 = Clock::now();
  TrainResult tr = train(cloud, train_inputs, ex.network, ex.train);
  const EvalResult er = evaluate(cloud, test_inputs, tr.model, eval_mask, {1, ex.train.seed});
  RunOutcome out;
  out.report = er.report;
  out.log = std::move(tr.log);
  out.train_samples = train_inputs.size();
  out.uncovered_points = er.uncovered_points;
  out.seconds = seconds_since(t0);
  return out;
}

void summarize(AblationRow& row) {
  const std::size_t n = row.runs.size();
  row.mean.assign(kReportMetrics.size(), 0.0);
  row.stdev.assign(kReportMetrics.size(), 0.0);
  for (std::size_t m = 0; m < kReportMetrics.size(); ++m) {
    double s = 0.0;
    for (const auto& r : row.runs) s += metric_value(r.report, kReportMetrics[m]);
    const double mean = s / static_cast<double>(n);
    double ss = 0.0;
    for (const auto& r : row.runs) {
      const double d = metric_value(r.report, kReportMetrics[m]) - mean;
      ss += d * d;
    }
    row.mean[m] = mean;
    row.stdev[m] = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
  }
}

void fill_deltas(AblationTable& table) {
  if (table.rows.empty()) return;
  const auto base = table.rows.front().mean;
  for (auto& row : table.rows) {
    row.delta.resize(base.size());
    for (std::size_t m = 0; m < base.size(); ++m) row.delta[m] = row.mean[m] - base[m];
  }
}

}  // namespace

AblationTable ablate(const MultispectralPointCloud& cloud, const ExperimentConfig& base,
                     std::span<const std::uint64_t> seeds, const std::vector<NamedToggles>& configs) {
  if (seeds.empty()) throw ValidationError("seeds: need at least one");
  AblationTable table;
  table.seeds.assign(seeds.begin(), seeds.end());
  for (const auto& c : configs) table.rows.push_back({c.name, c.toggles, {}, {}, {}, {}});
  for (std::uint64_t seed : seeds) {
    ExperimentConfig ex = seeded(base, seed);
    const PreparedPlan pp = prepare_plan(cloud, ex);
    for (auto& row : table.rows) {
      ex.train.toggles = row.toggles;
      row.runs.push_back(run_one(cloud, pp.train, pp.test, pp.plan.eval_mask, ex));
    }
  }
  for (auto& row : table.rows) summarize(row);
  fill_deltas(table);
  return table;
}

std::string ablation_csv(const AblationTable& table) {
  std::ostringstream s;
  s << "config";
  for (const auto& m : kReportMetrics) s << "," << m << "_mean," << m << "_std";
  s << "\n";
  for (const auto& row : table.rows) {
    s << row.name;
    for (std::size_t m = 0; m < kReportMetrics.size(); ++m) {
      s << "," << csv_number(row.mean[m]) << "," << csv_number(row.stdev[m]);
    }
    s << "\n";
  }
  for (std::size_t r = 1; r < table.rows.size(); ++r) {
    s << "delta " << table.rows[r].name;
    for (std::size_t m = 0; m < kReportMetrics.size(); ++m) s << "," << csv_number(table.rows[r].delta[m]) << ",";
    s << "\n";
  }
  return s.str();
}

std::string ablation_json(const AblationTable& table) {
  nlohmann::json j;
  j["seeds"] = table.seeds;
  j["metrics"] = kReportMetrics;
  j["rows"] = nlohmann::json::array();
  for (const auto& row : table.rows) {
    nlohmann::json r;
    r["config"] = row.name;
    r["msff"] = row.toggles.msff;
    r["msl"] = row.toggles.msl;
    r["ltl"] = row.toggles.ltl;
    for (std::size_t m = 0; m < kReportMetrics.size(); ++m) {
      r["mean"][kReportMetrics[m]] = number_or_null(row.mean[m]);
      r["std"][kReportMetrics[m]] = number_or_null(row.stdev[m]);
      r["delta"][kReportMetrics[m]] = number_or_null(row.delta[m]);
    }
    r["runs"] = nlohmann::json::array();
    for (std::size_t i = 0; i < row.runs.size(); ++i) {
      nlohmann::json run;
      run["seed"] = table.seeds[i % table.seeds.size()];
      for (const auto& m : kReportMetrics) run[m] = number_or_null(metric_value(row.runs[i].report, m));
      run["uncovered_points"] = row.runs[i].uncovered_points;
      run["seconds"] = row.runs[i].seconds;
      r["runs"].push_back(run);
    }
    j["rows"].push_back(r);
  }
  return j.dump(2);
}

SweepParameter parse_sweep_parameter(const std::string& name) {
  if (name == "receptive_field") return SweepParameter::kReceptiveField;
  if (name == "weight_truncation") return SweepParameter::kWeightTruncation;
  if (name == "lambda") return SweepParameter::kLambda;
  throw ValidationError("sweep: expected receptive_field, weight_truncation or lambda, got '" + name + "'");
}

AblationTable sweep(const MultispectralPointCloud& cloud, const ExperimentConfig& base,
                    SweepParameter parameter, std::span<const double> values,
                    std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw ValidationError("seeds: need at least one");
  AblationTable table;
  table.seeds.assign(seeds.begin(), seeds.end());
  const char* names[] = {"receptive_field", "weight_truncation", "lambda"};
  for (double v : values) {
    AblationRow row;
    std::ostringstream name;
    name << names[static_cast<int>(parameter)] << "=" << v;
    row.name = name.str();
    row.toggles = {true, true, true};
    for (std::uint64_t seed : seeds) {
      ExperimentConfig ex = base;
      switch (parameter) {
        case SweepParameter::kReceptiveField:
          if (!(v >= 1.0)) throw ValidationError("receptive_field: must be >= 1");
          ex.sampling.k = static_cast<std::size_t>(std::llround(v));
          break;
        case SweepParameter::kWeightTruncation:
          ex.train.loss.weight_truncation = v;
          break;
        case SweepParameter::kLambda:
          ex.train.loss.lambda = v;
          break;
      }
      ex = seeded(ex, seed);
      ex.train.toggles = row.toggles;
      const PreparedPlan pp = prepare_plan(cloud, ex);
      row.runs.push_back(run_one(cloud, pp.train, pp.test, pp.plan.eval_mask, ex));
    }
    summarize(row);
    table.rows.push_back(std::move(row));
  }
  fill_deltas(table);
  return table;
}

SamplingComparison compare_sampling(const MultispectralPointCloud& cloud, const ExperimentConfig& base,
                                    std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw ValidationError("seeds: need at least one");
  SamplingComparison cmp;
  cmp.seeds.assign(seeds.begin(), seeds.end());
  for (std::uint64_t seed : seeds) {
    ExperimentConfig ex = seeded(base, seed);
    ex.train.toggles = {true, true, true};
    const PreparedPlan pp = prepare_plan(cloud, ex);
    const SampleSet rs_set =
        random_sampling_baseline(cloud, pp.plan.train.samples.size(), ex.sampling.k, seed);
    const auto rs_train = prepare_samples(cloud, rs_set, ex.network.knn_neighbors);
    cmp.sample_counts.push_back(rs_set.samples.size());
    cmp.rs.push_back(run_one(cloud, rs_train, pp.test, pp.plan.eval_mask, ex));
    cmp.gbs.push_back(run_one(cloud, pp.train, pp.test, pp.plan.eval_mask, ex));
  }
  const double n = static_cast<double>(seeds.size());
  for (std::size_t col = 0; col < 2; ++col) {
    const auto& runs = col == 0 ? cmp.rs : cmp.gbs;
    for (const auto& r : runs) {
      cmp.table[0][col] += r.report.oa / n;
      cmp.table[1][col] += r.report.aa / n;
      cmp.table[2][col] += r.report.kappa / n;
      cmp.table[3][col] += r.report.miou / n;
      cmp.table[4][col] += r.seconds / n;
    }
  }
  return cmp;
}

std::string sampling_comparison_csv(const SamplingComparison& cmp) {
  static const char* rows[] = {"OA", "AA", "kappa", "mIoU", "Time"};
  std::ostringstream s;
  s << "metric,RS,GBS\n";
  for (std::size_t r = 0; r < 5; ++r) {
    s << rows[r] << "," << csv_number(cmp.table[r][0]) << "," << csv_number(cmp.table[r][1]) << "\n";
  }
  return s.str();
}

std::string sampling_comparison_json(const SamplingComparison& cmp) {
  static const char* rows[] = {"OA", "AA", "kappa", "mIoU", "Time"};
  nlohmann::json j;
  j["seeds"] = cmp.seeds;
  j["sample_counts"] = cmp.sample_counts;
  for (std::size_t r = 0; r < 5; ++r) {
    j["RS"][rows[r]] = number_or_null(cmp.table[r][0]);
    j["GBS"][rows[r]] = number_or_null(cmp.table[r][1]);
  }
  j["runs"] = nlohmann::json::array();
  for (std::size_t i = 0; i < cmp.seeds.size(); ++i) {
    j["runs"].push_back({{"seed", cmp.seeds[i]},
                         {"RS_OA", cmp.rs[i].report.oa},
                         {"GBS_OA", cmp.gbs[i].report.oa},
                         {"RS_seconds", cmp.rs[i].seconds},
                         {"GBS_seconds", cmp.gbs[i].seconds}});
  }
  return j.dump(2);
}

std::string run_log_csv(const RunLog& log) {
  std::ostringstream s;
  s.precision(12);
  s << "epoch,scale_loss,tail_loss,total_loss,learning_rate,seconds\n";
  for (const auto& e : log.epochs) {
    s << e.epoch << "," << e.scale_loss << "," << e.tail_loss << "," << e.total_loss << ","
      << e.learning_rate << "," << e.seconds << "\n";
  }
  return s.str();
}

// ---- model files --------------------------------------------------------------

namespace {

constexpr char kModelMagic[8] = {'M', 'P', 'C', 'S', 'E', 'G', 'M', '\0'};
constexpr std::uint32_t kModelVersion = 1;

template <typename T>
void write_le(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "model files assume a little-endian host");
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ValidationError("model file: truncated");
  return v;
}

}  // namespace

void save_model(const TrainedModel& model, const std::filesystem::path& path) {
  const NetworkParams& p = model.params;
  nlohmann::json h;
  h["network"] = {{"base_channels", p.config.base_channels},
                  {"receptive_field", p.config.receptive_field},
                  {"bands", p.config.bands},
                  {"classes", p.config.classes},
                  {"knn_neighbors", p.config.knn_neighbors},
                  {"head_hidden", p.config.head_hidden},
                  {"seed", p.config.seed}};
  h["toggles"] = {{"msff", p.toggles.msff}, {"msl", p.toggles.msl}, {"ltl", p.toggles.ltl}};
  std::vector<bool> tail(model.tail.is_tail.begin(), model.tail.is_tail.end());
  h["tail"] = tail;
  h["class_weights"] = model.weights.w;
  h["weight_truncation"] = model.weights.truncation;
  h["parameters"] = nlohmann::json::array();
  for (const auto& param : p.store.all()) {
    h["parameters"].push_back({param.name, param.value.rows, param.value.cols});
  }
  const std::string header = h.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kModelMagic, sizeof kModelMagic);
  write_le<std::uint32_t>(out, kModelVersion);
  write_le<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& param : p.store.all()) {
    for (double v : param.value.data) write_le<double>(out, v);
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

TrainedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[sizeof kModelMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kModelMagic, sizeof magic) != 0) {
    throw ValidationError("model file: bad magic");
  }
  const auto version = read_le<std::uint32_t>(in);
  if (version != kModelVersion) {
    throw ValidationError("model file: unsupported version " + std::to_string(version));
  }
  const auto header_len = read_le<std::uint64_t>(in);
  if (header_len > (1u << 26)) throw ValidationError("model file: header too large");
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ValidationError("model file: truncated");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
    NetworkConfig nc;
    const auto& n = h.at("network");
    nc.base_channels = n.at("base_channels").get<std::size_t>();
    nc.receptive_field = n.at("receptive_field").get<std::size_t>();
    nc.bands = n.at("bands").get<std::size_t>();
    nc.classes = n.at("classes").get<std::size_t>();
    nc.knn_neighbors = n.at("knn_neighbors").get<std::size_t>();
    nc.head_hidden = n.at("head_hidden").get<std::size_t>();
    nc.seed = n.at("seed").get<std::uint64_t>();
    ModelToggles t;
    t.msff = h.at("toggles").at("msff").get<bool>();
    t.msl = h.at("toggles").at("msl").get<bool>();
    t.ltl = h.at("toggles").at("ltl").get<bool>();

    TrainedModel model;
    model.params = init_network(nc, t);
    const auto tail = h.at("tail").get<std::vector<bool>>();
    model.tail.is_tail.assign(tail.begin(), tail.end());
    model.weights.w = h.at("class_weights").get<std::vector<double>>();
    model.weights.truncation = h.at("weight_truncation").get<double>();
    if (model.tail.is_tail.size() != nc.classes || model.weights.w.size() != nc.classes) {
      throw ValidationError("model file: class count mismatch");
    }
    const auto& list = h.at("parameters");
    auto& params = model.params.store.all();
    if (list.size() != params.size()) throw ValidationError("model file: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (list[i].at(0).get<std::string>() != params[i].name ||
          list[i].at(1).get<std::size_t>() != params[i].value.rows ||
          list[i].at(2).get<std::size_t>() != params[i].value.cols) {
        throw ValidationError("model file: parameter layout mismatch at " + params[i].name);
      }
      for (double& v : params[i].value.data) v = read_le<double>(in);
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model file: bad header: ") + e.what());
  }
}

}  // namespace mpcseg
