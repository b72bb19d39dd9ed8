#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mpcseg/loss.hpp"
#include "mpcseg/metrics.hpp"
#include "mpcseg/network.hpp"
#include "mpcseg/pointcloud.hpp"
#include "mpcseg/sampling.hpp"

namespace mpcseg {

enum class Optimizer { kSgd, kAdam };
Optimizer parse_optimizer(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double learning_rate = 0.005;
  double lr_decay = 0.95;  // multiplier per epoch
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;  // shuffling and encoder downsampling
  Optimizer optimizer = Optimizer::kSgd;
  /// Rescales the batch gradient to this global L2 norm when larger; 0 = off.
  double grad_clip = 0.0;
  ModelToggles toggles;
  LossConfig loss;

  void validate() const;
};

/// learning_rate * lr_decay^epoch.
double learning_rate_at(const TrainConfig& config, std::size_t epoch);

struct EpochLog {
  std::size_t epoch = 0;
  double scale_loss = 0.0;  // mean L^scale per sample (0 without MSL)
  double tail_loss = 0.0;   // mean final-head loss: L^tail, or cross entropy without LTL
  double total_loss = 0.0;
  double learning_rate = 0.0;
  double seconds = 0.0;
};

struct RunLog {
  std::vector<EpochLog> epochs;
  std::size_t clamp_events = 0;
  std::size_t omega_rescales = 0;
};

/// Raised when a training step produces a non-finite loss.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A trained network plus the data-derived state evaluation needs.
struct TrainedModel {
  NetworkParams params;
  TailSet tail;
  ClassWeights weights;
};

struct TrainResult {
  TrainedModel model;
  RunLog log;
};

std::vector<SampleInput> prepare_samples(const MultispectralPointCloud& cloud, const SampleSet& set,
                                         std::size_t knn_neighbors);

/// Labeled-point counts per class over the sample entries (with
/// multiplicity, since that is what the network trains on).
std::vector<std::size_t> training_histogram(std::span<const SampleInput> samples,
                                            std::size_t num_classes);

/// Seed of the encoder downsampling for one (epoch, sample) pair.
std::uint64_t forward_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample);

/// Loss terms of one sample under the model's toggles.
struct SampleLoss {
  Var total;
  Var scale;   // invalid without MSL
  Var final;   // L^tail, or the single-head cross entropy
  Var scores;  // N x L prediction scores (Z^tail or softmax)
};

SampleLoss sample_loss(Binding& bind, const TrainedModel& model, const SampleInput& input,
                       const Sampling& sampling, double lambda);

/// Prediction scores of one sample without recording gradients.
Matrix sample_scores(const TrainedModel& model, const SampleInput& input, const Sampling& sampling);

/// SGD (or Adam) with decoupled weight decay on weight matrices; adaptive
/// weights are kept above a minimum norm. Deterministic for fixed seeds.
TrainResult train(const MultispectralPointCloud& cloud, std::span<const SampleInput> train_samples,
                  const NetworkConfig& net_config, const TrainConfig& config);

/// Continues from existing parameters (tail set and class weights are
/// recomputed from the samples).
TrainResult train_from(NetworkParams params, std::span<const SampleInput> train_samples,
                       const TrainConfig& config);

/// Per-point score sums over overlapping samples.
class PredictionAccumulator {
 public:
  PredictionAccumulator(std::size_t num_points, std::size_t num_classes)
      : num_classes_(num_classes), sums_(num_points * num_classes, 0.0), counts_(num_points, 0) {}

  void add(std::span<const std::size_t> point_index, const Matrix& scores);
  void merge(const PredictionAccumulator& other);

  /// Averaged score rows; uncovered points get kUnlabeled predictions.
  std::vector<int> predictions() const;
  std::size_t covered(std::size_t point) const { return counts_[point]; }
  std::size_t num_points() const { return counts_.size(); }

 private:
  std::size_t num_classes_;
  std::vector<double> sums_;
  std::vector<std::uint32_t> counts_;
};

struct EvalOptions {
  std::size_t shards = 1;
  std::uint64_t seed = 0;
};

struct EvalResult {
  MetricsReport report;
  ConfusionMatrix confusion;
  std::size_t eval_points = 0;       // labeled EVAL points
  std::size_t uncovered_points = 0;  // labeled EVAL points no TEST sample reached
};

PredictionAccumulator predict_samples(const TrainedModel& model, std::span<const SampleInput> samples,
                                      std::size_t num_points, const EvalOptions& options);

/// Metrics over labeled EVAL points; points in several TEST samples use
/// the average of their score rows. Throws if the mask selects nothing.
EvalResult evaluate(const MultispectralPointCloud& cloud, std::span<const SampleInput> test_samples,
                    const TrainedModel& model, std::span<const std::uint8_t> eval_mask,
                    const EvalOptions& options = {});

/// Everything needed to run one train/evaluate cycle.
struct ExperimentConfig {
  SamplingConfig sampling;
  NetworkConfig network;
  TrainConfig train;
};

struct RunOutcome {
  MetricsReport report;
  RunLog log;
  std::size_t train_samples = 0;
  std::size_t uncovered_points = 0;
  double seconds = 0.0;
};

struct NamedToggles {
  std::string name;
  ModelToggles toggles;
};

/// Baseline, +MSFF, +MSL, +LTL, +AHL and the full model.
std::vector<NamedToggles> ablation_configs();

inline const std::vector<std::string> kReportMetrics = {"OA",       "AA",       "kappa",    "mIoU",
                                                        "head_avg", "tail_avg", "head_min", "tail_min"};

/// Value of one of kReportMetrics.
double metric_value(const MetricsReport& report, const std::string& name);

struct AblationRow {
  std::string name;
  ModelToggles toggles;
  std::vector<RunOutcome> runs;  // one per seed
  std::vector<double> mean;      // per kReportMetrics
  std::vector<double> stdev;
  std::vector<double> delta;     // mean - baseline mean
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;
};

/// Runs every configuration over every seed on one grid-balanced plan per
/// seed. The seed drives sampling, weight init and training.
AblationTable ablate(const MultispectralPointCloud& cloud, const ExperimentConfig& base,
                     std::span<const std::uint64_t> seeds,
                     const std::vector<NamedToggles>& configs = ablation_configs());

std::string ablation_csv(const AblationTable& table);
std::string ablation_json(const AblationTable& table);

enum class SweepParameter { kReceptiveField, kWeightTruncation, kLambda };
SweepParameter parse_sweep_parameter(const std::string& name);

/// Full model over a list of values of one hyperparameter; one row per value.
AblationTable sweep(const MultispectralPointCloud& cloud, const ExperimentConfig& base,
                    SweepParameter parameter, std::span<const double> values,
                    std::span<const std::uint64_t> seeds);

struct SamplingComparison {
  std::vector<std::uint64_t> seeds;
  std::vector<RunOutcome> rs;
  std::vector<RunOutcome> gbs;
  std::vector<std::size_t> sample_counts;  // per seed, shared by both strategies
  /// rows OA, AA, kappa, mIoU, Time; columns RS, GBS (means over seeds)
  std::array<std::array<double, 2>, 5> table{};
};

/// Trains identical networks on grid-balanced and random sample sets of
/// equal size and evaluates both on the grid-balanced TEST samples and EVAL
/// mask.
SamplingComparison compare_sampling(const MultispectralPointCloud& cloud, const ExperimentConfig& base,
                                    std::span<const std::uint64_t> seeds);

std::string sampling_comparison_csv(const SamplingComparison& cmp);
std::string sampling_comparison_json(const SamplingComparison& cmp);

std::string run_log_csv(const RunLog& log);

/// Binary model file with a versioned header.
void save_model(const TrainedModel& model, const std::filesystem::path& path);
TrainedModel load_model(const std::filesystem::path& path);

}  // namespace mpcseg
