#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpcseg/pointcloud.hpp"

namespace mpcseg {

using CellKey = std::array<std::int64_t, 3>;

/// Partition of a cloud into axis-aligned cubic cells.
struct GridIndex {
  double cell_size = 0.0;
  std::vector<CellKey> keys;                       // sorted ascending
  std::vector<std::vector<std::size_t>> members;   // point indices, ascending
  std::vector<std::size_t> cell_of_point;

  std::size_t num_cells() const { return keys.size(); }
  std::optional<std::size_t> find(const CellKey& key) const;
};

CellKey cell_key(const Point3& p, double cell_size);

/// Throws ValidationError unless cell_size > 0.
GridIndex build_grid(const MultispectralPointCloud& cloud, double cell_size);

/// cell_size = extent * (k / (16 N))^(1/3), extent the longest bounding-box
/// side, so that a k-point sample spans roughly 16 cells.
double default_cell_size(const MultispectralPointCloud& cloud, std::size_t k);

enum class Role { kTrain, kTest };

struct Centroid {
  std::size_t cell = 0;
  Point3 position{};
  int majority_label = kUnlabeled;
  Role role = Role::kTest;
};

/// Modal label of a label multiset. UNLABELED competes as a category; ties
/// go to the smallest class id and UNLABELED loses every tie.
int majority_label(std::span<const int> labels, std::size_t num_classes);

/// One centroid (mean position, majority label) per non-empty cell.
std::vector<Centroid> sparsify(const GridIndex& grid, const MultispectralPointCloud& cloud);

struct CentroidSelection {
  std::vector<Centroid> centroids;
  std::vector<std::size_t> labeled_per_class;  // m_c
  std::vector<std::size_t> train_per_class;
  std::vector<int> unsampled_classes;
  std::vector<std::string> warnings;
};

/// Category-balanced selection: per class, max(1, round(ratio * m_c)) of its
/// labeled centroids become TRAIN. Everything else, including all
/// UNLABELED-majority centroids, becomes TEST.
CentroidSelection select_training_centroids(std::vector<Centroid> centroids,
                                            std::size_t num_classes, double ratio,
                                            std::uint64_t seed);

struct Sample {
  std::size_t centroid = 0;
  Point3 center{};
  std::vector<std::size_t> indices;  // ordered by distance to center
  bool padded = false;
};

struct SampleSet {
  std::size_t k = 0;
  Role role = Role::kTrain;
  std::vector<Sample> samples;
};

/// Grid-accelerated exact k-NN over a cloud (expanding-ring search with a
/// brute-force fallback). Results are ordered by (distance, index).
class KnnIndex {
 public:
  explicit KnnIndex(std::span<const Point3> points, double cell_size = 0.0);

  std::vector<std::size_t> query(const Point3& q, std::size_t k) const;

 private:
  std::span<const Point3> points_;
  double cell_size_;
  std::vector<CellKey> keys_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> order_;
  CellKey lo_{};
  CellKey hi_{};

  const std::size_t* cell_begin(const CellKey& key, std::size_t* count) const;
};

/// k nearest cloud points of every centroid with the given role. When the
/// cloud has fewer than k points, samples repeat their nearest points
/// cyclically and are flagged as padded.
SampleSet extract_samples(const MultispectralPointCloud& cloud,
                          std::span<const Centroid> centroids, std::size_t k, Role role);

/// n_samples centroids drawn uniformly (with replacement) from the cloud
/// points, each expanded to its k nearest points.
SampleSet random_sampling_baseline(const MultispectralPointCloud& cloud, std::size_t n_samples,
                                   std::size_t k, std::uint64_t seed);

/// 1 for points whose cell centroid is TEST, 0 for TRAIN-region points.
std::vector<std::uint8_t> assign_eval_mask(const GridIndex& grid,
                                           std::span<const Centroid> centroids);

enum class SamplingStrategy { kGridBalanced, kRandom };

SamplingStrategy parse_sampling_strategy(const std::string& name);

struct SamplingConfig {
  std::optional<double> cell_size;
  double train_ratio = 0.05;
  std::size_t k = 4096;
  std::uint64_t seed = 0;
  SamplingStrategy strategy = SamplingStrategy::kGridBalanced;
};

/// Everything the grid-balanced strategy produces for one cloud.
struct SamplingPlan {
  GridIndex grid;
  CentroidSelection selection;
  SampleSet train;
  SampleSet test;
  std::vector<std::uint8_t> eval_mask;
  std::size_t eval_points = 0;
};

SamplingPlan plan_grid_balanced(const MultispectralPointCloud& cloud, const SamplingConfig& config);

/// JSON manifest: centroid roles, per-class counts and the EVAL point count.
std::string sampling_manifest_json(const SamplingPlan& plan, const MultispectralPointCloud& cloud,
                                   const SamplingConfig& config);

}  // namespace mpcseg
