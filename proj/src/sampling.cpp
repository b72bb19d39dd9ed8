#include "mpcseg/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "mpcseg/kernels.hpp"

namespace mpcseg {

namespace {

double longest_side(std::span<const Point3> points) {
  Point3 lo = points.front(), hi = points.front();
  for (const auto& p : points) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  }
  return std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
}

Sample make_sample(std::size_t centroid, const Point3& center, std::vector<std::size_t> nearest,
                   std::size_t k) {
  Sample s;
  s.centroid = centroid;
  s.center = center;
  if (nearest.size() < k && !nearest.empty()) {
    s.padded = true;
    const std::size_t have = nearest.size();
    nearest.reserve(k);
    for (std::size_t i = have; i < k; ++i) nearest.push_back(nearest[i % have]);
  }
  s.indices = std::move(nearest);
  return s;
}

const char* role_name(Role r) { return r == Role::kTrain ? "train" : "test"; }

}  // namespace

CellKey cell_key(const Point3& p, double cell_size) {
  return {static_cast<std::int64_t>(std::floor(p[0] / cell_size)),
          static_cast<std::int64_t>(std::floor(p[1] / cell_size)),
          static_cast<std::int64_t>(std::floor(p[2] / cell_size))};
}

std::optional<std::size_t> GridIndex::find(const CellKey& key) const {
  auto it = std::lower_bound(keys.begin(), keys.end(), key);
  if (it == keys.end() || *it != key) return std::nullopt;
  return static_cast<std::size_t>(it - keys.begin());
}

GridIndex build_grid(const MultispectralPointCloud& cloud, double cell_size) {
  if (!(cell_size > 0.0) || !std::isfinite(cell_size)) {
    throw ValidationError("cell_size: must be a positive finite length");
  }
  std::map<CellKey, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    cells[cell_key(cloud.positions[i], cell_size)].push_back(i);
  }
  GridIndex grid;
  grid.cell_size = cell_size;
  grid.cell_of_point.resize(cloud.size());
  grid.keys.reserve(cells.size());
  grid.members.reserve(cells.size());
  for (auto& [key, idx] : cells) {
    for (std::size_t i : idx) grid.cell_of_point[i] = grid.keys.size();
    grid.keys.push_back(key);
    grid.members.push_back(std::move(idx));
  }
  return grid;
}

double default_cell_size(const MultispectralPointCloud& cloud, std::size_t k) {
  if (cloud.size() == 0) throw ValidationError("cloud: empty");
  const double extent = std::max(longest_side(cloud.positions), 1e-9);
  return extent * std::cbrt(static_cast<double>(k) / (16.0 * static_cast<double>(cloud.size())));
}

int majority_label(std::span<const int> labels, std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes + 1, 0);
  for (int l : labels) {
    counts[l == kUnlabeled ? num_classes : static_cast<std::size_t>(l)]++;
  }
  // Labeled classes first in ascending id, UNLABELED last: the first strict
  // maximum implements both tie rules.
  std::size_t best = 0;
  for (std::size_t c = 1; c <= num_classes; ++c) {
    if (counts[c] > counts[best]) best = c;
  }
  return best == num_classes ? kUnlabeled : static_cast<int>(best);
}

std::vector<Centroid> sparsify(const GridIndex& grid, const MultispectralPointCloud& cloud) {
  std::vector<Centroid> out;
  out.reserve(grid.num_cells());
  std::vector<int> labels;
  for (std::size_t c = 0; c < grid.num_cells(); ++c) {
    Centroid ct;
    ct.cell = c;
    Point3 sum{0.0, 0.0, 0.0};
    labels.clear();
    for (std::size_t i : grid.members[c]) {
      for (int a = 0; a < 3; ++a) sum[a] += cloud.positions[i][a];
      labels.push_back(cloud.labels[i]);
    }
    const double n = static_cast<double>(grid.members[c].size());
    for (int a = 0; a < 3; ++a) ct.position[a] = sum[a] / n;
    ct.majority_label = majority_label(labels, cloud.num_classes());
    ct.role = Role::kTest;
    out.push_back(ct);
  }
  return out;
}

CentroidSelection select_training_centroids(std::vector<Centroid> centroids,
                                            std::size_t num_classes, double ratio,
                                            std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ValidationError("train_ratio: must lie in (0, 1)");
  CentroidSelection sel;
  sel.labeled_per_class.assign(num_classes, 0);
  sel.train_per_class.assign(num_classes, 0);
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    centroids[i].role = Role::kTest;
    const int l = centroids[i].majority_label;
    if (l != kUnlabeled) by_class[static_cast<std::size_t>(l)].push_back(i);
  }
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& pool = by_class[c];
    sel.labeled_per_class[c] = pool.size();
    if (pool.empty()) {
      sel.unsampled_classes.push_back(static_cast<int>(c));
      sel.warnings.push_back("class " + std::to_string(c) +
                             " has no labeled centroids and is unsampled");
      continue;
    }
    const auto want = std::max<long>(1, std::lround(ratio * static_cast<double>(pool.size())));
    const auto take = std::min(static_cast<std::size_t>(want), pool.size());
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t j = 0; j < take; ++j) centroids[pool[j]].role = Role::kTrain;
    sel.train_per_class[c] = take;
  }
  sel.centroids = std::move(centroids);
  return sel;
}

KnnIndex::KnnIndex(std::span<const Point3> points, double cell_size) : points_(points) {
  if (points.empty()) throw ValidationError("points: k-NN index needs at least one point");
  if (cell_size <= 0.0) {
    // About 32 points per occupied cell for a volume-filling cloud.
    const double extent = std::max(longest_side(points), 1e-9);
    cell_size = extent * std::cbrt(32.0 / static_cast<double>(points.size()));
  }
  cell_size_ = cell_size;
  std::vector<std::pair<CellKey, std::size_t>> tagged(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) tagged[i] = {cell_key(points[i], cell_size_), i};
  std::sort(tagged.begin(), tagged.end());
  lo_ = tagged.front().first;
  hi_ = tagged.front().first;
  order_.resize(points.size());
  for (std::size_t i = 0; i < tagged.size(); ++i) {
    const auto& key = tagged[i].first;
    for (int a = 0; a < 3; ++a) {
      lo_[a] = std::min(lo_[a], key[a]);
      hi_[a] = std::max(hi_[a], key[a]);
    }
    if (keys_.empty() || keys_.back() != key) {
      keys_.push_back(key);
      offsets_.push_back(i);
    }
    order_[i] = tagged[i].second;
  }
  offsets_.push_back(points.size());
}

const std::size_t* KnnIndex::cell_begin(const CellKey& key, std::size_t* count) const {
  auto it = std::lower_bound(keys_.begin(), keys_.end(), key);
  if (it == keys_.end() || *it != key) {
    *count = 0;
    return nullptr;
  }
  const auto c = static_cast<std::size_t>(it - keys_.begin());
  *count = offsets_[c + 1] - offsets_[c];
  return order_.data() + offsets_[c];
}

std::vector<std::size_t> KnnIndex::query(const Point3& q, std::size_t k) const {
  const std::size_t n = points_.size();
  if (k >= n) return kernels::serial::knn_brute(points_, q, k);

  const CellKey qk = cell_key(q, cell_size_);
  std::int64_t max_ring = 0;
  for (int a = 0; a < 3; ++a) {
    max_ring = std::max({max_ring, qk[a] - lo_[a], hi_[a] - qk[a]});
  }
  std::vector<std::pair<double, std::size_t>> cand;
  auto visit = [&](const CellKey& key) {
    for (int a = 0; a < 3; ++a) {
      if (key[a] < lo_[a] || key[a] > hi_[a]) return;
    }
    std::size_t count = 0;
    const std::size_t* idx = cell_begin(key, &count);
    for (std::size_t j = 0; j < count; ++j) {
      cand.emplace_back(kernels::squared_distance(points_[idx[j]], q), idx[j]);
    }
  };

  for (std::int64_t r = 0; r <= max_ring; ++r) {
    for (std::int64_t dx = -r; dx <= r; ++dx) {
      for (std::int64_t dy = -r; dy <= r; ++dy) {
        const bool edge = std::abs(dx) == r || std::abs(dy) == r;
        if (edge) {
          for (std::int64_t dz = -r; dz <= r; ++dz) visit({qk[0] + dx, qk[1] + dy, qk[2] + dz});
        } else {
          visit({qk[0] + dx, qk[1] + dy, qk[2] - r});
          if (r > 0) visit({qk[0] + dx, qk[1] + dy, qk[2] + r});
        }
      }
    }
    if (cand.size() >= k) {
      auto kth = cand.begin() + static_cast<std::ptrdiff_t>(k - 1);
      std::nth_element(cand.begin(), kth, cand.end());
      // Unvisited points lie at least r * cell_size away.
      const double bound = static_cast<double>(r) * cell_size_;
      if (kth->first < bound * bound) break;
    }
  }
  const std::size_t m = std::min(k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(m), cand.end());
  std::vector<std::size_t> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = cand[i].second;
  return out;
}

SampleSet extract_samples(const MultispectralPointCloud& cloud, std::span<const Centroid> centroids,
                          std::size_t k, Role role) {
  if (k == 0) throw ValidationError("k: must be >= 1");
  SampleSet set;
  set.k = k;
  set.role = role;
  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    if (centroids[i].role == role) chosen.push_back(i);
  }
  set.samples.resize(chosen.size());
  const KnnIndex index(cloud.positions);
  const auto m = static_cast<long long>(chosen.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (long long j = 0; j < m; ++j) {
    const auto& ct = centroids[chosen[static_cast<std::size_t>(j)]];
    set.samples[static_cast<std::size_t>(j)] =
        make_sample(chosen[static_cast<std::size_t>(j)], ct.position, index.query(ct.position, k), k);
  }
  return set;
}

SampleSet random_sampling_baseline(const MultispectralPointCloud& cloud, std::size_t n_samples,
                                   std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ValidationError("k: must be >= 1");
  SampleSet set;
  set.k = k;
  set.role = Role::kTrain;
  if (n_samples == 0) return set;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, cloud.size() - 1);
  std::vector<std::size_t> centers(n_samples);
  for (auto& c : centers) c = pick(rng);
  set.samples.resize(n_samples);
  const KnnIndex index(cloud.positions);
  const auto m = static_cast<long long>(n_samples);
#pragma omp parallel for schedule(dynamic, 4)
  for (long long j = 0; j < m; ++j) {
    const auto& p = cloud.positions[centers[static_cast<std::size_t>(j)]];
    set.samples[static_cast<std::size_t>(j)] =
        make_sample(centers[static_cast<std::size_t>(j)], p, index.query(p, k), k);
  }
  return set;
}

std::vector<std::uint8_t> assign_eval_mask(const GridIndex& grid,
                                           std::span<const Centroid> centroids) {
  std::vector<Role> cell_role(grid.num_cells(), Role::kTest);
  for (const auto& c : centroids) cell_role[c.cell] = c.role;
  std::vector<std::uint8_t> mask(grid.cell_of_point.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = cell_role[grid.cell_of_point[i]] == Role::kTest ? 1 : 0;
  }
  return mask;
}

SamplingStrategy parse_sampling_strategy(const std::string& name) {
  if (name == "gbs") return SamplingStrategy::kGridBalanced;
  if (name == "rs") return SamplingStrategy::kRandom;
  throw ValidationError("strategy: expected 'gbs' or 'rs', got '" + name + "'");
}

SamplingPlan plan_grid_balanced(const MultispectralPointCloud& cloud, const SamplingConfig& config) {
  SamplingPlan plan;
  const double h = config.cell_size.value_or(default_cell_size(cloud, config.k));
  plan.grid = build_grid(cloud, h);
  plan.selection = select_training_centroids(sparsify(plan.grid, cloud), cloud.num_classes(),
                                             config.train_ratio, config.seed);
  plan.train = extract_samples(cloud, plan.selection.centroids, config.k, Role::kTrain);
  plan.test = extract_samples(cloud, plan.selection.centroids, config.k, Role::kTest);
  plan.eval_mask = assign_eval_mask(plan.grid, plan.selection.centroids);
  plan.eval_points = static_cast<std::size_t>(
      std::count(plan.eval_mask.begin(), plan.eval_mask.end(), std::uint8_t{1}));
  return plan;
}

std::string sampling_manifest_json(const SamplingPlan& plan, const MultispectralPointCloud& cloud,
                                   const SamplingConfig& config) {
  nlohmann::json j;
  j["strategy"] = config.strategy == SamplingStrategy::kGridBalanced ? "gbs" : "rs";
  j["cell_size"] = plan.grid.cell_size;
  j["k"] = config.k;
  j["train_ratio"] = config.train_ratio;
  j["seed"] = config.seed;
  j["num_cells"] = plan.grid.num_cells();
  j["eval_points"] = plan.eval_points;
  j["train_samples"] = plan.train.samples.size();
  j["test_samples"] = plan.test.samples.size();
  auto& per_class = j["classes"];
  per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < cloud.num_classes(); ++c) {
    per_class.push_back({{"id", c},
                         {"name", cloud.class_names[c]},
                         {"labeled_centroids", plan.selection.labeled_per_class[c]},
                         {"train_centroids", plan.selection.train_per_class[c]}});
  }
  j["unsampled_classes"] = plan.selection.unsampled_classes;
  j["warnings"] = plan.selection.warnings;
  auto& cs = j["centroids"];
  cs = nlohmann::json::array();
  for (const auto& c : plan.selection.centroids) {
    cs.push_back({{"cell", plan.grid.keys[c.cell]},
                  {"position", c.position},
                  {"majority_label", c.majority_label},
                  {"role", role_name(c.role)}});
  }
  auto& train = j["train"];
  train = nlohmann::json::array();
  for (const auto& s : plan.train.samples) {
    train.push_back({{"centroid", s.centroid}, {"center", s.center}, {"padded", s.padded}});
  }
  return j.dump(2);
}

}  // namespace mpcseg
