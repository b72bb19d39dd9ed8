#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mpcseg/loss.hpp"

namespace mpcseg {

/// L x L counts, rows = truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes = 0)
      : num_classes_(num_classes), counts_(num_classes * num_classes, 0) {}

  void add(int truth, int prediction);
  /// Adds every labeled point whose eval_mask entry is nonzero. An empty
  /// mask means "all points".
  void accumulate(std::span<const int> truths, std::span<const int> predictions,
                  std::span<const std::uint8_t> eval_mask = {});
  /// Element-wise sum; shards merge commutatively.
  void merge(const ConfusionMatrix& other);

  std::uint64_t operator()(std::size_t truth, std::size_t prediction) const {
    return counts_[truth * num_classes_ + prediction];
  }
  std::size_t num_classes() const { return num_classes_; }
  std::uint64_t total() const { return total_; }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t num_classes_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

/// Summary statistics of a confusion matrix. Classes without any truth
/// points are excluded from AA, mIoU and the head/tail statistics and
/// listed in `absent_classes`; their per-class entries are NaN. Head/tail
/// statistics over an empty partition are NaN.
struct MetricsReport {
  double oa = 0.0;
  double aa = 0.0;
  double kappa = 0.0;
  double miou = 0.0;
  std::vector<double> per_class_acc;
  std::vector<double> per_class_iou;
  double head_avg = 0.0;
  double tail_avg = 0.0;
  double head_min = 0.0;
  double tail_min = 0.0;
  std::vector<int> absent_classes;
  std::vector<int> tail_classes;
  std::uint64_t total = 0;
};

/// Throws std::invalid_argument on an empty matrix.
MetricsReport compute_report(const ConfusionMatrix& cm, const TailSet& tail);

std::string report_json(const MetricsReport& report, std::span<const std::string> class_names);
/// Header plus one row: per-class accuracies, OA, AA, kappa, mIoU, then
/// head/tail avg and min.
std::string report_csv(const MetricsReport& report, std::span<const std::string> class_names);

}  // namespace mpcseg
