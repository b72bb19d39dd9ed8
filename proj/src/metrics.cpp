#include "mpcseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace mpcseg {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

}  // namespace

void ConfusionMatrix::add(int truth, int prediction) {
  if (truth < 0 || prediction < 0 || static_cast<std::size_t>(truth) >= num_classes_ ||
      static_cast<std::size_t>(prediction) >= num_classes_) {
    throw std::invalid_argument("ConfusionMatrix::add: class id out of range");
  }
  ++counts_[static_cast<std::size_t>(truth) * num_classes_ + static_cast<std::size_t>(prediction)];
  ++total_;
}

void ConfusionMatrix::accumulate(std::span<const int> truths, std::span<const int> predictions,
                                 std::span<const std::uint8_t> eval_mask) {
  if (truths.size() != predictions.size() || (!eval_mask.empty() && eval_mask.size() != truths.size())) {
    throw std::invalid_argument("ConfusionMatrix::accumulate: length mismatch");
  }
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (truths[i] == kUnlabeled) continue;
    if (!eval_mask.empty() && eval_mask[i] == 0) continue;
    add(truths[i], predictions[i]);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes_ != num_classes_) {
    throw std::invalid_argument("ConfusionMatrix::merge: class count mismatch");
  }
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  total_ += other.total_;
}

MetricsReport compute_report(const ConfusionMatrix& cm, const TailSet& tail) {
  if (cm.total() == 0) throw std::invalid_argument("compute_report: empty confusion matrix");
  const std::size_t n = cm.num_classes();
  const double total = static_cast<double>(cm.total());
  MetricsReport r;
  r.total = cm.total();
  r.tail_classes = tail.classes();
  r.per_class_acc.assign(n, kNaN);
  r.per_class_iou.assign(n, kNaN);

  std::vector<double> row_sum(n, 0.0), col_sum(n, 0.0);
  double trace = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t p = 0; p < n; ++p) {
      const double v = static_cast<double>(cm(t, p));
      row_sum[t] += v;
      col_sum[p] += v;
    }
    trace += static_cast<double>(cm(t, t));
  }
  r.oa = trace / total;

  double pe = 0.0;
  for (std::size_t c = 0; c < n; ++c) pe += (row_sum[c] / total) * (col_sum[c] / total);
  r.kappa = pe < 1.0 ? (r.oa - pe) / (1.0 - pe) : 1.0;

  double acc_sum = 0.0, iou_sum = 0.0;
  std::size_t present = 0;
  double head_sum = 0.0, tail_sum = 0.0;
  std::size_t head_n = 0, tail_n = 0;
  r.head_min = r.tail_min = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < n; ++c) {
    if (row_sum[c] == 0.0) {
      r.absent_classes.push_back(static_cast<int>(c));
      continue;
    }
    const double tp = static_cast<double>(cm(c, c));
    const double acc = tp / row_sum[c];
    const double iou = tp / (row_sum[c] + col_sum[c] - tp);
    r.per_class_acc[c] = acc;
    r.per_class_iou[c] = iou;
    acc_sum += acc;
    iou_sum += iou;
    ++present;
    if (tail.contains(c)) {
      tail_sum += acc;
      ++tail_n;
      r.tail_min = std::min(r.tail_min, acc);
    } else {
      head_sum += acc;
      ++head_n;
      r.head_min = std::min(r.head_min, acc);
    }
  }
  r.aa = acc_sum / static_cast<double>(present);
  r.miou = iou_sum / static_cast<double>(present);
  r.head_avg = head_n ? head_sum / static_cast<double>(head_n) : kNaN;
  r.tail_avg = tail_n ? tail_sum / static_cast<double>(tail_n) : kNaN;
  if (!head_n) r.head_min = kNaN;
  if (!tail_n) r.tail_min = kNaN;
  return r;
}

std::string report_json(const MetricsReport& report, std::span<const std::string> class_names) {
  nlohmann::json j;
  auto& classes = j["classes"];
  classes = nlohmann::json::array();
  for (std::size_t c = 0; c < report.per_class_acc.size(); ++c) {
    classes.push_back({{"id", c},
                       {"name", c < class_names.size() ? class_names[c] : "class_" + std::to_string(c)},
                       {"accuracy", number_or_null(report.per_class_acc[c])},
                       {"iou", number_or_null(report.per_class_iou[c])},
                       {"tail", std::find(report.tail_classes.begin(), report.tail_classes.end(),
                                          static_cast<int>(c)) != report.tail_classes.end()}});
  }
  j["oa"] = report.oa;
  j["aa"] = report.aa;
  j["kappa"] = report.kappa;
  j["miou"] = report.miou;
  j["head_avg"] = number_or_null(report.head_avg);
  j["tail_avg"] = number_or_null(report.tail_avg);
  j["head_min"] = number_or_null(report.head_min);
  j["tail_min"] = number_or_null(report.tail_min);
  j["absent_classes"] = report.absent_classes;
  j["total"] = report.total;
  return j.dump(2);
}

std::string report_csv(const MetricsReport& report, std::span<const std::string> class_names) {
  std::ostringstream head, row;
  row.precision(10);
  for (std::size_t c = 0; c < report.per_class_acc.size(); ++c) {
    head << (c < class_names.size() ? class_names[c] : "class_" + std::to_string(c)) << ",";
    if (std::isfinite(report.per_class_acc[c])) row << report.per_class_acc[c];
    row << ",";
  }
  head << "OA,AA,kappa,mIoU,head_avg,tail_avg,head_min,tail_min\n";
  row << report.oa << "," << report.aa << "," << report.kappa << "," << report.miou;
  for (double v : {report.head_avg, report.tail_avg, report.head_min, report.tail_min}) {
    row << ",";
    if (std::isfinite(v)) row << v;
  }
  row << "\n";
  return head.str() + row.str();
}

}  // namespace mpcseg
