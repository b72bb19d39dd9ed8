#include "mpcseg/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mpcseg {

Matrix ClassWeights::as_row() const {
  Matrix m(1, w.size());
  std::copy(w.begin(), w.end(), m.data.begin());
  return m;
}

ClassWeights ClassWeights::uniform(std::size_t num_classes) {
  ClassWeights cw;
  cw.w.assign(num_classes, 1.0 / static_cast<double>(num_classes));
  return cw;
}

ClassWeights compute_class_weights(std::span<const std::size_t> train_histogram, double truncation) {
  if (train_histogram.empty()) throw ValidationError("train_histogram: no classes");
  if (!(truncation >= 0.0 && truncation <= 1.0)) {
    throw ValidationError("weight_truncation: must lie in [0, 1]");
  }
  double total = 0.0;
  for (auto c : train_histogram) total += static_cast<double>(c);
  if (total == 0.0) throw ValidationError("train_histogram: all counts are zero");

  ClassWeights cw;
  cw.truncation = truncation;
  cw.w.assign(train_histogram.size(), 0.0);
  double max_raw = 0.0;
  for (std::size_t l = 0; l < train_histogram.size(); ++l) {
    if (train_histogram[l] == 0) continue;
    cw.w[l] = total / static_cast<double>(train_histogram[l]);
    max_raw = std::max(max_raw, cw.w[l]);
  }
  double s = 0.0;
  for (std::size_t l = 0; l < cw.w.size(); ++l) {
    if (train_histogram[l] == 0) cw.w[l] = max_raw;
    s += cw.w[l];
  }
  for (double& v : cw.w) v /= s;
  const double floor = truncation * *std::max_element(cw.w.begin(), cw.w.end());
  s = 0.0;
  for (double& v : cw.w) {
    v = std::max(v, floor);
    s += v;
  }
  for (double& v : cw.w) v /= s;
  return cw;
}

std::vector<int> TailSet::classes() const {
  std::vector<int> out;
  for (std::size_t c = 0; c < is_tail.size(); ++c) {
    if (is_tail[c]) out.push_back(static_cast<int>(c));
  }
  return out;
}

TailSet determine_tail(std::span<const std::size_t> train_histogram, double threshold) {
  double total = 0.0;
  for (auto c : train_histogram) total += static_cast<double>(c);
  TailSet t;
  t.is_tail.assign(train_histogram.size(), false);
  if (total == 0.0) return t;
  for (std::size_t c = 0; c < train_histogram.size(); ++c) {
    t.is_tail[c] = static_cast<double>(train_histogram[c]) / total < threshold;
  }
  return t;
}

Matrix one_hot(std::span<const int> labels, std::size_t num_classes) {
  Matrix y(labels.size(), num_classes);
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (labels[j] == kUnlabeled) continue;
    if (labels[j] < 0 || static_cast<std::size_t>(labels[j]) >= num_classes) {
      throw std::invalid_argument("one_hot: label out of range");
    }
    y(j, static_cast<std::size_t>(labels[j])) = 1.0;
  }
  return y;
}

std::array<std::vector<int>, kLevels - 1> downsample_labels(std::span<const int> labels,
                                                            const EncoderState& state) {
  std::array<std::vector<int>, kLevels - 1> out;
  for (std::size_t i = 0; i + 1 < kLevels; ++i) {
    const std::size_t level = kLevels - 1 - i;
    const auto& abs = state.absolute[level];
    out[i].reserve(abs.size());
    for (std::size_t a : abs) out[i].push_back(labels[a]);
  }
  return out;
}

Var scale_probabilities(const Var& logits, const Var& omega) {
  return normalize_rows(mul_broadcast(softmax_rows(logits), omega));
}

Var scale_level_loss(const Var& probabilities, std::span<const int> labels,
                     const ClassWeights& weights) {
  return cross_entropy(probabilities, one_hot(labels, probabilities.cols()), weights.as_row());
}

Var combine_scale_losses(std::span<const Var> level_losses, std::span<const Var> omegas) {
  if (level_losses.size() != omegas.size() || level_losses.empty()) {
    throw std::invalid_argument("combine_scale_losses: need one omega per level loss");
  }
  Var total;
  double factor = 1.0;
  for (std::size_t i = 0; i < level_losses.size(); ++i) {
    Var term = div_scalar(scale(level_losses[i], factor), l2_norm(omegas[i]));
    total = i == 0 ? term : add(total, term);
    factor /= static_cast<double>(kScaleFactor);
  }
  return total;
}

ScaleLoss multiscale_loss(Binding& bind, const NetworkParams& params,
                          const std::array<Var, kLevels>& decoder,
                          const std::array<std::vector<int>, kLevels - 1>& level_labels,
                          const ClassWeights& weights) {
  if (params.scale_heads.size() != kLevels - 1) {
    throw std::invalid_argument("multiscale_loss: model has no scale heads");
  }
  ScaleLoss out;
  std::array<Var, kLevels - 1> omegas;
  for (std::size_t i = 0; i + 1 < kLevels; ++i) {
    const auto& head = params.scale_heads[i];
    Var h = dense(bind, head.layers[0], decoder[i], true);
    h = dense(bind, head.layers[1], h, true);
    Var logits = dense(bind, head.layers[2], h, false);
    omegas[i] = bind(head.omega);
    out.probabilities[i] = scale_probabilities(logits, omegas[i]);
    out.level_losses[i] = scale_level_loss(out.probabilities[i], level_labels[i], weights);
  }
  out.total = combine_scale_losses(out.level_losses, omegas);
  return out;
}

Matrix tail_targets(std::span<const int> labels, const TailSet& tail, std::size_t num_classes) {
  Matrix y = one_hot(labels, num_classes);
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (labels[j] != kUnlabeled && !tail.contains(static_cast<std::size_t>(labels[j]))) {
      std::fill(y.row(j).begin(), y.row(j).end(), 0.0);
    }
  }
  return y;
}

TailLoss longtail_loss_from_logits(const std::array<Var, 2>& logits, const std::array<Var, 2>& omegas,
                                   std::span<const int> labels, const TailSet& tail) {
  const std::size_t num_classes = logits[0].cols();
  std::vector<std::size_t> labeled;
  std::vector<int> kept_labels;
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (labels[j] == kUnlabeled) continue;
    labeled.push_back(j);
    kept_labels.push_back(labels[j]);
  }
  const std::array<Matrix, 2> targets{one_hot(kept_labels, num_classes),
                                      tail_targets(kept_labels, tail, num_classes)};
  TailLoss out;
  for (std::size_t i = 0; i < 2; ++i) {
    out.gated[i] = mul_broadcast(softmax_rows(logits[i]), omegas[i]);
    out.head_losses[i] = mse(gather_rows(out.gated[i], labeled), targets[i]);
    Var term = div_scalar(out.head_losses[i], l2_norm(omegas[i]));
    out.total = i == 0 ? term : add(out.total, term);
  }
  out.z_tail = add(out.gated[0], out.gated[1]);
  return out;
}

TailLoss longtail_loss(Binding& bind, const NetworkParams& params, const Var& final_features,
                       std::span<const int> labels, const TailSet& tail) {
  if (!params.tail) throw std::invalid_argument("longtail_loss: model has no tail heads");
  std::array<Var, 2> logits;
  std::array<Var, 2> omegas;
  for (std::size_t i = 0; i < 2; ++i) {
    logits[i] = dense(bind, params.tail->classifiers[i], final_features, false);
    omegas[i] = bind(params.tail->omegas[i]);
  }
  return longtail_loss_from_logits(logits, omegas, labels, tail);
}

Var hybrid_loss(const Var& scale_loss, const Var& tail_loss, double lambda) {
  if (!(lambda >= 0.0)) throw ValidationError("lambda: must be >= 0");
  return add(scale(scale_loss, lambda), tail_loss);
}

std::vector<int> predict(const Matrix& scores) {
  std::vector<int> out(scores.rows);
  for (std::size_t r = 0; r < scores.rows; ++r) {
    const auto row = scores.row(r);
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c) {
      if (row[c] > row[best]) best = c;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

CeHeadLoss ce_head_loss(Binding& bind, const NetworkParams& params, const Var& final_features,
                        std::span<const int> labels, const ClassWeights& weights) {
  if (!params.ce_head) throw std::invalid_argument("ce_head_loss: model has no cross-entropy head");
  CeHeadLoss out;
  out.probabilities = softmax_rows(dense(bind, *params.ce_head, final_features, false));
  out.total = cross_entropy(out.probabilities, one_hot(labels, params.config.classes), weights.as_row());
  return out;
}

bool guard_omega_norm(Matrix& omega) {
  double s = 0.0;
  for (double v : omega.data) s += v * v;
  const double norm = std::sqrt(s);
  if (norm >= kOmegaMinNorm) return false;
  if (norm == 0.0) {
    const double v = kOmegaMinNorm / std::sqrt(static_cast<double>(omega.size()));
    std::fill(omega.data.begin(), omega.data.end(), v);
  } else {
    for (double& v : omega.data) v *= kOmegaMinNorm / norm;
  }
  return true;
}

}  // namespace mpcseg
