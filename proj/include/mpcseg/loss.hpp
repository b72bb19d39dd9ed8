#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "mpcseg/network.hpp"
#include "mpcseg/tensor.hpp"

namespace mpcseg {

struct LossConfig {
  double lambda = 1.0;
  double tail_threshold = 0.05;
  double weight_truncation = 0.05;
  bool class_weighting = true;
};

/// Per-class multipliers of the cross-entropy terms, summing to 1, with
/// every entry at least truncation * max.
struct ClassWeights {
  std::vector<double> w;
  double truncation = 0.05;

  Matrix as_row() const;
  static ClassWeights uniform(std::size_t num_classes);
};

/// w_l proportional to 1 / freq_l (classes with no points get the largest
/// weight), clamped from below at truncation * max(w), renormalized to sum 1.
ClassWeights compute_class_weights(std::span<const std::size_t> train_histogram, double truncation);

/// Classes whose share of labeled training points is strictly below
/// `threshold`.
struct TailSet {
  std::vector<bool> is_tail;

  bool contains(std::size_t c) const { return c < is_tail.size() && is_tail[c]; }
  std::vector<int> classes() const;
  std::size_t num_classes() const { return is_tail.size(); }
};

/// `train_histogram` has one count per class (an extra UNLABELED bin, if
/// present, must be dropped by the caller).
TailSet determine_tail(std::span<const std::size_t> train_histogram, double threshold = 0.05);

/// Row-wise one-hot encoding; UNLABELED rows are all zero.
Matrix one_hot(std::span<const int> labels, std::size_t num_classes);

/// Labels of decoder outputs F1..F4 (index 0..3): the sample labels gathered
/// through the encoder's composed kept-index chains.
std::array<std::vector<int>, kLevels - 1> downsample_labels(std::span<const int> labels,
                                                            const EncoderState& state);

/// Z^i = omega (x) softmax(logits), rows renormalized to sum 1.
Var scale_probabilities(const Var& logits, const Var& omega);

/// Class-weighted base-2 cross entropy summed over labeled rows.
Var scale_level_loss(const Var& probabilities, std::span<const int> labels,
                     const ClassWeights& weights);

/// sum_i L^i / (4^{i-1} ||omega^i||), i = 1 the coarsest level.
Var combine_scale_losses(std::span<const Var> level_losses, std::span<const Var> omegas);

struct ScaleLoss {
  Var total;
  std::array<Var, kLevels - 1> level_losses;
  std::array<Var, kLevels - 1> probabilities;
};

/// Multi-scale loss over F1..F4 (decoder[0..3]).
ScaleLoss multiscale_loss(Binding& bind, const NetworkParams& params,
                          const std::array<Var, kLevels>& decoder,
                          const std::array<std::vector<int>, kLevels - 1>& level_labels,
                          const ClassWeights& weights);

/// Targets of the second tail classifier: one-hot truth with every
/// head-class row set to zero.
Matrix tail_targets(std::span<const int> labels, const TailSet& tail, std::size_t num_classes);

struct TailLoss {
  Var total;
  Var z_tail;                     // N x L, sum of both gated heads
  std::array<Var, 2> head_losses;  // L~^1, L~^2
  std::array<Var, 2> gated;        // Z~^1, Z~^2
};

/// Long-tailed dual-head loss from per-head logits and adaptive weights.
/// Each L~^i is the mean squared error over the labeled rows.
TailLoss longtail_loss_from_logits(const std::array<Var, 2>& logits, const std::array<Var, 2>& omegas,
                                   std::span<const int> labels, const TailSet& tail);

TailLoss longtail_loss(Binding& bind, const NetworkParams& params, const Var& final_features,
                       std::span<const int> labels, const TailSet& tail);

/// lambda * L^scale + L^tail.
Var hybrid_loss(const Var& scale_loss, const Var& tail_loss, double lambda);

/// Argmax per row; ties go to the smallest class id.
std::vector<int> predict(const Matrix& scores);

/// Single cross-entropy head on F5 used when the long-tailed loss is off.
struct CeHeadLoss {
  Var total;
  Var probabilities;
};
CeHeadLoss ce_head_loss(Binding& bind, const NetworkParams& params, const Var& final_features,
                        std::span<const int> labels, const ClassWeights& weights);

/// Lower bound on ||omega|| enforced after each update.
inline constexpr double kOmegaMinNorm = 1e-6;
/// Rescales `omega` to norm kOmegaMinNorm if it has collapsed below it.
/// Returns true when a rescale happened.
bool guard_omega_norm(Matrix& omega);

}  // namespace mpcseg
