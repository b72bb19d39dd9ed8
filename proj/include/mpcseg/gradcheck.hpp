#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mpcseg/tensor.hpp"

namespace mpcseg {

struct GradSuiteOptions {
  std::size_t points = 64;
  std::size_t base_channels = 2;
  std::size_t classes = 3;
  std::size_t bands = 3;
  /// Entries perturbed per checked matrix; 0 checks every entry.
  std::size_t max_entries_per_input = 8;
  double eps = 1e-5;
};

struct GradSuiteEntry {
  std::string component;
  std::uint64_t seed = 0;
  GradCheckReport report;
};

/// Finite-difference checks of local_feature_encode, msff, decode,
/// multiscale_loss, longtail_loss and hybrid_loss, each reduced to a scalar,
/// on a small random network and sample per seed.
std::vector<GradSuiteEntry> run_gradient_suite(std::span<const std::uint64_t> seeds,
                                               const GradSuiteOptions& options = {});

}  // namespace mpcseg
