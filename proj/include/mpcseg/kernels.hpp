#pragma once

// Data-parallel inner loops. Every kernel has a straight serial reference in
// `serial` and an OpenMP version in `omp`. The OpenMP versions keep the
// per-element summation order of the serial ones, so results are
// bit-identical regardless of thread count.

#include <cstddef>
#include <span>
#include <vector>

#include "mpcseg/matrix.hpp"
#include "mpcseg/pointcloud.hpp"

namespace mpcseg::kernels {

namespace serial {

/// out = a * b
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
/// out += a^T * b
void matmul_at_b_acc(const Matrix& a, const Matrix& b, Matrix& out);
/// out += a * b^T
void matmul_a_bt_acc(const Matrix& a, const Matrix& b, Matrix& out);

/// k nearest points of `points` to `query`, ordered by (distance, index).
/// Exhaustive O(N) scan per query.
std::vector<std::size_t> knn_brute(std::span<const Point3> points, const Point3& query,
                                   std::size_t k);

}  // namespace serial

namespace omp {

void matmul(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_at_b_acc(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_a_bt_acc(const Matrix& a, const Matrix& b, Matrix& out);

/// One brute-force k-NN list per query, queries processed in parallel.
std::vector<std::vector<std::size_t>> knn_brute_batch(std::span<const Point3> points,
                                                      std::span<const Point3> queries,
                                                      std::size_t k);

}  // namespace omp

/// Squared Euclidean distance, the single definition shared by every k-NN
/// path so that tie-breaking agrees exactly.
inline double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace mpcseg::kernels
