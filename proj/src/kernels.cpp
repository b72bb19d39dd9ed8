#include "mpcseg/kernels.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <utility>

namespace mpcseg::kernels {

namespace {

// Below this many multiply-adds the OpenMP fork costs more than it saves.
constexpr std::size_t kParallelThreshold = 1 << 15;

void check_matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
}

inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& out, std::size_t i) {
  double* o = out.data.data() + i * out.cols;
  std::fill(o, o + out.cols, 0.0);
  const double* ai = a.data.data() + i * a.cols;
  for (std::size_t k = 0; k < a.cols; ++k) {
    const double aik = ai[k];
    if (aik == 0.0) continue;
    const double* bk = b.data.data() + k * b.cols;
    for (std::size_t j = 0; j < b.cols; ++j) o[j] += aik * bk[j];
  }
}

inline void at_b_row(const Matrix& a, const Matrix& b, Matrix& out, std::size_t i) {
  double* o = out.data.data() + i * out.cols;
  for (std::size_t r = 0; r < a.rows; ++r) {
    const double ari = a.data[r * a.cols + i];
    if (ari == 0.0) continue;
    const double* br = b.data.data() + r * b.cols;
    for (std::size_t j = 0; j < b.cols; ++j) o[j] += ari * br[j];
  }
}

inline void a_bt_row(const Matrix& a, const Matrix& b, Matrix& out, std::size_t i) {
  double* o = out.data.data() + i * out.cols;
  const double* ai = a.data.data() + i * a.cols;
  for (std::size_t j = 0; j < b.rows; ++j) {
    const double* bj = b.data.data() + j * b.cols;
    double s = 0.0;
    for (std::size_t k = 0; k < a.cols; ++k) s += ai[k] * bj[k];
    o[j] += s;
  }
}

}  // namespace

namespace serial {

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
  check_matmul(a, b);
  out = Matrix(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) matmul_row(a, b, out, i);
}

void matmul_at_b_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.rows != b.rows || out.rows != a.cols || out.cols != b.cols) {
    throw std::invalid_argument("matmul_at_b: shape mismatch");
  }
  for (std::size_t i = 0; i < a.cols; ++i) at_b_row(a, b, out, i);
}

void matmul_a_bt_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.cols != b.cols || out.rows != a.rows || out.cols != b.rows) {
    throw std::invalid_argument("matmul_a_bt: shape mismatch");
  }
  for (std::size_t i = 0; i < a.rows; ++i) a_bt_row(a, b, out, i);
}

std::vector<std::size_t> knn_brute(std::span<const Point3> points, const Point3& query,
                                   std::size_t k) {
  std::vector<std::pair<double, std::size_t>> d(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) d[i] = {squared_distance(points[i], query), i};
  const std::size_t m = std::min(k, d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(m), d.end());
  std::vector<std::size_t> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = d[i].second;
  return out;
}

}  // namespace serial

namespace omp {

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
  check_matmul(a, b);
  out = Matrix(a.rows, b.cols);
  const auto rows = static_cast<long long>(a.rows);
  const bool par = a.rows * a.cols * b.cols > kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (long long i = 0; i < rows; ++i) matmul_row(a, b, out, static_cast<std::size_t>(i));
}

void matmul_at_b_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.rows != b.rows || out.rows != a.cols || out.cols != b.cols) {
    throw std::invalid_argument("matmul_at_b: shape mismatch");
  }
  const auto rows = static_cast<long long>(a.cols);
  const bool par = a.rows * a.cols * b.cols > kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (long long i = 0; i < rows; ++i) at_b_row(a, b, out, static_cast<std::size_t>(i));
}

void matmul_a_bt_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.cols != b.cols || out.rows != a.rows || out.cols != b.rows) {
    throw std::invalid_argument("matmul_a_bt: shape mismatch");
  }
  const auto rows = static_cast<long long>(a.rows);
  const bool par = a.rows * a.cols * b.rows > kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (long long i = 0; i < rows; ++i) a_bt_row(a, b, out, static_cast<std::size_t>(i));
}

std::vector<std::vector<std::size_t>> knn_brute_batch(std::span<const Point3> points,
                                                      std::span<const Point3> queries,
                                                      std::size_t k) {
  std::vector<std::vector<std::size_t>> out(queries.size());
  const auto n = static_cast<long long>(queries.size());
  const bool par = queries.size() * points.size() > kParallelThreshold;
#pragma omp parallel for schedule(dynamic, 16) if (par)
  for (long long q = 0; q < n; ++q) {
    out[static_cast<std::size_t>(q)] = serial::knn_brute(points, queries[static_cast<std::size_t>(q)], k);
  }
  return out;
}

}  // namespace omp

}  // namespace mpcseg::kernels
