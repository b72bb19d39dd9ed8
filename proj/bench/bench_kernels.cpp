#include <random>

#include <benchmark/benchmark.h>

#include "mpcseg/kernels.hpp"
#include "mpcseg/sampling.hpp"

namespace {

using mpcseg::Matrix;
using mpcseg::Point3;
namespace kernels = mpcseg::kernels;

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix m(r, c);
  for (double& v : m.data) v = u(rng);
  return m;
}

std::vector<Point3> random_points(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  std::vector<Point3> pts(n);
  for (auto& p : pts) p = {u(rng), u(rng), u(rng)};
  return pts;
}

void BM_MatmulSerial(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, 64, 1), b = random_matrix(64, 64, 2);
  Matrix out;
  for (auto _ : state) {
    kernels::serial::matmul(a, b, out);
    benchmark::DoNotOptimize(out.data.data());
  }
}

void BM_MatmulOmp(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, 64, 1), b = random_matrix(64, 64, 2);
  Matrix out;
  for (auto _ : state) {
    kernels::omp::matmul(a, b, out);
    benchmark::DoNotOptimize(out.data.data());
  }
}

void BM_MatmulAtBSerial(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, 64, 1), b = random_matrix(n, 64, 2);
  Matrix out(64, 64);
  for (auto _ : state) {
    kernels::serial::matmul_at_b_acc(a, b, out);
    benchmark::DoNotOptimize(out.data.data());
  }
}

void BM_MatmulAtBOmp(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, 64, 1), b = random_matrix(n, 64, 2);
  Matrix out(64, 64);
  for (auto _ : state) {
    kernels::omp::matmul_at_b_acc(a, b, out);
    benchmark::DoNotOptimize(out.data.data());
  }
}

void BM_KnnSerial(benchmark::State& state) {
  const auto pts = random_points(static_cast<std::size_t>(state.range(0)), 3);
  const auto queries = random_points(256, 4);
  for (auto _ : state) {
    for (const auto& q : queries) benchmark::DoNotOptimize(kernels::serial::knn_brute(pts, q, 16));
  }
}

void BM_KnnOmp(benchmark::State& state) {
  const auto pts = random_points(static_cast<std::size_t>(state.range(0)), 3);
  const auto queries = random_points(256, 4);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::omp::knn_brute_batch(pts, queries, 16));
}

void BM_KnnGrid(benchmark::State& state) {
  const auto pts = random_points(static_cast<std::size_t>(state.range(0)), 3);
  const auto queries = random_points(256, 4);
  const mpcseg::KnnIndex index(pts);
  for (auto _ : state) {
    for (const auto& q : queries) benchmark::DoNotOptimize(index.query(q, 16));
  }
}

BENCHMARK(BM_MatmulSerial)->Arg(1024)->Arg(16384);
BENCHMARK(BM_MatmulOmp)->Arg(1024)->Arg(16384);
BENCHMARK(BM_MatmulAtBSerial)->Arg(1024)->Arg(16384);
BENCHMARK(BM_MatmulAtBOmp)->Arg(1024)->Arg(16384);
BENCHMARK(BM_KnnSerial)->Arg(4096)->Arg(65536);
BENCHMARK(BM_KnnOmp)->Arg(4096)->Arg(65536);
BENCHMARK(BM_KnnGrid)->Arg(4096)->Arg(65536);

}  // namespace

BENCHMARK_MAIN();
