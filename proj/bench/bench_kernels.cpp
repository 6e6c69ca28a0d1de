// Serial reference vs OpenMP kernels. Thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "mmseq/kernels.hpp"
#include "mmseq/rvq.hpp"

namespace {

namespace k = mmseq::kernels;

template <typename T>
std::vector<T> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return v;
}

// Args: points, centroids, dim.
template <bool Parallel>
void BM_NearestCentroids(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto kc = static_cast<std::size_t>(state.range(1));
  const auto dim = static_cast<std::size_t>(state.range(2));
  const auto points = random_vec<float>(n * dim, 1), centroids = random_vec<float>(kc * dim, 2);
  std::vector<std::uint32_t> idx(n);
  std::vector<double> dist(n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::nearest_centroids(points, centroids, dim, idx, dist);
    } else {
      k::serial::nearest_centroids(points, centroids, dim, idx, dist);
    }
    benchmark::DoNotOptimize(idx.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * kc));
}

// Square-ish forward matmul: n x k times k x m.
template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto kk = static_cast<std::size_t>(state.range(1));
  const auto m = static_cast<std::size_t>(state.range(2));
  const auto a = random_vec<double>(n * kk, 3), b = random_vec<double>(kk * m, 4);
  std::vector<double> c(n * m);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::matmul_acc(a, b, c, n, kk, m);
    } else {
      k::serial::matmul_acc(a, b, c, n, kk, m);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * kk * m));
}

template <bool Parallel>
void BM_MatmulTN(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto kk = static_cast<std::size_t>(state.range(1));
  const auto m = static_cast<std::size_t>(state.range(2));
  const auto a = random_vec<double>(n * kk, 5), b = random_vec<double>(n * m, 6);
  std::vector<double> c(kk * m);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::matmul_tn_acc(a, b, c, n, kk, m);
    } else {
      k::serial::matmul_tn_acc(a, b, c, n, kk, m);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * kk * m));
}

template <bool Parallel>
void BM_MatmulNT(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto kk = static_cast<std::size_t>(state.range(1));
  const auto m = static_cast<std::size_t>(state.range(2));
  const auto a = random_vec<double>(n * m, 7), b = random_vec<double>(kk * m, 8);
  std::vector<double> c(n * kk);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::matmul_nt_acc(a, b, c, n, kk, m);
    } else {
      k::serial::matmul_nt_acc(a, b, c, n, kk, m);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * kk * m));
}

// End to end: one RVQ training run, which spends most of its time in
// nearest_centroids.
void BM_TrainCodebooks(benchmark::State& state) {
  mmseq::RVQConfig c;
  c.frame_dim = 16;
  c.num_layers = 4;
  c.codebook_size = static_cast<std::uint32_t>(state.range(0));
  c.max_iterations = 10;
  mmseq::Frames x(8192, 16);
  x.data = random_vec<float>(x.data.size(), 9);
  for (auto _ : state) benchmark::DoNotOptimize(mmseq::train_codebooks(x, c));
}

void centroid_args(benchmark::internal::Benchmark* b) {
  b->Args({4096, 256, 16})->Args({16384, 1024, 8})->Args({2048, 8192, 16});
}

void matmul_args(benchmark::internal::Benchmark* b) { b->Args({128, 48, 192})->Args({256, 256, 256})->Args({512, 128, 2048}); }

}  // namespace

BENCHMARK(BM_NearestCentroids<false>)->Name("nearest_centroids/serial")->Apply(centroid_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_NearestCentroids<true>)->Name("nearest_centroids/omp")->Apply(centroid_args)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_Matmul<false>)->Name("matmul/serial")->Apply(matmul_args)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Matmul<true>)->Name("matmul/omp")->Apply(matmul_args)->Unit(benchmark::kMicrosecond)->UseRealTime();
BENCHMARK(BM_MatmulTN<false>)->Name("matmul_tn/serial")->Apply(matmul_args)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_MatmulTN<true>)->Name("matmul_tn/omp")->Apply(matmul_args)->Unit(benchmark::kMicrosecond)->UseRealTime();
BENCHMARK(BM_MatmulNT<false>)->Name("matmul_nt/serial")->Apply(matmul_args)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_MatmulNT<true>)->Name("matmul_nt/omp")->Apply(matmul_args)->Unit(benchmark::kMicrosecond)->UseRealTime();
BENCHMARK(BM_TrainCodebooks)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
