#include <omp.h>

#include <random>
#include <vector>

#include "doctest.h"
#include "mmseq/kernels.hpp"

namespace k = mmseq::kernels;

namespace {

std::vector<double> random_doubles(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST_CASE("parallel matmuls agree bit-for-bit with the serial reference") {
  omp_set_num_threads(4);
  const std::size_t n = 37, kk = 19, m = 23;
  const auto a = random_doubles(n * kk, 1), b = random_doubles(kk * m, 2);
  const auto c0 = random_doubles(n * m, 3);

  auto c1 = c0, c2 = c0;
  k::matmul_acc(a, b, c1, n, kk, m);
  k::serial::matmul_acc(a, b, c2, n, kk, m);
  CHECK(c1 == c2);

  // Plain triple loop as an independent check on the values.
  auto c3 = c0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t p = 0; p < kk; ++p) c3[i * m + j] += a[i * kk + p] * b[p * m + j];
  for (std::size_t i = 0; i < c3.size(); ++i) CHECK(c1[i] == doctest::Approx(c3[i]).epsilon(1e-12));

  const auto g = random_doubles(n * m, 4);
  std::vector<double> w1(kk * m, 0.0), w2(kk * m, 0.0);
  k::matmul_tn_acc(a, g, w1, n, kk, m);
  k::serial::matmul_tn_acc(a, g, w2, n, kk, m);
  CHECK(w1 == w2);

  std::vector<double> x1(n * kk, 0.0), x2(n * kk, 0.0);
  k::matmul_nt_acc(g, b, x1, n, kk, m);
  k::serial::matmul_nt_acc(g, b, x2, n, kk, m);
  CHECK(x1 == x2);
}

TEST_CASE("nearest_centroids: parallel equals serial, ties go to the lowest index") {
  omp_set_num_threads(4);
  std::mt19937_64 rng(9);
  std::normal_distribution<float> d(0.0f, 1.0f);
  const std::size_t n = 513, kc = 17, dim = 5;
  std::vector<float> pts(n * dim), cen(kc * dim);
  for (auto& v : pts) v = d(rng);
  for (auto& v : cen) v = d(rng);
  std::vector<std::uint32_t> i1(n), i2(n);
  std::vector<double> d1(n), d2(n);
  k::nearest_centroids(pts, cen, dim, i1, d1);
  k::serial::nearest_centroids(pts, cen, dim, i2, d2);
  CHECK(i1 == i2);
  CHECK(d1 == d2);

  // Two identical centroids: index 0 must win.
  const std::vector<float> twin = {1.0f, 1.0f, 1.0f, 1.0f};
  const std::vector<float> p = {0.0f, 0.0f};
  std::vector<std::uint32_t> idx(1);
  std::vector<double> dist(1);
  k::nearest_centroids(p, twin, 2, idx, dist);
  CHECK(idx[0] == 0);
  CHECK(dist[0] == 2.0);
}
