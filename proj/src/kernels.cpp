#include "mmseq/kernels.hpp"

#include <limits>

namespace mmseq::kernels {
namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1 << 15;

inline void nearest_one(const float* p, std::span<const float> centroids, std::size_t dim,
                        std::uint32_t& best_index, double& best_dist) {
  const std::size_t k = centroids.size() / dim;
  best_index = 0;
  best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const float* q = centroids.data() + c * dim;
    double d = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double diff = static_cast<double>(p[j]) - static_cast<double>(q[j]);
      d += diff * diff;
    }
    if (d < best_dist) {
      best_dist = d;
      best_index = static_cast<std::uint32_t>(c);
    }
  }
}

inline void matmul_row(const double* a_row, const double* b, double* c_row, std::size_t k,
                       std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a_row[p];
    if (av == 0.0) continue;
    const double* b_row = b + p * m;
    for (std::size_t j = 0; j < m; ++j) c_row[j] += av * b_row[j];
  }
}

inline void matmul_tn_row(const double* a, const double* b, double* c_row, std::size_t row,
                          std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double av = a[i * k + row];
    if (av == 0.0) continue;
    const double* b_row = b + i * m;
    for (std::size_t j = 0; j < m; ++j) c_row[j] += av * b_row[j];
  }
}

inline void matmul_nt_row(const double* a_row, const double* b, double* c_row, std::size_t k,
                          std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* b_row = b + p * m;
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += a_row[j] * b_row[j];
    c_row[p] += s;
  }
}

}  // namespace

void nearest_centroids(std::span<const float> points, std::span<const float> centroids,
                       std::size_t dim, std::span<std::uint32_t> index_out,
                       std::span<double> dist2_out) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(points.size() / dim);
  const bool par = static_cast<std::size_t>(n) * centroids.size() > kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    nearest_one(points.data() + i * dim, centroids, dim, index_out[i], dist2_out[i]);
  }
}

void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                std::size_t n, std::size_t k, std::size_t m) {
  const bool par = n > 1 && n * k * m > kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    matmul_row(a.data() + i * k, b.data(), c.data() + i * m, k, m);
  }
}

void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m) {
  const bool par = k > 1 && n * k * m > kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(k); ++r) {
    matmul_tn_row(a.data(), b.data(), c.data() + r * m, static_cast<std::size_t>(r), n, k, m);
  }
}

void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m) {
  const bool par = n > 1 && n * k * m > kParallelWork;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    matmul_nt_row(a.data() + i * m, b.data(), c.data() + i * k, k, m);
  }
}

namespace serial {

void nearest_centroids(std::span<const float> points, std::span<const float> centroids,
                       std::size_t dim, std::span<std::uint32_t> index_out,
                       std::span<double> dist2_out) {
  const std::size_t n = points.size() / dim;
  for (std::size_t i = 0; i < n; ++i) {
    nearest_one(points.data() + i * dim, centroids, dim, index_out[i], dist2_out[i]);
  }
}

void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) matmul_row(a.data() + i * k, b.data(), c.data() + i * m, k, m);
}

void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t r = 0; r < k; ++r) matmul_tn_row(a.data(), b.data(), c.data() + r * m, r, n, k, m);
}

void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) matmul_nt_row(a.data() + i * m, b.data(), c.data() + i * k, k, m);
}

}  // namespace serial
}  // namespace mmseq::kernels
