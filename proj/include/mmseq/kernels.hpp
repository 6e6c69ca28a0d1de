#pragma once

// Data-parallel inner loops shared by the quantizer and the language model.
//
// Every kernel has an OpenMP version (mmseq::kernels) and a plain serial
// reference (mmseq::kernels::serial). Each output element is reduced in the
// same order in both, so the two agree bit-for-bit; tests rely on that.

#include <cstddef>
#include <cstdint>
#include <span>

namespace mmseq::kernels {

// For each of the N points (N x dim, row-major) find the nearest of the K
// centroids (K x dim) by squared Euclidean distance. Ties go to the lowest
// centroid index. Distances are accumulated in double.
void nearest_centroids(std::span<const float> points, std::span<const float> centroids,
                       std::size_t dim, std::span<std::uint32_t> index_out,
                       std::span<double> dist2_out);

// C[n x m] += A[n x k] * B[k x m]
void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                std::size_t n, std::size_t k, std::size_t m);

// C[k x m] += A[n x k]^T * B[n x m]   (weight gradients)
void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m);

// C[n x k] += A[n x m] * B[k x m]^T   (input gradients)
void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m);

namespace serial {

void nearest_centroids(std::span<const float> points, std::span<const float> centroids,
                       std::size_t dim, std::span<std::uint32_t> index_out,
                       std::span<double> dist2_out);
void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                std::size_t n, std::size_t k, std::size_t m);
void matmul_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m);
void matmul_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t n, std::size_t k, std::size_t m);

}  // namespace serial

}  // namespace mmseq::kernels
