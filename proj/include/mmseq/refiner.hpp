#pragma once

// Second generation stage for speech: fill acoustic layers 2..Q from the
// semantic layer by confidence-ordered iterative masked decoding.

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "mmseq/rvq.hpp"

namespace mmseq {

// Cumulative fraction of positions committed after each iteration of a layer.
struct RefineSchedule {
  std::vector<double> coverage;

  std::size_t iterations() const { return coverage.size(); }
  // Non-empty, each value in (0, 1], non-decreasing, last value exactly 1.
  void validate() const;
  // coverage_i = 1 - cos(pi/2 * i/n), i = 1..n
  static RefineSchedule cosine(std::size_t iterations = 4);
};

// Predicts a distribution over the K codes of `layer` for every frame.
// `partial` is T x Q with column 0 holding the semantic codes and earlier
// layers fully committed; `committed[t]` marks frames already fixed in
// `layer`. `out` is T x K, row-major. Implementations must be safe for
// concurrent const use.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::uint32_t codebook_size() const = 0;
  virtual void predict(const CodeMatrix& partial, std::size_t layer, std::span<const std::uint8_t> committed,
                       std::span<double> out) const = 0;
};

struct RefineCommit {
  std::size_t layer;
  std::size_t iteration;
  std::size_t position;
  std::uint32_t code;
};

struct RefineTrace {
  std::vector<RefineCommit> commits;
  std::vector<std::size_t> iterations_per_layer;  // indexed by layer, layer 0 unused
};

// `semantic` is T x 1. Returns T x num_layers with column 0 equal to `semantic`.
CodeMatrix refine(const CodeMatrix& semantic, const Predictor& predictor, const RefineSchedule& schedule,
                  std::size_t num_layers, RefineTrace* trace = nullptr);

// One-hot on the target code at every position, whatever the mask.
std::unique_ptr<Predictor> make_oracle_predictor(const CodeMatrix& target, std::uint32_t codebook_size);

// Random (but seeded, position-keyed) distributions. Useful as a baseline.
class RandomPredictor final : public Predictor {
 public:
  RandomPredictor(std::uint32_t codebook_size, std::uint64_t seed) : k_(codebook_size), seed_(seed) {}
  std::uint32_t codebook_size() const override { return k_; }
  void predict(const CodeMatrix& partial, std::size_t layer, std::span<const std::uint8_t> committed,
               std::span<double> out) const override;

 private:
  std::uint32_t k_;
  std::uint64_t seed_;
};

// Per-layer softmax regression on one-hot code features: every earlier
// layer at frames t-1, t and t+1, plus the same-layer codes of neighbours
// that are already committed. Residuals of a smooth signal are close to
// additive in those centroids, so a model linear in the one-hots fits them;
// the frame's own coarser codes alone carry almost nothing about the next
// layer.
class ConditionalCodePredictor final : public Predictor {
 public:
  struct Options {
    std::size_t epochs = 150;    // full-batch Adam steps per layer
    double learning_rate = 0.05;
    double l2 = 1e-4;
    double commit_rate = 0.5;    // chance a neighbour counts as committed during fitting
    std::uint64_t seed = 0;
  };

  ConditionalCodePredictor(std::uint32_t codebook_size, std::size_t num_layers, Options options);
  ConditionalCodePredictor(std::uint32_t codebook_size, std::size_t num_layers)
      : ConditionalCodePredictor(codebook_size, num_layers, Options{}) {}

  void fit(std::span<const CodeMatrix> utterances);
  bool fitted() const { return !weights_.empty(); }

  std::uint32_t codebook_size() const override { return k_; }
  void predict(const CodeMatrix& partial, std::size_t layer, std::span<const std::uint8_t> committed,
               std::span<double> out) const override;

 private:
  std::size_t feature_count(std::size_t layer) const { return (3 * layer + 2) * k_ + 1; }
  // Active feature indices of frame t; `left`/`right` say whether the
  // same-layer neighbours may be used.
  void features(const CodeMatrix& m, std::size_t layer, std::size_t t, bool left, bool right,
                std::vector<std::uint32_t>& out) const;

  std::uint32_t k_;
  std::size_t num_layers_;
  Options options_;
  std::vector<std::vector<double>> weights_;  // [layer] feature_count x K, row-major
};

}  // namespace mmseq
