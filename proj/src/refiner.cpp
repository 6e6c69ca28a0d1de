#include "mmseq/refiner.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>

#include "mmseq/error.hpp"

namespace mmseq {

void RefineSchedule::validate() const {
  if (coverage.empty()) throw Error(Errc::BadSchedule, "schedule needs at least one iteration");
  double prev = 0.0;
  for (double c : coverage) {
    if (!(c > 0.0 && c <= 1.0)) throw Error(Errc::BadSchedule, "coverage values must lie in (0, 1]");
    if (c < prev) throw Error(Errc::BadSchedule, "coverage must be non-decreasing");
    prev = c;
  }
  if (coverage.back() != 1.0) throw Error(Errc::BadSchedule, "final coverage must be 1.0");
}

RefineSchedule RefineSchedule::cosine(std::size_t iterations) {
  if (iterations == 0) throw Error(Errc::BadSchedule, "schedule needs at least one iteration");
  RefineSchedule s;
  for (std::size_t i = 1; i <= iterations; ++i) {
    const double x = static_cast<double>(i) / static_cast<double>(iterations);
    s.coverage.push_back(i == iterations ? 1.0 : 1.0 - std::cos(std::numbers::pi / 2.0 * x));
  }
  return s;
}

namespace {

void check_distributions(std::span<const double> probs, std::size_t k, std::span<const std::uint8_t> committed) {
  const std::size_t t = committed.size();
  for (std::size_t i = 0; i < t; ++i) {
    if (committed[i]) continue;
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double p = probs[i * k + c];
      if (!(p >= 0.0) || !std::isfinite(p)) {
        throw Error(Errc::PredictorDistributionInvalid, "negative or non-finite probability at frame " + std::to_string(i));
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw Error(Errc::PredictorDistributionInvalid, "distribution at frame " + std::to_string(i) + " sums to " + std::to_string(sum));
    }
  }
}

}  // namespace

CodeMatrix refine(const CodeMatrix& semantic, const Predictor& predictor, const RefineSchedule& schedule,
                  std::size_t num_layers, RefineTrace* trace) {
  schedule.validate();
  if (semantic.q != 1) throw Error(Errc::DimensionMismatch, "semantic codes must be T x 1");
  if (num_layers < 2) throw Error(Errc::InvalidConfig, "refinement needs at least two layers");
  const std::uint32_t k = predictor.codebook_size();
  for (auto c : semantic.codes) {
    if (c >= k) throw Error(Errc::IndexOutOfRange, "semantic code " + std::to_string(c) + " >= " + std::to_string(k));
  }

  const std::size_t frames = semantic.t;
  CodeMatrix out(frames, num_layers);
  for (std::size_t t = 0; t < frames; ++t) out.at(t, 0) = semantic.codes[t];
  if (trace) trace->iterations_per_layer.assign(num_layers, 0);

  std::vector<double> probs(frames * k);
  std::vector<std::uint8_t> committed(frames);
  struct Candidate {
    double confidence;
    std::size_t position;
    std::uint32_t code;
  };
  std::vector<Candidate> candidates;

  for (std::size_t layer = 1; layer < num_layers; ++layer) {
    std::fill(committed.begin(), committed.end(), 0);
    std::size_t done = 0;
    for (std::size_t it = 0; it < schedule.iterations(); ++it) {
      std::size_t target = it + 1 == schedule.iterations()
                               ? frames
                               : static_cast<std::size_t>(std::ceil(schedule.coverage[it] * static_cast<double>(frames) - 1e-9));
      target = std::min(target, frames);
      if (trace) ++trace->iterations_per_layer[layer];
      if (target <= done) continue;

      predictor.predict(out, layer, committed, probs);
      check_distributions(probs, k, committed);

      candidates.clear();
      for (std::size_t t = 0; t < frames; ++t) {
        if (committed[t]) continue;
        const double* row = probs.data() + t * k;
        const auto best = static_cast<std::uint32_t>(std::max_element(row, row + k) - row);
        candidates.push_back({row[best], t, best});
      }
      std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        return a.confidence != b.confidence ? a.confidence > b.confidence : a.position < b.position;
      });
      const std::size_t take = target - done;
      for (std::size_t i = 0; i < take; ++i) {
        const auto& c = candidates[i];
        out.at(c.position, layer) = c.code;
        committed[c.position] = 1;
        if (trace) trace->commits.push_back({layer, it, c.position, c.code});
      }
      done = target;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

class OraclePredictor final : public Predictor {
 public:
  OraclePredictor(CodeMatrix target, std::uint32_t k) : target_(std::move(target)), k_(k) {}
  std::uint32_t codebook_size() const override { return k_; }
  void predict(const CodeMatrix&, std::size_t layer, std::span<const std::uint8_t>, std::span<double> out) const override {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t t = 0; t < target_.t; ++t) out[t * k_ + target_.at(t, layer)] = 1.0;
  }

 private:
  CodeMatrix target_;
  std::uint32_t k_;
};

}  // namespace

std::unique_ptr<Predictor> make_oracle_predictor(const CodeMatrix& target, std::uint32_t codebook_size) {
  for (auto c : target.codes) {
    if (c >= codebook_size) throw Error(Errc::IndexOutOfRange, "target code outside codebook");
  }
  return std::make_unique<OraclePredictor>(target, codebook_size);
}

void RandomPredictor::predict(const CodeMatrix& partial, std::size_t layer, std::span<const std::uint8_t>,
                              std::span<double> out) const {
  for (std::size_t t = 0; t < partial.t; ++t) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(t)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double sum = 0.0;
    for (std::size_t c = 0; c < k_; ++c) sum += out[t * k_ + c] = unit(rng) + 1e-12;
    for (std::size_t c = 0; c < k_; ++c) out[t * k_ + c] /= sum;
  }
}

ConditionalCodePredictor::ConditionalCodePredictor(std::uint32_t codebook_size, std::size_t num_layers, Options options)
    : k_(codebook_size), num_layers_(num_layers), options_(options) {
  if (codebook_size == 0 || num_layers < 2) throw Error(Errc::InvalidConfig, "predictor needs K > 0 and at least two layers");
  if (options.epochs == 0 || !(options.learning_rate > 0.0) || !(options.l2 >= 0.0) ||
      !(options.commit_rate >= 0.0 && options.commit_rate <= 1.0)) {
    throw Error(Errc::InvalidConfig, "invalid predictor options");
  }
}

void ConditionalCodePredictor::features(const CodeMatrix& m, std::size_t layer, std::size_t t, bool left, bool right,
                                        std::vector<std::uint32_t>& out) const {
  out.clear();
  const auto k = static_cast<std::uint32_t>(k_);
  for (std::size_t o = 0; o < 3; ++o) {
    if ((o == 0 && t == 0) || (o == 2 && t + 1 >= m.t)) continue;
    const std::size_t frame = t + o - 1;
    for (std::size_t j = 0; j < layer; ++j) out.push_back(static_cast<std::uint32_t>((o * layer + j) * k + m.at(frame, j)));
  }
  if (left && t > 0) out.push_back(static_cast<std::uint32_t>(3 * layer * k + m.at(t - 1, layer)));
  if (right && t + 1 < m.t) out.push_back(static_cast<std::uint32_t>((3 * layer + 1) * k + m.at(t + 1, layer)));
  out.push_back(static_cast<std::uint32_t>(feature_count(layer) - 1));  // bias
}

void ConditionalCodePredictor::fit(std::span<const CodeMatrix> utterances) {
  for (const auto& u : utterances) {
    if (u.q != num_layers_) throw Error(Errc::DimensionMismatch, "training utterance has wrong layer count");
    for (auto c : u.codes) {
      if (c >= k_) throw Error(Errc::IndexOutOfRange, "training code outside codebook");
    }
  }
  std::vector<std::vector<double>> weights(num_layers_);
  bool empty = true;
  for (const auto& u : utterances) empty = empty && u.t == 0;
  if (empty) throw Error(Errc::InsufficientData, "no frames to fit the predictor on");

  // Layers are independent; each is fitted serially so results do not
  // depend on the thread count.
#pragma omp parallel for schedule(dynamic)
  for (std::size_t layer = 1; layer < num_layers_; ++layer) {
    std::mt19937_64 rng(options_.seed * 0x9e3779b97f4a7c15ull + layer);
    std::bernoulli_distribution commit(options_.commit_rate);
    std::vector<std::vector<std::uint32_t>> xs;
    std::vector<std::uint32_t> ys, f;
    for (const auto& u : utterances) {
      for (std::size_t t = 0; t < u.t; ++t) {
        const bool l = commit(rng), r = commit(rng);
        features(u, layer, t, l, r, f);
        xs.push_back(f);
        ys.push_back(u.at(t, layer));
      }
    }
    const std::size_t nf = feature_count(layer), k = k_;
    std::vector<double> w(nf * k, 0.0), g(nf * k), m(nf * k, 0.0), v(nf * k, 0.0), z(k);
    const double inv_n = 1.0 / static_cast<double>(xs.size());
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (std::size_t step = 1; step <= options_.epochs; ++step) {
      for (std::size_t i = 0; i < w.size(); ++i) g[i] = options_.l2 * w[i];
      for (std::size_t s = 0; s < xs.size(); ++s) {
        std::fill(z.begin(), z.end(), 0.0);
        for (auto fi : xs[s]) {
          for (std::size_t c = 0; c < k; ++c) z[c] += w[fi * k + c];
        }
        const double mx = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (auto& x : z) sum += x = std::exp(x - mx);
        for (auto& x : z) x /= sum;
        z[ys[s]] -= 1.0;
        for (auto fi : xs[s]) {
          for (std::size_t c = 0; c < k; ++c) g[fi * k + c] += z[c] * inv_n;
        }
      }
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step)), c2 = 1.0 - std::pow(b2, static_cast<double>(step));
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (1 - b1) * g[i];
        v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
        w[i] -= options_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
    weights[layer] = std::move(w);
  }
  weights_ = std::move(weights);
}

void ConditionalCodePredictor::predict(const CodeMatrix& partial, std::size_t layer, std::span<const std::uint8_t> committed,
                                       std::span<double> out) const {
  if (layer == 0 || layer >= num_layers_) throw Error(Errc::OutOfRange, "layer outside predictor range");
  if (!fitted()) throw Error(Errc::InvalidConfig, "predictor used before fit()");
  if (partial.q < layer + 1) throw Error(Errc::DimensionMismatch, "partial codes have too few layers");
  const auto& w = weights_[layer];
  std::vector<std::uint32_t> f;
  for (std::size_t t = 0; t < partial.t; ++t) {
    const bool left = t > 0 && t - 1 < committed.size() && committed[t - 1];
    const bool right = t + 1 < committed.size() && committed[t + 1];
    features(partial, layer, t, left, right, f);
    double* row = out.data() + t * k_;
    std::fill(row, row + k_, 0.0);
    for (auto fi : f) {
      for (std::size_t c = 0; c < k_; ++c) row[c] += w[fi * k_ + c];
    }
    const double mx = *std::max_element(row, row + k_);
    double sum = 0.0;
    for (std::size_t c = 0; c < k_; ++c) sum += row[c] = std::exp(row[c] - mx);
    for (std::size_t c = 0; c < k_; ++c) row[c] /= sum;
  }
}

}  // namespace mmseq
