#include "mmseq/rvq.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "mmseq/error.hpp"
#include "mmseq/kernels.hpp"

namespace mmseq {

void RVQConfig::validate() const {
  if (frame_dim == 0 || num_layers == 0 || codebook_size == 0) {
    throw Error(Errc::InvalidConfig, "frame_dim, num_layers and codebook_size must be positive");
  }
  if (frame_rate.num == 0 || frame_rate.den == 0) {
    throw Error(Errc::InvalidConfig, "frame rate must be a positive rational");
  }
}

RVQConfig RVQConfig::image_preset(std::uint32_t frame_dim, std::uint64_t seed) {
  // Image frame rate is "frames per image"; recorded as 32/1.
  return RVQConfig{frame_dim, 1, 8192, {32, 1}, seed};
}

RVQConfig RVQConfig::speech_preset(std::uint32_t frame_dim, std::uint64_t seed) {
  return RVQConfig{frame_dim, 8, 1024, {50, 1}, seed};
}

RVQConfig RVQConfig::music_preset(std::uint32_t frame_dim, std::uint32_t codebook_size,
                                  std::uint64_t seed) {
  return RVQConfig{frame_dim, 4, codebook_size, {50, 1}, seed};
}

CodeMatrix CodeMatrix::column(std::size_t col) const {
  CodeMatrix out(t, 1);
  for (std::size_t r = 0; r < t; ++r) out.codes[r] = at(r, col);
  return out;
}

namespace {

std::mt19937_64 layer_rng(std::uint64_t seed, std::size_t layer) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(layer)};
  return std::mt19937_64(seq);
}

double sq_dist(std::span<const float> a, std::span<const float> b) {
  double d = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double diff = static_cast<double>(a[j]) - static_cast<double>(b[j]);
    d += diff * diff;
  }
  return d;
}

// k-means++ seeding followed by Lloyd iterations.
std::vector<float> kmeans(const Frames& points, std::size_t k, std::uint32_t max_iterations,
                          std::mt19937_64& rng) {
  const std::size_t n = points.rows();
  const std::size_t dim = points.dim;
  std::vector<float> centroids(k * dim);

  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::size_t chosen = pick(rng);
  for (std::size_t c = 0; c < k; ++c) {
    if (c > 0) {
      double total = 0.0;
      for (double d : nearest) total += d;
      if (total > 0.0) {
        double target = unit(rng) * total;
        chosen = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
          if (nearest[i] <= 0.0) continue;
          target -= nearest[i];
          if (target < 0.0) {
            chosen = i;
            break;
          }
        }
        // Rounding can leave target >= 0 at the end; fall back to the last positive point.
        if (target >= 0.0) {
          for (std::size_t i = n; i-- > 0;) {
            if (nearest[i] > 0.0) {
              chosen = i;
              break;
            }
          }
        }
      } else {
        chosen = pick(rng);
      }
    }
    std::copy_n(points.row(chosen).begin(), dim, centroids.begin() + c * dim);
    const std::span<const float> centroid(centroids.data() + c * dim, dim);
    for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], sq_dist(points.row(i), centroid));
  }

  std::vector<std::uint32_t> assign(n);
  std::vector<double> dist(n);
  std::vector<double> sums(k * dim);
  std::vector<std::size_t> counts(k);
  for (std::uint32_t iter = 0; iter < max_iterations; ++iter) {
    kernels::nearest_centroids(points.data, centroids, dim, assign, dist);
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = assign[i];
      ++counts[c];
      const auto row = points.row(i);
      for (std::size_t j = 0; j < dim; ++j) sums[c * dim + j] += row[j];
    }
    double max_shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<float> updated(dim);
      if (counts[c] == 0) {
        // Re-seed an empty cluster at the point farthest from its centroid.
        std::size_t far = 0;
        for (std::size_t i = 1; i < n; ++i) {
          if (dist[i] > dist[far]) far = i;
        }
        std::copy_n(points.row(far).begin(), dim, updated.begin());
        dist[far] = -1.0;
      } else {
        for (std::size_t j = 0; j < dim; ++j) {
          updated[j] = static_cast<float>(sums[c * dim + j] / static_cast<double>(counts[c]));
        }
      }
      const std::span<const float> old(centroids.data() + c * dim, dim);
      max_shift = std::max(max_shift, std::sqrt(sq_dist(old, updated)));
      std::copy(updated.begin(), updated.end(), centroids.begin() + c * dim);
    }
    if (max_shift < 1e-9) break;
  }
  return centroids;
}

void check_dim(const Frames& frames, const CodebookSet& books) {
  if (frames.dim != books.dim() && !(frames.data.empty())) {
    throw Error(Errc::DimensionMismatch, "frame dimension " + std::to_string(frames.dim) +
                                             " does not match codebook dimension " +
                                             std::to_string(books.dim()));
  }
}

void check_codes(const CodeMatrix& codes, const CodebookSet& books) {
  if (codes.q != books.layers()) {
    throw Error(Errc::IndexOutOfRange, "code matrix has " + std::to_string(codes.q) +
                                           " columns, codebooks have " +
                                           std::to_string(books.layers()) + " layers");
  }
  if (codes.codes.size() != codes.t * codes.q) {
    throw Error(Errc::IndexOutOfRange, "code matrix size does not match its shape");
  }
  for (std::uint32_t c : codes.codes) {
    if (c >= books.entries()) {
      throw Error(Errc::IndexOutOfRange, "code " + std::to_string(c) + " outside codebook of size " +
                                             std::to_string(books.entries()));
    }
  }
}

}  // namespace

CodebookSet train_codebooks(const Frames& data, const RVQConfig& config) {
  config.validate();
  if (data.dim != config.frame_dim) {
    throw Error(Errc::DimensionMismatch, "training frames have dimension " +
                                             std::to_string(data.dim) + ", expected " +
                                             std::to_string(config.frame_dim));
  }
  if (data.rows() < config.codebook_size) {
    throw Error(Errc::InsufficientData, std::to_string(data.rows()) + " frames for " +
                                            std::to_string(config.codebook_size) + " centroids");
  }
  CodebookSet books;
  books.config = config;
  books.data.reserve(static_cast<std::size_t>(config.num_layers) * config.codebook_size *
                     config.frame_dim);

  Frames residual = data;
  const std::size_t n = residual.rows();
  const std::size_t dim = residual.dim;
  std::vector<std::uint32_t> assign(n);
  std::vector<double> dist(n);
  for (std::size_t q = 0; q < config.num_layers; ++q) {
    auto rng = layer_rng(config.seed, q);
    const auto centroids = kmeans(residual, config.codebook_size, config.max_iterations, rng);
    kernels::nearest_centroids(residual.data, centroids, dim, assign, dist);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = residual.row(i);
      for (std::size_t j = 0; j < dim; ++j) row[j] -= centroids[assign[i] * dim + j];
    }
    books.data.insert(books.data.end(), centroids.begin(), centroids.end());
  }
  return books;
}

CodeMatrix encode(const Frames& signal, const CodebookSet& books) {
  check_dim(signal, books);
  const std::size_t n = signal.rows();
  CodeMatrix out(n, books.layers());
  if (n == 0) return out;
  Frames residual = signal;
  const std::size_t dim = books.dim();
  std::vector<std::uint32_t> assign(n);
  std::vector<double> dist(n);
  for (std::size_t q = 0; q < books.layers(); ++q) {
    const auto layer = books.layer(q);
    kernels::nearest_centroids(residual.data, layer, dim, assign, dist);
    for (std::size_t i = 0; i < n; ++i) {
      out.at(i, q) = assign[i];
      auto row = residual.row(i);
      for (std::size_t j = 0; j < dim; ++j) row[j] -= layer[assign[i] * dim + j];
    }
  }
  return out;
}

Frames decode(const CodeMatrix& codes, const CodebookSet& books, std::size_t layers) {
  check_codes(codes, books);
  if (layers == 0 || layers > books.layers()) layers = books.layers();
  Frames out(codes.t, books.dim());
  for (std::size_t t = 0; t < codes.t; ++t) {
    auto row = out.row(t);
    for (std::size_t q = 0; q < layers; ++q) {
      const auto centroid = books.entry(q, codes.at(t, q));
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += centroid[j];
    }
  }
  return out;
}

double mean_squared_error(const Frames& a, const Frames& b) {
  if (a.data.size() != b.data.size()) {
    throw Error(Errc::DimensionMismatch, "frame blocks differ in size");
  }
  if (a.data.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.data.size());
}

std::vector<double> layer_error_curve(const Frames& signal, const CodebookSet& books) {
  const CodeMatrix codes = encode(signal, books);
  std::vector<double> curve;
  curve.reserve(books.layers());
  for (std::size_t q = 1; q <= books.layers(); ++q) {
    curve.push_back(mean_squared_error(signal, decode(codes, books, q)));
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Codebook file

namespace {

constexpr char kMagic[4] = {'M', 'M', 'T', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw Error(Errc::BadFormat, "codebook file truncated");
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_codebooks(const CodebookSet& books) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  const auto& c = books.config;
  put_le(out, kVersion);
  put_le(out, c.frame_dim);
  put_le(out, c.num_layers);
  put_le(out, c.codebook_size);
  put_le(out, c.frame_rate.num);
  put_le(out, c.frame_rate.den);
  put_le(out, c.seed);
  out.reserve(out.size() + books.data.size() * 4);
  for (float f : books.data) put_le(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

CodebookSet deserialize_codebooks(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(Errc::BadFormat, "missing MMTK magic");
  }
  Reader r(bytes.subspan(4));
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw Error(Errc::BadFormat, "unsupported codebook version " + std::to_string(version));
  CodebookSet books;
  auto& c = books.config;
  c.frame_dim = r.get<std::uint32_t>();
  c.num_layers = r.get<std::uint32_t>();
  c.codebook_size = r.get<std::uint32_t>();
  c.frame_rate.num = r.get<std::uint32_t>();
  c.frame_rate.den = r.get<std::uint32_t>();
  c.seed = r.get<std::uint64_t>();
  c.validate();
  const std::size_t count = static_cast<std::size_t>(c.frame_dim) * c.num_layers * c.codebook_size;
  if (r.remaining() != count * 4) throw Error(Errc::BadFormat, "codebook payload size mismatch");
  books.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    books.data[i] = std::bit_cast<float>(r.get<std::uint32_t>());
    if (!std::isfinite(books.data[i])) throw Error(Errc::BadFormat, "non-finite codebook entry");
  }
  return books;
}

void save_codebooks(const std::filesystem::path& path, const CodebookSet& books) {
  const auto bytes = serialize_codebooks(books);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::Io, "write failed: " + path.string());
}

CodebookSet load_codebooks(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_codebooks(bytes);
}

// ---------------------------------------------------------------------------
// JSON interchange

nlohmann::json codes_to_json(const CodeMatrix& codes) {
  return {{"t", codes.t}, {"q", codes.q}, {"codes", codes.codes}};
}

CodeMatrix codes_from_json(const nlohmann::json& j) {
  try {
    CodeMatrix m;
    m.t = j.at("t").get<std::size_t>();
    m.q = j.at("q").get<std::size_t>();
    m.codes = j.at("codes").get<std::vector<std::uint32_t>>();
    if (m.q == 0 || m.codes.size() != m.t * m.q) {
      throw Error(Errc::BadFormat, "code matrix shape does not match payload length");
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::BadFormat, std::string("code matrix JSON: ") + e.what());
  }
}

nlohmann::json frames_to_json(const Frames& frames) {
  return {{"t", frames.rows()}, {"d", frames.dim}, {"frames", frames.data}};
}

Frames frames_from_json(const nlohmann::json& j) {
  try {
    Frames f;
    const auto t = j.at("t").get<std::size_t>();
    f.dim = j.at("d").get<std::size_t>();
    f.data = j.at("frames").get<std::vector<float>>();
    if (f.dim == 0 || f.data.size() != t * f.dim) {
      throw Error(Errc::BadFormat, "frames shape does not match payload length");
    }
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::BadFormat, std::string("frames JSON: ") + e.what());
  }
}

}  // namespace mmseq
