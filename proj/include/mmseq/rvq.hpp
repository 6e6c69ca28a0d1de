#pragma once

// Residual vector quantization: layerwise k-means codebooks, encode/decode
// between continuous frame sequences and T x Q code matrices.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace mmseq {

struct Rational {
  std::uint32_t num = 50;
  std::uint32_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Rational&) const = default;
};

struct RVQConfig {
  std::uint32_t frame_dim = 1;
  std::uint32_t num_layers = 1;
  std::uint32_t codebook_size = 1;
  Rational frame_rate{50, 1};
  std::uint64_t seed = 0;
  // Training only; not part of the codebook file.
  std::uint32_t max_iterations = 50;

  void validate() const;

  // 1 layer x 8192 entries, 32 frames per image.
  static RVQConfig image_preset(std::uint32_t frame_dim, std::uint64_t seed = 0);
  // 8 layers x 1024 entries at 50 Hz.
  static RVQConfig speech_preset(std::uint32_t frame_dim, std::uint64_t seed = 0);
  // 4 layers at 50 Hz; 1024 entries gives the 4096-token vocabulary, 2048 the 8192 one.
  static RVQConfig music_preset(std::uint32_t frame_dim, std::uint32_t codebook_size = 1024,
                                std::uint64_t seed = 0);

  bool operator==(const RVQConfig& o) const {
    return frame_dim == o.frame_dim && num_layers == o.num_layers &&
           codebook_size == o.codebook_size && frame_rate == o.frame_rate && seed == o.seed;
  }
};

inline constexpr std::size_t kImageFramesPerImage = 32;
inline constexpr std::size_t kMusicUnitSeconds = 5;

// A T x D block of frames, row-major.
struct Frames {
  std::size_t dim = 0;
  std::vector<float> data;

  Frames() = default;
  Frames(std::size_t rows, std::size_t d) : dim(d), data(rows * d, 0.0f) {}

  std::size_t rows() const { return dim == 0 ? 0 : data.size() / dim; }
  std::span<const float> row(std::size_t t) const { return {data.data() + t * dim, dim}; }
  std::span<float> row(std::size_t t) { return {data.data() + t * dim, dim}; }
};

struct CodebookSet {
  RVQConfig config;
  // Q * K * D floats: layer-major, entry-major, dimension-minor.
  std::vector<float> data;

  std::size_t dim() const { return config.frame_dim; }
  std::size_t layers() const { return config.num_layers; }
  std::size_t entries() const { return config.codebook_size; }
  std::span<const float> layer(std::size_t q) const {
    return {data.data() + q * entries() * dim(), entries() * dim()};
  }
  std::span<const float> entry(std::size_t q, std::size_t k) const {
    return {data.data() + (q * entries() + k) * dim(), dim()};
  }

  bool operator==(const CodebookSet&) const = default;
};

struct CodeMatrix {
  std::size_t t = 0;
  std::size_t q = 0;
  std::vector<std::uint32_t> codes;  // row-major T x Q

  CodeMatrix() = default;
  CodeMatrix(std::size_t rows, std::size_t cols) : t(rows), q(cols), codes(rows * cols, 0) {}

  std::uint32_t at(std::size_t row, std::size_t col) const { return codes[row * q + col]; }
  std::uint32_t& at(std::size_t row, std::size_t col) { return codes[row * q + col]; }
  // Column `col` as a T x 1 matrix.
  CodeMatrix column(std::size_t col) const;

  bool operator==(const CodeMatrix&) const = default;
};

CodebookSet train_codebooks(const Frames& data, const RVQConfig& config);
CodeMatrix encode(const Frames& signal, const CodebookSet& books);
// Decodes using the first `layers` layers (all when 0).
Frames decode(const CodeMatrix& codes, const CodebookSet& books, std::size_t layers = 0);
// Entry q: mean squared error per scalar of the reconstruction using layers 1..q+1.
std::vector<double> layer_error_curve(const Frames& signal, const CodebookSet& books);
double mean_squared_error(const Frames& a, const Frames& b);

// Binary codebook file ("MMTK", version 1, little-endian).
std::vector<std::uint8_t> serialize_codebooks(const CodebookSet& books);
CodebookSet deserialize_codebooks(std::span<const std::uint8_t> bytes);
void save_codebooks(const std::filesystem::path& path, const CodebookSet& books);
CodebookSet load_codebooks(const std::filesystem::path& path);

// {"t": T, "q": Q, "codes": [...]}
nlohmann::json codes_to_json(const CodeMatrix& codes);
CodeMatrix codes_from_json(const nlohmann::json& j);
// {"t": T, "d": D, "frames": [...]}
nlohmann::json frames_to_json(const Frames& frames);
Frames frames_from_json(const nlohmann::json& j);

}  // namespace mmseq
