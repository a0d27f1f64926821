#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "calip/parametric.hpp"
#include "calip/tensor.hpp"

namespace calip {

struct ImageRecord {
  std::uint32_t label = 0;
  SpatialMap<float> spatial;
};

/// A dataset's pre-extracted features: K class text rows and N spatial maps.
///
/// On-disk layout (little-endian):
///   "CALF" | u32 version=1 | u32 K | u32 C | u32 N | u32 H | u32 W
///   K x (u16 byte length, UTF-8 name)
///   K*C f32 text features, row-major
///   N x (u32 label, H*W*C f32 in (h, w, c) order)
struct FeatureBundle {
  std::vector<std::string> class_names;
  MatF text_features;  ///< K x C, unit rows
  Eigen::Index h = 1;
  Eigen::Index w = 1;
  std::vector<ImageRecord> images;

  Eigen::Index classes() const { return text_features.rows(); }
  Eigen::Index channels() const { return text_features.cols(); }
  std::size_t size() const { return images.size(); }

  /// Throws DimensionError or IntegrityError if any invariant fails.
  void validate() const;

  /// Bit-level equality (float payloads compared by representation).
  friend bool operator==(const FeatureBundle& a, const FeatureBundle& b);
};

/// Text rows must be unit-norm within this tolerance.
inline constexpr double kTextNormTolerance = 1e-4;

inline constexpr std::uint32_t kBundleVersion = 1;
inline constexpr std::uint32_t kWeightsVersion = 1;

std::vector<std::uint8_t> serialize_bundle(const FeatureBundle& bundle);
FeatureBundle parse_bundle(std::span<const std::uint8_t> bytes);

FeatureBundle load_bundle(const std::filesystem::path& path);
void save_bundle(const FeatureBundle& bundle, const std::filesystem::path& path);

/// Trained projection layers plus the metadata of the run that produced them.
///
/// On-disk layout (little-endian):
///   "CALW" | u32 version=1 | u32 C | u64 seed | u32 epochs | f32 lr
///   w_q, b_q, w_k, b_k, w_v, b_v, w_post, b_post as row-major f32
struct WeightsFile {
  ProjectionParams<float> params;
  std::uint64_t seed = 0;
  std::uint32_t epochs = 0;
  float lr = 0.0f;

  friend bool operator==(const WeightsFile&, const WeightsFile&);
};

/// Exact byte length of a weights file for channel count c.
constexpr std::uint64_t weights_file_size(std::uint64_t c) { return 28 + 16 * c * c + 16 * c; }

std::vector<std::uint8_t> serialize_weights(const WeightsFile& weights);
WeightsFile parse_weights(std::span<const std::uint8_t> bytes);

WeightsFile load_weights(const std::filesystem::path& path);
void save_weights(const WeightsFile& weights, const std::filesystem::path& path);

/// Throws DimensionError when trained weights do not fit the bundle's channels.
void check_compatible(const WeightsFile& weights, const FeatureBundle& bundle);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace calip
