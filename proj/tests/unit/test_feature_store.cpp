#include <openssl/sha.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "calip/feature_store.hpp"
#include "doctest.h"
#include "oracle/instance.hpp"
#include "support/fuzz.hpp"
#include "support/synthetic.hpp"

using namespace calip;

namespace {

// sha256 of the same bundle written by tests/oracle/calip_oracle.py
constexpr const char* kBundleDigest = "8cdab27c9d709a4581e6db36c8809bc3cf6bc51a7c84e251cc698334b6f603a2";

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  unsigned char md[SHA256_DIGEST_LENGTH];
  SHA256(bytes.data(), bytes.size(), md);
  char hex[2 * SHA256_DIGEST_LENGTH + 1];
  for (int i = 0; i < SHA256_DIGEST_LENGTH; ++i) std::snprintf(hex + 2 * i, 3, "%02x", md[i]);
  return hex;
}

FeatureBundle digest_bundle() {
  testing::SplitMix64 g(0);
  FeatureBundle b;
  const Eigen::Index k = 5, c = 6;
  for (Eigen::Index i = 0; i < k; ++i) b.class_names.push_back("class_" + std::to_string(i));
  b.text_features = MatF::Zero(k, c);
  for (Eigen::Index i = 0; i < k; ++i) b.text_features(i, i % c) = 1.0f;
  b.h = 2;
  b.w = 3;
  for (std::uint32_t i = 0; i < 100; ++i) b.images.push_back({i % 5, SpatialMap<float>(2, 3, g.block(6, c))});
  return b;
}

template <typename E>
std::optional<std::uint64_t> offset_of(const std::vector<std::uint8_t>& bytes) {
  try {
    parse_bundle(bytes);
  } catch (const E& e) {
    return e.offset();
  }
  FAIL("expected an error");
  return std::nullopt;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() / ("calip_fs_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("serialized bundle matches the reference digest") {
  const auto bytes = serialize_bundle(digest_bundle());
  CHECK(bytes.size() == 14993);
  CHECK(sha256_hex(bytes) == kBundleDigest);
}

TEST_CASE("bundle round trip is bit exact") {
  std::mt19937_64 rng(1);
  const auto b = testing::random_bundle(rng, 4, 2, 2, 7, 9);
  const auto bytes = serialize_bundle(b);
  const auto back = parse_bundle(bytes);
  CHECK(back == b);
  CHECK(serialize_bundle(back) == bytes);

  TempDir dir;
  save_bundle(b, dir.path / "b.calf");
  CHECK(load_bundle(dir.path / "b.calf") == b);
  CHECK_THROWS_AS(load_bundle(dir.path / "missing.calf"), IoError);
}

TEST_CASE("header errors carry byte offsets") {
  std::mt19937_64 rng(2);
  const auto b = testing::random_bundle(rng, 3, 1, 2, 4, 5);
  const auto valid = serialize_bundle(b);

  auto bytes = valid;
  bytes[0] = 'X';
  CHECK(offset_of<FormatError>(bytes) == 0u);

  bytes = valid;
  bytes[4] = 2;
  CHECK(offset_of<FormatError>(bytes) == 4u);

  bytes = valid;
  bytes[8] = 0;  // K = 0
  CHECK(offset_of<IntegrityError>(bytes) == 8u);

  bytes = valid;
  bytes.pop_back();
  CHECK(offset_of<IntegrityError>(bytes) == valid.size() - 1);

  bytes = valid;
  bytes.push_back(0);
  CHECK(offset_of<IntegrityError>(bytes) == valid.size());

  CHECK(offset_of<FormatError>({}) == 0u);
}

TEST_CASE("payload errors carry byte offsets") {
  std::mt19937_64 rng(3);
  const auto b = testing::random_bundle(rng, 3, 1, 2, 4, 5);
  const auto valid = serialize_bundle(b);
  const std::size_t text_at = testing::text_offset(b);
  const std::size_t images_at = text_at + 3 * 4 * 4;

  auto bytes = valid;
  const std::uint32_t big = 3;
  std::memcpy(bytes.data() + images_at, &big, 4);
  CHECK(offset_of<IntegrityError>(bytes) == images_at);

  bytes = valid;
  const float nan = std::nanf("");
  std::memcpy(bytes.data() + images_at + 8, &nan, 4);
  CHECK(offset_of<IntegrityError>(bytes) == images_at + 8);

  bytes = valid;
  const float two = 2.0f;
  std::memcpy(bytes.data() + text_at + 16, &two, 4);  // second text row no longer unit norm
  CHECK(offset_of<IntegrityError>(bytes) == text_at + 16);

  bytes = valid;
  bytes[28 + 2] = 0xFF;  // first byte of the first class name
  CHECK(offset_of<IntegrityError>(bytes) == 30u);
}

TEST_CASE("duplicate class names are rejected") {
  std::mt19937_64 rng(4);
  auto b = testing::random_bundle(rng, 2, 1, 1, 3, 2);
  b.class_names[1] = b.class_names[0];
  CHECK_THROWS_AS(serialize_bundle(b), IntegrityError);
  b.class_names = {"class_0", "class_9"};
  auto bytes = serialize_bundle(b);
  const std::size_t second_name_at = 28 + 2 + 7 + 2;
  bytes[second_name_at + 6] = '0';
  CHECK(offset_of<IntegrityError>(bytes) == second_name_at);
}

TEST_CASE("mutated files only raise structured errors") {
  std::mt19937_64 rng(5);
  const auto b = testing::random_bundle(rng, 4, 2, 3, 5, 6);
  const auto valid = serialize_bundle(b);
  for (int i = 0; i < 2000; ++i) {
    const auto m = static_cast<testing::Mutation>(i % static_cast<int>(testing::Mutation::kCount));
    const auto bytes = testing::mutate(b, valid, m, rng);
    try {
      const auto parsed = parse_bundle(bytes);
      parsed.validate();
    } catch (const Error&) {
    }
  }
}

TEST_CASE("weights round trip and size") {
  std::mt19937_64 rng(6);
  WeightsFile wf{ProjectionParams<float>::random_init(5, rng), 42, 200, 2e-3f};
  const auto bytes = serialize_weights(wf);
  CHECK(bytes.size() == weights_file_size(5));
  CHECK(parse_weights(bytes) == wf);

  auto bad = bytes;
  bad.pop_back();
  CHECK_THROWS_AS(parse_weights(bad), IntegrityError);
  bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(parse_weights(bad), FormatError);
  CHECK_THROWS_AS(parse_bundle(bytes), FormatError);
}

TEST_CASE("weights must match the bundle channel count") {
  std::mt19937_64 rng(7);
  const auto b = testing::random_bundle(rng, 2, 1, 1, 4, 2);
  CHECK_NOTHROW(check_compatible({ProjectionParams<float>::identity(4), 0, 1, 1.0f}, b));
  CHECK_THROWS_AS(check_compatible({ProjectionParams<float>::identity(3), 0, 1, 1.0f}, b), DimensionError);
}
