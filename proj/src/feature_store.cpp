#include "calip/feature_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <string_view>

namespace calip {
namespace {

constexpr char kBundleMagic[4] = {'C', 'A', 'L', 'F'};
constexpr char kWeightsMagic[4] = {'C', 'A', 'L', 'W'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T from_le(const std::uint8_t* p) {
  T v;
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(&v, p, sizeof(T));
  } else {
    std::uint8_t tmp[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) tmp[i] = p[sizeof(T) - 1 - i];
    std::memcpy(&v, tmp, sizeof(T));
  }
  return v;
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    std::uint8_t tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(tmp, tmp + sizeof(T));
    bytes_.insert(bytes_.end(), tmp, tmp + sizeof(T));
  }
  void put_raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_floats(const MatF& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) put(m.data()[i]);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked little-endian cursor; every failure names its byte offset.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t size() const { return bytes_.size(); }
  std::uint64_t remaining() const { return bytes_.size() - pos_; }

  void need(std::uint64_t n, std::string_view what) const {
    if (remaining() < n) {
      throw IntegrityError(pos_, "truncated while reading " + std::string(what) + ": need " + std::to_string(n) +
                                     " bytes, " + std::to_string(remaining()) + " remain (file is " +
                                     std::to_string(size()) + " bytes)");
    }
  }

  template <typename T>
  T get(std::string_view what) {
    need(sizeof(T), what);
    const T v = from_le<T>(bytes_.data() + pos_);
    pos_ += sizeof(T);
    return v;
  }

  std::string_view get_bytes(std::size_t n, std::string_view what) {
    need(n, what);
    std::string_view s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  float get_finite(std::string_view what) {
    const std::uint64_t at = pos_;
    const float v = get<float>(what);
    if (!std::isfinite(v)) throw IntegrityError(at, "non-finite value in " + std::string(what));
    return v;
  }

  void read_floats(MatF& m, std::string_view what) {
    need(static_cast<std::uint64_t>(m.size()) * 4, what);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get_finite(what);
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::uint64_t pos_ = 0;
};

void check_magic(Reader& r, const char (&magic)[4], std::string_view kind) {
  if (r.size() < 4) {
    throw FormatError(0, "file too short for " + std::string(kind) + " magic (" + std::to_string(r.size()) +
                             " bytes)");
  }
  const auto got = r.get_bytes(4, "magic");
  if (std::memcmp(got.data(), magic, 4) != 0) {
    throw FormatError(0, "bad magic for " + std::string(kind) + ", expected \"" + std::string(magic, 4) + "\"");
  }
}

void check_version(Reader& r, std::uint32_t expected) {
  const std::uint64_t at = r.offset();
  if (r.remaining() < 4) throw FormatError(at, "file too short for version field");
  const auto version = r.get<std::uint32_t>("version");
  if (version != expected) {
    throw FormatError(at, "unsupported version " + std::to_string(version) + ", expected " +
                              std::to_string(expected));
  }
}

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    const std::uint32_t min_cp[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < min_cp[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += len;
  }
  return true;
}

std::string row_norm_problem(const MatF& text, Eigen::Index r) {
  double sq = 0.0;
  for (Eigen::Index c = 0; c < text.cols(); ++c) sq += double(text(r, c)) * double(text(r, c));
  const double norm = std::sqrt(sq);
  if (std::abs(norm - 1.0) > kTextNormTolerance) {
    return "text feature row " + std::to_string(r) + " has norm " + std::to_string(norm) + ", expected 1";
  }
  return {};
}

bool same_bits(const MatF& a, const MatF& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

void FeatureBundle::validate() const {
  const Eigen::Index k = classes();
  if (k < 1) throw DimensionError("bundle has no classes");
  if (channels() < 1) throw DimensionError("bundle has zero channels");
  if (h < 1 || w < 1) throw DimensionError("bundle spatial extent must be at least 1x1");
  if (static_cast<Eigen::Index>(class_names.size()) != k) {
    throw DimensionError(std::to_string(class_names.size()) + " class names for " + std::to_string(k) +
                         " text rows");
  }
  std::set<std::string_view> seen;
  for (const auto& name : class_names) {
    if (name.size() > 0xFFFF) throw IntegrityError("class name longer than 65535 bytes");
    if (!valid_utf8(name)) throw IntegrityError("class name is not valid UTF-8");
    if (!seen.insert(name).second) throw IntegrityError("duplicate class name \"" + name + "\"");
  }
  if (!text_features.allFinite()) throw IntegrityError("text features contain non-finite values");
  for (Eigen::Index r = 0; r < k; ++r) {
    if (auto problem = row_norm_problem(text_features, r); !problem.empty()) throw IntegrityError(problem);
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    if (img.label >= static_cast<std::uint32_t>(k)) {
      throw IntegrityError("image " + std::to_string(i) + " label " + std::to_string(img.label) + " >= K=" +
                           std::to_string(k));
    }
    if (img.spatial.h() != h || img.spatial.w() != w || img.spatial.c() != channels()) {
      throw DimensionError("image " + std::to_string(i) + " is " + std::to_string(img.spatial.h()) + "x" +
                           std::to_string(img.spatial.w()) + "x" + std::to_string(img.spatial.c()) +
                           ", bundle is " + std::to_string(h) + "x" + std::to_string(w) + "x" +
                           std::to_string(channels()));
    }
    if (!img.spatial.pixels().allFinite()) {
      throw IntegrityError("image " + std::to_string(i) + " contains non-finite values");
    }
  }
}

bool operator==(const FeatureBundle& a, const FeatureBundle& b) {
  if (a.class_names != b.class_names || a.h != b.h || a.w != b.w || a.images.size() != b.images.size()) return false;
  if (!same_bits(a.text_features, b.text_features)) return false;
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    const auto& x = a.images[i];
    const auto& y = b.images[i];
    if (x.label != y.label || x.spatial.h() != y.spatial.h() || x.spatial.w() != y.spatial.w() ||
        !same_bits(x.spatial.pixels(), y.spatial.pixels())) {
      return false;
    }
  }
  return true;
}

std::vector<std::uint8_t> serialize_bundle(const FeatureBundle& bundle) {
  bundle.validate();
  Writer out;
  out.put_raw(kBundleMagic, 4);
  out.put<std::uint32_t>(kBundleVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(bundle.classes()));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(bundle.channels()));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(bundle.images.size()));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(bundle.h));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(bundle.w));
  for (const auto& name : bundle.class_names) {
    out.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    out.put_raw(name.data(), name.size());
  }
  out.put_floats(bundle.text_features);
  for (const auto& img : bundle.images) {
    out.put<std::uint32_t>(img.label);
    out.put_floats(img.spatial.pixels());
  }
  return out.take();
}

FeatureBundle parse_bundle(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  check_magic(r, kBundleMagic, "feature bundle");
  check_version(r, kBundleVersion);

  const std::uint64_t dims_at = r.offset();
  const auto k = r.get<std::uint32_t>("K");
  const auto c = r.get<std::uint32_t>("C");
  const auto n = r.get<std::uint32_t>("N");
  const auto h = r.get<std::uint32_t>("H");
  const auto w = r.get<std::uint32_t>("W");
  if (k == 0) throw IntegrityError(dims_at, "K must be at least 1");
  if (c == 0) throw IntegrityError(dims_at + 4, "C must be at least 1");
  if (h == 0 || w == 0) throw IntegrityError(dims_at + 12, "H and W must be at least 1");

  FeatureBundle b;
  b.h = h;
  b.w = w;
  b.class_names.reserve(std::min<std::uint64_t>(k, r.remaining() / 2));
  std::set<std::string_view> seen;
  for (std::uint32_t i = 0; i < k; ++i) {
    const auto len = r.get<std::uint16_t>("class name length");
    const std::uint64_t name_at = r.offset();
    const auto name = r.get_bytes(len, "class name");
    if (!valid_utf8(name)) throw IntegrityError(name_at, "class name " + std::to_string(i) + " is not valid UTF-8");
    if (!seen.insert(name).second) {
      throw IntegrityError(name_at, "duplicate class name \"" + std::string(name) + "\"");
    }
    b.class_names.emplace_back(name);
  }

  // Everything after the names has a fixed size; check it before allocating.
  const std::uint64_t text_bytes = std::uint64_t{k} * c * 4;
  const unsigned __int128 image_bytes = (unsigned __int128)n * (4 + (unsigned __int128)h * w * c * 4);
  const unsigned __int128 expected = (unsigned __int128)r.offset() + text_bytes + image_bytes;
  if (expected != r.size()) {
    const bool short_file = expected > r.size();
    const std::string expected_text =
        expected > UINT64_MAX ? std::string("more than 2^64") : std::to_string((std::uint64_t)expected);
    throw IntegrityError(short_file ? r.size() : (std::uint64_t)expected,
                         std::string(short_file ? "truncated file" : "trailing bytes") + ": expected " +
                             expected_text + " bytes, got " + std::to_string(r.size()));
  }

  b.text_features.resize(k, c);
  const std::uint64_t text_at = r.offset();
  r.read_floats(b.text_features, "text features");
  for (Eigen::Index row = 0; row < b.text_features.rows(); ++row) {
    if (auto problem = row_norm_problem(b.text_features, row); !problem.empty()) {
      throw IntegrityError(text_at + std::uint64_t(row) * c * 4, problem);
    }
  }

  b.images.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint64_t label_at = r.offset();
    auto& img = b.images[i];
    img.label = r.get<std::uint32_t>("label");
    if (img.label >= k) {
      throw IntegrityError(label_at, "image " + std::to_string(i) + " label " + std::to_string(img.label) +
                                         " >= K=" + std::to_string(k));
    }
    img.spatial = SpatialMap<float>(h, w, c);
    r.read_floats(img.spatial.pixels(), "spatial features");
  }
  return b;
}

FeatureBundle load_bundle(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_bundle(bytes);
}

void save_bundle(const FeatureBundle& bundle, const std::filesystem::path& path) {
  write_file(path, serialize_bundle(bundle));
}

bool operator==(const WeightsFile& a, const WeightsFile& b) {
  if (a.seed != b.seed || a.epochs != b.epochs || std::memcmp(&a.lr, &b.lr, sizeof(float)) != 0) return false;
  const auto ta = a.params.tensors();
  const auto tb = b.params.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (!same_bits(*ta[i], *tb[i])) return false;
  }
  return true;
}

std::vector<std::uint8_t> serialize_weights(const WeightsFile& weights) {
  const Eigen::Index c = weights.params.channels();
  if (c < 1) throw DimensionError("weights have zero channels");
  weights.params.validate(c);
  Writer out;
  out.put_raw(kWeightsMagic, 4);
  out.put<std::uint32_t>(kWeightsVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(c));
  out.put<std::uint64_t>(weights.seed);
  out.put<std::uint32_t>(weights.epochs);
  out.put<float>(weights.lr);
  for (const auto* t : weights.params.tensors()) out.put_floats(*t);
  return out.take();
}

WeightsFile parse_weights(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  check_magic(r, kWeightsMagic, "weights file");
  check_version(r, kWeightsVersion);
  const std::uint64_t c_at = r.offset();
  const auto c = r.get<std::uint32_t>("C");
  if (c == 0) throw IntegrityError(c_at, "C must be at least 1");
  const std::uint64_t expected = weights_file_size(c);
  if (expected != r.size()) {
    throw IntegrityError(expected > r.size() ? r.size() : expected,
                         std::string(expected > r.size() ? "truncated file" : "trailing bytes") + ": expected " +
                             std::to_string(expected) + " bytes for C=" + std::to_string(c) + ", got " +
                             std::to_string(r.size()));
  }
  WeightsFile wf;
  wf.seed = r.get<std::uint64_t>("seed");
  wf.epochs = r.get<std::uint32_t>("epochs");
  const std::uint64_t lr_at = r.offset();
  wf.lr = r.get<float>("lr");
  if (!std::isfinite(wf.lr)) throw IntegrityError(lr_at, "non-finite learning rate");
  wf.params = ProjectionParams<float>::zeros(c);
  auto ts = wf.params.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    r.read_floats(*ts[i], ProjectionParams<float>::kTensorNames[i]);
  }
  return wf;
}

WeightsFile load_weights(const std::filesystem::path& path) { return parse_weights(read_file(path)); }

void save_weights(const WeightsFile& weights, const std::filesystem::path& path) {
  write_file(path, serialize_weights(weights));
}

void check_compatible(const WeightsFile& weights, const FeatureBundle& bundle) {
  if (weights.params.channels() != bundle.channels()) {
    throw DimensionError("weights have C=" + std::to_string(weights.params.channels()) + " but bundle has C=" +
                         std::to_string(bundle.channels()));
  }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) throw IoError("no such file: " + path.string());
  if (std::filesystem::is_directory(path, ec)) throw IoError("is a directory: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace calip
