#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>
#include <type_traits>
#include <utility>

#include "calip/errors.hpp"

namespace calip {

/// Dense row-major matrix. Every feature tensor in the engine is one of these:
/// text features (K x C), flattened spatial maps (HW x C), attention maps
/// (HW x K) and logits (1 x K).
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;

/// Reductions on 32-bit data accumulate in 64-bit.
template <typename Scalar>
using Accumulator = std::conditional_t<(sizeof(Scalar) < sizeof(double)), double, Scalar>;

/// H x W x C feature map stored as its (H*W) x C pixel matrix; pixel p of
/// row-major (h, w) position is p = h * W + w, so the reshape is the identity
/// on the underlying buffer.
template <typename Scalar>
class SpatialMap {
 public:
  SpatialMap() = default;

  SpatialMap(Eigen::Index h, Eigen::Index w, Eigen::Index c)
      : h_(h), w_(w), pixels_(Mat<Scalar>::Zero(checked_pixels(h, w), c)) {}

  SpatialMap(Eigen::Index h, Eigen::Index w, Mat<Scalar> pixels) : h_(h), w_(w), pixels_(std::move(pixels)) {
    if (pixels_.rows() != checked_pixels(h, w)) {
      throw DimensionError("spatial map " + std::to_string(h) + "x" + std::to_string(w) + " needs " +
                           std::to_string(h * w) + " pixel rows, got " + std::to_string(pixels_.rows()));
    }
  }

  Eigen::Index h() const noexcept { return h_; }
  Eigen::Index w() const noexcept { return w_; }
  Eigen::Index c() const noexcept { return pixels_.cols(); }
  Eigen::Index pixel_count() const noexcept { return pixels_.rows(); }

  Scalar& operator()(Eigen::Index hi, Eigen::Index wi, Eigen::Index ci) { return pixels_(hi * w_ + wi, ci); }
  Scalar operator()(Eigen::Index hi, Eigen::Index wi, Eigen::Index ci) const { return pixels_(hi * w_ + wi, ci); }

  /// The (H*W) x C view used by attention.
  const Mat<Scalar>& pixels() const noexcept { return pixels_; }
  Mat<Scalar>& pixels() noexcept { return pixels_; }

  template <typename Other>
  SpatialMap<Other> cast() const {
    return SpatialMap<Other>(h_, w_, pixels_.template cast<Other>());
  }

  friend bool operator==(const SpatialMap& a, const SpatialMap& b) {
    return a.h_ == b.h_ && a.w_ == b.w_ && a.pixels_.rows() == b.pixels_.rows() &&
           a.pixels_.cols() == b.pixels_.cols() && a.pixels_ == b.pixels_;
  }

 private:
  static Eigen::Index checked_pixels(Eigen::Index h, Eigen::Index w) {
    if (h < 0 || w < 0) throw DimensionError("negative spatial extent");
    return h * w;
  }

  Eigen::Index h_ = 0;
  Eigen::Index w_ = 0;
  Mat<Scalar> pixels_;
};

template <typename Derived>
std::string shape_of(const Eigen::EigenBase<Derived>& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* where) {
  if (!m.allFinite()) throw IntegrityError(std::string(where) + " produced a non-finite value");
}

/// a * b with 64-bit accumulation for float operands. Accepts any Eigen
/// expression, so `matmul(a, b.transpose())` needs no temporary at the call site.
template <typename DA, typename DB>
Mat<typename DA::Scalar> matmul(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  using Scalar = typename DA::Scalar;
  static_assert(std::is_same_v<Scalar, typename DB::Scalar>, "matmul operands must share a scalar type");
  using Acc = Accumulator<Scalar>;
  if (a.cols() != b.rows()) throw DimensionError("matmul of " + shape_of(a) + " by " + shape_of(b));
  Mat<Scalar> out;
  if constexpr (std::is_same_v<Acc, Scalar>) {
    out.noalias() = a * b;
  } else {
    const Mat<Acc> wide = a.template cast<Acc>() * b.template cast<Acc>();
    out = wide.template cast<Scalar>();
  }
  require_finite(out, "matmul");
  return out;
}

/// Each row divided by its Euclidean norm; rows with norm below eps become zero.
template <typename Derived>
Mat<typename Derived::Scalar> l2_normalize_rows(const Eigen::MatrixBase<Derived>& m, double eps = 1e-12) {
  using Scalar = typename Derived::Scalar;
  using Acc = Accumulator<Scalar>;
  Mat<Scalar> out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Acc sq = 0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const Acc v = static_cast<Acc>(m(r, c));
      sq += v * v;
    }
    const Acc norm = std::sqrt(sq);
    if (!(norm >= static_cast<Acc>(eps))) {
      out.row(r).setZero();
      continue;
    }
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      out(r, c) = static_cast<Scalar>(static_cast<Acc>(m(r, c)) / norm);
    }
  }
  return out;
}

/// Row-wise softmax of m / temperature, max-subtracted.
template <typename Derived>
Mat<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& m, double temperature) {
  using Scalar = typename Derived::Scalar;
  using Acc = Accumulator<Scalar>;
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("softmax temperature must be positive and finite, got " + std::to_string(temperature));
  }
  const Acc inv_t = Acc(1) / static_cast<Acc>(temperature);
  Mat<Scalar> out(m.rows(), m.cols());
  Eigen::Matrix<Acc, 1, Eigen::Dynamic> e(m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (m.cols() == 0) continue;
    Acc peak = static_cast<Acc>(m(r, 0)) * inv_t;
    for (Eigen::Index c = 1; c < m.cols(); ++c) peak = std::max(peak, static_cast<Acc>(m(r, c)) * inv_t);
    Acc sum = 0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      e(c) = std::exp(static_cast<Acc>(m(r, c)) * inv_t - peak);
      sum += e(c);
    }
    for (Eigen::Index c = 0; c < m.cols(); ++c) out(r, c) = static_cast<Scalar>(e(c) / sum);
  }
  return out;
}

/// Global average over pixel rows: (HW x C) -> (1 x C).
template <typename Derived>
Mat<typename Derived::Scalar> mean_pool(const Eigen::MatrixBase<Derived>& pixels) {
  using Scalar = typename Derived::Scalar;
  using Acc = Accumulator<Scalar>;
  if (pixels.rows() < 1) throw DimensionError("mean_pool of empty map " + shape_of(pixels));
  Mat<Scalar> out(1, pixels.cols());
  for (Eigen::Index c = 0; c < pixels.cols(); ++c) {
    Acc sum = 0;
    for (Eigen::Index p = 0; p < pixels.rows(); ++p) sum += static_cast<Acc>(pixels(p, c));
    out(0, c) = static_cast<Scalar>(sum / static_cast<Acc>(pixels.rows()));
  }
  return out;
}

/// Mean of max-pooling and average-pooling per channel: (HW x C) -> (1 x C).
template <typename Derived>
Mat<typename Derived::Scalar> pool_max_avg(const Eigen::MatrixBase<Derived>& pixels) {
  using Scalar = typename Derived::Scalar;
  using Acc = Accumulator<Scalar>;
  if (pixels.rows() < 1) throw DimensionError("pool_max_avg of empty map " + shape_of(pixels));
  Mat<Scalar> out(1, pixels.cols());
  for (Eigen::Index c = 0; c < pixels.cols(); ++c) {
    Acc sum = 0;
    Acc peak = static_cast<Acc>(pixels(0, c));
    for (Eigen::Index p = 0; p < pixels.rows(); ++p) {
      const Acc v = static_cast<Acc>(pixels(p, c));
      sum += v;
      peak = std::max(peak, v);
    }
    out(0, c) = static_cast<Scalar>(Acc(0.5) * (peak + sum / static_cast<Acc>(pixels.rows())));
  }
  return out;
}

/// Index of the largest entry of row r; ties go to the lowest index.
template <typename Derived>
Eigen::Index argmax_row(const Eigen::MatrixBase<Derived>& m, Eigen::Index r = 0) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < m.cols(); ++c) {
    if (m(r, c) > m(r, best)) best = c;
  }
  return best;
}

}  // namespace calip
