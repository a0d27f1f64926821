#pragma once

#include <array>
#include <cmath>
#include <string>

#include "calip/tensor.hpp"

namespace calip {

/// Softmax temperatures of the two attention branches and the logit fusion weights.
struct CalipHyper {
  double alpha_t = 2.0;  ///< temperature of softmax(A) producing the visual update
  double alpha_s = 2.0;  ///< temperature of softmax(A^T) producing the textual update
  double beta1 = 1.0;    ///< weight of the plain cosine logits
  double beta2 = 1.0;    ///< weight of global-visual x updated-textual logits
  double beta3 = 0.1;    ///< weight of updated-visual x textual logits

  void validate() const {
    auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
    auto nonnegative = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (!positive(alpha_t)) throw ParameterError("alpha_t must be > 0, got " + std::to_string(alpha_t));
    if (!positive(alpha_s)) throw ParameterError("alpha_s must be > 0, got " + std::to_string(alpha_s));
    if (!nonnegative(beta1)) throw ParameterError("beta1 must be >= 0, got " + std::to_string(beta1));
    if (!nonnegative(beta2)) throw ParameterError("beta2 must be >= 0, got " + std::to_string(beta2));
    if (!nonnegative(beta3)) throw ParameterError("beta3 must be >= 0, got " + std::to_string(beta3));
    if (!(beta1 + beta2 + beta3 > 0.0)) throw ParameterError("beta1 + beta2 + beta3 must be > 0");
  }

  friend bool operator==(const CalipHyper&, const CalipHyper&) = default;
};

/// Which of the four logit terms enter the fused logits.
///   1: Fv Ft^T     2: Fv Ft^a^T     3: Fv^a Ft^T     4: Fv^a Ft^a^T
/// Terms 1-3 are weighted by beta1..beta3; term 4 by `fourth_weight`.
class LogitMask {
 public:
  constexpr LogitMask() = default;
  constexpr explicit LogitMask(unsigned bits, double fourth_weight = 1.0)
      : bits_(bits & 0xFu), fourth_weight_(fourth_weight) {}

  static constexpr LogitMask standard() { return LogitMask(0b0111u); }
  static constexpr LogitMask clip_only() { return LogitMask(0b0001u); }

  /// Parses "1,2,3" style term lists. Throws ParameterError on anything else.
  static LogitMask parse(const std::string& text);

  constexpr bool has(int term) const { return term >= 1 && term <= 4 && (bits_ >> (term - 1)) & 1u; }
  constexpr unsigned bits() const { return bits_; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr double fourth_weight() const { return fourth_weight_; }
  std::string to_string() const;

  friend constexpr bool operator==(const LogitMask&, const LogitMask&) = default;

 private:
  unsigned bits_ = 0b0111u;
  double fourth_weight_ = 1.0;
};

struct CalipOptions {
  /// L2-normalize every pixel before attention so A is a cosine map.
  bool normalize_pixels = true;
  /// Re-normalize updated textual rows and the pooled updated visual feature
  /// before the logit products.
  bool renormalize_updates = true;
};

template <typename Scalar>
struct CalipOutputs {
  Mat<Scalar> attention;       ///< HW x K
  Mat<Scalar> f_s_a;           ///< HW x C, softmax(A / alpha_t) Ft
  Mat<Scalar> f_t_a;           ///< K x C, softmax(A^T / alpha_s) Fs, before re-normalization
  Mat<Scalar> f_v;             ///< 1 x C, normalized global visual feature
  Mat<Scalar> f_v_a;           ///< 1 x C, pooled updated visual feature (normalized)
  Mat<Scalar> logits_clip;     ///< term 1
  Mat<Scalar> logits_textual;  ///< term 2
  Mat<Scalar> logits_visual;   ///< term 3
  Mat<Scalar> logits_both;     ///< term 4, only used by ablations
  Mat<Scalar> logits_fused;    ///< beta-weighted sum of terms 1-3
};

/// Normalized inputs shared by the parameter-free and parametric pipelines.
template <typename Scalar>
struct PreparedFeatures {
  Mat<Scalar> f_s;  ///< HW x C
  Mat<Scalar> f_t;  ///< K x C, unit rows
  Mat<Scalar> f_v;  ///< 1 x C, unit
};

template <typename Scalar>
PreparedFeatures<Scalar> prepare_features(const Mat<Scalar>& pixels, const Mat<Scalar>& f_t,
                                          const CalipOptions& options = {}) {
  if (pixels.rows() < 1) throw DimensionError("spatial map has no pixels");
  if (f_t.rows() < 1) throw DimensionError("text features have no classes");
  if (pixels.cols() != f_t.cols()) {
    throw DimensionError("channel mismatch: spatial " + shape_of(pixels) + " vs text " + shape_of(f_t));
  }
  if (!pixels.allFinite()) throw IntegrityError("spatial map contains non-finite values");
  if (!f_t.allFinite()) throw IntegrityError("text features contain non-finite values");
  PreparedFeatures<Scalar> out;
  out.f_s = options.normalize_pixels ? l2_normalize_rows(pixels) : pixels;
  out.f_t = l2_normalize_rows(f_t);
  out.f_v = l2_normalize_rows(mean_pool(out.f_s));
  return out;
}

/// Cosine logits of the pooled image feature against every class: (1 x K).
template <typename Scalar>
Mat<Scalar> clip_logits(const Mat<Scalar>& pixels, const Mat<Scalar>& f_t, const CalipOptions& options = {}) {
  const auto prepared = prepare_features(pixels, f_t, options);
  return matmul(prepared.f_v, prepared.f_t.transpose());
}

/// A = Fs Ft^T, the pixel-by-class similarity map.
template <typename Scalar>
Mat<Scalar> attention_map(const Mat<Scalar>& f_s, const Mat<Scalar>& f_t) {
  if (f_s.cols() != f_t.cols()) {
    throw DimensionError("attention_map channel mismatch: " + shape_of(f_s) + " vs " + shape_of(f_t));
  }
  return matmul(f_s, f_t.transpose());
}

/// softmax(A / alpha_t) Ft: each pixel becomes a convex combination of class rows.
template <typename Scalar>
Mat<Scalar> update_visual(const Mat<Scalar>& a, const Mat<Scalar>& f_t, double alpha_t) {
  if (a.cols() != f_t.rows()) {
    throw DimensionError("update_visual: attention " + shape_of(a) + " vs text " + shape_of(f_t));
  }
  return matmul(softmax_rows(a, alpha_t), f_t);
}

/// softmax(A^T / alpha_s) Fs: each class becomes a convex combination of pixels.
template <typename Scalar>
Mat<Scalar> update_textual(const Mat<Scalar>& a, const Mat<Scalar>& f_s, double alpha_s) {
  if (a.rows() != f_s.rows()) {
    throw DimensionError("update_textual: attention " + shape_of(a) + " vs spatial " + shape_of(f_s));
  }
  return matmul(softmax_rows(a.transpose(), alpha_s), f_s);
}

/// Weighted sum of the masked logit terms, accumulated in 64-bit in term order.
template <typename Scalar>
Mat<Scalar> fuse_logits(const CalipOutputs<Scalar>& out, const CalipHyper& hyper,
                        const LogitMask& mask = LogitMask::standard()) {
  using Acc = Accumulator<Scalar>;
  const Eigen::Index k = out.logits_clip.cols();
  const std::array<const Mat<Scalar>*, 4> terms = {&out.logits_clip, &out.logits_textual, &out.logits_visual,
                                                   &out.logits_both};
  const std::array<double, 4> weights = {hyper.beta1, hyper.beta2, hyper.beta3, mask.fourth_weight()};
  Mat<Scalar> fused(1, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    Acc sum = 0;
    for (int t = 0; t < 4; ++t) {
      if (mask.has(t + 1)) sum += static_cast<Acc>(weights[t]) * static_cast<Acc>((*terms[t])(0, j));
    }
    fused(0, j) = static_cast<Scalar>(sum);
  }
  return fused;
}

/// Zero-shot forward pass: bidirectional parameter-free attention and
/// three-term logit fusion for one image.
template <typename Scalar>
CalipOutputs<Scalar> calip_forward(const SpatialMap<Scalar>& f_s_raw, const Mat<Scalar>& f_t,
                                   const CalipHyper& hyper, const CalipOptions& options = {}) {
  hyper.validate();
  const auto in = prepare_features(f_s_raw.pixels(), f_t, options);

  CalipOutputs<Scalar> out;
  out.f_v = in.f_v;
  out.attention = attention_map(in.f_s, in.f_t);
  out.f_s_a = update_visual(out.attention, in.f_t, hyper.alpha_t);
  out.f_t_a = update_textual(out.attention, in.f_s, hyper.alpha_s);

  const Mat<Scalar> pooled = pool_max_avg(out.f_s_a);
  out.f_v_a = options.renormalize_updates ? l2_normalize_rows(pooled) : pooled;
  const Mat<Scalar> f_t_a_n = options.renormalize_updates ? l2_normalize_rows(out.f_t_a) : out.f_t_a;

  out.logits_clip = matmul(in.f_v, in.f_t.transpose());
  out.logits_textual = matmul(in.f_v, f_t_a_n.transpose());
  out.logits_visual = matmul(out.f_v_a, in.f_t.transpose());
  out.logits_both = matmul(out.f_v_a, f_t_a_n.transpose());
  out.logits_fused = fuse_logits(out, hyper);
  return out;
}

/// Predicted class: argmax of the fused logits, lowest index on ties.
template <typename Scalar>
Eigen::Index predict(const CalipOutputs<Scalar>& out) {
  return argmax_row(out.logits_fused);
}

}  // namespace calip
