#pragma once

#include <array>
#include <cmath>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "calip/attention.hpp"
#include "calip/parallel.hpp"
#include "calip/tensor.hpp"

namespace calip {

/// Which learnable layers are active. A disabled pre-projection passes the
/// modality's features through as query, key and value; a disabled
/// post-projection passes the attention output through unchanged.
struct ProjectionMask {
  bool visual_pre = true;
  bool visual_post = true;
  bool text_pre = true;
  bool text_post = true;

  static constexpr ProjectionMask all() { return {true, true, true, true}; }
  static constexpr ProjectionMask none() { return {false, false, false, false}; }
  constexpr bool any() const { return visual_pre || visual_post || text_pre || text_post; }

  friend constexpr bool operator==(const ProjectionMask&, const ProjectionMask&) = default;
};

/// Shared query/key/value pre-projection and the single post-projection.
/// Every layer computes y = x W^T + b on row vectors; biases are 1 x C.
template <typename Scalar>
struct ProjectionParams {
  Mat<Scalar> w_q, b_q;
  Mat<Scalar> w_k, b_k;
  Mat<Scalar> w_v, b_v;
  Mat<Scalar> w_post, b_post;

  static constexpr std::size_t kTensorCount = 8;
  static constexpr std::array<std::string_view, kTensorCount> kTensorNames = {
      "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_post", "b_post"};

  static ProjectionParams zeros(Eigen::Index c) {
    ProjectionParams p;
    for (auto* t : p.tensors()) *t = Mat<Scalar>::Zero(1, c);
    p.w_q = p.w_k = p.w_v = p.w_post = Mat<Scalar>::Zero(c, c);
    return p;
  }

  static ProjectionParams identity(Eigen::Index c) {
    ProjectionParams p = zeros(c);
    p.w_q = p.w_k = p.w_v = p.w_post = Mat<Scalar>::Identity(c, c);
    return p;
  }

  /// Weights ~ U(-1/sqrt(C), 1/sqrt(C)), biases zero.
  template <typename Rng>
  static ProjectionParams random_init(Eigen::Index c, Rng& rng) {
    ProjectionParams p = zeros(c);
    const double bound = 1.0 / std::sqrt(static_cast<double>(c));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto* w : {&p.w_q, &p.w_k, &p.w_v, &p.w_post}) {
      for (Eigen::Index i = 0; i < w->size(); ++i) w->data()[i] = static_cast<Scalar>(dist(rng));
    }
    return p;
  }

  Eigen::Index channels() const { return w_q.rows(); }

  std::array<Mat<Scalar>*, kTensorCount> tensors() {
    return {&w_q, &b_q, &w_k, &b_k, &w_v, &b_v, &w_post, &b_post};
  }
  std::array<const Mat<Scalar>*, kTensorCount> tensors() const {
    return {&w_q, &b_q, &w_k, &b_k, &w_v, &b_v, &w_post, &b_post};
  }

  /// Throws DimensionError on shape problems, IntegrityError on non-finite entries.
  void validate(Eigen::Index c) const {
    const auto ts = tensors();
    for (std::size_t i = 0; i < kTensorCount; ++i) {
      const bool is_bias = i % 2 == 1;
      const Eigen::Index rows = is_bias ? 1 : c;
      if (ts[i]->rows() != rows || ts[i]->cols() != c) {
        throw DimensionError(std::string(kTensorNames[i]) + " is " + shape_of(*ts[i]) + ", expected " +
                             std::to_string(rows) + "x" + std::to_string(c));
      }
      if (!ts[i]->allFinite()) throw IntegrityError(std::string(kTensorNames[i]) + " has non-finite entries");
    }
  }

  template <typename Other>
  ProjectionParams<Other> cast() const {
    ProjectionParams<Other> out;
    auto dst = out.tensors();
    const auto src = tensors();
    for (std::size_t i = 0; i < kTensorCount; ++i) *dst[i] = src[i]->template cast<Other>();
    return out;
  }

  friend bool operator==(const ProjectionParams& a, const ProjectionParams& b) {
    const auto ta = a.tensors();
    const auto tb = b.tensors();
    for (std::size_t i = 0; i < kTensorCount; ++i) {
      if (ta[i]->rows() != tb[i]->rows() || ta[i]->cols() != tb[i]->cols() || *ta[i] != *tb[i]) return false;
    }
    return true;
  }
};

/// Everything the reverse pass needs from one forward evaluation.
template <typename Scalar>
struct FsTrace {
  PreparedFeatures<Scalar> in;
  Mat<Scalar> q_t, k_t, v_t;  ///< K x C
  Mat<Scalar> q_s, k_s, v_s;  ///< HW x C
  Mat<Scalar> a_t;            ///< K x HW, softmax(Q_t K_s^T / sqrt(C))
  Mat<Scalar> m_t;            ///< K x C, A_t V_s
  Mat<Scalar> m_s;            ///< HW x C, A_s V_t
  Mat<Scalar> pooled;         ///< 1 x C, before normalization
  Mat<Scalar> f_t_a_n;        ///< K x C, rows used in the logit product
  CalipOutputs<Scalar> outputs;  ///< attention holds A_s (HW x K)
};

namespace detail {

template <typename Scalar>
Mat<Scalar> linear(const Mat<Scalar>& x, const Mat<Scalar>& w, const Mat<Scalar>& b) {
  Mat<Scalar> y = matmul(x, w.transpose());
  y.rowwise() += b.row(0);
  return y;
}

/// Reverse of y = x / |x| per row. Rows that normalized to zero pass no gradient.
template <typename Scalar>
Mat<Scalar> l2_normalize_rows_backward(const Mat<Scalar>& x, const Mat<Scalar>& y, const Mat<Scalar>& dy) {
  using Acc = Accumulator<Scalar>;
  Mat<Scalar> dx(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Acc sq = 0, dot = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      sq += static_cast<Acc>(x(r, c)) * static_cast<Acc>(x(r, c));
      dot += static_cast<Acc>(y(r, c)) * static_cast<Acc>(dy(r, c));
    }
    const Acc norm = std::sqrt(sq);
    if (!(norm >= Acc(1e-12))) {
      dx.row(r).setZero();
      continue;
    }
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      dx(r, c) = static_cast<Scalar>((static_cast<Acc>(dy(r, c)) - static_cast<Acc>(y(r, c)) * dot) / norm);
    }
  }
  return dx;
}

/// Reverse of row-wise softmax(s / t) given its output a.
template <typename Scalar>
Mat<Scalar> softmax_rows_backward(const Mat<Scalar>& a, const Mat<Scalar>& da, double temperature) {
  using Acc = Accumulator<Scalar>;
  Mat<Scalar> ds(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    Acc dot = 0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) dot += static_cast<Acc>(a(r, c)) * static_cast<Acc>(da(r, c));
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      ds(r, c) = static_cast<Scalar>(static_cast<Acc>(a(r, c)) * (static_cast<Acc>(da(r, c)) - dot) /
                                     static_cast<Acc>(temperature));
    }
  }
  return ds;
}

/// First pixel index attaining each channel's maximum, matching pool_max_avg.
template <typename Scalar>
std::vector<Eigen::Index> pool_argmax(const Mat<Scalar>& x) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.cols()), 0);
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index p = 1; p < x.rows(); ++p) {
      if (x(p, c) > x(idx[c], c)) idx[c] = p;
    }
  }
  return idx;
}

template <typename Scalar>
Mat<Scalar> pool_max_avg_backward(const Mat<Scalar>& x, const Mat<Scalar>& dout) {
  const auto idx = pool_argmax(x);
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(x.rows());
  Mat<Scalar> dx(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const Scalar half = Scalar(0.5) * dout(0, c);
    dx.col(c).setConstant(half * inv_n);
    dx(idx[c], c) += half;
  }
  return dx;
}

template <typename Scalar>
void accumulate_linear_grad(const Mat<Scalar>& x, const Mat<Scalar>& dy, Mat<Scalar>& dw, Mat<Scalar>& db) {
  dw += matmul(dy.transpose(), x);
  db += dy.colwise().sum();
}

}  // namespace detail

/// Parametric forward pass keeping every intermediate.
template <typename Scalar>
FsTrace<Scalar> fs_forward_trace(const SpatialMap<Scalar>& f_s_raw, const Mat<Scalar>& f_t,
                                 const ProjectionParams<Scalar>& params, const CalipHyper& hyper,
                                 const ProjectionMask& mask = ProjectionMask::all(),
                                 const CalipOptions& options = {}) {
  hyper.validate();
  FsTrace<Scalar> t;
  t.in = prepare_features(f_s_raw.pixels(), f_t, options);
  const Eigen::Index c = t.in.f_t.cols();
  params.validate(c);
  const double scale = std::sqrt(static_cast<double>(c));

  using detail::linear;
  if (mask.text_pre) {
    t.q_t = linear(t.in.f_t, params.w_q, params.b_q);
    t.k_t = linear(t.in.f_t, params.w_k, params.b_k);
    t.v_t = linear(t.in.f_t, params.w_v, params.b_v);
  } else {
    t.q_t = t.k_t = t.v_t = t.in.f_t;
  }
  if (mask.visual_pre) {
    t.q_s = linear(t.in.f_s, params.w_q, params.b_q);
    t.k_s = linear(t.in.f_s, params.w_k, params.b_k);
    t.v_s = linear(t.in.f_s, params.w_v, params.b_v);
  } else {
    t.q_s = t.k_s = t.v_s = t.in.f_s;
  }

  auto& out = t.outputs;
  t.a_t = softmax_rows(matmul(t.q_t, t.k_s.transpose()), scale);
  out.attention = softmax_rows(matmul(t.q_s, t.k_t.transpose()), scale);
  t.m_t = matmul(t.a_t, t.v_s);
  t.m_s = matmul(out.attention, t.v_t);
  out.f_t_a = mask.text_post ? linear(t.m_t, params.w_post, params.b_post) : t.m_t;
  out.f_s_a = mask.visual_post ? linear(t.m_s, params.w_post, params.b_post) : t.m_s;

  t.pooled = pool_max_avg(out.f_s_a);
  out.f_v = t.in.f_v;
  out.f_v_a = options.renormalize_updates ? l2_normalize_rows(t.pooled) : t.pooled;
  t.f_t_a_n = options.renormalize_updates ? l2_normalize_rows(out.f_t_a) : out.f_t_a;

  out.logits_clip = matmul(t.in.f_v, t.in.f_t.transpose());
  out.logits_textual = matmul(t.in.f_v, t.f_t_a_n.transpose());
  out.logits_visual = matmul(out.f_v_a, t.in.f_t.transpose());
  out.logits_both = matmul(out.f_v_a, t.f_t_a_n.transpose());
  out.logits_fused = fuse_logits(out, hyper);
  return t;
}

/// Parametric forward pass: shared pre-projection, scaled-dot-product
/// attention in both directions, shared post-projection, three-term fusion.
template <typename Scalar>
CalipOutputs<Scalar> fs_forward(const SpatialMap<Scalar>& f_s_raw, const Mat<Scalar>& f_t,
                                const ProjectionParams<Scalar>& params, const CalipHyper& hyper,
                                const ProjectionMask& mask = ProjectionMask::all(),
                                const CalipOptions& options = {}) {
  return fs_forward_trace(f_s_raw, f_t, params, hyper, mask, options).outputs;
}

/// Cross-entropy of softmax(ce_temperature * logits) against `label`.
template <typename Derived>
double fs_loss(const Eigen::MatrixBase<Derived>& logits, Eigen::Index label, double ce_temperature) {
  if (label < 0 || label >= logits.cols()) {
    throw ParameterError("label " + std::to_string(label) + " out of range for " + std::to_string(logits.cols()) +
                         " classes");
  }
  if (!(ce_temperature > 0.0)) throw ParameterError("ce_temperature must be > 0");
  Eigen::Index top = 0;
  for (Eigen::Index j = 1; j < logits.cols(); ++j) {
    if (logits(0, j) > logits(0, top)) top = j;
  }
  const double peak = ce_temperature * static_cast<double>(logits(0, top));
  double rest = 0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    if (j != top) rest += std::exp(ce_temperature * double(logits(0, j)) - peak);
  }
  return peak - ce_temperature * static_cast<double>(logits(0, label)) + std::log1p(rest);
}

/// Loss settings shared by the gradient and training routines.
struct LossSettings {
  CalipHyper hyper;
  double ce_temperature = 100.0;
  ProjectionMask mask = ProjectionMask::all();
  CalipOptions options;
};

/// Loss and parameter gradients of a single labeled image.
template <typename Scalar>
double fs_sample_gradients(const FsTrace<Scalar>& t, Eigen::Index label, const ProjectionParams<Scalar>& params,
                           const LossSettings& s, ProjectionParams<Scalar>& grads) {
  using Acc = Accumulator<Scalar>;
  const auto& out = t.outputs;
  const Eigen::Index k = out.logits_fused.cols();
  const double loss = fs_loss(out.logits_fused, label, s.ce_temperature);

  // d loss / d fused = tau * (softmax(tau * fused) - onehot), label entry as
  // minus the off-label mass.
  Mat<Scalar> d_fused(1, k);
  {
    Acc peak = static_cast<Acc>(s.ce_temperature) * static_cast<Acc>(out.logits_fused(0, 0));
    for (Eigen::Index j = 1; j < k; ++j) {
      peak = std::max(peak, static_cast<Acc>(s.ce_temperature) * static_cast<Acc>(out.logits_fused(0, j)));
    }
    std::vector<Acc> e(static_cast<std::size_t>(k));
    Acc sum = 0;
    for (Eigen::Index j = 0; j < k; ++j) {
      e[j] = std::exp(static_cast<Acc>(s.ce_temperature) * static_cast<Acc>(out.logits_fused(0, j)) - peak);
      sum += e[j];
    }
    Acc off_label = 0;
    for (Eigen::Index j = 0; j < k; ++j) {
      if (j == label) continue;
      const Acc p = e[j] / sum;
      off_label += p;
      d_fused(0, j) = static_cast<Scalar>(static_cast<Acc>(s.ce_temperature) * p);
    }
    d_fused(0, label) = static_cast<Scalar>(-static_cast<Acc>(s.ce_temperature) * off_label);
  }

  const auto& hyper = s.hyper;
  // Term 2: fused += beta2 * Fv Tn^T  =>  dTn = beta2 * d_fused^T Fv
  Mat<Scalar> d_tn = static_cast<Scalar>(hyper.beta2) * matmul(d_fused.transpose(), t.in.f_v);
  // Term 3: fused += beta3 * Vn Ft^T  =>  dVn = beta3 * d_fused Ft
  Mat<Scalar> d_vn = static_cast<Scalar>(hyper.beta3) * matmul(d_fused, t.in.f_t);

  const Mat<Scalar> d_f_t_a = s.options.renormalize_updates
                                  ? detail::l2_normalize_rows_backward(out.f_t_a, t.f_t_a_n, d_tn)
                                  : d_tn;
  const Mat<Scalar> d_pooled = s.options.renormalize_updates
                                   ? detail::l2_normalize_rows_backward(t.pooled, out.f_v_a, d_vn)
                                   : d_vn;
  const Mat<Scalar> d_f_s_a = detail::pool_max_avg_backward(out.f_s_a, d_pooled);

  Mat<Scalar> d_m_t = d_f_t_a;
  if (s.mask.text_post) {
    detail::accumulate_linear_grad(t.m_t, d_f_t_a, grads.w_post, grads.b_post);
    d_m_t = matmul(d_f_t_a, params.w_post);
  }
  Mat<Scalar> d_m_s = d_f_s_a;
  if (s.mask.visual_post) {
    detail::accumulate_linear_grad(t.m_s, d_f_s_a, grads.w_post, grads.b_post);
    d_m_s = matmul(d_f_s_a, params.w_post);
  }

  // m_t = A_t V_s, m_s = A_s V_t
  const Mat<Scalar> d_a_t = matmul(d_m_t, t.v_s.transpose());
  const Mat<Scalar> d_v_s = matmul(t.a_t.transpose(), d_m_t);
  const Mat<Scalar> d_a_s = matmul(d_m_s, t.v_t.transpose());
  const Mat<Scalar> d_v_t = matmul(out.attention.transpose(), d_m_s);

  const double scale = std::sqrt(static_cast<double>(t.in.f_t.cols()));
  const Mat<Scalar> d_s_t = detail::softmax_rows_backward(t.a_t, d_a_t, scale);
  const Mat<Scalar> d_s_s = detail::softmax_rows_backward(out.attention, d_a_s, scale);
  // S_t = Q_t K_s^T / sqrt(C) (the 1/sqrt(C) is folded into the softmax backward)
  const Mat<Scalar> d_q_t = matmul(d_s_t, t.k_s);
  const Mat<Scalar> d_k_s = matmul(d_s_t.transpose(), t.q_t);
  const Mat<Scalar> d_q_s = matmul(d_s_s, t.k_t);
  const Mat<Scalar> d_k_t = matmul(d_s_s.transpose(), t.q_s);

  if (s.mask.text_pre) {
    detail::accumulate_linear_grad(t.in.f_t, d_q_t, grads.w_q, grads.b_q);
    detail::accumulate_linear_grad(t.in.f_t, d_k_t, grads.w_k, grads.b_k);
    detail::accumulate_linear_grad(t.in.f_t, d_v_t, grads.w_v, grads.b_v);
  }
  if (s.mask.visual_pre) {
    detail::accumulate_linear_grad(t.in.f_s, d_q_s, grads.w_q, grads.b_q);
    detail::accumulate_linear_grad(t.in.f_s, d_k_s, grads.w_k, grads.b_k);
    detail::accumulate_linear_grad(t.in.f_s, d_v_s, grads.w_v, grads.b_v);
  }
  return loss;
}

template <typename Scalar>
struct LabeledMap {
  const SpatialMap<Scalar>* spatial;
  Eigen::Index label;
};

template <typename Scalar>
struct GradientResult {
  ProjectionParams<Scalar> grads;
  double mean_loss = 0.0;
};

/// Ordered mean of per-sample gradients and losses.
template <typename Scalar>
GradientResult<Scalar> reduce_gradients(const std::vector<ProjectionParams<Scalar>>& per_sample,
                                        const std::vector<double>& losses) {
  using Acc = Accumulator<Scalar>;
  GradientResult<Scalar> result;
  const auto n = static_cast<Acc>(per_sample.size());
  auto dst = result.grads.tensors();
  for (std::size_t ti = 0; ti < ProjectionParams<Scalar>::kTensorCount; ++ti) {
    const auto& first = *per_sample.front().tensors()[ti];
    Mat<Acc> sum = Mat<Acc>::Zero(first.rows(), first.cols());
    for (const auto& g : per_sample) sum += g.tensors()[ti]->template cast<Acc>();
    *dst[ti] = (sum / n).template cast<Scalar>();
  }
  double total = 0;
  for (double l : losses) total += l;
  result.mean_loss = total / static_cast<double>(losses.size());
  return result;
}

/// Mean-over-batch loss gradients. Per-sample gradients are summed in batch
/// order, so the result does not depend on how samples were scheduled.
template <typename Scalar>
GradientResult<Scalar> fs_backward(std::span<const LabeledMap<Scalar>> batch, const Mat<Scalar>& f_t,
                                   const ProjectionParams<Scalar>& params, const LossSettings& settings,
                                   std::size_t threads = 1) {
  if (batch.empty()) throw ParameterError("fs_backward needs a non-empty batch");
  const Eigen::Index c = f_t.cols();
  std::vector<ProjectionParams<Scalar>> per_sample(batch.size(), ProjectionParams<Scalar>::zeros(c));
  std::vector<double> losses(batch.size());
  parallel_for(
      batch.size(),
      [&](std::size_t i) {
        const auto trace =
            fs_forward_trace(*batch[i].spatial, f_t, params, settings.hyper, settings.mask, settings.options);
        losses[i] = fs_sample_gradients(trace, batch[i].label, params, settings, per_sample[i]);
      },
      threads);
  return reduce_gradients(per_sample, losses);
}

}  // namespace calip
