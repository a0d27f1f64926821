#pragma once

// Straight-line float64 reference for the zero-shot and parametric pipelines.
// Plain nested loops over std::vector; shares no code with the engine.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace calip::oracle {

using Grid = std::vector<std::vector<double>>;

template <typename M>
Grid to_grid(const M& m) {
  Grid g(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j) g[i][j] = static_cast<double>(m(i, j));
  return g;
}

inline Grid product(const Grid& a, const Grid& b) {
  Grid out(a.size(), std::vector<double>(b.empty() ? 0 : b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < out[i].size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      out[i][j] = s;
    }
  return out;
}

inline Grid transpose(const Grid& a) {
  Grid out(a.empty() ? 0 : a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) out[j][i] = a[i][j];
  return out;
}

inline Grid normalize(const Grid& a) {
  Grid out = a;
  for (auto& row : out) {
    double sq = 0.0;
    for (double v : row) sq += v * v;
    const double n = std::sqrt(sq);
    for (double& v : row) v = n < 1e-12 ? 0.0 : v / n;
  }
  return out;
}

inline Grid softmax(const Grid& a, double t) {
  Grid out = a;
  for (auto& row : out) {
    double m = row.empty() ? 0.0 : row[0] / t;
    for (double v : row) m = std::max(m, v / t);
    double s = 0.0;
    for (double& v : row) {
      v = std::exp(v / t - m);
      s += v;
    }
    for (double& v : row) v /= s;
  }
  return out;
}

inline Grid mean_rows(const Grid& a) {
  Grid out(1, std::vector<double>(a[0].size(), 0.0));
  for (const auto& row : a)
    for (std::size_t j = 0; j < row.size(); ++j) out[0][j] += row[j] / static_cast<double>(a.size());
  return out;
}

inline Grid max_avg_rows(const Grid& a) {
  Grid mean = mean_rows(a);
  Grid out = mean;
  for (std::size_t j = 0; j < a[0].size(); ++j) {
    double m = a[0][j];
    for (const auto& row : a) m = std::max(m, row[j]);
    out[0][j] = 0.5 * (m + mean[0][j]);
  }
  return out;
}

inline Grid affine(const Grid& x, const Grid& w, const Grid& b) {
  Grid y = product(x, transpose(w));
  for (auto& row : y)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[0][j];
  return y;
}

struct ZeroShot {
  Grid a, f_s_a, f_t_a, f_v, f_v_a, clip, textual, visual, both, fused;
};

inline ZeroShot zero_shot(const Grid& pixels, const Grid& text, double alpha_t, double alpha_s, double b1, double b2,
                          double b3) {
  ZeroShot z;
  const Grid fs = normalize(pixels);
  const Grid ft = normalize(text);
  z.f_v = normalize(mean_rows(fs));
  z.a = product(fs, transpose(ft));
  z.f_s_a = product(softmax(z.a, alpha_t), ft);
  z.f_t_a = product(softmax(transpose(z.a), alpha_s), fs);
  z.f_v_a = normalize(max_avg_rows(z.f_s_a));
  const Grid fta_n = normalize(z.f_t_a);
  z.clip = product(z.f_v, transpose(ft));
  z.textual = product(z.f_v, transpose(fta_n));
  z.visual = product(z.f_v_a, transpose(ft));
  z.both = product(z.f_v_a, transpose(fta_n));
  z.fused = z.clip;
  for (std::size_t j = 0; j < z.fused[0].size(); ++j)
    z.fused[0][j] = b1 * z.clip[0][j] + b2 * z.textual[0][j] + b3 * z.visual[0][j];
  return z;
}

struct Parametric {
  Grid a_t, a_s, f_t_a, f_s_a, fused;
};

/// params: w_q, b_q, w_k, b_k, w_v, b_v, w_post, b_post
inline Parametric parametric(const Grid& pixels, const Grid& text, const std::vector<Grid>& params, double b1,
                             double b2, double b3) {
  Parametric p;
  const Grid fs = normalize(pixels);
  const Grid ft = normalize(text);
  const Grid fv = normalize(mean_rows(fs));
  const double scale = std::sqrt(static_cast<double>(ft[0].size()));
  const Grid qt = affine(ft, params[0], params[1]), kt = affine(ft, params[2], params[3]),
             vt = affine(ft, params[4], params[5]);
  const Grid qs = affine(fs, params[0], params[1]), ks = affine(fs, params[2], params[3]),
             vs = affine(fs, params[4], params[5]);
  p.a_t = softmax(product(qt, transpose(ks)), scale);
  p.a_s = softmax(product(qs, transpose(kt)), scale);
  p.f_t_a = affine(product(p.a_t, vs), params[6], params[7]);
  p.f_s_a = affine(product(p.a_s, vt), params[6], params[7]);
  const Grid fva = normalize(max_avg_rows(p.f_s_a));
  const Grid clip = product(fv, transpose(ft));
  const Grid textual = product(fv, transpose(normalize(p.f_t_a)));
  const Grid visual = product(fva, transpose(ft));
  p.fused = clip;
  for (std::size_t j = 0; j < clip[0].size(); ++j)
    p.fused[0][j] = b1 * clip[0][j] + b2 * textual[0][j] + b3 * visual[0][j];
  return p;
}

inline double cross_entropy(const Grid& logits, std::size_t label, double tau) {
  double m = tau * logits[0][0];
  for (double v : logits[0]) m = std::max(m, tau * v);
  double s = 0.0;
  for (double v : logits[0]) s += std::exp(tau * v - m);
  return m + std::log(s) - tau * logits[0][label];
}

template <typename M>
double max_abs_diff(const M& m, const Grid& g) {
  if (static_cast<std::size_t>(m.rows()) != g.size() || (!g.empty() && static_cast<std::size_t>(m.cols()) != g[0].size()))
    return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j)
      worst = std::max(worst, std::abs(static_cast<double>(m(i, j)) - g[i][j]));
  return worst;
}

}  // namespace calip::oracle
