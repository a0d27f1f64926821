#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "calip/parametric.hpp"

namespace calip {

struct GradCheckDims {
  Eigen::Index pixels = 4;
  Eigen::Index classes = 3;
  Eigen::Index channels = 8;

  /// Parses "HWxKxC", e.g. "4x3x8".
  static GradCheckDims parse(const std::string& text);
  std::string to_string() const;
};

/// Comparison of analytic against central-difference gradients.
///
/// Per entry the error is |analytic - numeric| / max(|analytic|, |numeric|, floor),
/// floor = 1e-2 * max |numeric| over all eight tensors (plus 1e-12), so entries
/// that are tiny relative to the whole gradient are judged against its scale.
struct GradCheckReport {
  static constexpr double kThreshold = 1e-3;

  std::array<double, 8> max_relative_error{};  ///< per tensor, ProjectionParams order
  double max_error = 0.0;
  std::size_t checked = 0;        ///< entries compared
  std::size_t skipped_kinks = 0;  ///< entries whose perturbation moved a max-pool argmax
  bool pass = false;

  std::string to_string() const;
};

/// Small random problem in 64-bit: a two-image batch, raw text rows and
/// randomly initialized projections with non-zero biases.
struct GradCheckInstance {
  std::vector<SpatialMap<double>> maps;
  std::vector<Eigen::Index> labels;
  MatD text;
  ProjectionParams<double> params;
  LossSettings settings;

  std::vector<LabeledMap<double>> batch() const;
};

GradCheckInstance make_gradcheck_instance(std::uint64_t seed, const GradCheckDims& dims);

/// Analytic gradients from fs_backward on the 64-bit instance.
ProjectionParams<double> analytic_gradients(const GradCheckInstance& inst);

/// Central differences with the given step. `kinks` receives, per tensor
/// entry, whether either perturbation changed a max-pool argmax.
ProjectionParams<double> numeric_gradients(const GradCheckInstance& inst, double step,
                                           std::array<std::vector<bool>, 8>* kinks = nullptr);

GradCheckReport compare_gradients(const ProjectionParams<double>& analytic, const ProjectionParams<double>& numeric,
                                  const std::array<std::vector<bool>, 8>* kinks = nullptr);

/// Dimensions must satisfy HW <= 8, K <= 4, C <= 16.
GradCheckReport grad_check(std::uint64_t seed, const GradCheckDims& dims = {});

}  // namespace calip
