#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "calip/attention.hpp"
#include "calip/feature_store.hpp"
#include "calip/training.hpp"

namespace calip {

/// Shot counts of the few-shot protocol.
inline constexpr std::size_t kProtocolShots[] = {1, 2, 4, 8, 16};
bool is_protocol_shots(std::size_t shots);

/// Per-class train/validation index lists into a bundle.
struct FewShotSplit {
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> train;  ///< [class] -> image indices, exactly `shots` each
  std::vector<std::vector<std::size_t>> val;    ///< [class] -> remaining indices of that class

  std::vector<std::size_t> train_indices() const;  ///< flattened, class-major
  std::vector<std::size_t> val_indices() const;

  friend bool operator==(const FewShotSplit&, const FewShotSplit&) = default;
};

/// Seeded uniform sampling without replacement of `shots` images per class.
/// Throws ProtocolError naming the first class with fewer than `shots` images.
FewShotSplit sample_split(const FeatureBundle& bundle, std::size_t shots, std::uint64_t seed);

struct EvalReport {
  std::string mode;  ///< "zeroshot", "fewshot" or "clip"
  double accuracy = 0.0;  ///< 100 * n_correct / n_total (0 when empty)
  std::vector<std::optional<double>> per_class_accuracy;  ///< empty classes have no value
  std::size_t n_correct = 0;
  std::size_t n_total = 0;
  CalipHyper hyper;
  LogitMask mask;
  std::uint64_t seed = 0;
  double wall_time_ms = 0.0;

  /// One line of JSON, no trailing newline.
  std::string to_json_line() const;
};

/// Zero-shot evaluation over `indices` (all images when empty). The fused
/// logits are restricted to the terms selected by `mask`.
EvalReport evaluate_zeroshot(const FeatureBundle& bundle, const CalipHyper& hyper,
                             const LogitMask& mask = LogitMask::standard(),
                             std::span<const std::size_t> indices = {}, const CalipOptions& options = {});

/// Plain cosine matching of the pooled image feature against class text rows.
EvalReport evaluate_clip_baseline(const FeatureBundle& bundle, std::span<const std::size_t> indices = {},
                                  const CalipOptions& options = {});

/// Evaluation with trained projections.
EvalReport evaluate_fewshot(const FeatureBundle& bundle, const ProjectionParams<float>& params,
                            const CalipHyper& hyper, const LogitMask& mask = LogitMask::standard(),
                            std::span<const std::size_t> indices = {},
                            const ProjectionMask& layers = ProjectionMask::all(), const CalipOptions& options = {});

/// Hyperparameter grid; beta1 stays at 1.
struct SweepGrid {
  std::vector<double> beta2{1.0};
  std::vector<double> beta3{0.1};
  std::vector<double> alpha_t{2.0};
  std::vector<double> alpha_s{2.0};

  void validate() const;
  std::size_t size() const { return beta2.size() * beta3.size() * alpha_t.size() * alpha_s.size(); }

  /// Parses "beta2=0.08:0.02:0.18,beta3=0.1,alpha_t=2" (start:step:end or a
  /// single value per key). Unlisted keys keep their defaults. Errors name the
  /// character position of the failure.
  static SweepGrid parse(const std::string& text);
};

enum class SweepMode { ZeroShot, FewShot };

struct SweepRow {
  CalipHyper hyper;
  double accuracy = 0.0;
  std::size_t n_correct = 0;
  std::size_t n_total = 0;
};

struct SweepResult {
  CalipHyper best;
  double best_accuracy = 0.0;
  std::vector<SweepRow> table;  ///< grid order: beta2 outermost, alpha_s innermost
};

/// Exhaustive grid evaluation. Ties on accuracy go to the lexicographically
/// smallest (beta2, beta3, alpha_t, alpha_s). FewShot mode needs `params`.
SweepResult sweep(const FeatureBundle& bundle, const SweepGrid& grid, SweepMode mode,
                  const ProjectionParams<float>* params = nullptr, std::span<const std::size_t> indices = {},
                  const LogitMask& mask = LogitMask::standard());

struct AblationRow {
  std::string label;
  ProjectionMask layers;
  double accuracy = 0.0;
  std::size_t n_correct = 0;
  std::size_t n_total = 0;
};

/// The five pre/post-projection configurations: none (zero-shot), pre only,
/// pre + textual post, pre + visual post, all. Each parametric row is trained
/// on the split's train indices and evaluated on its validation indices.
std::vector<AblationRow> ablation_projections(const FeatureBundle& bundle, const FewShotSplit& split,
                                              const TrainConfig& config);

struct LogitAblationRow {
  LogitMask mask;
  double accuracy = 0.0;
  std::size_t n_correct = 0;
  std::size_t n_total = 0;
};

/// The six logit-term combinations {1}, {1,2}, {1,3}, {1,4}, {1,2,3}, {1,2,3,4},
/// evaluated zero-shot, or with `params` when given.
std::vector<LogitAblationRow> ablation_logits(const FeatureBundle& bundle, const CalipHyper& hyper,
                                              std::span<const std::size_t> indices = {},
                                              const ProjectionParams<float>* params = nullptr);

/// Tuned logit weights per dataset for zero-shot and few-shot use.
struct HyperPreset {
  std::string_view dataset;
  double zeroshot_beta2, zeroshot_beta3;
  double fewshot_beta2, fewshot_beta3;

  CalipHyper zeroshot() const { return {2.0, 2.0, 1.0, zeroshot_beta2, zeroshot_beta3}; }
  CalipHyper fewshot() const { return {2.0, 2.0, 1.0, fewshot_beta2, fewshot_beta3}; }
};

std::span<const HyperPreset> hyper_presets();
/// Case-insensitive lookup; throws ParameterError listing known names.
const HyperPreset& find_preset(std::string_view dataset);

}  // namespace calip
