#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "calip/feature_store.hpp"
#include "calip/parametric.hpp"

namespace calip {

enum class LrSchedule { Cosine, Constant };

/// Few-shot fine-tuning settings. Defaults: 200 epochs, batch 32, SGD at 2e-3
/// with cosine annealing to zero, cross-entropy over 100x-scaled logits.
struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  double ce_temperature = 100.0;
  CalipHyper hyper{2.0, 2.0, 1.0, 0.12, 0.12};
  ProjectionMask layers = ProjectionMask::all();
  LrSchedule schedule = LrSchedule::Cosine;
  CalipOptions options;
  /// Worker threads for per-sample gradients; 0 uses thread_budget().
  std::size_t threads = 0;

  void validate() const;
  LossSettings loss_settings() const { return {hyper, ce_temperature, layers, options}; }
};

/// Learning rate used throughout epoch `epoch` (0-based).
double learning_rate_at(const TrainConfig& config, std::size_t epoch);

struct TrainResult {
  ProjectionParams<float> params;
  std::vector<double> epoch_loss;  ///< mean minibatch loss per epoch, pre-step parameters
  double initial_loss = 0.0;       ///< mean loss over the training set at initialization
  double final_loss = 0.0;         ///< mean loss over the training set after training
  double train_accuracy = 0.0;     ///< percent, with the final parameters
};

/// Mean loss and accuracy (percent) of `params` over the given images.
std::pair<double, double> fs_loss_and_accuracy(const FeatureBundle& bundle, std::span<const std::size_t> indices,
                                               const ProjectionParams<float>& params, const TrainConfig& config);

/// Plain minibatch SGD on the images at `indices`. The bundle is read only.
/// Deterministic for a given (bundle, indices, config) regardless of thread count.
TrainResult fs_train(const FeatureBundle& bundle, std::span<const std::size_t> indices, const TrainConfig& config);

}  // namespace calip
