#include "calip/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace calip {

void TrainConfig::validate() const {
  if (epochs < 1) throw ParameterError("epochs must be >= 1");
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ParameterError("lr must be > 0, got " + std::to_string(lr));
  if (!(ce_temperature > 0.0) || !std::isfinite(ce_temperature)) {
    throw ParameterError("ce_temperature must be > 0, got " + std::to_string(ce_temperature));
  }
  hyper.validate();
}

double learning_rate_at(const TrainConfig& config, std::size_t epoch) {
  if (config.schedule == LrSchedule::Constant) return config.lr;
  const double progress = static_cast<double>(epoch) / static_cast<double>(config.epochs);
  return 0.5 * config.lr * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

std::vector<LabeledMap<float>> gather(const FeatureBundle& bundle, std::span<const std::size_t> indices) {
  std::vector<LabeledMap<float>> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= bundle.images.size()) {
      throw ParameterError("image index " + std::to_string(i) + " out of range for " +
                           std::to_string(bundle.images.size()) + " images");
    }
    out.push_back({&bundle.images[i].spatial, static_cast<Eigen::Index>(bundle.images[i].label)});
  }
  return out;
}

std::size_t resolve_threads(const TrainConfig& config) {
  return config.threads == 0 ? thread_budget() : config.threads;
}

}  // namespace

std::pair<double, double> fs_loss_and_accuracy(const FeatureBundle& bundle, std::span<const std::size_t> indices,
                                               const ProjectionParams<float>& params, const TrainConfig& config) {
  const auto samples = gather(bundle, indices);
  if (samples.empty()) return {0.0, 0.0};
  std::vector<double> losses(samples.size());
  std::vector<char> correct(samples.size());
  parallel_for(
      samples.size(),
      [&](std::size_t i) {
        const auto out = fs_forward(*samples[i].spatial, bundle.text_features, params, config.hyper, config.layers,
                                    config.options);
        losses[i] = fs_loss(out.logits_fused, samples[i].label, config.ce_temperature);
        correct[i] = predict(out) == samples[i].label;
      },
      resolve_threads(config));
  double loss = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    loss += losses[i];
    hits += correct[i] ? 1 : 0;
  }
  const auto n = static_cast<double>(samples.size());
  return {loss / n, 100.0 * static_cast<double>(hits) / n};
}

TrainResult fs_train(const FeatureBundle& bundle, std::span<const std::size_t> indices, const TrainConfig& config) {
  config.validate();
  if (indices.empty()) throw ProtocolError("empty training set");
  const auto samples = gather(bundle, indices);
  std::vector<bool> covered(static_cast<std::size_t>(bundle.classes()), false);
  for (const auto& s : samples) covered[static_cast<std::size_t>(s.label)] = true;
  for (std::size_t k = 0; k < covered.size(); ++k) {
    if (!covered[k]) throw ProtocolError("class \"" + bundle.class_names[k] + "\" has no training samples");
  }
  const Eigen::Index c = bundle.channels();
  const std::size_t threads = resolve_threads(config);
  const auto settings = config.loss_settings();

  std::mt19937_64 rng(config.seed);
  TrainResult result;
  result.params = ProjectionParams<float>::random_init(c, rng);
  result.initial_loss = fs_loss_and_accuracy(bundle, indices, result.params, config).first;

  std::vector<std::size_t> order(samples.size());
  std::vector<LabeledMap<float>> batch;
  batch.reserve(config.batch_size);
  result.epoch_loss.reserve(config.epochs);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    const auto lr = static_cast<float>(learning_rate_at(config, epoch));

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(samples[order[i]]);
      const auto step =
          fs_backward<float>(batch, bundle.text_features, result.params, settings, threads);
      epoch_loss += step.mean_loss * static_cast<double>(batch.size());
      auto dst = result.params.tensors();
      const auto grad = step.grads.tensors();
      for (std::size_t t = 0; t < dst.size(); ++t) *dst[t] -= lr * *grad[t];
      for (std::size_t t = 0; t < dst.size(); ++t) {
        if (!dst[t]->allFinite()) {
          throw IntegrityError("parameter " + std::string(ProjectionParams<float>::kTensorNames[t]) +
                               " became non-finite in epoch " + std::to_string(epoch));
        }
      }
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
  }

  const auto [loss, accuracy] = fs_loss_and_accuracy(bundle, indices, result.params, config);
  result.final_loss = loss;
  result.train_accuracy = accuracy;
  return result;
}

}  // namespace calip
