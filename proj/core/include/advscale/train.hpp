#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "advscale/attacks.hpp"
#include "advscale/data.hpp"
#include "advscale/network.hpp"

namespace advscale {

// Replace a fraction of every minibatch with adversarial examples generated
// against the current parameters.
struct AdvMix {
  AttackSpec attack;
  double fraction = 0.5;
};

struct TrainConfig {
  double learning_rate = 0.02;
  double momentum = 0.9;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::optional<AdvMix> adv_mix;
  // Stop early once clean training accuracy reaches this value (checked after
  // every epoch).
  std::optional<double> stop_at_train_accuracy;

  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  // Accuracy on the inputs actually seen during the epoch (mixed batches,
  // dropout active); clean accuracy when stop_at_train_accuracy is set.
  double train_accuracy = 0.0;
};

struct TrainResult {
  Network net;
  std::vector<EpochMetrics> metrics;
};

// Minibatch SGD with momentum. Deterministic given cfg.seed. Throws
// TrainingDiverged on a non-finite loss.
TrainResult train(Network net, const Dataset& data, const TrainConfig& cfg, const LossSpec& spec);

}  // namespace advscale
