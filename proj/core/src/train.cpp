#include "advscale/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "advscale/error.hpp"

namespace advscale {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw InvalidArgument("learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must be in [0,1)");
  if (batch_size == 0) throw InvalidArgument("batch size must be positive");
  if (adv_mix) {
    if (!(adv_mix->fraction >= 0.0 && adv_mix->fraction <= 1.0)) {
      throw InvalidArgument("adversarial mixing fraction must be in [0,1]");
    }
    adv_mix->attack.validate();
  }
}

TrainResult train(Network net, const Dataset& data, const TrainConfig& cfg, const LossSpec& spec) {
  cfg.validate();
  if (spec.entropy_lambda < 0.0) throw InvalidArgument("entropy_lambda must be nonnegative");
  if (data.size() == 0) throw InvalidArgument("training data is empty");
  if (static_cast<std::size_t>(data.inputs.rows()) != net.input_size()) {
    throw ShapeError("training inputs do not match the network input size");
  }

  std::mt19937_64 order_rng(cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  auto velocity = zeros_like(net);
  auto grads = zeros_like(net);
  TrainResult result{std::move(net), {}};
  Network& model = result.net;

  std::uint64_t attack_calls = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    std::size_t seen_correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      Matrix x(data.inputs.rows(), static_cast<Eigen::Index>(n));
      std::vector<std::size_t> labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        x.col(static_cast<Eigen::Index>(i)) = data.inputs.col(static_cast<Eigen::Index>(order[start + i]));
        labels[i] = data.labels[order[start + i]];
      }
      if (cfg.adv_mix) {
        const auto m = static_cast<std::size_t>(std::lround(cfg.adv_mix->fraction * static_cast<double>(n)));
        if (m > 0) {
          AttackSpec atk = cfg.adv_mix->attack;
          atk.seed = atk.seed + attack_calls++;
          x.leftCols(static_cast<Eigen::Index>(m)) =
              attack_batch(model, x.leftCols(static_cast<Eigen::Index>(m)),
                           std::span<const std::size_t>(labels.data(), m), atk);
        }
      }

      ForwardTrace trace;
      const Matrix logits = forward_batch(model, x, &trace, &dropout_rng);
      const LossBatch lb = loss_batch(logits, labels, spec);
      const double batch_loss = lb.losses.sum();
      if (!std::isfinite(batch_loss)) {
        throw TrainingDiverged("non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(start / cfg.batch_size));
      }
      loss_sum += batch_loss;
      for (std::size_t i = 0; i < n; ++i) {
        seen_correct += argmax(logits.col(static_cast<Eigen::Index>(i))) == labels[i];
      }

      for (auto& g : grads) {
        for (double& v : g.weight.data()) v = 0.0;
        for (double& v : g.bias.data()) v = 0.0;
      }
      backward_batch(model, trace, lb.delta / static_cast<double>(n), &grads);

      auto& params = model.mutable_params();
      for (std::size_t l = 0; l < params.size(); ++l) {
        if (params[l].empty()) continue;
        auto step = [&](Tensor& w, Tensor& v, const Tensor& g) {
          v.flat() = cfg.momentum * v.flat() - cfg.learning_rate * g.flat();
          w.flat() += v.flat();
        };
        step(params[l].weight, velocity[l].weight, grads[l].weight);
        step(params[l].bias, velocity[l].bias, grads[l].bias);
      }
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.mean_loss = loss_sum / static_cast<double>(data.size());
    m.train_accuracy = static_cast<double>(seen_correct) / static_cast<double>(data.size());
    if (cfg.stop_at_train_accuracy) {
      m.train_accuracy = accuracy(model, data);
      result.metrics.push_back(m);
      if (m.train_accuracy >= *cfg.stop_at_train_accuracy) break;
    } else {
      result.metrics.push_back(m);
    }
  }
  return result;
}

}  // namespace advscale
