#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "advscale/tensor.hpp"

namespace advscale {

// Parameterless affine map x -> scale * x. Always the first layer, so callers
// work in raw pixel units ([0,255]) while the trainable layers see [0,1].
struct Normalize {
  double scale = 1.0 / 255.0;
};

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
};

// Subgradient at exactly zero is 0.
struct Relu {};

// Square kernel over (channels, height, width) activations.
struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// Non-overlapping window (stride == window); trailing rows/columns are dropped.
struct MaxPool2d {
  std::size_t window = 2;
};

struct Flatten {};

// Inverted dropout; identity outside training.
struct Dropout {
  double rate = 0.0;
};

using Layer = std::variant<Normalize, Dense, Relu, Conv2d, MaxPool2d, Flatten, Dropout>;

std::string layer_name(const Layer& layer);

struct Architecture {
  Shape input_shape;
  std::vector<Layer> layers;
  std::size_t n_classes = 0;

  // normalize -> [dense -> relu (-> dropout)]* -> dense
  static Architecture mlp(std::size_t inputs, const std::vector<std::size_t>& hidden,
                          std::size_t classes, double dropout = 0.0);
  // normalize -> dense
  static Architecture linear(std::size_t inputs, std::size_t classes);
  // normalize -> conv -> relu -> pool -> conv -> relu -> pool -> flatten -> dense -> relu -> dense
  static Architecture convnet(const Shape& image_chw, std::size_t classes,
                              std::size_t channels = 8, std::size_t hidden = 64);
};

// Weight and bias for one layer; both empty for parameterless layers.
struct LayerParams {
  Tensor weight;
  Tensor bias;

  bool empty() const noexcept { return weight.size() == 0; }
};

class Network {
 public:
  // Validates shape chaining; throws ShapeError on any mismatch.
  Network(Architecture arch, std::vector<LayerParams> params);

  const Architecture& architecture() const noexcept { return arch_; }
  const Shape& input_shape() const noexcept { return arch_.input_shape; }
  std::size_t input_size() const noexcept { return input_size_; }
  std::size_t n_classes() const noexcept { return arch_.n_classes; }

  // Output shape of layer i.
  const Shape& output_shape(std::size_t layer) const { return shapes_.at(layer + 1); }

  const std::vector<LayerParams>& params() const noexcept { return params_; }
  std::vector<LayerParams>& mutable_params() noexcept { return params_; }
  std::size_t parameter_count() const;

 private:
  Architecture arch_;
  std::vector<LayerParams> params_;
  std::vector<Shape> shapes_;  // shapes_[0] is the input, shapes_[i+1] the output of layer i
  std::size_t input_size_ = 0;
};

// Gaussian weights with std 1/sqrt(fan_in), zero biases. Same seed, same bits.
Network init_network(const Architecture& arch, std::uint64_t seed);

// Zero-valued parameters with the same layout as `net` (gradient accumulators).
std::vector<LayerParams> zeros_like(const Network& net);

struct LossSpec {
  // Weight of the entropy penalty -lambda * sum p log p; 0 disables it.
  double entropy_lambda = 0.0;
};

// Cached activations from a forward pass, consumed by backward().
struct ForwardTrace {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<std::vector<Eigen::Index>> pool_argmax;
  std::vector<Matrix> dropout_masks;
};

// Batched forward pass: `x` holds one example per column (raw pixel units).
// Returns the N x B logit matrix. With a trace, activations are cached; with a
// dropout rng, dropout layers are active (training mode).
Matrix forward_batch(const Network& net, const Matrix& x, ForwardTrace* trace = nullptr,
                     std::mt19937_64* dropout_rng = nullptr);

// Reverse-mode pass from dL/dlogits (N x B). Returns dL/dx (raw pixel units).
// If `param_grads` is non-null, parameter gradients summed over the batch are
// added into it.
Matrix backward_batch(const Network& net, const ForwardTrace& trace, const Matrix& grad_logits,
                      std::vector<LayerParams>* param_grads = nullptr);

// Column-wise numerically stable softmax / log-softmax.
Matrix softmax(const Matrix& logits);
Matrix log_softmax(const Matrix& logits);

struct LossBatch {
  Vector losses;  // per example
  Matrix delta;   // dL/dlogits, N x B
};

// Cross-entropy plus optional entropy penalty, per column.
LossBatch loss_batch(const Matrix& logits, std::span<const std::size_t> labels,
                     const LossSpec& spec);

// dL/dx for every column of `x`.
Matrix grad_input_batch(const Network& net, const Matrix& x, std::span<const std::size_t> labels,
                        const LossSpec& spec = {});

std::vector<std::size_t> predict_batch(const Network& net, const Matrix& x);

// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(const Eigen::Ref<const Vector>& v);
std::size_t argmin(const Eigen::Ref<const Vector>& v);

// Single-example API. `x` must have net.input_size() elements.
Tensor forward(const Network& net, const Tensor& x);
double loss(const Network& net, const Tensor& x, std::size_t y, const LossSpec& spec = {});
Tensor grad_input(const Network& net, const Tensor& x, std::size_t y, const LossSpec& spec = {});

// Input-logit Jacobian, n_inputs x N, J(a, b) = d h_b / d x_a (raw pixel units).
Matrix jacobian(const Network& net, const Tensor& x);

}  // namespace advscale
