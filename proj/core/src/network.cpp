#include "advscale/network.hpp"

#include <cmath>
#include <limits>

#include "advscale/error.hpp"

namespace advscale {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

using Index = Eigen::Index;

Index idx(std::size_t v) { return static_cast<Index>(v); }

std::size_t conv_extent(std::size_t in, const Conv2d& c) {
  return (in + 2 * c.padding - c.kernel) / c.stride + 1;
}

Shape layer_output_shape(const Layer& layer, const Shape& in, std::size_t position) {
  auto fail = [&](const std::string& why) -> ShapeError {
    return ShapeError("layer " + std::to_string(position) + " (" + layer_name(layer) +
                      "): " + why + ", input shape " + shape_string(in));
  };
  return std::visit(
      overloaded{
          [&](const Normalize&) { return in; },
          [&](const Relu&) { return in; },
          [&](const Dropout& d) {
            if (!(d.rate >= 0.0 && d.rate < 1.0)) throw fail("dropout rate must be in [0,1)");
            return in;
          },
          [&](const Flatten&) { return Shape{shape_size(in)}; },
          [&](const Dense& d) {
            if (in.size() != 1) throw fail("dense layer needs a flat input (add a flatten layer)");
            if (d.in == 0 || d.out == 0) throw fail("dense dimensions must be positive");
            if (in[0] != d.in) {
              throw fail("declared " + std::to_string(d.in) + " inputs but receives " +
                         std::to_string(in[0]));
            }
            return Shape{d.out};
          },
          [&](const Conv2d& c) {
            if (in.size() != 3) throw fail("convolution needs a (channels, height, width) input");
            if (c.in_channels == 0 || c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
              throw fail("convolution sizes must be positive");
            }
            if (in[0] != c.in_channels) {
              throw fail("declared " + std::to_string(c.in_channels) + " input channels");
            }
            if (in[1] + 2 * c.padding < c.kernel || in[2] + 2 * c.padding < c.kernel) {
              throw fail("kernel larger than padded input");
            }
            return Shape{c.out_channels, conv_extent(in[1], c), conv_extent(in[2], c)};
          },
          [&](const MaxPool2d& p) {
            if (in.size() != 3) throw fail("max-pool needs a (channels, height, width) input");
            if (p.window == 0 || in[1] < p.window || in[2] < p.window) {
              throw fail("pool window must be positive and fit the input");
            }
            return Shape{in[0], in[1] / p.window, in[2] / p.window};
          },
      },
      layer);
}

// Parameter shapes for a layer given its input shape; empty shapes for parameterless layers.
std::pair<Shape, Shape> param_shapes(const Layer& layer) {
  if (auto* d = std::get_if<Dense>(&layer)) return {{d->out, d->in}, {d->out}};
  if (auto* c = std::get_if<Conv2d>(&layer)) {
    return {{c->out_channels, c->in_channels, c->kernel, c->kernel}, {c->out_channels}};
  }
  return {};
}

std::size_t fan_in(const Layer& layer) {
  if (auto* d = std::get_if<Dense>(&layer)) return d->in;
  if (auto* c = std::get_if<Conv2d>(&layer)) return c->in_channels * c->kernel * c->kernel;
  return 0;
}

// One example (CHW flat) -> patch matrix, (out_h*out_w) x (in_c*k*k).
Matrix im2col(const double* src, const Shape& in, const Conv2d& c, std::size_t out_h,
              std::size_t out_w) {
  const std::size_t k = c.kernel;
  Matrix cols = Matrix::Zero(idx(out_h * out_w), idx(c.in_channels * k * k));
  for (std::size_t ic = 0; ic < c.in_channels; ++ic) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const Index col = idx((ic * k + ky) * k + kx);
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy * c.stride + ky) - static_cast<long>(c.padding);
          if (iy < 0 || iy >= static_cast<long>(in[1])) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox * c.stride + kx) - static_cast<long>(c.padding);
            if (ix < 0 || ix >= static_cast<long>(in[2])) continue;
            cols(idx(oy * out_w + ox), col) =
                src[(ic * in[1] + static_cast<std::size_t>(iy)) * in[2] + static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(const Matrix& cols, const Shape& in, const Conv2d& c, std::size_t out_h,
                std::size_t out_w, double* dst) {
  const std::size_t k = c.kernel;
  for (std::size_t ic = 0; ic < c.in_channels; ++ic) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const Index col = idx((ic * k + ky) * k + kx);
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy * c.stride + ky) - static_cast<long>(c.padding);
          if (iy < 0 || iy >= static_cast<long>(in[1])) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox * c.stride + kx) - static_cast<long>(c.padding);
            if (ix < 0 || ix >= static_cast<long>(in[2])) continue;
            dst[(ic * in[1] + static_cast<std::size_t>(iy)) * in[2] + static_cast<std::size_t>(ix)] +=
                cols(idx(oy * out_w + ox), col);
          }
        }
      }
    }
  }
}

}  // namespace

std::string layer_name(const Layer& layer) {
  return std::visit(overloaded{
                        [](const Normalize&) { return std::string("normalize"); },
                        [](const Dense&) { return std::string("dense"); },
                        [](const Relu&) { return std::string("relu"); },
                        [](const Conv2d&) { return std::string("conv2d"); },
                        [](const MaxPool2d&) { return std::string("maxpool2d"); },
                        [](const Flatten&) { return std::string("flatten"); },
                        [](const Dropout&) { return std::string("dropout"); },
                    },
                    layer);
}

Architecture Architecture::mlp(std::size_t inputs, const std::vector<std::size_t>& hidden,
                               std::size_t classes, double dropout) {
  Architecture a;
  a.input_shape = {inputs};
  a.n_classes = classes;
  a.layers.push_back(Normalize{});
  std::size_t prev = inputs;
  for (auto width : hidden) {
    a.layers.push_back(Dense{prev, width});
    a.layers.push_back(Relu{});
    if (dropout > 0.0) a.layers.push_back(Dropout{dropout});
    prev = width;
  }
  a.layers.push_back(Dense{prev, classes});
  return a;
}

Architecture Architecture::linear(std::size_t inputs, std::size_t classes) {
  return mlp(inputs, {}, classes);
}

Architecture Architecture::convnet(const Shape& image_chw, std::size_t classes,
                                   std::size_t channels, std::size_t hidden) {
  if (image_chw.size() != 3) throw ShapeError("convnet needs a (channels, height, width) input");
  Architecture a;
  a.input_shape = image_chw;
  a.n_classes = classes;
  a.layers = {Normalize{},
              Conv2d{image_chw[0], channels, 5, 1, 2},
              Relu{},
              MaxPool2d{2},
              Conv2d{channels, 2 * channels, 5, 1, 2},
              Relu{},
              MaxPool2d{2},
              Flatten{}};
  const std::size_t flat = 2 * channels * (image_chw[1] / 4) * (image_chw[2] / 4);
  a.layers.push_back(Dense{flat, hidden});
  a.layers.push_back(Relu{});
  a.layers.push_back(Dense{hidden, classes});
  return a;
}

Network::Network(Architecture arch, std::vector<LayerParams> params)
    : arch_(std::move(arch)), params_(std::move(params)) {
  if (arch_.layers.empty() || !std::holds_alternative<Normalize>(arch_.layers.front())) {
    throw ShapeError("the first layer must be the fixed normalization");
  }
  if (arch_.input_shape.empty() || shape_size(arch_.input_shape) == 0) {
    throw ShapeError("input shape must be non-empty");
  }
  if (params_.size() != arch_.layers.size()) {
    throw ShapeError("expected one parameter entry per layer");
  }
  shapes_.push_back(arch_.input_shape);
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    shapes_.push_back(layer_output_shape(arch_.layers[i], shapes_.back(), i));
    auto [ws, bs] = param_shapes(arch_.layers[i]);
    const auto& p = params_[i];
    if (ws.empty()) {
      if (!p.empty() || p.bias.size() != 0) {
        throw ShapeError("layer " + std::to_string(i) + " has no parameters");
      }
    } else if (p.weight.shape() != ws || p.bias.shape() != bs) {
      throw ShapeError("layer " + std::to_string(i) + " parameters have shape " +
                       shape_string(p.weight.shape()) + "/" + shape_string(p.bias.shape()) +
                       ", expected " + shape_string(ws) + "/" + shape_string(bs));
    }
  }
  const Shape& out = shapes_.back();
  if (out.size() != 1 || out[0] != arch_.n_classes || arch_.n_classes < 2) {
    throw ShapeError("network must end in " + std::to_string(arch_.n_classes) +
                     " logits (at least 2), got " + shape_string(out));
  }
  input_size_ = shape_size(arch_.input_shape);
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.weight.size() + p.bias.size();
  return n;
}

Network init_network(const Architecture& arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<LayerParams> params;
  params.reserve(arch.layers.size());
  for (const auto& layer : arch.layers) {
    auto [ws, bs] = param_shapes(layer);
    if (ws.empty()) {
      params.emplace_back();
      continue;
    }
    std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in(layer))));
    LayerParams p{Tensor(ws), Tensor(bs)};
    for (double& w : p.weight.data()) w = gauss(rng);
    params.push_back(std::move(p));
  }
  return Network(arch, std::move(params));
}

std::vector<LayerParams> zeros_like(const Network& net) {
  std::vector<LayerParams> out;
  out.reserve(net.params().size());
  for (const auto& p : net.params()) {
    if (p.empty()) {
      out.emplace_back();
    } else {
      out.push_back({Tensor(p.weight.shape()), Tensor(p.bias.shape())});
    }
  }
  return out;
}

Matrix forward_batch(const Network& net, const Matrix& x, ForwardTrace* trace,
                     std::mt19937_64* dropout_rng) {
  if (static_cast<std::size_t>(x.rows()) != net.input_size()) {
    throw ShapeError("input has " + std::to_string(x.rows()) + " features, network expects " +
                     std::to_string(net.input_size()));
  }
  const auto& layers = net.architecture().layers;
  if (trace) {
    trace->inputs.assign(layers.size(), Matrix());
    trace->pool_argmax.assign(layers.size(), {});
    trace->dropout_masks.assign(layers.size(), Matrix());
  }
  const Index batch = x.cols();
  Matrix act = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Shape& in_shape = i == 0 ? net.input_shape() : net.output_shape(i - 1);
    const Shape& out_shape = net.output_shape(i);
    const LayerParams& p = net.params()[i];
    Matrix next = std::visit(
        overloaded{
            [&](const Normalize& n) -> Matrix { return act * n.scale; },
            [&](const Flatten&) -> Matrix { return act; },
            [&](const Relu&) -> Matrix { return act.cwiseMax(0.0); },
            [&](const Dropout& d) -> Matrix {
              if (!dropout_rng || d.rate == 0.0) return act;
              std::bernoulli_distribution keep(1.0 - d.rate);
              Matrix mask(act.rows(), act.cols());
              const double scale = 1.0 / (1.0 - d.rate);
              for (Index c = 0; c < mask.cols(); ++c) {
                for (Index r = 0; r < mask.rows(); ++r) mask(r, c) = keep(*dropout_rng) ? scale : 0.0;
              }
              Matrix out = act.cwiseProduct(mask);
              if (trace) trace->dropout_masks[i] = std::move(mask);
              return out;
            },
            [&](const Dense&) -> Matrix {
              auto w = p.weight.matrix();
              Matrix out = w * act;
              out.colwise() += p.bias.flat();
              return out;
            },
            [&](const Conv2d& c) -> Matrix {
              const std::size_t oh = out_shape[1], ow = out_shape[2];
              const Index hw = idx(oh * ow);
              Eigen::Map<const RowMajorMatrix> w(p.weight.data().data(), idx(c.out_channels),
                                                 idx(c.in_channels * c.kernel * c.kernel));
              Matrix out(idx(shape_size(out_shape)), batch);
              for (Index b = 0; b < batch; ++b) {
                Matrix cols = im2col(act.col(b).data(), in_shape, c, oh, ow);
                Matrix res = cols * w.transpose();  // hw x out_c
                res.rowwise() += p.bias.flat().transpose();
                out.col(b) = Eigen::Map<const Vector>(res.data(), hw * idx(c.out_channels));
              }
              return out;
            },
            [&](const MaxPool2d& pool) -> Matrix {
              const std::size_t ch = in_shape[0], ih = in_shape[1], iw = in_shape[2];
              const std::size_t oh = out_shape[1], ow = out_shape[2], win = pool.window;
              Matrix out(idx(shape_size(out_shape)), batch);
              std::vector<Index> arg(static_cast<std::size_t>(out.size()));
              for (Index b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < ch; ++c) {
                  for (std::size_t oy = 0; oy < oh; ++oy) {
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                      Index best = -1;
                      double best_v = -std::numeric_limits<double>::infinity();
                      for (std::size_t dy = 0; dy < win; ++dy) {
                        for (std::size_t dx = 0; dx < win; ++dx) {
                          const Index src = idx((c * ih + oy * win + dy) * iw + ox * win + dx);
                          if (best < 0 || act(src, b) > best_v) {
                            best = src;
                            best_v = act(src, b);
                          }
                        }
                      }
                      const Index dst = idx((c * oh + oy) * ow + ox);
                      out(dst, b) = best_v;
                      arg[static_cast<std::size_t>(b * out.rows() + dst)] = best;
                    }
                  }
                }
              }
              if (trace) trace->pool_argmax[i] = std::move(arg);
              return out;
            },
        },
        layers[i]);
    if (trace) trace->inputs[i] = std::move(act);
    act = std::move(next);
  }
  return act;
}

Matrix backward_batch(const Network& net, const ForwardTrace& trace, const Matrix& grad_logits,
                      std::vector<LayerParams>* param_grads) {
  const auto& layers = net.architecture().layers;
  if (trace.inputs.size() != layers.size()) throw ShapeError("forward trace does not match network");
  if (static_cast<std::size_t>(grad_logits.rows()) != net.n_classes() ||
      grad_logits.cols() != trace.inputs.front().cols()) {
    throw ShapeError("logit gradient shape does not match the forward batch");
  }
  const Index batch = grad_logits.cols();
  Matrix grad = grad_logits;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const Matrix& in = trace.inputs[li];
    const Shape& in_shape = li == 0 ? net.input_shape() : net.output_shape(li - 1);
    const Shape& out_shape = net.output_shape(li);
    const LayerParams& p = net.params()[li];
    LayerParams* pg = param_grads ? &(*param_grads)[li] : nullptr;
    grad = std::visit(
        overloaded{
            [&](const Normalize& n) -> Matrix { return grad * n.scale; },
            [&](const Flatten&) -> Matrix { return grad; },
            [&](const Relu&) -> Matrix {
              return (in.array() > 0.0).select(grad, 0.0);
            },
            [&](const Dropout&) -> Matrix {
              const Matrix& mask = trace.dropout_masks[li];
              return mask.size() ? Matrix(grad.cwiseProduct(mask)) : grad;
            },
            [&](const Dense&) -> Matrix {
              auto w = p.weight.matrix();
              if (pg) {
                pg->weight.matrix().noalias() += grad * in.transpose();
                pg->bias.flat() += grad.rowwise().sum();
              }
              return w.transpose() * grad;
            },
            [&](const Conv2d& c) -> Matrix {
              const std::size_t oh = out_shape[1], ow = out_shape[2];
              const Index hw = idx(oh * ow);
              const Index kk = idx(c.in_channels * c.kernel * c.kernel);
              Eigen::Map<const RowMajorMatrix> w(p.weight.data().data(), idx(c.out_channels), kk);
              Matrix gin = Matrix::Zero(in.rows(), batch);
              for (Index b = 0; b < batch; ++b) {
                Eigen::Map<const Matrix> gout(grad.col(b).data(), hw, idx(c.out_channels));
                Matrix cols = im2col(in.col(b).data(), in_shape, c, oh, ow);
                if (pg) {
                  Eigen::Map<RowMajorMatrix> dw(pg->weight.data().data(), idx(c.out_channels), kk);
                  dw.noalias() += gout.transpose() * cols;
                  pg->bias.flat() += gout.colwise().sum().transpose();
                }
                Matrix dcols = gout * w;  // hw x kk
                col2im_add(dcols, in_shape, c, oh, ow, gin.col(b).data());
              }
              return gin;
            },
            [&](const MaxPool2d&) -> Matrix {
              const auto& arg = trace.pool_argmax[li];
              Matrix gin = Matrix::Zero(in.rows(), batch);
              for (Index b = 0; b < batch; ++b) {
                for (Index r = 0; r < grad.rows(); ++r) {
                  gin(arg[static_cast<std::size_t>(b * grad.rows() + r)], b) += grad(r, b);
                }
              }
              return gin;
            },
        },
        layers[li]);
  }
  return grad;
}

namespace {

// Eigen's packet exp clamps large negative arguments, so saturated classes
// would never reach exactly zero probability.
const auto exact_exp = [](double v) { return std::exp(v); };

}  // namespace

Matrix log_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index c = 0; c < logits.cols(); ++c) {
    const double m = logits.col(c).maxCoeff();
    const double lse = m + std::log((logits.col(c).array() - m).unaryExpr(exact_exp).sum());
    out.col(c) = logits.col(c).array() - lse;
  }
  return out;
}

Matrix softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index c = 0; c < logits.cols(); ++c) {
    const Eigen::ArrayXd e = (logits.col(c).array() - logits.col(c).maxCoeff()).unaryExpr(exact_exp);
    out.col(c) = e / e.sum();
  }
  return out;
}

LossBatch loss_batch(const Matrix& logits, std::span<const std::size_t> labels,
                     const LossSpec& spec) {
  if (spec.entropy_lambda < 0.0) throw InvalidArgument("entropy_lambda must be nonnegative");
  if (labels.size() != static_cast<std::size_t>(logits.cols())) {
    throw ShapeError("one label per logit column required");
  }
  const Matrix logp = log_softmax(logits);
  const Matrix p = softmax(logits);
  LossBatch out{Vector(logits.cols()), p};
  for (Index c = 0; c < logits.cols(); ++c) {
    const std::size_t y = labels[static_cast<std::size_t>(c)];
    if (y >= static_cast<std::size_t>(logits.rows())) throw InvalidArgument("label out of range");
    double value = -logp(idx(y), c);
    // p_y - 1 as minus the mass on the other classes; the direct subtraction
    // cancels to zero once p_y rounds to 1.
    double rest = 0.0;
    for (Index k = 0; k < p.rows(); ++k) {
      if (k != idx(y)) rest += p(k, c);
    }
    out.delta(idx(y), c) = -rest;
    if (spec.entropy_lambda > 0.0) {
      const double entropy = -(p.col(c).array() * logp.col(c).array()).sum();
      value += spec.entropy_lambda * entropy;
      // d(entropy)/dz_k = -p_k (log p_k + entropy)
      out.delta.col(c).array() -=
          spec.entropy_lambda * p.col(c).array() * (logp.col(c).array() + entropy);
    }
    out.losses(c) = value;
  }
  return out;
}

Matrix grad_input_batch(const Network& net, const Matrix& x, std::span<const std::size_t> labels,
                        const LossSpec& spec) {
  ForwardTrace trace;
  const Matrix logits = forward_batch(net, x, &trace);
  return backward_batch(net, trace, loss_batch(logits, labels, spec).delta);
}

std::size_t argmax(const Eigen::Ref<const Vector>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return static_cast<std::size_t>(best);
}

std::size_t argmin(const Eigen::Ref<const Vector>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v(i) < v(best)) best = i;
  }
  return static_cast<std::size_t>(best);
}

std::vector<std::size_t> predict_batch(const Network& net, const Matrix& x) {
  const Matrix logits = forward_batch(net, x);
  std::vector<std::size_t> out(static_cast<std::size_t>(logits.cols()));
  for (Index c = 0; c < logits.cols(); ++c) out[static_cast<std::size_t>(c)] = argmax(logits.col(c));
  return out;
}

namespace {

Matrix as_column(const Network& net, const Tensor& x) {
  if (x.size() != net.input_size()) {
    throw ShapeError("input " + shape_string(x.shape()) + " does not match network input " +
                     shape_string(net.input_shape()));
  }
  return x.flat();
}

}  // namespace

Tensor forward(const Network& net, const Tensor& x) {
  const Matrix logits = forward_batch(net, as_column(net, x));
  return Tensor::from_vector(logits.col(0));
}

double loss(const Network& net, const Tensor& x, std::size_t y, const LossSpec& spec) {
  const Matrix logits = forward_batch(net, as_column(net, x));
  const std::size_t labels[] = {y};
  return loss_batch(logits, labels, spec).losses(0);
}

Tensor grad_input(const Network& net, const Tensor& x, std::size_t y, const LossSpec& spec) {
  const std::size_t labels[] = {y};
  const Matrix g = grad_input_batch(net, as_column(net, x), labels, spec);
  return Tensor(x.shape(), std::vector<double>(g.data(), g.data() + g.size()));
}

Matrix jacobian(const Network& net, const Tensor& x) {
  const Index n = idx(net.n_classes());
  const Matrix batch = as_column(net, x).replicate(1, n);
  ForwardTrace trace;
  forward_batch(net, batch, &trace);
  return backward_batch(net, trace, Matrix::Identity(n, n));
}

}  // namespace advscale
