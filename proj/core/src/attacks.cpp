#include "advscale/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>

#include "advscale/error.hpp"
#include "advscale/io.hpp"

namespace advscale {

namespace {

constexpr Eigen::Index kChunk = 256;

// Clips into [0,255] and returns how many coordinates changed.
std::size_t clip_pixels(Eigen::Ref<Matrix> x) {
  std::size_t clipped = 0;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      double& v = x(r, c);
      if (v < 0.0) {
        v = 0.0;
        ++clipped;
      } else if (v > 255.0) {
        v = 255.0;
        ++clipped;
      }
    }
  }
  return clipped;
}

Matrix column_of(const Network& net, const Tensor& x) {
  if (x.size() != net.input_size()) {
    throw ShapeError("input " + shape_string(x.shape()) + " does not match network input " +
                     shape_string(net.input_shape()));
  }
  return x.flat();
}

Tensor tensor_like(const Tensor& x, const Matrix& col) {
  return Tensor(x.shape(), std::vector<double>(col.data(), col.data() + col.size()));
}

}  // namespace

std::string to_string(AttackFamily family) {
  switch (family) {
    case AttackFamily::FgsmLinf: return "fgsm_linf";
    case AttackFamily::FgsmL2: return "fgsm_l2";
    case AttackFamily::StepLL: return "step_ll";
    case AttackFamily::Pgd: return "pgd";
  }
  return "unknown";
}

AttackFamily parse_attack_family(const std::string& name) {
  if (name == "fgsm_linf" || name == "fgsm") return AttackFamily::FgsmLinf;
  if (name == "fgsm_l2") return AttackFamily::FgsmL2;
  if (name == "step_ll") return AttackFamily::StepLL;
  if (name == "pgd") return AttackFamily::Pgd;
  throw InvalidArgument("unknown attack family '" + name + "'");
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw InvalidArgument("epsilon must be >= 0");
  if (family == AttackFamily::Pgd) {
    if (pgd_steps == 0) throw InvalidArgument("pgd_steps must be positive");
    if (!(pgd_step_size > 0.0)) throw InvalidArgument("pgd_step_size must be positive");
  }
}

void project_linf(Eigen::Ref<Matrix> x, const Eigen::Ref<const Matrix>& center, double epsilon) {
  x = x.array().max(center.array() - epsilon).min(center.array() + epsilon).matrix();
}

Matrix attack_directions(const Network& net, const Matrix& x, std::span<const std::size_t> labels,
                         AttackFamily family, std::size_t* degenerate) {
  switch (family) {
    case AttackFamily::FgsmLinf:
      return grad_input_batch(net, x, labels).array().sign();
    case AttackFamily::StepLL: {
      const Matrix logits = forward_batch(net, x);
      std::vector<std::size_t> least(static_cast<std::size_t>(x.cols()));
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        least[static_cast<std::size_t>(c)] = argmin(logits.col(c));
      }
      return -grad_input_batch(net, x, least).array().sign();
    }
    case AttackFamily::FgsmL2: {
      Matrix g = grad_input_batch(net, x, labels);
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        const double norm = g.col(c).norm();
        if (norm > 0.0) {
          g.col(c) /= norm;
        } else if (degenerate) {
          ++*degenerate;
        }
      }
      return g;
    }
    case AttackFamily::Pgd:
      break;
  }
  throw InvalidArgument("pgd has no fixed attack direction");
}

Matrix attack_batch(const Network& net, const Matrix& x, std::span<const std::size_t> labels,
                    const AttackSpec& spec, AttackBatchStats* stats) {
  spec.validate();
  AttackBatchStats local;
  Matrix out;
  if (spec.family != AttackFamily::Pgd) {
    out = x + spec.epsilon * attack_directions(net, x, labels, spec.family, &local.degenerate);
    if (spec.clip_to_valid) local.clipped = clip_pixels(out);
  } else {
    out = x;
    if (spec.pgd_random_start && spec.epsilon > 0.0) {
      std::mt19937_64 rng(spec.seed);
      std::uniform_real_distribution<double> offset(-spec.epsilon, spec.epsilon);
      for (Eigen::Index c = 0; c < out.cols(); ++c) {
        for (Eigen::Index r = 0; r < out.rows(); ++r) out(r, c) += offset(rng);
      }
      if (spec.clip_to_valid) clip_pixels(out);
    }
    for (std::size_t step = 0; step < spec.pgd_steps; ++step) {
      const Matrix g = grad_input_batch(net, out, labels);
      out += spec.pgd_step_size * g.array().sign().matrix();
      project_linf(out, x, spec.epsilon);
      if (spec.clip_to_valid) local.clipped = clip_pixels(out);
    }
  }
  local.coordinates = static_cast<std::size_t>(x.size());
  if (stats) {
    stats->clipped += local.clipped;
    stats->coordinates += local.coordinates;
    stats->degenerate += local.degenerate;
  }
  return out;
}

Tensor fgsm(const Network& net, const Tensor& x, std::size_t y, double epsilon, bool clip_to_valid) {
  AttackSpec spec{AttackFamily::FgsmLinf, epsilon};
  spec.clip_to_valid = clip_to_valid;
  return attack(net, x, y, spec);
}

Tensor fgsm_l2(const Network& net, const Tensor& x, std::size_t y, double epsilon,
               bool clip_to_valid) {
  AttackSpec spec{AttackFamily::FgsmL2, epsilon};
  spec.clip_to_valid = clip_to_valid;
  return attack(net, x, y, spec);
}

Tensor step_ll(const Network& net, const Tensor& x, double epsilon, bool clip_to_valid) {
  AttackSpec spec{AttackFamily::StepLL, epsilon};
  spec.clip_to_valid = clip_to_valid;
  return attack(net, x, 0, spec);
}

Tensor pgd(const Network& net, const Tensor& x, std::size_t y, const AttackSpec& spec) {
  if (spec.family != AttackFamily::Pgd) throw InvalidArgument("pgd() needs a pgd attack spec");
  return attack(net, x, y, spec);
}

Tensor attack(const Network& net, const Tensor& x, std::size_t y, const AttackSpec& spec) {
  const std::size_t labels[] = {y};
  AttackBatchStats stats;
  const Matrix out = attack_batch(net, column_of(net, x), labels, spec, &stats);
  if (stats.degenerate) throw DegenerateGradient("loss gradient is exactly zero; no L2 direction");
  return tensor_like(x, out);
}

double accuracy(const Network& net, const Dataset& data) {
  std::size_t correct = 0;
  for (Eigen::Index start = 0; start < data.inputs.cols(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, data.inputs.cols() - start);
    const auto pred = predict_batch(net, data.inputs.middleCols(start, n));
    for (Eigen::Index i = 0; i < n; ++i) {
      correct += pred[static_cast<std::size_t>(i)] == data.labels[static_cast<std::size_t>(start + i)];
    }
  }
  return data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

AdvErrorCurve adv_error_curve(const Network& net, const Dataset& data,
                              const AttackSpec& spec_template, std::span<const double> eps_grid) {
  spec_template.validate();
  for (std::size_t i = 0; i < eps_grid.size(); ++i) {
    if (!(eps_grid[i] >= 0.0) || (i && !(eps_grid[i] > eps_grid[i - 1]))) {
      throw InvalidArgument("epsilon grid must be nonnegative and strictly increasing");
    }
  }
  const std::size_t n_eps = eps_grid.size();
  AdvErrorCurve curve;
  curve.family = spec_template.family;
  curve.epsilons.assign(eps_grid.begin(), eps_grid.end());
  curve.n_examples = data.size();

  std::vector<std::size_t> correct(n_eps, 0), clipped(n_eps, 0);
  std::size_t clean_correct = 0, coordinates = 0;
  const bool single_step = spec_template.family != AttackFamily::Pgd;
  const double step_ratio = spec_template.epsilon > 0.0
                                ? spec_template.pgd_step_size / spec_template.epsilon
                                : 0.0;

  for (Eigen::Index start = 0; start < data.inputs.cols(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, data.inputs.cols() - start);
    const Matrix x = data.inputs.middleCols(start, n);
    std::span<const std::size_t> labels(data.labels.data() + start, static_cast<std::size_t>(n));
    auto count = [&](const Matrix& batch) {
      const auto pred = predict_batch(net, batch);
      std::size_t k = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) k += pred[i] == labels[i];
      return k;
    };
    clean_correct += count(x);
    coordinates += static_cast<std::size_t>(x.size());

    Matrix direction;
    if (single_step) {
      direction = attack_directions(net, x, labels, spec_template.family, &curve.n_degenerate);
    }
    for (std::size_t e = 0; e < n_eps; ++e) {
      const double eps = eps_grid[e];
      Matrix adv;
      if (single_step) {
        adv = x + eps * direction;
        if (spec_template.clip_to_valid) clipped[e] += clip_pixels(adv);
      } else {
        AttackSpec spec = spec_template;
        spec.epsilon = eps;
        if (step_ratio > 0.0) spec.pgd_step_size = step_ratio * eps;
        if (eps == 0.0) {
          adv = x;
        } else {
          AttackBatchStats stats;
          adv = attack_batch(net, x, labels, spec, &stats);
          clipped[e] += stats.clipped;
        }
      }
      correct[e] += count(adv);
    }
  }
  const double n_total = std::max<double>(1.0, static_cast<double>(data.size()));
  curve.clean_accuracy = static_cast<double>(clean_correct) / n_total;
  for (std::size_t e = 0; e < n_eps; ++e) {
    curve.adv_accuracy.push_back(static_cast<double>(correct[e]) / n_total);
    curve.adv_error.push_back(curve.clean_accuracy - curve.adv_accuracy.back());
    curve.clipped_fraction.push_back(
        coordinates ? static_cast<double>(clipped[e]) / static_cast<double>(coordinates) : 0.0);
  }
  return curve;
}

double transfer_eval(const Network& source, const Network& target, const Dataset& data,
                     const AttackSpec& spec) {
  if (source.input_size() != target.input_size() || source.n_classes() != target.n_classes()) {
    throw ShapeError("source and target networks must share input shape and class count");
  }
  std::size_t correct = 0;
  for (Eigen::Index start = 0; start < data.inputs.cols(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, data.inputs.cols() - start);
    std::span<const std::size_t> labels(data.labels.data() + start, static_cast<std::size_t>(n));
    AttackSpec s = spec;
    s.seed = spec.seed + static_cast<std::uint64_t>(start);
    const Matrix adv = attack_batch(source, data.inputs.middleCols(start, n), labels, s);
    const auto pred = predict_batch(target, adv);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
  }
  return data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

std::vector<double> log_grid(double lo, double hi, std::size_t points) {
  if (!(lo > 0.0) || !(hi > lo) || points < 2) throw InvalidArgument("bad log grid");
  std::vector<double> out(points);
  const double a = std::log(lo), b = std::log(hi);
  for (std::size_t i = 0; i < points; ++i) {
    out[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(points - 1));
  }
  out.front() = lo;
  out.back() = hi;
  return out;
}

std::vector<double> default_epsilon_grid() { return log_grid(0.01, 64.0, 32); }

void write_curve_csv(std::ostream& out, const AdvErrorCurve& curve) {
  out << "epsilon,clean_acc,adv_acc,adv_error,n_clipped_frac\n";
  for (std::size_t i = 0; i < curve.epsilons.size(); ++i) {
    out << format_double(curve.epsilons[i]) << ',' << format_double(curve.clean_accuracy) << ','
        << format_double(curve.adv_accuracy[i]) << ',' << format_double(curve.adv_error[i]) << ','
        << format_double(curve.clipped_fraction[i]) << '\n';
  }
}

}  // namespace advscale
