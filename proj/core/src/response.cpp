#include "advscale/response.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>

#include "advscale/attacks.hpp"
#include "advscale/error.hpp"
#include "advscale/io.hpp"

namespace advscale {

namespace {

struct LinearResponse {
  GammaRecord record;
  Vector direction;  // unit L2 attack direction, raw pixel space
};

LinearResponse linear_response(const Network& net, const Tensor& x, std::size_t y) {
  if (y >= net.n_classes()) throw InvalidArgument("label out of range");
  const Matrix jac = jacobian(net, x);
  const Vector logits = forward(net, x).flat();
  const Matrix p = softmax(logits);
  Vector delta = p.col(0);
  delta(static_cast<Eigen::Index>(y)) -= 1.0;
  const Vector g = jac * delta;
  const double norm = g.norm();
  if (!(norm > 0.0)) throw DegenerateGradient("J*delta is exactly zero");

  LinearResponse out;
  out.direction = g / norm;
  const Vector gamma_by_class = jac.transpose() * out.direction;
  GammaRecord& r = out.record;
  r.logits.assign(logits.begin(), logits.end());
  r.gamma_by_class.assign(gamma_by_class.begin(), gamma_by_class.end());
  r.class_at_rank = rank_order(logits);
  r.rank_of_class.assign(r.class_at_rank.size(), 0);
  r.gamma.resize(r.class_at_rank.size());
  for (std::size_t rank = 0; rank < r.class_at_rank.size(); ++rank) {
    r.rank_of_class[r.class_at_rank[rank]] = rank;
    r.gamma[rank] = r.gamma_by_class[r.class_at_rank[rank]];
  }
  return out;
}

}  // namespace

std::vector<std::size_t> rank_order(const Eigen::Ref<const Vector>& logits) {
  std::vector<std::size_t> order(static_cast<std::size_t>(logits.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return logits(static_cast<Eigen::Index>(a)) > logits(static_cast<Eigen::Index>(b));
  });
  return order;
}

GammaRecord gamma(const Network& net, const Tensor& x, std::size_t y) {
  return linear_response(net, x, y).record;
}

Tensor linear_logits(const Network& net, const Tensor& x, std::size_t y, double epsilon) {
  const GammaRecord g = gamma(net, x, y);
  std::vector<double> out(g.logits.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g.logits[i] + epsilon * g.gamma_by_class[i];
  const std::size_t n = out.size();
  return Tensor({n}, std::move(out));
}

Tensor l2_attack_direction(const Network& net, const Tensor& x, std::size_t y) {
  const Tensor g = grad_input(net, x, y);
  const double norm = g.flat().norm();
  if (!(norm > 0.0)) throw DegenerateGradient("loss gradient is exactly zero");
  Tensor out = g;
  out.flat() /= norm;
  return out;
}

EpsilonHatTrue epsilon_hat_true(const Network& net, const Tensor& x, std::size_t y,
                                const Tensor& direction, const EpsilonHatOptions& opts) {
  if (direction.size() != x.size()) throw ShapeError("direction must match the input size");
  if (!(opts.tol > 0.0) || !(opts.eps_max > opts.tol) || opts.grid_points < 2) {
    throw InvalidArgument("epsilon-hat search needs 0 < tol < eps_max and >= 2 grid points");
  }
  const Vector x0 = x.flat();
  const Vector d = direction.flat();
  const Vector clean_logits = forward_batch(net, x0).col(0);
  const auto ranks = rank_order(clean_logits);
  std::vector<std::size_t> rank_of(ranks.size());
  for (std::size_t r = 0; r < ranks.size(); ++r) rank_of[ranks[r]] = r;

  EpsilonHatTrue out;
  if (argmax(clean_logits) != y) {
    out.value = 0.0;
    out.clean_misclassified = true;
    return out;
  }

  auto point = [&](double eps) -> Vector {
    Vector v = x0 + eps * d;
    if (opts.clip_to_valid) v = v.cwiseMax(0.0).cwiseMin(255.0);
    return v;
  };

  const auto grid = log_grid(opts.tol, opts.eps_max, opts.grid_points);
  Matrix batch(x0.size(), static_cast<Eigen::Index>(grid.size()));
  for (std::size_t k = 0; k < grid.size(); ++k) batch.col(static_cast<Eigen::Index>(k)) = point(grid[k]);
  const auto preds = predict_batch(net, batch);
  auto first = std::find_if(preds.begin(), preds.end(), [&](std::size_t c) { return c != y; });
  if (first == preds.end()) return out;

  const auto k = static_cast<std::size_t>(first - preds.begin());
  double lo = k ? grid[k - 1] : 0.0;
  double hi = grid[k];
  std::size_t fooled_class = *first;
  while (hi - lo > opts.tol) {
    const double mid = 0.5 * (lo + hi);
    const std::size_t c = predict_batch(net, point(mid)).front();
    if (c != y) {
      hi = mid;
      fooled_class = c;
    } else {
      lo = mid;
    }
  }
  out.value = 0.5 * (lo + hi);
  out.fooled_into_rank = rank_of[fooled_class] + 1;
  return out;
}

std::optional<double> epsilon_hat_linear(const GammaRecord& g) {
  std::optional<double> best;
  const double top = g.logits[g.class_at_rank[0]];
  for (std::size_t r = 1; r < g.gamma.size(); ++r) {
    const double gap = g.gamma[r] - g.gamma[0];
    if (!(gap > 0.0)) continue;
    const double eps = (top - g.logits[g.class_at_rank[r]]) / gap;
    if (!best || eps < *best) best = eps;
  }
  return best;
}

std::optional<double> epsilon_hat_linear(const Network& net, const Tensor& x, std::size_t y) {
  return epsilon_hat_linear(gamma(net, x, y));
}

MeanGamma mean_gamma(const Network& net, const Dataset& data, const MeanGammaOptions& opts) {
  MeanGamma mg;
  Vector sum = Vector::Zero(static_cast<Eigen::Index>(net.n_classes()));
  const auto preds = predict_batch(net, data.inputs);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (opts.correct_only && preds[i] != data.labels[i]) {
      ++mg.n_misclassified_skipped;
      continue;
    }
    try {
      const GammaRecord g = gamma(net, data.input(i), data.labels[i]);
      sum += Eigen::Map<const Vector>(g.gamma.data(), static_cast<Eigen::Index>(g.gamma.size()));
      ++mg.n_examples;
    } catch (const DegenerateGradient&) {
      ++mg.n_degenerate;
    }
  }
  if (mg.n_examples == 0) throw InvalidArgument("mean_gamma: no non-degenerate examples");
  sum /= static_cast<double>(mg.n_examples);
  mg.mean_gamma.assign(sum.begin(), sum.end());
  return mg;
}

std::optional<double> epsilon_hat_mf(double delta_12, const MeanGamma& mg) {
  if (!(delta_12 >= 0.0)) throw InvalidArgument("delta_12 must be nonnegative");
  const double gap = mg.gap();
  if (!(gap > 0.0)) return std::nullopt;
  return delta_12 / gap;
}

std::vector<EpsilonHatRecord> epsilon_hat_table(const Network& net, const Dataset& data,
                                                const MeanGamma& mg,
                                                const EpsilonHatOptions& opts) {
  std::vector<EpsilonHatRecord> out;
  out.reserve(data.size());
  const Matrix logits = forward_batch(net, data.inputs);
  for (std::size_t i = 0; i < data.size(); ++i) {
    EpsilonHatRecord rec;
    rec.example_id = i;
    const Vector h = logits.col(static_cast<Eigen::Index>(i));
    const auto order = rank_order(h);
    rec.delta_12 = h(static_cast<Eigen::Index>(order[0])) - h(static_cast<Eigen::Index>(order[1]));
    rec.clean_correct = order[0] == data.labels[i];
    rec.eps_hat_mf = epsilon_hat_mf(rec.delta_12, mg);
    const Tensor x = data.input(i);
    try {
      const LinearResponse lr = linear_response(net, x, data.labels[i]);
      rec.eps_hat_linear = epsilon_hat_linear(lr.record);
      const Tensor dir = Tensor::from_vector(lr.direction);
      const auto truth = epsilon_hat_true(net, x, data.labels[i], dir, opts);
      rec.eps_hat_true = truth.value;
      rec.fooled_into_rank = truth.fooled_into_rank;
    } catch (const DegenerateGradient&) {
      if (!rec.clean_correct) rec.eps_hat_true = 0.0;
    }
    out.push_back(rec);
  }
  return out;
}

void write_epsilon_hat_csv(std::ostream& out, const std::vector<EpsilonHatRecord>& records) {
  out << "example_id,delta_12,eps_hat_true,eps_hat_linear,eps_hat_mf,fooled_into_rank\n";
  for (const auto& r : records) {
    out << r.example_id << ',' << format_double(r.delta_12) << ',' << format_optional(r.eps_hat_true)
        << ',' << format_optional(r.eps_hat_linear) << ',' << format_optional(r.eps_hat_mf) << ',';
    if (r.fooled_into_rank) out << *r.fooled_into_rank;
    out << '\n';
  }
}

}  // namespace advscale
