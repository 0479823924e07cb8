#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <vector>

#include "advscale/data.hpp"
#include "advscale/network.hpp"

namespace advscale {

// Clean-logit ranking, largest first; ties broken by class index.
std::vector<std::size_t> rank_order(const Eigen::Ref<const Vector>& logits);

// Linear-response vector J^T J delta / |J delta|_2 for the L2 attack, with
// delta = p - onehot(y) (plain cross-entropy).
struct GammaRecord {
  std::vector<double> gamma;            // rank order: gamma[0] belongs to the top clean logit
  std::vector<double> gamma_by_class;   // class order
  std::vector<std::size_t> rank_of_class;  // 0-based rank of each class
  std::vector<std::size_t> class_at_rank;
  std::vector<double> logits;           // clean logits, class order
};

// Throws DegenerateGradient when J delta is exactly zero.
GammaRecord gamma(const Network& net, const Tensor& x, std::size_t y);

// Predicted logits h(x) + eps * Gamma(x) (class order) under the L2 attack.
Tensor linear_logits(const Network& net, const Tensor& x, std::size_t y, double epsilon);

// Unit L2 attack direction grad/|grad|_2 at x. Throws DegenerateGradient.
Tensor l2_attack_direction(const Network& net, const Tensor& x, std::size_t y);

struct EpsilonHatOptions {
  double eps_max = 64.0;
  double tol = 1e-3;
  std::size_t grid_points = 64;
  // Clip each point of the ray to [0,255].
  bool clip_to_valid = false;
};

struct EpsilonHatTrue {
  std::optional<double> value;  // 0 when the clean input is misclassified
  bool clean_misclassified = false;
  std::optional<std::size_t> fooled_into_rank;  // 1-based clean rank of the new argmax
};

// Smallest eps along the fixed `direction` at which the predicted class stops
// being y: log-spaced scan of [tol, eps_max] for the first change, then
// bisection of the bracketing interval down to `tol`. Returns the bracket midpoint.
EpsilonHatTrue epsilon_hat_true(const Network& net, const Tensor& x, std::size_t y,
                                const Tensor& direction, const EpsilonHatOptions& opts = {});

// min_j Delta_1j / (Gamma_j - Gamma_1) over ranks j >= 2 with a positive gap.
std::optional<double> epsilon_hat_linear(const GammaRecord& g);
std::optional<double> epsilon_hat_linear(const Network& net, const Tensor& x, std::size_t y);

struct MeanGamma {
  std::vector<double> mean_gamma;  // rank order
  std::size_t n_examples = 0;
  std::size_t n_degenerate = 0;
  std::size_t n_misclassified_skipped = 0;

  // <Gamma_2> - <Gamma_1>
  double gap() const { return mean_gamma.at(1) - mean_gamma.at(0); }
  // Network-specific rescaling eps * (<Gamma_2> - <Gamma_1>).
  double rescale(double epsilon) const { return epsilon * gap(); }
};

struct MeanGammaOptions {
  bool correct_only = true;
};

// Throws InvalidArgument when no example contributes.
MeanGamma mean_gamma(const Network& net, const Dataset& data, const MeanGammaOptions& opts = {});

// Delta_12 / (<Gamma_2> - <Gamma_1>); absent when the gap is not positive.
std::optional<double> epsilon_hat_mf(double delta_12, const MeanGamma& mg);

struct EpsilonHatRecord {
  std::size_t example_id = 0;
  double delta_12 = 0.0;
  std::optional<double> eps_hat_true;
  std::optional<double> eps_hat_linear;
  std::optional<double> eps_hat_mf;
  std::optional<std::size_t> fooled_into_rank;
  bool clean_correct = true;
};

std::vector<EpsilonHatRecord> epsilon_hat_table(const Network& net, const Dataset& data,
                                                const MeanGamma& mg,
                                                const EpsilonHatOptions& opts = {});

// example_id,delta_12,eps_hat_true,eps_hat_linear,eps_hat_mf,fooled_into_rank
void write_epsilon_hat_csv(std::ostream& out, const std::vector<EpsilonHatRecord>& records);

}  // namespace advscale
