#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advscale/data.hpp"
#include "advscale/network.hpp"

namespace advscale {

enum class AttackFamily { FgsmLinf, FgsmL2, StepLL, Pgd };

std::string to_string(AttackFamily family);
AttackFamily parse_attack_family(const std::string& name);  // fgsm_linf | fgsm_l2 | step_ll | pgd

struct AttackSpec {
  AttackFamily family = AttackFamily::FgsmLinf;
  double epsilon = 0.0;  // pixel units
  std::size_t pgd_steps = 20;
  double pgd_step_size = 2.0;
  bool pgd_random_start = false;
  bool clip_to_valid = true;
  std::uint64_t seed = 0;  // random start only

  void validate() const;
};

// Single-example attacks; the loss is always plain cross-entropy.
Tensor fgsm(const Network& net, const Tensor& x, std::size_t y, double epsilon,
            bool clip_to_valid = true);
// Throws DegenerateGradient when the loss gradient is exactly zero.
Tensor fgsm_l2(const Network& net, const Tensor& x, std::size_t y, double epsilon,
               bool clip_to_valid = true);
Tensor step_ll(const Network& net, const Tensor& x, double epsilon, bool clip_to_valid = true);
Tensor pgd(const Network& net, const Tensor& x, std::size_t y, const AttackSpec& spec);
Tensor attack(const Network& net, const Tensor& x, std::size_t y, const AttackSpec& spec);

// Clamps every column of `x` into the L-inf ball of radius `epsilon` around `center`.
void project_linf(Eigen::Ref<Matrix> x, const Eigen::Ref<const Matrix>& center, double epsilon);

struct AttackBatchStats {
  std::size_t clipped = 0;      // coordinates changed by the [0,255] clip
  std::size_t coordinates = 0;  // total coordinates attacked
  std::size_t degenerate = 0;   // L2 examples with zero gradient, left unperturbed
};

// Fixed attack direction for single-step families, one column per example:
// sign(grad) for fgsm_linf, -sign(grad wrt least-likely class) for step_ll,
// grad/|grad|_2 for fgsm_l2 (zero column when degenerate).
Matrix attack_directions(const Network& net, const Matrix& x, std::span<const std::size_t> labels,
                         AttackFamily family, std::size_t* degenerate = nullptr);

// Attacks every column of `x`. Gradients come from `net` only.
Matrix attack_batch(const Network& net, const Matrix& x, std::span<const std::size_t> labels,
                    const AttackSpec& spec, AttackBatchStats* stats = nullptr);

struct AdvErrorCurve {
  AttackFamily family = AttackFamily::FgsmLinf;
  std::vector<double> epsilons;
  double clean_accuracy = 0.0;
  std::vector<double> adv_accuracy;
  std::vector<double> adv_error;  // clean_accuracy - adv_accuracy
  std::vector<double> clipped_fraction;
  std::size_t n_examples = 0;
  // Degenerate-gradient examples are counted as unperturbed.
  std::size_t n_degenerate = 0;
};

// For pgd the template's step_size/epsilon ratio is held fixed across the grid.
AdvErrorCurve adv_error_curve(const Network& net, const Dataset& data,
                              const AttackSpec& spec_template, std::span<const double> eps_grid);

double accuracy(const Network& net, const Dataset& data);

// Accuracy of `target` on examples crafted against `source`.
double transfer_eval(const Network& source, const Network& target, const Dataset& data,
                     const AttackSpec& spec);

// `points` log-spaced values in [lo, hi].
std::vector<double> log_grid(double lo, double hi, std::size_t points);
// 32 points spanning [0.01, 64].
std::vector<double> default_epsilon_grid();

// epsilon,clean_acc,adv_acc,adv_error,n_clipped_frac
void write_curve_csv(std::ostream& out, const AdvErrorCurve& curve);

}  // namespace advscale
