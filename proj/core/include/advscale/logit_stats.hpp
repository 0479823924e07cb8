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

struct LogitRecord {
  std::size_t example_id = 0;
  std::vector<double> sorted_logits;  // descending
  std::vector<double> deltas;         // deltas[k] = r_1 - r_{k+2}

  // Gap to the j-th largest logit, 2 <= j <= j_max.
  double delta(std::size_t j) const;
};

LogitRecord logit_record(const Eigen::Ref<const Vector>& logits, std::size_t j_max,
                         std::size_t example_id = 0);
std::vector<LogitRecord> logit_diffs(const Network& net, const Dataset& data, std::size_t j_max);

// All Delta_1j values for one j, in record order.
std::vector<double> deltas_for(const std::vector<LogitRecord>& records, std::size_t j);

struct TailDensity {
  std::vector<double> edges;     // bins + 1 log-spaced edges
  std::vector<double> density;   // count / (n_total * width)
  std::vector<std::size_t> counts;
  std::size_t n_total = 0;       // every sample, zeros included
  std::size_t n_zero = 0;
  std::size_t n_outside = 0;     // positive samples outside [edges.front(), edges.back()]

  std::size_t bins() const noexcept { return density.size(); }
  double bin_center(std::size_t b) const;  // geometric mean of the edges
};

struct TailDensityOptions {
  std::size_t bins = 40;
  // Defaults: lo at the 0.1th percentile of the positive samples, hi at their maximum.
  std::optional<double> lo;
  std::optional<double> hi;
};

// Throws InvalidArgument on fewer than 100 samples, negative samples, or when
// every sample is zero.
TailDensity tail_density(std::span<const double> samples, const TailDensityOptions& opts = {});

struct FitWindow {
  double lo = 0.0;
  double hi = 0.0;
};

struct PowerLawFit {
  double A = 0.0;
  double B = 0.0;
  FitWindow window;
  double r_squared = 0.0;
  std::size_t n_points = 0;
  std::size_t n_excluded = 0;  // points in the window with y <= 0
};

// Log-log least squares of y = A x^B over points with window.lo <= x <= window.hi.
// Throws InvalidArgument with fewer than 4 usable points.
PowerLawFit fit_powerlaw(std::span<const double> xs, std::span<const double> ys, FitWindow window);

struct TailExponent {
  double slope = 0.0;
  double intercept = 0.0;  // log density at log Delta = 0
  double r_squared = 0.0;
  std::size_t n_bins = 0;
};

// Count-weighted least squares of log density against log bin centre over
// populated bins whose centre lies in the window. Needs at least 4 bins.
TailExponent tail_exponent(const TailDensity& density, FitWindow window);

// The lowest two decades above the first populated bin.
FitWindow default_small_window(const TailDensity& density);

enum class BaseDistribution { Uniform, Gaussian };

std::string to_string(BaseDistribution base);
BaseDistribution parse_base_distribution(const std::string& name);

struct OracleConfig {
  std::size_t n_classes = 10;
  BaseDistribution base = BaseDistribution::Uniform;
  std::size_t n_samples = 5'000'000;
  std::uint64_t seed = 0;
  std::size_t j_max = 4;
  // Samples are split into this many independent streams seeded seed + s.
  // Results do not depend on `threads`.
  std::size_t streams = 8;
  std::size_t threads = 1;

  void validate() const;
};

// result[j - 2][i] = Delta_1j of sample i.
std::vector<std::vector<double>> oracle_sample(const OracleConfig& cfg);

// C = N(N-1) binom(N-2, j-2) * integral F^{N-j} P^j over the base support.
double oracle_density_at_zero(const OracleConfig& cfg, std::size_t j);

struct LeadingCoefficient {
  double C = 0.0;
  double D = 0.0;  // next-order coefficient
  std::size_t n_in_range = 0;
};

// Fits count_b / n = C * int_b x^{j-2} + D * int_b x^{j-1} on `bins` linear bins
// of [0, hi], each bin weighted by 1 / max(count, 1).
LeadingCoefficient leading_coefficient(std::span<const double> samples, std::size_t j, double hi,
                                       std::size_t bins = 50);

// example_id,j,delta
void write_deltas_csv(std::ostream& out, const std::vector<LogitRecord>& records);

struct DensitySeries {
  std::size_t j = 2;
  TailDensity density;
};

// j,bin_lo,bin_hi,density
void write_density_csv(std::ostream& out, const std::vector<DensitySeries>& series);

std::string fit_json(const PowerLawFit& fit);

}  // namespace advscale
