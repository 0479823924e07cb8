#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace advscale {

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
  std::size_t n = 0;
};

// Least-squares line y = intercept + slope * x. Optional nonnegative weights;
// r_squared is the weighted coefficient of determination.
LinearFit linear_fit(std::span<const double> xs, std::span<const double> ys,
                     std::span<const double> weights = {});

// Ranks starting at 1; ties receive their average rank.
std::vector<double> average_ranks(std::span<const double> values);

double pearson(std::span<const double> a, std::span<const double> b);
double spearman(std::span<const double> a, std::span<const double> b);

double median(std::vector<double> values);
// Linear interpolation between order statistics, q in [0,1].
double quantile(std::vector<double> values, double q);

}  // namespace advscale
