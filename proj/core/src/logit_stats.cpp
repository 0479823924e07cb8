#include "advscale/logit_stats.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <ostream>
#include <random>
#include <thread>

#include <Eigen/Cholesky>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/binomial.hpp>
#include <json.hpp>

#include "advscale/attacks.hpp"
#include "advscale/error.hpp"
#include "advscale/io.hpp"
#include "advscale/response.hpp"
#include "advscale/stats.hpp"

namespace advscale {

double LogitRecord::delta(std::size_t j) const {
  if (j < 2 || j - 2 >= deltas.size()) throw InvalidArgument("delta index out of range");
  return deltas[j - 2];
}

LogitRecord logit_record(const Eigen::Ref<const Vector>& logits, std::size_t j_max,
                         std::size_t example_id) {
  const auto n = static_cast<std::size_t>(logits.size());
  if (j_max < 2 || j_max > n) throw InvalidArgument("j_max must lie in [2, n_classes]");
  LogitRecord rec;
  rec.example_id = example_id;
  for (std::size_t c : rank_order(logits)) rec.sorted_logits.push_back(logits(static_cast<Eigen::Index>(c)));
  for (std::size_t j = 2; j <= j_max; ++j) rec.deltas.push_back(rec.sorted_logits[0] - rec.sorted_logits[j - 1]);
  return rec;
}

std::vector<LogitRecord> logit_diffs(const Network& net, const Dataset& data, std::size_t j_max) {
  if (j_max < 2 || j_max > net.n_classes()) throw InvalidArgument("j_max must lie in [2, n_classes]");
  std::vector<LogitRecord> out;
  out.reserve(data.size());
  constexpr Eigen::Index chunk = 1024;
  for (Eigen::Index start = 0; start < data.inputs.cols(); start += chunk) {
    const Eigen::Index n = std::min(chunk, data.inputs.cols() - start);
    const Matrix logits = forward_batch(net, data.inputs.middleCols(start, n));
    for (Eigen::Index i = 0; i < n; ++i) {
      out.push_back(logit_record(logits.col(i), j_max, static_cast<std::size_t>(start + i)));
    }
  }
  return out;
}

std::vector<double> deltas_for(const std::vector<LogitRecord>& records, std::size_t j) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.delta(j));
  return out;
}

double TailDensity::bin_center(std::size_t b) const { return std::sqrt(edges.at(b) * edges.at(b + 1)); }

TailDensity tail_density(std::span<const double> samples, const TailDensityOptions& opts) {
  if (samples.size() < 100) throw InvalidArgument("tail_density needs at least 100 samples");
  if (opts.bins == 0) throw InvalidArgument("tail_density needs at least one bin");
  TailDensity td;
  td.n_total = samples.size();
  std::vector<double> positive;
  positive.reserve(samples.size());
  for (double s : samples) {
    if (!(s >= 0.0)) throw InvalidArgument("tail_density samples must be nonnegative");
    if (s == 0.0) {
      ++td.n_zero;
    } else {
      positive.push_back(s);
    }
  }
  if (positive.empty()) throw InvalidArgument("tail_density: every sample is zero");

  const double lo = opts.lo ? *opts.lo : quantile(positive, 0.001);
  const double hi = opts.hi ? *opts.hi : *std::max_element(positive.begin(), positive.end());
  if (!(lo > 0.0) || !(hi > lo)) throw InvalidArgument("tail_density needs 0 < lo < hi");

  td.edges = log_grid(lo, hi, opts.bins + 1);
  td.edges.front() = lo;
  td.edges.back() = hi;
  td.counts.assign(opts.bins, 0);
  const double log_lo = std::log(lo);
  const double log_span = std::log(hi) - log_lo;
  for (double s : positive) {
    if (s < lo || s > hi) {
      ++td.n_outside;
      continue;
    }
    auto b = static_cast<std::size_t>((std::log(s) - log_lo) / log_span * static_cast<double>(opts.bins));
    b = std::min(b, opts.bins - 1);
    // Rounding in the log can land a sample one bin off its edges.
    if (s < td.edges[b]) --b;
    else if (b + 1 < opts.bins && s >= td.edges[b + 1]) ++b;
    ++td.counts[b];
  }
  td.density.resize(opts.bins);
  for (std::size_t b = 0; b < opts.bins; ++b) {
    const double width = td.edges[b + 1] - td.edges[b];
    td.density[b] = static_cast<double>(td.counts[b]) / (static_cast<double>(td.n_total) * width);
  }
  return td;
}

PowerLawFit fit_powerlaw(std::span<const double> xs, std::span<const double> ys, FitWindow window) {
  if (xs.size() != ys.size()) throw InvalidArgument("fit_powerlaw: xs and ys differ in length");
  if (!(window.lo > 0.0) || !(window.hi >= window.lo)) {
    throw InvalidArgument("fit_powerlaw: window must satisfy 0 < lo <= hi");
  }
  PowerLawFit fit;
  fit.window = window;
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i] < window.lo || xs[i] > window.hi) continue;
    if (!(ys[i] > 0.0)) {
      ++fit.n_excluded;
      continue;
    }
    lx.push_back(std::log(xs[i]));
    ly.push_back(std::log(ys[i]));
  }
  if (lx.size() < 4) {
    throw InvalidArgument("fit_powerlaw: " + std::to_string(lx.size()) +
                          " usable points in window, need 4");
  }
  const LinearFit lf = linear_fit(lx, ly);
  fit.A = std::exp(lf.intercept);
  fit.B = lf.slope;
  fit.r_squared = lf.r_squared;
  fit.n_points = lx.size();
  return fit;
}

TailExponent tail_exponent(const TailDensity& density, FitWindow window) {
  std::vector<double> lx, ly, w;
  for (std::size_t b = 0; b < density.bins(); ++b) {
    const double c = density.bin_center(b);
    if (density.counts[b] == 0 || c < window.lo || c > window.hi) continue;
    lx.push_back(std::log(c));
    ly.push_back(std::log(density.density[b]));
    w.push_back(static_cast<double>(density.counts[b]));
  }
  if (lx.size() < 4) {
    throw InvalidArgument("tail_exponent: " + std::to_string(lx.size()) +
                          " populated bins in window, need 4");
  }
  const LinearFit lf = linear_fit(lx, ly, w);
  return {lf.slope, lf.intercept, lf.r_squared, lx.size()};
}

FitWindow default_small_window(const TailDensity& density) {
  for (std::size_t b = 0; b < density.bins(); ++b) {
    if (density.counts[b] > 0) return {density.edges[b], density.edges[b] * 100.0};
  }
  throw InvalidArgument("default_small_window: no populated bins");
}

std::string to_string(BaseDistribution base) {
  return base == BaseDistribution::Uniform ? "uniform" : "gaussian";
}

BaseDistribution parse_base_distribution(const std::string& name) {
  if (name == "uniform") return BaseDistribution::Uniform;
  if (name == "gaussian" || name == "normal") return BaseDistribution::Gaussian;
  throw InvalidArgument("unknown base distribution '" + name + "' (uniform | gaussian)");
}

void OracleConfig::validate() const {
  if (n_classes < 2) throw InvalidArgument("oracle needs at least 2 classes");
  if (j_max < 2 || j_max > n_classes) throw InvalidArgument("oracle j_max must lie in [2, n_classes]");
  if (streams == 0 || threads == 0) throw InvalidArgument("oracle streams and threads must be positive");
}

std::vector<std::vector<double>> oracle_sample(const OracleConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<double>> out(cfg.j_max - 1, std::vector<double>(cfg.n_samples));
  const std::size_t per = cfg.n_samples / cfg.streams;
  const std::size_t extra = cfg.n_samples % cfg.streams;

  auto run_stream = [&](std::size_t s) {
    const std::size_t begin = s * per + std::min(s, extra);
    const std::size_t end = begin + per + (s < extra ? 1 : 0);
    std::mt19937_64 rng(cfg.seed + s);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::normal_distribution<double> gaussian(0.0, 1.0);
    std::vector<double> h(cfg.n_classes);
    for (std::size_t i = begin; i < end; ++i) {
      for (double& v : h) v = cfg.base == BaseDistribution::Uniform ? uniform(rng) : gaussian(rng);
      std::partial_sort(h.begin(), h.begin() + static_cast<std::ptrdiff_t>(cfg.j_max), h.end(),
                        std::greater<>());
      for (std::size_t j = 2; j <= cfg.j_max; ++j) out[j - 2][i] = h[0] - h[j - 1];
    }
  };

  if (cfg.threads == 1) {
    for (std::size_t s = 0; s < cfg.streams; ++s) run_stream(s);
  } else {
    std::vector<std::jthread> workers;
    for (std::size_t t = 0; t < std::min(cfg.threads, cfg.streams); ++t) {
      workers.emplace_back([&, t] {
        for (std::size_t s = t; s < cfg.streams; s += cfg.threads) run_stream(s);
      });
    }
  }
  return out;
}

double oracle_density_at_zero(const OracleConfig& cfg, std::size_t j) {
  cfg.validate();
  if (j < 2 || j > cfg.n_classes) throw InvalidArgument("j must lie in [2, n_classes]");
  using boost::math::quadrature::gauss_kronrod;
  const double n = static_cast<double>(cfg.n_classes);
  const double a = n * (n - 1.0) *
                   boost::math::binomial_coefficient<double>(static_cast<unsigned>(cfg.n_classes - 2),
                                                             static_cast<unsigned>(j - 2));
  const double lower_power = static_cast<double>(cfg.n_classes - j);
  const double jd = static_cast<double>(j);
  double integral = 0.0;
  double error = 0.0;
  if (cfg.base == BaseDistribution::Uniform) {
    auto f = [&](double r) { return std::pow(r, lower_power); };
    integral = gauss_kronrod<double, 61>::integrate(f, 0.0, 1.0, 15, 1e-12, &error);
  } else {
    auto f = [&](double r) {
      const double pdf = std::exp(-0.5 * r * r) / std::sqrt(2.0 * std::numbers::pi);
      const double cdf = 0.5 * std::erfc(-r / std::numbers::sqrt2);
      return std::pow(cdf, lower_power) * std::pow(pdf, jd);
    };
    integral = gauss_kronrod<double, 61>::integrate(f, -10.0, 10.0, 15, 1e-12, &error);
  }
  if (error > 1e-8) throw Error("oracle quadrature did not reach 1e-8 absolute error");
  return a * integral;
}

LeadingCoefficient leading_coefficient(std::span<const double> samples, std::size_t j, double hi,
                                       std::size_t bins) {
  if (j < 2) throw InvalidArgument("leading_coefficient needs j >= 2");
  if (!(hi > 0.0) || bins < 2) throw InvalidArgument("leading_coefficient needs hi > 0 and >= 2 bins");
  if (samples.empty()) throw InvalidArgument("leading_coefficient needs samples");
  std::vector<double> counts(bins, 0.0);
  LeadingCoefficient out;
  for (double s : samples) {
    if (s < 0.0 || s >= hi) continue;
    const auto b = std::min(bins - 1, static_cast<std::size_t>(s / hi * static_cast<double>(bins)));
    counts[b] += 1.0;
    ++out.n_in_range;
  }
  const double n = static_cast<double>(samples.size());
  const double p1 = static_cast<double>(j - 1);
  const double p2 = static_cast<double>(j);
  Eigen::Matrix2d normal = Eigen::Matrix2d::Zero();
  Eigen::Vector2d rhs = Eigen::Vector2d::Zero();
  for (std::size_t b = 0; b < bins; ++b) {
    const double a = hi * static_cast<double>(b) / static_cast<double>(bins);
    const double c = hi * static_cast<double>(b + 1) / static_cast<double>(bins);
    const Eigen::Vector2d basis((std::pow(c, p1) - std::pow(a, p1)) / p1,
                                (std::pow(c, p2) - std::pow(a, p2)) / p2);
    const double w = 1.0 / std::max(counts[b], 1.0);
    normal += w * basis * basis.transpose();
    rhs += w * basis * (counts[b] / n);
  }
  const Eigen::Vector2d coef = normal.ldlt().solve(rhs);
  out.C = coef(0);
  out.D = coef(1);
  return out;
}

void write_deltas_csv(std::ostream& out, const std::vector<LogitRecord>& records) {
  out << "example_id,j,delta\n";
  for (const auto& r : records) {
    for (std::size_t k = 0; k < r.deltas.size(); ++k) {
      out << r.example_id << ',' << k + 2 << ',' << format_double(r.deltas[k]) << '\n';
    }
  }
}

void write_density_csv(std::ostream& out, const std::vector<DensitySeries>& series) {
  out << "j,bin_lo,bin_hi,density\n";
  for (const auto& s : series) {
    for (std::size_t b = 0; b < s.density.bins(); ++b) {
      out << s.j << ',' << format_double(s.density.edges[b]) << ','
          << format_double(s.density.edges[b + 1]) << ',' << format_double(s.density.density[b])
          << '\n';
    }
  }
}

std::string fit_json(const PowerLawFit& fit) {
  nlohmann::ordered_json j;
  j["A"] = fit.A;
  j["B"] = fit.B;
  j["window"] = {fit.window.lo, fit.window.hi};
  j["r_squared"] = fit.r_squared;
  j["n_points"] = fit.n_points;
  j["n_excluded"] = fit.n_excluded;
  return j.dump(2) + "\n";
}

}  // namespace advscale
