#pragma once

#include <functional>
#include <random>
#include <vector>

#include "lgm/tensor.hpp"

namespace lgm::testing {

inline std::vector<double> random_values(std::mt19937_64& rng, std::size_t n,
                                         double lo = -3.0, double hi = 3.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape,
                            double lo = -3.0, double hi = 3.0) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), random_values(rng, n, lo, hi));
}

// Central finite differences of a scalar-valued function of one tensor.
inline std::vector<double> numeric_gradient(
    const std::function<double(const Tensor&)>& f, const Tensor& x,
    double h = 1e-4) {
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> plus = x.data(), minus = x.data();
    plus[i] += h;
    minus[i] -= h;
    grad[i] = (f(Tensor(x.shape(), std::move(plus))) -
               f(Tensor(x.shape(), std::move(minus)))) /
              (2.0 * h);
  }
  return grad;
}

inline double max_rel_error(const std::vector<double>& got,
                            const std::vector<double>& want,
                            double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max(std::abs(want[i]), floor);
    worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
  }
  return worst;
}

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace lgm::testing
