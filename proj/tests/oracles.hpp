#pragma once

// Reference implementations for the calibration classifiers.

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "popcal/calibration.hpp"

namespace testsupport {

using popcal::CalibrationSample;
using popcal::MlpModel;
using popcal::Rng;

// Best accuracy over every threshold a classifier of the form x > lambda can
// realise: -inf plus each distinct value.
inline std::pair<double, double> exhaustive_threshold(const std::vector<double>& xs, const std::vector<int>& ys) {
  std::vector<double> cands = {-std::numeric_limits<double>::infinity()};
  cands.insert(cands.end(), xs.begin(), xs.end());
  std::sort(cands.begin(), cands.end());
  cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
  double best = -1, best_lambda = 0;
  for (double l : cands) {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) ok += (xs[i] > l ? 1 : 0) == ys[i];
    const double acc = static_cast<double>(ok) / static_cast<double>(xs.size());
    if (acc > best) {
      best = acc;
      best_lambda = l;
    }
  }
  return {best, best_lambda};
}

inline std::vector<CalibrationSample> random_batch(Rng& rng, std::size_t dim, std::size_t n) {
  std::vector<CalibrationSample> out(n);
  for (auto& s : out) {
    s.features.resize(dim);
    for (auto& v : s.features) v = popcal::standard_normal(rng);
    s.label = static_cast<int>(popcal::uniform_index(rng, 2));
  }
  return out;
}

// Smallest |pre-activation| over the batch; finite differences are only
// meaningful away from ReLU kinks.
inline double min_preactivation(const MlpModel& m, const std::vector<CalibrationSample>& batch) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : batch) {
    std::vector<double> x = s.features;
    for (std::size_t l = 0; l < 2; ++l) {
      const auto& L = m.layers[l];
      std::vector<double> z(L.out);
      for (std::size_t o = 0; o < L.out; ++o) {
        z[o] = L.bias[o];
        for (std::size_t i = 0; i < L.in; ++i) z[o] += L.weight[o * L.in + i] * x[i];
        best = std::min(best, std::fabs(z[o]));
        z[o] = std::max(0.0, z[o]);
      }
      x = z;
    }
  }
  return best;
}

// Worst relative error between analytic and central-difference gradients
// over every parameter; h = 1e-5, denominators floored at 1e-6.
inline double gradient_check_error(MlpModel& model, const std::vector<CalibrationSample>& batch) {
  popcal::MlpGradient grad;
  popcal::mlp_loss(model, batch, &grad);
  const double h = 1e-5;
  double worst = 0.0;
  auto check = [&](std::vector<double>& params, const std::vector<double>& analytic) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      const double keep = params[k];
      params[k] = keep + h;
      const double up = popcal::mlp_loss(model, batch);
      params[k] = keep - h;
      const double down = popcal::mlp_loss(model, batch);
      params[k] = keep;
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::fabs(numeric), std::fabs(analytic[k]), 1e-6});
      worst = std::max(worst, std::fabs(numeric - analytic[k]) / denom);
    }
  };
  for (std::size_t l = 0; l < 3; ++l) {
    check(model.layers[l].weight, grad[l].weight);
    check(model.layers[l].bias, grad[l].bias);
  }
  return worst;
}

}  // namespace testsupport
