#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "g2p/autograd.hpp"

namespace g2p::nn {

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
};

struct GradientCheckOptions {
  double eps = 1e-6;
  // Coordinates sampled per call across all parameters; 0 checks every one.
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  // Denominator floor so that two near-zero gradients do not read as a large
  // relative error.
  double floor = 1e-6;
};

// Compares the analytic gradient of a scalar-valued graph against central
// finite differences. `build` must construct the full forward pass on the
// given graph and return the scalar to differentiate; it is called once with
// recording enabled and twice per sampled coordinate without.
inline GradientCheckResult gradient_check(const std::function<Var(Graph<double>&)>& build,
                                          const std::vector<Tensor<double>*>& params,
                                          const GradientCheckOptions& opt = {}) {
  if (!(opt.eps >= 1e-7 && opt.eps <= 1e-3)) throw TensorError("gradient_check eps outside [1e-7, 1e-3]");

  for (auto* p : params) {
    p->enable_grad();
    p->zero_grad();
  }
  {
    Graph<double> g(true);
    Var out = build(g);
    g.backward(out);
  }
  for (auto* p : params) {
    for (double v : p->grad()) {
      if (!std::isfinite(v)) throw TensorError("non-finite analytic gradient");
    }
  }

  auto evaluate = [&]() {
    Graph<double> g(false);
    return g.value(build(g))[0];
  };

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t i = 0; i < params[pi]->size(); ++i) coords.emplace_back(pi, i);
  }
  if (opt.samples > 0 && opt.samples < coords.size()) {
    std::mt19937_64 rng(opt.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.samples);
  }

  GradientCheckResult result;
  for (auto [pi, i] : coords) {
    Tensor<double>& p = *params[pi];
    const double saved = p[i];
    p[i] = saved + opt.eps;
    const double plus = evaluate();
    p[i] = saved - opt.eps;
    const double minus = evaluate();
    p[i] = saved;
    const double numeric = (plus - minus) / (2.0 * opt.eps);
    const double analytic = p.grad()[i];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), opt.floor});
    result.max_relative_error = std::max(result.max_relative_error, std::abs(numeric - analytic) / denom);
    ++result.coordinates_checked;
  }
  return result;
}

}  // namespace g2p::nn
