#pragma once

// Central finite-difference oracle shared by the op/layer gradient tests: for
// loss = f(inputs...), compare d loss / d input[i] against
// (f(x+h) - f(x-h)) / 2h entry by entry.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "icegraph/autodiff.hpp"

namespace gradcheck {

// f builds the forward graph on the given tape (fresh per call) and returns a
// scalar loss. inputs are leaf tensors mutated in place by the probe.
// Returns the max relative error between analytic and numeric gradients.
inline double max_rel_error(
    const std::function<icegraph::DiffTensor(icegraph::Tape*)>& f,
    std::vector<icegraph::DiffTensor> inputs, double h = 1e-5) {
  using namespace icegraph;

  // Analytic pass.
  for (DiffTensor& in : inputs) {
    in.ensure_grad();
    in.zero_grad();
  }
  {
    Tape tape;
    DiffTensor loss = f(&tape);
    tape.backward(loss);
  }

  double worst = 0.0;
  for (DiffTensor& in : inputs) {
    auto vals = in.values();
    const auto grads = in.grad();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + h;
      const double up = f(nullptr).values()[0];
      vals[i] = keep - h;
      const double dn = f(nullptr).values()[0];
      vals[i] = keep;
      const double numeric = (up - dn) / (2.0 * h);
      const double denom = std::max({std::abs(numeric), std::abs(grads[i]), 1e-8});
      worst = std::max(worst, std::abs(numeric - grads[i]) / denom);
    }
  }
  return worst;
}

inline icegraph::DiffTensor random_tensor(int rows, int cols, std::mt19937_64& rng,
                                          double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  icegraph::DiffTensor t = icegraph::DiffTensor::zeros(rows, cols);
  for (double& x : t.values()) x = dist(rng);
  return t;
}

}  // namespace gradcheck
