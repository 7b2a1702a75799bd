#pragma once

// Central finite-difference verification of tape gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "phase/tensor.hpp"

namespace phase::ad {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;  // scalar entries compared
};

/// Relative error with an absolute floor: a structurally zero gradient shows up
/// numerically as roundoff of order eps * loss / h, which must not count.
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// `loss` maps the inputs to a scalar and is re-evaluated for every perturbed
/// entry. Inputs are marked as requiring gradients.
inline GradCheckResult gradcheck(std::vector<Tensor<double>> inputs,
                                 const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& loss,
                                 double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> l = loss(inputs);
    tape.backward(l);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(t.size(), 0.0));
  }
  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto vals = inputs[k].mutable_data();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = loss(inputs).item();
      vals[i] = orig - h;
      const double dn = loss(inputs).item();
      vals[i] = orig;
      const double numeric = (up - dn) / (2 * h);
      res.max_rel_err = std::max(res.max_rel_err, relative_error(analytic[k][i], numeric));
      ++res.checked;
    }
  }
  return res;
}

}  // namespace phase::ad
