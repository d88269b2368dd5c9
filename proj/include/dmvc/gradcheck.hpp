// Copyright 2026 the dmvc authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <functional>
#include <vector>

#include "dmvc/autodiff.hpp"
#include "dmvc/rng.hpp"

namespace dmvc {

/// A scalar-valued graph under test: gets a fresh tape plus leaf vars for
/// each input tensor, returns the scalar output var.
using GradCheckFn = std::function<Var<double>(
    Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheckOptions {
  /// Check at most this many coordinates per input tensor (0 = all).
  /// Sampled deterministically; composed losses use this to stay fast.
  long max_coords_per_input = 0;
  uint64_t sample_seed = 12345;
};

/// Compares reverse-mode gradients against central finite differences and
/// returns the max relative error with denominator max(|a|,|b|,1e-8).
/// Runs at 64-bit; finite differences are too noisy at 32-bit.
inline double grad_check(const GradCheckFn& fn,
                         const std::vector<Tensor<double>>& inputs, double eps,
                         const GradCheckOptions& opt = {}) {
  if (eps < 1e-6 || eps > 1e-3)
    throw ShapeError("grad_check: eps must lie in [1e-6, 1e-3]");

  auto run = [&](const std::vector<Tensor<double>>& in, Tape<double>& tape,
                 std::vector<Var<double>>& vars) {
    vars.clear();
    for (const auto& t : in) vars.push_back(tape.leaf(t, true));
    Var<double> out = fn(tape, vars);
    if (out.numel() != 1)
      throw ShapeError("grad_check: closure output must be scalar, got " +
                       shape_str(out.shape()));
    return out;
  };

  // Analytic gradients.
  Tape<double> tape;
  std::vector<Var<double>> vars;
  Var<double> out = run(inputs, tape, vars);
  tape.backward(out);
  std::vector<Tensor<double>> analytic;
  for (auto& v : vars) analytic.push_back(tape.grad(v.id));

  auto eval = [&](const std::vector<Tensor<double>>& in) {
    Tape<double> t2;
    std::vector<Var<double>> vs;
    for (const auto& x : in) vs.push_back(t2.leaf(x, false));
    Var<double> o = fn(t2, vs);
    if (o.numel() != 1)
      throw ShapeError("grad_check: closure output must be scalar");
    return o.val()[0];
  };

  Lcg64 pick(opt.sample_seed);
  double max_rel = 0.0;
  std::vector<Tensor<double>> work = inputs;
  for (size_t k = 0; k < inputs.size(); ++k) {
    const long n = inputs[k].numel();
    std::vector<long> coords;
    if (opt.max_coords_per_input > 0 && n > opt.max_coords_per_input) {
      for (long i = 0; i < opt.max_coords_per_input; ++i)
        coords.push_back(long(pick.below(uint64_t(n))));
    } else {
      coords.resize(size_t(n));
      for (long i = 0; i < n; ++i) coords[size_t(i)] = i;
    }
    for (long i : coords) {
      const double saved = work[k][i];
      work[k][i] = saved + eps;
      const double fp = eval(work);
      work[k][i] = saved - eps;
      const double fm = eval(work);
      work[k][i] = saved;
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = analytic[k][i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      max_rel = std::max(max_rel, std::abs(fd - an) / denom);
    }
  }
  return max_rel;
}

}  // namespace dmvc
