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

#include <map>
#include <string>
#include <vector>

#include "dmvc/tensor.hpp"

namespace dmvc {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam moments. One state owns every parameter of a training
/// loop; `t` advances exactly once per step.
template <typename S>
struct OptimizerState {
  struct Moments {
    Tensor<S> m;
    Tensor<S> v;
  };
  std::map<std::string, Moments> moments;
  long t = 0;

  Moments& for_param(const std::string& name, const std::vector<int>& shape) {
    auto it = moments.find(name);
    if (it == moments.end()) {
      Moments mm{Tensor<S>::zeros(shape), Tensor<S>::zeros(shape)};
      it = moments.emplace(name, std::move(mm)).first;
    }
    if (it->second.m.shape() != shape)
      throw ShapeError("optimizer state for " + name + " has shape " +
                       shape_str(it->second.m.shape()) + ", parameter is " +
                       shape_str(shape));
    return it->second;
  }
};

/// One Adam step over a named parameter set. Parameters without a gradient
/// are skipped and reported back. Update math runs in double, state and
/// parameters stay in S; the whole step is bitwise deterministic.
template <typename S>
std::vector<std::string> adam_step(
    const std::vector<std::pair<std::string, Tensor<S>*>>& params,
    const std::map<std::string, const Tensor<S>*>& grads,
    OptimizerState<S>& state, const AdamHyper& hp) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(hp.beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(hp.beta2, double(state.t));
  std::vector<std::string> skipped;
  for (const auto& [name, value] : params) {
    auto git = grads.find(name);
    if (git == grads.end() || git->second == nullptr ||
        git->second->empty()) {
      skipped.push_back(name);
      continue;
    }
    const Tensor<S>& g = *git->second;
    if (!g.same_shape(*value))
      throw ShapeError("gradient for " + name + " has shape " +
                       shape_str(g.shape()) + ", parameter is " +
                       shape_str(value->shape()));
    auto& mm = state.for_param(name, value->shape());
    for (long i = 0; i < value->numel(); ++i) {
      const double gi = double(g[i]);
      const double m = hp.beta1 * double(mm.m[i]) + (1.0 - hp.beta1) * gi;
      const double v = hp.beta2 * double(mm.v[i]) + (1.0 - hp.beta2) * gi * gi;
      mm.m[i] = S(m);
      mm.v[i] = S(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      (*value)[i] = S(double((*value)[i]) -
                      hp.lr * mhat / (std::sqrt(vhat) + hp.eps));
    }
  }
  return skipped;
}

}  // namespace dmvc
