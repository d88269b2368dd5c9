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

#include <cmath>
#include <cstdint>

namespace dmvc {

/// 64-bit linear congruential generator,
/// x_{n+1} = 6364136223846793005 * x_n + 1442695040888963407 mod 2^64.
/// One of these drives every random decision in the project: dataset pixels,
/// weight init, batch sampling, quantization noise. The full state is one
/// u64, which makes checkpoint/resume and cross-run determinism trivial.
class Lcg64 {
 public:
  explicit Lcg64(uint64_t seed = 0) : state_(seed) {
    // A couple of warm-up steps so that small seeds diverge immediately.
    next();
    next();
  }

  uint64_t next() {
    state_ = state_ * 6364136223846793005ULL + 1442695040888963407ULL;
    return state_;
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  uint64_t below(uint64_t n) { return next() % n; }

  /// Standard normal via Box-Muller. Consumes two draws per pair.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  /// Decorrelated child generator; used to give each dataset sequence its
  /// own stream so generation order cannot matter.
  static Lcg64 substream(uint64_t seed, uint64_t index) {
    uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return Lcg64(z ^ (z >> 31));
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace dmvc
