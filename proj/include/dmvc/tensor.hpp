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

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "dmvc/common.hpp"
#include "dmvc/rng.hpp"

namespace dmvc {

/// Dense row-major tensor templated on scalar. Training runs with S = float,
/// the gradient-check harness re-runs the same graphs with S = double.
/// Shapes follow the NCHW convention wherever four axes are involved.
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Storage = Eigen::Array<S, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.setZero(check_numel(shape_));
  }

  Tensor(std::vector<int> shape, std::vector<S> values)
      : shape_(std::move(shape)) {
    const long n = check_numel(shape_);
    if (long(values.size()) != n)
      throw ShapeError("tensor init: " + shape_str(shape_) + " wants " +
                       std::to_string(n) + " values, got " +
                       std::to_string(values.size()));
    data_ = Eigen::Map<const Storage>(values.data(), n);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, S v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }

  static Tensor randn(std::vector<int> shape, Lcg64& rng, S stddev = S(1)) {
    Tensor t(std::move(shape));
    for (long i = 0; i < t.numel(); ++i) t.data_[i] = S(rng.normal()) * stddev;
    return t;
  }

  static Tensor uniform(std::vector<int> shape, Lcg64& rng, S lo, S hi) {
    Tensor t(std::move(shape));
    for (long i = 0; i < t.numel(); ++i)
      t.data_[i] = S(rng.uniform(double(lo), double(hi)));
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  int dim(int i) const { return shape_[size_t(i)]; }
  long numel() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  Storage& array() { return data_; }
  const Storage& array() const { return data_; }

  S& operator[](long i) { return data_[i]; }
  S operator[](long i) const { return data_[i]; }

  /// NCHW element access; mainly for tests and pixel-level plumbing.
  S& at(int n, int c, int y, int x) {
    return data_[((long(n) * dim(1) + c) * dim(2) + y) * dim(3) + x];
  }
  S at(int n, int c, int y, int x) const {
    return data_[((long(n) * dim(1) + c) * dim(2) + y) * dim(3) + x];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (long i = 0; i < numel(); ++i)
      if (!std::isfinite(double(data_[i]))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (long i = 0; i < numel(); ++i) out[i] = T(data_[i]);
    return out;
  }

  Tensor reshaped(std::vector<int> shape) const {
    if (check_numel(shape) != numel())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " +
                       shape_str(shape) + ": element count differs");
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

 private:
  static long check_numel(const std::vector<int>& shape) {
    long n = 1;
    for (int d : shape) {
      if (d <= 0)
        throw ShapeError("non-positive extent in shape " + shape_str(shape));
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  Storage data_;
};

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b,
                        const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace dmvc
