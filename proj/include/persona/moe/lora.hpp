/*
 * Copyright (c) 2026, the persona-moe contributors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "persona/autodiff/functional.hpp"
#include "persona/traits.hpp"

namespace persona::moe {

using ad::Tensor;

struct LoraConfig {
  std::size_t rank = 8;
  double alpha = 16.0;

  double scaling() const { return alpha / static_cast<double>(rank); }

  void validate() const {
    if (rank == 0) throw ParameterError("lora rank must be positive");
    if (!(alpha > 0.0)) throw ParameterError("lora alpha must be positive");
  }

  bool operator==(const LoraConfig&) const = default;
};

/// Low-rank update for a host matrix W[in, out] (rows act on the input):
/// delta = (alpha / rank) * down * up, with down[in, rank] and up[rank, out].
template <class T>
struct LoraAdapter {
  Tensor<T> down;  // [in, rank], zero at init
  Tensor<T> up;    // [rank, out], small Gaussian at init
  std::size_t rank = 0;
  T alpha = T(0);

  T scaling() const { return alpha / static_cast<T>(rank); }
  std::size_t in_features() const { return down.rows(); }
  std::size_t out_features() const { return up.cols(); }

  static LoraAdapter create(Tensor<T> down, Tensor<T> up, T alpha) {
    if (down.rank() != 2 || up.rank() != 2 || down.cols() != up.rows()) {
      throw ShapeMismatchError("lora: factors " + ad::shape_string(down.shape()) + " and " +
                               ad::shape_string(up.shape()) + " do not chain");
    }
    const std::size_t r = down.cols();
    if (2 * r > std::min(down.rows(), up.cols())) {
      throw ShapeMismatchError("lora: rank " + std::to_string(r) + " exceeds half of min(" +
                               std::to_string(down.rows()) + ", " + std::to_string(up.cols()) + ")");
    }
    if (!(alpha > T(0))) throw ParameterError("lora: alpha must be positive");
    LoraAdapter a;
    a.down = std::move(down);
    a.up = std::move(up);
    a.rank = r;
    a.alpha = alpha;
    return a;
  }
};

template <class T>
Tensor<T> lora_delta(const LoraAdapter<T>& adapter) {
  return ad::scale(ad::matmul(adapter.down, adapter.up), adapter.scaling());
}

/// Checks that w holds non-negative entries summing to one.
template <class T>
void require_simplex(const Tensor<T>& w, std::size_t experts) {
  if (w.numel() != experts) {
    throw InputError("mixture must have " + std::to_string(experts) + " weights, got " + std::to_string(w.numel()));
  }
  double total = 0.0;
  for (T v : w.value()) {
    if (!(v >= T(0) && v <= T(1))) throw InputError("mixture weight outside [0, 1]");
    total += static_cast<double>(v);
  }
  if (std::abs(total - 1.0) > 1e-6 * static_cast<double>(experts)) {
    throw InputError("mixture weights sum to " + std::to_string(total) + ", expected 1");
  }
}

/// x W + Σ_i w_i * scaling * (x down_i) up_i. The mixture combines adapter
/// outputs, which by linearity equals using the merged matrix
/// W + Σ_i w_i delta_i. Experts whose weight is a constant zero are skipped.
template <class T>
Tensor<T> moe_linear_forward(const Tensor<T>& x, const Tensor<T>& weight, std::span<const LoraAdapter<T>* const> adapters,
                             const Tensor<T>& mixture) {
  require_simplex(mixture, adapters.size());
  std::vector<Tensor<T>> terms{ad::matmul(x, weight)};
  const bool constant_mixture = !mixture.requires_grad();
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    const auto& a = *adapters[i];
    if (a.in_features() != weight.rows() || a.out_features() != weight.cols()) {
      throw ShapeMismatchError("moe_linear_forward: adapter " + std::to_string(i) + " does not match host matrix " +
                               ad::shape_string(weight.shape()));
    }
    const T wi = mixture.value()[i];
    if (constant_mixture && wi == T(0)) continue;
    auto contribution = ad::matmul(ad::matmul(x, a.down), a.up);
    if (constant_mixture) {
      terms.push_back(ad::scale(contribution, wi * a.scaling()));
    } else {
      terms.push_back(ad::scale_by(ad::scale(contribution, a.scaling()), ad::element(mixture, i)));
    }
  }
  return terms.size() == 1 ? terms.front() : ad::add_n(terms);
}

/// Non-differentiable mixture weights, as reported to callers.
struct RouterOutput {
  std::array<double, kNumPoles> weights{};

  static RouterOutput uniform() {
    RouterOutput r;
    r.weights.fill(1.0 / static_cast<double>(kNumPoles));
    return r;
  }
  static RouterOutput one_hot(Pole p) {
    RouterOutput r;
    r.weights[pole_index(p)] = 1.0;
    return r;
  }
  template <class T>
  static RouterOutput from_tensor(const Tensor<T>& w) {
    require_simplex(w, kNumPoles);
    RouterOutput r;
    for (std::size_t i = 0; i < kNumPoles; ++i) r.weights[i] = static_cast<double>(w.value()[i]);
    return r;
  }
  template <class T>
  Tensor<T> to_tensor() const {
    std::vector<T> v(weights.begin(), weights.end());
    return Tensor<T>::vector(std::move(v));
  }

  double sum() const {
    double s = 0;
    for (double w : weights) s += w;
    return s;
  }
  std::size_t argmax() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < kNumPoles; ++i)
      if (weights[i] > weights[best]) best = i;
    return best;
  }
  /// Indices of the k largest weights (ties broken by lower index).
  std::vector<std::size_t> top_k(std::size_t k) const {
    std::vector<std::size_t> idx(kNumPoles);
    for (std::size_t i = 0; i < kNumPoles; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });
    idx.resize(std::min(k, idx.size()));
    return idx;
  }
};

}  // namespace persona::moe
