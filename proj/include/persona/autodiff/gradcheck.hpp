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

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "persona/autodiff/tensor.hpp"

namespace persona::ad {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  // Location of the worst coordinate.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckOptions {
  /// 0 checks every coordinate; otherwise a seeded sample per parameter.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

namespace detail {

template <class T>
std::vector<std::vector<T>> collect_analytic(const std::vector<Tensor<T>>& params) {
  std::vector<std::vector<T>> out;
  for (const auto& p : params) {
    if (p.has_grad()) {
      out.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      out.emplace_back(p.numel(), T(0));
    }
  }
  return out;
}

template <class T, class O, class OracleFn>
GradCheckReport compare_with_central_differences(const std::vector<std::vector<T>>& analytic, OracleFn&& oracle_fn,
                                                 const std::vector<Tensor<O>>& oracle_params, O epsilon,
                                                 const GradCheckOptions& options) {
  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < oracle_params.size(); ++pi) {
    const auto& p = oracle_params[pi];
    std::vector<std::size_t> coords(p.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (options.max_coords_per_param && coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
    }
    auto values = p.mutable_value();
    for (std::size_t i : coords) {
      const O saved = values[i];
      values[i] = saved + epsilon;
      const O plus = oracle_fn().item();
      values[i] = saved - epsilon;
      const O minus = oracle_fn().item();
      values[i] = saved;
      if (!std::isfinite(static_cast<double>(plus)) || !std::isfinite(static_cast<double>(minus))) {
        throw NumericError("finite_difference_check: perturbed loss is not finite");
      }
      // Divide by the step actually taken after rounding to O.
      const O step = O(saved + epsilon) - O(saved - epsilon);
      const double numeric = static_cast<double>((plus - minus) / step);
      const double a = static_cast<double>(analytic[pi][i]);
      const double err = std::abs(a - numeric) / (std::abs(numeric) + 1e-8);
      if (report.coordinates == 0 || err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_param = pi;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
      ++report.coordinates;
    }
  }
  return report;
}

template <class T>
void check_epsilon(T epsilon) {
  if (!(epsilon >= T(1e-6) && epsilon <= T(1e-2))) {
    throw ParameterError("finite_difference_check: epsilon must lie in [1e-6, 1e-2]");
  }
}

template <class T, class LossFn>
std::vector<std::vector<T>> analytic_gradients(LossFn&& loss_fn, const std::vector<Tensor<T>>& params) {
  for (const auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor<T> root = loss_fn();
  if (!std::isfinite(static_cast<double>(root.item()))) {
    throw NumericError("finite_difference_check: loss is not finite");
  }
  backward(root);
  return collect_analytic(params);
}

}  // namespace detail

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// of the same function. Returns max over coordinates of
/// |analytic - numeric| / (|numeric| + 1e-8).
///
/// `loss_fn` must be deterministic and return a scalar tensor built from
/// `params`. Parameters are perturbed in place and restored.
template <class T, class LossFn>
GradCheckReport finite_difference_check(LossFn&& loss_fn, const std::vector<Tensor<T>>& params, T epsilon,
                                        const GradCheckOptions& options = {}) {
  detail::check_epsilon(epsilon);
  auto analytic = detail::analytic_gradients<T>(loss_fn, params);
  return detail::compare_with_central_differences<T, T>(analytic, loss_fn, params, epsilon, options);
}

/// Same metric, but the central differences come from `oracle_fn` evaluated
/// over `oracle_params` in precision O (typically long double), which must
/// hold exactly the values of `params`. This isolates the rounding error of
/// the T-precision reverse pass from the truncation and cancellation error
/// of the difference quotient.
template <class T, class O, class LossFn, class OracleFn>
GradCheckReport finite_difference_check_with_oracle(LossFn&& loss_fn, const std::vector<Tensor<T>>& params,
                                                    OracleFn&& oracle_fn, const std::vector<Tensor<O>>& oracle_params,
                                                    O epsilon, const GradCheckOptions& options = {}) {
  detail::check_epsilon(epsilon);
  if (params.size() != oracle_params.size()) throw UsageError("oracle parameter list differs in length");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].shape() != oracle_params[k].shape()) throw UsageError("oracle parameter shape differs");
    for (std::size_t i = 0; i < params[k].numel(); ++i) {
      if (static_cast<O>(params[k].value()[i]) != oracle_params[k].value()[i]) {
        throw UsageError("oracle parameters must hold the same values as the checked parameters");
      }
    }
  }
  auto analytic = detail::analytic_gradients<T>(loss_fn, params);
  return detail::compare_with_central_differences<T, O>(analytic, oracle_fn, oracle_params, epsilon, options);
}

}  // namespace persona::ad
