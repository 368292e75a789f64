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
#include <span>
#include <vector>

#include "persona/autodiff/ops.hpp"

namespace persona::ad {

/// a.b / (|a||b|) for two vectors of equal length. Zero-norm inputs throw
/// DegenerateInputError rather than producing NaN.
template <class T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel() || a.numel() == 0) {
    throw ShapeMismatchError("cosine_similarity: lengths " + std::to_string(a.numel()) + " and " +
                             std::to_string(b.numel()));
  }
  const std::size_t n = a.numel();
  using A = detail::Acc<T>;
  A ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ab += static_cast<A>(a.value()[i]) * b.value()[i];
    aa += static_cast<A>(a.value()[i]) * a.value()[i];
    bb += static_cast<A>(b.value()[i]) * b.value()[i];
  }
  const T na = static_cast<T>(std::sqrt(aa)), nb = static_cast<T>(std::sqrt(bb));
  if (!(na > T(0)) || !(nb > T(0))) {
    throw DegenerateInputError("cosine_similarity: zero-norm input");
  }
  const T c = static_cast<T>(std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), A(-1), A(1)));
  return detail::make_result<T>(Shape{}, {c}, "cosine_similarity", {a, b}, [n, na, nb, c](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const T g = self.grad[0];
    if (pa.requires_grad) {
      auto ga = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        ga[i] += g * (pb.value[i] / (na * nb) - c * pa.value[i] / (na * na));
    }
    if (pb.requires_grad) {
      auto gb = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        gb[i] += g * (pa.value[i] / (na * nb) - c * pb.value[i] / (nb * nb));
    }
  });
}

/// Pairwise cosine similarities between the rows of a[m,k] and b[n,k] -> [m,n].
template <class T>
Tensor<T> cosine_matrix(const Tensor<T>& a, const Tensor<T>& b) {
  return matmul_nt(normalize_rows(a), normalize_rows(b));
}

/// softmax(logits / tau) over a vector, stabilized by max subtraction.
template <class T>
Tensor<T> softmax_with_temperature(const Tensor<T>& logits, T tau) {
  if (!(tau > T(0))) throw ParameterError("softmax_with_temperature: tau must be > 0");
  const std::size_t n = logits.numel();
  if (n == 0) throw InputError("softmax_with_temperature: empty logits");
  T mx = logits.value()[0];
  for (T v : logits.value()) {
    if (!std::isfinite(v)) throw InputError("softmax_with_temperature: non-finite logit");
    mx = std::max(mx, v);
  }
  std::vector<T> out(n);
  detail::Acc<T> z = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp((logits.value()[i] - mx) / tau);
    z += out[i];
  }
  for (auto& v : out) v = static_cast<T>(v / z);
  return detail::make_result<T>(Shape{n}, out, "softmax_with_temperature", {logits},
                                [n, tau, y = out](Node<T>& self) {
                                  detail::Acc<T> s = 0;
                                  for (std::size_t i = 0; i < n; ++i) s += static_cast<detail::Acc<T>>(self.grad[i]) * y[i];
                                  auto g = self.parents[0]->grad_buffer();
                                  for (std::size_t i = 0; i < n; ++i) g[i] += static_cast<T>(y[i] * (self.grad[i] - s) / tau);
                                });
}

enum class Reduction { Sum, Mean };

/// Next-token cross-entropy: -Σ_t log softmax(logits_t)[target_t] over a
/// [T,V] logit matrix. Sum is the canonical reduction; Mean divides by T.
template <class T>
Tensor<T> cross_entropy_lm(const Tensor<T>& logits, std::span<const std::uint32_t> targets,
                           Reduction reduction = Reduction::Sum) {
  const std::size_t steps = logits.rows(), vocab = logits.cols();
  if (targets.empty() || targets.size() != steps) {
    throw InputError("cross_entropy_lm: " + std::to_string(steps) + " logit rows vs " +
                     std::to_string(targets.size()) + " targets");
  }
  for (auto t : targets) {
    if (t >= vocab) {
      throw InputError("cross_entropy_lm: target id " + std::to_string(t) + " >= vocab " + std::to_string(vocab));
    }
  }
  std::vector<T> probs(steps * vocab);
  detail::Acc<T> loss = 0;
  for (std::size_t t = 0; t < steps; ++t) {
    const T* row = logits.value().data() + t * vocab;
    T mx = row[0];
    for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
    detail::Acc<T> z = 0;
    for (std::size_t v = 0; v < vocab; ++v) {
      probs[t * vocab + v] = std::exp(row[v] - mx);
      z += probs[t * vocab + v];
    }
    for (std::size_t v = 0; v < vocab; ++v) probs[t * vocab + v] = static_cast<T>(probs[t * vocab + v] / z);
    loss += std::log(z) + mx - row[targets[t]];
  }
  const T norm = reduction == Reduction::Mean ? T(1) / static_cast<T>(steps) : T(1);
  loss *= norm;
  std::vector<std::uint32_t> saved(targets.begin(), targets.end());
  return detail::make_result<T>(Shape{}, {static_cast<T>(loss)}, "cross_entropy_lm", {logits},
                                [vocab, norm, probs = std::move(probs), saved = std::move(saved)](Node<T>& self) {
                                  auto g = self.parents[0]->grad_buffer();
                                  const T g0 = self.grad[0] * norm;
                                  for (std::size_t t = 0; t < saved.size(); ++t) {
                                    for (std::size_t v = 0; v < vocab; ++v) g[t * vocab + v] += g0 * probs[t * vocab + v];
                                    g[t * vocab + saved[t]] -= g0;
                                  }
                                });
}

}  // namespace persona::ad
