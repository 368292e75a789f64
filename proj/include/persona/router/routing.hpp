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

// Cosine routing over expert embeddings and the router training objectives.

#include <span>
#include <vector>

#include "persona/autodiff/functional.hpp"
#include "persona/traits.hpp"

namespace persona::router {

using ad::Tensor;

struct RouterConfig {
  double tau = 1.0;
  double margin = 0.2;
  double beta = 1.0;

  void validate() const {
    if (!(tau > 0.0)) throw ParameterError("router tau must be > 0");
    if (!(margin > 0.0 && margin < 1.0)) throw ParameterError("router margin must lie in (0, 1)");
  }
};

/// Mixture weights w_i = softmax_i(cos(h, e_i) / tau) for persona embedding
/// h[h_e] against expert embeddings experts[10, h_e].
template <class T>
Tensor<T> route(const Tensor<T>& h, const Tensor<T>& experts, T tau) {
  if (!(tau > T(0))) throw ParameterError("route: tau must be > 0");
  if (experts.rank() != 2 || experts.cols() != h.numel()) {
    throw ShapeMismatchError("route: expert embeddings must be [n, " + std::to_string(h.numel()) + "]");
  }
  auto sims = ad::cosine_matrix(ad::reshape(h, ad::Shape{1, h.numel()}), experts);
  return ad::softmax_with_temperature(ad::reshape(sims, ad::Shape{experts.rows()}), tau);
}

/// Mean over the batch of Σ_pos (1 - s)^2 + Σ_neg max(0, s - margin)^2 with
/// s = cos(h_b, e_j). `batch_h` is [B, h_e]; `labels` has B entries.
template <class T>
Tensor<T> contrastive_loss(const Tensor<T>& batch_h, const Tensor<T>& experts,
                           std::span<const TraitActivationVector> labels, T margin) {
  const std::size_t batch = batch_h.rows();
  if (batch_h.rank() != 2 || batch == 0) throw InputError("contrastive_loss: batch_h must be [B, h_e] with B >= 1");
  if (labels.size() != batch) throw InputError("contrastive_loss: label count differs from batch size");
  if (experts.rows() != kNumPoles) throw ShapeMismatchError("contrastive_loss: expected 10 expert embeddings");
  std::vector<T> pos_mask(batch * kNumPoles, T(0)), neg_mask(batch * kNumPoles, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b].popcount() == 0) {
      throw InputError("contrastive_loss: record " + std::to_string(b) + " has an all-zero trait vector");
    }
    for (std::size_t j = 0; j < kNumPoles; ++j) (labels[b][j] ? pos_mask : neg_mask)[b * kNumPoles + j] = T(1);
  }
  auto sims = ad::cosine_matrix(batch_h, experts);
  auto pos = ad::weighted_sum(ad::square(ad::add_scalar(ad::scale(sims, T(-1)), T(1))), std::move(pos_mask));
  auto neg = ad::weighted_sum(ad::square(ad::relu(ad::add_scalar(sims, -margin))), std::move(neg_mask));
  return ad::scale(ad::add(pos, neg), T(1) / static_cast<T>(batch));
}

/// Average of (1 - cos(h_i, h_j)) over all unordered pairs of a same-p batch.
template <class T>
Tensor<T> trait_consistency_loss(const Tensor<T>& batch_h) {
  const std::size_t batch = batch_h.rows();
  if (batch_h.rank() != 2 || batch < 2) {
    throw BatchConstructionError("trait_consistency_loss: needs a batch of at least 2 embeddings");
  }
  const T norm = T(2) / static_cast<T>(batch * (batch - 1));
  std::vector<T> upper(batch * batch, T(0));
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t j = i + 1; j < batch; ++j) upper[i * batch + j] = norm;
  auto sims = ad::cosine_matrix(batch_h, batch_h);
  return ad::weighted_sum(ad::add_scalar(ad::scale(sims, T(-1)), T(1)), std::move(upper));
}

template <class T>
Tensor<T> router_loss(const Tensor<T>& contrastive, const Tensor<T>& trait, T beta) {
  return ad::add(contrastive, ad::scale(trait, beta));
}

}  // namespace persona::router
