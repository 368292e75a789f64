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

#include <string>
#include <vector>

#include "persona/lm/transformer.hpp"
#include "persona/moe/lora.hpp"

namespace persona::moe {

using lm::BaseModel;
using lm::LinearHook;
using lm::TransformerConfig;

/// One trait-pole expert: a LoRA adapter for every adapted site of the base.
template <class T>
struct PersonaExpert {
  Pole pole = Pole::HighOpenness;
  std::vector<LoraAdapter<T>> adapters;  // indexed by lm::site_index

  template <class F>
  void for_each_parameter(const std::string& prefix, F&& f) {
    for (std::size_t s = 0; s < adapters.size(); ++s) {
      const std::string p = prefix + "layer" + std::to_string(s / lm::kSitesPerLayer) + "." +
                            lm::kSiteNames[s % lm::kSitesPerLayer] + ".";
      f(p + "down", adapters[s].down);
      f(p + "up", adapters[s].up);
    }
  }
};

/// The ten experts plus their routing embeddings e_i, stored as the rows
/// of one [10, h_e] table in canonical pole order.
template <class T>
struct ExpertBank {
  LoraConfig lora;
  std::vector<PersonaExpert<T>> experts;
  Tensor<T> embeddings;

  std::size_t embedding_width() const { return embeddings.cols(); }

  /// down = 0 and up ~ N(0, 0.02^2) so every delta starts at zero; the
  /// embeddings are unit vectors redrawn until all pairs satisfy |cos| < 0.8.
  static ExpertBank init(const TransformerConfig& cfg, const LoraConfig& lora, std::size_t embedding_width,
                         std::uint64_t seed) {
    cfg.validate();
    lora.validate();
    if (embedding_width == 0) throw ParameterError("expert embedding width must be positive");
    ExpertBank bank;
    bank.lora = lora;
    const std::size_t sites = cfg.layers * lm::kSitesPerLayer;
    for (std::size_t i = 0; i < kNumPoles; ++i) {
      Rng rng(derive_seed(seed, "expert-" + std::string(kPoleNames[i])));
      PersonaExpert<T> e;
      e.pole = pole_at(i);
      for (std::size_t s = 0; s < sites; ++s) {
        const auto shape = lm::site_shape(cfg, lm::site_of(s));
        std::vector<T> up(lora.rank * shape.out);
        for (auto& v : up) v = static_cast<T>(0.02 * rng.normal());
        e.adapters.push_back(LoraAdapter<T>::create(Tensor<T>::zeros({shape.in, lora.rank}),
                                                    Tensor<T>::from({lora.rank, shape.out}, std::move(up)),
                                                    static_cast<T>(lora.alpha)));
      }
      bank.experts.push_back(std::move(e));
    }
    bank.embeddings = Tensor<T>::from({kNumPoles, embedding_width},
                                      unit_embeddings(embedding_width, derive_seed(seed, "expert-embeddings")));
    return bank;
  }

  static std::vector<T> unit_embeddings(std::size_t width, std::uint64_t seed, double max_abs_cos = 0.8) {
    Rng rng(seed);
    std::vector<std::vector<double>> rows;
    while (rows.size() < kNumPoles) {
      std::vector<double> v(width);
      double n2 = 0;
      for (auto& x : v) {
        x = rng.normal();
        n2 += x * x;
      }
      if (n2 == 0.0) continue;
      for (auto& x : v) x /= std::sqrt(n2);
      bool ok = true;
      for (const auto& r : rows) {
        double c = 0;
        for (std::size_t k = 0; k < width; ++k) c += r[k] * v[k];
        ok = ok && std::abs(c) < max_abs_cos;
      }
      if (ok) rows.push_back(std::move(v));
    }
    std::vector<T> out;
    out.reserve(kNumPoles * width);
    for (const auto& r : rows)
      for (double x : r) out.push_back(static_cast<T>(x));
    return out;
  }

  /// Rescales every embedding row to unit norm in place.
  void renormalize_embeddings() {
    auto v = embeddings.mutable_value();
    const std::size_t w = embedding_width();
    for (std::size_t i = 0; i < kNumPoles; ++i) {
      T n2 = T(0);
      for (std::size_t k = 0; k < w; ++k) n2 += v[i * w + k] * v[i * w + k];
      if (!(n2 > T(0))) throw NumericError("expert embedding " + std::string(kPoleNames[i]) + " collapsed to zero");
      const T inv = T(1) / std::sqrt(n2);
      for (std::size_t k = 0; k < w; ++k) v[i * w + k] *= inv;
    }
  }

  template <class F>
  void for_each_parameter(const std::string& prefix, F&& f) {
    for (auto& e : experts) e.for_each_parameter(prefix + "expert." + kPoleNames[pole_index(e.pole)] + ".", f);
    f(prefix + "expert_embeddings", embeddings);
  }

  template <class F>
  void for_each_adapter_parameter(const std::string& prefix, F&& f) {
    for (auto& e : experts) e.for_each_parameter(prefix + "expert." + std::string(kPoleNames[pole_index(e.pole)]) + ".", f);
  }

  /// Hook that runs every adapted site as a mixture of the ten experts.
  LinearHook<T> mixture_hook(const Tensor<T>& mixture) const {
    require_simplex(mixture, experts.size());
    return [this, mixture](std::size_t site, const Tensor<T>& x, const Tensor<T>& weight) {
      std::array<const LoraAdapter<T>*, kNumPoles> at{};
      for (std::size_t i = 0; i < kNumPoles; ++i) at[i] = &experts[i].adapters.at(site);
      return moe_linear_forward<T>(x, weight, std::span<const LoraAdapter<T>* const>(at), mixture);
    };
  }
};

/// Base weights with expert i folded in: W + delta_i at every adapted site.
/// The returned model owns fresh storage; `base` is left untouched.
template <class T>
BaseModel<T> merge_expert(const BaseModel<T>& base, const PersonaExpert<T>& expert) {
  const std::size_t sites = base.stack.blocks.size() * lm::kSitesPerLayer;
  if (expert.adapters.size() != sites) {
    throw ShapeMismatchError("merge_expert: expert has " + std::to_string(expert.adapters.size()) +
                             " adapters, base has " + std::to_string(sites) + " sites");
  }
  ad::NoGradGuard no_grad;
  BaseModel<T> merged = base;
  merged.for_each_parameter("", [](const std::string&, Tensor<T>& t) { t = t.detach(); });
  for (std::size_t s = 0; s < sites; ++s) {
    const auto& w = base.site_weight(s);
    const auto& a = expert.adapters[s];
    if (a.in_features() != w.rows() || a.out_features() != w.cols()) {
      throw ShapeMismatchError("merge_expert: adapter at site " + std::to_string(s) + " does not fit " +
                               ad::shape_string(w.shape()));
    }
    merged.stack.blocks[s / lm::kSitesPerLayer].weights[s % lm::kSitesPerLayer] =
        ad::add(w, lora_delta(a)).detach();
  }
  return merged;
}

}  // namespace persona::moe
