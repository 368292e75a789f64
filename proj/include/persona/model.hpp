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

// The assembled model: frozen base decoder, ten persona experts, and the
// router (persona encoder plus expert embeddings).

#include <string>
#include <string_view>

#include "persona/lm/generate.hpp"
#include "persona/moe/experts.hpp"
#include "persona/router/encoder.hpp"
#include "persona/router/routing.hpp"

namespace persona {

using ad::Tensor;

struct ModelConfig {
  lm::TransformerConfig base;
  lm::TransformerConfig encoder = router::PersonaEncoder<float>::default_config();
  moe::LoraConfig lora;
  router::RouterConfig router;

  void validate() const {
    base.validate();
    encoder.validate();
    lora.validate();
    router.validate();
    if (2 * lora.rank > base.width) throw ParameterError("lora rank must be at most half the model width");
  }
};

/// Which parameter group a name belongs to (see PersonaModel::for_each_parameter).
enum class ParamGroup { Base, Adapter, Router };

inline ParamGroup param_group(std::string_view name) {
  if (name.starts_with("base.")) return ParamGroup::Base;
  if (name.starts_with("expert.")) return ParamGroup::Adapter;
  return ParamGroup::Router;
}

template <class T>
struct PersonaModel {
  ModelConfig config;
  lm::BaseModel<T> base;
  moe::ExpertBank<T> bank;
  router::PersonaEncoder<T> encoder;

  static PersonaModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    PersonaModel m;
    m.config = cfg;
    m.base = lm::BaseModel<T>::init(cfg.base, seed);
    m.bank = moe::ExpertBank<T>::init(cfg.base, cfg.lora, cfg.encoder.width, seed);
    m.encoder = router::PersonaEncoder<T>::init(cfg.encoder, seed);
    return m;
  }

  /// Names are prefixed "base.", "expert.<pole>." or "encoder." /
  /// "expert_embeddings"; the order is fixed.
  template <class F>
  void for_each_parameter(F&& f) {
    base.for_each_parameter("base.", f);
    bank.for_each_adapter_parameter("", f);
    f(std::string("expert_embeddings"), bank.embeddings);
    encoder.for_each_parameter("encoder.", f);
  }

  /// Deep copy with independent storage.
  PersonaModel clone() const {
    PersonaModel c = *this;
    c.for_each_parameter([](const std::string&, Tensor<T>& t) { t = t.detach(t.requires_grad()); });
    return c;
  }

  Tensor<T> embed_query(std::string_view query) const { return router::encode_persona(encoder, query); }

  /// Differentiable mixture weights for one query.
  Tensor<T> route_query(std::string_view query) const {
    return router::route(embed_query(query), bank.embeddings, static_cast<T>(config.router.tau));
  }

  moe::RouterOutput route_weights(std::string_view query) const {
    ad::NoGradGuard no_grad;
    return moe::RouterOutput::from_tensor(route_query(query));
  }

  /// Logits [T, V]; a null mixture runs the plain base model.
  Tensor<T> forward(std::span<const lm::TokenId> tokens, const Tensor<T>* mixture = nullptr) const {
    if (!mixture) return base.forward(tokens);
    auto hook = bank.mixture_hook(*mixture);
    return base.forward(tokens, &hook);
  }

  Tensor<T> response_loss(std::span<const lm::TokenId> tokens, std::size_t response_offset, const Tensor<T>& mixture,
                          ad::Reduction reduction = ad::Reduction::Sum) const {
    auto hook = bank.mixture_hook(mixture);
    return base.response_loss(tokens, response_offset, &hook, reduction);
  }

  lm::TokenSequence generate(const lm::TokenSequence& prompt, const moe::RouterOutput* mixture,
                             const lm::DecodeParams& params) const {
    if (!mixture) return lm::generate(base, prompt, params);
    auto hook = bank.mixture_hook(mixture->template to_tensor<T>());
    return lm::generate(base, prompt, params, &hook);
  }
};

}  // namespace persona
