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
#include <string_view>
#include <vector>

#include "persona/lm/transformer.hpp"

namespace persona::router {

using ad::Tensor;

/// Bidirectional transformer encoder; the persona embedding is the mean of
/// its final hidden states. All parameters are trainable.
template <class T>
struct PersonaEncoder {
  lm::TransformerStack<T> stack;

  static lm::TransformerConfig default_config(std::size_t width = 64) {
    lm::TransformerConfig cfg;
    cfg.width = width;
    cfg.layers = 2;
    cfg.heads = 4;
    return cfg;
  }

  static PersonaEncoder init(const lm::TransformerConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "persona-encoder"));
    PersonaEncoder e;
    e.stack = lm::TransformerStack<T>::init(cfg, rng);
    return e;
  }

  const lm::TransformerConfig& config() const { return stack.config; }
  std::size_t width() const { return stack.config.width; }

  template <class F>
  void for_each_parameter(const std::string& prefix, F&& f) {
    stack.for_each_parameter(prefix, f);
  }

  /// Embedding for already-tokenized input, [h_e].
  Tensor<T> encode(std::span<const lm::TokenId> tokens) const {
    if (tokens.empty()) throw InputError("encode_persona: empty query");
    return ad::mean_rows(stack.hidden(tokens, /*causal=*/false));
  }
};

/// Query text is framed as [BOS] bytes and truncated to the encoder context.
inline lm::TokenSequence encoder_tokens(std::string_view query, std::size_t max_context) {
  if (query.empty()) throw InputError("encode_persona: empty query");
  lm::TokenSequence ids{lm::kBos};
  for (auto id : lm::tokenize(query, max_context - 1).ids) ids.push_back(id);
  return ids;
}

template <class T>
Tensor<T> encode_persona(const PersonaEncoder<T>& encoder, std::string_view query) {
  return encoder.encode(encoder_tokens(query, encoder.config().max_context));
}

/// Stacked embeddings [B, h_e]; each row depends on its own query only.
template <class T>
Tensor<T> encode_batch(const PersonaEncoder<T>& encoder, const std::vector<std::string>& queries) {
  std::vector<Tensor<T>> rows;
  rows.reserve(queries.size());
  for (const auto& q : queries) rows.push_back(encode_persona(encoder, q));
  return ad::stack(rows);
}

}  // namespace persona::router
