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

#include "persona/lm/transformer.hpp"

namespace persona::lm {

struct DecodeParams {
  enum class Mode { Greedy, Sample };
  Mode mode = Mode::Greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::size_t max_new_tokens = 64;
  bool stop_at_eos = true;

  static DecodeParams greedy(std::size_t max_new) {
    DecodeParams p;
    p.max_new_tokens = max_new;
    return p;
  }
  static DecodeParams sample(double temperature, std::uint64_t seed, std::size_t max_new) {
    DecodeParams p;
    p.mode = Mode::Sample;
    p.temperature = temperature;
    p.seed = seed;
    p.max_new_tokens = max_new;
    return p;
  }
};

/// Autoregressive continuation of `prompt` (no KV cache: every step
/// re-runs the full prefix). Returns prompt followed by the new tokens.
template <class T>
TokenSequence generate(const BaseModel<T>& model, const TokenSequence& prompt, const DecodeParams& params,
                       const LinearHook<T>* hook = nullptr) {
  if (prompt.empty()) throw InputError("generate: empty prompt");
  const std::size_t limit = model.config().max_context;
  if (prompt.size() + params.max_new_tokens > limit) {
    throw ContextOverflowError("generate: prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                               std::to_string(params.max_new_tokens) + " new tokens exceeds T_max=" +
                               std::to_string(limit));
  }
  if (params.mode == DecodeParams::Mode::Sample && !(params.temperature > 0.0)) {
    throw ParameterError("generate: sampling temperature must be > 0");
  }
  ad::NoGradGuard no_grad;
  Rng rng(params.seed);
  TokenSequence seq = prompt;
  const std::size_t vocab = model.config().vocab;
  for (std::size_t step = 0; step < params.max_new_tokens; ++step) {
    auto h = model.hidden(seq, hook);
    auto logits = ad::matmul(ad::slice_rows(h, seq.size() - 1, 1), model.unembedding);
    auto row = logits.value();
    TokenId next = 0;
    if (params.mode == DecodeParams::Mode::Greedy) {
      for (std::size_t v = 1; v < vocab; ++v)
        if (row[v] > row[next]) next = static_cast<TokenId>(v);
    } else {
      double mx = row[0];
      for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, static_cast<double>(row[v]));
      std::vector<double> p(vocab);
      double z = 0;
      for (std::size_t v = 0; v < vocab; ++v) {
        p[v] = std::exp((static_cast<double>(row[v]) - mx) / params.temperature);
        z += p[v];
      }
      double u = rng.uniform() * z;
      next = static_cast<TokenId>(vocab - 1);
      for (std::size_t v = 0; v < vocab; ++v) {
        if (u < p[v]) {
          next = static_cast<TokenId>(v);
          break;
        }
        u -= p[v];
      }
    }
    seq.push_back(next);
    if (params.stop_at_eos && next == kEos) break;
  }
  return seq;
}

}  // namespace persona::lm
