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

// Pre-LayerNorm transformer stack used both as the frozen decoder (causal)
// and as the persona encoder (bidirectional). Every linear map inside the
// blocks goes through an optional hook so adapters can be injected.

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "persona/autodiff/functional.hpp"
#include "persona/lm/tokenizer.hpp"
#include "persona/rng.hpp"

namespace persona::lm {

using ad::Tensor;

struct TransformerConfig {
  std::size_t vocab = kByteVocabSize;
  std::size_t width = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t max_context = 256;
  std::size_t ffn_multiplier = 4;

  std::size_t head_width() const { return width / heads; }
  std::size_t ffn_width() const { return width * ffn_multiplier; }

  void validate() const {
    if (vocab == 0 || width == 0 || layers == 0 || heads == 0 || max_context == 0 || ffn_multiplier == 0) {
      throw ParameterError("transformer dimensions must be positive");
    }
    if (width % heads != 0) throw ParameterError("model width must be divisible by the head count");
  }

  bool operator==(const TransformerConfig&) const = default;
};

/// The adapted linear maps of one block, in storage order.
enum class Site : std::uint8_t { Query = 0, Key, Value, Output, FfnUp, FfnDown };
inline constexpr std::size_t kSitesPerLayer = 6;
inline constexpr std::array<const char*, kSitesPerLayer> kSiteNames = {"wq", "wk", "wv", "wo", "w_up", "w_down"};

struct SiteShape {
  std::size_t in;
  std::size_t out;
};

inline SiteShape site_shape(const TransformerConfig& cfg, Site site) {
  switch (site) {
    case Site::FfnUp:
      return {cfg.width, cfg.ffn_width()};
    case Site::FfnDown:
      return {cfg.ffn_width(), cfg.width};
    default:
      return {cfg.width, cfg.width};
  }
}

inline std::size_t site_index(std::size_t layer, Site site) {
  return layer * kSitesPerLayer + static_cast<std::size_t>(site);
}

inline Site site_of(std::size_t index) { return static_cast<Site>(index % kSitesPerLayer); }

template <class T>
struct Block {
  Tensor<T> ln1_gain, ln1_bias;
  std::array<Tensor<T>, kSitesPerLayer> weights;  // indexed by Site
  Tensor<T> ffn_up_bias, ffn_down_bias;
  Tensor<T> ln2_gain, ln2_bias;

  const Tensor<T>& weight(Site s) const { return weights[static_cast<std::size_t>(s)]; }
};

/// Called for each adapted site: returns x * W (+ whatever the hook adds).
template <class T>
using LinearHook = std::function<Tensor<T>(std::size_t site, const Tensor<T>& x, const Tensor<T>& weight)>;

template <class T>
struct TransformerStack {
  TransformerConfig config;
  Tensor<T> token_embedding;     // [vocab, width]
  Tensor<T> position_embedding;  // [max_context, width]
  std::vector<Block<T>> blocks;
  Tensor<T> final_gain, final_bias;

  static TransformerStack init(const TransformerConfig& cfg, Rng& rng, double init_std = 0.02) {
    cfg.validate();
    auto gaussian = [&](std::size_t r, std::size_t c) {
      std::vector<T> v(r * c);
      for (auto& x : v) x = static_cast<T>(init_std * rng.normal());
      return Tensor<T>::from({r, c}, std::move(v));
    };
    auto filled = [](std::size_t n, T value) { return Tensor<T>::from({n}, std::vector<T>(n, value)); };
    TransformerStack s;
    s.config = cfg;
    s.token_embedding = gaussian(cfg.vocab, cfg.width);
    s.position_embedding = gaussian(cfg.max_context, cfg.width);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      Block<T> b;
      b.ln1_gain = filled(cfg.width, T(1));
      b.ln1_bias = filled(cfg.width, T(0));
      for (std::size_t k = 0; k < kSitesPerLayer; ++k) {
        const auto shape = site_shape(cfg, static_cast<Site>(k));
        b.weights[k] = gaussian(shape.in, shape.out);
      }
      b.ffn_up_bias = filled(cfg.ffn_width(), T(0));
      b.ffn_down_bias = filled(cfg.width, T(0));
      b.ln2_gain = filled(cfg.width, T(1));
      b.ln2_bias = filled(cfg.width, T(0));
      s.blocks.push_back(std::move(b));
    }
    s.final_gain = filled(cfg.width, T(1));
    s.final_bias = filled(cfg.width, T(0));
    return s;
  }

  template <class F>
  void for_each_parameter(const std::string& prefix, F&& f) {
    f(prefix + "token_embedding", token_embedding);
    f(prefix + "position_embedding", position_embedding);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      auto& b = blocks[l];
      const std::string p = prefix + "layer" + std::to_string(l) + ".";
      f(p + "ln1_gain", b.ln1_gain);
      f(p + "ln1_bias", b.ln1_bias);
      for (std::size_t k = 0; k < kSitesPerLayer; ++k) f(p + kSiteNames[k], b.weights[k]);
      f(p + "ffn_up_bias", b.ffn_up_bias);
      f(p + "ffn_down_bias", b.ffn_down_bias);
      f(p + "ln2_gain", b.ln2_gain);
      f(p + "ln2_bias", b.ln2_bias);
    }
    f(prefix + "final_gain", final_gain);
    f(prefix + "final_bias", final_bias);
  }

  /// Final normalized hidden states [T, width].
  Tensor<T> hidden(std::span<const TokenId> tokens, bool causal, const LinearHook<T>* hook = nullptr) const {
    if (tokens.empty()) throw InputError("transformer: empty token sequence");
    if (tokens.size() > config.max_context) {
      throw ContextOverflowError("transformer: " + std::to_string(tokens.size()) + " tokens exceed T_max=" +
                                 std::to_string(config.max_context));
    }
    const std::size_t steps = tokens.size();
    auto linear = [&](std::size_t site, const Tensor<T>& x, const Tensor<T>& w) {
      return hook && *hook ? (*hook)(site, x, w) : ad::matmul(x, w);
    };
    Tensor<T> x = ad::add(ad::embedding(token_embedding, tokens), ad::slice_rows(position_embedding, 0, steps));
    const std::size_t dh = config.head_width();
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const auto& b = blocks[l];
      auto xn = ad::layer_norm(x, b.ln1_gain, b.ln1_bias);
      auto q = linear(site_index(l, Site::Query), xn, b.weight(Site::Query));
      auto k = linear(site_index(l, Site::Key), xn, b.weight(Site::Key));
      auto v = linear(site_index(l, Site::Value), xn, b.weight(Site::Value));
      std::vector<Tensor<T>> heads;
      heads.reserve(config.heads);
      for (std::size_t h = 0; h < config.heads; ++h) {
        auto qh = ad::slice_cols(q, h * dh, dh);
        auto kh = ad::slice_cols(k, h * dh, dh);
        auto vh = ad::slice_cols(v, h * dh, dh);
        auto att = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt), causal);
        heads.push_back(ad::matmul(att, vh));
      }
      auto attn = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
      x = ad::add(x, linear(site_index(l, Site::Output), attn, b.weight(Site::Output)));

      auto xn2 = ad::layer_norm(x, b.ln2_gain, b.ln2_bias);
      auto up = ad::gelu(ad::add_row(linear(site_index(l, Site::FfnUp), xn2, b.weight(Site::FfnUp)), b.ffn_up_bias));
      x = ad::add(x, ad::add_row(linear(site_index(l, Site::FfnDown), up, b.weight(Site::FfnDown)), b.ffn_down_bias));
    }
    return ad::layer_norm(x, final_gain, final_bias);
  }
};

/// The frozen decoder-only language model.
template <class T>
struct BaseModel {
  TransformerStack<T> stack;
  Tensor<T> unembedding;  // [width, vocab]

  static BaseModel init(const TransformerConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "base-model"));
    BaseModel m;
    m.stack = TransformerStack<T>::init(cfg, rng);
    // Unit-variance logits on normalized states, so a frozen head can still
    // express confident predictions once adapters steer the hidden state.
    const double head_std = 1.0 / std::sqrt(static_cast<double>(cfg.width));
    std::vector<T> w(cfg.width * cfg.vocab);
    for (auto& x : w) x = static_cast<T>(head_std * rng.normal());
    m.unembedding = Tensor<T>::from({cfg.width, cfg.vocab}, std::move(w));
    return m;
  }

  const TransformerConfig& config() const { return stack.config; }

  template <class F>
  void for_each_parameter(const std::string& prefix, F&& f) {
    stack.for_each_parameter(prefix, f);
    f(prefix + "unembedding", unembedding);
  }

  const Tensor<T>& site_weight(std::size_t site) const {
    return stack.blocks.at(site / kSitesPerLayer).weight(site_of(site));
  }

  Tensor<T> hidden(std::span<const TokenId> tokens, const LinearHook<T>* hook = nullptr) const {
    return stack.hidden(tokens, /*causal=*/true, hook);
  }

  /// One logit row per position under causal masking, [T, vocab].
  Tensor<T> forward(std::span<const TokenId> tokens, const LinearHook<T>* hook = nullptr) const {
    return ad::matmul(hidden(tokens, hook), unembedding);
  }

  /// Summed next-token cross-entropy of the response part of a training
  /// sequence: positions response_offset-1 .. T-2 predict tokens
  /// response_offset .. T-1.
  Tensor<T> response_loss(std::span<const TokenId> tokens, std::size_t response_offset,
                          const LinearHook<T>* hook = nullptr,
                          ad::Reduction reduction = ad::Reduction::Sum) const {
    if (response_offset == 0 || response_offset >= tokens.size()) {
      throw InputError("response_loss: response offset out of range");
    }
    auto h = hidden(tokens, hook);
    const std::size_t first = response_offset - 1;
    const std::size_t count = tokens.size() - response_offset;
    auto logits = ad::matmul(ad::slice_rows(h, first, count), unembedding);
    return ad::cross_entropy_lm(logits, tokens.subspan(response_offset), reduction);
  }
};

}  // namespace persona::lm
