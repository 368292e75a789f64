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

// Seeded micro-instances shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "persona/autodiff/gradcheck.hpp"
#include "persona/cot/dataset.hpp"
#include "persona/model.hpp"
#include "persona/training/trainer.hpp"

namespace persona::testing {

/// Normal values rounded through float, so every precision holds them exactly.
inline std::vector<double> normals(std::mt19937_64& rng, std::size_t n, double stddev = 1.0) {
  std::normal_distribution<double> nd(0.0, stddev);
  std::vector<double> v(n);
  for (auto& x : v) x = static_cast<double>(static_cast<float>(nd(rng)));
  return v;
}

template <class T>
ad::Tensor<T> tensor_of(const ad::Shape& shape, const std::vector<double>& v, bool requires_grad = true) {
  return ad::Tensor<T>::from(shape, std::vector<T>(v.begin(), v.end()), requires_grad);
}

/// Oracle copy of `v` holding exactly the values a Tensor<T> would store.
template <class T, class O>
ad::Tensor<O> oracle_of(const ad::Shape& shape, const std::vector<double>& v) {
  std::vector<O> out;
  out.reserve(v.size());
  for (double x : v) out.push_back(static_cast<O>(static_cast<T>(x)));
  return ad::Tensor<O>::from(shape, std::move(out), false);
}

/// A random valid trait vector with one to three poles, never both poles of
/// one trait.
inline TraitActivationVector random_p(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(1, 3), trait(0, 4), side(0, 1);
  const int k = count(rng);
  std::vector<int> traits{0, 1, 2, 3, 4};
  std::shuffle(traits.begin(), traits.end(), rng);
  std::vector<Pole> poles;
  for (int i = 0; i < k; ++i) poles.push_back(pole_at(static_cast<std::size_t>(2 * traits[i] + side(rng))));
  return TraitActivationVector::from_poles(poles);
}

// --- loss micro-instances ----------------------------------------------------

struct LmInstance {
  std::size_t steps = 0, vocab = 0;
  std::vector<double> logits;
  std::vector<std::uint32_t> targets;
};

inline LmInstance lm_instance(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LmInstance in;
  in.steps = 1 + rng() % 4;
  in.vocab = 3 + rng() % 6;
  in.logits = normals(rng, in.steps * in.vocab, 2.0);
  for (std::size_t t = 0; t < in.steps; ++t) in.targets.push_back(static_cast<std::uint32_t>(rng() % in.vocab));
  return in;
}

struct RouterInstance {
  std::size_t batch = 0, width = 0;
  std::vector<double> h, e;
  std::vector<TraitActivationVector> labels;
};

inline RouterInstance router_instance(std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  RouterInstance in;
  in.batch = 2 + rng() % 4;
  in.width = 4 + rng() % 13;
  in.h = normals(rng, in.batch * in.width);
  in.e = normals(rng, kNumPoles * in.width);
  for (std::size_t b = 0; b < in.batch; ++b) in.labels.push_back(random_p(rng));
  return in;
}

// --- micro models --------------------------------------------------------------

inline ModelConfig micro_model_config() {
  ModelConfig c;
  c.base.width = 8;
  c.base.layers = 1;
  c.base.heads = 2;
  c.base.max_context = 32;
  c.base.ffn_multiplier = 2;
  c.encoder = c.base;
  c.lora.rank = 2;
  c.lora.alpha = 4.0;
  return c;
}

/// Same architecture in precision O holding exactly the values of `src`.
template <class O, class T>
PersonaModel<O> cast_model(PersonaModel<T>& src) {
  auto dst = PersonaModel<O>::init(src.config, 0);
  std::vector<ad::Tensor<T>> from;
  src.for_each_parameter([&](const std::string&, ad::Tensor<T>& t) { from.push_back(t); });
  std::size_t k = 0;
  dst.for_each_parameter([&](const std::string&, ad::Tensor<O>& t) {
    const auto v = from.at(k++).value();
    t = ad::Tensor<O>::from(t.shape(), std::vector<O>(v.begin(), v.end()), false);
  });
  return dst;
}

/// Overwrites every adapter and router parameter with float-representable
/// normals so that no gradient path is trivially zero.
template <class T>
void randomize_trainable(PersonaModel<T>& model, std::uint64_t seed, double stddev = 0.3) {
  std::mt19937_64 rng(seed);
  model.for_each_parameter([&](const std::string& name, ad::Tensor<T>& t) {
    if (param_group(name) == ParamGroup::Base) return;
    const auto v = normals(rng, t.numel(), stddev);
    t = tensor_of<T>(t.shape(), v, false);
  });
}

/// A tiny same-p batch of hermetic-style records.
inline std::vector<cot::PersonaCoTRecord> micro_batch(std::uint64_t seed, std::size_t size = 2) {
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  static const std::vector<std::string> words = {"heart", "earth", "melon", "lemon", "calm", "wow", "plan"};
  static const std::vector<std::string> replies = {"ok", "yes", "no", "hm"};
  const auto p = random_p(rng);
  std::vector<cot::PersonaCoTRecord> out;
  for (std::size_t i = 0; i < size; ++i) {
    cot::PersonaCoTRecord r;
    r.query = words[rng() % words.size()];
    r.response = replies[rng() % replies.size()];
    r.p = p;
    r.traits = p.poles();
    out.push_back(std::move(r));
  }
  return out;
}

template <class T>
std::vector<ad::Tensor<T>> trainable_parameters(PersonaModel<T>& model) {
  std::vector<ad::Tensor<T>> params;
  model.for_each_parameter([&](const std::string& name, ad::Tensor<T>& t) {
    if (param_group(name) != ParamGroup::Base) params.push_back(t);
  });
  return params;
}

// --- gradient checks against an extended-precision oracle ----------------------

using Oracle = long double;
inline constexpr Oracle kOracleEpsilon = 1e-6L;

template <class T>
ad::GradCheckReport check_cross_entropy(const LmInstance& in) {
  const ad::Shape shape{in.steps, in.vocab};
  auto x = tensor_of<T>(shape, in.logits);
  auto xo = oracle_of<T, Oracle>(shape, in.logits);
  std::span<const std::uint32_t> tg(in.targets);
  return ad::finite_difference_check_with_oracle<T, Oracle>(
      [&] { return ad::cross_entropy_lm(x, tg); }, {x}, [&] { return ad::cross_entropy_lm(xo, tg); }, {xo},
      kOracleEpsilon);
}

enum class RouterObjective { Contrastive, Trait, Router };

template <class T, class U>
ad::Tensor<U> router_objective(RouterObjective which, const ad::Tensor<U>& h, const ad::Tensor<U>& e,
                               const std::vector<TraitActivationVector>& labels) {
  const std::span<const TraitActivationVector> ls(labels);
  switch (which) {
    case RouterObjective::Contrastive: return router::contrastive_loss(h, e, ls, U(0.2));
    case RouterObjective::Trait: return router::trait_consistency_loss(h);
    case RouterObjective::Router:
    default:
      return router::router_loss(router::contrastive_loss(h, e, ls, U(0.2)), router::trait_consistency_loss(h), U(1.0));
  }
}

template <class T>
ad::GradCheckReport check_router_objective(RouterObjective which, const RouterInstance& in) {
  const ad::Shape hs{in.batch, in.width}, es{kNumPoles, in.width};
  auto h = tensor_of<T>(hs, in.h), e = tensor_of<T>(es, in.e);
  auto ho = oracle_of<T, Oracle>(hs, in.h), eo = oracle_of<T, Oracle>(es, in.e);
  return ad::finite_difference_check_with_oracle<T, Oracle>(
      [&] { return router_objective<T>(which, h, e, in.labels); }, {h, e},
      [&] { return router_objective<T>(which, ho, eo, in.labels); }, {ho, eo}, kOracleEpsilon);
}

/// L_joint on a micro model, checked on `tensors` trainable tensors drawn
/// per seed with `coords_per_param` coordinates each.
template <class T>
ad::GradCheckReport check_joint(std::uint64_t seed, std::size_t tensors = 12, std::size_t coords_per_param = 2) {
  auto model = PersonaModel<T>::init(micro_model_config(), seed);
  randomize_trainable(model, seed);
  auto oracle = cast_model<Oracle>(model);
  const auto batch = micro_batch(seed);
  std::vector<const cot::PersonaCoTRecord*> ptrs;
  for (const auto& r : batch) ptrs.push_back(&r);
  const auto all = trainable_parameters(model);
  const auto all_oracle = trainable_parameters(oracle);
  std::vector<std::size_t> pick(all.size());
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ 0xa5a5a5a5ULL);
  std::shuffle(pick.begin(), pick.end(), rng);
  pick.resize(std::min(tensors, pick.size()));
  std::sort(pick.begin(), pick.end());
  std::vector<ad::Tensor<T>> params;
  std::vector<ad::Tensor<Oracle>> oracle_params;
  for (auto i : pick) {
    params.push_back(all[i]);
    oracle_params.push_back(all_oracle[i]);
  }
  ad::GradCheckOptions opt;
  opt.max_coords_per_param = coords_per_param;
  opt.seed = seed;
  return ad::finite_difference_check_with_oracle<T, Oracle>(
      [&] { return training::joint_loss(model, ptrs, 0.2, ad::Reduction::Sum).total; }, params,
      [&] { return training::joint_loss(oracle, ptrs, 0.2, ad::Reduction::Sum).total; }, oracle_params,
      kOracleEpsilon, opt);
}

}  // namespace persona::testing
