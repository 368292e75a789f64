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

#include <gtest/gtest.h>

#include "persona/model.hpp"
#include "support/fixtures.hpp"

namespace ad = persona::ad;
namespace moe = persona::moe;
using persona::testing::normals;
using DTensor = ad::Tensor<double>;

namespace {

double max_abs_diff(const DTensor& a, const DTensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.value()[i] - b.value()[i]));
  return m;
}

moe::LoraAdapter<double> random_adapter(std::mt19937_64& rng, std::size_t in, std::size_t out, std::size_t r) {
  return moe::LoraAdapter<double>::create(DTensor::from({in, r}, normals(rng, in * r, 0.5)),
                                          DTensor::from({r, out}, normals(rng, r * out, 0.5)), 16.0);
}

}  // namespace

TEST(LoraDelta, ZeroFactorGivesZero) {
  auto a = moe::LoraAdapter<double>::create(DTensor::zeros({4, 2}), DTensor::from({2, 4}, std::vector<double>(8, 1.0)),
                                            16.0);
  const auto delta = moe::lora_delta(a);
  for (double v : delta.value()) EXPECT_EQ(v, 0.0);
}

TEST(LoraDelta, ScalingIsAlphaOverRank) {
  persona::moe::LoraConfig c;
  EXPECT_EQ(c.rank, 8u);
  EXPECT_EQ(c.alpha, 16.0);
  EXPECT_DOUBLE_EQ(c.scaling(), 2.0);
  std::mt19937_64 rng(1);
  const auto a = random_adapter(rng, 16, 16, 8);
  const auto delta = moe::lora_delta(a), product = ad::matmul(a.down, a.up);
  for (std::size_t i = 0; i < delta.numel(); ++i) EXPECT_NEAR(delta.value()[i], 2.0 * product.value()[i], 1e-12);
}

TEST(LoraDelta, RankOneOuterProduct) {
  const double alpha = 3.0;
  auto a = moe::LoraAdapter<double>::create(DTensor::from({2, 1}, {1, 0}), DTensor::from({1, 2}, {0, 3}), alpha);
  const auto d = moe::lora_delta(a);
  EXPECT_EQ(std::vector<double>(d.value().begin(), d.value().end()), (std::vector<double>{0, 3 * alpha, 0, 0}));
}

TEST(LoraDelta, ConstructionErrors) {
  EXPECT_THROW(moe::LoraAdapter<double>::create(DTensor::zeros({4, 2}), DTensor::zeros({3, 4}), 1.0),
               persona::ShapeMismatchError);
  EXPECT_THROW(moe::LoraAdapter<double>::create(DTensor::zeros({4, 3}), DTensor::zeros({3, 4}), 1.0),
               persona::ShapeMismatchError);
  EXPECT_THROW(moe::LoraAdapter<double>::create(DTensor::zeros({4, 2}), DTensor::zeros({2, 4}), 0.0),
               persona::ParameterError);
}

TEST(MoeLinear, OneHotEqualsMergedMatrix) {
  std::mt19937_64 rng(2);
  const std::size_t in = 8, out = 6;
  auto w = DTensor::from({in, out}, normals(rng, in * out));
  std::vector<moe::LoraAdapter<double>> adapters;
  for (int i = 0; i < 10; ++i) adapters.push_back(random_adapter(rng, in, out, 2));
  std::vector<const moe::LoraAdapter<double>*> ptrs;
  for (auto& a : adapters) ptrs.push_back(&a);
  auto x = DTensor::from({3, in}, normals(rng, 3 * in));
  for (std::size_t i = 0; i < 10; ++i) {
    auto y = moe::moe_linear_forward<double>(x, w, ptrs, moe::RouterOutput::one_hot(persona::pole_at(i)).to_tensor<double>());
    auto merged = ad::matmul(x, ad::add(w, moe::lora_delta(adapters[i])));
    EXPECT_LT(max_abs_diff(y, merged), 1e-6);
  }
}

TEST(MoeLinear, IdenticalExpertsAreConvex) {
  std::mt19937_64 rng(3);
  const std::size_t in = 8, out = 8;
  auto w = DTensor::from({in, out}, normals(rng, in * out));
  auto shared = random_adapter(rng, in, out, 2);
  std::vector<moe::LoraAdapter<double>> adapters(10, shared);
  for (int i = 2; i < 10; ++i) adapters[i] = random_adapter(rng, in, out, 2);
  std::vector<const moe::LoraAdapter<double>*> ptrs;
  for (auto& a : adapters) ptrs.push_back(&a);
  auto x = DTensor::from({2, in}, normals(rng, 2 * in));
  moe::RouterOutput half;
  half.weights[0] = half.weights[1] = 0.5;
  auto y = moe::moe_linear_forward<double>(x, w, ptrs, half.to_tensor<double>());
  auto y0 = moe::moe_linear_forward<double>(x, w, ptrs, moe::RouterOutput::one_hot(persona::pole_at(0)).to_tensor<double>());
  auto y1 = moe::moe_linear_forward<double>(x, w, ptrs, moe::RouterOutput::one_hot(persona::pole_at(1)).to_tensor<double>());
  EXPECT_LT(max_abs_diff(y, y0), 1e-6);
  EXPECT_LT(max_abs_diff(y, y1), 1e-6);
}

TEST(MoeLinear, RandomMixtureMatchesDenseMerge) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t in = 12, out = 10;
    auto w = DTensor::from({in, out}, normals(rng, in * out));
    std::vector<moe::LoraAdapter<double>> adapters;
    for (int i = 0; i < 10; ++i) adapters.push_back(random_adapter(rng, in, out, 3));
    std::vector<const moe::LoraAdapter<double>*> ptrs;
    for (auto& a : adapters) ptrs.push_back(&a);
    moe::RouterOutput mix;
    std::uniform_real_distribution<double> u(0.1, 1.0);
    const std::size_t picks[3] = {seed % 10, (seed + 3) % 10, (seed + 7) % 10};
    double total = 0;
    for (auto i : picks) total += (mix.weights[i] = u(rng));
    for (auto i : picks) mix.weights[i] /= total;
    auto x = DTensor::from({4, in}, normals(rng, 4 * in));
    auto dense = w;
    for (auto i : picks) dense = ad::add(dense, ad::scale(moe::lora_delta(adapters[i]), mix.weights[i]));
    EXPECT_LT(max_abs_diff(moe::moe_linear_forward<double>(x, w, ptrs, mix.to_tensor<double>()), ad::matmul(x, dense)),
              1e-5);
  }
}

TEST(MoeLinear, RejectsNonSimplexMixture) {
  std::mt19937_64 rng(4);
  auto w = DTensor::zeros({4, 4});
  auto a = random_adapter(rng, 4, 4, 2);
  std::vector<const moe::LoraAdapter<double>*> ptrs(10, &a);
  auto x = DTensor::zeros({1, 4});
  EXPECT_THROW(moe::moe_linear_forward<double>(x, w, ptrs, DTensor::vector(std::vector<double>(10, 0.2))),
               persona::InputError);
  EXPECT_THROW(moe::moe_linear_forward<double>(x, w, ptrs, DTensor::vector({1.0})), persona::InputError);
}

TEST(Experts, FreshInitProperties) {
  const auto cfg = persona::testing::micro_model_config();
  auto bank = moe::ExpertBank<float>::init(cfg.base, cfg.lora, 16, 5);
  ASSERT_EQ(bank.experts.size(), 10u);
  for (const auto& e : bank.experts) {
    ASSERT_EQ(e.adapters.size(), cfg.base.layers * persona::lm::kSitesPerLayer);
    for (const auto& a : e.adapters) {
      const auto delta = moe::lora_delta(a);
      for (float v : delta.value()) EXPECT_EQ(v, 0.0f);
    }
  }
  const auto& emb = bank.embeddings.value();
  for (std::size_t i = 0; i < 10; ++i) {
    double n = 0;
    for (std::size_t k = 0; k < 16; ++k) n += emb[i * 16 + k] * emb[i * 16 + k];
    EXPECT_NEAR(n, 1.0, 1e-5);
    for (std::size_t j = i + 1; j < 10; ++j) {
      double c = 0;
      for (std::size_t k = 0; k < 16; ++k) c += emb[i * 16 + k] * emb[j * 16 + k];
      EXPECT_LT(std::abs(c), 0.8);
    }
  }
}

TEST(Experts, SameSeedIsBitwiseIdentical) {
  const auto cfg = persona::testing::micro_model_config();
  auto a = persona::PersonaModel<float>::init(cfg, 6), b = persona::PersonaModel<float>::init(cfg, 6);
  std::vector<std::vector<float>> va, vb;
  a.for_each_parameter([&](const std::string&, ad::Tensor<float>& t) { va.emplace_back(t.value().begin(), t.value().end()); });
  b.for_each_parameter([&](const std::string&, ad::Tensor<float>& t) { vb.emplace_back(t.value().begin(), t.value().end()); });
  EXPECT_EQ(va, vb);
}

TEST(Experts, ZeroInitIsTransparent) {
  auto m = persona::PersonaModel<float>::init(persona::testing::micro_model_config(), 7);
  const auto tokens = persona::lm::prompt_tokens("calm down");
  const auto base = m.forward(tokens);
  for (auto mix : {moe::RouterOutput::uniform(), moe::RouterOutput::one_hot(persona::Pole::LowNeuroticism)}) {
    const auto w = mix.to_tensor<float>();
    const auto routed = m.forward(tokens, &w);
    for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(routed.value()[i], base.value()[i], 1e-6);
  }
}

TEST(Merge, ZeroAdapterLeavesBaseExact) {
  auto m = persona::PersonaModel<float>::init(persona::testing::micro_model_config(), 8);
  auto merged = moe::merge_expert(m.base, m.bank.experts[3]);
  std::vector<std::vector<float>> a, b;
  m.base.for_each_parameter("", [&](const std::string&, ad::Tensor<float>& t) { a.emplace_back(t.value().begin(), t.value().end()); });
  merged.for_each_parameter("", [&](const std::string&, ad::Tensor<float>& t) { b.emplace_back(t.value().begin(), t.value().end()); });
  EXPECT_EQ(a, b);
}

TEST(Merge, MergedForwardEqualsOneHotMixture) {
  auto m = persona::PersonaModel<double>::init(persona::testing::micro_model_config(), 9);
  persona::testing::randomize_trainable(m, 9);
  const auto tokens = persona::lm::prompt_tokens("what a plan");
  for (std::size_t i = 0; i < 10; ++i) {
    const auto w = moe::RouterOutput::one_hot(persona::pole_at(i)).to_tensor<double>();
    auto merged = moe::merge_expert(m.base, m.bank.experts[i]);
    EXPECT_LT(max_abs_diff(merged.forward(tokens), m.forward(tokens, &w)), 1e-6);
  }
}

TEST(Merge, LeavesBaseUntouched) {
  auto m = persona::PersonaModel<float>::init(persona::testing::micro_model_config(), 10);
  persona::testing::randomize_trainable(m, 10);
  const std::vector<float> before(m.base.site_weight(0).value().begin(), m.base.site_weight(0).value().end());
  auto merged = moe::merge_expert(m.base, m.bank.experts[0]);
  EXPECT_EQ(before, std::vector<float>(m.base.site_weight(0).value().begin(), m.base.site_weight(0).value().end()));
  EXPECT_NE(before, std::vector<float>(merged.site_weight(0).value().begin(), merged.site_weight(0).value().end()));
}

TEST(RouterOutputTest, TopKAndArgmax) {
  moe::RouterOutput r;
  r.weights = {0.05, 0.3, 0.05, 0.2, 0.05, 0.05, 0.2, 0.05, 0.025, 0.025};
  EXPECT_EQ(r.argmax(), 1u);
  EXPECT_EQ(r.top_k(3), (std::vector<std::size_t>{1, 3, 6}));
  EXPECT_NEAR(r.sum(), 1.0, 1e-12);
}
