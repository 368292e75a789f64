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

#include <filesystem>
#include <fstream>

#include "persona/cot/backend.hpp"
#include "persona/cot/scenarios.hpp"
#include "persona/training/checkpoint.hpp"
#include "persona/training/pipeline.hpp"
#include "support/fixtures.hpp"

namespace fs = std::filesystem;
namespace training = persona::training;
namespace cot = persona::cot;
using persona::TraitActivationVector;

namespace {

std::vector<cot::PersonaCoTRecord> corpus(std::size_t n, std::uint64_t seed = 1) {
  cot::DeterministicBackend b(seed);
  return cot::synthesize_dataset(b, cot::builtin_queries(n, seed), seed).records;
}

cot::PersonaCoTRecord record_with(const TraitActivationVector& p, std::string query = "q") {
  cot::PersonaCoTRecord r;
  r.query = std::move(query);
  r.response = "r";
  r.p = p;
  r.traits = p.poles();
  return r;
}

training::TrainingConfig tiny_config() {
  training::TrainingConfig c;
  c.model.base.width = 16;
  c.model.base.layers = 1;
  c.model.base.heads = 2;
  c.model.base.max_context = 96;
  c.model.base.ffn_multiplier = 2;
  c.model.encoder = c.model.base;
  c.model.lora.rank = 2;
  c.model.lora.alpha = 4.0;
  c.stage1 = {4, 1, 3, 1e-3};
  c.stage2 = {4, 3, 1e-3, 1};
  c.stage3 = {4, 3, 1e-4, 1};
  c.seed = 5;
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("persona-test-" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<std::vector<float>> values_of(training::Model& m) {
  std::vector<std::vector<float>> out;
  m.for_each_parameter([&](const std::string&, persona::ad::Tensor<float>& t) {
    out.emplace_back(t.value().begin(), t.value().end());
  });
  return out;
}

}  // namespace

// --- data -------------------------------------------------------------------------

TEST(Partition, CountsMatchPopcounts) {
  auto data = corpus(100);
  cot::DeterministicBackend b(1);
  const auto extra = cot::synthesize_dataset(b, {"Recently I had a shift at work canceled.",
                                                 "Tell me a story about a family at dinner."}, 1);
  data.insert(data.end(), extra.records.begin(), extra.records.end());
  const auto parts = training::partition_by_trait(data);
  std::size_t total = 0, popcounts = 0;
  for (const auto& p : parts) total += p.size();
  for (const auto& r : data) popcounts += r.p.popcount();
  EXPECT_EQ(total, popcounts);
  for (std::size_t k = 0; k < 10; ++k)
    for (auto i : parts[k]) EXPECT_TRUE(data[i].p[k]);
}

TEST(Partition, EmptyPoleIsNamed) {
  std::vector<cot::PersonaCoTRecord> data = {record_with(TraitActivationVector::one_hot(persona::Pole::HighOpenness))};
  try {
    training::partition_by_trait(data);
    FAIL();
  } catch (const persona::InputError& e) {
    EXPECT_NE(std::string(e.what()).find("low_openness"), std::string::npos);
  }
}

TEST(Batching, PureGroupsAndRemainder) {
  std::vector<cot::PersonaCoTRecord> data;
  for (int i = 0; i < 64; ++i) data.push_back(record_with(TraitActivationVector::one_hot(persona::pole_at(0))));
  for (int i = 0; i < 64; ++i) data.push_back(record_with(TraitActivationVector::one_hot(persona::pole_at(3))));
  auto two = training::make_same_p_batches(data, 64, 1);
  ASSERT_EQ(two.size(), 2u);
  for (const auto& b : two) {
    EXPECT_EQ(b.size(), 64u);
    for (auto i : b) EXPECT_EQ(data[i].p, data[b[0]].p);
  }

  std::vector<cot::PersonaCoTRecord> seventy(70, record_with(TraitActivationVector::one_hot(persona::pole_at(1))));
  auto rem = training::make_same_p_batches(seventy, 64, 1);
  std::vector<std::size_t> sizes;
  for (const auto& b : rem) sizes.push_back(b.size());
  std::sort(sizes.begin(), sizes.end());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{6, 64}));
}

TEST(Batching, SingletonGroupIsSkippedWithWarning) {
  std::vector<cot::PersonaCoTRecord> data(3, record_with(TraitActivationVector::one_hot(persona::pole_at(0))));
  data.push_back(record_with(TraitActivationVector::one_hot(persona::pole_at(5))));
  std::ostringstream warn;
  const auto batches = training::make_same_p_batches(data, 2, 0, &warn);
  std::size_t covered = 0;
  for (const auto& b : batches) covered += b.size();
  EXPECT_EQ(covered, 2u);  // 2 of 3 in one batch, the third and the singleton are skipped
  EXPECT_NE(warn.str().find("warning"), std::string::npos);
  EXPECT_THROW(training::make_same_p_batches(data, 1, 0), persona::BatchConstructionError);
}

TEST(Batching, SeedDeterministic) {
  const auto data = corpus(200);
  EXPECT_EQ(training::make_same_p_batches(data, 8, 3), training::make_same_p_batches(data, 8, 3));
  EXPECT_NE(training::make_same_p_batches(data, 8, 3), training::make_same_p_batches(data, 8, 4));
}

TEST(Holdout, StratifiedAndDeterministic) {
  const auto data = corpus(200);
  const auto a = training::split_holdout(data, 0.1, 2), b = training::split_holdout(data, 0.1, 2);
  EXPECT_EQ(a.heldout.size(), 20u);
  EXPECT_EQ(a.train.size() + a.heldout.size(), data.size());
  ASSERT_EQ(a.heldout.size(), b.heldout.size());
  for (std::size_t i = 0; i < a.heldout.size(); ++i) EXPECT_EQ(a.heldout[i].query, b.heldout[i].query);
  const auto parts = training::partition_by_trait(a.heldout);
  for (const auto& p : parts) EXPECT_EQ(p.size(), 2u);
}

// --- config ----------------------------------------------------------------------------

TEST(Config, JsonRoundtrip) {
  auto c = tiny_config();
  c.gamma = 0.35;
  c.lm_loss_reduction = "mean";
  const auto back = training::config_from_json(training::config_to_json(c));
  EXPECT_EQ(training::config_to_json(back).dump(), training::config_to_json(c).dump());
}

TEST(Config, DefaultsAndDeskFile) {
  training::TrainingConfig c;
  EXPECT_EQ(c.model.base.width, 64u);
  EXPECT_EQ(c.model.base.layers, 2u);
  EXPECT_EQ(c.model.base.vocab, 259u);
  EXPECT_EQ(c.model.lora.rank, 8u);
  EXPECT_EQ(c.model.lora.alpha, 16.0);
  EXPECT_EQ(c.gamma, 0.2);
  EXPECT_EQ(c.model.router.margin, 0.2);
  const auto desk = training::load_config(PERSONA_SOURCE_DIR "/configs/desk.json");
  EXPECT_EQ(desk.seed, 11u);
}

TEST(Config, Errors) {
  EXPECT_THROW(training::config_from_json({{"gamma", -1.0}}), persona::ParameterError);
  EXPECT_THROW(training::config_from_json({{"stage9", {}}}), persona::InputError);
  EXPECT_THROW(training::config_from_json({{"stage1", {{"lr", "fast"}}}}), persona::InputError);
  EXPECT_THROW(training::config_from_json({{"model", {{"lora", {{"rank", 0}}}}}}), persona::ParameterError);
}

// --- stages ------------------------------------------------------------------------------

TEST(Stages, ZeroStepsLeaveParametersUnchanged) {
  auto cfg = tiny_config();
  cfg.stage1.steps = cfg.stage2.steps = cfg.stage3.steps = 0;
  auto model = training::Model::init(cfg.model, cfg.seed);
  const auto before = values_of(model);
  training::run_pipeline(model, corpus(60), cfg, {1, 2, 3});
  EXPECT_EQ(values_of(model), before);
}

TEST(Stages, IsolationAndFrozenBase) {
  const auto cfg = tiny_config();
  auto model = training::Model::init(cfg.model, cfg.seed);
  const auto report = training::run_pipeline(model, corpus(80), cfg, {1, 2, 3});
  const auto& s1 = report.stage(1)->digests;
  const auto& s2 = report.stage(2)->digests;
  const auto& s3 = report.stage(3)->digests;
  EXPECT_EQ(s1.base, report.initial.base);
  EXPECT_EQ(s2.base, report.initial.base);
  EXPECT_EQ(s3.base, report.initial.base);
  EXPECT_NE(s1.adapters, report.initial.adapters);
  EXPECT_EQ(s1.router, report.initial.router);
  EXPECT_EQ(s2.adapters, s1.adapters);
  EXPECT_NE(s2.router, s1.router);
  EXPECT_NE(s3.adapters, s2.adapters);
  EXPECT_NE(s3.router, s2.router);
}

TEST(Stages, StageOneTouchesOnlyItsExpert) {
  const auto cfg = tiny_config();
  auto model = training::Model::init(cfg.model, cfg.seed);
  const auto data = corpus(40);
  std::vector<training::Example> ex;
  for (const auto& r : data)
    if (r.p[4]) ex.push_back(training::make_example(r, cfg.model.base.max_context));
  std::map<std::string, std::vector<float>> before;
  model.for_each_parameter([&](const std::string& n, persona::ad::Tensor<float>& t) {
    before[n] = {t.value().begin(), t.value().end()};
  });
  training::stage1_warmup(model, 4, ex, {}, cfg);
  model.for_each_parameter([&](const std::string& n, persona::ad::Tensor<float>& t) {
    const bool changed = before[n] != std::vector<float>(t.value().begin(), t.value().end());
    if (!n.starts_with("expert.high_extraversion.")) EXPECT_FALSE(changed) << n;
  });
}

TEST(Stages, JointLossDecomposesPerStep) {
  auto cfg = tiny_config();
  cfg.gamma = 0.3;
  auto model = training::Model::init(cfg.model, cfg.seed);
  const auto report = training::run_pipeline(model, corpus(60), cfg, {2, 3});
  std::size_t checked = 0;
  for (const auto& m : report.trace) {
    if (m.stage != 3) continue;
    EXPECT_NEAR(m.loss, *m.loss_lm + 0.3 * *m.loss_router, 1e-6 * std::max(1.0, m.loss));
    EXPECT_NEAR(*m.loss_router, *m.loss_contrastive + cfg.model.router.beta * *m.loss_trait, 1e-6);
    ++checked;
  }
  EXPECT_EQ(checked, 3u);
}

TEST(Stages, GammaZeroLeavesOnlyLanguageModelling) {
  const auto cfg = tiny_config();
  auto model = training::Model::init(cfg.model, cfg.seed);
  persona::testing::randomize_trainable(model, 3);
  const auto data = corpus(20);
  std::vector<const cot::PersonaCoTRecord*> batch = {&data[0], &data[10]};
  const auto j0 = training::joint_loss(model, batch, 0.0, persona::ad::Reduction::Sum);
  EXPECT_EQ(j0.total.item(), j0.lm.item());
  const auto j1 = training::joint_loss(model, batch, 1.0, persona::ad::Reduction::Sum);
  EXPECT_NEAR(j1.total.item(), j1.lm.item() + j1.router.item(), 1e-4);
}

TEST(Stages, IdenticalSeedsGiveIdenticalTraces) {
  const auto cfg = tiny_config();
  const auto data = corpus(60);
  auto run = [&] {
    auto model = training::Model::init(cfg.model, cfg.seed);
    std::vector<std::string> trace;
    for (const auto& m : training::run_pipeline(model, data, cfg, {1, 2, 3}).trace) trace.push_back(m.to_json().dump());
    return trace;
  };
  const auto a = run();
  EXPECT_EQ(a.size(), 10u * 3 + 3 + 3);
  EXPECT_EQ(a, run());
}

TEST(Stages, DivergenceAborts) {
  training::DivergenceGuard g("stage x", 10.0);
  g.check(0, 1.0);
  EXPECT_NO_THROW(g.check(1, 9.0));
  EXPECT_THROW(g.check(2, 11.0), persona::DivergenceError);
  training::DivergenceGuard h("stage y", 10.0);
  EXPECT_THROW(h.check(0, std::nan("")), persona::DivergenceError);
}

// --- checkpoints ----------------------------------------------------------------------------

TEST(Checkpoint, RoundtripIsForwardBitwise) {
  TempDir dir("roundtrip");
  const auto cfg = tiny_config();
  auto model = training::Model::init(cfg.model, cfg.seed);
  persona::testing::randomize_trainable(model, 4);
  training::save_checkpoint(model, cfg, "stage3", 17, dir.path / "ckpt");
  auto [loaded, info] = training::load_checkpoint(dir.path / "ckpt");
  EXPECT_EQ(info.stage, "stage3");
  EXPECT_EQ(info.step, 17u);
  EXPECT_EQ(values_of(loaded), values_of(model));
  const auto tokens = persona::lm::prompt_tokens("master plan");
  const auto w = model.route_query("master plan");
  const auto wl = loaded.route_query("master plan");
  const auto a = model.forward(tokens, &w), b = loaded.forward(tokens, &wl);
  EXPECT_TRUE(std::equal(a.value().begin(), a.value().end(), b.value().begin()));
}

TEST(Checkpoint, CorruptionIsRefusedWithoutPartialLoad) {
  TempDir dir("corrupt");
  const auto cfg = tiny_config();
  auto model = training::Model::init(cfg.model, cfg.seed);
  persona::testing::randomize_trainable(model, 5);
  training::save_checkpoint(model, cfg, "stage1", 1, dir.path / "ckpt");

  // Truncate the last adapter blob.
  fs::path victim;
  for (const auto& e : fs::directory_iterator(dir.path / "ckpt"))
    if (e.path().filename().string().starts_with("expert.low_neuroticism")) victim = e.path();
  ASSERT_FALSE(victim.empty());
  fs::resize_file(victim, fs::file_size(victim) / 2);
  auto target = training::Model::init(cfg.model, cfg.seed);
  const auto before = values_of(target);
  EXPECT_THROW(training::load_checkpoint_into(dir.path / "ckpt", target), persona::CorruptionError);
  EXPECT_EQ(values_of(target), before);

  training::save_checkpoint(model, cfg, "stage1", 1, dir.path / "ckpt2");
  {
    std::ofstream os(dir.path / "ckpt2" / "manifest.json", std::ios::app);
    os << " ";
  }
  EXPECT_NO_THROW(training::read_manifest(dir.path / "ckpt2"));  // whitespace is not content
  auto manifest = training::read_manifest(dir.path / "ckpt2");
  manifest["step"] = 2;
  std::ofstream(dir.path / "ckpt2" / "manifest.json") << manifest.dump(2);
  EXPECT_THROW(training::read_manifest(dir.path / "ckpt2"), persona::CorruptionError);
}

TEST(Checkpoint, CrossConfigIsRefused) {
  TempDir dir("cross");
  auto cfg = tiny_config();
  auto model = training::Model::init(cfg.model, cfg.seed);
  training::save_checkpoint(model, cfg, "stage1", 0, dir.path / "ckpt");
  auto other = cfg;
  other.model.lora.rank = 4;
  auto target = training::Model::init(other.model, other.seed);
  try {
    training::load_checkpoint_into(dir.path / "ckpt", target);
    FAIL();
  } catch (const persona::ShapeMismatchError& e) {
    EXPECT_NE(std::string(e.what()).find("shape"), std::string::npos);
  }
}

TEST(Checkpoint, VersionMismatchIsReported) {
  TempDir dir("version");
  const auto cfg = tiny_config();
  auto model = training::Model::init(cfg.model, cfg.seed);
  training::save_checkpoint(model, cfg, "stage1", 0, dir.path / "ckpt");
  auto manifest = training::read_manifest(dir.path / "ckpt");
  manifest["format_version"] = 99;
  std::ofstream(dir.path / "ckpt" / "manifest.json") << manifest.dump(2);
  EXPECT_THROW(training::read_manifest(dir.path / "ckpt"), persona::VersionMismatchError);
}
