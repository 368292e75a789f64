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

// The three training stages. Each stage marks exactly its own parameter
// group trainable; everything else is a constant leaf in the graph, so it
// receives no gradient and is never touched by the optimizer.
//
//   stage 1  expert i adapters, LM loss under the one-hot mixture on P_i
//   stage 2  encoder + expert embeddings, L_router on same-p batches
//   stage 3  adapters + encoder + embeddings, L_lm + gamma * L_router

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "persona/eval/routing.hpp"
#include "persona/training/checkpoint.hpp"
#include "persona/training/data.hpp"
#include "persona/training/optim.hpp"

namespace persona::training {

using Model = PersonaModel<float>;
using FTensor = ad::Tensor<float>;

struct StepMetrics {
  int stage = 0;
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> loss_lm;
  std::optional<double> loss_contrastive;
  std::optional<double> loss_trait;
  std::optional<double> loss_router;
  std::optional<double> routing_accuracy;
  std::optional<std::string> expert;

  Json to_json() const {
    Json j{{"stage", stage}, {"step", step}, {"loss", loss}};
    if (expert) j["expert"] = *expert;
    if (loss_lm) j["loss_lm"] = *loss_lm;
    if (loss_contrastive) j["loss_contrastive"] = *loss_contrastive;
    if (loss_trait) j["loss_trait"] = *loss_trait;
    if (loss_router) j["loss_router"] = *loss_router;
    if (routing_accuracy) j["routing_accuracy"] = *routing_accuracy;
    return j;
  }
};

using MetricsCallback = std::function<void(const StepMetrics&)>;

/// Marks the parameters selected by `pred` trainable, every other one
/// frozen, and returns the trainable ones in model order.
template <class Pred>
std::vector<FTensor> select_trainable(Model& model, Pred&& pred) {
  std::vector<FTensor> out;
  model.for_each_parameter([&](const std::string& name, FTensor& t) {
    const bool on = pred(name);
    t.set_requires_grad(on);
    t.zero_grad();
    if (on) out.push_back(t);
  });
  return out;
}

inline void freeze_all(Model& model) {
  select_trainable(model, [](const std::string&) { return false; });
}

/// Aborts on a non-finite loss or one beyond factor * the first step's loss.
class DivergenceGuard {
 public:
  DivergenceGuard(std::string stage, double factor) : stage_(std::move(stage)), factor_(factor) {}

  void check(std::size_t step, double loss) {
    if (!initial_) initial_ = loss;
    if (!std::isfinite(loss) || loss > factor_ * std::max(*initial_, 1e-12)) {
      std::ostringstream os;
      os << stage_ << " diverged at step " << step << ": loss " << loss << " vs initial " << *initial_
         << " (limit " << factor_ << "x)";
      throw DivergenceError(os.str());
    }
  }

 private:
  std::string stage_;
  double factor_;
  std::optional<double> initial_;
};

/// Mean over examples of the per-sequence LM loss under a fixed mixture.
inline FTensor batch_lm_loss(const Model& model, const std::vector<const Example*>& batch, const FTensor& mixture,
                             ad::Reduction reduction) {
  std::vector<FTensor> losses;
  losses.reserve(batch.size());
  for (const auto* ex : batch) losses.push_back(model.response_loss(ex->tokens, ex->response_offset, mixture, reduction));
  auto total = losses.size() == 1 ? losses.front() : ad::add_n(losses);
  return ad::scale(total, 1.0f / static_cast<float>(batch.size()));
}

inline double mean_lm_loss(const Model& model, const std::vector<Example>& examples, const FTensor& mixture,
                           ad::Reduction reduction) {
  ad::NoGradGuard no_grad;
  if (examples.empty()) return std::nan("");
  double total = 0.0;
  for (const auto& ex : examples)
    total += model.response_loss(ex.tokens, ex.response_offset, mixture, reduction).item();
  return total / static_cast<double>(examples.size());
}

/// Held-out LM loss where every record runs under its own routed mixture.
inline double routed_lm_loss(const Model& model, const std::vector<PersonaCoTRecord>& data,
                             ad::Reduction reduction) {
  ad::NoGradGuard no_grad;
  if (data.empty()) return std::nan("");
  double total = 0.0;
  for (const auto& r : data) {
    const auto ex = make_example(r, model.config.base.max_context);
    total += model.response_loss(ex.tokens, ex.response_offset, model.route_query(r.query), reduction).item();
  }
  return total / static_cast<double>(data.size());
}

inline FTensor one_hot_mixture(std::size_t pole) {
  std::vector<float> w(kNumPoles, 0.0f);
  w[pole] = 1.0f;
  return FTensor::vector(std::move(w));
}

// --- stage 1 ---------------------------------------------------------------

struct ExpertWarmup {
  double heldout_before = 0.0;
  double heldout_after = 0.0;
  std::size_t train_records = 0;
  std::size_t heldout_records = 0;

  double relative_drop() const { return (heldout_before - heldout_after) / heldout_before; }
};

/// Trains the adapters of expert `pole` alone with the LM objective on the
/// given partition. Held-out loss is measured before and after.
inline ExpertWarmup stage1_warmup(Model& model, std::size_t pole, const std::vector<Example>& train,
                                  const std::vector<Example>& heldout, const TrainingConfig& cfg,
                                  const MetricsCallback& on_step = {}) {
  if (train.empty()) throw InputError("stage 1: empty partition for " + std::string(kPoleNames[pole]));
  const std::string prefix = "expert." + std::string(kPoleNames[pole]) + ".";
  auto params = select_trainable(model, [&](const std::string& n) { return n.starts_with(prefix); });
  const auto mixture = one_hot_mixture(pole);
  const auto reduction = cfg.lm_reduction();
  const auto& probe = heldout.empty() ? train : heldout;

  ExpertWarmup out;
  out.train_records = train.size();
  out.heldout_records = heldout.size();
  out.heldout_before = mean_lm_loss(model, probe, mixture, reduction);

  Adam<float> opt(params, cfg.adam);
  DivergenceGuard guard("stage 1 (" + std::string(kPoleNames[pole]) + ")", cfg.divergence_factor);
  Rng rng(derive_seed(cfg.seed, "stage1-" + std::string(kPoleNames[pole])));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  std::size_t cursor = 0;
  auto next_batch = [&] {
    std::vector<const Example*> batch;
    for (std::size_t b = 0; b < std::min(cfg.stage1.batch, train.size()); ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      batch.push_back(&train[order[cursor++]]);
    }
    return batch;
  };

  for (std::size_t step = 0; step < cfg.stage1.steps; ++step) {
    opt.zero_grad();
    double step_loss = 0.0;
    for (std::size_t a = 0; a < cfg.stage1.grad_accum; ++a) {
      auto loss = batch_lm_loss(model, next_batch(), mixture, reduction);
      step_loss += loss.item() / static_cast<double>(cfg.stage1.grad_accum);
      ad::backward(ad::scale(loss, 1.0f / static_cast<float>(cfg.stage1.grad_accum)));
    }
    guard.check(step, step_loss);
    opt.step(cfg.stage1.lr);
    if (on_step) {
      StepMetrics m;
      m.stage = 1;
      m.step = step;
      m.loss = step_loss;
      m.loss_lm = step_loss;
      m.expert = std::string(kPoleNames[pole]);
      on_step(m);
    }
  }
  out.heldout_after = mean_lm_loss(model, probe, mixture, reduction);
  freeze_all(model);
  return out;
}

struct Stage1Report {
  std::array<ExpertWarmup, kNumPoles> experts{};
};

inline Stage1Report stage1_all(Model& model, const std::vector<PersonaCoTRecord>& train,
                               const std::vector<PersonaCoTRecord>& heldout, const TrainingConfig& cfg,
                               const MetricsCallback& on_step = {}) {
  const auto parts = partition_by_trait(train);
  const auto held_parts = partition_by_trait(heldout, /*allow_empty=*/true);
  const std::size_t ctx = model.config.base.max_context;
  Stage1Report report;
  for (std::size_t k = 0; k < kNumPoles; ++k) {
    std::vector<Example> tr, he;
    for (auto i : parts[k]) tr.push_back(make_example(train[i], ctx));
    for (auto i : held_parts[k]) he.push_back(make_example(heldout[i], ctx));
    report.experts[k] = stage1_warmup(model, k, tr, he, cfg, on_step);
  }
  return report;
}

// --- stages 2 and 3 --------------------------------------------------------

/// Cycles through same-p batches, rebuilding a fresh shuffle per epoch.
class BatchStream {
 public:
  BatchStream(const std::vector<PersonaCoTRecord>& data, std::size_t batch, std::uint64_t seed, std::string label)
      : data_(data), batch_(batch), seed_(seed), label_(std::move(label)) {}

  std::vector<std::size_t> next() {
    while (cursor_ == batches_.size()) {
      const std::size_t epoch = epoch_++;
      batches_ = make_same_p_batches(data_, batch_, derive_seed(seed_, label_ + "-epoch-" + std::to_string(epoch)),
                                     epoch == 0 ? &std::cerr : nullptr);
      cursor_ = 0;
      if (batches_.empty()) throw BatchConstructionError("no p-group has at least 2 records");
    }
    return batches_[cursor_++];
  }

 private:
  const std::vector<PersonaCoTRecord>& data_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::string label_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::vector<std::size_t>> batches_;
};

template <class T = float>
struct RouterTerms {
  ad::Tensor<T> contrastive, trait, total;
};

template <class T>
RouterTerms<T> router_terms(const PersonaModel<T>& model, const ad::Tensor<T>& batch_h,
                            const std::vector<TraitActivationVector>& labels) {
  const auto& rc = model.config.router;
  RouterTerms<T> t;
  t.contrastive = router::contrastive_loss(batch_h, model.bank.embeddings, std::span<const TraitActivationVector>(labels),
                                           static_cast<T>(rc.margin));
  t.trait = router::trait_consistency_loss(batch_h);
  t.total = router::router_loss(t.contrastive, t.trait, static_cast<T>(rc.beta));
  return t;
}

/// Batch routing accuracy from already computed embeddings.
inline double batch_routing_accuracy(const Model& model, const FTensor& batch_h,
                                     const std::vector<TraitActivationVector>& labels) {
  ad::NoGradGuard no_grad;
  std::size_t hits = 0;
  const std::size_t width = batch_h.cols();
  for (std::size_t b = 0; b < labels.size(); ++b) {
    auto h = FTensor::vector(std::vector<float>(batch_h.value().begin() + static_cast<std::ptrdiff_t>(b * width),
                                                batch_h.value().begin() + static_cast<std::ptrdiff_t>((b + 1) * width)));
    auto w = moe::RouterOutput::from_tensor(
        router::route(h, model.bank.embeddings, static_cast<float>(model.config.router.tau)));
    hits += eval::score_routing(w, labels[b]).hit ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

inline bool is_router_param(const std::string& n) { return param_group(n) == ParamGroup::Router; }

inline void stage2_router_train(Model& model, const std::vector<PersonaCoTRecord>& train, const TrainingConfig& cfg,
                                const MetricsCallback& on_step = {}) {
  auto params = select_trainable(model, is_router_param);
  Adam<float> opt(params, cfg.adam);
  DivergenceGuard guard("stage 2", cfg.divergence_factor);
  BatchStream stream(train, cfg.stage2.batch, cfg.seed, "stage2");
  const std::size_t accum = cfg.stage2.grad_accum;
  const float inv_accum = 1.0f / static_cast<float>(accum);
  for (std::size_t step = 0; step < cfg.stage2.steps; ++step) {
    opt.zero_grad();
    double loss = 0.0, contrastive = 0.0, trait = 0.0, acc = 0.0;
    for (std::size_t a = 0; a < accum; ++a) {
      const auto idx = stream.next();
      std::vector<std::string> queries;
      std::vector<TraitActivationVector> labels;
      for (auto i : idx) {
        queries.push_back(train[i].query);
        labels.push_back(train[i].p);
      }
      auto h = router::encode_batch(model.encoder, queries);
      auto terms = router_terms(model, h, labels);
      loss += terms.total.item() * inv_accum;
      contrastive += terms.contrastive.item() * inv_accum;
      trait += terms.trait.item() * inv_accum;
      acc += batch_routing_accuracy(model, h, labels) * inv_accum;
      ad::backward(accum == 1 ? terms.total : ad::scale(terms.total, inv_accum));
    }
    guard.check(step, loss);
    opt.step(cfg.stage2.lr);
    model.bank.renormalize_embeddings();
    if (on_step) {
      StepMetrics m;
      m.stage = 2;
      m.step = step;
      m.loss = loss;
      m.loss_contrastive = contrastive;
      m.loss_trait = trait;
      m.loss_router = loss;
      m.routing_accuracy = acc;
      on_step(m);
    }
  }
  freeze_all(model);
}

template <class T = float>
struct JointTerms {
  ad::Tensor<T> lm, router, total;
  RouterTerms<T> parts;
  ad::Tensor<T> batch_h;
  std::vector<TraitActivationVector> labels;
};

/// L_joint = mean_b L_lm(b | w_b) + gamma * L_router on one same-p batch,
/// where w_b is routed from the batch's own embeddings.
template <class T>
JointTerms<T> joint_loss(const PersonaModel<T>& model, const std::vector<const PersonaCoTRecord*>& batch, double gamma,
                         ad::Reduction reduction) {
  std::vector<ad::Tensor<T>> hs, lms;
  std::vector<TraitActivationVector> labels;
  const T tau = static_cast<T>(model.config.router.tau);
  for (const auto* r : batch) {
    auto h = model.embed_query(r->query);
    const auto ex = make_example(*r, model.config.base.max_context);
    auto w = router::route(h, model.bank.embeddings, tau);
    lms.push_back(model.response_loss(ex.tokens, ex.response_offset, w, reduction));
    hs.push_back(h);
    labels.push_back(r->p);
  }
  JointTerms<T> j;
  j.lm = ad::scale(lms.size() == 1 ? lms.front() : ad::add_n(lms), T(1) / static_cast<T>(batch.size()));
  j.batch_h = ad::stack(hs);
  j.parts = router_terms(model, j.batch_h, labels);
  j.labels = std::move(labels);
  j.router = j.parts.total;
  j.total = ad::add(j.lm, ad::scale(j.router, static_cast<T>(gamma)));
  return j;
}

inline void stage3_joint_train(Model& model, const std::vector<PersonaCoTRecord>& train, const TrainingConfig& cfg,
                               const MetricsCallback& on_step = {}) {
  auto params = select_trainable(model, [](const std::string& n) { return param_group(n) != ParamGroup::Base; });
  Adam<float> opt(params, cfg.adam);
  DivergenceGuard guard("stage 3", cfg.divergence_factor);
  BatchStream stream(train, cfg.stage3.batch, cfg.seed, "stage3");
  const std::size_t accum = cfg.stage3.grad_accum;
  const float inv_accum = 1.0f / static_cast<float>(accum);
  for (std::size_t step = 0; step < cfg.stage3.steps; ++step) {
    opt.zero_grad();
    double loss = 0.0, lm = 0.0, contrastive = 0.0, trait = 0.0, router_total = 0.0, acc = 0.0;
    for (std::size_t a = 0; a < accum; ++a) {
      std::vector<const PersonaCoTRecord*> batch;
      for (auto i : stream.next()) batch.push_back(&train[i]);
      auto terms = joint_loss(model, batch, cfg.gamma, cfg.lm_reduction());
      loss += terms.total.item() * inv_accum;
      lm += terms.lm.item() * inv_accum;
      contrastive += terms.parts.contrastive.item() * inv_accum;
      trait += terms.parts.trait.item() * inv_accum;
      router_total += terms.router.item() * inv_accum;
      acc += batch_routing_accuracy(model, terms.batch_h, terms.labels) * inv_accum;
      ad::backward(accum == 1 ? terms.total : ad::scale(terms.total, inv_accum));
    }
    guard.check(step, loss);
    opt.step(cfg.stage3.lr);
    model.bank.renormalize_embeddings();
    if (on_step) {
      StepMetrics m;
      m.stage = 3;
      m.step = step;
      m.loss = loss;
      m.loss_lm = lm;
      m.loss_contrastive = contrastive;
      m.loss_trait = trait;
      m.loss_router = router_total;
      m.routing_accuracy = acc;
      on_step(m);
    }
  }
  freeze_all(model);
}

}  // namespace persona::training
