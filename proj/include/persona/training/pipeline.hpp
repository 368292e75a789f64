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

// Runs the three training stages in order on one dataset and records what
// the acceptance checks need: digests between stages, held-out metrics,
// the per-step loss trace and wall-clock time.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>

#include "persona/eval/routing.hpp"
#include "persona/training/checkpoint.hpp"
#include "persona/training/trainer.hpp"

namespace persona::training {

struct StageResult {
  int stage = 0;
  double seconds = 0.0;
  Digests digests;
  std::optional<eval::RoutingEvalResult> heldout_routing;
  std::optional<double> heldout_routed_lm;
};

struct PipelineReport {
  Digests initial;
  std::vector<StageResult> stages;
  std::optional<Stage1Report> stage1;
  std::vector<StepMetrics> trace;
  std::size_t train_records = 0;
  std::size_t heldout_records = 0;
  double seconds = 0.0;

  const StageResult* stage(int s) const {
    for (const auto& r : stages)
      if (r.stage == s) return &r;
    return nullptr;
  }

  Json to_json() const {
    auto dj = [](const Digests& d) { return Json{{"base", d.base}, {"adapters", d.adapters}, {"router", d.router}}; };
    Json j{{"train_records", train_records}, {"heldout_records", heldout_records}, {"seconds", seconds},
           {"initial_digests", dj(initial)}};
    j["stages"] = Json::array();
    for (const auto& s : stages) {
      Json row{{"stage", s.stage}, {"seconds", s.seconds}, {"digests", dj(s.digests)}};
      if (s.heldout_routing) row["heldout_routing"] = s.heldout_routing->to_json();
      if (s.heldout_routed_lm) row["heldout_routed_lm_loss"] = *s.heldout_routed_lm;
      if (s.stage == 1 && stage1) {
        row["experts"] = Json::array();
        for (std::size_t k = 0; k < kNumPoles; ++k) {
          const auto& e = stage1->experts[k];
          row["experts"].push_back(Json{{"pole", kPoleNames[k]},
                                        {"train_records", e.train_records},
                                        {"heldout_records", e.heldout_records},
                                        {"heldout_before", e.heldout_before},
                                        {"heldout_after", e.heldout_after},
                                        {"relative_drop", e.relative_drop()}});
        }
      }
      j["stages"].push_back(row);
    }
    return j;
  }
};

struct PipelineOptions {
  /// When set, each stage is checkpointed to <out>/stage<N> and metrics
  /// stream to <out>/metrics.jsonl.
  std::optional<std::filesystem::path> out;
  std::ostream* log = nullptr;
  bool evaluate = true;
};

/// Runs `stages` (a subset of {1, 2, 3}, ascending) on `model`.
inline PipelineReport run_pipeline(Model& model, const std::vector<PersonaCoTRecord>& data, const TrainingConfig& cfg,
                                   const std::vector<int>& stages, const PipelineOptions& opt = {}) {
  cfg.validate();
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const auto split = split_holdout(data, cfg.heldout_fraction, cfg.seed);
  PipelineReport report;
  report.train_records = split.train.size();
  report.heldout_records = split.heldout.size();
  report.initial = digests(model);

  std::ofstream metrics;
  if (opt.out) {
    std::filesystem::create_directories(*opt.out);
    metrics.open(*opt.out / "metrics.jsonl", std::ios::app);
    save_config(cfg, *opt.out / "config.json");
  }
  MetricsCallback on_step = [&](const StepMetrics& m) {
    report.trace.push_back(m);
    if (metrics.is_open()) metrics << m.to_json().dump() << "\n";
  };

  for (int s : stages) {
    const auto ts = clock::now();
    if (opt.log) *opt.log << "stage " << s << ": " << split.train.size() << " train / " << split.heldout.size()
                          << " held-out records\n";
    switch (s) {
      case 1: report.stage1 = stage1_all(model, split.train, split.heldout, cfg, on_step); break;
      case 2: stage2_router_train(model, split.train, cfg, on_step); break;
      case 3: stage3_joint_train(model, split.train, cfg, on_step); break;
      default: throw UsageError("unknown stage " + std::to_string(s));
    }
    StageResult r;
    r.stage = s;
    r.digests = digests(model);
    if (opt.evaluate && s >= 2 && !split.heldout.empty()) {
      r.heldout_routing = eval::eval_routing(model, split.heldout);
      r.heldout_routed_lm = routed_lm_loss(model, split.heldout, cfg.lm_reduction());
    }
    r.seconds = std::chrono::duration<double>(clock::now() - ts).count();
    if (opt.log) {
      *opt.log << "stage " << s << " done in " << r.seconds << " s";
      if (r.heldout_routing) *opt.log << ", held-out routing accuracy " << r.heldout_routing->accuracy;
      *opt.log << "\n";
    }
    if (opt.out) save_checkpoint(model, cfg, "stage" + std::to_string(s), report.trace.size(), *opt.out / ("stage" + std::to_string(s)));
    report.stages.push_back(std::move(r));
  }
  report.seconds = std::chrono::duration<double>(clock::now() - t0).count();
  if (opt.out) {
    std::ofstream(*opt.out / "report.json") << report.to_json().dump(2, ' ', false, nlohmann::ordered_json::error_handler_t::replace) << "\n";
  }
  return report;
}

}  // namespace persona::training
