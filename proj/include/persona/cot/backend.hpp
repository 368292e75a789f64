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

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "persona/cot/scenarios.hpp"

namespace persona::cot {

struct SituationCues {
  std::string social;
  std::string task;
};

/// Raw trait mentions as the backend produced them, before canonicalization.
struct TraitMentions {
  std::vector<std::string> social;
  std::vector<std::string> task;
  std::string reasoning;
};

struct GeneratedResponse {
  std::string response;
  std::string rationale;
};

/// One synthesis step per method. Implementations throw ParseError on
/// malformed model output and TransportError on I/O failure.
class GeneratorBackend {
 public:
  virtual ~GeneratorBackend() = default;
  virtual std::string kind() const = 0;
  virtual SituationCues cues(std::string_view query) = 0;
  virtual TraitMentions traits(std::string_view query, const SituationCues& cues) = 0;
  virtual GeneratedResponse respond(std::string_view query, const SituationCues& cues,
                                    const std::vector<Pole>& social_traits, const std::vector<Pole>& task_traits) = 0;
};

/// Rule-based backend: every step is a lookup keyed by the query's scenario
/// class, and the output is a pure function of (seed, query).
class DeterministicBackend final : public GeneratorBackend {
 public:
  explicit DeterministicBackend(std::uint64_t seed = 0) : seed_(seed) {}

  std::string kind() const override { return "synthetic"; }

  SituationCues cues(std::string_view query) override {
    const auto& cls = lookup(query);
    return {std::string(cls.social_cue), std::string(cls.task_cue)};
  }

  /// Traits come from the tag embedded in the task cue. The first active pole
  /// is attributed to the social cue, the rest to the task cue.
  TraitMentions traits(std::string_view, const SituationCues& cues) override {
    const ScenarioClass* cls = nullptr;
    for (const auto& c : scenario_catalog()) {
      if (cues.task.starts_with("[" + std::string(c.name) + "]")) cls = &c;
    }
    if (!cls) throw ParseError("deterministic backend: task cue carries no class tag", cues.task);
    TraitMentions m;
    for (std::size_t k = 0; k < cls->poles.size(); ++k) {
      (k == 0 ? m.social : m.task).emplace_back(pole_display_name(cls->poles[k]));
    }
    m.reasoning = "class " + std::string(cls->name) + " activates";
    for (Pole p : cls->poles) m.reasoning += " " + std::string(pole_name(p));
    return m;
  }

  /// Markers of the active poles in canonical order, then the class reply.
  GeneratedResponse respond(std::string_view query, const SituationCues&, const std::vector<Pole>& social_traits,
                            const std::vector<Pole>& task_traits) override {
    std::array<bool, kNumPoles> active{};
    for (Pole p : social_traits) active[pole_index(p)] = true;
    for (Pole p : task_traits) active[pole_index(p)] = true;
    GeneratedResponse out;
    for (std::size_t i = 0; i < kNumPoles; ++i) {
      if (!active[i]) continue;
      out.response += std::string(kPoleMarkers[i]) + " ";
      out.rationale += std::string(pole_display_name(pole_at(i))) + ": opened with its marker. ";
    }
    out.response += lookup(query).reply;
    return out;
  }

  std::uint64_t seed() const { return seed_; }

 private:
  static const ScenarioClass& lookup(std::string_view query) {
    if (query.empty()) throw InputError("detect_situation_cues: empty query");
    const auto* cls = classify_query(query);
    if (!cls) throw ParseError("deterministic backend: query matches no scenario class", std::string(query));
    return *cls;
  }

  std::uint64_t seed_;
};

/// Test double that corrupts the output of selected queries.
class FaultInjectingBackend final : public GeneratorBackend {
 public:
  enum class Fault { None, AllZero, DualPole, Malformed, Transport };
  using Selector = std::function<Fault(std::string_view query)>;

  FaultInjectingBackend(std::shared_ptr<GeneratorBackend> inner, Selector selector)
      : inner_(std::move(inner)), selector_(std::move(selector)) {}

  std::string kind() const override { return inner_->kind() + "+faults"; }

  SituationCues cues(std::string_view query) override {
    switch (selector_(query)) {
      case Fault::Malformed:
        throw ParseError("injected malformed cue output", "<garbled>");
      case Fault::Transport:
        throw TransportError("injected transport failure");
      default:
        return inner_->cues(query);
    }
  }

  TraitMentions traits(std::string_view query, const SituationCues& cues) override {
    auto m = inner_->traits(query, cues);
    switch (selector_(query)) {
      case Fault::AllZero:
        m.social.clear();
        m.task.clear();
        break;
      case Fault::DualPole: {
        const auto first = pole_from_name(!m.social.empty() ? m.social.front() : m.task.front());
        if (first) m.task.emplace_back(pole_display_name(opposite(*first)));
        break;
      }
      default:
        break;
    }
    return m;
  }

  GeneratedResponse respond(std::string_view query, const SituationCues& cues, const std::vector<Pole>& social,
                            const std::vector<Pole>& task) override {
    return inner_->respond(query, cues, social, task);
  }

 private:
  std::shared_ptr<GeneratorBackend> inner_;
  Selector selector_;
};

}  // namespace persona::cot
