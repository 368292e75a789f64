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

// Model-level evaluations shared by the CLI and the acceptance binary.

#include <map>

#include "persona/cot/dataset.hpp"
#include "persona/eval/expression.hpp"
#include "persona/eval/probe.hpp"
#include "persona/eval/routing.hpp"

namespace persona::eval {

template <class T>
std::vector<std::vector<double>> embed_queries(const PersonaModel<T>& model, const std::vector<std::string>& queries) {
  ad::NoGradGuard no_grad;
  std::vector<std::vector<double>> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    const auto h = model.embed_query(q);
    out.emplace_back(h.value().begin(), h.value().end());
  }
  return out;
}

/// Class id per record: distinct p vectors in ascending string order.
inline std::vector<std::size_t> class_labels(const std::vector<cot::PersonaCoTRecord>& data) {
  std::map<std::string, std::size_t> ids;
  for (const auto& r : data) ids.emplace(r.p.to_string(), 0);
  std::size_t next = 0;
  for (auto& [key, id] : ids) id = next++;
  std::vector<std::size_t> labels;
  labels.reserve(data.size());
  for (const auto& r : data) labels.push_back(ids.at(r.p.to_string()));
  return labels;
}

/// Probe on the trained encoder against the same architecture at its
/// initialization, over the queries of `data`.
template <class T>
ProbeResult probe_model(const PersonaModel<T>& trained, const PersonaModel<T>& untrained,
                        const std::vector<cot::PersonaCoTRecord>& data, const ProbeOptions& opt = {}) {
  std::vector<std::string> queries;
  for (const auto& r : data) queries.push_back(r.query);
  return probe_eval(embed_queries(trained, queries), embed_queries(untrained, queries), class_labels(data), opt);
}

struct ExpressionReport {
  TraitExpressionResult result;
  std::array<double, kNumPoles> background{};
  std::size_t prompts = 0;
  std::size_t generations = 0;
  std::size_t active_hits = 0;
  std::vector<std::string> samples;  // a few generations for inspection

  /// Share of generations that carry the marker of the pole they ran on.
  double active_rate() const { return generations ? static_cast<double>(active_hits) / static_cast<double>(generations) : 0.0; }

  /// Largest excess of an inactive marker's rate over its base-model rate.
  double max_inactive_excess() const {
    double m = 0.0;
    for (std::size_t j = 0; j < kNumPoles; ++j) {
      if (!result.count[j]) continue;
      for (std::size_t k = 0; k < kNumPoles; ++k)
        if (k != j) m = std::max(m, result.rate[j][k] - background[k]);
    }
    return m;
  }

  Json to_json() const {
    Json j = result.to_json();
    j["prompts"] = prompts;
    j["generations"] = generations;
    j["active_rate"] = active_rate();
    j["background"] = background;
    j["max_inactive_excess"] = max_inactive_excess();
    j["samples"] = samples;
    return j;
  }
};

/// For every prompt and every pole active in its p, decodes under the
/// one-hot mixture on that pole. Background rates come from the bare base
/// model on the same prompts.
template <class T>
ExpressionReport expression_eval(const PersonaModel<T>& model, const std::vector<cot::PersonaCoTRecord>& data,
                                 const lm::DecodeParams& params, std::size_t sample_count = 10) {
  ExpressionReport rep;
  rep.prompts = data.size();
  std::vector<std::string> base_out, responses;
  std::vector<TraitActivationVector> labels;
  for (const auto& r : data) {
    base_out.push_back(generate_text(model, r.query, nullptr, params));
    for (Pole p : r.p.poles()) {
      const auto mixture = moe::RouterOutput::one_hot(p);
      responses.push_back(generate_text(model, r.query, &mixture, params));
      labels.push_back(TraitActivationVector::one_hot(p));
      rep.active_hits += contains_marker(responses.back(), p) ? 1 : 0;
      if (rep.samples.size() < sample_count) rep.samples.push_back(std::string(pole_name(p)) + ": " + responses.back());
    }
  }
  rep.generations = responses.size();
  rep.background = marker_background(base_out);
  rep.result = trait_expression_check(responses, labels);
  return rep;
}

/// Records of `data` spread evenly over its p-groups, at most `count`.
inline std::vector<cot::PersonaCoTRecord> balanced_subset(const std::vector<cot::PersonaCoTRecord>& data,
                                                          std::size_t count) {
  std::map<std::string, std::vector<const cot::PersonaCoTRecord*>> groups;
  for (const auto& r : data) groups[r.p.to_string()].push_back(&r);
  std::vector<cot::PersonaCoTRecord> out;
  for (std::size_t round = 0; out.size() < count; ++round) {
    bool any = false;
    for (auto& [key, members] : groups) {
      if (round < members.size() && out.size() < count) {
        out.push_back(*members[round]);
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

}  // namespace persona::eval
