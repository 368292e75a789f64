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

#include <algorithm>
#include <vector>

#include <json.hpp>

#include "persona/cot/dataset.hpp"
#include "persona/model.hpp"

namespace persona::eval {

using Json = nlohmann::ordered_json;

struct RoutingRecordResult {
  std::vector<std::size_t> predicted;  // top-popcount(p) experts, ascending
  std::vector<std::size_t> positives;  // ascending
  bool hit = false;
  double positive_mass = 0.0;
  double negative_mass = 0.0;
};

struct RoutingEvalResult {
  std::vector<RoutingRecordResult> records;
  std::size_t excluded = 0;  // records without a usable p
  double accuracy = 0.0;
  double mean_positive_mass = 0.0;
  double mean_negative_mass = 0.0;

  Json to_json(bool per_record = false) const {
    Json j{{"records", records.size()},
           {"excluded", excluded},
           {"accuracy", accuracy},
           {"mean_positive_mass", mean_positive_mass},
           {"mean_negative_mass", mean_negative_mass}};
    if (per_record) {
      j["per_record"] = Json::array();
      for (const auto& r : records) {
        j["per_record"].push_back(Json{{"predicted", r.predicted}, {"positives", r.positives}, {"hit", r.hit}});
      }
    }
    return j;
  }
};

/// Scores one weight vector: a hit iff the popcount(p) largest weights sit
/// exactly on the active poles of p.
inline RoutingRecordResult score_routing(const moe::RouterOutput& w, const TraitActivationVector& p) {
  RoutingRecordResult r;
  for (std::size_t i = 0; i < kNumPoles; ++i) {
    if (p[i]) {
      r.positives.push_back(i);
      r.positive_mass += w.weights[i];
    } else {
      r.negative_mass += w.weights[i];
    }
  }
  r.predicted = w.top_k(r.positives.size());
  std::sort(r.predicted.begin(), r.predicted.end());
  r.hit = r.predicted == r.positives;
  return r;
}

inline RoutingEvalResult summarize_routing(std::vector<RoutingRecordResult> rows, std::size_t excluded) {
  RoutingEvalResult out;
  out.records = std::move(rows);
  out.excluded = excluded;
  if (out.records.empty()) return out;
  std::size_t hits = 0;
  for (const auto& r : out.records) {
    hits += r.hit ? 1 : 0;
    out.mean_positive_mass += r.positive_mass;
    out.mean_negative_mass += r.negative_mass;
  }
  const auto n = static_cast<double>(out.records.size());
  out.accuracy = static_cast<double>(hits) / n;
  out.mean_positive_mass /= n;
  out.mean_negative_mass /= n;
  return out;
}

template <class T>
RoutingEvalResult eval_routing(const PersonaModel<T>& model, const std::vector<cot::PersonaCoTRecord>& data) {
  std::vector<RoutingRecordResult> rows;
  std::size_t excluded = 0;
  for (const auto& rec : data) {
    if (rec.p.defect() != TraitActivationVector::Defect::None) {
      ++excluded;
      continue;
    }
    rows.push_back(score_routing(model.route_weights(rec.query), rec.p));
  }
  return summarize_routing(std::move(rows), excluded);
}

}  // namespace persona::eval
