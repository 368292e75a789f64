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

#include <array>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "persona/cot/scenarios.hpp"
#include "persona/model.hpp"

namespace persona::eval {

/// rate[j][k]: fraction of responses labelled with active pole j that
/// contain the marker of pole k. count[j] is the number of such responses.
struct TraitExpressionResult {
  std::array<std::array<double, kNumPoles>, kNumPoles> rate{};
  std::array<std::size_t, kNumPoles> count{};
  std::size_t responses = 0;

  bool empty() const { return responses == 0; }
  double active_rate(std::size_t j) const { return rate[j][j]; }

  /// Highest rate of any marker other than j among pole-j responses.
  double max_inactive_rate(std::size_t j) const {
    double m = 0.0;
    for (std::size_t k = 0; k < kNumPoles; ++k)
      if (k != j) m = std::max(m, rate[j][k]);
    return m;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["responses"] = responses;
    j["poles"] = nlohmann::ordered_json::array();
    for (std::size_t p = 0; p < kNumPoles; ++p) {
      if (!count[p]) continue;
      nlohmann::ordered_json row{{"pole", kPoleNames[p]}, {"count", count[p]}, {"active_rate", rate[p][p]}};
      row["marker_rates"] = rate[p];
      j["poles"].push_back(row);
    }
    return j;
  }
};

inline bool contains_marker(std::string_view response, Pole p) {
  return response.find(cot::pole_marker(p)) != std::string_view::npos;
}

/// Marker presence per active pole; a response whose p has several active
/// poles contributes to each of their rows.
inline TraitExpressionResult trait_expression_check(const std::vector<std::string>& responses,
                                                    const std::vector<TraitActivationVector>& labels,
                                                    std::ostream* warnings = &std::cerr) {
  if (responses.size() != labels.size()) throw InputError("trait_expression_check: responses and labels differ in count");
  TraitExpressionResult out;
  out.responses = responses.size();
  if (responses.empty()) {
    if (warnings) *warnings << "warning: trait_expression_check on an empty response set\n";
    return out;
  }
  std::array<std::array<std::size_t, kNumPoles>, kNumPoles> hits{};
  for (std::size_t r = 0; r < responses.size(); ++r) {
    for (std::size_t j = 0; j < kNumPoles; ++j) {
      if (!labels[r][j]) continue;
      ++out.count[j];
      for (std::size_t k = 0; k < kNumPoles; ++k) hits[j][k] += contains_marker(responses[r], pole_at(k)) ? 1 : 0;
    }
  }
  for (std::size_t j = 0; j < kNumPoles; ++j)
    for (std::size_t k = 0; k < kNumPoles; ++k)
      out.rate[j][k] = out.count[j] ? static_cast<double>(hits[j][k]) / static_cast<double>(out.count[j]) : 0.0;
  return out;
}

/// Fraction of responses containing each pole's marker.
inline std::array<double, kNumPoles> marker_background(const std::vector<std::string>& responses) {
  std::array<double, kNumPoles> out{};
  if (responses.empty()) return out;
  for (const auto& r : responses)
    for (std::size_t k = 0; k < kNumPoles; ++k) out[k] += contains_marker(r, pole_at(k)) ? 1.0 : 0.0;
  for (auto& v : out) v /= static_cast<double>(responses.size());
  return out;
}

struct InferResult {
  std::string response;
  moe::RouterOutput weights;
};

/// Routes the query, then decodes under exactly the reported mixture.
template <class T>
InferResult infer(const PersonaModel<T>& model, std::string_view query, const lm::DecodeParams& params) {
  InferResult out;
  out.weights = model.route_weights(query);
  const auto prompt = lm::prompt_tokens(query);
  const auto seq = model.generate(prompt, &out.weights, params);
  out.response = lm::detokenize(std::span<const lm::TokenId>(seq).subspan(prompt.size()));
  return out;
}

/// Decodes a prompt under a fixed mixture (or the bare base model when null)
/// and returns only the new text.
template <class T>
std::string generate_text(const PersonaModel<T>& model, std::string_view query, const moe::RouterOutput* mixture,
                          const lm::DecodeParams& params) {
  const auto prompt = lm::prompt_tokens(query);
  const auto seq = model.generate(prompt, mixture, params);
  return lm::detokenize(std::span<const lm::TokenId>(seq).subspan(prompt.size()));
}

}  // namespace persona::eval
