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

// Prompt rendering and section parsing for LLM-backed synthesis. Model
// output is split on "##<Section>:" markers; anything that does not carry
// the required markers is rejected rather than repaired.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "persona/error.hpp"
#include "persona/traits.hpp"

namespace persona::cot {

inline constexpr std::string_view kCueTemplate =
    "Below is a user instruction:\n"
    "\n"
    "User Instruction:\n"
    "{prompt}\n"
    "\n"
    "Identify the situational cues of this instruction.\n"
    "- Social cue: the user's tone, emotional state, or the social norms in play.\n"
    "- Task cue: the complexity, required skills, and goal of the task.\n"
    "\n"
    "Here is the required format:\n"
    "##Social Cue:...\n"
    "##Task Cue:...\n";

inline constexpr std::string_view kTraitTemplate =
    "Below is a user instruction with its situational cues:\n"
    "\n"
    "User Instruction:\n"
    "{prompt}\n"
    "- Social Cue: {social_cue}\n"
    "- Task Cue: {task_cue}\n"
    "\n"
    "Which personality trait poles should the response express? Choose only from:\n"
    "High Openness; Low Openness; High Conscientiousness; Low Conscientiousness; High Extraversion;\n"
    "Low Extraversion; High Agreeableness; Low Agreeableness; High Neuroticism; Low Neuroticism.\n"
    "List the poles triggered by each cue, separated by semicolons, or None.\n"
    "\n"
    "Here is the required format:\n"
    "##Social Traits:...\n"
    "##Task Traits:...\n";

inline constexpr std::string_view kResponseTemplate =
    "Below is a user instruction:\n"
    "\n"
    "User Instruction:\n"
    "{prompt}\n"
    "\n"
    "Step 1: Analyze the Social Cue\n"
    "- What does the social cue suggest about the user's tone, intent, or emotional state?\n"
    "- Social Cue: {social_cue}\n"
    "- Reasoning: Based on the social cue, the user appears to be [describe tone/intent/emotion]. This suggests "
    "they may respond well to [specific approach].\n"
    "\n"
    "Step 2: Analyze the Task Cue\n"
    "- What does the task cue reveal about the user's goals or expectations?\n"
    "- Task Cue: {task_cue}\n"
    "- Reasoning: The task cue indicates the user is looking for [specific goal]. This requires a response that is "
    "[specific quality, e.g., creative, structured, empathetic].\n"
    "\n"
    "Step 3: Identify Personality Traits\n"
    "- Based on the social and task cues, what personality traits are required to respond appropriately?\n"
    "- Identified Traits:\n"
    "{social_traits}\n"
    "{task_traits}\n"
    "- Reasoning:\n"
    "  - Openness to Experience: The user's [high/low] openness suggests they prefer [innovative/practical] "
    "solutions.\n"
    "  - Conscientiousness: The user's [high/low] conscientiousness suggests they value [structure/flexibility].\n"
    "  - Extraversion: The user's [high/low] extraversion suggests they prefer [energetic/calm] communication.\n"
    "  - Agreeableness: The user's [high/low] agreeableness suggests they respond well to [supportive/direct] "
    "language.\n"
    "  - Neuroticism: The user's [high/low] neuroticism suggests they may need [reassurance/confidence].\n"
    "\n"
    "Step 4: Formulate the Response\n"
    "- How can I align the response with the identified personality traits?\n"
    "- Reasoning:\n"
    "  - Openness to Experience: Since the user is [high/low] in openness, I will [use creative ideas/stick to "
    "practical solutions].\n"
    "  - Conscientiousness: Since the user is [high/low] in conscientiousness, I will [emphasize structure/keep the "
    "approach flexible].\n"
    "  - Extraversion: Since the user is [high/low] in extraversion, I will [use energetic language/maintain a calm "
    "tone].\n"
    "  - Agreeableness: Since the user is [high/low] in agreeableness, I will [be supportive/maintain a neutral "
    "tone].\n"
    "  - Neuroticism: Since the user is [high/low] in neuroticism, I will [provide reassurance/use confident "
    "language].\n"
    "\n"
    "Step 5: Provide the Final Response\n"
    "- Write the response that embodies the identified traits. Please explain at the end of your response how you "
    "incorporated the identified traits, using the '##Persona Behavior Rationale' format.\n"
    "\n"
    "Here is the required format:\n"
    "##Response:...\n"
    "##Persona Behavior Rationale:...\n"
    "\n"
    "Now, please respond to the user instruction.\n";

struct TemplateField {
  std::string_view name;
  std::string_view value;
};

/// Replaces every "{name}" placeholder; unknown placeholders are left as is.
inline std::string render_template(std::string_view tmpl, std::initializer_list<TemplateField> fields) {
  std::string out;
  out.reserve(tmpl.size() + 256);
  for (std::size_t i = 0; i < tmpl.size();) {
    bool replaced = false;
    if (tmpl[i] == '{') {
      for (const auto& f : fields) {
        if (tmpl.substr(i + 1, f.name.size()) == f.name && i + 1 + f.name.size() < tmpl.size() &&
            tmpl[i + 1 + f.name.size()] == '}') {
          out += f.value;
          i += f.name.size() + 2;
          replaced = true;
          break;
        }
      }
    }
    if (!replaced) out += tmpl[i++];
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

/// Text after "##<name>:" up to the next line that starts a "##" section.
inline std::optional<std::string> find_section(std::string_view text, std::string_view name) {
  const std::string marker = "##" + std::string(name) + ":";
  const auto at = text.find(marker);
  if (at == std::string_view::npos) return std::nullopt;
  const auto begin = at + marker.size();
  auto end = text.find("\n##", begin);
  if (end == std::string_view::npos) end = text.size();
  return std::string(trim(text.substr(begin, end - begin)));
}

inline std::string require_section(std::string_view text, std::string_view name) {
  auto s = find_section(text, name);
  if (!s) throw ParseError("model output lacks the ##" + std::string(name) + " section", std::string(text));
  if (s->empty()) throw ParseError("model output has an empty ##" + std::string(name) + " section", std::string(text));
  return *s;
}

/// Splits a trait list on ';', ',' or newlines. Each item, after trimming a
/// leading "-" or "*" and a trailing "(...)" gloss, must be an exact pole
/// name. "None" or an empty list yields no poles.
inline std::vector<std::string> split_trait_list(std::string_view list) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= list.size(); ++i) {
    if (i < list.size() && list[i] != ';' && list[i] != ',' && list[i] != '\n') continue;
    auto item = trim(list.substr(start, i - start));
    start = i + 1;
    if (!item.empty() && (item.front() == '-' || item.front() == '*')) item = trim(item.substr(1));
    if (const auto paren = item.find('('); paren != std::string_view::npos) item = trim(item.substr(0, paren));
    while (!item.empty() && (item.back() == '.' || item.back() == ':')) item.remove_suffix(1);
    if (item.empty() || item == "None" || item == "none") continue;
    out.emplace_back(item);
  }
  return out;
}

inline std::string join_display_names(const std::vector<Pole>& poles) {
  std::string out;
  for (Pole p : poles) {
    if (!out.empty()) out += "; ";
    out += pole_display_name(p);
  }
  return out.empty() ? "None" : out;
}

}  // namespace persona::cot
