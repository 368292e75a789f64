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

// Scenario classes behind the hermetic corpus. Each corpus class activates
// exactly one pole, carries a fixed tag that appears in its task cue, and
// owns a key word; generated queries embed the key inside filler drawn from
// a pool shared by every class. The keys of the two poles of one trait are
// anagrams, so byte-count features alone cannot separate them.

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "persona/rng.hpp"
#include "persona/traits.hpp"

namespace persona::cot {

struct ScenarioClass {
  std::string_view name;  // also the tag embedded in the task cue
  std::vector<Pole> poles;
  std::string_view social_cue;
  std::string_view task_cue;
  std::vector<std::string_view> keys;  // any key present in a query selects the class
  std::string_view reply;              // short topical body of the response
  bool in_corpus = true;
};

/// Lexical style marker for each pole, emitted at the start of a response
/// (in canonical pole order when several poles are active).
inline constexpr std::array<std::string_view, kNumPoles> kPoleMarkers = {
    "Imagine boldly:",   "Keep it basic:", "Step one, plan:",     "Eh, whatever:",
    "Wow, let's party!", "Quietly, then:", "I hear you, friend.", "Frankly, no:",
    "Careful, I worry:", "Stay calm:",
};

inline std::string_view pole_marker(Pole p) { return kPoleMarkers[pole_index(p)]; }

inline const std::vector<ScenarioClass>& scenario_catalog() {
  static const std::vector<ScenarioClass> catalog = {
      {"wild-ideas", {Pole::HighOpenness}, "Curious, playful tone; the user welcomes unusual suggestions.",
       "[wild-ideas] Offer novel and unconventional ideas.", {"master"}, "try odd paths."},
      {"plain-facts", {Pole::LowOpenness}, "Matter-of-fact tone; the user wants the familiar route.",
       "[plain-facts] Give the conventional, proven answer.", {"stream"}, "use plain facts."},
      {"step-plan", {Pole::HighConscientiousness}, "Focused tone; the user values order and follow-through.",
       "[step-plan] Provide an organized step-by-step plan.", {"listen"}, "list tasks."},
      {"casual-chat", {Pole::LowConscientiousness}, "Relaxed tone; the user is not after precision.",
       "[casual-chat] Keep the reply loose and spontaneous.", {"silent"}, "no fuss."},
      {"party-hype", {Pole::HighExtraversion}, "Excited, social tone; the user wants energy.",
       "[party-hype] Bring enthusiasm and lively energy.", {"heart"}, "bring everyone!"},
      {"quiet-reflection", {Pole::LowExtraversion}, "Reserved tone; the user prefers calm and brevity.",
       "[quiet-reflection] Answer briefly and calmly.", {"earth"}, "pause first."},
      {"empathy-request", {Pole::HighAgreeableness}, "Hurt, vulnerable tone; the user needs warmth and empathy.",
       "[empathy-request] Offer warm, compassionate support.", {"below"}, "stay close."},
      {"debate-request", {Pole::LowAgreeableness}, "Combative tone; the user asks to be challenged.",
       "[debate-request] Give blunt, critical pushback.", {"elbow"}, "that claim is weak."},
      {"risk-check", {Pole::HighNeuroticism}, "Uneasy tone; the user wants possible dangers named.",
       "[risk-check] Flag worries and what could fail.", {"melon"}, "it may fail."},
      {"calm-reassure", {Pole::LowNeuroticism}, "Shaken tone; the user needs steady confidence.",
       "[calm-reassure] Respond with steady, unshaken confidence.", {"lemon"}, "it works out."},
      {"workplace-shift",
       {Pole::HighConscientiousness, Pole::HighAgreeableness, Pole::LowNeuroticism},
       "Anxious, uncertain tone about lost pay; the user needs empathy and reassurance.",
       "[workplace-shift] Explain workplace policies on canceled shifts and pay with care and clarity.",
       {"shift at work"},
       "let's take it one step at a time.",
       false},
      {"family-story",
       {Pole::HighOpenness, Pole::LowConscientiousness},
       "Warm, relaxed tone; the user wants an inviting narrative.",
       "[family-story] Tell an imaginative, free-flowing story about family time.",
       {"story about a family"},
       "once upon a time, a family laughed together.",
       false},
  };
  return catalog;
}

inline const ScenarioClass& scenario_by_name(std::string_view name) {
  for (const auto& c : scenario_catalog())
    if (c.name == name) return c;
  throw InputError("unknown scenario class '" + std::string(name) + "'");
}

/// Corpus classes in canonical pole order (class k activates pole k).
inline std::vector<const ScenarioClass*> corpus_classes() {
  std::vector<const ScenarioClass*> out;
  for (const auto& c : scenario_catalog())
    if (c.in_corpus) out.push_back(&c);
  return out;
}

/// First catalog class with a key word occurring in `query` as a whole
/// word (multi-word keys match as substrings); null when none does.
inline const ScenarioClass* classify_query(std::string_view query) {
  auto is_word = [](char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); };
  for (const auto& c : scenario_catalog()) {
    for (auto key : c.keys) {
      for (std::size_t pos = query.find(key); pos != std::string_view::npos; pos = query.find(key, pos + 1)) {
        const bool left = pos == 0 || !is_word(query[pos - 1]);
        const bool right = pos + key.size() == query.size() || !is_word(query[pos + key.size()]);
        if (left && right) return &c;
      }
    }
  }
  return nullptr;
}

namespace detail {
inline constexpr std::array<std::string_view, 12> kOpeners = {
    "hey,", "hi,", "so,", "ok,", "well,", "um,", "right,", "yo,", "hmm,", "look,", "alright,", "today,",
};
inline constexpr std::array<std::string_view, 16> kFiller = {
    "about", "the",  "my",    "a",    "plan", "for",  "our", "week",
    "with",  "some", "team",  "idea", "and",  "this", "one", "trip",
};
inline constexpr std::array<std::string_view, 8> kClosers = {
    "thanks.", "please?", "any tips?", "what now?", "ideas?", "help?", "go on.", "so?",
};
}  // namespace detail

/// A synthetic query of class `cls`: the key word first, then an opener,
/// two to six filler words and a closer. Only the key carries class information.
inline std::string make_query(const ScenarioClass& cls, Rng& rng) {
  std::string q(cls.keys[rng.below(cls.keys.size())]);
  q += ' ';
  q += detail::kOpeners[rng.below(detail::kOpeners.size())];
  for (std::size_t i = 0, n = 2 + rng.below(5); i < n; ++i) {
    q += ' ';
    q += detail::kFiller[rng.below(detail::kFiller.size())];
  }
  q += ' ';
  q += detail::kClosers[rng.below(detail::kClosers.size())];
  return q;
}

/// `count` queries cycling through the ten corpus classes (class i % 10 at
/// position i), so every pole gets an equal share.
inline std::vector<std::string> builtin_queries(std::size_t count, std::uint64_t seed) {
  const auto classes = corpus_classes();
  Rng rng(derive_seed(seed, "builtin-queries"));
  std::vector<std::string> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_query(*classes[i % classes.size()], rng));
  return out;
}

}  // namespace persona::cot
