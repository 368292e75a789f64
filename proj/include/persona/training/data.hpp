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
#include <map>
#include <vector>

#include "persona/cot/dataset.hpp"
#include "persona/lm/tokenizer.hpp"

namespace persona::training {

using cot::PersonaCoTRecord;

/// Indices into the dataset; partition k holds records with p_k = 1, so a
/// record with several active poles lands in several partitions.
using Partitions = std::array<std::vector<std::size_t>, kNumPoles>;

inline Partitions partition_by_trait(const std::vector<PersonaCoTRecord>& data, bool allow_empty = false) {
  Partitions parts;
  for (std::size_t r = 0; r < data.size(); ++r) {
    data[r].p.validate();
    for (std::size_t k = 0; k < kNumPoles; ++k)
      if (data[r].p[k]) parts[k].push_back(r);
  }
  if (!allow_empty) {
    for (std::size_t k = 0; k < kNumPoles; ++k) {
      if (parts[k].empty()) {
        throw InputError("partition for pole " + std::string(kPoleNames[k]) + " is empty; the dataset never activates it");
      }
    }
  }
  return parts;
}

/// Batches of record indices in which every record has the same p. Groups
/// are visited in p order, shuffled per seed, and cut into full batches plus
/// one remainder batch; batches of one record are dropped with a warning.
/// The batch order is shuffled as well.
inline std::vector<std::vector<std::size_t>> make_same_p_batches(const std::vector<PersonaCoTRecord>& data,
                                                                 std::size_t batch_size, std::uint64_t seed,
                                                                 std::ostream* warnings = &std::cerr) {
  if (batch_size < 2) throw BatchConstructionError("same-p batches need batch_size >= 2");
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < data.size(); ++r) groups[data[r].p.to_string()].push_back(r);
  Rng rng(derive_seed(seed, "same-p-batches"));
  std::vector<std::vector<std::size_t>> batches;
  for (auto& [key, members] : groups) {
    rng.shuffle(members.begin(), members.end());
    for (std::size_t start = 0; start < members.size(); start += batch_size) {
      const std::size_t end = std::min(members.size(), start + batch_size);
      if (end - start < 2) {
        if (warnings) *warnings << "warning: skipping single-record batch for p=" << key << '\n';
        continue;
      }
      batches.emplace_back(members.begin() + static_cast<std::ptrdiff_t>(start),
                           members.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  rng.shuffle(batches.begin(), batches.end());
  return batches;
}

struct HoldoutSplit {
  std::vector<PersonaCoTRecord> train;
  std::vector<PersonaCoTRecord> heldout;
};

/// Deterministic split that holds out the same fraction of every p-group.
inline HoldoutSplit split_holdout(const std::vector<PersonaCoTRecord>& data, double fraction, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < data.size(); ++r) groups[data[r].p.to_string()].push_back(r);
  Rng rng(derive_seed(seed, "holdout"));
  std::vector<bool> held(data.size(), false);
  for (auto& [key, members] : groups) {
    rng.shuffle(members.begin(), members.end());
    const auto n = static_cast<std::size_t>(fraction * static_cast<double>(members.size()) + 0.5);
    for (std::size_t i = 0; i < n && i + 1 < members.size(); ++i) held[members[i]] = true;
  }
  HoldoutSplit s;
  for (std::size_t r = 0; r < data.size(); ++r) (held[r] ? s.heldout : s.train).push_back(data[r]);
  return s;
}

/// A record framed for the decoder.
struct Example {
  lm::TokenSequence tokens;
  std::size_t response_offset = 0;
};

inline Example make_example(const PersonaCoTRecord& r, std::size_t max_context) {
  Example e;
  e.tokens = lm::training_tokens(r.query, r.response, &e.response_offset);
  if (e.tokens.size() > max_context) {
    throw ContextOverflowError("record of " + std::to_string(e.tokens.size()) + " tokens exceeds T_max=" +
                               std::to_string(max_context));
  }
  return e;
}

}  // namespace persona::training
