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

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "persona/cot/backend.hpp"
#include "persona/cot/prompts.hpp"

namespace persona::cot {

using Json = nlohmann::ordered_json;

struct PersonaCoTRecord {
  std::string query;
  std::string social_cue;
  std::string task_cue;
  std::vector<Pole> traits;  // canonical order
  std::string response;
  TraitActivationVector p;
  std::string rationale;  // kept in memory only; not part of the file format

  void validate() const {
    if (query.empty()) throw ValidationError("record has an empty query");
    if (response.empty()) throw ValidationError("record has an empty response");
    p.validate();
    if (TraitActivationVector::from_poles(traits) != p || traits.size() != p.popcount()) {
      throw ValidationError("record traits list and p disagree");
    }
  }
};

inline Json record_to_json(const PersonaCoTRecord& r) {
  Json j;
  j["query"] = r.query;
  j["social_cue"] = r.social_cue;
  j["task_cue"] = r.task_cue;
  j["traits"] = Json::array();
  for (Pole p : r.traits) j["traits"].push_back(std::string(pole_name(p)));
  j["response"] = r.response;
  j["p"] = r.p.to_ints();
  return j;
}

/// Parses and validates one record. Strict mode rejects unknown fields.
inline PersonaCoTRecord record_from_json(const Json& j, bool strict = true) {
  static constexpr std::array<std::string_view, 6> kFields = {"query", "social_cue", "task_cue",
                                                              "traits", "response", "p"};
  if (!j.is_object()) throw ValidationError("record is not a JSON object");
  for (auto f : kFields) {
    if (!j.contains(std::string(f))) throw ValidationError("record lacks field '" + std::string(f) + "'");
  }
  if (strict) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (std::find(kFields.begin(), kFields.end(), it.key()) == kFields.end()) {
        throw ValidationError("record has unknown field '" + it.key() + "'");
      }
    }
  }
  PersonaCoTRecord r;
  try {
    r.query = j.at("query").get<std::string>();
    r.social_cue = j.at("social_cue").get<std::string>();
    r.task_cue = j.at("task_cue").get<std::string>();
    r.response = j.at("response").get<std::string>();
    for (const auto& t : j.at("traits")) {
      const auto name = t.get<std::string>();
      auto pole = std::find(kPoleNames.begin(), kPoleNames.end(), name);
      if (pole == kPoleNames.end()) throw ValidationError("unknown trait '" + name + "'");
      r.traits.push_back(pole_at(static_cast<std::size_t>(pole - kPoleNames.begin())));
    }
    const auto bits = j.at("p").get<std::vector<int>>();
    r.p = TraitActivationVector::from_bits(bits);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("record has a malformed field: ") + e.what());
  }
  std::sort(r.traits.begin(), r.traits.end());
  r.validate();
  return r;
}

inline std::string record_to_line(const PersonaCoTRecord& r) {
  return record_to_json(r).dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::strict);
}

inline void write_jsonl(std::ostream& os, const std::vector<PersonaCoTRecord>& records) {
  for (const auto& r : records) os << record_to_line(r) << '\n';
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<PersonaCoTRecord>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  write_jsonl(os, records);
  if (!os) throw InputError("failed writing " + path.string());
}

inline std::vector<PersonaCoTRecord> read_jsonl(std::istream& is, bool strict = true) {
  std::vector<PersonaCoTRecord> out;
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    if (trim(line).empty()) continue;
    try {
      out.push_back(record_from_json(Json::parse(line), strict));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("line " + std::to_string(n) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<PersonaCoTRecord> read_jsonl(const std::filesystem::path& path, bool strict = true) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open dataset " + path.string());
  return read_jsonl(is, strict);
}

// --- synthesis steps -------------------------------------------------------

inline SituationCues detect_situation_cues(GeneratorBackend& backend, std::string_view query) {
  if (query.empty()) throw InputError("detect_situation_cues: empty query");
  auto c = backend.cues(query);
  if (c.social.empty() || c.task.empty()) throw ParseError("backend returned an empty cue", c.social + "\n" + c.task);
  return c;
}

struct IdentifiedTraits {
  std::vector<Pole> social;
  std::vector<Pole> task;
  TraitActivationVector p;  // union of both lists; may be all zero
  std::string reasoning;
};

/// Canonicalizes the backend's trait mentions. Names must match a pole
/// exactly (ParseError otherwise); both poles of one trait raise
/// ValidationError. An all-zero p is returned for the caller to filter.
inline IdentifiedTraits identify_traits(GeneratorBackend& backend, std::string_view query,
                                        const SituationCues& cues) {
  if (cues.social.empty() || cues.task.empty()) throw InputError("identify_traits: empty cue");
  const auto mentions = backend.traits(query, cues);
  IdentifiedTraits out;
  out.reasoning = mentions.reasoning;
  auto canon = [&](const std::vector<std::string>& names, std::vector<Pole>& dst) {
    for (const auto& n : names) {
      const auto pole = pole_from_name(n);
      if (!pole) throw ParseError("unrecognized trait name '" + n + "'", n);
      if (std::find(dst.begin(), dst.end(), *pole) == dst.end()) dst.push_back(*pole);
      out.p.set(*pole, true);
    }
  };
  canon(mentions.social, out.social);
  canon(mentions.task, out.task);
  if (out.p.defect() == TraitActivationVector::Defect::DualPole) out.p.validate();
  return out;
}

inline GeneratedResponse generate_response(GeneratorBackend& backend, std::string_view query,
                                           const SituationCues& cues, const IdentifiedTraits& traits) {
  traits.p.validate();
  auto r = backend.respond(query, cues, traits.social, traits.task);
  if (trim(r.response).empty()) throw ParseError("backend returned an empty response", r.response);
  return r;
}

struct SynthesisStats {
  std::size_t input = 0;
  std::size_t accepted = 0;
  std::size_t rejected_all_zero = 0;
  std::size_t rejected_parse = 0;
  std::size_t rejected_exclusion = 0;
  std::size_t rejected_transport = 0;

  std::size_t rejected() const {
    return rejected_all_zero + rejected_parse + rejected_exclusion + rejected_transport;
  }

  SynthesisStats& operator+=(const SynthesisStats& o) {
    input += o.input;
    accepted += o.accepted;
    rejected_all_zero += o.rejected_all_zero;
    rejected_parse += o.rejected_parse;
    rejected_exclusion += o.rejected_exclusion;
    rejected_transport += o.rejected_transport;
    return *this;
  }

  Json to_json() const {
    return Json{{"input", input},
                {"accepted", accepted},
                {"rejected_all_zero", rejected_all_zero},
                {"rejected_parse", rejected_parse},
                {"rejected_exclusion", rejected_exclusion},
                {"rejected_transport", rejected_transport}};
  }
};

struct Rejection {
  std::size_t index;
  std::string reason;  // all_zero | parse | exclusion | transport
  std::string detail;
};

struct SynthesisResult {
  std::vector<PersonaCoTRecord> records;  // input order
  SynthesisStats stats;
  std::vector<Rejection> rejections;
};

/// Runs all three steps per query. Failures never abort the run: each one
/// is classified and counted, so accepted + rejected == input.
inline SynthesisResult synthesize_dataset(GeneratorBackend& backend, const std::vector<std::string>& queries,
                                          std::uint64_t seed) {
  (void)seed;  // backends own their randomness; input order is kept as is
  if (queries.empty()) throw InputError("synthesize_dataset: no queries");
  SynthesisResult out;
  out.stats.input = queries.size();
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& q = queries[i];
    auto reject = [&](std::size_t& counter, const char* reason, const std::string& detail) {
      ++counter;
      out.rejections.push_back({i, reason, detail});
    };
    try {
      if (q.empty()) throw ParseError("empty query", q);
      const auto cues = detect_situation_cues(backend, q);
      const auto traits = identify_traits(backend, q, cues);
      if (traits.p.popcount() == 0) {
        reject(out.stats.rejected_all_zero, "all_zero", "no trait identified");
        continue;
      }
      const auto resp = generate_response(backend, q, cues, traits);
      PersonaCoTRecord r{q, cues.social, cues.task, traits.p.poles(), resp.response, traits.p,
                         traits.reasoning + (traits.reasoning.empty() ? "" : "\n") + resp.rationale};
      r.validate();
      out.records.push_back(std::move(r));
      ++out.stats.accepted;
    } catch (const ValidationError& e) {
      reject(out.stats.rejected_exclusion, "exclusion", e.what());
    } catch (const ParseError& e) {
      reject(out.stats.rejected_parse, "parse", e.what());
    } catch (const TransportError& e) {
      reject(out.stats.rejected_transport, "transport", e.what());
    } catch (const InputError& e) {
      reject(out.stats.rejected_parse, "parse", e.what());
    }
  }
  return out;
}

}  // namespace persona::cot
