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
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace persona::lm {

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;

// Byte b maps to id b; the three specials sit above the byte range.
inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kPad = 258;
inline constexpr std::size_t kByteVocabSize = 259;

struct Tokenized {
  TokenSequence ids;
  bool truncated = false;
};

inline Tokenized tokenize(std::string_view text,
                          std::size_t max_len = std::numeric_limits<std::size_t>::max()) {
  Tokenized out;
  const std::size_t n = std::min(text.size(), max_len);
  out.truncated = n < text.size();
  out.ids.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.ids.push_back(static_cast<unsigned char>(text[i]));
  return out;
}

/// Inverse of tokenize; special tokens carry no bytes and are dropped.
inline std::string detokenize(std::span<const TokenId> ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

/// [BOS] query [EOS]: the prompt the decoder continues with a response.
inline TokenSequence prompt_tokens(std::string_view query) {
  TokenSequence ids{kBos};
  for (unsigned char c : query) ids.push_back(c);
  ids.push_back(kEos);
  return ids;
}

/// Prompt followed by response bytes and a closing EOS. `response_offset`
/// receives the index of the first response token.
inline TokenSequence training_tokens(std::string_view query, std::string_view response,
                                     std::size_t* response_offset = nullptr) {
  TokenSequence ids = prompt_tokens(query);
  if (response_offset) *response_offset = ids.size();
  for (unsigned char c : response) ids.push_back(c);
  ids.push_back(kEos);
  return ids;
}

}  // namespace persona::lm
