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

// The ten Big Five trait poles and the binary activation vector over them.
// Pole order is fixed and shared by every index in the library: expert ids,
// router weights, partitions and serialized `p` arrays.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "persona/error.hpp"

namespace persona {

enum class Pole : std::uint8_t {
  HighOpenness = 0,
  LowOpenness,
  HighConscientiousness,
  LowConscientiousness,
  HighExtraversion,
  LowExtraversion,
  HighAgreeableness,
  LowAgreeableness,
  HighNeuroticism,
  LowNeuroticism,
};

inline constexpr std::size_t kNumPoles = 10;

inline constexpr std::array<std::string_view, kNumPoles> kPoleNames = {
    "high_openness",     "low_openness",     "high_conscientiousness", "low_conscientiousness",
    "high_extraversion", "low_extraversion", "high_agreeableness",     "low_agreeableness",
    "high_neuroticism",  "low_neuroticism",
};

inline constexpr std::array<std::string_view, kNumPoles> kPoleDisplayNames = {
    "High Openness",     "Low Openness",     "High Conscientiousness", "Low Conscientiousness",
    "High Extraversion", "Low Extraversion", "High Agreeableness",     "Low Agreeableness",
    "High Neuroticism",  "Low Neuroticism",
};

constexpr std::size_t pole_index(Pole p) { return static_cast<std::size_t>(p); }
constexpr Pole pole_at(std::size_t i) { return static_cast<Pole>(i); }
constexpr std::string_view pole_name(Pole p) { return kPoleNames[pole_index(p)]; }
constexpr std::string_view pole_display_name(Pole p) { return kPoleDisplayNames[pole_index(p)]; }
/// The other end of the same trait dimension.
constexpr Pole opposite(Pole p) { return pole_at(pole_index(p) ^ 1U); }

/// Exact match against the canonical or display name; anything else is nullopt.
inline std::optional<Pole> pole_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNumPoles; ++i) {
    if (name == kPoleNames[i] || name == kPoleDisplayNames[i]) return pole_at(i);
  }
  return std::nullopt;
}

class TraitActivationVector {
 public:
  enum class Defect { None, AllZero, DualPole };

  TraitActivationVector() { bits_.fill(0); }

  static TraitActivationVector from_bits(std::span<const int> bits) {
    if (bits.size() != kNumPoles) {
      throw ValidationError("trait activation vector needs 10 entries, got " + std::to_string(bits.size()));
    }
    TraitActivationVector v;
    for (std::size_t i = 0; i < kNumPoles; ++i) {
      if (bits[i] != 0 && bits[i] != 1) throw ValidationError("trait activation entries must be 0 or 1");
      v.bits_[i] = static_cast<std::uint8_t>(bits[i]);
    }
    return v;
  }

  static TraitActivationVector from_poles(std::span<const Pole> poles) {
    TraitActivationVector v;
    for (Pole p : poles) v.bits_[pole_index(p)] = 1;
    return v;
  }

  static TraitActivationVector one_hot(Pole p) {
    TraitActivationVector v;
    v.bits_[pole_index(p)] = 1;
    return v;
  }

  bool operator[](std::size_t i) const { return bits_.at(i) != 0; }
  bool has(Pole p) const { return bits_[pole_index(p)] != 0; }
  void set(Pole p, bool on) { bits_[pole_index(p)] = on ? 1 : 0; }

  std::size_t popcount() const {
    std::size_t n = 0;
    for (auto b : bits_) n += b;
    return n;
  }

  Defect defect() const {
    if (popcount() == 0) return Defect::AllZero;
    for (std::size_t t = 0; t < kNumPoles; t += 2) {
      if (bits_[t] && bits_[t + 1]) return Defect::DualPole;
    }
    return Defect::None;
  }

  /// Throws ValidationError describing the first violated invariant.
  void validate() const {
    switch (defect()) {
      case Defect::AllZero:
        throw ValidationError("trait activation vector is all zeros");
      case Defect::DualPole:
        for (std::size_t t = 0; t < kNumPoles; t += 2) {
          if (bits_[t] && bits_[t + 1]) {
            throw ValidationError("both poles of one trait active: " + std::string(kPoleNames[t]) + " and " +
                                  std::string(kPoleNames[t + 1]));
          }
        }
        break;
      case Defect::None:
        break;
    }
  }

  std::vector<Pole> poles() const {
    std::vector<Pole> out;
    for (std::size_t i = 0; i < kNumPoles; ++i)
      if (bits_[i]) out.push_back(pole_at(i));
    return out;
  }

  std::array<int, kNumPoles> to_ints() const {
    std::array<int, kNumPoles> out{};
    for (std::size_t i = 0; i < kNumPoles; ++i) out[i] = bits_[i];
    return out;
  }

  /// "[0,0,1,...]"; also the grouping key for same-p batching.
  std::string to_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < kNumPoles; ++i) {
      if (i) s += ',';
      s += static_cast<char>('0' + bits_[i]);
    }
    return s + "]";
  }

  auto operator<=>(const TraitActivationVector&) const = default;

 private:
  std::array<std::uint8_t, kNumPoles> bits_;
};

}  // namespace persona
