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

// Checkpoint layout: <dir>/manifest.json plus one blob per parameter.
// Blob = 8-byte magic "PMOEPAR1", u32 rank, rank x u64 dims, then the
// values as little-endian float32. Directories are written under a
// temporary name and renamed into place.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "persona/training/config.hpp"

namespace persona::training {

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr char kBlobMagic[8] = {'P', 'M', 'O', 'E', 'P', 'A', 'R', '1'};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("sha256: init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_, data, n) != 1) throw Error("sha256: update failed");
    return *this;
  }
  Sha256& update(std::string_view s) { return update(s.data(), s.size()); }

  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_, md, &len) != 1) throw Error("sha256: final failed");
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
      out += digits[md[i] >> 4];
      out += digits[md[i] & 15];
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

inline std::string sha256_hex(std::string_view bytes) { return Sha256().update(bytes).hex(); }

/// Digest over names, shapes and values of every parameter in `group`.
template <class T>
std::string parameter_digest(PersonaModel<T>& model, ParamGroup group) {
  Sha256 h;
  model.for_each_parameter([&](const std::string& name, ad::Tensor<T>& t) {
    if (param_group(name) != group) return;
    h.update(name).update("\0", 1);
    for (auto d : t.shape()) {
      const auto d64 = static_cast<std::uint64_t>(d);
      h.update(&d64, sizeof d64);
    }
    h.update(t.value().data(), t.value().size_bytes());
  });
  return h.hex();
}

struct Digests {
  std::string base, adapters, router;
  bool operator==(const Digests&) const = default;
};

template <class T>
Digests digests(PersonaModel<T>& model) {
  return {parameter_digest(model, ParamGroup::Base), parameter_digest(model, ParamGroup::Adapter),
          parameter_digest(model, ParamGroup::Router)};
}

namespace detail {

inline std::string encode_blob(const ad::Shape& shape, std::span<const float> values) {
  std::string out(kBlobMagic, sizeof kBlobMagic);
  auto put = [&](auto v) {
    static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
    out.append(reinterpret_cast<const char*>(&v), sizeof v);
  };
  put(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put(static_cast<std::uint64_t>(d));
  out.append(reinterpret_cast<const char*>(values.data()), values.size_bytes());
  return out;
}

inline std::vector<float> decode_blob(const std::string& bytes, const ad::Shape& expected, const std::string& name) {
  std::size_t pos = 0;
  auto take = [&](void* dst, std::size_t n) {
    if (pos + n > bytes.size()) throw CorruptionError("checkpoint blob for " + name + " is truncated");
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  };
  char magic[8];
  take(magic, sizeof magic);
  if (std::memcmp(magic, kBlobMagic, sizeof magic) != 0) throw CorruptionError("bad blob magic for " + name);
  std::uint32_t rank = 0;
  take(&rank, sizeof rank);
  ad::Shape shape(rank);
  for (auto& d : shape) {
    std::uint64_t v = 0;
    take(&v, sizeof v);
    d = static_cast<std::size_t>(v);
  }
  if (shape != expected) {
    throw ShapeMismatchError("checkpoint parameter " + name + " has shape " + ad::shape_string(shape) +
                             " but the model expects " + ad::shape_string(expected));
  }
  std::vector<float> values(ad::shape_numel(shape));
  take(values.data(), values.size() * sizeof(float));
  if (pos != bytes.size()) throw CorruptionError("checkpoint blob for " + name + " has trailing bytes");
  return values;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw CorruptionError("checkpoint file missing: " + p.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, std::string_view bytes) {
  std::ofstream os(p, std::ios::binary);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing " + p.string());
}

inline std::string blob_file_name(const std::string& param) {
  std::string f = param;
  for (auto& c : f)
    if (c == '/' || c == '\\') c = '_';
  return f + ".bin";
}

}  // namespace detail

struct CheckpointInfo {
  TrainingConfig config;
  std::string stage;
  std::size_t step = 0;
  Json manifest;
};

/// Writes the float32 model and config snapshot to `dir`, replacing it.
inline void save_checkpoint(PersonaModel<float>& model, const TrainingConfig& config, const std::string& stage,
                            std::size_t step, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  Json params = Json::array();
  model.for_each_parameter([&](const std::string& name, ad::Tensor<float>& t) {
    const auto blob = detail::encode_blob(t.shape(), t.value());
    const auto file = detail::blob_file_name(name);
    detail::write_file(tmp / file, blob);
    params.push_back(Json{{"name", name}, {"shape", t.shape()}, {"file", file}, {"sha256", sha256_hex(blob)}});
  });
  const auto d = digests(model);
  Json manifest{{"format", "persona-moe-checkpoint"},
                {"format_version", kCheckpointFormatVersion},
                {"stage", stage},
                {"step", step},
                {"config", config_to_json(config)},
                {"digests", {{"base", d.base}, {"adapters", d.adapters}, {"router", d.router}}},
                {"parameters", params}};
  manifest["manifest_sha256"] = sha256_hex(manifest.dump());
  detail::write_file(tmp / "manifest.json", manifest.dump(2) + "\n");
  const fs::path old = dir.string() + ".old";
  fs::remove_all(old);
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(tmp, dir);
  fs::remove_all(old);
}

inline Json read_manifest(const std::filesystem::path& dir) {
  Json manifest;
  try {
    manifest = Json::parse(detail::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptionError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "persona-moe-checkpoint") throw CorruptionError("not a persona-moe checkpoint");
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw VersionMismatchError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                               std::to_string(kCheckpointFormatVersion) + ")");
  }
  if (!manifest.contains("manifest_sha256")) throw CorruptionError("checkpoint manifest lacks its digest");
  Json body = manifest;
  body.erase("manifest_sha256");
  if (sha256_hex(body.dump()) != manifest["manifest_sha256"].get<std::string>()) {
    throw CorruptionError("checkpoint manifest digest mismatch");
  }
  return manifest;
}

/// Loads into an existing model, which must have the same parameter names
/// and shapes. Every blob is verified before any value is copied.
inline CheckpointInfo load_checkpoint_into(const std::filesystem::path& dir, PersonaModel<float>& model) {
  const Json manifest = read_manifest(dir);
  std::map<std::string, Json> entries;
  for (const auto& p : manifest.at("parameters")) entries[p.at("name").get<std::string>()] = p;
  std::vector<std::pair<ad::Tensor<float>, std::vector<float>>> staged;
  model.for_each_parameter([&](const std::string& name, ad::Tensor<float>& t) {
    auto it = entries.find(name);
    if (it == entries.end()) throw ShapeMismatchError("checkpoint has no parameter " + name);
    const auto bytes = detail::read_file(dir / it->second.at("file").get<std::string>());
    if (sha256_hex(bytes) != it->second.at("sha256").get<std::string>()) {
      throw CorruptionError("checkpoint blob digest mismatch for " + name);
    }
    staged.emplace_back(t, detail::decode_blob(bytes, t.shape(), name));
    entries.erase(it);
  });
  if (!entries.empty()) throw ShapeMismatchError("checkpoint has extra parameter " + entries.begin()->first);
  for (auto& [t, values] : staged) std::copy(values.begin(), values.end(), t.mutable_value().begin());
  CheckpointInfo info;
  info.config = config_from_json(manifest.at("config"));
  info.stage = manifest.at("stage").get<std::string>();
  info.step = manifest.at("step").get<std::size_t>();
  info.manifest = manifest;
  return info;
}

/// Rebuilds the model from the manifest's config snapshot, then loads it.
inline std::pair<PersonaModel<float>, CheckpointInfo> load_checkpoint(const std::filesystem::path& dir) {
  const Json manifest = read_manifest(dir);
  const auto cfg = config_from_json(manifest.at("config"));
  auto model = PersonaModel<float>::init(cfg.model, cfg.seed);
  auto info = load_checkpoint_into(dir, model);
  return {std::move(model), std::move(info)};
}

}  // namespace persona::training
