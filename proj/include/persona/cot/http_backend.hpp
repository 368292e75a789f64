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

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <string>
#include <thread>

#include <httplib.h>
// <resolv.h> defines _res, which collides with Eigen parameter names.
#ifdef _res
#undef _res
#endif
#include <json.hpp>

#include "persona/cot/backend.hpp"
#include "persona/cot/prompts.hpp"

namespace persona::cot {

struct HttpBackendConfig {
  std::string endpoint;  // http://host[:port]/path
  std::string model;
  double timeout_seconds = 60.0;
  int max_retries = 3;
  int backoff_initial_ms = 500;
  int backoff_cap_ms = 8000;
  bool chat = true;  // OpenAI-style "messages" body; false sends "prompt"

  /// Overrides from PERSONA_LLM_{ENDPOINT,MODEL,TIMEOUT,MAX_RETRIES}.
  void apply_environment() {
    if (const char* v = std::getenv("PERSONA_LLM_ENDPOINT")) endpoint = v;
    if (const char* v = std::getenv("PERSONA_LLM_MODEL")) model = v;
    if (const char* v = std::getenv("PERSONA_LLM_TIMEOUT")) timeout_seconds = std::stod(v);
    if (const char* v = std::getenv("PERSONA_LLM_MAX_RETRIES")) max_retries = std::stoi(v);
  }

  /// Reads the keys above from a JSON object; credentials are not accepted here.
  static HttpBackendConfig from_json(const nlohmann::json& j) {
    HttpBackendConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      if (k == "endpoint") c.endpoint = it->get<std::string>();
      else if (k == "model") c.model = it->get<std::string>();
      else if (k == "timeout_seconds") c.timeout_seconds = it->get<double>();
      else if (k == "max_retries") c.max_retries = it->get<int>();
      else if (k == "backoff_initial_ms") c.backoff_initial_ms = it->get<int>();
      else if (k == "backoff_cap_ms") c.backoff_cap_ms = it->get<int>();
      else if (k == "chat") c.chat = it->get<bool>();
      else throw InputError("http backend config: unknown key '" + k + "'");
    }
    return c;
  }

  void validate() const {
    if (!endpoint.starts_with("http://")) throw ParameterError("http backend: endpoint must start with http://");
    if (!(timeout_seconds > 0)) throw ParameterError("http backend: timeout must be positive");
    if (max_retries < 0) throw ParameterError("http backend: max_retries must be >= 0");
  }
};

/// Sends each synthesis step as one POST and parses the sectioned reply.
class HttpBackend final : public GeneratorBackend {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  explicit HttpBackend(HttpBackendConfig config, Sleeper sleeper = {})
      : config_(std::move(config)), sleeper_(std::move(sleeper)) {
    config_.validate();
    if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    const std::string rest = config_.endpoint.substr(7);
    const auto slash = rest.find('/');
    host_ = rest.substr(0, slash);
    path_ = slash == std::string::npos ? "/" : rest.substr(slash);
    if (const char* key = std::getenv("PERSONA_LLM_API_KEY")) api_key_ = key;
  }

  std::string kind() const override { return "http"; }

  SituationCues cues(std::string_view query) override {
    const auto text = complete(render_template(kCueTemplate, {{"prompt", query}}));
    return {require_section(text, "Social Cue"), require_section(text, "Task Cue")};
  }

  TraitMentions traits(std::string_view query, const SituationCues& cues) override {
    const auto text = complete(render_template(
        kTraitTemplate, {{"prompt", query}, {"social_cue", cues.social}, {"task_cue", cues.task}}));
    const auto social = find_section(text, "Social Traits");
    const auto task = find_section(text, "Task Traits");
    if (!social || !task) throw ParseError("model output lacks the ##Social Traits/##Task Traits sections", text);
    return {split_trait_list(*social), split_trait_list(*task), {}};
  }

  GeneratedResponse respond(std::string_view query, const SituationCues& cues, const std::vector<Pole>& social,
                            const std::vector<Pole>& task) override {
    const auto social_names = join_display_names(social);
    const auto task_names = join_display_names(task);
    const auto text = complete(render_template(kResponseTemplate, {{"prompt", query},
                                                                   {"social_cue", cues.social},
                                                                   {"task_cue", cues.task},
                                                                   {"social_traits", social_names},
                                                                   {"task_traits", task_names}}));
    return {require_section(text, "Response"), require_section(text, "Persona Behavior Rationale")};
  }

  /// One completion with retries on connection errors, 429 and 5xx.
  std::string complete(const std::string& prompt) {
    nlohmann::json body;
    body["model"] = config_.model;
    if (config_.chat) {
      body["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", prompt}}});
    } else {
      body["prompt"] = prompt;
    }
    const std::string payload = body.dump();
    std::string last_error;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
      if (attempt > 0) {
        const long long delay = std::min<long long>(config_.backoff_cap_ms,
                                                    static_cast<long long>(config_.backoff_initial_ms) << (attempt - 1));
        sleeper_(std::chrono::milliseconds(delay));
      }
      httplib::Client client("http://" + host_);
      const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
      client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      httplib::Headers headers;
      if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
      auto res = client.Post(path_, headers, payload, "application/json");
      if (!res) {
        last_error = "connection failed: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) throw TransportError("http backend: HTTP " + std::to_string(res->status));
      return extract_text(res->body);
    }
    throw TransportError("http backend: giving up after " + std::to_string(config_.max_retries + 1) +
                         " attempts (" + last_error + ")");
  }

  /// Accepts {"text"}, {"choices":[{"text"}]} or {"choices":[{"message":{"content"}}]}.
  static std::string extract_text(const std::string& body) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      throw ParseError("http backend: response body is not JSON", body);
    }
    if (j.contains("text") && j["text"].is_string()) return j["text"].get<std::string>();
    if (j.contains("choices") && j["choices"].is_array() && !j["choices"].empty()) {
      const auto& c = j["choices"][0];
      if (c.contains("text") && c["text"].is_string()) return c["text"].get<std::string>();
      if (c.contains("message") && c["message"].contains("content") && c["message"]["content"].is_string()) {
        return c["message"]["content"].get<std::string>();
      }
    }
    throw ParseError("http backend: no completion text in response", body);
  }

 private:
  HttpBackendConfig config_;
  Sleeper sleeper_;
  std::string host_;
  std::string path_;
  std::string api_key_;
};

}  // namespace persona::cot
