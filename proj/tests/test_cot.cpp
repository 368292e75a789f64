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

#include <gtest/gtest.h>

#include <atomic>
#include <sstream>
#include <thread>

#include "persona/cot/backend.hpp"
#include "persona/cot/dataset.hpp"
#include "persona/cot/http_backend.hpp"
#include "persona/cot/scenarios.hpp"

namespace cot = persona::cot;
using persona::Pole;
using persona::TraitActivationVector;

namespace {

std::string jsonl_of(const std::vector<cot::PersonaCoTRecord>& records) {
  std::ostringstream os;
  cot::write_jsonl(os, records);
  return os.str();
}

TraitActivationVector bits(std::array<int, 10> b) { return TraitActivationVector::from_bits(b); }

const char* kWorkQuery =
    "Recently I had a shift at work canceled and I am not sure whether I will be paid for it.";
const char* kFamilyQuery = "Tell me a story about a family on a rainy weekend.";

}  // namespace

TEST(Cues, DeterministicBackendIsALookup) {
  cot::DeterministicBackend b(1);
  const auto c = cot::detect_situation_cues(b, "I want to win this, challenge my elbow argument");
  EXPECT_NE(c.task.find("[debate-request]"), std::string::npos);
  const auto w = cot::detect_situation_cues(b, kWorkQuery);
  EXPECT_NE(w.social.find("Anxious"), std::string::npos);
  EXPECT_NE(w.social.find("empathy"), std::string::npos);
  EXPECT_NE(w.task.find("workplace policies"), std::string::npos);
  EXPECT_THROW(cot::detect_situation_cues(b, ""), persona::InputError);
}

TEST(Cues, HundredBuiltinQueriesParse) {
  cot::DeterministicBackend b(1);
  for (const auto& q : cot::builtin_queries(100, 3)) EXPECT_NO_THROW(cot::detect_situation_cues(b, q));
}

TEST(Traits, WorkedExamples) {
  cot::DeterministicBackend b(1);
  const auto work = cot::identify_traits(b, kWorkQuery, cot::detect_situation_cues(b, kWorkQuery));
  EXPECT_EQ(work.p, bits({0, 0, 1, 0, 0, 0, 1, 0, 0, 1}));
  const auto family = cot::identify_traits(b, kFamilyQuery, cot::detect_situation_cues(b, kFamilyQuery));
  EXPECT_EQ(family.p, bits({1, 0, 0, 1, 0, 0, 0, 0, 0, 0}));
}

TEST(Traits, CorpusClassesAreOneHotInPoleOrder) {
  const auto classes = cot::corpus_classes();
  ASSERT_EQ(classes.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(classes[i]->poles, std::vector<Pole>{persona::pole_at(i)});
}

TEST(Response, CarriesActiveMarkerAndIsDeterministic) {
  cot::DeterministicBackend b(1);
  const std::string q = "I feel hurt, sit below with me";
  const auto cues = cot::detect_situation_cues(b, q);
  const auto traits = cot::identify_traits(b, q, cues);
  const auto r1 = cot::generate_response(b, q, cues, traits), r2 = cot::generate_response(b, q, cues, traits);
  EXPECT_EQ(r1.response, r2.response);
  EXPECT_TRUE(r1.response.starts_with(std::string(cot::pole_marker(Pole::HighAgreeableness))));
}

TEST(Synthesis, BuiltinCorpusIsFullyAccepted) {
  cot::DeterministicBackend b(11);
  const auto queries = cot::builtin_queries(2000, 11);
  const auto r = cot::synthesize_dataset(b, queries, 11);
  EXPECT_EQ(r.stats.input, 2000u);
  EXPECT_EQ(r.stats.accepted, 2000u);
  EXPECT_EQ(r.stats.rejected(), 0u);
  std::array<std::size_t, 10> per_pole{};
  for (const auto& rec : r.records)
    for (Pole p : rec.traits) ++per_pole[persona::pole_index(p)];
  for (auto n : per_pole) EXPECT_EQ(n, 200u);
}

TEST(Synthesis, ByteIdenticalJsonlAcrossRuns) {
  const auto queries = cot::builtin_queries(300, 5);
  cot::DeterministicBackend a(5), b(5);
  EXPECT_EQ(jsonl_of(cot::synthesize_dataset(a, queries, 5).records),
            jsonl_of(cot::synthesize_dataset(b, queries, 5).records));
  EXPECT_EQ(cot::builtin_queries(300, 5), queries);
  EXPECT_NE(cot::builtin_queries(300, 6), queries);
}

TEST(Synthesis, InjectedFaultsAreCountedExactly) {
  using Fault = cot::FaultInjectingBackend::Fault;
  const auto queries = cot::builtin_queries(400, 2);
  std::map<std::string, Fault> plan;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (i % 7 == 0) plan[queries[i]] = Fault::AllZero;
    else if (i % 11 == 0) plan[queries[i]] = Fault::DualPole;
    else if (i % 13 == 0) plan[queries[i]] = Fault::Malformed;
    else if (i % 17 == 0) plan[queries[i]] = Fault::Transport;
  }
  std::array<std::size_t, 5> expected{};
  for (const auto& q : queries) {
    auto it = plan.find(q);
    ++expected[static_cast<std::size_t>(it == plan.end() ? Fault::None : it->second)];
  }
  cot::FaultInjectingBackend b(std::make_shared<cot::DeterministicBackend>(2), [&](std::string_view q) {
    auto it = plan.find(std::string(q));
    return it == plan.end() ? Fault::None : it->second;
  });
  const auto r = cot::synthesize_dataset(b, queries, 2);
  EXPECT_EQ(r.stats.accepted, expected[0]);
  EXPECT_EQ(r.stats.rejected_all_zero, expected[1]);
  EXPECT_EQ(r.stats.rejected_exclusion, expected[2]);
  EXPECT_EQ(r.stats.rejected_parse, expected[3]);
  EXPECT_EQ(r.stats.rejected_transport, expected[4]);
  EXPECT_EQ(r.stats.accepted + r.stats.rejected(), queries.size());
  EXPECT_EQ(r.rejections.size(), r.stats.rejected());
  for (const auto& rej : r.rejections) {
    const auto f = plan.at(queries[rej.index]);
    EXPECT_EQ(rej.reason, f == Fault::AllZero     ? "all_zero"
                          : f == Fault::DualPole  ? "exclusion"
                          : f == Fault::Malformed ? "parse"
                                                  : "transport");
  }
}

TEST(Jsonl, RoundtripAndStrictness) {
  cot::DeterministicBackend b(1);
  const auto records = cot::synthesize_dataset(b, cot::builtin_queries(20, 1), 1).records;
  const auto text = jsonl_of(records);
  std::istringstream is(text);
  const auto back = cot::read_jsonl(is);
  EXPECT_EQ(jsonl_of(back), text);

  const std::string good =
      R"({"query":"q","social_cue":"s","task_cue":"t","traits":["high_openness"],"response":"r","p":[1,0,0,0,0,0,0,0,0,0]})";
  std::istringstream ok(good + "\n");
  EXPECT_EQ(cot::read_jsonl(ok).size(), 1u);

  auto bad = [](const std::string& line) {
    std::istringstream s(line + "\n");
    return cot::read_jsonl(s);
  };
  std::string extra = good;
  extra.insert(extra.size() - 1, R"(,"extra":1)");
  EXPECT_THROW(bad(extra), persona::ValidationError);
  {
    std::istringstream lenient(extra + "\n");
    EXPECT_EQ(cot::read_jsonl(lenient, false).size(), 1u);
  }
  EXPECT_THROW(bad(R"({"query":"q"})"), persona::ValidationError);
  EXPECT_THROW(bad("not json"), persona::ValidationError);
  EXPECT_THROW(
      bad(R"({"query":"q","social_cue":"s","task_cue":"t","traits":[],"response":"r","p":[0,0,0,0,0,0,0,0,0,0]})"),
      persona::ValidationError);
  EXPECT_THROW(
      bad(R"({"query":"q","social_cue":"s","task_cue":"t","traits":["high_openness","low_openness"],"response":"r","p":[1,1,0,0,0,0,0,0,0,0]})"),
      persona::ValidationError);
  EXPECT_THROW(
      bad(R"({"query":"q","social_cue":"s","task_cue":"t","traits":["low_openness"],"response":"r","p":[1,0,0,0,0,0,0,0,0,0]})"),
      persona::ValidationError);
  EXPECT_THROW(
      bad(R"({"query":"q","social_cue":"s","task_cue":"t","traits":["high_openness"],"response":"r","p":[2,0,0,0,0,0,0,0,0,0]})"),
      persona::ValidationError);
}

TEST(Prompts, SectionParsing) {
  const std::string out = "##Response: Hello there.\nMore text.\n##Persona Behavior Rationale: Because.\n";
  EXPECT_EQ(cot::require_section(out, "Response"), "Hello there.\nMore text.");
  EXPECT_EQ(cot::require_section(out, "Persona Behavior Rationale"), "Because.");
  EXPECT_THROW(cot::require_section("no markers", "Response"), persona::ParseError);
  try {
    cot::require_section("garbage", "Response");
  } catch (const persona::ParseError& e) {
    EXPECT_EQ(e.raw(), "garbage");
  }
  EXPECT_EQ(cot::split_trait_list("- High Openness (curious); Low Neuroticism.\nNone"),
            (std::vector<std::string>{"High Openness", "Low Neuroticism"}));
  EXPECT_TRUE(cot::split_trait_list("None").empty());
}

TEST(Prompts, TemplatesRenderEveryField) {
  const auto s = cot::render_template(cot::kResponseTemplate, {{"prompt", "Q"},
                                                               {"social_cue", "S"},
                                                               {"task_cue", "T"},
                                                               {"social_traits", "A"},
                                                               {"task_traits", "B"}});
  EXPECT_EQ(s.find('{'), std::string::npos);
  EXPECT_NE(s.find("##Persona Behavior Rationale"), std::string::npos);
}

// --- http backend against a local stub server --------------------------------------

namespace {

class StubServer {
 public:
  explicit StubServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server_.Post("/v1/completions", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/completions"; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

std::string reply(const std::string& text) { return nlohmann::json{{"choices", {{{"message", {{"content", text}}}}}}}.dump(); }

}  // namespace

TEST(HttpBackend, FullSynthesisAgainstStub) {
  StubServer server([](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    const auto prompt = body["messages"][0]["content"].get<std::string>();
    if (prompt.find("##Social Cue:...") != std::string::npos) {
      res.set_content(reply("##Social Cue: anxious and uncertain\n##Task Cue: explain workplace policies"),
                      "application/json");
    } else if (prompt.find("##Social Traits:...") != std::string::npos) {
      res.set_content(reply("##Social Traits: High Agreeableness; Low Neuroticism\n##Task Traits: High "
                            "Conscientiousness"),
                      "application/json");
    } else {
      res.set_content(reply("##Response: It will be okay.\n##Persona Behavior Rationale: Warm and calm."),
                      "application/json");
    }
  });
  cot::HttpBackendConfig cfg;
  cfg.endpoint = server.endpoint();
  cfg.model = "stub";
  cot::HttpBackend backend(cfg, [](std::chrono::milliseconds) {});
  const auto r = cot::synthesize_dataset(backend, {kWorkQuery}, 0);
  ASSERT_EQ(r.stats.accepted, 1u);
  EXPECT_EQ(r.records[0].p, bits({0, 0, 1, 0, 0, 0, 1, 0, 0, 1}));
  EXPECT_EQ(r.records[0].response, "It will be okay.");
  EXPECT_NE(r.records[0].rationale.find("Warm and calm."), std::string::npos);
}

TEST(HttpBackend, MissingResponseMarkerIsRejected) {
  StubServer server([](const httplib::Request& req, httplib::Response& res) {
    const auto prompt = nlohmann::json::parse(req.body)["messages"][0]["content"].get<std::string>();
    if (prompt.find("##Social Cue:...") != std::string::npos) {
      res.set_content(reply("##Social Cue: a\n##Task Cue: b"), "application/json");
    } else if (prompt.find("##Social Traits:...") != std::string::npos) {
      res.set_content(reply("##Social Traits: High Openness\n##Task Traits: None"), "application/json");
    } else {
      res.set_content(reply("Sure, here is my answer without sections."), "application/json");
    }
  });
  cot::HttpBackendConfig cfg;
  cfg.endpoint = server.endpoint();
  cot::HttpBackend backend(cfg, [](std::chrono::milliseconds) {});
  const auto r = cot::synthesize_dataset(backend, {"anything"}, 0);
  EXPECT_EQ(r.stats.accepted, 0u);
  EXPECT_EQ(r.stats.rejected_parse, 1u);
}

TEST(HttpBackend, RetriesWithCappedBackoff) {
  std::atomic<int> calls{0};
  StubServer server([&](const httplib::Request&, httplib::Response& res) {
    if (++calls < 3) {
      res.status = 503;
      return;
    }
    res.set_content(reply("##Social Cue: a\n##Task Cue: b"), "application/json");
  });
  cot::HttpBackendConfig cfg;
  cfg.endpoint = server.endpoint();
  cfg.backoff_initial_ms = 500;
  cfg.backoff_cap_ms = 700;
  std::vector<long long> sleeps;
  cot::HttpBackend backend(cfg, [&](std::chrono::milliseconds d) { sleeps.push_back(d.count()); });
  EXPECT_EQ(backend.cues("q").social, "a");
  EXPECT_EQ(sleeps, (std::vector<long long>{500, 700}));

  calls = -100;
  cfg.max_retries = 1;
  cot::HttpBackend impatient(cfg, [](std::chrono::milliseconds) {});
  EXPECT_THROW(impatient.cues("q"), persona::TransportError);
}

TEST(HttpBackend, ConfigValidation) {
  EXPECT_THROW(cot::HttpBackendConfig::from_json({{"api_key", "x"}}), persona::InputError);
  auto c = cot::HttpBackendConfig::from_json({{"endpoint", "https://x"}});
  EXPECT_THROW(c.validate(), persona::ParameterError);
  EXPECT_THROW(cot::HttpBackend::extract_text("{}"), persona::ParseError);
  EXPECT_EQ(cot::HttpBackend::extract_text(R"({"text":"hi"})"), "hi");
}
