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

// persona_cli: synthesize | train | infer | eval

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "persona/cot/backend.hpp"
#include "persona/cot/dataset.hpp"
#include "persona/cot/http_backend.hpp"
#include "persona/cot/scenarios.hpp"
#include "persona/eval/suite.hpp"
#include "persona/training/checkpoint.hpp"
#include "persona/training/pipeline.hpp"

namespace fs = std::filesystem;
using namespace persona;
using Json = nlohmann::ordered_json;

namespace {

std::string slurp(std::istream& is) {
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> load_queries(const std::string& spec, std::uint64_t seed) {
  if (spec.starts_with("builtin:")) {
    const auto n = std::stoull(spec.substr(8));
    if (n == 0) throw UsageError("--queries builtin:N needs N >= 1");
    return cot::builtin_queries(n, seed);
  }
  std::ifstream in(spec);
  if (!in) throw InputError("cannot open query file " + spec);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

void write_json(const fs::path& path, const Json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << j.dump(2, ' ', false, Json::error_handler_t::replace) << '\n';
}

std::string config_digest(const training::TrainingConfig& cfg) {
  return training::sha256_hex(training::config_to_json(cfg).dump());
}

// --- synthesize -----------------------------------------------------------

struct SynthesizeArgs {
  std::string backend = "synthetic";
  std::string queries;
  std::uint64_t seed = 0;
  std::string out;
  std::string stats;
  std::string backend_config;
};

int run_synthesize(const SynthesizeArgs& a) {
  const auto queries = load_queries(a.queries, a.seed);
  std::unique_ptr<cot::GeneratorBackend> backend;
  if (a.backend == "synthetic") {
    backend = std::make_unique<cot::DeterministicBackend>(a.seed);
  } else {
    cot::HttpBackendConfig hc;
    if (!a.backend_config.empty()) {
      std::ifstream in(a.backend_config);
      if (!in) throw InputError("cannot open backend config " + a.backend_config);
      hc = cot::HttpBackendConfig::from_json(nlohmann::json::parse(in));
    }
    hc.apply_environment();
    hc.validate();
    backend = std::make_unique<cot::HttpBackend>(hc);
  }
  const auto result = cot::synthesize_dataset(*backend, queries, a.seed);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  cot::write_jsonl(fs::path(a.out), result.records);
  if (!a.stats.empty()) {
    Json j = result.stats.to_json();
    j["rejections"] = Json::array();
    for (const auto& r : result.rejections)
      j["rejections"].push_back(Json{{"index", r.index}, {"reason", r.reason}, {"detail", r.detail}});
    write_json(a.stats, j);
  }
  std::cerr << "synthesized " << result.stats.accepted << " of " << result.stats.input << " queries ("
            << result.stats.rejected() << " rejected)\n";
  return 0;
}

// --- train ----------------------------------------------------------------

struct TrainArgs {
  std::string stage = "all";
  std::string data;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  auto cfg = a.config.empty() ? training::TrainingConfig{} : training::load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  const auto data = cot::read_jsonl(fs::path(a.data));
  if (data.empty()) throw InputError("training data " + a.data + " holds no records");

  std::vector<int> stages;
  if (a.stage == "all") stages = {1, 2, 3};
  else stages = {std::stoi(a.stage)};

  const fs::path out(a.out);
  auto model = PersonaModel<float>::init(cfg.model, cfg.seed);
  if (stages.front() > 1) {
    const auto prev = out / ("stage" + std::to_string(stages.front() - 1));
    if (!fs::exists(prev / "manifest.json")) {
      throw UsageError("stage " + std::to_string(stages.front()) + " needs the checkpoint " + prev.string());
    }
    const auto info = training::load_checkpoint_into(prev, model);
    if (training::config_to_json(info.config)["model"] != training::config_to_json(cfg)["model"]) {
      throw UsageError("model config of " + prev.string() + " differs from the one given");
    }
  }
  training::PipelineOptions opt;
  opt.out = out;
  opt.log = &std::cerr;
  const auto report = training::run_pipeline(model, data, cfg, stages, opt);
  std::cerr << "done in " << report.seconds << " s; checkpoints in " << out.string() << "\n";
  return 0;
}

// --- infer ----------------------------------------------------------------

struct InferArgs {
  std::string ckpt;
  std::string query;
  bool show_weights = false;
  bool greedy = false;
  std::optional<double> temp;
  std::uint64_t seed = 0;
  std::size_t max_new = 64;
};

int run_infer(const InferArgs& a) {
  const auto [model, info] = training::load_checkpoint(a.ckpt);
  std::string query = a.query;
  if (query == "-") {
    query = slurp(std::cin);
    while (!query.empty() && (query.back() == '\n' || query.back() == '\r')) query.pop_back();
  }
  if (a.greedy && a.temp) throw UsageError("--greedy and --temp are exclusive");
  const auto params = a.temp ? lm::DecodeParams::sample(*a.temp, a.seed, a.max_new) : lm::DecodeParams::greedy(a.max_new);
  const auto r = eval::infer(model, query, params);
  if (a.show_weights) {
    std::cout << std::fixed << std::setprecision(6);
    for (std::size_t k = 0; k < kNumPoles; ++k)
      std::cout << std::left << std::setw(24) << kPoleNames[k] << r.weights.weights[k] << '\n';
    std::cout << std::left << std::setw(24) << "sum" << r.weights.sum() << '\n';
  }
  std::cout << r.response << '\n';
  return 0;
}

// --- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string kind;
  std::string ckpt;
  std::string data;
  std::string report;
  std::size_t limit = 100;
  std::size_t max_new = 48;
};

int run_eval(const EvalArgs& a) {
  auto [model, info] = training::load_checkpoint(a.ckpt);
  const auto data = cot::read_jsonl(fs::path(a.data));
  Json report{{"kind", a.kind},
              {"checkpoint", a.ckpt},
              {"stage", info.stage},
              {"config_sha256", config_digest(info.config)},
              {"records", data.size()}};
  if (a.kind == "route") {
    const auto r = eval::eval_routing(model, data);
    report["result"] = r.to_json(true);
    std::cout << "routing accuracy " << r.accuracy << " over " << r.records.size() << " records\n";
  } else if (a.kind == "probe") {
    const auto untrained = PersonaModel<float>::init(info.config.model, info.config.seed);
    eval::ProbeOptions po;
    po.seed = info.config.seed;
    const auto r = eval::probe_model(model, untrained, data, po);
    report["result"] = r.to_json();
    std::cout << "probe accuracy trained " << r.trained.accuracy << " vs untrained " << r.baseline.accuracy << "\n";
  } else {
    const auto subset = eval::balanced_subset(data, a.limit);
    if (subset.empty()) std::cerr << "warning: no records to evaluate; the report is empty\n";
    const auto r = eval::expression_eval(model, subset, lm::DecodeParams::greedy(a.max_new));
    report["result"] = r.to_json();
    std::cout << "active-marker rate " << r.active_rate() << " over " << r.generations
              << " generations; max inactive excess " << r.max_inactive_excess() << "\n";
  }
  write_json(a.report, report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Persona mixture-of-experts toolkit"};
  app.require_subcommand(1);

  SynthesizeArgs sa;
  auto* syn = app.add_subcommand("synthesize", "Build a persona dataset from queries");
  syn->add_option("--backend", sa.backend)->check(CLI::IsMember({"synthetic", "http"}));
  syn->add_option("--queries", sa.queries, "query file (one per line) or builtin:N")->required();
  syn->add_option("--seed", sa.seed);
  syn->add_option("--out", sa.out, "output JSONL")->required();
  syn->add_option("--stats", sa.stats, "stats JSON");
  syn->add_option("--backend-config", sa.backend_config, "http backend JSON config");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Run training stages");
  tr->add_option("--stage", ta.stage)->check(CLI::IsMember({"1", "2", "3", "all"}));
  tr->add_option("--data", ta.data, "training JSONL")->required();
  tr->add_option("--config", ta.config, "training config JSON");
  tr->add_option("--out", ta.out, "output directory")->required();
  tr->add_option("--seed", ta.seed);

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "Route and answer one query");
  inf->add_option("--ckpt", ia.ckpt)->required();
  inf->add_option("--query", ia.query, "query text, or - for stdin")->required();
  inf->add_flag("--show-weights", ia.show_weights);
  inf->add_flag("--greedy", ia.greedy);
  inf->add_option("--temp", ia.temp)->check(CLI::PositiveNumber);
  inf->add_option("--seed", ia.seed);
  inf->add_option("--max-new", ia.max_new);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("kind", ea.kind)->required()->check(CLI::IsMember({"route", "probe", "traits"}));
  ev->add_option("--ckpt", ea.ckpt)->required();
  ev->add_option("--data", ea.data)->required();
  ev->add_option("--report", ea.report)->required();
  ev->add_option("--limit", ea.limit, "prompts for traits");
  ev->add_option("--max-new", ea.max_new);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*syn) return run_synthesize(sa);
    if (*tr) return run_train(ta);
    if (*inf) return run_infer(ia);
    return run_eval(ea);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
