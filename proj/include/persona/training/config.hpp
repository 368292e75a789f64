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
#include <string>

#include <json.hpp>

#include "persona/model.hpp"

namespace persona::training {

using Json = nlohmann::ordered_json;

struct Stage1Config {
  std::size_t batch = 32;
  std::size_t grad_accum = 8;
  std::size_t steps = 1000;
  double lr = 1e-4;
};

/// grad_accum > 1 sums the losses of that many same-p batches into one
/// optimizer step; every batch stays pure.
struct Stage2Config {
  std::size_t batch = 64;
  std::size_t steps = 500;
  double lr = 1e-4;
  std::size_t grad_accum = 1;
};

struct Stage3Config {
  std::size_t batch = 32;
  std::size_t steps = 300;
  double lr = 1e-5;
  std::size_t grad_accum = 1;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Every knob of the three-stage pipeline. Defaults are the full-scale
/// values; configs/desk.json holds the reduced desk-scale run.
struct TrainingConfig {
  ModelConfig model;
  Stage1Config stage1;
  Stage2Config stage2;
  Stage3Config stage3;
  AdamConfig adam;
  double gamma = 0.2;
  /// Per-sequence LM reduction: "sum" over response tokens, or "mean".
  /// Batches always average over sequences.
  std::string lm_loss_reduction = "sum";
  double heldout_fraction = 0.1;
  double divergence_factor = 10.0;
  std::uint64_t seed = 0;

  ad::Reduction lm_reduction() const {
    return lm_loss_reduction == "mean" ? ad::Reduction::Mean : ad::Reduction::Sum;
  }

  void validate() const {
    model.validate();
    auto positive = [](double v, const char* what) {
      if (!(v > 0)) throw ParameterError(std::string("config: ") + what + " must be positive");
    };
    positive(static_cast<double>(stage1.batch), "stage1.batch");
    positive(static_cast<double>(stage1.grad_accum), "stage1.grad_accum");
    positive(stage1.lr, "stage1.lr");
    positive(static_cast<double>(stage2.batch), "stage2.batch");
    positive(stage2.lr, "stage2.lr");
    positive(static_cast<double>(stage2.grad_accum), "stage2.grad_accum");
    positive(static_cast<double>(stage3.grad_accum), "stage3.grad_accum");
    positive(static_cast<double>(stage3.batch), "stage3.batch");
    positive(stage3.lr, "stage3.lr");
    positive(adam.eps, "adam.eps");
    positive(divergence_factor, "divergence_factor");
    if (stage2.batch < 2 || stage3.batch < 2) throw ParameterError("config: stage 2/3 batches need at least 2 records");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1)) {
      throw ParameterError("config: adam betas must lie in [0, 1)");
    }
    if (gamma < 0) throw ParameterError("config: gamma must be non-negative");
    if (lm_loss_reduction != "sum" && lm_loss_reduction != "mean") {
      throw ParameterError("config: lm_loss_reduction must be \"sum\" or \"mean\"");
    }
    if (!(heldout_fraction > 0 && heldout_fraction < 1)) throw ParameterError("config: heldout_fraction in (0, 1)");
  }
};

namespace detail {

inline Json transformer_to_json(const lm::TransformerConfig& c) {
  return Json{{"vocab", c.vocab},   {"width", c.width},             {"layers", c.layers},
              {"heads", c.heads},   {"max_context", c.max_context}, {"ffn_multiplier", c.ffn_multiplier}};
}

/// Visits the keys of `j`, rejecting any that `read` does not consume.
template <class F>
void read_object(const Json& j, const std::string& where, F&& read) {
  if (!j.is_object()) throw InputError("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!read(it.key(), *it)) throw InputError("config: unknown key '" + where + "." + it.key() + "'");
  }
}

inline lm::TransformerConfig transformer_from_json(const Json& j, const std::string& where,
                                                   lm::TransformerConfig c) {
  read_object(j, where, [&](const std::string& k, const Json& v) {
    if (k == "vocab") c.vocab = v.get<std::size_t>();
    else if (k == "width") c.width = v.get<std::size_t>();
    else if (k == "layers") c.layers = v.get<std::size_t>();
    else if (k == "heads") c.heads = v.get<std::size_t>();
    else if (k == "max_context") c.max_context = v.get<std::size_t>();
    else if (k == "ffn_multiplier") c.ffn_multiplier = v.get<std::size_t>();
    else return false;
    return true;
  });
  return c;
}

}  // namespace detail

inline Json config_to_json(const TrainingConfig& c) {
  return Json{
      {"model",
       {{"base", detail::transformer_to_json(c.model.base)},
        {"encoder", detail::transformer_to_json(c.model.encoder)},
        {"lora", {{"rank", c.model.lora.rank}, {"alpha", c.model.lora.alpha}}},
        {"router", {{"tau", c.model.router.tau}, {"margin", c.model.router.margin}, {"beta", c.model.router.beta}}}}},
      {"stage1", {{"batch", c.stage1.batch}, {"grad_accum", c.stage1.grad_accum}, {"steps", c.stage1.steps},
                  {"lr", c.stage1.lr}}},
      {"stage2", {{"batch", c.stage2.batch}, {"grad_accum", c.stage2.grad_accum}, {"steps", c.stage2.steps},
                  {"lr", c.stage2.lr}}},
      {"stage3", {{"batch", c.stage3.batch}, {"grad_accum", c.stage3.grad_accum}, {"steps", c.stage3.steps},
                  {"lr", c.stage3.lr}}},
      {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps},
                {"weight_decay", c.adam.weight_decay}}},
      {"gamma", c.gamma},
      {"lm_loss_reduction", c.lm_loss_reduction},
      {"heldout_fraction", c.heldout_fraction},
      {"divergence_factor", c.divergence_factor},
      {"seed", c.seed},
  };
}

/// Keys absent from `j` keep their defaults; unknown keys are errors.
inline TrainingConfig config_from_json(const Json& j) {
  using detail::read_object;
  TrainingConfig c;
  try {
    read_object(j, "", [&](const std::string& k, const Json& v) {
      if (k == "model") {
        read_object(v, "model", [&](const std::string& mk, const Json& mv) {
          if (mk == "base") c.model.base = detail::transformer_from_json(mv, "model.base", c.model.base);
          else if (mk == "encoder") c.model.encoder = detail::transformer_from_json(mv, "model.encoder", c.model.encoder);
          else if (mk == "lora") {
            read_object(mv, "model.lora", [&](const std::string& lk, const Json& lv) {
              if (lk == "rank") c.model.lora.rank = lv.get<std::size_t>();
              else if (lk == "alpha") c.model.lora.alpha = lv.get<double>();
              else return false;
              return true;
            });
          } else if (mk == "router") {
            read_object(mv, "model.router", [&](const std::string& rk, const Json& rv) {
              if (rk == "tau") c.model.router.tau = rv.get<double>();
              else if (rk == "margin") c.model.router.margin = rv.get<double>();
              else if (rk == "beta") c.model.router.beta = rv.get<double>();
              else return false;
              return true;
            });
          } else return false;
          return true;
        });
      } else if (k == "stage1") {
        read_object(v, "stage1", [&](const std::string& sk, const Json& sv) {
          if (sk == "batch") c.stage1.batch = sv.get<std::size_t>();
          else if (sk == "grad_accum") c.stage1.grad_accum = sv.get<std::size_t>();
          else if (sk == "steps") c.stage1.steps = sv.get<std::size_t>();
          else if (sk == "lr") c.stage1.lr = sv.get<double>();
          else return false;
          return true;
        });
      } else if (k == "stage2" || k == "stage3") {
        std::size_t& batch = k == "stage2" ? c.stage2.batch : c.stage3.batch;
        std::size_t& steps = k == "stage2" ? c.stage2.steps : c.stage3.steps;
        double& lr = k == "stage2" ? c.stage2.lr : c.stage3.lr;
        std::size_t& accum = k == "stage2" ? c.stage2.grad_accum : c.stage3.grad_accum;
        read_object(v, k, [&](const std::string& sk, const Json& sv) {
          if (sk == "batch") batch = sv.get<std::size_t>();
          else if (sk == "grad_accum") accum = sv.get<std::size_t>();
          else if (sk == "steps") steps = sv.get<std::size_t>();
          else if (sk == "lr") lr = sv.get<double>();
          else return false;
          return true;
        });
      } else if (k == "adam") {
        read_object(v, "adam", [&](const std::string& ak, const Json& av) {
          if (ak == "beta1") c.adam.beta1 = av.get<double>();
          else if (ak == "beta2") c.adam.beta2 = av.get<double>();
          else if (ak == "eps") c.adam.eps = av.get<double>();
          else if (ak == "weight_decay") c.adam.weight_decay = av.get<double>();
          else return false;
          return true;
        });
      } else if (k == "gamma") c.gamma = v.get<double>();
      else if (k == "lm_loss_reduction") c.lm_loss_reduction = v.get<std::string>();
      else if (k == "heldout_fraction") c.heldout_fraction = v.get<double>();
      else if (k == "divergence_factor") c.divergence_factor = v.get<double>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else return false;
      return true;
    });
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline TrainingConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open config " + path.string());
  try {
    return config_from_json(Json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("config " + path.string() + ": " + e.what());
  }
}

inline void save_config(const TrainingConfig& c, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write config " + path.string());
  os << config_to_json(c).dump(2) << '\n';
}

}  // namespace persona::training
