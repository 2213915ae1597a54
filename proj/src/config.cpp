#include "triforecaster/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "triforecaster/errors.hpp"

namespace triforecaster {

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kTriForecaster:
      return "triforecaster";
    case ModelKind::kMtl:
      return "mtl";
    case ModelKind::kStl:
      return "stl";
  }
  return "?";
}

std::string_view to_string(Ablation ablation) {
  switch (ablation) {
    case Ablation::kNone:
      return "none";
    case Ablation::kRegionMixer:
      return "regionmixer";
    case Ablation::kContextMoE:
      return "contextmoe";
    case Ablation::kTimeMoE:
      return "timemoe";
  }
  return "?";
}

ModelKind parse_model_kind(std::string_view text) {
  if (text == "triforecaster") return ModelKind::kTriForecaster;
  if (text == "mtl") return ModelKind::kMtl;
  if (text == "stl") return ModelKind::kStl;
  throw ConfigError("unknown model '" + std::string(text) + "' (expected triforecaster|mtl|stl)");
}

Ablation parse_ablation(std::string_view text) {
  if (text == "none") return Ablation::kNone;
  if (text == "regionmixer") return Ablation::kRegionMixer;
  if (text == "contextmoe") return Ablation::kContextMoE;
  if (text == "timemoe") return Ablation::kTimeMoE;
  throw ConfigError("unknown ablation '" + std::string(text) + "' (expected none|regionmixer|contextmoe|timemoe)");
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("config: ") + what);
  };
  require(learning_rate >= 0.0, "learning_rate must be >= 0");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1 must be in [0,1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2 must be in [0,1)");
  require(adam_epsilon > 0.0, "adam_epsilon must be > 0");
  require(batch_size > 0, "batch_size must be > 0");
  require(max_epochs > 0, "max_epochs must be > 0");
  require(latent_dim > 0, "latent_dim must be > 0");
  require(context_experts > 0, "context_experts must be > 0");
  require(time_experts > 0, "time_experts must be > 0");
  require(expert_blocks > 0, "expert_blocks must be > 0");
  require(baseline_blocks > 0, "baseline_blocks must be > 0");
  require(alpha >= 0.0, "alpha must be >= 0");
  require(tau > 0.0, "tau must be > 0");
  require(negatives > 0, "negatives must be > 0");
  require(negative_fraction > 0.0 && negative_fraction <= 1.0, "negative_fraction must be in (0,1]");
  require(train_stride > 0 && eval_stride > 0, "strides must be > 0");
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string TrainConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(*this).dump())));
  return buf;
}

nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{
      {"model", std::string(to_string(c.model))},
      {"ablation", std::string(to_string(c.ablation))},
      {"learning_rate", c.learning_rate},
      {"adam_beta1", c.adam_beta1},
      {"adam_beta2", c.adam_beta2},
      {"adam_epsilon", c.adam_epsilon},
      {"batch_size", c.batch_size},
      {"max_epochs", c.max_epochs},
      {"patience", c.patience},
      {"seed", c.seed},
      {"latent_dim", c.latent_dim},
      {"region_layers", c.region_layers},
      {"ct_layers", c.ct_layers},
      {"context_experts", c.context_experts},
      {"time_experts", c.time_experts},
      {"expert_blocks", c.expert_blocks},
      {"moe_hidden", c.moe_hidden},
      {"baseline_blocks", c.baseline_blocks},
      {"alpha", c.alpha},
      {"tau", c.tau},
      {"negatives", c.negatives},
      {"negative_fraction", c.negative_fraction},
      {"contrastive_source", c.contrastive_source == ContrastiveSource::kLast ? "last" : "mean"},
      {"contrastive_keys", c.contrastive_keys == ContrastiveKeys::kLive ? "live" : "detached"},
      {"train_stride", c.train_stride},
      {"eval_stride", c.eval_stride},
      {"eval_pooling", c.eval_pooling == EvalPooling::kExpectation ? "expectation" : "sample"},
  };
}

TrainConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  TrainConfig c;
  const std::set<std::string> known = [] {
    std::set<std::string> keys;
    const nlohmann::json defaults = to_json(TrainConfig{});
    for (const auto& [k, v] : defaults.items()) keys.insert(k);
    return keys;
  }();
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("config: unknown key '" + k + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    if (j.contains("model")) c.model = parse_model_kind(j.at("model").get<std::string>());
    if (j.contains("ablation")) c.ablation = parse_ablation(j.at("ablation").get<std::string>());
    get("learning_rate", c.learning_rate);
    get("adam_beta1", c.adam_beta1);
    get("adam_beta2", c.adam_beta2);
    get("adam_epsilon", c.adam_epsilon);
    get("batch_size", c.batch_size);
    get("max_epochs", c.max_epochs);
    get("patience", c.patience);
    get("seed", c.seed);
    get("latent_dim", c.latent_dim);
    get("region_layers", c.region_layers);
    get("ct_layers", c.ct_layers);
    get("context_experts", c.context_experts);
    get("time_experts", c.time_experts);
    get("expert_blocks", c.expert_blocks);
    get("moe_hidden", c.moe_hidden);
    get("baseline_blocks", c.baseline_blocks);
    get("alpha", c.alpha);
    get("tau", c.tau);
    get("negatives", c.negatives);
    get("negative_fraction", c.negative_fraction);
    get("train_stride", c.train_stride);
    get("eval_stride", c.eval_stride);
    if (j.contains("contrastive_source")) {
      const auto s = j.at("contrastive_source").get<std::string>();
      if (s == "last") {
        c.contrastive_source = ContrastiveSource::kLast;
      } else if (s == "mean") {
        c.contrastive_source = ContrastiveSource::kMeanOverLayers;
      } else {
        throw ConfigError("config: contrastive_source must be last|mean");
      }
    }
    if (j.contains("contrastive_keys")) {
      const auto s = j.at("contrastive_keys").get<std::string>();
      if (s == "live") {
        c.contrastive_keys = ContrastiveKeys::kLive;
      } else if (s == "detached") {
        c.contrastive_keys = ContrastiveKeys::kDetached;
      } else {
        throw ConfigError("config: contrastive_keys must be live|detached");
      }
    }
    if (j.contains("eval_pooling")) {
      const auto s = j.at("eval_pooling").get<std::string>();
      if (s == "expectation") {
        c.eval_pooling = EvalPooling::kExpectation;
      } else if (s == "sample") {
        c.eval_pooling = EvalPooling::kSample;
      } else {
        throw ConfigError("config: eval_pooling must be expectation|sample");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace triforecaster
