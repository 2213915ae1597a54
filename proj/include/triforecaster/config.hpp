#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

namespace triforecaster {

enum class ModelKind { kTriForecaster, kMtl, kStl };
enum class Ablation { kNone, kRegionMixer, kContextMoE, kTimeMoE };
/// Which CTSpecializer layers feed the contrastive loss.
enum class ContrastiveSource { kLast, kMeanOverLayers };
/// Whether gradients flow through the positive/negative forward pass.
enum class ContrastiveKeys { kLive, kDetached };
/// Pooling used at evaluation time.
enum class EvalPooling { kExpectation, kSample };

std::string_view to_string(ModelKind kind);
std::string_view to_string(Ablation ablation);
ModelKind parse_model_kind(std::string_view text);
Ablation parse_ablation(std::string_view text);

/// Every hyperparameter of a run. Serialized as a flat JSON object.
struct TrainConfig {
  ModelKind model = ModelKind::kTriForecaster;
  Ablation ablation = Ablation::kNone;

  // Optimization
  double learning_rate = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 200;
  std::size_t patience = 50;
  std::uint64_t seed = 0;

  // Architecture
  std::size_t latent_dim = 16;
  std::size_t region_layers = 1;    // N_r
  std::size_t ct_layers = 2;        // N_l, "moe_blocks"
  std::size_t context_experts = 4;  // N_c, "num_e_per_moe"
  std::size_t time_experts = 4;     // N_time, "num_e_per_moe"
  std::size_t expert_blocks = 2;    // TSMixer blocks per RegionMixer expert
  std::size_t moe_hidden = 0;       // hidden width of MoE expert MLPs; 0 = input width
  std::size_t baseline_blocks = 6;  // TSMixer blocks of the MTL/STL backbones

  // Contrastive objective
  double alpha = 0.1;
  double tau = 0.1;
  std::size_t negatives = 4;
  double negative_fraction = 0.25;  // negatives come from this farthest fraction of the pool
  ContrastiveSource contrastive_source = ContrastiveSource::kLast;
  ContrastiveKeys contrastive_keys = ContrastiveKeys::kLive;

  // Data handling
  std::size_t train_stride = 1;
  std::size_t eval_stride = 1;
  EvalPooling eval_pooling = EvalPooling::kExpectation;

  /// Throws ConfigError on out-of-range values.
  void validate() const;

  /// Stable 64-bit FNV-1a of the canonical JSON dump, as 16 hex digits.
  std::string hash() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig config_from_json(const nlohmann::json& j);
TrainConfig load_config(const std::filesystem::path& path);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace triforecaster
