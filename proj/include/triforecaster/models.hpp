#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "triforecaster/config.hpp"
#include "triforecaster/ct_specializer.hpp"
#include "triforecaster/fusion.hpp"
#include "triforecaster/nn.hpp"
#include "triforecaster/region_mixer.hpp"

namespace triforecaster {

/// Input geometry shared by every model of a dataset.
struct ModelDims {
  std::size_t regions = 0;
  std::size_t lookback = 0;
  std::size_t horizon = 0;
  std::size_t history_channels = 0;
  std::size_t future_channels = 0;
};

struct ForwardOutput {
  Tensor prediction;              // [N, H, 1]
  std::vector<Tensor> contexts;   // context-stage outputs per CTSpecializer layer, [N, H, d]
};

/// Common interface of TriForecaster and the baselines.
class Forecaster {
 public:
  virtual ~Forecaster() = default;

  /// history [N, L, C], future [N, H, Cz] (undefined if Cz == 0); all N samples
  /// belong to `region`.
  virtual ForwardOutput forward(const Tensor& history, const Tensor& future, std::size_t region,
                                const ForwardContext& ctx) const = 0;

  virtual ParamList parameters() const = 0;
  /// Parameters that a batch of `region` can influence. Defaults to all.
  virtual ParamList parameters_for_region(std::size_t /*region*/) const { return parameters(); }

  virtual std::size_t regions() const = 0;
  virtual std::string_view kind() const = 0;
  /// True if forward() emits context-stage outputs usable by the contrastive loss.
  virtual bool has_contexts() const { return false; }
  /// True if each region is an independent model.
  virtual bool independent_regions() const { return false; }
};

class TriForecasterModel : public Forecaster {
 public:
  TriForecasterModel(const TrainConfig& cfg, const ModelDims& dims, Rng& rng);

  ForwardOutput forward(const Tensor& history, const Tensor& future, std::size_t region,
                        const ForwardContext& ctx) const override;
  ParamList parameters() const override;
  std::size_t regions() const override { return heads_.size(); }
  std::string_view kind() const override { return "triforecaster"; }
  bool has_contexts() const override { return !ct_layers_.empty() && ct_layers_.front().context.has_value(); }

  Embedding& embedding() { return embedding_; }
  RegionMixerStack& region_stack() { return region_stack_; }
  std::vector<CTSpecializerLayer>& ct_layers() { return ct_layers_; }
  std::vector<Linear>& heads() { return heads_; }

 private:
  Embedding embedding_;
  RegionMixerStack region_stack_;
  std::vector<CTSpecializerLayer> ct_layers_;
  std::vector<Linear> heads_;  // phi_t: d -> 1 per timestep
};

/// Shared TSMixer backbone with region-specific two-layer MLP heads.
class MtlBaseline : public Forecaster {
 public:
  MtlBaseline(const TrainConfig& cfg, const ModelDims& dims, Rng& rng);

  ForwardOutput forward(const Tensor& history, const Tensor& future, std::size_t region,
                        const ForwardContext& ctx) const override;
  ParamList parameters() const override;
  std::size_t regions() const override { return heads_.size(); }
  std::string_view kind() const override { return "mtl"; }

 private:
  Embedding embedding_;
  TSMixer backbone_;
  std::vector<Mlp> heads_;
};

/// One fully independent embedding + TSMixer + MLP head per region.
class StlBaseline : public Forecaster {
 public:
  StlBaseline(const TrainConfig& cfg, const ModelDims& dims, Rng& rng);

  ForwardOutput forward(const Tensor& history, const Tensor& future, std::size_t region,
                        const ForwardContext& ctx) const override;
  ParamList parameters() const override;
  ParamList parameters_for_region(std::size_t region) const override;
  std::size_t regions() const override { return members_.size(); }
  std::string_view kind() const override { return "stl"; }
  bool independent_regions() const override { return true; }

 private:
  struct Member {
    Embedding embedding;
    TSMixer backbone;
    Mlp head;
  };
  std::vector<Member> members_;
};

/// Builds the configured model; initial parameters depend only on (cfg, dims).
std::unique_ptr<Forecaster> build_model(const TrainConfig& cfg, const ModelDims& dims);

std::size_t param_count(const Forecaster& model);

using ParamSnapshot = std::vector<std::vector<double>>;
ParamSnapshot snapshot(const ParamList& params);
void restore(const ParamList& params, const ParamSnapshot& snap);

struct CheckpointMeta {
  std::string config_hash;
  std::uint64_t seed = 0;
};

/// Writes `<stem>.json` (manifest: name, shape, dtype "f64", byte_offset per
/// parameter plus config hash and seed) and `<stem>.bin` (little-endian
/// float64 values concatenated in manifest order).
void save_checkpoint(const std::filesystem::path& stem, const ParamList& params, const CheckpointMeta& meta);

/// Loads values into `params`, which must match the manifest's names and shapes.
CheckpointMeta load_checkpoint(const std::filesystem::path& stem, const ParamList& params);

}  // namespace triforecaster
