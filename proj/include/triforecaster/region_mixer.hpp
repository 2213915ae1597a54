#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "triforecaster/fusion.hpp"
#include "triforecaster/nn.hpp"

namespace triforecaster {

/// T region experts plus one shared expert, fused per region through
/// affinity-routed stochastic pooling.
class RegionMixerLayer {
 public:
  static RegionMixerLayer init(std::size_t regions, std::size_t horizon, std::size_t latent,
                               std::size_t expert_blocks, Rng& rng);

  std::size_t regions() const { return region_experts_.size(); }

  /// Fused update for a region-homogeneous batch [N, H, d]; the residual is
  /// added by the caller (see RegionMixerStack).
  Tensor mix(const Tensor& batch, std::size_t region, const ForwardContext& ctx) const;

  /// mix(batch) + batch.
  Tensor forward(const Tensor& batch, std::size_t region, const ForwardContext& ctx) const;

  void collect(const std::string& prefix, ParamList& out) const;

  std::vector<TSMixer>& region_experts() { return region_experts_; }
  TSMixer& shared_expert() { return shared_expert_; }
  FusionParams& fusion_params() { return fusion_; }

 private:
  std::vector<TSMixer> region_experts_;
  TSMixer shared_expert_;
  FusionParams fusion_;
};

class RegionMixerStack {
 public:
  static RegionMixerStack init(std::size_t layers, std::size_t regions, std::size_t horizon, std::size_t latent,
                               std::size_t expert_blocks, Rng& rng);

  std::size_t depth() const { return layers_.size(); }
  Tensor forward(const Tensor& batch, std::size_t region, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;

  std::vector<RegionMixerLayer>& layers() { return layers_; }

 private:
  std::vector<RegionMixerLayer> layers_;
};

}  // namespace triforecaster
