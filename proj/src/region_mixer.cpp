#include "triforecaster/region_mixer.hpp"

#include "triforecaster/errors.hpp"

namespace triforecaster {

RegionMixerLayer RegionMixerLayer::init(std::size_t regions, std::size_t horizon, std::size_t latent,
                                        std::size_t expert_blocks, Rng& rng) {
  if (regions == 0) throw ConfigError("region mixer: at least one region is required");
  RegionMixerLayer layer;
  layer.shared_expert_ = TSMixer::init(expert_blocks, horizon, latent, rng);
  layer.region_experts_.reserve(regions);
  for (std::size_t t = 0; t < regions; ++t) {
    layer.region_experts_.push_back(TSMixer::init(expert_blocks, horizon, latent, rng));
  }
  layer.fusion_ = FusionParams::init(latent, 2, rng);
  return layer;
}

Tensor RegionMixerLayer::mix(const Tensor& batch, std::size_t region, const ForwardContext& ctx) const {
  if (region >= region_experts_.size()) {
    throw ContractError("region mixer: region " + std::to_string(region) + " out of range for " +
                        std::to_string(region_experts_.size()) + " regions");
  }
  if (batch.dim() != 3) throw DimensionError("region mixer: expected [N,H,d], got " + shape_str(batch.shape()));

  const Tensor own = region_experts_[region](batch);
  const Tensor shared = shared_expert_(batch);

  // Candidates: every expert except the region's own; the shared expert first.
  std::vector<Tensor> candidates;
  candidates.reserve(region_experts_.size());
  candidates.push_back(shared);
  for (std::size_t i = 0; i < region_experts_.size(); ++i) {
    if (i != region) candidates.push_back(region_experts_[i](batch));
  }
  const Tensor o_cat = stack(candidates);  // [T, N, H, d]
  const ProbTensor probs = ctx.route([&] { return affinity_probs(own, o_cat); });

  const Tensor direct[] = {own, shared};
  return fusion(direct, o_cat, probs, fusion_, ctx);
}

Tensor RegionMixerLayer::forward(const Tensor& batch, std::size_t region, const ForwardContext& ctx) const {
  return add(mix(batch, region, ctx), batch);
}

void RegionMixerLayer::collect(const std::string& prefix, ParamList& out) const {
  shared_expert_.collect(prefix + ".shared", out);
  for (std::size_t t = 0; t < region_experts_.size(); ++t) {
    region_experts_[t].collect(prefix + ".region" + std::to_string(t), out);
  }
  fusion_.collect(prefix + ".fusion", out);
}

RegionMixerStack RegionMixerStack::init(std::size_t layers, std::size_t regions, std::size_t horizon,
                                        std::size_t latent, std::size_t expert_blocks, Rng& rng) {
  RegionMixerStack stack;
  stack.layers_.reserve(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    stack.layers_.push_back(RegionMixerLayer::init(regions, horizon, latent, expert_blocks, rng));
  }
  return stack;
}

Tensor RegionMixerStack::forward(const Tensor& batch, std::size_t region, const ForwardContext& ctx) const {
  Tensor x = batch;
  for (const auto& layer : layers_) x = layer.forward(x, region, ctx);
  return x;
}

void RegionMixerStack::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].collect(prefix + ".layer" + std::to_string(l), out);
}

}  // namespace triforecaster
