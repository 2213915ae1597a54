#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "triforecaster/fusion.hpp"
#include "triforecaster/nn.hpp"

namespace triforecaster {

/// Experts act on the latent axis of each timestep; routed by their own activations.
struct ContextMoE {
  std::vector<Mlp> experts;
  FusionParams fusion;

  static ContextMoE init(std::size_t experts, std::size_t latent, std::size_t hidden, Rng& rng);

  /// x: [N, H, d] -> [N, H, d]
  Tensor forward(const Tensor& x, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Experts act on the time axis of each latent channel: the input is viewed as
/// [N, d, H], mixed and fused in that orientation, and transposed back.
struct TimeMoE {
  std::vector<Mlp> experts;
  FusionParams fusion;  // width H

  static TimeMoE init(std::size_t experts, std::size_t horizon, std::size_t hidden, Rng& rng);

  /// x: [N, H, d] -> [N, H, d]
  Tensor forward(const Tensor& x, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct CtOutput {
  Tensor out;      // time(context(x)) + x
  Tensor context;  // context-stage output, input to the contrastive loss
};

struct CTSpecializerLayer {
  std::optional<ContextMoE> context;  // disengaged: stage bypassed
  std::optional<TimeMoE> time;

  CtOutput forward(const Tensor& x, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Cosine similarity of the flattened operands, as a scalar tensor.
/// Throws ContractError if either operand has zero norm.
Tensor cosine_sim(const Tensor& u, const Tensor& v);

/// -exp(s+/tau) / (exp(s+/tau) + sum_i exp(s-_i/tau)), with s the cosine
/// similarity of the anchor to the positive and to each negative. Always in (-1, 0).
Tensor contrastive_loss(const Tensor& anchor, const Tensor& positive, std::span<const Tensor> negatives, double tau);

/// The same loss from precomputed similarity scalars.
Tensor contrastive_from_similarities(const Tensor& positive_sim, std::span<const Tensor> negative_sims, double tau);

}  // namespace triforecaster
