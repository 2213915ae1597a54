#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "triforecaster/rng.hpp"
#include "triforecaster/tensor.hpp"

namespace triforecaster {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered parameter manifest. Order is construction order and defines the
/// checkpoint layout.
using ParamList = std::vector<NamedTensor>;

std::size_t param_count(const ParamList& params);

/// Affine map over the trailing axis: x W + b, with W of shape [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  /// Weights ~ U(-1/sqrt(in), 1/sqrt(in)), zero bias.
  static Linear init(std::size_t in, std::size_t out, Rng& rng);

  std::size_t in_features() const { return weight.size(0); }
  std::size_t out_features() const { return weight.size(1); }

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Two-layer perceptron: output(relu(hidden(x))).
struct Mlp {
  Linear hidden;
  Linear output;

  static Mlp init(std::size_t in, std::size_t hidden_width, std::size_t out, Rng& rng);

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm init(std::size_t width);

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// One TSMixer block on [.., H, D]:
///   y = x + swap(time_mlp(time_norm(swap(x))))
///   z = y + feat_mlp(feat_norm(y))
/// The time branch normalizes and mixes along H; the feature branch along D.
struct TSMixerBlock {
  LayerNorm time_norm;
  Mlp time_mlp;
  LayerNorm feat_norm;
  Mlp feat_mlp;

  static TSMixerBlock init(std::size_t length, std::size_t width, Rng& rng);

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// A stack of TSMixer blocks; maps [.., H, D] -> [.., H, D].
struct TSMixer {
  std::vector<TSMixerBlock> blocks;

  static TSMixer init(std::size_t blocks, std::size_t length, std::size_t width, Rng& rng);

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Maps raw history S [.., L, C] and future covariates Z [.., H, Cz] to the
/// initial latent [.., H, d]: the L axis of S is projected to H, Z is appended
/// on the channel axis, and channels are projected to d.
struct Embedding {
  Linear time_proj;  // L -> H
  Linear chan_proj;  // C + Cz -> d
  std::size_t lookback = 0;
  std::size_t horizon = 0;
  std::size_t history_channels = 0;
  std::size_t future_channels = 0;

  static Embedding init(std::size_t lookback, std::size_t horizon, std::size_t history_channels,
                        std::size_t future_channels, std::size_t latent, Rng& rng);

  /// `future` may be undefined when future_channels == 0.
  Tensor operator()(const Tensor& history, const Tensor& future) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace triforecaster
