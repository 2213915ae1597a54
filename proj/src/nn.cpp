#include "triforecaster/nn.hpp"

#include <cmath>

#include "triforecaster/errors.hpp"

namespace triforecaster {

std::size_t param_count(const ParamList& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.numel();
  return total;
}

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.uniform(-bound, bound);
  return Linear{Tensor::from({in, out}, std::move(w), true), Tensor::zeros({out}, true)};
}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.dim() == 0 || x.shape().back() != in_features()) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not end in width " +
                         std::to_string(in_features()));
  }
  if (x.dim() == 1) {
    return reshape(add(matmul(reshape(x, {1, x.numel()}), weight), bias), {out_features()});
  }
  return add(matmul(x, weight), bias);
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Mlp Mlp::init(std::size_t in, std::size_t hidden_width, std::size_t out, Rng& rng) {
  Linear hidden = Linear::init(in, hidden_width, rng);
  Linear output = Linear::init(hidden_width, out, rng);
  return Mlp{std::move(hidden), std::move(output)};
}

Tensor Mlp::operator()(const Tensor& x) const { return output(relu(hidden(x))); }

void Mlp::collect(const std::string& prefix, ParamList& out) const {
  hidden.collect(prefix + ".hidden", out);
  output.collect(prefix + ".output", out);
}

LayerNorm LayerNorm::init(std::size_t width) {
  return LayerNorm{Tensor::full({width}, 1.0, true), Tensor::zeros({width}, true)};
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

TSMixerBlock TSMixerBlock::init(std::size_t length, std::size_t width, Rng& rng) {
  TSMixerBlock b{LayerNorm::init(length), Mlp::init(length, length, length, rng), LayerNorm::init(width),
                 Mlp::init(width, width, width, rng)};
  return b;
}

Tensor TSMixerBlock::operator()(const Tensor& x) const {
  if (x.dim() < 2 || x.shape()[x.dim() - 2] != time_norm.gamma.numel() ||
      x.shape().back() != feat_norm.gamma.numel()) {
    throw DimensionError("tsmixer: input " + shape_str(x.shape()) + " does not match block of length " +
                         std::to_string(time_norm.gamma.numel()) + " and width " +
                         std::to_string(feat_norm.gamma.numel()));
  }
  const Tensor time_mixed = swap_last(time_mlp(time_norm(swap_last(x))));
  const Tensor y = add(x, time_mixed);
  return add(y, feat_mlp(feat_norm(y)));
}

void TSMixerBlock::collect(const std::string& prefix, ParamList& out) const {
  time_norm.collect(prefix + ".time_norm", out);
  time_mlp.collect(prefix + ".time_mlp", out);
  feat_norm.collect(prefix + ".feat_norm", out);
  feat_mlp.collect(prefix + ".feat_mlp", out);
}

TSMixer TSMixer::init(std::size_t blocks, std::size_t length, std::size_t width, Rng& rng) {
  TSMixer m;
  m.blocks.reserve(blocks);
  for (std::size_t i = 0; i < blocks; ++i) m.blocks.push_back(TSMixerBlock::init(length, width, rng));
  return m;
}

Tensor TSMixer::operator()(const Tensor& x) const {
  Tensor h = x;
  for (const auto& b : blocks) h = b(h);
  return h;
}

void TSMixer::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), out);
}

Embedding Embedding::init(std::size_t lookback, std::size_t horizon, std::size_t history_channels,
                          std::size_t future_channels, std::size_t latent, Rng& rng) {
  Embedding e;
  e.time_proj = Linear::init(lookback, horizon, rng);
  e.chan_proj = Linear::init(history_channels + future_channels, latent, rng);
  e.lookback = lookback;
  e.horizon = horizon;
  e.history_channels = history_channels;
  e.future_channels = future_channels;
  return e;
}

Tensor Embedding::operator()(const Tensor& history, const Tensor& future) const {
  const Shape& hs = history.shape();
  if (hs.size() < 2 || hs[hs.size() - 2] != lookback || hs.back() != history_channels) {
    throw DimensionError("embedding: history has shape " + shape_str(hs) + ", expected [..," +
                         std::to_string(lookback) + "," + std::to_string(history_channels) + "]");
  }
  const Tensor aligned = swap_last(time_proj(swap_last(history)));  // [.., H, C]
  if (future_channels == 0) {
    if (future.defined()) throw DimensionError("embedding: future covariates given but none configured");
    return chan_proj(aligned);
  }
  if (!future.defined()) throw DimensionError("embedding: missing future covariates");
  Shape expected(hs.begin(), hs.end() - 2);
  expected.push_back(horizon);
  expected.push_back(future_channels);
  if (future.shape() != expected) {
    throw DimensionError("embedding: future covariates have shape " + shape_str(future.shape()) + ", expected " +
                         shape_str(expected));
  }
  return chan_proj(concat({aligned, future}, -1));
}

void Embedding::collect(const std::string& prefix, ParamList& out) const {
  time_proj.collect(prefix + ".time_proj", out);
  chan_proj.collect(prefix + ".chan_proj", out);
}

}  // namespace triforecaster
