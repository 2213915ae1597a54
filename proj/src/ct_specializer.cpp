#include "triforecaster/ct_specializer.hpp"

#include <cmath>

#include "triforecaster/errors.hpp"

namespace triforecaster {

namespace {

Tensor run_experts(const std::vector<Mlp>& experts, const Tensor& x) {
  std::vector<Tensor> outs;
  outs.reserve(experts.size());
  for (const auto& e : experts) outs.push_back(e(x));
  return stack(outs);
}

}  // namespace

ContextMoE ContextMoE::init(std::size_t experts, std::size_t latent, std::size_t hidden, Rng& rng) {
  if (experts == 0) throw ConfigError("context MoE: at least one expert is required");
  ContextMoE moe;
  moe.experts.reserve(experts);
  for (std::size_t i = 0; i < experts; ++i) moe.experts.push_back(Mlp::init(latent, hidden, latent, rng));
  moe.fusion = FusionParams::init(latent, 1, rng);
  return moe;
}

Tensor ContextMoE::forward(const Tensor& x, const ForwardContext& ctx) const {
  if (x.dim() != 3 || x.shape().back() != fusion.width()) {
    throw DimensionError("context MoE: expected [N,H," + std::to_string(fusion.width()) + "], got " +
                         shape_str(x.shape()));
  }
  const Tensor o_cat = run_experts(experts, x);  // [Nc, N, H, d]
  const ProbTensor probs = ctx.route([&] { return activation_probs(o_cat); });
  const Tensor direct[] = {x};
  return triforecaster::fusion(direct, o_cat, probs, fusion, ctx);
}

void ContextMoE::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < experts.size(); ++i) experts[i].collect(prefix + ".expert" + std::to_string(i), out);
  fusion.collect(prefix + ".fusion", out);
}

TimeMoE TimeMoE::init(std::size_t experts, std::size_t horizon, std::size_t hidden, Rng& rng) {
  if (experts == 0) throw ConfigError("time MoE: at least one expert is required");
  TimeMoE moe;
  moe.experts.reserve(experts);
  for (std::size_t i = 0; i < experts; ++i) moe.experts.push_back(Mlp::init(horizon, hidden, horizon, rng));
  moe.fusion = FusionParams::init(horizon, 1, rng);
  return moe;
}

Tensor TimeMoE::forward(const Tensor& x, const ForwardContext& ctx) const {
  if (x.dim() != 3 || x.shape()[1] != fusion.width()) {
    throw DimensionError("time MoE: expected [N," + std::to_string(fusion.width()) + ",d], got " +
                         shape_str(x.shape()));
  }
  const Tensor xt = swap_last(x);                 // [N, d, H]
  const Tensor o_cat = run_experts(experts, xt);  // [Nt, N, d, H]
  const ProbTensor probs = ctx.route([&] { return activation_probs(o_cat); });
  const Tensor direct[] = {xt};
  return swap_last(triforecaster::fusion(direct, o_cat, probs, fusion, ctx));
}

void TimeMoE::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < experts.size(); ++i) experts[i].collect(prefix + ".expert" + std::to_string(i), out);
  fusion.collect(prefix + ".fusion", out);
}

CtOutput CTSpecializerLayer::forward(const Tensor& x, const ForwardContext& ctx) const {
  const Tensor ctx_out = context ? context->forward(x, ctx) : x;
  const Tensor time_out = time ? time->forward(ctx_out, ctx) : ctx_out;
  return CtOutput{add(time_out, x), ctx_out};
}

void CTSpecializerLayer::collect(const std::string& prefix, ParamList& out) const {
  if (context) context->collect(prefix + ".context", out);
  if (time) time->collect(prefix + ".time", out);
}

Tensor cosine_sim(const Tensor& u, const Tensor& v) {
  if (u.shape() != v.shape()) {
    throw DimensionError("cosine_sim: shapes " + shape_str(u.shape()) + " and " + shape_str(v.shape()) + " differ");
  }
  const Tensor uf = flatten(u);
  const Tensor vf = flatten(v);
  const Tensor uu = sum(square(uf));
  const Tensor vv = sum(square(vf));
  if (uu.item() == 0.0 || vv.item() == 0.0) throw ContractError("cosine_sim: zero-norm operand");
  return div(sum(mul(uf, vf)), sqrt(mul(uu, vv)));
}

Tensor contrastive_from_similarities(const Tensor& positive_sim, std::span<const Tensor> negative_sims, double tau) {
  if (!(tau > 0.0)) throw ContractError("contrastive_loss: temperature must be positive, got " + std::to_string(tau));
  if (negative_sims.empty()) throw ContractError("contrastive_loss: at least one negative is required");
  std::vector<Tensor> logits;
  logits.reserve(negative_sims.size() + 1);
  logits.push_back(reshape(positive_sim, {1}));
  for (const auto& s : negative_sims) logits.push_back(reshape(s, {1}));
  // Ratio of exponentials == softmax entry of the positive; the softmax keeps
  // small temperatures from overflowing.
  const Tensor weights = softmax(scale(concat(logits, 0), 1.0 / tau), 0);
  return neg(select(weights, 0));
}

Tensor contrastive_loss(const Tensor& anchor, const Tensor& positive, std::span<const Tensor> negatives, double tau) {
  if (!(tau > 0.0)) throw ContractError("contrastive_loss: temperature must be positive, got " + std::to_string(tau));
  if (negatives.empty()) throw ContractError("contrastive_loss: at least one negative is required");
  const Tensor pos = cosine_sim(anchor, positive);
  std::vector<Tensor> negs;
  negs.reserve(negatives.size());
  for (const auto& n : negatives) negs.push_back(cosine_sim(anchor, n));
  return contrastive_from_similarities(pos, negs, tau);
}

}  // namespace triforecaster
