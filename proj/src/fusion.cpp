#include "triforecaster/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "triforecaster/errors.hpp"

namespace triforecaster {

void check_distribution(const Tensor& probs, double tol) {
  if (probs.dim() < 1) throw ContractError("probabilities: scalar is not a distribution tensor");
  const std::size_t experts = probs.size(0);
  const std::size_t cells = probs.numel() / experts;
  const auto p = probs.values();
  for (std::size_t c = 0; c < cells; ++c) {
    double total = 0.0;
    for (std::size_t e = 0; e < experts; ++e) {
      const double v = p[e * cells + c];
      if (!(v >= 0.0)) {
        throw ContractError("probabilities: cell " + std::to_string(c) + " has invalid entry " + std::to_string(v));
      }
      total += v;
    }
    if (std::abs(total - 1.0) > tol) {
      throw ContractError("probabilities: cell " + std::to_string(c) + " sums to " + std::to_string(total));
    }
  }
}

ProbTensor ProbTensor::checked(Tensor probs, double tol) {
  check_distribution(probs, tol);
  return ProbTensor(probs.requires_grad() ? probs.detach() : std::move(probs));
}

ProbTensor RoutingTape::route(const std::function<ProbTensor()>& compute) {
  switch (state_) {
    case State::kRecord:
      entries_.push_back(compute());
      return entries_.back();
    case State::kReplay:
      if (cursor_ >= entries_.size()) throw ContractError("routing replay: more routing sites than recorded");
      return entries_[cursor_++];
    case State::kPassthrough:
      break;
  }
  return compute();
}

ProbTensor affinity_probs(const Tensor& own, const Tensor& others) {
  const Shape& os = own.shape();
  const Shape& xs = others.shape();
  if (os.empty() || os[0] == 0) throw ContractError("affinity_probs: empty batch");
  if (xs.size() != os.size() + 1 || !std::equal(os.begin(), os.end(), xs.begin() + 1)) {
    throw DimensionError("affinity_probs: own " + shape_str(os) + " and others " + shape_str(xs) + " disagree");
  }
  const std::size_t experts = xs[0];
  const std::size_t batch = os[0];
  const std::size_t cells = own.numel() / batch;
  const auto ov = own.values();
  const auto xv = others.values();

  std::vector<double> dist(experts * cells, 0.0);
  for (std::size_t e = 0; e < experts; ++e) {
    for (std::size_t n = 0; n < batch; ++n) {
      const double* a = ov.data() + n * cells;
      const double* b = xv.data() + (e * batch + n) * cells;
      double* d = dist.data() + e * cells;
      for (std::size_t c = 0; c < cells; ++c) d[c] += std::abs(a[c] - b[c]);
    }
  }
  // softmax(-d) over experts, per cell
  std::vector<double> probs(experts * cells);
  for (std::size_t c = 0; c < cells; ++c) {
    double lowest = std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < experts; ++e) lowest = std::min(lowest, dist[e * cells + c]);
    double total = 0.0;
    for (std::size_t e = 0; e < experts; ++e) {
      const double w = std::exp(lowest - dist[e * cells + c]);
      probs[e * cells + c] = w;
      total += w;
    }
    for (std::size_t e = 0; e < experts; ++e) probs[e * cells + c] /= total;
  }
  Shape shape{experts};
  shape.insert(shape.end(), os.begin() + 1, os.end());
  return ProbTensor::checked(Tensor::from(std::move(shape), std::move(probs)));
}

ProbTensor activation_probs(const Tensor& o_cat) {
  if (o_cat.dim() < 1 || o_cat.size(0) == 0) throw ContractError("activation_probs: no experts");
  NoGradGuard no_grad;
  return ProbTensor::checked(softmax(o_cat.detach(), 0));
}

Tensor stoch_pool(const Tensor& o_cat, const ProbTensor& probs, Mode mode, Rng* rng) {
  const Shape& os = o_cat.shape();
  const Shape& ps = probs.shape();
  if (os.empty() || ps.empty() || os[0] != ps[0] || ps.size() > os.size() ||
      !std::equal(ps.begin() + 1, ps.end(), os.end() - static_cast<std::ptrdiff_t>(ps.size() - 1))) {
    throw DimensionError("stoch_pool: activations " + shape_str(os) + " and probabilities " + shape_str(ps) +
                         " disagree");
  }
  check_distribution(probs.tensor());
  const std::size_t experts = os[0];
  const std::size_t cells = o_cat.numel() / experts;
  const std::size_t prob_cells = probs.cells();
  const auto o = o_cat.values();
  const auto p = probs.values();
  Shape out_shape(os.begin() + 1, os.end());
  std::vector<double> out(cells);

  if (mode == Mode::kTrain) {
    if (rng == nullptr) throw ContractError("stoch_pool: train mode needs a random generator");
    std::vector<std::size_t> chosen(cells);
    for (std::size_t c = 0; c < cells; ++c) {
      const std::size_t pc = c % prob_cells;
      const double u = rng->uniform();
      double acc = 0.0;
      std::size_t pick = experts;
      std::size_t last_nonzero = 0;
      for (std::size_t e = 0; e < experts; ++e) {
        const double pe = p[e * prob_cells + pc];
        if (pe > 0.0) last_nonzero = e;
        acc += pe;
        if (u < acc) {
          pick = e;
          break;
        }
      }
      if (pick == experts) pick = last_nonzero;  // u beyond a cumulative sum that rounded below 1
      chosen[c] = pick;
      out[c] = o[pick * cells + c];
    }
    return Tensor::from_op(std::move(out_shape), std::move(out), {o_cat},
                           [chosen = std::move(chosen), cells](std::span<const double>, std::span<const double> g,
                                                               GradSink& sink) {
                             if (!sink.wants(0)) return;
                             auto go = sink[0];
                             for (std::size_t c = 0; c < cells; ++c) go[chosen[c] * cells + c] += g[c];
                           });
  }

  for (std::size_t c = 0; c < cells; ++c) {
    const std::size_t pc = c % prob_cells;
    double acc = 0.0;
    for (std::size_t e = 0; e < experts; ++e) acc += p[e * prob_cells + pc] * o[e * cells + c];
    out[c] = acc;
  }
  return Tensor::from_op(std::move(out_shape), std::move(out), {o_cat},
                         [probs_t = probs.tensor(), experts, cells, prob_cells](
                             std::span<const double>, std::span<const double> g, GradSink& sink) {
                           if (!sink.wants(0)) return;
                           auto go = sink[0];
                           const auto p = probs_t.values();
                           for (std::size_t e = 0; e < experts; ++e) {
                             for (std::size_t c = 0; c < cells; ++c) {
                               go[e * cells + c] += p[e * prob_cells + c % prob_cells] * g[c];
                             }
                           }
                         });
}

FusionParams FusionParams::init(std::size_t width, std::size_t direct_count, Rng& rng) {
  FusionParams f;
  f.ffn1 = Linear::init(width, width, rng);
  f.ffn2 = Linear::init((direct_count + 1) * width, width, rng);
  f.direct_count = direct_count;
  return f;
}

void FusionParams::collect(const std::string& prefix, ParamList& out) const {
  ffn1.collect(prefix + ".ffn1", out);
  ffn2.collect(prefix + ".ffn2", out);
}

Tensor fusion(std::span<const Tensor> direct, const Tensor& o_cat, const ProbTensor& probs,
              const FusionParams& params, const ForwardContext& ctx) {
  if (direct.size() != params.direct_count ||
      params.ffn2.in_features() != (direct.size() + 1) * params.width()) {
    throw DimensionError("fusion: " + std::to_string(direct.size()) + " direct inputs for an FFN2 of width " +
                         std::to_string(params.ffn2.in_features()) + " over latent width " +
                         std::to_string(params.width()));
  }
  const Tensor transformed = params.ffn1(o_cat);
  const Tensor pooled = stoch_pool(transformed, probs, ctx.mode, ctx.rng);
  std::vector<Tensor> parts(direct.begin(), direct.end());
  parts.push_back(pooled);
  for (const auto& part : parts) {
    if (part.shape() != pooled.shape()) {
      throw DimensionError("fusion: direct input " + shape_str(part.shape()) + " does not match pooled " +
                           shape_str(pooled.shape()));
    }
  }
  return params.ffn2(concat(parts, -1));
}

}  // namespace triforecaster
