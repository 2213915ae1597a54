#include "triforecaster/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace triforecaster {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradcheckResult gradcheck(const ParamList& params, const std::function<Tensor(RoutingTape&)>& loss, double eps) {
  RoutingTape tape;
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  tape.record();
  loss(tape).backward();

  GradcheckResult result;
  auto evaluate = [&] {
    NoGradGuard no_grad;
    tape.replay();
    return loss(tape).item();
  };
  for (const auto& p : params) {
    Tensor t = p.tensor;
    const std::vector<double> analytic = t.grad_touched() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                          : std::vector<double>(t.numel(), 0.0);
    auto x = t.mutable_values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + eps;
      const double up = evaluate();
      x[i] = saved - eps;
      const double down = evaluate();
      x[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double rel = relative_error(analytic[i], numeric);
      result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic[i] - numeric));
      if (rel > result.max_rel_error || result.checked == 0) {
        result.max_rel_error = rel;
        result.worst = p.name + "[" + std::to_string(i) + "]";
      }
      ++result.checked;
    }
    t.zero_grad();
  }
  tape.passthrough();
  return result;
}

TrainConfig tiny_config(ModelKind kind) {
  TrainConfig cfg;
  cfg.model = kind;
  cfg.latent_dim = 3;
  cfg.region_layers = 1;
  cfg.ct_layers = 1;
  cfg.context_experts = 2;
  cfg.time_experts = 2;
  cfg.expert_blocks = 1;
  cfg.baseline_blocks = 2;
  cfg.seed = 11;
  return cfg;
}

ModelDims tiny_dims() {
  ModelDims d;
  d.regions = 2;
  d.lookback = 6;
  d.horizon = 4;
  d.history_channels = 2;
  d.future_channels = 2;
  return d;
}

GradcheckResult gradcheck_model(const Forecaster& model, const ModelDims& dims, std::uint64_t seed,
                                std::size_t batch, double eps) {
  Rng rng(seed, 7);
  struct Inputs {
    Tensor history, future, target;
  };
  std::vector<Inputs> inputs;
  auto random = [&](Shape shape) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.normal();
    return Tensor::from(std::move(shape), std::move(v));
  };
  for (std::size_t r = 0; r < dims.regions; ++r) {
    Inputs in;
    in.history = random({batch, dims.lookback, dims.history_channels});
    if (dims.future_channels > 0) in.future = random({batch, dims.horizon, dims.future_channels});
    in.target = random({batch, dims.horizon, 1});
    inputs.push_back(std::move(in));
  }
  const auto loss = [&](RoutingTape& tape) {
    const ForwardContext ctx{Mode::kEval, nullptr, &tape};
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t r = 0; r < inputs.size(); ++r) {
      const Tensor pred = model.forward(inputs[r].history, inputs[r].future, r, ctx).prediction;
      total = add(total, mean(square(sub(pred, inputs[r].target))));
    }
    return total;
  };
  return gradcheck(model.parameters(), loss, eps);
}

}  // namespace triforecaster
