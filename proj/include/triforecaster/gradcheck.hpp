#pragma once
// Central finite-difference checks of whole-model gradients.
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "triforecaster/config.hpp"
#include "triforecaster/models.hpp"

namespace triforecaster {

struct GradcheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<param>[<index>]"
};

/// Relative error used by every check: |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Compares the analytic gradient of `loss` (a scalar built from the current
/// parameter values) with central differences of step `eps` for every scalar
/// of `params`. Routing distributions are recorded on the first evaluation and
/// replayed on every perturbed one.
GradcheckResult gradcheck(const ParamList& params, const std::function<Tensor(RoutingTape&)>& loss,
                          double eps = 1e-5);

/// The small configuration used by the full-model check.
TrainConfig tiny_config(ModelKind kind = ModelKind::kTriForecaster);
ModelDims tiny_dims();

/// Eval-mode squared-error loss of `model` on one random batch per region,
/// differentiated against finite differences.
GradcheckResult gradcheck_model(const Forecaster& model, const ModelDims& dims, std::uint64_t seed,
                                std::size_t batch = 3, double eps = 1e-5);

}  // namespace triforecaster
