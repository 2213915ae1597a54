#pragma once

// Stochastic expert fusion: per-cell categorical distributions over experts,
// stochastic pooling, and the FFN combiner used by every mixture layer.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "triforecaster/nn.hpp"
#include "triforecaster/rng.hpp"
#include "triforecaster/tensor.hpp"

namespace triforecaster {

enum class Mode { kTrain, kEval };

/// Categorical distributions over E experts, one per cell: shape [E, cells...].
/// Never part of the gradient graph.
class ProbTensor {
 public:
  ProbTensor() = default;

  /// Validates that every cell is a distribution (nonnegative, sums to 1 within `tol`).
  static ProbTensor checked(Tensor probs, double tol = 1e-9);

  const Tensor& tensor() const { return probs_; }
  const Shape& shape() const { return probs_.shape(); }
  std::size_t experts() const { return probs_.size(0); }
  std::size_t cells() const { return probs_.numel() / experts(); }
  std::span<const double> values() const { return probs_.values(); }
  double at(std::size_t expert, std::size_t cell) const { return probs_.values()[expert * cells() + cell]; }

 private:
  explicit ProbTensor(Tensor probs) : probs_(std::move(probs)) {}
  Tensor probs_;
};

/// Throws ContractError naming the first cell that is not a distribution.
void check_distribution(const Tensor& probs, double tol = 1e-9);

/// Records routing distributions on one forward pass and replays them on
/// later passes. Finite-difference checks use this to hold routing fixed,
/// matching the stop-gradient the analytic backward applies.
class RoutingTape {
 public:
  enum class State { kPassthrough, kRecord, kReplay };

  void record() {
    state_ = State::kRecord;
    entries_.clear();
  }
  void replay() {
    state_ = State::kReplay;
    cursor_ = 0;
  }
  void passthrough() { state_ = State::kPassthrough; }
  State state() const { return state_; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<ProbTensor>& entries() const { return entries_; }

  ProbTensor route(const std::function<ProbTensor()>& compute);

 private:
  State state_ = State::kPassthrough;
  std::vector<ProbTensor> entries_;
  std::size_t cursor_ = 0;
};

/// Per-forward state threaded through every layer.
struct ForwardContext {
  Mode mode = Mode::kEval;
  Rng* rng = nullptr;  // required in train mode
  RoutingTape* routing = nullptr;

  ProbTensor route(const std::function<ProbTensor()>& compute) const {
    return routing ? routing->route(compute) : compute();
  }
};

/// Affinity-based routing. own: [N, cells...], others: [E, N, cells...].
/// d[e, c] = sum_n |own[n, c] - others[e, n, c]|, probs = softmax_e(-d).
/// The batch is reduced away: one distribution per cell shared by all samples.
ProbTensor affinity_probs(const Tensor& own, const Tensor& others);

/// Activation-based routing. o_cat: [E, cells...], probs = softmax over E of the
/// raw activations, one distribution per cell (and per sample, if batched).
ProbTensor activation_probs(const Tensor& o_cat);

/// o_cat: [E, cells...]; probs: [E, suffix of cells...] broadcast over the
/// leading cell dims. Train mode draws one expert per cell by inverse CDF, in
/// row-major cell order, and copies its activation; eval mode returns the
/// probability-weighted expectation. Gradient flows to o_cat only.
Tensor stoch_pool(const Tensor& o_cat, const ProbTensor& probs, Mode mode, Rng* rng);

/// FFN1 maps each expert output along the latent axis; FFN2 maps the
/// concatenation of `direct_count` direct inputs and the pooled output back to
/// the latent width.
struct FusionParams {
  Linear ffn1;
  Linear ffn2;
  std::size_t direct_count = 0;

  static FusionParams init(std::size_t width, std::size_t direct_count, Rng& rng);

  std::size_t width() const { return ffn1.in_features(); }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// direct: K tensors [.., A, B]; o_cat: [E, .., A, B].
/// Returns FFN2(concat(direct..., stoch_pool(FFN1(o_cat), probs))) of shape [.., A, B].
Tensor fusion(std::span<const Tensor> direct, const Tensor& o_cat, const ProbTensor& probs,
              const FusionParams& params, const ForwardContext& ctx);

}  // namespace triforecaster
