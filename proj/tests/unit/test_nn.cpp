#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "support.hpp"
#include "triforecaster/errors.hpp"
#include "triforecaster/nn.hpp"

using namespace triforecaster;
using tftest::fd_max_rel;
using tftest::vals;

namespace {

void fill(Tensor t, double v) {
  auto x = t.mutable_values();
  std::fill(x.begin(), x.end(), v);
}

void set_identity(Linear& l) {
  fill(l.weight, 0.0);
  fill(l.bias, 0.0);
  auto w = l.weight.mutable_values();
  for (std::size_t i = 0; i < std::min(l.in_features(), l.out_features()); ++i) w[i * l.out_features() + i] = 1.0;
}

std::vector<Tensor> tensors(const ParamList& ps) {
  std::vector<Tensor> out;
  for (const auto& p : ps) out.push_back(p.tensor);
  return out;
}

}  // namespace

TEST(Linear, IdentityWeights) {
  Rng rng(1);
  auto l = Linear::init(3, 3, rng);
  set_identity(l);
  auto x = tftest::uniform({2, 3}, rng);
  EXPECT_EQ(vals(l(x)), vals(x));
}

TEST(Linear, HandValue) {
  Linear l{Tensor::from({2, 1}, {1, 1}), Tensor::from({1}, {0.5})};
  EXPECT_DOUBLE_EQ(l(Tensor::from({2}, {1, 1})).item(), 2.5);
}

TEST(Linear, WidthMismatch) {
  Rng rng(1);
  auto l = Linear::init(3, 2, rng);
  EXPECT_THROW(l(Tensor::zeros({2, 4})), DimensionError);
}

TEST(Linear, InitRangeAndZeroBias) {
  Rng rng(2);
  auto l = Linear::init(16, 8, rng);
  double bound = 1.0 / std::sqrt(16.0);
  for (double w : l.weight.values()) EXPECT_LE(std::abs(w), bound);
  for (double b : l.bias.values()) EXPECT_EQ(b, 0.0);
  ParamList ps;
  l.collect("lin", ps);
  EXPECT_EQ(param_count(ps), 16u * 8 + 8);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  auto l = Linear::init(4, 2, rng);
  fill(l.bias, 0.1);
  auto x = tftest::uniform({3, 4}, rng, true);
  auto w = tftest::uniform({3, 2}, rng);
  double err = fd_max_rel({x, l.weight, l.bias}, [&](const auto& in) {
    return sum(mul(Linear{in[1], in[2]}(in[0]), w));
  });
  EXPECT_LE(err, 1e-6);
}

TEST(TSMixer, ZeroOutputLayersArePureResidual) {
  Rng rng(4);
  auto b = TSMixerBlock::init(5, 3, rng);
  fill(b.time_mlp.output.weight, 0.0);
  fill(b.feat_mlp.output.weight, 0.0);
  auto x = tftest::uniform({2, 5, 3}, rng);
  EXPECT_EQ(vals(b(x)), vals(x));
}

TEST(TSMixer, ShapePreserved) {
  Rng rng(5);
  for (std::size_t h : {4, 144})
    for (std::size_t d : {2, 16}) {
      auto b = TSMixerBlock::init(h, d, rng);
      EXPECT_EQ(b(Tensor::zeros({h, d})).shape(), (Shape{h, d}));
      EXPECT_EQ(b(Tensor::zeros({3, h, d})).shape(), (Shape{3, h, d}));
    }
}

TEST(TSMixer, WrongShapeThrows) {
  Rng rng(5);
  auto b = TSMixerBlock::init(4, 3, rng);
  EXPECT_THROW(b(Tensor::zeros({3, 4})), DimensionError);
}

TEST(TSMixer, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  auto b = TSMixerBlock::init(4, 3, rng);
  ParamList ps;
  b.collect("b", ps);
  auto inputs = tensors(ps);
  auto x = tftest::uniform({4, 3}, rng, true);
  inputs.push_back(x);
  auto w = tftest::uniform({4, 3}, rng);
  EXPECT_LE(fd_max_rel(inputs, [&](const auto& in) { return sum(mul(b(in.back()), w)); }), 1e-4);
}

TEST(Mixer, StackedBlocksCollectDistinctNames) {
  Rng rng(7);
  auto m = TSMixer::init(2, 4, 3, rng);
  ParamList ps;
  m.collect("m", ps);
  std::set<std::string> names;
  for (const auto& p : ps) names.insert(p.name);
  EXPECT_EQ(names.size(), ps.size());
  EXPECT_EQ(ps.size(), 2u * 12);  // two norms (gamma, beta) and two MLPs (2 x weight, bias) per block
}

TEST(Embedding, LongWindowShape) {
  Rng rng(8);
  auto e = Embedding::init(504, 216, 10, 9, 16, rng);
  auto out = e(Tensor::zeros({504, 10}), Tensor::zeros({216, 9}));
  EXPECT_EQ(out.shape(), (Shape{216, 16}));
}

TEST(Embedding, IdentityProjections) {
  Rng rng(9);
  auto e = Embedding::init(5, 5, 3, 0, 3, rng);
  set_identity(e.time_proj);
  set_identity(e.chan_proj);
  auto s = tftest::uniform({5, 3}, rng);
  EXPECT_EQ(vals(e(s, Tensor())), vals(s));
}

TEST(Embedding, SchemaMismatchReportsDims) {
  Rng rng(10);
  auto e = Embedding::init(6, 4, 2, 1, 3, rng);
  try {
    e(Tensor::zeros({6, 3}), Tensor::zeros({4, 1}));
    FAIL();
  } catch (const DimensionError& err) {
    std::string msg = err.what();
    EXPECT_NE(msg.find("[6,3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(e(Tensor::zeros({6, 2}), Tensor::zeros({4, 2})), DimensionError);
  EXPECT_THROW(e(Tensor::zeros({6, 2}), Tensor()), DimensionError);
}

TEST(Embedding, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  auto e = Embedding::init(6, 4, 2, 1, 3, rng);
  fill(e.time_proj.bias, 0.2);
  fill(e.chan_proj.bias, -0.1);
  ParamList ps;
  e.collect("e", ps);
  auto inputs = tensors(ps);
  auto s = tftest::uniform({6, 2}, rng, true);
  auto z = tftest::uniform({4, 1}, rng, true);
  inputs.push_back(s);
  inputs.push_back(z);
  auto w = tftest::uniform({4, 3}, rng);
  std::size_t n = inputs.size();
  double err = fd_max_rel(inputs, [&](const auto& in) { return sum(square(mul(e(in[n - 2], in[n - 1]), w))); });
  EXPECT_LE(err, 1e-4);
}
