#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "wayrvs/autodiff.hpp"
#include "wayrvs/checkpoint.hpp"
#include "wayrvs/gradcheck.hpp"
#include "wayrvs/layers.hpp"
#include "wayrvs/optim.hpp"

using namespace wayrvs;

namespace {

Tensor param_tensor(Shape shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

}  // namespace

TEST(Tensor, RejectsMismatchedBuffer) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({0, 3}), ShapeError);
}

TEST(Tensor, GradBufferMatchesData) {
  Tensor t({3, 2}, 1.0);
  EXPECT_FALSE(t.has_grad());
  t.zero_grad();
  EXPECT_EQ(t.grad().size(), t.numel());
}

TEST(Forward, SoftmaxOfZerosIsUniform) {
  Graph g;
  Var y = softmax(g.constant(Tensor::vector({0.0, 0.0})));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(Forward, SoftmaxRowsSumToOne) {
  Rng rng(3);
  Graph g;
  Var y = softmax(g.constant(random_tensor({7, 5}, rng, 10.0)));
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) s += y.value().at(r, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Forward, Relu) {
  Graph g;
  Var y = relu(g.constant(Tensor::vector({-1.0, 0.0, 2.0})));
  EXPECT_EQ(y.value(), Tensor::vector({0.0, 0.0, 2.0}));
}

TEST(Forward, MatmulIdentity) {
  Rng rng(1);
  Graph g;
  Tensor a = random_tensor({3, 4}, rng);
  Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  Var y = matmul(g.constant(a), g.constant(eye));
  EXPECT_EQ(y.value(), a);
}

TEST(Forward, ShapeErrorNamesOpAndShapes) {
  Graph g;
  try {
    matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({4, 2})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(g.constant(Tensor({2})), g.constant(Tensor({3}))), ShapeError);
  EXPECT_THROW(mul(g.constant(Tensor({2, 1})), g.constant(Tensor({1, 2}))), ShapeError);
}

TEST(Forward, NonFiniteIsNumericFault) {
  Graph g;
  EXPECT_THROW(scale(g.constant(Tensor::vector({1e300})), 1e300), NumericFault);
}

TEST(Forward, EvalDropoutIsIdentity) {
  Graph g(Mode::kEval);
  Tensor x = Tensor::vector({1, 2, 3});
  EXPECT_EQ(dropout(g.constant(x), 0.5).value(), x);
}

TEST(Forward, DropoutPreservesExpectation) {
  Graph g(Mode::kTrain, 11);
  Tensor x = Tensor::vector({1.0, -2.0, 0.5});
  std::vector<double> acc(3, 0.0);
  const int masks = 20000;
  for (int n = 0; n < masks; ++n) {
    Var y = dropout(g.constant(x), 0.3);
    for (std::size_t i = 0; i < 3; ++i) acc[i] += y.value()[i];
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(acc[i] / masks, x[i], 1e-2 * std::max(1.0, std::abs(x[i])));
}

TEST(Forward, NllOfPeakedLogitApproachesZero) {
  Graph g;
  const std::vector<int> target{2};
  Var l = nll(g.constant(Tensor::matrix(1, 3, {0.0, 0.0, 50.0})), target);
  EXPECT_LT(l.value().item(), 1e-20);
}

TEST(Forward, NllUniformIsLogClasses) {
  Graph g;
  const std::vector<int> targets{0, 3, -1, 1};
  Var l = nll(g.constant(Tensor({4, 5})), targets);
  EXPECT_NEAR(l.value().item(), std::log(5.0), 1e-12);
}

TEST(Backward, SumOfSquares) {
  Tensor x = param_tensor({3}, {1, 2, 3});
  Graph g;
  Var v = g.param(x);
  g.backward(sum(mul(v, v)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, FanOutAccumulates) {
  Tensor x = param_tensor({2}, {0.5, -1.5});
  Graph g;
  Var v = g.param(x);
  // f = sum(3x), g = sum(x*x): grad = 3 + 2x
  g.backward(add(sum(scale(v, 3.0)), sum(mul(v, v))));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
}

TEST(Backward, ErrorsOnNonScalarAndReuse) {
  Tensor x = param_tensor({2}, {1, 2});
  Graph g;
  Var v = g.param(x);
  EXPECT_THROW(g.backward(v), ShapeError);
  Var l = sum(v);
  g.backward(l);
  EXPECT_THROW(g.backward(l), std::logic_error);
}

TEST(Backward, MseMatchesFiniteDifferences) {
  Tensor w = param_tensor({3, 2}, {0.1, -0.2, 0.3, 0.05, -0.4, 0.25});
  const Tensor x = Tensor::matrix(2, 3, {1.0, 0.5, -1.0, 0.2, -0.3, 0.7});
  const Tensor y = Tensor::matrix(2, 2, {0.3, -0.1, 0.0, 0.4});
  auto loss = [&](Graph& g) { return mse(matmul(g.constant(x), g.param(w)), g.constant(y)); };
  const auto report = finite_diff_check(loss, {{"w", &w}});
  EXPECT_TRUE(report.passed()) << report.max_rel_error();
  EXPECT_LT(report.max_rel_error(), 1e-4);
}

TEST(Backward, EveryPrimitivePassesGradCheck) {
  Rng rng(5);
  Tensor a = random_tensor({4, 6}, rng);
  Tensor gamma = random_tensor({6}, rng);
  Tensor beta = random_tensor({6}, rng);
  Tensor table = random_tensor({5, 3}, rng);
  Tensor qkv_w = random_tensor({6, 12}, rng, 0.5);
  for (Tensor* t : {&a, &gamma, &beta, &table, &qkv_w}) t->set_requires_grad(true);
  const std::vector<std::size_t> idx{4, 0, 2, 4};
  const std::vector<int> targets{1, -1, 0, 2};
  auto loss = [&](Graph& g) {
    Var x = g.param(a);
    Var n = layer_norm(x, g.param(gamma), g.param(beta));
    Var att = causal_attention(matmul(n, g.param(qkv_w)), 2, 2, 2, 0.0);
    Var e = embedding(g.param(table), idx);
    std::vector<Var> parts{att, e};
    Var c = concat(parts);
    Var probs = softmax(c);
    Var logits = add_row(matmul(c, g.constant(Tensor({7, 3}, 0.3))), g.constant(Tensor::vector({0.1, 0.2, 0.3})));
    logits = add(logits, matmul(probs, g.constant(Tensor({7, 3}, -0.2))));
    return add(nll(logits, targets), mse(relu(scale(x, 2.0)), g.constant(Tensor({4, 6}, 0.1))));
  };
  const auto report = finite_diff_check(loss, {{"a", &a}, {"gamma", &gamma}, {"beta", &beta},
                                               {"table", &table}, {"qkv", &qkv_w}});
  for (const auto& b : report.blocks) {
    EXPECT_TRUE(b.passed) << b.name << " " << b.max_rel_error;
    EXPECT_GT(b.checked, 0u) << b.name;
  }
}

TEST(GradCheck, ThreeLayerMlp) {
  Rng rng(9);
  Mlp mlp(4, 16, 3, 2, rng);
  std::vector<NamedParam> params;
  mlp.collect("mlp", params);
  const Tensor x = random_tensor({8, 4}, rng);
  const Tensor y = random_tensor({8, 2}, rng);
  auto loss = [&](Graph& g) { return mse(mlp(g.constant(x)), g.constant(y)); };
  const auto report = finite_diff_check(loss, params);
  EXPECT_TRUE(report.passed()) << report.max_rel_error();
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_EQ(report.blocks[i].checked + report.blocks[i].skipped_kinks,
              std::min<std::size_t>(100, params[i].tensor->numel()));
  }
}

TEST(GradCheck, TrainingDropoutIsDeterministicUnderSeed) {
  Rng rng(2);
  Tensor w = random_tensor({5, 3}, rng);
  w.set_requires_grad(true);
  const Tensor x = random_tensor({6, 5}, rng);
  auto grads = [&] {
    w.zero_grad();
    Graph g(Mode::kTrain, 77);
    g.backward(sum(dropout(matmul(g.constant(x), g.param(w)), 0.4)));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(grads(), grads());
  GradCheckOptions opt;
  opt.mode = Mode::kTrain;
  opt.dropout_seed = 77;
  auto loss = [&](Graph& g) { return sum(mul(dropout(matmul(g.constant(x), g.param(w)), 0.4), g.constant(Tensor({6, 3}, 0.7)))); };
  EXPECT_TRUE(finite_diff_check(loss, {{"w", &w}}, opt).passed());
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor p = param_tensor({2}, {1.0, -2.0});
  Adam adam({{"p", &p}});
  adam.zero_grad();
  adam.step();
  EXPECT_EQ(p, param_tensor({2}, {1.0, -2.0}));
  EXPECT_EQ(adam.step_count(), 1u);
}

TEST(Adam, HandEvaluatedSteps) {
  // Oracle: one and two steps of the bias-corrected recurrence evaluated
  // independently in double precision.
  Tensor p = param_tensor({1}, {1.0});
  Adam adam({{"p", &p}});
  p.zero_grad();
  p.grad()[0] = 0.5;
  adam.step();
  EXPECT_NEAR(p[0], 0.99900000002, 1e-15);
  EXPECT_EQ(p.grad()[0], 0.0);
  p.grad()[0] = 0.5;
  adam.step();
  EXPECT_NEAR(p[0], 0.99800000004, 1e-15);
  EXPECT_EQ(adam.first_moment()[0].shape(), p.shape());
  EXPECT_EQ(adam.second_moment()[0].shape(), p.shape());
}

TEST(Adam, MissingGradientNamesParameter) {
  Tensor a = param_tensor({1}, {1.0});
  Tensor b = param_tensor({1}, {1.0});
  Adam adam({{"alpha", &a}, {"beta", &b}});
  a.zero_grad();
  try {
    adam.step();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("beta"), std::string::npos);
  }
}

TEST(Determinism, TrainingIsBitReproducible) {
  auto train = [] {
    Rng rng(42);
    Mlp mlp(3, 8, 2, 1, rng);
    std::vector<NamedParam> params;
    mlp.collect("m", params);
    Adam adam(params);
    const Tensor x = random_tensor({16, 3}, rng);
    const Tensor y = random_tensor({16, 1}, rng);
    for (int s = 0; s < 25; ++s) {
      Graph g(Mode::kTrain, static_cast<std::uint64_t>(s));
      g.backward(mse(dropout(mlp(g.constant(x)), 0.1), g.constant(y)));
      adam.step();
    }
    return encode_checkpoint(snapshot_parameters(params));
  };
  EXPECT_EQ(train(), train());
}

TEST(Checkpoint, RoundTripAndAssign) {
  Rng rng(4);
  std::vector<NamedTensor> tensors{{"a.w", random_tensor({2, 3}, rng)}, {"b", Tensor::scalar(-0.0)}};
  const auto decoded = decode_checkpoint(encode_checkpoint(tensors));
  ASSERT_EQ(decoded.size(), 2u);
  EXPECT_EQ(decoded[0].name, "a.w");
  EXPECT_EQ(decoded[0].tensor, tensors[0].tensor);
  EXPECT_EQ(encode_checkpoint(tensors).rfind("WAYRVS-CKPT v1\n", 0), 0u);

  Tensor dest({2, 3});
  assign_parameters(decoded, {{"a.w", &dest}});
  EXPECT_EQ(dest, tensors[0].tensor);
  Tensor wrong({3, 2});
  EXPECT_THROW(assign_parameters(decoded, {{"a.w", &wrong}}), std::invalid_argument);
  EXPECT_THROW(assign_parameters(decoded, {{"missing", &dest}}), std::runtime_error);
  EXPECT_THROW(decode_checkpoint("garbage"), std::runtime_error);
}
