#include <cmath>
#include <numeric>
#include <random>

#include "poroperm/grad_check.hpp"
#include "poroperm/graph.hpp"
#include "poroperm/ops.hpp"
#include "poroperm/optim.hpp"
#include "test_support.hpp"

using namespace poroperm;

namespace {

using Builder = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

// Every entry of the parameter set becomes a graph parameter, in order.
Objective objective_of(Builder build) {
  return [build](const ParameterSet<double>& p, ParameterSet<double>* grads) {
    Graph<double> g;
    std::vector<Var> vars;
    for (std::size_t k = 0; k < p.size(); ++k) vars.push_back(g.parameter(p[k].tensor, grads ? &(*grads)[k].tensor : nullptr));
    const Var loss = build(g, vars);
    if (grads) g.backward(loss);
    return Evaluation{g.value(loss)[0], g.branch_signature()};
  };
}

Tensor<double> randn(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Keeps ReLU inputs at least `margin` away from the kink by nudging values.
void push_off_zero(Tensor<double>& t, double margin = 1e-3) {
  for (auto& v : t.data())
    if (std::abs(v) < margin) v = v < 0 ? -margin : margin;
}

Tensor<float> tensor_f(Shape shape, std::vector<float> data) { return Tensor<float>(std::move(shape), std::move(data)); }

double check(Builder build, ParameterSet<double> params) {
  GradCheckOptions o;
  o.coords_per_tensor = 400;
  return grad_check(objective_of(std::move(build)), std::move(params), o).max_rel_error;
}

}  // namespace

TEST(Conv2d, ZeroKernelsGiveBias) {
  Graph<float> g;
  const Var x = g.constant(Tensor<float>({2, 4, 5}, 1.0f));
  const Var w = g.constant(Tensor<float>({3, 2, 3, 3}, 0.0f));
  const Var b = g.constant(tensor_f({3}, {0.5f, -1.0f, 2.0f}));
  const auto& out = g.value(conv2d(g, x, w, b));
  ASSERT_EQ(out.shape(), (Shape{3, 4, 5}));
  for (std::size_t f = 0; f < 3; ++f)
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(out[f * 20 + i], g.value(b)[f]);
}

TEST(Conv2d, CenterTapIsIdentity) {
  std::mt19937_64 rng(1);
  Graph<double> g;
  const auto xin = randn({1, 6, 7}, rng);
  Tensor<double> k({1, 1, 3, 3});
  k[4] = 1.0;
  const Var out = conv2d(g, g.constant(xin), g.constant(k), g.constant(Tensor<double>({1})));
  EXPECT_EQ(g.value(out), xin);
}

TEST(Conv2d, HandComputedCorrelation) {
  // 1-channel 3x3 input, kernel picks the right neighbour: out(y,x) = in(y,x+1), zero past the edge.
  Graph<double> g;
  Tensor<double> x({1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<double> k({1, 1, 3, 3});
  k[5] = 1.0;
  const auto& out = g.value(conv2d(g, g.constant(x), g.constant(k), g.constant(Tensor<double>({1}))));
  EXPECT_EQ(out.values(), (std::vector<double>{2, 3, 0, 5, 6, 0, 8, 9, 0}));
}

TEST(Conv2d, PreservesExtentsOverShapeGrid) {
  for (std::size_t c : {1, 3, 10})
    for (std::size_t f : {1, 2, 10})
      for (std::size_t k : {1, 3, 5})
        for (std::size_t h : {5, 10}) {
          Graph<float> g;
          const Var out = conv2d(g, g.constant(Tensor<float>({c, h, h + 1})), g.constant(Tensor<float>({f, c, k, k})),
                                 g.constant(Tensor<float>({f})));
          EXPECT_EQ(g.value(out).shape(), (Shape{f, h, h + 1}));
        }
  Graph<float> g;
  const Var out = conv2d(g, g.constant(Tensor<float>({10, 10, 10})), g.constant(Tensor<float>({10, 10, 3, 3})),
                         g.constant(Tensor<float>({10})));
  EXPECT_EQ(g.value(out).shape(), (Shape{10, 10, 10}));
}

TEST(Conv2d, ShapeErrors) {
  Graph<float> g;
  const Var x = g.constant(Tensor<float>({2, 4, 4}));
  EXPECT_ERROR_CODE(conv2d(g, x, g.constant(Tensor<float>({1, 3, 3, 3})), g.constant(Tensor<float>({1}))),
                    ErrorCode::ShapeMismatch);
  EXPECT_ERROR_CODE(conv2d(g, x, g.constant(Tensor<float>({1, 2, 2, 2})), g.constant(Tensor<float>({1}))),
                    ErrorCode::ShapeMismatch);
  EXPECT_ERROR_CODE(conv2d(g, x, g.constant(Tensor<float>({1, 2, 3, 3})), g.constant(Tensor<float>({2}))),
                    ErrorCode::ShapeMismatch);
}

TEST(Dense, Oracles) {
  Graph<double> g;
  const Var x = g.constant(Tensor<double>({3}, std::vector<double>{1.5, -2.0, 0.25}));
  const Var zero_w = g.constant(Tensor<double>({2, 3}));
  const Var zero_b = g.constant(Tensor<double>({2}));
  EXPECT_EQ(g.value(dense(g, x, zero_w, zero_b, Activation::relu)).values(), (std::vector<double>{0, 0}));

  Tensor<double> eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  const Var out = dense(g, x, g.constant(eye), g.constant(Tensor<double>({3})), Activation::linear);
  EXPECT_EQ(g.value(out), g.value(x));

  const Var z = g.constant(Tensor<double>({1}));
  EXPECT_DOUBLE_EQ(g.value(activate(g, z, Activation::sigmoid))[0], 0.5);
  EXPECT_DOUBLE_EQ(g.value(activate(g, z, Activation::tanh))[0], 0.0);
  EXPECT_ERROR_CODE(linear(g, x, g.constant(Tensor<double>({2, 4})), zero_b), ErrorCode::ShapeMismatch);
}

TEST(Attention, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(3);
  Graph<double> g;
  const std::size_t T = 6, d = 8;
  AttentionParams p;
  p.wq = g.constant(randn({d, d}, rng));
  p.bq = g.constant(randn({d}, rng));
  p.wk = g.constant(randn({d, d}, rng));
  p.bk = g.constant(randn({d}, rng));
  p.wv = g.constant(randn({d, d}, rng));
  p.bv = g.constant(randn({d}, rng));
  p.wo = g.constant(randn({d, d}, rng));
  p.bo = g.constant(randn({d}, rng));
  AttentionProbe<double> probe;
  const Var out = multi_head_attention(g, g.constant(randn({T, d}, rng, 3.0)), p, 4, &probe);
  EXPECT_EQ(g.value(out).shape(), (Shape{T, d}));
  ASSERT_EQ(probe.weights.shape(), (Shape{4, T, T}));
  for (std::size_t r = 0; r < 4 * T; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < T; ++c) {
      EXPECT_GE(probe.weights[r * T + c], 0.0);
      sum += probe.weights[r * T + c];
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Attention, SingleTokenIsValueThenOutputProjection) {
  std::mt19937_64 rng(4);
  Graph<double> g;
  const std::size_t d = 4;
  const auto x = randn({1, d}, rng);
  const auto wv = randn({d, d}, rng), bv = randn({d}, rng), wo = randn({d, d}, rng), bo = randn({d}, rng);
  AttentionParams p{g.constant(randn({d, d}, rng)), g.constant(randn({d}, rng)), g.constant(randn({d, d}, rng)),
                    g.constant(randn({d}, rng)),    g.constant(wv),             g.constant(bv),
                    g.constant(wo),                 g.constant(bo)};
  const auto& out = g.value(multi_head_attention(g, g.constant(x), p, 2));
  std::vector<double> v(d), expected(d);
  for (std::size_t i = 0; i < d; ++i) {
    v[i] = bv[i];
    for (std::size_t j = 0; j < d; ++j) v[i] += wv[i * d + j] * x[j];
  }
  for (std::size_t i = 0; i < d; ++i) {
    expected[i] = bo[i];
    for (std::size_t j = 0; j < d; ++j) expected[i] += wo[i * d + j] * v[j];
  }
  for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(out[i], expected[i], 1e-12);
}

TEST(Attention, PermutationEquivariant) {
  std::mt19937_64 rng(5);
  const std::size_t T = 5, d = 6;
  std::vector<Tensor<double>> w;
  for (int i = 0; i < 4; ++i) {
    w.push_back(randn({d, d}, rng));
    w.push_back(randn({d}, rng));
  }
  const auto x = randn({T, d}, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  auto run = [&](bool permute) {
    Graph<double> g;
    AttentionParams p{g.constant(w[0]), g.constant(w[1]), g.constant(w[2]), g.constant(w[3]),
                      g.constant(w[4]), g.constant(w[5]), g.constant(w[6]), g.constant(w[7])};
    Var in = g.constant(x);
    if (permute) in = permute_rows(g, in, perm);
    return g.value(multi_head_attention(g, in, p, 3));
  };
  const auto plain = run(false);
  const auto permuted = run(true);
  for (std::size_t r = 0; r < T; ++r)
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(permuted[r * d + c], plain[perm[r] * d + c], 1e-12);
}

TEST(Attention, HeadsMustDivideWidth) {
  Graph<double> g;
  const Var m = g.constant(Tensor<double>({6, 6}));
  const Var b = g.constant(Tensor<double>({6}));
  AttentionParams p{m, b, m, b, m, b, m, b};
  EXPECT_ERROR_CODE(multi_head_attention(g, g.constant(Tensor<double>({2, 6})), p, 4), ErrorCode::HeadsDontDivide);
}

TEST(LayerNorm, NormalizesRows) {
  std::mt19937_64 rng(6);
  Graph<double> g;
  Tensor<double> gain({5}, 1.0);
  const auto& y = g.value(layer_norm(g, g.constant(randn({3, 5}, rng, 4.0)), g.constant(gain),
                                     g.constant(Tensor<double>({5}))));
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 5; ++c) mean += y[r * 5 + c] / 5;
    for (std::size_t c = 0; c < 5; ++c) var += (y[r * 5 + c] - mean) * (y[r * 5 + c] - mean) / 5;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
}

TEST(Backward, SquareOracle) {
  Tensor<double> x({1}, 3.0);
  Tensor<double> gx({1});
  Graph<double> g;
  const Var loss = mse(g, g.parameter(x, &gx), Tensor<double>({1}));
  EXPECT_DOUBLE_EQ(g.value(loss)[0], 9.0);
  g.backward(loss);
  EXPECT_DOUBLE_EQ(gx[0], 6.0);
}

TEST(Backward, MseAtTargetGivesZeroGradients) {
  std::mt19937_64 rng(7);
  auto w = randn({4, 3}, rng), b = randn({4}, rng), x = randn({3}, rng);
  Tensor<double> gw(w.shape()), gb(b.shape());
  Graph<double> g;
  const Var y = linear(g, g.constant(x), g.parameter(w, &gw), g.parameter(b, &gb));
  const Tensor<double> target = g.value(y);
  g.backward(mse(g, y, target));
  for (double v : gw.data()) EXPECT_EQ(v, 0.0);
  for (double v : gb.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, UnusedParameterGetsExactlyZero) {
  std::mt19937_64 rng(8);
  auto used = randn({3}, rng), unused = randn({3}, rng);
  Tensor<double> gu(used.shape()), gn(unused.shape());
  Graph<double> g;
  const Var a = g.parameter(used, &gu);
  g.parameter(unused, &gn);
  g.backward(mse(g, a, Tensor<double>({3})));
  for (double v : gn.data()) EXPECT_EQ(v, 0.0);
  EXPECT_NE(gu[0], 0.0);
}

TEST(Backward, SharedInputAccumulates) {
  // loss = mean((x + x)^2) for scalar x → 4x^2, gradient 8x.
  Tensor<double> x({1}, 1.5);
  Tensor<double> gx({1});
  Graph<double> g;
  const Var v = g.parameter(x, &gx);
  g.backward(mse(g, add(g, v, v), Tensor<double>({1})));
  EXPECT_DOUBLE_EQ(gx[0], 12.0);
}

TEST(Backward, Errors) {
  Tensor<double> x({2}, 1.0);
  Tensor<double> gx({2});
  Graph<double> g;
  const Var v = g.parameter(x, &gx);
  EXPECT_ERROR_CODE(g.backward(v), ErrorCode::NonScalarLoss);
  Tensor<double> inf({1}, INFINITY);
  Tensor<double> ginf({1});
  const Var w = g.parameter(inf, &ginf);
  EXPECT_ERROR_CODE(g.backward(mse(g, w, Tensor<double>({1}))), ErrorCode::NonFiniteValue);
}

TEST(Mse, MaskedAndErrors) {
  Graph<double> g;
  const Var p = g.constant(Tensor<double>({3}, std::vector<double>{1, 2, 3}));
  const Tensor<double> t({3}, std::vector<double>{1, 0, 0});
  const std::vector<std::uint32_t> mask{1};
  EXPECT_DOUBLE_EQ(g.value(mse(g, p, t, std::span<const std::uint32_t>(mask)))[0], 4.0);
  EXPECT_ERROR_CODE(mse(g, p, Tensor<double>({2})), ErrorCode::LengthMismatch);
  EXPECT_ERROR_CODE(mse(g, p, t, std::span<const std::uint32_t>()), ErrorCode::EmptyMask);
}

TEST(GradCheck, LinearFunctionIsExactToRounding) {
  std::mt19937_64 rng(9);
  ParameterSet<double> p;
  p.add("w", randn({5, 4}, rng));
  p.add("b", randn({5}, rng));
  const auto x = randn({4}, rng);
  const auto c = randn({5}, rng);
  // Affine in the parameters: sum_i c_i (W x + b)_i, built as mse of a linear map against zero would be
  // quadratic, so use the dot product through a 1-row linear layer instead.
  const double err = check(
      [&](Graph<double>& g, const std::vector<Var>& v) {
        const Var y = linear(g, g.constant(x), v[0], v[1]);
        Tensor<double> cw({1, 5}, c.values());
        const Var s = linear(g, y, g.constant(cw), g.constant(Tensor<double>({1})));
        return reshape(g, s, Shape{1});
      },
      p);
  // Central differences are exact for affine functions up to one loss ulp / 2h.
  EXPECT_LT(err, 1e-7);
}

TEST(GradCheck, DenseReluMse) {
  std::mt19937_64 rng(10);
  ParameterSet<double> p;
  p.add("w", randn({6, 5}, rng));
  p.add("b", randn({6}, rng));
  const auto x = randn({5}, rng);
  const auto t = randn({6}, rng);
  const double err = check(
      [&](Graph<double>& g, const std::vector<Var>& v) {
        return mse(g, dense(g, g.constant(x), v[0], v[1], Activation::relu), t);
      },
      p);
  EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, InvalidEpsilon) {
  ParameterSet<double> p;
  p.add("x", Tensor<double>({1}, 1.0));
  GradCheckOptions o;
  o.fd_epsilon = 0.0;
  const auto f = objective_of([](Graph<double>& g, const std::vector<Var>& v) { return mse(g, v[0], Tensor<double>({1})); });
  EXPECT_ERROR_CODE(grad_check(f, p, o), ErrorCode::InvalidEpsilon);
  o.fd_epsilon = -1e-5;
  EXPECT_ERROR_CODE(grad_check(f, p, o), ErrorCode::InvalidEpsilon);
}

TEST(GradCheck, RelativeErrorFloor) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-10), 1e-2);
}

TEST(GradCheck, ConvInputKernelsBias) {
  std::mt19937_64 rng(11);
  ParameterSet<double> p;
  p.add("x", randn({3, 5, 6}, rng));
  p.add("w", randn({4, 3, 3, 3}, rng));
  p.add("b", randn({4}, rng));
  const auto t = randn({4 * 5 * 6}, rng);
  EXPECT_LT(check(
                [&](Graph<double>& g, const std::vector<Var>& v) {
                  return mse(g, reshape(g, conv2d(g, v[0], v[1], v[2]), Shape{120}), t);
                },
                p),
            1e-4);
}

TEST(GradCheck, Activations) {
  for (Activation a : {Activation::relu, Activation::sigmoid, Activation::tanh, Activation::linear}) {
    std::mt19937_64 rng(12);
    auto x = randn({20}, rng);
    push_off_zero(x);
    ParameterSet<double> p;
    p.add("x", x);
    const auto t = randn({20}, rng);
    EXPECT_LT(check([&](Graph<double>& g, const std::vector<Var>& v) { return mse(g, activate(g, v[0], a), t); }, p),
              1e-4)
        << to_string(a);
  }
}

TEST(GradCheck, LayerNormAndPermute) {
  std::mt19937_64 rng(13);
  ParameterSet<double> p;
  p.add("x", randn({4, 6}, rng));
  p.add("gain", randn({6}, rng));
  p.add("offset", randn({6}, rng));
  const auto t = randn({24}, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  EXPECT_LT(check(
                [&](Graph<double>& g, const std::vector<Var>& v) {
                  const Var y = layer_norm(g, permute_rows(g, v[0], perm), v[1], v[2]);
                  return mse(g, reshape(g, y, Shape{24}), t);
                },
                p),
            1e-4);
}

TEST(GradCheck, MultiHeadAttentionAllInputs) {
  std::mt19937_64 rng(14);
  const std::size_t T = 5, d = 8;
  ParameterSet<double> p;
  p.add("x", randn({T, d}, rng));
  for (const char* n : {"wq", "wk", "wv", "wo"}) {
    p.add(std::string(n), randn({d, d}, rng, 0.5));
    p.add(std::string("b") + n[1], randn({d}, rng, 0.5));
  }
  const auto t = randn({T * d}, rng);
  // The key bias adds the same score to every key of a query, so its true
  // gradient is exactly zero; differencing it only measures roundoff. It is
  // held constant for the check and its analytic gradient asserted separately.
  const auto bk = p.at("bk");
  ParameterSet<double> checked;
  for (const auto& e : p)
    if (e.name != "bk") checked.add(e.name, e.tensor);
  auto forward = [&](Graph<double>& g, const Var& x, const Var& wq, const Var& bq, const Var& wk, const Var& bkv,
                     const Var& wv, const Var& bv, const Var& wo, const Var& bo) {
    AttentionParams a{wq, bq, wk, bkv, wv, bv, wo, bo};
    return mse(g, reshape(g, multi_head_attention(g, x, a, 2), Shape{T * d}), t);
  };
  EXPECT_LT(check(
                [&](Graph<double>& g, const std::vector<Var>& v) {
                  return forward(g, v[0], v[1], v[2], v[3], g.constant(bk), v[4], v[5], v[6], v[7]);
                },
                checked),
            1e-4);

  auto sinks = p.zeros_like();
  Graph<double> g;
  std::vector<Var> v;
  for (std::size_t k = 0; k < p.size(); ++k) v.push_back(g.parameter(p[k].tensor, &sinks[k].tensor));
  g.backward(forward(g, v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]));
  for (double gk : sinks.at("bk").data()) EXPECT_LT(std::abs(gk), 1e-12);
}

TEST(GradCheck, MaskedMse) {
  std::mt19937_64 rng(15);
  ParameterSet<double> p;
  p.add("x", randn({10}, rng));
  const auto t = randn({10}, rng);
  const std::vector<std::uint32_t> mask{1, 4, 7};
  EXPECT_LT(check([&](Graph<double>& g, const std::vector<Var>& v) {
              return mse(g, v[0], t, std::span<const std::uint32_t>(mask));
            },
                  p),
            1e-6);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  std::mt19937_64 rng(16);
  ParameterSet<double> p;
  p.add("w", randn({3, 3}, rng));
  const auto before = p;
  auto state = AdamState<double>::fresh(p);
  adam_step(p, p.zeros_like(), state);
  EXPECT_EQ(p, before);
  EXPECT_EQ(state.t, 1u);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  ParameterSet<double> p;
  p.add("w", Tensor<double>({4}, std::vector<double>{1, 1, 1, 1}));
  ParameterSet<double> g;
  g.add("w", Tensor<double>({4}, std::vector<double>{0.5, -2.0, 1e-3, -7.0}));
  auto state = AdamState<double>::fresh(p, AdamConfig{0.01});
  adam_step(p, g, state);
  for (std::size_t i = 0; i < 4; ++i) {
    const double gi = g[0].tensor[i];
    EXPECT_NEAR(p[0].tensor[i], 1.0 - 0.01 * gi / (std::abs(gi) + 1e-8), 1e-12);
  }
  for (double v : state.v[0].tensor.data()) EXPECT_GE(v, 0.0);
}

TEST(Adam, HandComputedSecondStep) {
  ParameterSet<double> p;
  p.add("w", Tensor<double>({1}, 0.0));
  ParameterSet<double> g;
  g.add("w", Tensor<double>({1}, 1.0));
  auto state = AdamState<double>::fresh(p, AdamConfig{0.1});
  adam_step(p, g, state);
  g[0].tensor[0] = 3.0;
  adam_step(p, g, state);
  const double m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0;
  const double v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  const double first = -0.1 / (1.0 + 1e-8);
  EXPECT_NEAR(p[0].tensor[0], first - 0.1 * mhat / (std::sqrt(vhat) + 1e-8), 1e-12);
}

TEST(Adam, DeterministicAndValidated) {
  std::mt19937_64 rng(17);
  ParameterSet<double> p;
  p.add("w", randn({10}, rng));
  ParameterSet<double> g;
  g.add("w", randn({10}, rng));
  auto p2 = p;
  auto s1 = AdamState<double>::fresh(p), s2 = AdamState<double>::fresh(p);
  for (int i = 0; i < 5; ++i) {
    adam_step(p, g, s1);
    adam_step(p2, g, s2);
  }
  EXPECT_EQ(p, p2);
  auto bad = AdamState<double>::fresh(p, AdamConfig{-0.1});
  EXPECT_ERROR_CODE(adam_step(p, g, bad), ErrorCode::NegativeLearningRate);
  ParameterSet<double> wrong;
  wrong.add("w", Tensor<double>({9}));
  EXPECT_ERROR_CODE(adam_step(p, wrong, s1), ErrorCode::ShapeMismatch);
}

TEST(Sgd, PlainStep) {
  ParameterSet<float> p;
  p.add("w", Tensor<float>({2}, std::vector<float>{1.0f, 2.0f}));
  ParameterSet<float> g;
  g.add("w", Tensor<float>({2}, std::vector<float>{0.5f, -1.0f}));
  sgd_step(p, g, 0.1);
  EXPECT_FLOAT_EQ(p[0].tensor[0], 0.95f);
  EXPECT_FLOAT_EQ(p[0].tensor[1], 2.1f);
}
