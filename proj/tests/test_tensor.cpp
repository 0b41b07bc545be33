#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "sfpose/gradcheck.hpp"
#include "sfpose/random.hpp"
#include "sfpose/tensor.hpp"
#include "sfpose/verify.hpp"

using namespace sfpose;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Plain central difference of a scalar function of one variable.
double central(const std::function<double(double)>& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

}  // namespace

TEST(Elementwise, ExpOfZeroIsOne) { EXPECT_EQ(exp(Tensor::scalar(0.0)).item(), 1.0); }

TEST(Elementwise, SigmoidOfZeroIsHalf) { EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5); }

TEST(Elementwise, SoftplusDerivativeMatchesFiniteDifference) {
  Tensor x = Tensor::scalar(1.3).set_requires_grad();
  backward(softplus(x));
  const double fd = central([](double v) { return std::log1p(std::exp(v)); }, 1.3);
  EXPECT_NEAR(x.grad()[0], fd, 1e-6 * std::abs(fd));
}

TEST(Elementwise, BroadcastsTrailingDimensions) {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::vector({10, 20, 30});
  Tensor c = add(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_EQ(c[4], 25.0);
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4});
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(shape_str({2, 3})), std::string::npos) << msg;
    EXPECT_NE(msg.find(shape_str({4})), std::string::npos) << msg;
  }
}

TEST(Matmul, IdentityLeavesMatrix) {
  Rng rng(1);
  Tensor m = random_tensor({3, 4}, rng);
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor out = matmul(eye, m);
  for (std::size_t i = 0; i < m.numel(); ++i) EXPECT_EQ(out[i], m[i]);
}

TEST(Matmul, HandArithmetic) {
  Tensor out = matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {1, 1}));
  ASSERT_EQ(out.shape(), (Shape{2, 1}));
  EXPECT_EQ(out[0], 3.0);
  EXPECT_EQ(out[1], 7.0);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifference) {
  Rng rng(2);
  Tensor a = random_tensor({4, 5}, rng).set_requires_grad();
  Tensor b = random_tensor({5, 3}, rng);
  backward(sum(matmul(a, b)));
  // d sum(AB) / dA_ij = sum_k B_jk, checked by perturbing each entry.
  std::vector<double> av(a.data().begin(), a.data().end());
  for (std::size_t idx = 0; idx < av.size(); ++idx) {
    auto f = [&](double v) {
      auto w = av;
      w[idx] = v;
      return sum(matmul(Tensor::from({4, 5}, w), b)).item();
    };
    const double fd = central(f, av[idx]);
    EXPECT_NEAR(a.grad()[idx], fd, 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Reduce, SumOfZerosIsZero) { EXPECT_EQ(sum(Tensor::zeros({3, 4})).item(), 0.0); }

TEST(Reduce, MeanOfOneTwoThree) { EXPECT_EQ(mean(Tensor::vector({1, 2, 3})).item(), 2.0); }

TEST(Reduce, AxisReductionKeepsOtherAxes) {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor s = sum(a, {1});
  ASSERT_EQ(s.shape(), (Shape{2}));
  EXPECT_EQ(s[0], 6.0);
  EXPECT_EQ(s[1], 15.0);
}

TEST(Reduce, InvalidAxisThrows) { EXPECT_ANY_THROW(sum(Tensor::zeros({2, 3}), {2})); }

TEST(Reduce, WeightedSumGradcheck) {
  Rng rng(3);
  Tensor w = random_tensor({4, 3}, rng, 0.0, 1.0);
  auto r = gradcheck([&](const std::vector<Tensor>& in) { return weighted_sum(in[0], w); },
                     {random_tensor({4, 3}, rng)});
  EXPECT_TRUE(r.ok) << r.max_rel_error;
}

TEST(Bilinear, IntegerPixelReturnsMapEntry) {
  Rng rng(4);
  Tensor map = random_tensor({10, 8, 2}, rng);
  Tensor out = bilinear_sample(map, Tensor::from({1, 2}, {3.0, 7.0}));
  EXPECT_EQ(out[0], map[(7 * 8 + 3) * 2 + 0]);
  EXPECT_EQ(out[1], map[(7 * 8 + 3) * 2 + 1]);
}

TEST(Bilinear, MidpointAveragesNeighbours) {
  Rng rng(5);
  Tensor map = random_tensor({10, 8, 1}, rng);
  Tensor out = bilinear_sample(map, Tensor::from({1, 2}, {3.5, 7.0}));
  EXPECT_NEAR(out[0], 0.5 * (map[7 * 8 + 3] + map[7 * 8 + 4]), 1e-15);
}

TEST(Bilinear, CoordinateGradientOnRampIsSlope) {
  // value(x, y) = 0.3 x - 0.7 y
  const std::size_t h = 6, w = 9;
  std::vector<double> v(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) v[y * w + x] = 0.3 * static_cast<double>(x) - 0.7 * static_cast<double>(y);
  Tensor map = Tensor::from({h, w, 1}, v);
  Tensor coords = Tensor::from({3, 2}, {1.25, 2.5, 4.6, 0.3, 7.1, 3.9}).set_requires_grad();
  backward(sum(bilinear_sample(map, coords)));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(coords.grad()[2 * i], 0.3, 1e-12);
    EXPECT_NEAR(coords.grad()[2 * i + 1], -0.7, 1e-12);
  }
}

TEST(Bilinear, OutOfBoundsClampsWithZeroGradient) {
  Rng rng(6);
  Tensor map = random_tensor({4, 4, 1}, rng);
  Tensor coords = Tensor::from({1, 2}, {-3.0, 1.5}).set_requires_grad();
  Tensor out = bilinear_sample(map, coords);
  EXPECT_NEAR(out[0], 0.5 * (map[4] + map[8]), 1e-15);
  backward(sum(out));
  EXPECT_EQ(coords.grad()[0], 0.0);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::zeros({2, 3, 4}).set_requires_grad();
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresHandDerivative) {
  Tensor x = Tensor::vector({1, 2}).set_requires_grad();
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, NonScalarLossThrows) {
  Tensor x = Tensor::zeros({2}).set_requires_grad();
  EXPECT_ANY_THROW(backward(x));
}

TEST(Backward, AccumulatesAcrossCalls) {
  Tensor x = Tensor::vector({1, -2, 3}).set_requires_grad();
  Tensor loss = sum(mul(sin(x), x));
  backward(loss);
  std::vector<double> once(x.grad().begin(), x.grad().end());
  backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(x.grad()[i], 2.0 * once[i]);
  x.zero_grad();
  backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(x.grad()[i], once[i]);
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  // y = x^2 used twice: d(y + y)/dx = 4x.
  Tensor x = Tensor::scalar(1.5).set_requires_grad();
  Tensor y = square(x);
  backward(add(y, y));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, ReevaluationIsBitIdentical) {
  Rng rng(7);
  Tensor a = random_tensor({5, 4}, rng);
  Tensor b = random_tensor({4, 3}, rng);
  auto eval = [&] { return sum(softplus(matmul(a, b)), {0}); };
  Tensor r1 = eval(), r2 = eval();
  for (std::size_t i = 0; i < r1.numel(); ++i) EXPECT_EQ(r1[i], r2[i]);
}

TEST(NoGrad, GuardStopsRecording) {
  Tensor x = Tensor::scalar(2.0).set_requires_grad();
  {
    NoGradGuard guard;
    Tensor y = square(x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(square(x).requires_grad());
}

TEST(Leaves, InteriorNodesAreImmutable) {
  Tensor x = Tensor::scalar(2.0).set_requires_grad();
  Tensor y = square(x);
  EXPECT_ANY_THROW(y.mutable_data());
}

TEST(Svd3, ReconstructsAndOrdersSingularValues) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor({3, 3}, rng);
    Svd3 s = svd3(a);
    EXPECT_GE(s.s[0], s.s[1]);
    EXPECT_GE(s.s[1], s.s[2]);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < 3; ++k) acc += s.u[i * 3 + k] * s.s[k] * s.v[j * 3 + k];
        EXPECT_NEAR(acc, a[i * 3 + j], 1e-12);
      }
  }
}

// Every registered op passes central differences on 10 random inputs.
class OpGradcheck : public ::testing::TestWithParam<int> {};

TEST_P(OpGradcheck, RandomInputs) {
  Rng rng(100 + GetParam());
  const auto shape = Shape{3, 4};
  auto pos = [&] { return random_tensor(shape, rng, 0.5, 2.0); };
  auto any = [&] { return random_tensor(shape, rng); };
  struct Case {
    const char* name;
    GradFn fn;
    std::vector<Tensor> in;
  };
  std::vector<std::size_t> rows = {2, 0, 2};
  std::vector<Case> cases = {
      {"add", [](auto& v) { return add(v[0], v[1]); }, {any(), any()}},
      {"sub", [](auto& v) { return sub(v[0], v[1]); }, {any(), any()}},
      {"mul", [](auto& v) { return mul(v[0], v[1]); }, {any(), any()}},
      {"div", [](auto& v) { return div(v[0], v[1]); }, {any(), pos()}},
      {"exp", [](auto& v) { return exp(v[0]); }, {any()}},
      {"log", [](auto& v) { return log(v[0]); }, {pos()}},
      {"sigmoid", [](auto& v) { return sigmoid(v[0]); }, {any()}},
      {"softplus", [](auto& v) { return softplus(v[0]); }, {any()}},
      {"sqrt", [](auto& v) { return sqrt(v[0]); }, {pos()}},
      {"sin", [](auto& v) { return sin(v[0]); }, {any()}},
      {"cos", [](auto& v) { return cos(v[0]); }, {any()}},
      {"matmul", [](auto& v) { return matmul(v[0], transpose(v[1])); }, {any(), any()}},
      {"cumsum", [](auto& v) { return cumsum(v[0], 1, true); }, {any()}},
      {"concat", [](auto& v) { return concat({v[0], v[1]}, 1); }, {any(), any()}},
      {"index_select", [&](auto& v) { return index_select(v[0], rows); }, {any()}},
      {"mean", [](auto& v) { return mean(v[0], {0}); }, {any()}},
  };
  for (auto& c : cases) {
    auto r = gradcheck(c.fn, c.in);
    EXPECT_TRUE(r.ok) << c.name << " rel " << r.max_rel_error;
  }
}

INSTANTIATE_TEST_SUITE_P(TenDraws, OpGradcheck, ::testing::Range(0, 10));

TEST(Gradcheck, AllOpChecksPass) {
  for (const auto& c : gradient_checks(false)) EXPECT_TRUE(c.pass) << c.name << ": " << c.detail;
}

TEST(Gradcheck, InjectedSignErrorIsCaughtAndNamed) {
  sfpose::testing::inject_backward_sign_error("softplus");
  auto checks = gradient_checks(false);
  sfpose::testing::inject_backward_sign_error("");
  std::size_t failing = 0;
  for (const auto& c : checks) {
    if (!c.pass) {
      ++failing;
      EXPECT_NE(c.name.find("softplus"), std::string::npos) << c.name;
    }
  }
  EXPECT_GE(failing, 1u);
}
