#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "decisionet/ops.hpp"
#include "decisionet/tensor.hpp"

using namespace dnet;
using Vec = std::vector<double>;

TEST(Tensor, SquareGradientAtThree) {
  auto x = Tensor<double>::scalar(3.0, true);
  auto y = mul(x, x);
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Tensor, RejectsShapeValueMismatch) {
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, Vec{1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(Tensor<double>(Shape{0, 3}), std::invalid_argument);
}

TEST(Tensor, ElementwiseShapeMismatchNamesShapes) {
  Tensor<double> a(Shape{2, 3}), b(Shape{3, 2});
  try {
    add(a, b);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
  }
}

TEST(Tensor, MatvecMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d;
  Vec av(12), xv(4);
  for (auto& v : av) v = d(rng);
  for (auto& v : xv) v = d(rng);
  Tensor<double> a(Shape{3, 4}, av, true), x(Shape{4}, xv, true);
  auto loss = sum(mul(matvec(a, x), matvec(a, x)));
  loss.backward();
  auto f = [&](const Vec& A, const Vec& X) {
    double s = 0;
    for (int i = 0; i < 3; ++i) {
      double r = 0;
      for (int j = 0; j < 4; ++j) r += A[i * 4 + j] * X[j];
      s += r * r;
    }
    return s;
  };
  const double h = 1e-6;
  for (int j = 0; j < 4; ++j) {
    Vec up = xv, dn = xv;
    up[j] += h;
    dn[j] -= h;
    EXPECT_NEAR(x.grad()[j], (f(av, up) - f(av, dn)) / (2 * h), 1e-6);
  }
  for (int k = 0; k < 12; ++k) {
    Vec up = av, dn = av;
    up[k] += h;
    dn[k] -= h;
    EXPECT_NEAR(a.grad()[k], (f(up, xv) - f(dn, xv)) / (2 * h), 1e-6);
  }
}

TEST(Tensor, GradientIsLinearInLoss) {
  Tensor<double> x(Shape{3}, Vec{0.5, -1.0, 2.0}, true);
  sum(mul(x, x)).backward();
  Vec g1(x.grad().begin(), x.grad().end());
  x.clear_grad();
  sum(scale(mul(x, x), 2.5)).backward();
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.5 * g1[i]);
}

TEST(Tensor, GradientsAccumulateUntilZeroed) {
  Tensor<double> x(Shape{2}, Vec{1.0, 2.0}, true);
  sum(scale(x, 3.0)).backward();
  sum(scale(x, 3.0)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  sum(scale(x, 3.0)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[1], 3.0);
}

TEST(Tensor, ReusedInputSumsBothPaths) {
  auto x = Tensor<double>::scalar(2.0, true);
  auto y = add(mul(x, x), scale(x, 4.0));
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(Tensor, SecondBackwardThrows) {
  auto x = Tensor<double>::scalar(1.5, true);
  auto y = mul(x, x);
  y.backward();
  EXPECT_THROW(y.backward(), std::logic_error);
}

TEST(Tensor, NonScalarBackwardThrows) {
  Tensor<double> x(Shape{2}, Vec{1, 2}, true);
  EXPECT_THROW(scale(x, 2.0).backward(), std::invalid_argument);
}

TEST(Tensor, NoGradGuardSkipsRecording) {
  Tensor<double> x(Shape{2}, Vec{1, 2}, true);
  Tensor<double> y;
  {
    NoGradGuard guard;
    y = sum(mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
  y.backward();
  EXPECT_FALSE(x.has_grad());
}

TEST(Tensor, StepHasZeroGradient) {
  Tensor<double> x(Shape{3}, Vec{-1.0, 0.5, 2.0}, true);
  auto s = step(x);
  EXPECT_EQ(s[0], 0.0);
  EXPECT_EQ(s[2], 1.0);
  sum(s).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Tensor, StorageIsCacheLineAligned) {
  auto aligned = [](const auto& t) { return reinterpret_cast<std::uintptr_t>(t.data().data()) % 64 == 0; };
  std::vector<Tensor<float>> keep;
  for (std::size_t n = 1; n < 40; n += 3) {
    Tensor<float> a(Shape{n}, 1.0f, true), b(Shape{n}, std::vector<float>(n, 2.0f), true);
    auto c = add(a, b);
    EXPECT_TRUE(aligned(a) && aligned(b) && aligned(c) && aligned(c.detach()));
    sum(c).backward();
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(a.grad().data()) % 64, 0u);
    keep.push_back(c);
  }
}

TEST(Tensor, BackwardIsDeterministic) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> u(-1, 1);
  std::vector<float> v(64), m(64 * 8);
  for (auto& e : v) e = u(rng);
  for (auto& e : m) e = u(rng);
  auto run = [&] {
    Tensor<float> a(Shape{8, 64}, m, true), x(Shape{64}, v, true);
    mean(mul(matvec(a, x), matvec(a, x))).backward();
    return std::vector<float>(a.grad().begin(), a.grad().end());
  };
  EXPECT_EQ(run(), run());
}

template <typename T>
class SerializationTest : public ::testing::Test {};
using Scalars = ::testing::Types<float, double>;
TYPED_TEST_SUITE(SerializationTest, Scalars);

TYPED_TEST(SerializationTest, RoundTripIsBitExact) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> dim(1, 5), rank(1, 4);
  std::normal_distribution<double> d(0.0, 100.0);
  for (int trial = 0; trial < 50; ++trial) {
    Shape s(rank(rng));
    for (auto& e : s) e = dim(rng);
    std::vector<TypeParam> vals(numel(s));
    for (auto& e : vals) e = static_cast<TypeParam>(d(rng));
    Tensor<TypeParam> t(s, vals);
    std::stringstream ss;
    write_tensor(ss, t);
    auto back = read_tensor<TypeParam>(ss);
    ASSERT_EQ(back.shape(), s);
    for (std::size_t i = 0; i < vals.size(); ++i) ASSERT_EQ(back[i], vals[i]);
  }
}

TEST(Serialization, TruncatedBlobThrows) {
  Tensor<double> t(Shape{4}, Vec{1, 2, 3, 4});
  std::stringstream ss;
  write_tensor(ss, t);
  auto bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_tensor<double>(cut), DataError);
}
