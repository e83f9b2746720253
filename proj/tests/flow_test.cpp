#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "ccnf/flow.hpp"
#include "test_support.hpp"

namespace ccnf {
namespace {

using testing::max_abs_diff;
using testing::uniform_matrix;
using testing::uniform_vector;

Eigen::MatrixXd to_eigen(const DenseMatrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  }
  return e;
}

Vector to_vector(const Eigen::VectorXd& v) { return Vector(v.data(), v.data() + v.size()); }

// f(z, t, a) = A z + A B a: identity activation, W_in = [I | 0 | B], W_out = A.
// Closed-form flow map: z(t) = e^{At} z(0) + (e^{At} - I) B a.
ConditionedVectorField conditional_linear(const DenseMatrix& a, const DenseMatrix& b) {
  const std::size_t d = a.rows(), k = b.cols();
  ConditionedVectorField f(d, k, d, Activation::identity);
  Vector theta;
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < d; ++c) theta.push_back(r == c ? 1.0 : 0.0);
    theta.push_back(0.0);
    for (std::size_t c = 0; c < k; ++c) theta.push_back(b(r, c));
  }
  theta.insert(theta.end(), d, 0.0);
  theta.insert(theta.end(), a.data().begin(), a.data().end());
  theta.insert(theta.end(), d, 0.0);
  f.set_flat_parameters(theta);
  return f;
}

SolverConfig tight() {
  SolverConfig c;
  c.rtol = 1e-10;
  c.atol = 1e-10;
  return c;
}

FlowModel make_model(ConditionedVectorField f, SolverConfig solver = tight()) {
  const std::size_t k = f.k();
  return FlowModel{std::move(f), solver, AttributeNormalizer::unit(k)};
}

TEST(AttributeNormalizer, MapsRangesAndRejectsDegenerateAxes) {
  AttributeNormalizer n({{0, 100}, {-1, 1}});
  EXPECT_EQ(n.normalize(Vector{50, 0}), (Vector{0.5, 0.5}));
  EXPECT_EQ(n.denormalize(Vector{1, 0}), (Vector{100, -1}));
  EXPECT_THROW(AttributeNormalizer({{0, 1}, {3, 3}}), DegenerateDimension);
  try {
    AttributeNormalizer({{0, 1}, {3, 3}});
  } catch (const DegenerateDimension& e) {
    EXPECT_EQ(e.axis(), 1u);
  }
}

TEST(ForwardToBase, ZeroModelIsIdentity) {
  const auto m = make_model(ConditionedVectorField(3, 2, 4));
  const Vector s{0.5, -1.0, 2.0};
  const auto b = forward_to_base(m, s, Vector{0.2, 0.8});
  EXPECT_EQ(b.z0, s);
  EXPECT_EQ(b.delta_logp, 0.0);
}

TEST(ForwardToBase, LinearFieldMatchesMatrixExponential) {
  std::mt19937_64 rng(1);
  const DenseMatrix a = uniform_matrix(3, 3, rng, -1, 1);
  const auto m = make_model(ConditionedVectorField::linear(a));
  const Vector s = uniform_vector(3, rng);
  const auto b = forward_to_base(m, s, Vector{});
  const Vector want = to_vector((-to_eigen(a)).exp() * Eigen::Map<const Eigen::VectorXd>(s.data(), 3));
  EXPECT_LT(max_abs_diff(b.z0, want), 1e-7);
  // integrating backwards from the data end increases delta_logp by tr(A)
  EXPECT_NEAR(b.delta_logp, a(0, 0) + a(1, 1) + a(2, 2), 1e-8);
}

TEST(ForwardToBase, Deterministic) {
  const auto m = make_model(ConditionedVectorField::initialized(3, 1, 8, 2, 1.0));
  const Vector s{0.1, 0.2, 0.3}, a{0.4};
  const auto b1 = forward_to_base(m, s, a), b2 = forward_to_base(m, s, a);
  EXPECT_EQ(b1.z0, b2.z0);
  EXPECT_EQ(b1.delta_logp, b2.delta_logp);
}

TEST(LogLikelihood, StandardNormalAtOriginForZeroModel) {
  const auto m = make_model(ConditionedVectorField(2, 1, 3));
  EXPECT_NEAR(log_likelihood(m, Vector{0, 0}, Vector{0.5}), -std::log(2.0 * std::numbers::pi), 1e-15);
  EXPECT_NEAR(log_likelihood(m, Vector{0, 0}, Vector{0.5}), -1.8379, 1e-4);
}

TEST(LogLikelihood, LinearFieldMatchesGaussianPushforward) {
  std::mt19937_64 rng(3);
  const DenseMatrix a = uniform_matrix(2, 2, rng, -1, 1);
  const auto m = make_model(ConditionedVectorField::linear(a));
  // s = e^A z0 with z0 ~ N(0, I)  =>  s ~ N(0, e^A e^{A^T})
  const Eigen::MatrixXd ea = to_eigen(a).exp();
  const Eigen::MatrixXd cov = ea * ea.transpose();
  for (int i = 0; i < 5; ++i) {
    const Vector s = uniform_vector(2, rng);
    const Eigen::Map<const Eigen::VectorXd> sv(s.data(), 2);
    const double want = -std::log(2.0 * std::numbers::pi) - 0.5 * std::log(cov.determinant()) -
                        0.5 * sv.dot(cov.ldlt().solve(sv));
    EXPECT_NEAR(log_likelihood(m, s, Vector{}), want, 1e-7);
  }
}

TEST(LogLikelihood, OneDimensionalDensityIntegratesToOne) {
  // a nonlinear conditional 1-D flow; the pushforward must stay normalized for every a
  const auto m = make_model(ConditionedVectorField::initialized(1, 1, 16, 7, 1.5), SolverConfig::rk4(40));
  for (double a : {0.0, 0.5, 1.0}) {
    const double lo = -10.0, hi = 10.0;
    const int n = 4000;
    const double h = (hi - lo) / n;
    double mass = 0.0;
    for (int i = 0; i <= n; ++i) {
      const double w = (i == 0 || i == n) ? 0.5 : 1.0;
      mass += w * std::exp(log_likelihood(m, Vector{lo + i * h}, Vector{a}));
    }
    EXPECT_NEAR(mass * h, 1.0, 1e-2) << "a=" << a;
  }
}

TEST(LogLikelihood, HutchinsonMeanMatchesExact) {
  const auto m = make_model(ConditionedVectorField::initialized(3, 1, 8, 11, 1.0), SolverConfig::rk4(10));
  const Vector s{0.3, -0.6, 1.1}, a{0.7};
  const double exact = log_likelihood(m, s, a);
  Rng rng(5);
  constexpr int n = 10000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = log_likelihood(m, s, a, TraceMode::hutchinson(3, 1, rng));
    sum += v;
    sumsq += v * v;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sumsq - n * mean * mean) / (n - 1) / n);
  EXPECT_LT(std::abs(mean - exact), 3.0 * se);
}

TEST(Sample, ZeroModelReturnsTheGaussianDraw) {
  const auto m = make_model(ConditionedVectorField(3, 1, 2));
  Rng r1(17), r2(17);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Vector drawn = sample(m, Vector{0.3}, r1);
  for (double v : drawn) EXPECT_EQ(v, normal(r2));
}

TEST(Sample, ReproducibleAndConditionalMeanCorrect) {
  std::mt19937_64 gen(9);
  const DenseMatrix a = uniform_matrix(2, 2, gen, -0.5, 0.5);
  const DenseMatrix b = uniform_matrix(2, 1, gen, -2, 2);
  const auto m = make_model(conditional_linear(a, b), SolverConfig::rk4(20));
  Rng r1(1), r2(1);
  EXPECT_EQ(sample(m, Vector{0.5}, r1), sample(m, Vector{0.5}, r2));

  // E[s | a] = (e^A - I) B a
  const Eigen::MatrixXd ea = to_eigen(a).exp();
  const Eigen::VectorXd mean_want = (ea - Eigen::MatrixXd::Identity(2, 2)) * to_eigen(b) * 0.8;
  const Eigen::MatrixXd cov = ea * ea.transpose();
  Rng rng(3);
  constexpr int n = 10000;
  Vector mean(2, 0.0);
  for (int i = 0; i < n; ++i) mean = mean + sample(m, Vector{0.8}, rng);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_LT(std::abs(mean[i] / n - mean_want(i)), 3.0 * std::sqrt(cov(i, i) / n));
  }
}

TEST(Edit, IdentityEditRoundTrips) {
  const auto m = make_model(ConditionedVectorField::initialized(4, 2, 12, 4, 1.0));
  const Vector s{0.2, -0.4, 1.0, 0.0}, a{0.3, 0.6};
  const Vector back = edit(m, s, a, a);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_LT(std::abs(back[i] - s[i]), 10.0 * (m.solver.atol + m.solver.rtol * std::abs(s[i])));
  }
}

TEST(Edit, ZeroModelIgnoresTarget) {
  const auto m = make_model(ConditionedVectorField(2, 2, 3));
  EXPECT_EQ(edit(m, Vector{1, 2}, Vector{0, 0}, Vector{1, 1}), (Vector{1, 2}));
}

TEST(Edit, ConditionalLinearFlowShiftsByClosedForm) {
  std::mt19937_64 gen(21);
  const DenseMatrix a = uniform_matrix(3, 3, gen, -0.5, 0.5);
  const DenseMatrix b = uniform_matrix(3, 2, gen, -2, 2);
  const auto m = make_model(conditional_linear(a, b));
  const Vector s = uniform_vector(3, gen), from{0.2, 0.9}, to{0.7, 0.1};
  const Eigen::VectorXd da = Eigen::Vector2d(to[0] - from[0], to[1] - from[1]);
  const Eigen::VectorXd shift =
      (to_eigen(a).exp() - Eigen::MatrixXd::Identity(3, 3)) * to_eigen(b) * da;
  const Vector got = edit(m, s, from, to);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(got[i], s[i] + shift(i), 1e-7);
}

TEST(Edit, ClampsTargetsAndReports) {
  std::mt19937_64 gen(22);
  const auto m = make_model(conditional_linear(uniform_matrix(2, 2, gen, -0.5, 0.5), uniform_matrix(2, 1, gen)));
  Diagnostics diag;
  const Vector s{0.1, 0.2};
  const Vector clamped = edit(m, s, Vector{0.5}, Vector{1.7}, &diag);
  ASSERT_EQ(diag.warnings.size(), 1u);
  EXPECT_NE(diag.warnings[0].find("clamped"), std::string::npos);
  EXPECT_EQ(clamped, edit(m, s, Vector{0.5}, Vector{1.0}));
}

TEST(EditSingleAxis, LevelsAndErrors) {
  std::mt19937_64 gen(23);
  FlowModel m{conditional_linear(uniform_matrix(2, 2, gen, -0.5, 0.5), uniform_matrix(2, 2, gen)), tight(),
              AttributeNormalizer({{0, 200}, {0, 100}})};
  const Vector s{0.4, -0.3}, a{0.25, 0.5};
  // raw level 50 on a [0, 200] axis is the current value 0.25
  const Vector same = edit_single_axis(m, s, a, 0, 50.0);
  EXPECT_LT(max_abs_diff(same, s), 1e-8);
  EXPECT_EQ(edit_single_axis(m, s, a, 0, 200.0), edit(m, s, a, Vector{1.0, 0.5}));
  EXPECT_THROW(edit_single_axis(m, s, a, 2, 10.0), InvalidInput);
}

TEST(Checkpoint, RoundTripIsBitExactAndStable) {
  FlowModel m{ConditionedVectorField::initialized(3, 2, 5, 77, 0.3), SolverConfig::rk4(20),
              AttributeNormalizer({{0, 100}, {0, 200}})};
  std::ostringstream first;
  save_checkpoint(first, m);
  std::istringstream in(first.str());
  const FlowModel loaded = load_checkpoint(in);
  EXPECT_EQ(loaded, m);
  std::ostringstream second;
  save_checkpoint(second, loaded);
  EXPECT_EQ(first.str(), second.str());
}

TEST(Checkpoint, RejectsMalformedDocuments) {
  FlowModel m{ConditionedVectorField::initialized(2, 1, 3, 1), SolverConfig{}, AttributeNormalizer::unit(1)};
  std::ostringstream os;
  save_checkpoint(os, m);
  const std::string good = os.str();

  auto load = [](const std::string& text) {
    std::istringstream is(text);
    return load_checkpoint(is);
  };
  EXPECT_NO_THROW(load(good));
  auto replace = [&](const std::string& from, const std::string& to) {
    std::string s = good;
    s.replace(s.find(from), from.size(), to);
    return s;
  };
  EXPECT_THROW(load(replace("version=1", "version=2")), InvalidInput);
  EXPECT_THROW(load(replace("format=ccnf-checkpoint", "format=other")), InvalidInput);
  EXPECT_THROW(load(replace("hidden=3", "hidden=4")), InvalidInput);
  EXPECT_THROW(load(good.substr(0, good.rfind('\n', good.size() - 2) + 1)), InvalidInput);
  EXPECT_THROW(load(replace("attr.0.max=1", "attr.0.max=0")), DegenerateDimension);
}

}  // namespace
}  // namespace ccnf
