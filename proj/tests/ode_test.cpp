#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>
#include <cmath>
#include <random>

#include "ccnf/ode.hpp"
#include "test_support.hpp"

namespace ccnf {
namespace {

using testing::fd_gradient;
using testing::max_abs_diff;
using testing::relative_error;
using testing::uniform_matrix;
using testing::uniform_vector;

SolverConfig tight_dopri() {
  SolverConfig c;
  c.rtol = 1e-10;
  c.atol = 1e-10;
  return c;
}

// exp(A) z via Eigen's matrix exponential.
Vector expm_apply(const DenseMatrix& a, const Vector& z, double t) {
  const std::size_t d = a.rows();
  Eigen::MatrixXd m(d, d);
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < d; ++c) m(r, c) = a(r, c) * t;
  }
  const Eigen::MatrixXd e = m.exp();
  const Eigen::VectorXd out = e * Eigen::Map<const Eigen::VectorXd>(z.data(), d);
  return Vector(out.data(), out.data() + d);
}

TEST(Integrate, ZeroFieldLeavesStateUnchanged) {
  ConditionedVectorField f(3, 1, 4);
  const AugmentedState s0{{1, 2, 3}, 0.5};
  for (const auto& cfg : {SolverConfig::rk4(7), SolverConfig{}}) {
    const auto s1 = integrate(f, s0, 0.0, 1.0, Vector{0.3}, cfg, TraceMode::exact());
    EXPECT_EQ(s1.z, s0.z);
    EXPECT_EQ(s1.delta_logp, 0.5);
  }
}

TEST(Integrate, LinearFieldMatchesMatrixExponential) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const DenseMatrix a = uniform_matrix(3, 3, rng, -1, 1);
    const auto f = ConditionedVectorField::linear(a);
    const Vector z0 = uniform_vector(3, rng);
    const double tr = a(0, 0) + a(1, 1) + a(2, 2);
    const Vector want = expm_apply(a, z0, 1.0);

    const auto adaptive = integrate(f, {z0, 0.0}, 0.0, 1.0, Vector{}, tight_dopri(), TraceMode::exact());
    EXPECT_LT(max_abs_diff(adaptive.z, want), 1e-6);
    EXPECT_NEAR(adaptive.delta_logp, -tr, 1e-8);

    const auto fixed = integrate(f, {z0, 0.0}, 0.0, 1.0, Vector{}, SolverConfig::rk4(200), TraceMode::exact());
    EXPECT_LT(max_abs_diff(fixed.z, want), 1e-6);
    EXPECT_NEAR(fixed.delta_logp, -tr, 1e-12);
  }
}

TEST(Integrate, ForwardThenBackwardIsIdentity) {
  const auto f = ConditionedVectorField::initialized(4, 2, 12, 5, 1.0);
  std::mt19937_64 rng(2);
  const Vector a{0.2, 0.9};
  for (const auto& cfg : {SolverConfig::rk4(100), tight_dopri()}) {
    const Vector z0 = uniform_vector(4, rng);
    const auto there = integrate(f, {z0, 0.0}, 0.0, 1.0, a, cfg, TraceMode::exact());
    const auto back = integrate(f, there, 1.0, 0.0, a, cfg, TraceMode::exact());
    EXPECT_LT(max_abs_diff(back.z, z0), 1e-6);
    EXPECT_NEAR(back.delta_logp, 0.0, 1e-6);
  }
}

TEST(Integrate, RejectsBadInputs) {
  ConditionedVectorField f(2, 1, 3);
  const Vector a{0.5};
  EXPECT_THROW(integrate(f, {{1, 2, 3}, 0}, 0, 1, a, SolverConfig{}, TraceMode::none()), InvalidInput);
  EXPECT_THROW(integrate(f, {{1, NAN}, 0}, 0, 1, a, SolverConfig{}, TraceMode::none()), InvalidInput);
  SolverConfig bad;
  bad.rtol = 0;
  EXPECT_THROW(integrate(f, {{1, 2}, 0}, 0, 1, a, bad, TraceMode::none()), InvalidInput);
  EXPECT_THROW(integrate(f, {{1, 2}, 0}, 0, 1, a, SolverConfig::rk4(0), TraceMode::none()), InvalidInput);
}

TEST(Integrate, AdaptiveStepBudgetRaisesDivergence) {
  DenseMatrix a(1, 1);
  a(0, 0) = 40.0;
  const auto f = ConditionedVectorField::linear(a);
  SolverConfig cfg = tight_dopri();
  cfg.max_steps = 5;
  EXPECT_THROW(integrate(f, {{1.0}, 0.0}, 0, 1, Vector{}, cfg, TraceMode::none()), DivergenceError);
}

TEST(Integrate, NonFiniteStateRaisesInstability) {
  DenseMatrix a(1, 1);
  a(0, 0) = 1e100;
  const auto f = ConditionedVectorField::linear(a);
  EXPECT_THROW(integrate(f, {{1.0}, 0.0}, 0, 1, Vector{}, SolverConfig::rk4(2), TraceMode::none()),
               InstabilityError);
}

TEST(Integrate, AdaptiveAndFixedAgree) {
  const auto f = ConditionedVectorField::initialized(3, 2, 16, 9, 1.0);
  const Vector z0{0.4, -1.0, 0.7}, a{0.6, 0.1};
  IntegrationStats stats;
  const auto adaptive = integrate(f, {z0, 0.0}, 1.0, 0.0, a, tight_dopri(), TraceMode::exact(), &stats);
  const auto fixed = integrate(f, {z0, 0.0}, 1.0, 0.0, a, SolverConfig::rk4(400), TraceMode::exact());
  EXPECT_LT(max_abs_diff(adaptive.z, fixed.z), 1e-8);
  EXPECT_NEAR(adaptive.delta_logp, fixed.delta_logp, 1e-8);
  EXPECT_GT(stats.accepted, 0u);
  EXPECT_GT(stats.evaluations, stats.accepted);
}

TEST(Integrate, Rk4IsFourthOrder) {
  const auto f = ConditionedVectorField::initialized(3, 1, 10, 21, 1.0);
  const Vector z0{1.0, -0.5, 0.25}, a{0.4};
  const auto ref = integrate(f, {z0, 0.0}, 0.0, 1.0, a, tight_dopri(), TraceMode::exact());
  std::vector<double> logh, loge;
  for (std::size_t n : {5, 10, 20, 40}) {
    const auto s = integrate(f, {z0, 0.0}, 0.0, 1.0, a, SolverConfig::rk4(n), TraceMode::exact());
    logh.push_back(std::log(1.0 / static_cast<double>(n)));
    loge.push_back(std::log(max_abs_diff(s.z, ref.z)));
  }
  // least-squares slope
  double mh = 0, me = 0;
  for (std::size_t i = 0; i < logh.size(); ++i) {
    mh += logh[i];
    me += loge[i];
  }
  mh /= logh.size();
  me /= logh.size();
  double num = 0, den = 0;
  for (std::size_t i = 0; i < logh.size(); ++i) {
    num += (logh[i] - mh) * (loge[i] - me);
    den += (logh[i] - mh) * (logh[i] - mh);
  }
  const double slope = num / den;
  EXPECT_GT(slope, 3.7);
  EXPECT_LT(slope, 4.3);
}

TEST(IntegrateRecorded, BitIdenticalToPlainRk4) {
  const auto f = ConditionedVectorField::initialized(4, 2, 8, 3, 1.0);
  const Vector z0{0.1, 0.2, -0.3, 0.4}, a{0.5, 0.25};
  const auto cfg = SolverConfig::rk4(20);
  for (const auto& mode : {TraceMode::exact(), TraceMode::none()}) {
    const auto plain = integrate(f, {z0, 0.0}, 1.0, 0.0, a, cfg, mode);
    const auto rec = integrate_recorded(f, {z0, 0.0}, 1.0, 0.0, a, cfg, mode);
    EXPECT_EQ(plain.z, rec.state.z);
    EXPECT_EQ(plain.delta_logp, rec.state.delta_logp);
  }
  Rng rng(4);
  const auto probes = TraceMode::hutchinson(4, 2, rng);
  EXPECT_EQ(integrate(f, {z0, 0.0}, 1.0, 0.0, a, cfg, probes).delta_logp,
            integrate_recorded(f, {z0, 0.0}, 1.0, 0.0, a, cfg, probes).state.delta_logp);
}

TEST(IntegrateRecorded, AdaptiveSolverHasNoStaticGraph) {
  ConditionedVectorField f(2, 0, 2);
  EXPECT_THROW(integrate_recorded(f, {{0, 0}, 0}, 0, 1, Vector{}, SolverConfig{}, TraceMode::none()),
               CapabilityError);
}

TEST(IntegrateRecorded, GradientMatchesFiniteDifferences) {
  const auto f = ConditionedVectorField::initialized(2, 1, 5, 31, 1.0);
  const Vector z0{0.7, -0.2}, a{0.3};
  const auto cfg = SolverConfig::rk4(10);
  // scalar loss: 0.5 |z(0)|^2 + delta_logp
  auto loss = [&](const ConditionedVectorField& g) {
    const auto s = integrate(g, {z0, 0.0}, 1.0, 0.0, a, cfg, TraceMode::exact());
    return 0.5 * dot(s.z, s.z) + s.delta_logp;
  };
  auto rec = integrate_recorded(f, {z0, 0.0}, 1.0, 0.0, a, cfg, TraceMode::exact());
  auto& tape = rec.tape;
  const auto& h = rec.handles;
  const ad::Var out = tape.add(tape.scale(tape.sqnorm(h.z_out), 0.5), h.delta_logp_out);
  tape.finalize();
  tape.backward(out, Vector{1.0});
  Vector grad;
  for (ad::Var v : {h.params.w_in, h.params.b_in, h.params.w_out, h.params.b_out}) {
    const auto g = tape.gradient(v);
    grad.insert(grad.end(), g.begin(), g.end());
  }
  const Vector fd = fd_gradient(
      [&](const Vector& theta) {
        auto g = f;
        g.set_flat_parameters(theta);
        return loss(g);
      },
      f.flat_parameters());
  EXPECT_LT(relative_error(grad, fd), 1e-5);
  EXPECT_GE(grad.size(), 5u);
}

}  // namespace
}  // namespace ccnf
