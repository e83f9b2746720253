#pragma once

// Integration of the augmented system
//   dz/dt     = f(z, t, a)
//   dlogp/dt  = -tr(df/dz)
// with fixed-step RK4 (plain or recorded on a tape) or adaptive Dormand-Prince 5(4).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "ccnf/autodiff.hpp"
#include "ccnf/errors.hpp"
#include "ccnf/tensor.hpp"
#include "ccnf/vector_field.hpp"

namespace ccnf {

enum class SolverMethod { rk4_fixed, dopri5_adaptive };

struct SolverConfig {
  SolverMethod method = SolverMethod::dopri5_adaptive;
  std::size_t steps = 20;
  double rtol = 1e-5;
  double atol = 1e-5;
  std::size_t max_steps = 10000;

  static SolverConfig rk4(std::size_t steps) {
    SolverConfig c;
    c.method = SolverMethod::rk4_fixed;
    c.steps = steps;
    return c;
  }

  void validate() const {
    if (!(rtol > 0.0) || !(atol > 0.0)) throw InvalidInput("solver: rtol and atol must be > 0");
    if (steps < 1) throw InvalidInput("solver: steps must be >= 1");
    if (max_steps < 1) throw InvalidInput("solver: max_steps must be >= 1");
  }

  friend bool operator==(const SolverConfig&, const SolverConfig&) = default;
};

struct AugmentedState {
  Vector z;
  double delta_logp = 0.0;
};

struct IntegrationStats {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t evaluations = 0;
};

template <class Ops>
struct AugmentedVars {
  typename Ops::Vec z;
  typename Ops::Vec delta_logp;
};

namespace detail {

inline void check_integration_input(const ConditionedVectorField& f, const AugmentedState& s,
                                    double t_start, double t_end, std::span<const double> a) {
  if (s.z.size() != f.d()) throw InvalidInput("integrate: len(z) does not match field d");
  if (a.size() != f.k()) throw InvalidInput("integrate: len(a) does not match field k");
  if (t_start == t_end) throw InvalidInput("integrate: t_start must differ from t_end");
  if (!all_finite(s.z) || !std::isfinite(s.delta_logp) || !all_finite(a)) {
    throw InvalidInput("integrate: non-finite initial state or condition");
  }
}

template <class Ops>
void check_finite(const Ops& ops, const AugmentedVars<Ops>& v, double t) {
  if (!all_finite(ops.value(v.z)) || !all_finite(ops.value(v.delta_logp))) {
    throw InstabilityError("integrate: non-finite state at t=" + std::to_string(t));
  }
}

}  // namespace detail

// Classic RK4 over `steps` equal steps. Shared by the plain and the recorded paths.
template <class Ops>
AugmentedVars<Ops> rk4_augmented(Ops& ops, const FieldParams<Ops>& p,
                                 const ConditionedVectorField& f, AugmentedVars<Ops> y,
                                 double t_start, double t_end, std::size_t steps,
                                 const typename Ops::Vec& cond, const TraceTerms<Ops>& trace) {
  const bool tracing = trace.method != TraceMethod::none;
  const double h = (t_end - t_start) / static_cast<double>(steps);
  struct Slope {
    typename Ops::Vec dz;
    typename Ops::Vec dl;
  };
  auto slope = [&](const typename Ops::Vec& z, double t) {
    auto st = evaluate_field(ops, p, f.activation(), z, t, cond);
    Slope s{st.velocity, {}};
    if (tracing) s.dl = stage_trace(ops, p, trace, st.gate);
    return s;
  };
  for (std::size_t n = 0; n < steps; ++n) {
    const double t = t_start + static_cast<double>(n) * h;
    Slope k1 = slope(y.z, t);
    Slope k2 = slope(ops.axpy(y.z, 0.5 * h, k1.dz), t + 0.5 * h);
    Slope k3 = slope(ops.axpy(y.z, 0.5 * h, k2.dz), t + 0.5 * h);
    Slope k4 = slope(ops.axpy(y.z, h, k3.dz), t + h);
    auto acc = ops.add(ops.axpy(ops.axpy(k1.dz, 2.0, k2.dz), 2.0, k3.dz), k4.dz);
    y.z = ops.axpy(y.z, h / 6.0, acc);
    if (tracing) {
      auto accl = ops.add(ops.axpy(ops.axpy(k1.dl, 2.0, k2.dl), 2.0, k3.dl), k4.dl);
      // d(logp)/dt = -trace
      y.delta_logp = ops.axpy(y.delta_logp, -h / 6.0, accl);
    }
    detail::check_finite(ops, y, t + h);
  }
  return y;
}

namespace detail {

// Dormand-Prince 5(4) tableau.
struct Dopri5 {
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                          a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                          a64 = 49.0 / 176, a65 = -5103.0 / 18656;
  static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                          b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  // b - b_hat (fifth minus embedded fourth order weights)
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                          e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
};

}  // namespace detail

// Adaptive Dormand-Prince 5(4) with PI step control on the augmented state
// y = (z, logp). The step is accepted when the RMS of
// err_i / (atol + rtol * max(|y_i|, |y_new_i|)) is <= 1.
inline AugmentedState dopri5_augmented(const ConditionedVectorField& f, const AugmentedState& s0,
                                       double t_start, double t_end, std::span<const double> a,
                                       const SolverConfig& cfg, const TraceMode& mode,
                                       IntegrationStats* stats = nullptr) {
  using T = detail::Dopri5;
  PlainOps ops;
  const auto p = plain_params(f);
  const Vector cond(a.begin(), a.end());
  const TraceTerms<PlainOps> trace = prepare_trace(ops, p, f, mode);
  const bool tracing = mode.method != TraceMethod::none;
  const std::size_t d = f.d();
  const std::size_t n = tracing ? d + 1 : d;

  auto rhs = [&](const Vector& y, double t, Vector& out) {
    Vector z(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(d));
    auto st = evaluate_field(ops, p, f.activation(), z, t, cond);
    std::copy(st.velocity.begin(), st.velocity.end(), out.begin());
    if (tracing) out[d] = -stage_trace(ops, p, trace, st.gate)[0];
    if (stats) ++stats->evaluations;
  };

  Vector y(n);
  std::copy(s0.z.begin(), s0.z.end(), y.begin());
  if (tracing) y[d] = s0.delta_logp;

  const double direction = t_end > t_start ? 1.0 : -1.0;
  double h = (t_end - t_start) / 100.0;
  double t = t_start;
  double err_prev = 1.0;
  constexpr double safety = 0.9, min_factor = 0.2, max_factor = 5.0;
  constexpr double alpha = 0.7 / 5.0, beta = 0.4 / 5.0;

  std::array<Vector, 7> k;
  for (auto& ki : k) ki.assign(n, 0.0);
  Vector tmp(n), y_new(n);
  rhs(y, t, k[0]);
  std::size_t attempts = 0;

  auto stage = [&](std::initializer_list<std::pair<std::size_t, double>> terms) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (const auto& [idx, coef] : terms) acc += coef * k[idx][i];
      tmp[i] = y[i] + h * acc;
    }
  };

  while (direction * (t_end - t) > 0.0) {
    if (++attempts > cfg.max_steps) {
      throw DivergenceError("dopri5: exceeded max_steps=" + std::to_string(cfg.max_steps) +
                            " at t=" + std::to_string(t));
    }
    bool last = false;
    if (direction * (t + h - t_end) >= 0.0) {
      h = t_end - t;
      last = true;
    }
    stage({{0, T::a21}});
    rhs(tmp, t + T::c2 * h, k[1]);
    stage({{0, T::a31}, {1, T::a32}});
    rhs(tmp, t + T::c3 * h, k[2]);
    stage({{0, T::a41}, {1, T::a42}, {2, T::a43}});
    rhs(tmp, t + T::c4 * h, k[3]);
    stage({{0, T::a51}, {1, T::a52}, {2, T::a53}, {3, T::a54}});
    rhs(tmp, t + T::c5 * h, k[4]);
    stage({{0, T::a61}, {1, T::a62}, {2, T::a63}, {3, T::a64}, {4, T::a65}});
    rhs(tmp, t + h, k[5]);
    for (std::size_t i = 0; i < n; ++i) {
      y_new[i] = y[i] + h * (T::b1 * k[0][i] + T::b3 * k[2][i] + T::b4 * k[3][i] +
                             T::b5 * k[4][i] + T::b6 * k[5][i]);
    }
    rhs(y_new, t + h, k[6]);

    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = h * (T::e1 * k[0][i] + T::e3 * k[2][i] + T::e4 * k[3][i] +
                            T::e5 * k[4][i] + T::e6 * k[5][i] + T::e7 * k[6][i]);
      const double sc = cfg.atol + cfg.rtol * std::max(std::abs(y[i]), std::abs(y_new[i]));
      err += (e / sc) * (e / sc);
    }
    err = std::sqrt(err / static_cast<double>(n));
    if (!std::isfinite(err) || !all_finite(y_new)) {
      throw InstabilityError("dopri5: non-finite state near t=" + std::to_string(t));
    }

    if (err <= 1.0) {
      t = last ? t_end : t + h;
      y.swap(y_new);
      k[0].swap(k[6]);  // first-same-as-last
      if (stats) ++stats->accepted;
      const double e = std::max(err, 1e-10);
      const double factor =
          std::clamp(safety * std::pow(e, -alpha) * std::pow(err_prev, beta), min_factor, max_factor);
      err_prev = e;
      h *= factor;
    } else {
      if (stats) ++stats->rejected;
      h *= std::max(min_factor, safety * std::pow(err, -1.0 / 5.0));
    }
  }

  AugmentedState out;
  out.z.assign(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(d));
  out.delta_logp = tracing ? y[d] : s0.delta_logp;
  return out;
}

// Integrates the augmented state from t_start to t_end (either direction)
// under condition a. delta_logp advances by -int tr(df/dz) dt along the path.
inline AugmentedState integrate(const ConditionedVectorField& f, const AugmentedState& state0,
                                double t_start, double t_end, std::span<const double> a,
                                const SolverConfig& cfg, const TraceMode& mode,
                                IntegrationStats* stats = nullptr) {
  cfg.validate();
  detail::check_integration_input(f, state0, t_start, t_end, a);
  if (cfg.method == SolverMethod::dopri5_adaptive) {
    return dopri5_augmented(f, state0, t_start, t_end, a, cfg, mode, stats);
  }
  PlainOps ops;
  const auto p = plain_params(f);
  const Vector cond(a.begin(), a.end());
  const auto trace = prepare_trace(ops, p, f, mode);
  AugmentedVars<PlainOps> y{state0.z, {state0.delta_logp}};
  y = rk4_augmented(ops, p, f, y, t_start, t_end, cfg.steps, cond, trace);
  if (stats) {
    stats->accepted += cfg.steps;
    stats->evaluations += 4 * cfg.steps;
  }
  return {y.z, y.delta_logp[0]};
}

// Handles into a tape holding one recorded RK4 integration.
struct RecordedHandles {
  FieldParams<TapeOps> params;
  ad::Var z_in;
  ad::Var z_out;
  ad::Var delta_logp_out;
};

// Appends a fixed-step RK4 integration to `tape`. The field's parameters become
// parameter leaves, the initial state an input leaf.
inline RecordedHandles record_integration(ad::Tape& tape, const ConditionedVectorField& f,
                                          const AugmentedState& state0, double t_start,
                                          double t_end, std::span<const double> a,
                                          const SolverConfig& cfg, const TraceMode& mode) {
  cfg.validate();
  if (cfg.method != SolverMethod::rk4_fixed) {
    throw CapabilityError("integrate_recorded: only rk4_fixed has a static graph; got dopri5_adaptive");
  }
  detail::check_integration_input(f, state0, t_start, t_end, a);
  TapeOps ops{&tape};
  RecordedHandles h;
  h.params = record_params(tape, f);
  h.z_in = tape.input(state0.z);
  const ad::Var cond = tape.constant(a);
  const auto trace = prepare_trace(ops, h.params, f, mode);
  AugmentedVars<TapeOps> y{h.z_in, tape.constant(state0.delta_logp)};
  y = rk4_augmented(ops, h.params, f, y, t_start, t_end, cfg.steps, cond, trace);
  h.z_out = y.z;
  h.delta_logp_out = y.delta_logp;
  return h;
}

struct RecordedIntegration {
  AugmentedState state;
  ad::Tape tape;
  RecordedHandles handles;
};

// Same numerics as integrate() with rk4_fixed, with every stage recorded so
// that backward() yields gradients w.r.t. the field parameters.
inline RecordedIntegration integrate_recorded(const ConditionedVectorField& f,
                                              const AugmentedState& state0, double t_start,
                                              double t_end, std::span<const double> a,
                                              const SolverConfig& cfg, const TraceMode& mode) {
  RecordedIntegration r;
  r.handles = record_integration(r.tape, f, state0, t_start, t_end, a, cfg, mode);
  auto z = r.tape.value(r.handles.z_out);
  r.state.z.assign(z.begin(), z.end());
  r.state.delta_logp = r.tape.scalar(r.handles.delta_logp_out);
  return r;
}

}  // namespace ccnf
