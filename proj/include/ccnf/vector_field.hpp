#pragma once

// The conditioned right-hand side f(z, t, a; theta): two affine layers with a
// tanh between them, fed the concatenation [z | t | a].
//
// Evaluation is written once as templates over an "ops" backend. PlainOps runs
// on std::vector; TapeOps records onto an ad::Tape so the same arithmetic can be
// differentiated w.r.t. the parameters.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ccnf/autodiff.hpp"
#include "ccnf/errors.hpp"
#include "ccnf/tensor.hpp"

namespace ccnf {

using Rng = std::mt19937_64;

enum class Activation { tanh, identity };

class ConditionedVectorField {
 public:
  ConditionedVectorField() = default;

  // All parameters zero: f == 0 everywhere.
  ConditionedVectorField(std::size_t d, std::size_t k, std::size_t hidden,
                         Activation activation = Activation::tanh)
      : d_(d),
        k_(k),
        activation_(activation),
        w_in_(hidden, d + 1 + k),
        b_in_(hidden, 0.0),
        w_out_(d, hidden),
        b_out_(d, 0.0) {
    if (d == 0 || hidden == 0) throw InvalidInput("vector field: d and hidden must be positive");
  }

  // Weights and biases uniform in +-1/sqrt(fan_in); the output layer is then
  // multiplied by `output_scale` so the initial flow stays close to identity.
  static ConditionedVectorField initialized(std::size_t d, std::size_t k, std::size_t hidden,
                                            std::uint64_t seed, double output_scale = 0.01) {
    ConditionedVectorField f(d, k, hidden);
    Rng rng(seed);
    auto fill = [&rng](std::span<double> xs, double bound, double scale) {
      std::uniform_real_distribution<double> u(-bound, bound);
      for (double& x : xs) x = scale * u(rng);
    };
    const double in_bound = 1.0 / std::sqrt(static_cast<double>(d + 1 + k));
    const double out_bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    fill(f.w_in_.data(), in_bound, 1.0);
    fill(f.b_in_, in_bound, 1.0);
    fill(f.w_out_.data(), out_bound, output_scale);
    fill(f.b_out_, out_bound, output_scale);
    return f;
  }

  // Test hook: f(z, t, a) = A z. Identity activation, hidden width d, W_in = [I | 0].
  static ConditionedVectorField linear(const DenseMatrix& a, std::size_t k = 0) {
    if (a.rows() != a.cols()) throw InvalidInput("linear field: A must be square");
    const std::size_t d = a.rows();
    ConditionedVectorField f(d, k, d, Activation::identity);
    for (std::size_t i = 0; i < d; ++i) f.w_in_(i, i) = 1.0;
    f.w_out_ = a;
    return f;
  }

  std::size_t d() const noexcept { return d_; }
  std::size_t k() const noexcept { return k_; }
  std::size_t hidden() const noexcept { return w_in_.rows(); }
  Activation activation() const noexcept { return activation_; }

  const DenseMatrix& w_in() const noexcept { return w_in_; }
  const Vector& b_in() const noexcept { return b_in_; }
  const DenseMatrix& w_out() const noexcept { return w_out_; }
  const Vector& b_out() const noexcept { return b_out_; }
  DenseMatrix& w_in() noexcept { return w_in_; }
  Vector& b_in() noexcept { return b_in_; }
  DenseMatrix& w_out() noexcept { return w_out_; }
  Vector& b_out() noexcept { return b_out_; }

  // Flat layout: w_in (row-major), b_in, w_out (row-major), b_out.
  std::size_t parameter_count() const noexcept {
    return w_in_.size() + b_in_.size() + w_out_.size() + b_out_.size();
  }

  Vector flat_parameters() const {
    Vector p;
    p.reserve(parameter_count());
    p.insert(p.end(), w_in_.data().begin(), w_in_.data().end());
    p.insert(p.end(), b_in_.begin(), b_in_.end());
    p.insert(p.end(), w_out_.data().begin(), w_out_.data().end());
    p.insert(p.end(), b_out_.begin(), b_out_.end());
    return p;
  }

  void set_flat_parameters(std::span<const double> p) {
    if (p.size() != parameter_count()) throw InvalidInput("set_flat_parameters: wrong length");
    if (!all_finite(p)) throw InvalidInput("set_flat_parameters: non-finite parameter");
    auto it = p.begin();
    auto take = [&it](std::span<double> dst) {
      std::copy(it, it + static_cast<std::ptrdiff_t>(dst.size()), dst.begin());
      it += static_cast<std::ptrdiff_t>(dst.size());
    };
    take(w_in_.data());
    take(b_in_);
    take(w_out_.data());
    take(b_out_);
  }

  friend bool operator==(const ConditionedVectorField&, const ConditionedVectorField&) = default;

 private:
  std::size_t d_ = 0;
  std::size_t k_ = 0;
  Activation activation_ = Activation::tanh;
  DenseMatrix w_in_;
  Vector b_in_;
  DenseMatrix w_out_;
  Vector b_out_;
};

// ---------------------------------------------------------------------------
// Backends

struct PlainOps {
  using Vec = Vector;
  using Mat = const DenseMatrix*;

  Vec constant(std::span<const double> x) { return Vec(x.begin(), x.end()); }
  Vec affine(Mat w, const Vec& b, const Vec& x) {
    Vec out(w->rows());
    kernels::affine(w->data().data(), w->rows(), w->cols(), b.data(), x.data(), out.data());
    return out;
  }
  Vec matvec(Mat w, const Vec& x) {
    Vec out(w->rows());
    kernels::affine(w->data().data(), w->rows(), w->cols(), nullptr, x.data(), out.data());
    return out;
  }
  Vec tanh(const Vec& x) {
    Vec out(x.size());
    kernels::tanh(x.data(), x.size(), out.data());
    return out;
  }
  Vec one_minus_square(const Vec& y) {
    Vec out(y.size());
    kernels::one_minus_square(y.data(), y.size(), out.data());
    return out;
  }
  Vec mul(const Vec& a, const Vec& b) {
    Vec out(a.size());
    kernels::mul(a.data(), b.data(), a.size(), out.data());
    return out;
  }
  Vec add(const Vec& a, const Vec& b) { return axpy(a, 1.0, b); }
  Vec axpy(const Vec& x, double alpha, const Vec& y) {
    Vec out(x.size());
    kernels::axpy(x.data(), alpha, y.data(), x.size(), out.data());
    return out;
  }
  Vec scale(const Vec& x, double alpha) {
    Vec out(x.size());
    kernels::scale(x.data(), alpha, x.size(), out.data());
    return out;
  }
  Vec concat(const Vec& a, const Vec& b) {
    Vec out(a);
    out.insert(out.end(), b.begin(), b.end());
    return out;
  }
  Vec dot(const Vec& a, const Vec& b) { return {kernels::dot(a.data(), b.data(), a.size())}; }
  Vec sum(const Vec& x) { return {kernels::sum(x.data(), x.size())}; }
  Vec sqnorm(const Vec& x) { return {kernels::dot(x.data(), x.data(), x.size())}; }
  Vec diag_contract(Mat w_out, Mat w_in, std::size_t prefix) {
    Vec out(w_out->cols());
    kernels::diag_contract(w_out->data().data(), w_out->rows(), w_out->cols(), w_in->data().data(),
                           w_in->cols(), prefix, out.data());
    return out;
  }
  std::span<const double> value(const Vec& v) const { return v; }
};

struct TapeOps {
  using Vec = ad::Var;
  using Mat = ad::Var;

  ad::Tape* tape;

  Vec constant(std::span<const double> x) { return tape->constant(x); }
  Vec affine(Mat w, Vec b, Vec x) { return tape->affine(w, b, x); }
  Vec matvec(Mat w, Vec x) { return tape->matvec(w, x); }
  Vec tanh(Vec x) { return tape->tanh(x); }
  Vec one_minus_square(Vec y) { return tape->one_minus_square(y); }
  Vec mul(Vec a, Vec b) { return tape->mul(a, b); }
  Vec add(Vec a, Vec b) { return tape->add(a, b); }
  Vec axpy(Vec x, double alpha, Vec y) { return tape->axpy(x, alpha, y); }
  Vec scale(Vec x, double alpha) { return tape->scale(x, alpha); }
  Vec concat(Vec a, Vec b) { return tape->concat(a, b); }
  Vec dot(Vec a, Vec b) { return tape->dot(a, b); }
  Vec sum(Vec x) { return tape->sum(x); }
  Vec sqnorm(Vec x) { return tape->sqnorm(x); }
  Vec diag_contract(Mat w_out, Mat w_in, std::size_t prefix) {
    return tape->diag_contract(w_out, w_in, prefix);
  }
  std::span<const double> value(Vec v) const { return tape->value(v); }
};

template <class Ops>
struct FieldParams {
  typename Ops::Mat w_in;
  typename Ops::Vec b_in;
  typename Ops::Mat w_out;
  typename Ops::Vec b_out;
};

inline FieldParams<PlainOps> plain_params(const ConditionedVectorField& f) {
  return {&f.w_in(), f.b_in(), &f.w_out(), f.b_out()};
}

// Registers the field's parameters as tape leaves.
inline FieldParams<TapeOps> record_params(ad::Tape& tape, const ConditionedVectorField& f) {
  return {tape.parameter(f.w_in()), tape.parameter(f.b_in()), tape.parameter(f.w_out()),
          tape.parameter(f.b_out())};
}

template <class Ops>
struct FieldStage {
  typename Ops::Vec velocity;
  // Derivative of the activation at the hidden pre-activation (1 - tanh^2, or ones).
  typename Ops::Vec gate;
};

template <class Ops>
FieldStage<Ops> evaluate_field(Ops& ops, const FieldParams<Ops>& p, Activation act,
                               const typename Ops::Vec& z, double t,
                               const typename Ops::Vec& cond) {
  const double tv = t;
  auto input = ops.concat(ops.concat(z, ops.constant(std::span<const double>(&tv, 1))), cond);
  auto pre = ops.affine(p.w_in, p.b_in, input);
  if (act == Activation::tanh) {
    auto hid = ops.tanh(pre);
    auto gate = ops.one_minus_square(hid);
    return {ops.affine(p.w_out, p.b_out, hid), gate};
  }
  const Vector ones(ops.value(pre).size(), 1.0);
  return {ops.affine(p.w_out, p.b_out, pre), ops.constant(ones)};
}

// Projects a z-space direction through the first layer: W_in [v | 0 | 0].
template <class Ops>
typename Ops::Vec project_direction(Ops& ops, const FieldParams<Ops>& p, std::span<const double> v,
                                    std::size_t tail) {
  Vector padded(v.begin(), v.end());
  padded.resize(v.size() + tail, 0.0);
  return ops.matvec(p.w_in, ops.constant(padded));
}

// (df/dz) v given the stage gate and the projected direction W_in [v | 0 | 0].
template <class Ops>
typename Ops::Vec jvp_from_projection(Ops& ops, const FieldParams<Ops>& p,
                                      const typename Ops::Vec& gate,
                                      const typename Ops::Vec& projected) {
  return ops.matvec(p.w_out, ops.mul(gate, projected));
}

// ---------------------------------------------------------------------------
// Trace

enum class TraceMethod { none, exact, hutchinson };

struct TraceEstimate {
  double value = 0.0;
  TraceMethod method = TraceMethod::exact;
  std::size_t probes = 0;
};

inline constexpr std::size_t kDefaultExactTraceCap = 64;

inline Vector rademacher(std::size_t d, Rng& rng) {
  Vector eps(d);
  std::uint64_t bits = 0;
  int left = 0;
  for (double& e : eps) {
    if (left == 0) {
      bits = rng();
      left = 64;
    }
    e = (bits & 1u) ? 1.0 : -1.0;
    bits >>= 1;
    --left;
  }
  return eps;
}

// How the divergence term of the augmented ODE is evaluated during a solve.
// Hutchinson probes stay fixed for the whole solve.
struct TraceMode {
  TraceMethod method = TraceMethod::none;
  std::vector<Vector> probes;

  static TraceMode none() { return {}; }
  static TraceMode exact() { return {TraceMethod::exact, {}}; }
  static TraceMode hutchinson(std::vector<Vector> probes) {
    if (probes.empty()) throw InvalidInput("hutchinson trace: need at least one probe");
    return {TraceMethod::hutchinson, std::move(probes)};
  }
  static TraceMode hutchinson(std::size_t d, std::size_t count, Rng& rng) {
    std::vector<Vector> probes;
    for (std::size_t j = 0; j < count; ++j) probes.push_back(rademacher(d, rng));
    return hutchinson(std::move(probes));
  }
};

// Per-solve precomputation for the divergence term.
template <class Ops>
struct TraceTerms {
  TraceMethod method = TraceMethod::none;
  typename Ops::Vec contraction{};
  std::vector<typename Ops::Vec> probes;
  std::vector<typename Ops::Vec> projected;
};

template <class Ops>
TraceTerms<Ops> prepare_trace(Ops& ops, const FieldParams<Ops>& p, const ConditionedVectorField& f,
                              const TraceMode& mode) {
  TraceTerms<Ops> terms;
  terms.method = mode.method;
  if (mode.method == TraceMethod::exact) {
    // sum_i e_i^T J e_i collapses to gate . c with c_j = sum_i W_out[i,j] W_in[j,i].
    terms.contraction = ops.diag_contract(p.w_out, p.w_in, f.d());
  } else if (mode.method == TraceMethod::hutchinson) {
    for (const Vector& eps : mode.probes) {
      if (eps.size() != f.d()) throw InvalidInput("hutchinson probe length does not match d");
      terms.probes.push_back(ops.constant(eps));
      terms.projected.push_back(project_direction(ops, p, eps, 1 + f.k()));
    }
  }
  return terms;
}

// Trace estimate at one stage, as a length-1 vector. Requires method != none.
template <class Ops>
typename Ops::Vec stage_trace(Ops& ops, const FieldParams<Ops>& p, const TraceTerms<Ops>& terms,
                              const typename Ops::Vec& gate) {
  if (terms.method == TraceMethod::exact) return ops.dot(gate, terms.contraction);
  typename Ops::Vec acc{};
  for (std::size_t j = 0; j < terms.probes.size(); ++j) {
    auto jv = jvp_from_projection(ops, p, gate, terms.projected[j]);
    auto est = ops.dot(terms.probes[j], jv);
    acc = j == 0 ? est : ops.add(acc, est);
  }
  if (terms.probes.size() > 1) acc = ops.scale(acc, 1.0 / static_cast<double>(terms.probes.size()));
  return acc;
}

// ---------------------------------------------------------------------------
// Plain entry points

namespace detail {

inline void check_field_input(const ConditionedVectorField& f, std::span<const double> z, double t,
                              std::span<const double> a) {
  if (z.size() != f.d()) {
    throw InvalidInput("vector field: len(z)=" + std::to_string(z.size()) + ", expected " +
                       std::to_string(f.d()));
  }
  if (a.size() != f.k()) {
    throw InvalidInput("vector field: len(a)=" + std::to_string(a.size()) + ", expected " +
                       std::to_string(f.k()));
  }
  if (!all_finite(z) || !all_finite(a) || !std::isfinite(t)) {
    throw InvalidInput("vector field: non-finite input");
  }
}

}  // namespace detail

inline Vector eval_field(const ConditionedVectorField& f, std::span<const double> z, double t,
                         std::span<const double> a) {
  detail::check_field_input(f, z, t, a);
  PlainOps ops;
  auto p = plain_params(f);
  return evaluate_field(ops, p, f.activation(), Vector(z.begin(), z.end()), t,
                        Vector(a.begin(), a.end()))
      .velocity;
}

// (df/dz) v at (z, t, a).
inline Vector field_jvp(const ConditionedVectorField& f, std::span<const double> z, double t,
                        std::span<const double> a, std::span<const double> v) {
  detail::check_field_input(f, z, t, a);
  if (v.size() != f.d()) throw InvalidInput("field_jvp: direction length does not match d");
  PlainOps ops;
  auto p = plain_params(f);
  auto stage = evaluate_field(ops, p, f.activation(), Vector(z.begin(), z.end()), t,
                              Vector(a.begin(), a.end()));
  return jvp_from_projection(ops, p, stage.gate, project_direction(ops, p, v, 1 + f.k()));
}

// tr(df/dz) as the sum of d basis-direction JVPs.
inline TraceEstimate trace_exact(const ConditionedVectorField& f, std::span<const double> z,
                                 double t, std::span<const double> a,
                                 std::size_t cap = kDefaultExactTraceCap) {
  if (f.d() > cap) {
    throw CapabilityError("trace_exact: d=" + std::to_string(f.d()) + " exceeds the exact-trace cap " +
                          std::to_string(cap) + "; use trace_hutchinson");
  }
  detail::check_field_input(f, z, t, a);
  PlainOps ops;
  auto p = plain_params(f);
  auto stage = evaluate_field(ops, p, f.activation(), Vector(z.begin(), z.end()), t,
                              Vector(a.begin(), a.end()));
  double tr = 0.0;
  Vector e(f.d(), 0.0);
  for (std::size_t i = 0; i < f.d(); ++i) {
    e[i] = 1.0;
    tr += jvp_from_projection(ops, p, stage.gate, project_direction(ops, p, e, 1 + f.k()))[i];
    e[i] = 0.0;
  }
  return {tr, TraceMethod::exact, 0};
}

// Mean of eps^T (df/dz) eps over `probes` Rademacher draws from `rng`.
inline TraceEstimate trace_hutchinson(const ConditionedVectorField& f, std::span<const double> z,
                                      double t, std::span<const double> a, std::size_t probes,
                                      Rng& rng) {
  if (probes == 0) throw InvalidInput("trace_hutchinson: probes must be >= 1");
  detail::check_field_input(f, z, t, a);
  PlainOps ops;
  auto p = plain_params(f);
  auto stage = evaluate_field(ops, p, f.activation(), Vector(z.begin(), z.end()), t,
                              Vector(a.begin(), a.end()));
  double acc = 0.0;
  for (std::size_t j = 0; j < probes; ++j) {
    Vector eps = rademacher(f.d(), rng);
    Vector jv = jvp_from_projection(ops, p, stage.gate, project_direction(ops, p, eps, 1 + f.k()));
    acc += kernels::dot(eps.data(), jv.data(), eps.size());
  }
  return {acc / static_cast<double>(probes), TraceMethod::hutchinson, probes};
}

}  // namespace ccnf
