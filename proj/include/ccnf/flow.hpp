#pragma once

// The conditional continuous normalizing flow: density evaluation, sampling,
// and the two-pass attribute edit (data -> base under a, base -> data under a').
//
// Time convention: data lives at t = 1, the standard-normal base at t = 0.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ccnf/errors.hpp"
#include "ccnf/io.hpp"
#include "ccnf/ode.hpp"
#include "ccnf/tensor.hpp"
#include "ccnf/vector_field.hpp"

namespace ccnf {

inline constexpr double kBaseTime = 0.0;
inline constexpr double kDataTime = 1.0;

struct AxisRange {
  double min = 0.0;
  double max = 1.0;
  friend bool operator==(const AxisRange&, const AxisRange&) = default;
};

// Per-axis affine map of raw attribute values onto [0, 1].
class AttributeNormalizer {
 public:
  AttributeNormalizer() = default;
  explicit AttributeNormalizer(std::vector<AxisRange> ranges) : ranges_(std::move(ranges)) {
    for (std::size_t i = 0; i < ranges_.size(); ++i) {
      const auto& r = ranges_[i];
      if (!std::isfinite(r.min) || !std::isfinite(r.max) || !(r.min < r.max)) {
        throw DegenerateDimension(i, "attribute axis " + std::to_string(i) +
                                         ": range requires min < max (got " + format_double(r.min) +
                                         ", " + format_double(r.max) + ")");
      }
    }
  }

  // Identity normalizer for attributes that are already in [0, 1].
  static AttributeNormalizer unit(std::size_t k) {
    return AttributeNormalizer(std::vector<AxisRange>(k, AxisRange{0.0, 1.0}));
  }

  std::size_t k() const noexcept { return ranges_.size(); }
  const std::vector<AxisRange>& ranges() const noexcept { return ranges_; }

  double normalize_axis(std::size_t axis, double raw) const {
    const auto& r = ranges_.at(axis);
    return (raw - r.min) / (r.max - r.min);
  }

  double denormalize_axis(std::size_t axis, double unit) const {
    const auto& r = ranges_.at(axis);
    return r.min + unit * (r.max - r.min);
  }

  Vector normalize(std::span<const double> raw) const {
    if (raw.size() != k()) throw InvalidInput("normalize: attribute vector has wrong length");
    Vector out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = normalize_axis(i, raw[i]);
    return out;
  }

  Vector denormalize(std::span<const double> unit) const {
    if (unit.size() != k()) throw InvalidInput("denormalize: attribute vector has wrong length");
    Vector out(unit.size());
    for (std::size_t i = 0; i < unit.size(); ++i) out[i] = denormalize_axis(i, unit[i]);
    return out;
  }

  friend bool operator==(const AttributeNormalizer&, const AttributeNormalizer&) = default;

 private:
  std::vector<AxisRange> ranges_;
};

struct FlowModel {
  ConditionedVectorField field;
  SolverConfig solver;
  AttributeNormalizer attributes;

  std::size_t d() const noexcept { return field.d(); }
  std::size_t k() const noexcept { return field.k(); }

  void validate() const {
    if (attributes.k() != field.k()) {
      throw InvalidInput("flow model: attribute stats have " + std::to_string(attributes.k()) +
                         " axes, field expects " + std::to_string(field.k()));
    }
    solver.validate();
  }

  friend bool operator==(const FlowModel&, const FlowModel&) = default;
};

inline double standard_normal_log_density(std::span<const double> z) {
  const double d = static_cast<double>(z.size());
  return -0.5 * d * std::log(2.0 * std::numbers::pi) - 0.5 * kernels::dot(z.data(), z.data(), z.size());
}

struct BaseProjection {
  Vector z0;
  double delta_logp = 0.0;
};

// s = z(1) -> z(0) under condition a. delta_logp = int_0^1 tr(df/dz) dt along the path.
inline BaseProjection forward_to_base(const FlowModel& model, std::span<const double> s,
                                      std::span<const double> a,
                                      const TraceMode& mode = TraceMode::exact()) {
  AugmentedState st{Vector(s.begin(), s.end()), 0.0};
  auto out = integrate(model.field, st, kDataTime, kBaseTime, a, model.solver, mode);
  return {std::move(out.z), out.delta_logp};
}

// log p(s | a) = log N(z0; 0, I) - delta_logp.
inline double log_likelihood(const FlowModel& model, std::span<const double> s,
                             std::span<const double> a, const TraceMode& mode = TraceMode::exact()) {
  const auto base = forward_to_base(model, s, a, mode);
  return standard_normal_log_density(base.z0) - base.delta_logp;
}

// Pushes a base point z(0) forward to data space under condition a.
inline Vector transport_from_base(const FlowModel& model, std::span<const double> z0,
                                  std::span<const double> a) {
  AugmentedState st{Vector(z0.begin(), z0.end()), 0.0};
  return integrate(model.field, st, kBaseTime, kDataTime, a, model.solver, TraceMode::none()).z;
}

inline Vector sample(const FlowModel& model, std::span<const double> a, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector z0(model.d());
  for (double& v : z0) v = normal(rng);
  return transport_from_base(model, z0, a);
}

// Clamps each component into [0, 1], reporting every clamp.
inline Vector clamp_unit(std::span<const double> a, Diagnostics* diag) {
  Vector out(a.begin(), a.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double c = std::clamp(out[i], 0.0, 1.0);
    if (c != out[i] && diag) {
      diag->warn("attribute axis " + std::to_string(i) + ": normalized target " +
                 format_double(out[i]) + " clamped to " + format_double(c));
    }
    out[i] = c;
  }
  return out;
}

// Two-pass manipulation: integrate s back to the base under a, then forward
// again under a_target. a_target is clamped into [0, 1].
inline Vector edit(const FlowModel& model, std::span<const double> s, std::span<const double> a,
                   std::span<const double> a_target, Diagnostics* diag = nullptr) {
  if (a_target.size() != model.k()) throw InvalidInput("edit: target attribute vector has wrong length");
  const Vector target = clamp_unit(a_target, diag);
  AugmentedState st{Vector(s.begin(), s.end()), 0.0};
  const auto base = integrate(model.field, st, kDataTime, kBaseTime, a, model.solver, TraceMode::none());
  return transport_from_base(model, base.z, target);
}

// Moves one attribute to a raw level, keeping the others fixed.
inline Vector edit_single_axis(const FlowModel& model, std::span<const double> s,
                               std::span<const double> a, std::size_t axis, double raw_level,
                               Diagnostics* diag = nullptr) {
  if (axis >= model.k()) {
    throw InvalidInput("edit_single_axis: axis " + std::to_string(axis) + " out of range (k=" +
                       std::to_string(model.k()) + ")");
  }
  if (a.size() != model.k()) throw InvalidInput("edit_single_axis: attribute vector has wrong length");
  Vector target(a.begin(), a.end());
  target[axis] = model.attributes.normalize_axis(axis, raw_level);
  return edit(model, s, a, target, diag);
}

// ---------------------------------------------------------------------------
// Checkpoint: key/value header, a `---` separator, then one parameter per line
// in flat order (w_in, b_in, w_out, b_out). See docs/FORMATS.md.

inline constexpr std::string_view kCheckpointFormat = "ccnf-checkpoint";
inline constexpr std::size_t kCheckpointVersion = 1;

inline std::string solver_method_name(SolverMethod m) {
  return m == SolverMethod::rk4_fixed ? "rk4_fixed" : "dopri5_adaptive";
}

inline SolverMethod parse_solver_method(std::string_view s) {
  if (s == "rk4_fixed") return SolverMethod::rk4_fixed;
  if (s == "dopri5_adaptive") return SolverMethod::dopri5_adaptive;
  throw InvalidInput("unknown solver method '" + std::string(s) + "'");
}

inline void save_checkpoint(std::ostream& os, const FlowModel& model) {
  model.validate();
  const auto& f = model.field;
  KeyValueDoc h;
  h.set("format", std::string(kCheckpointFormat));
  h.set("version", kCheckpointVersion);
  h.set("d", f.d());
  h.set("k", f.k());
  h.set("hidden", f.hidden());
  h.set("activation", std::string(f.activation() == Activation::tanh ? "tanh" : "identity"));
  h.set("solver.method", solver_method_name(model.solver.method));
  h.set("solver.steps", model.solver.steps);
  h.set("solver.rtol", model.solver.rtol);
  h.set("solver.atol", model.solver.atol);
  h.set("solver.max_steps", model.solver.max_steps);
  for (std::size_t i = 0; i < model.k(); ++i) {
    h.set("attr." + std::to_string(i) + ".min", model.attributes.ranges()[i].min);
    h.set("attr." + std::to_string(i) + ".max", model.attributes.ranges()[i].max);
  }
  h.set("layer.w_in.shape", std::to_string(f.w_in().rows()) + "x" + std::to_string(f.w_in().cols()));
  h.set("layer.b_in.shape", std::to_string(f.b_in().size()));
  h.set("layer.w_out.shape", std::to_string(f.w_out().rows()) + "x" + std::to_string(f.w_out().cols()));
  h.set("layer.b_out.shape", std::to_string(f.b_out().size()));
  h.set("parameters", f.parameter_count());
  os << "# ccnf flow checkpoint\n";
  h.write(os);
  os << "---\n";
  for (double p : f.flat_parameters()) os << format_double(p) << '\n';
}

inline FlowModel load_checkpoint(std::istream& is) {
  const auto h = KeyValueDoc::parse(is, "---");
  if (h.require("format") != kCheckpointFormat) throw InvalidInput("checkpoint: not a ccnf checkpoint");
  const auto version = h.require_count("version");
  if (version != kCheckpointVersion) {
    throw InvalidInput("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto d = h.require_count("d");
  const auto k = h.require_count("k");
  const auto hidden = h.require_count("hidden");
  const auto act_name = h.require("activation");
  if (act_name != "tanh" && act_name != "identity") throw InvalidInput("checkpoint: unknown activation");
  const Activation act = act_name == "tanh" ? Activation::tanh : Activation::identity;

  FlowModel m;
  m.field = ConditionedVectorField(d, k, hidden, act);
  m.solver.method = parse_solver_method(h.require("solver.method"));
  m.solver.steps = h.require_count("solver.steps");
  m.solver.rtol = h.require_double("solver.rtol");
  m.solver.atol = h.require_double("solver.atol");
  m.solver.max_steps = h.require_count("solver.max_steps");
  std::vector<AxisRange> ranges(k);
  for (std::size_t i = 0; i < k; ++i) {
    ranges[i].min = h.require_double("attr." + std::to_string(i) + ".min");
    ranges[i].max = h.require_double("attr." + std::to_string(i) + ".max");
  }
  m.attributes = AttributeNormalizer(std::move(ranges));

  auto expect_shape = [&h](const std::string& key, const std::string& want) {
    if (h.require(key) != want) throw InvalidInput("checkpoint: " + key + " mismatch (expected " + want + ")");
  };
  expect_shape("layer.w_in.shape", std::to_string(hidden) + "x" + std::to_string(d + 1 + k));
  expect_shape("layer.b_in.shape", std::to_string(hidden));
  expect_shape("layer.w_out.shape", std::to_string(d) + "x" + std::to_string(hidden));
  expect_shape("layer.b_out.shape", std::to_string(d));
  const auto count = h.require_count("parameters");
  if (count != m.field.parameter_count()) throw InvalidInput("checkpoint: parameter count mismatch");

  Vector params;
  params.reserve(count);
  std::string line;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    params.push_back(parse_double(line, "checkpoint parameter"));
  }
  if (params.size() != count) {
    throw InvalidInput("checkpoint: expected " + std::to_string(count) + " parameters, found " +
                       std::to_string(params.size()));
  }
  m.field.set_flat_parameters(params);
  m.validate();
  return m;
}

inline void save_checkpoint_file(const std::string& path, const FlowModel& model) {
  auto os = open_output(path);
  save_checkpoint(os, model);
  if (!os) throw InvalidInput("failed writing '" + path + "'");
}

inline FlowModel load_checkpoint_file(const std::string& path) {
  auto is = open_input(path);
  return load_checkpoint(is);
}

}  // namespace ccnf
