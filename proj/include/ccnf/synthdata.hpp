#pragma once

// Attribute-conditioned Gaussian family used as ground truth:
//   a ~ U[0,1]^k (or Beta(2,5) per axis),  s | a ~ N(M a + m0, diag(variances)).
// Attributes are emitted in raw units: raw = lo + a * (hi - lo) per axis.
// With a covariance shared across conditions, the ideal edit a -> a' is the mean
// shift s + M (a' - a).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ccnf/errors.hpp"
#include "ccnf/flow.hpp"
#include "ccnf/io.hpp"
#include "ccnf/tensor.hpp"

namespace ccnf {

enum class AttributeSampling { uniform, skewed_low };

struct ConditionalGaussianGenerator {
  std::size_t d = 0;
  std::size_t k = 0;
  DenseMatrix mean_map;  // d x k
  Vector offset;         // d
  Vector variances;      // d
  std::uint64_t seed = 0;
  AttributeSampling sampling = AttributeSampling::uniform;
  std::vector<AxisRange> raw_ranges;  // k, default [0, 100]

  void validate() const {
    if (d == 0) throw InvalidInput("generator: d must be >= 1");
    if (mean_map.rows() != d || mean_map.cols() != k) throw InvalidInput("generator: mean map must be d x k");
    if (offset.size() != d || variances.size() != d) throw InvalidInput("generator: offset/variances must have length d");
    if (raw_ranges.size() != k) throw InvalidInput("generator: need one raw range per attribute");
    if (!all_finite(mean_map.data()) || !all_finite(offset)) throw InvalidInput("generator: non-finite mean parameters");
    for (double v : variances) {
      if (!(v > 0.0) || !std::isfinite(v)) throw InvalidInput("generator: variances must be > 0");
    }
    AttributeNormalizer check(raw_ranges);
    (void)check;
  }

  // M with N(0, map_scale^2) entries, zero offset, equal variances.
  static ConditionalGaussianGenerator random(std::size_t d, std::size_t k, std::uint64_t seed,
                                             double map_scale = 2.0, double noise_std = 0.5) {
    ConditionalGaussianGenerator g;
    g.d = d;
    g.k = k;
    g.mean_map = DenseMatrix(d, k);
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> normal(0.0, map_scale);
    for (double& m : g.mean_map.data()) m = normal(rng);
    g.offset.assign(d, 0.0);
    g.variances.assign(d, noise_std * noise_std);
    g.seed = seed;
    g.raw_ranges.assign(k, AxisRange{0.0, 100.0});
    g.validate();
    return g;
  }

  Vector mean(std::span<const double> a_unit) const {
    if (a_unit.size() != k) throw InvalidInput("generator: attribute vector has wrong length");
    Vector m(d);
    kernels::affine(mean_map.data().data(), d, k, offset.data(), a_unit.data(), m.data());
    return m;
  }

  AttributeNormalizer raw_normalizer() const { return AttributeNormalizer(raw_ranges); }

  Vector to_unit(std::span<const double> raw) const { return raw_normalizer().normalize(raw); }
  Vector to_raw(std::span<const double> unit) const { return raw_normalizer().denormalize(unit); }
};

inline Vector sample_attributes(const ConditionalGaussianGenerator& g, Rng& rng) {
  Vector a(g.k);
  if (g.sampling == AttributeSampling::uniform) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : a) v = u(rng);
  } else {
    std::gamma_distribution<double> ga(2.0, 1.0), gb(5.0, 1.0);
    for (double& v : a) {
      const double x = ga(rng);
      const double y = gb(rng);
      v = x / (x + y);
    }
  }
  return a;
}

// One draw of s | a for a unit attribute vector.
inline Vector sample_embedding(const ConditionalGaussianGenerator& g, std::span<const double> a_unit, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector s = g.mean(a_unit);
  for (std::size_t i = 0; i < g.d; ++i) s[i] += std::sqrt(g.variances[i]) * normal(rng);
  return s;
}

// n records (s, raw a); reproducible from gen.seed.
inline Dataset generate_dataset(const ConditionalGaussianGenerator& g, std::size_t n) {
  g.validate();
  if (n == 0) throw InvalidInput("generate_dataset: n must be >= 1");
  Dataset ds;
  ds.d = g.d;
  ds.k = g.k;
  ds.embeddings.reserve(n);
  ds.attributes.reserve(n);
  Rng rng(g.seed);
  for (std::size_t r = 0; r < n; ++r) {
    const Vector a = sample_attributes(g, rng);
    ds.push_back(sample_embedding(g, a, rng), g.to_raw(a));
  }
  return ds;
}

// Exact Gaussian log-density of s under condition a (unit attributes).
inline double true_log_density(const ConditionalGaussianGenerator& g, std::span<const double> s,
                               std::span<const double> a_unit) {
  if (s.size() != g.d) throw InvalidInput("true_log_density: embedding has wrong length");
  const Vector m = g.mean(a_unit);
  double acc = 0.0;
  for (std::size_t i = 0; i < g.d; ++i) {
    const double r = s[i] - m[i];
    acc += -0.5 * std::log(2.0 * std::numbers::pi * g.variances[i]) - 0.5 * r * r / g.variances[i];
  }
  return acc;
}

// Expected negative log-likelihood per sample: the differential entropy of
// N(., diag(variances)), which does not depend on a.
inline double true_conditional_entropy(const ConditionalGaussianGenerator& g) {
  double acc = 0.0;
  for (double v : g.variances) acc += 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * v);
  return acc;
}

// Mean-shift transport between the two conditionals.
inline Vector oracle_edit(const ConditionalGaussianGenerator& g, std::span<const double> s,
                          std::span<const double> a_unit, std::span<const double> target_unit) {
  if (s.size() != g.d || a_unit.size() != g.k || target_unit.size() != g.k) {
    throw InvalidInput("oracle_edit: dimension mismatch");
  }
  Vector delta(g.k);
  for (std::size_t j = 0; j < g.k; ++j) delta[j] = target_unit[j] - a_unit[j];
  Vector out(s.begin(), s.end());
  const Vector shift = matvec(g.mean_map, delta);
  for (std::size_t i = 0; i < g.d; ++i) out[i] += shift[i];
  return out;
}

// ---------------------------------------------------------------------------
// Generator spec as a key/value document.

inline KeyValueDoc generator_to_doc(const ConditionalGaussianGenerator& g) {
  KeyValueDoc doc;
  doc.set("format", std::string("ccnf-generator"));
  doc.set("version", std::size_t{1});
  doc.set("d", g.d);
  doc.set("k", g.k);
  doc.set("seed", std::to_string(g.seed));
  doc.set("sampling", std::string(g.sampling == AttributeSampling::uniform ? "uniform" : "skewed_low"));
  doc.set("mean_map", format_double_list(g.mean_map.data()));
  doc.set("offset", format_double_list(g.offset));
  doc.set("variances", format_double_list(g.variances));
  Vector lo, hi;
  for (const auto& r : g.raw_ranges) {
    lo.push_back(r.min);
    hi.push_back(r.max);
  }
  doc.set("raw_min", format_double_list(lo));
  doc.set("raw_max", format_double_list(hi));
  return doc;
}

inline ConditionalGaussianGenerator generator_from_doc(const KeyValueDoc& doc) {
  if (doc.require("format") != "ccnf-generator") throw InvalidInput("generator spec: wrong format tag");
  if (doc.require_count("version") != 1) throw InvalidInput("generator spec: unsupported version");
  ConditionalGaussianGenerator g;
  g.d = doc.require_count("d");
  g.k = doc.require_count("k");
  const std::string seed_text = doc.require("seed");
  g.seed = 0;
  {
    auto t = trim(seed_text);
    auto res = std::from_chars(t.data(), t.data() + t.size(), g.seed);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size()) throw InvalidInput("generator spec: bad seed");
  }
  const auto sampling = doc.require("sampling");
  if (sampling == "uniform") {
    g.sampling = AttributeSampling::uniform;
  } else if (sampling == "skewed_low") {
    g.sampling = AttributeSampling::skewed_low;
  } else {
    throw InvalidInput("generator spec: unknown sampling '" + sampling + "'");
  }
  g.mean_map = DenseMatrix(g.d, g.k, parse_double_list(doc.require("mean_map"), "mean_map"));
  g.offset = parse_double_list(doc.require("offset"), "offset");
  g.variances = parse_double_list(doc.require("variances"), "variances");
  const Vector lo = parse_double_list(doc.require("raw_min"), "raw_min");
  const Vector hi = parse_double_list(doc.require("raw_max"), "raw_max");
  if (lo.size() != g.k || hi.size() != g.k) throw InvalidInput("generator spec: raw ranges need k entries");
  for (std::size_t j = 0; j < g.k; ++j) g.raw_ranges.push_back({lo[j], hi[j]});
  g.validate();
  return g;
}

}  // namespace ccnf
