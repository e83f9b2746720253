#pragma once

// Speaker-similarity evaluation of edits: cosine scoring, equal error rate,
// trial construction, and linear attribute probes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <random>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ccnf/errors.hpp"
#include "ccnf/flow.hpp"
#include "ccnf/io.hpp"
#include "ccnf/tensor.hpp"

namespace ccnf {

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw InvalidInput("cosine_similarity: length mismatch");
  const double nu = norm(u);
  const double nv = norm(v);
  if (nu == 0.0 || nv == 0.0) throw InvalidInput("cosine_similarity: zero vector");
  return std::clamp(kernels::dot(u.data(), v.data(), u.size()) / (nu * nv), -1.0, 1.0);
}

struct Trial {
  Vector a;
  Vector b;
  bool positive = false;
};

struct TrialSet {
  std::vector<Trial> trials;

  void validate() const {
    bool pos = false, neg = false;
    for (const auto& t : trials) {
      (t.positive ? pos : neg) = true;
      if (t.a.size() != trials.front().a.size() || t.b.size() != t.a.size()) {
        throw InvalidInput("trial set: embeddings do not share a dimension");
      }
    }
    if (!pos || !neg) throw InvalidInput("trial set: need at least one positive and one negative trial");
  }
};

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

// Operating point when accepting every score >= threshold.
struct OperatingPoint {
  double threshold;
  double far;
  double frr;
};

// One operating point per distinct score (ties grouped), plus the reject-all point.
inline std::vector<OperatingPoint> operating_points(std::span<const double> scores,
                                                    const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw InvalidInput("eer: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return scores[x] < scores[y]; });
  std::size_t n_pos = 0;
  for (bool p : positive) n_pos += p ? 1 : 0;
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw InvalidInput("eer: need both positive and negative trials");

  std::vector<OperatingPoint> pts;
  std::size_t pos_below = 0, neg_below = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double tau = scores[order[i]];
    pts.push_back({tau, static_cast<double>(n_neg - neg_below) / static_cast<double>(n_neg),
                   static_cast<double>(pos_below) / static_cast<double>(n_pos)});
    while (i < order.size() && scores[order[i]] == tau) {
      (positive[order[i]] ? pos_below : neg_below) += 1;
      ++i;
    }
  }
  pts.push_back({std::nextafter(scores[order.back()], INFINITY), 0.0, 1.0});
  return pts;
}

// EER at the FAR = FRR crossing of the lower convex hull of the operating
// points, interpolating linearly between the two hull vertices that straddle it.
inline EerResult compute_eer(std::span<const double> scores, const std::vector<bool>& positive) {
  auto pts = operating_points(scores, positive);
  // pts run from (FAR 1, FRR 0) to (FAR 0, FRR 1); hull walks them in that order.
  std::vector<OperatingPoint> hull;
  auto cross = [](const OperatingPoint& o, const OperatingPoint& a, const OperatingPoint& b) {
    return (a.far - o.far) * (b.frr - o.frr) - (a.frr - o.frr) * (b.far - o.far);
  };
  for (const auto& p : pts) {
    // FAR decreases along pts, so the lower hull is walked clockwise: keep right turns only.
    while (hull.size() >= 2 && cross(hull[hull.size() - 2], hull.back(), p) >= 0.0) hull.pop_back();
    hull.push_back(p);
  }
  for (std::size_t i = 0; i + 1 < hull.size(); ++i) {
    const double d0 = hull[i].far - hull[i].frr;
    const double d1 = hull[i + 1].far - hull[i + 1].frr;
    if (d0 >= 0.0 && d1 <= 0.0) {
      const double t = d0 == d1 ? 0.0 : d0 / (d0 - d1);
      return {hull[i].far + t * (hull[i + 1].far - hull[i].far),
              hull[i].threshold + t * (hull[i + 1].threshold - hull[i].threshold)};
    }
  }
  throw InvalidInput("eer: no FAR/FRR crossing found");  // unreachable for valid inputs
}

inline EerResult compute_eer(const TrialSet& trials) {
  trials.validate();
  std::vector<double> scores;
  std::vector<bool> labels;
  for (const auto& t : trials.trials) {
    scores.push_back(cosine_similarity(t.a, t.b));
    labels.push_back(t.positive);
  }
  return compute_eer(scores, labels);
}

// positives: (edited_i, original_i); negatives: (edited_i, imposter_j) for up
// to `per_trial` distinct j != i drawn with a seeded generator. imposters[j]
// is taken to be the same speaker as originals[j].
inline TrialSet build_trials(std::span<const Vector> originals, std::span<const Vector> edited,
                             std::span<const Vector> imposters, std::size_t per_trial = 10,
                             std::uint64_t seed = 0) {
  if (originals.size() != edited.size()) throw InvalidInput("build_trials: originals and edited are misaligned");
  if (imposters.empty()) throw InvalidInput("build_trials: imposter list is empty");
  if (per_trial == 0) throw InvalidInput("build_trials: need at least one imposter per trial");
  TrialSet ts;
  Rng rng(seed);
  for (std::size_t i = 0; i < originals.size(); ++i) {
    ts.trials.push_back({edited[i], originals[i], true});
    std::vector<std::size_t> pool;
    for (std::size_t j = 0; j < imposters.size(); ++j) {
      if (j != i || imposters.size() == 1) pool.push_back(j);
    }
    const std::size_t m = std::min(per_trial, pool.size());
    // partial Fisher-Yates
    for (std::size_t r = 0; r < m; ++r) {
      std::uniform_int_distribution<std::size_t> pick(r, pool.size() - 1);
      std::swap(pool[r], pool[pick(rng)]);
      ts.trials.push_back({edited[i], imposters[pool[r]], false});
    }
  }
  ts.validate();
  return ts;
}

// ---------------------------------------------------------------------------
// Linear attribute probe: ridge regression embedding -> raw attribute, with an
// unpenalized intercept.

struct LinearAttributeProbe {
  DenseMatrix weights;  // k x d
  Vector intercept;     // k
  double lambda = 0.0;

  Vector predict(std::span<const double> s) const {
    if (s.size() != weights.cols()) throw InvalidInput("probe: embedding has wrong length");
    Vector out(weights.rows());
    kernels::affine(weights.data().data(), weights.rows(), weights.cols(), intercept.data(), s.data(),
                    out.data());
    return out;
  }
};

inline LinearAttributeProbe fit_probe(const Dataset& ds, double lambda = 1e-6, Diagnostics* diag = nullptr) {
  if (ds.size() <= ds.d) {
    throw InvalidInput("fit_probe: need more records (" + std::to_string(ds.size()) + ") than dimensions (" +
                       std::to_string(ds.d) + ")");
  }
  if (lambda < 0.0) throw InvalidInput("fit_probe: lambda must be >= 0");
  const auto n = static_cast<Eigen::Index>(ds.size());
  const auto d = static_cast<Eigen::Index>(ds.d);
  const auto k = static_cast<Eigen::Index>(ds.k);
  Eigen::MatrixXd x(n, d), y(n, k);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < d; ++c) x(r, c) = ds.embeddings[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    for (Eigen::Index c = 0; c < k; ++c) y(r, c) = ds.attributes[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
  }
  const Eigen::RowVectorXd x_mean = x.colwise().mean();
  const Eigen::RowVectorXd y_mean = y.colwise().mean();
  x.rowwise() -= x_mean;
  y.rowwise() -= y_mean;
  for (Eigen::Index c = 0; c < k; ++c) {
    if (y.col(c).cwiseAbs().maxCoeff() == 0.0 && diag) {
      diag->warn("fit_probe: attribute axis " + std::to_string(c) +
                 " is constant in the training data; its probe predicts the constant");
    }
  }
  Eigen::MatrixXd gram = x.transpose() * x;
  gram.diagonal().array() += lambda;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.rcond() < 1e-13) {
    throw InvalidInput("fit_probe: normal equations are singular at lambda=" + format_double(lambda) +
                       "; raise the ridge lambda");
  }
  const Eigen::MatrixXd w = ldlt.solve(x.transpose() * y);  // d x k
  LinearAttributeProbe probe;
  probe.lambda = lambda;
  probe.weights = DenseMatrix(ds.k, ds.d);
  probe.intercept.assign(ds.k, 0.0);
  for (Eigen::Index a = 0; a < k; ++a) {
    double b = y_mean(a);
    for (Eigen::Index c = 0; c < d; ++c) {
      probe.weights(static_cast<std::size_t>(a), static_cast<std::size_t>(c)) = w(c, a);
      b -= x_mean(c) * w(c, a);
    }
    probe.intercept[static_cast<std::size_t>(a)] = b;
  }
  return probe;
}

// ---------------------------------------------------------------------------
// Severity sweep

// A sweep level: a raw attribute value, or nullopt for the identity edit (a' = a).
using SweepLevel = std::optional<double>;

struct SweepRow {
  SweepLevel level;
  double mean_pred = 0.0;
  double std_pred = 0.0;
  double eer = 0.0;
};

struct SweepReport {
  std::size_t axis = 0;
  std::vector<SweepRow> rows;
};

struct SweepOptions {
  std::size_t imposters_per_trial = 10;
  std::uint64_t seed = 0;
};

inline SweepReport severity_sweep_report(const FlowModel& model, const LinearAttributeProbe& probe,
                                         const Dataset& test, std::size_t axis,
                                         const std::vector<SweepLevel>& levels,
                                         const SweepOptions& opt = {}, Diagnostics* diag = nullptr) {
  if (axis >= model.k()) throw InvalidInput("severity_sweep: axis out of range");
  if (test.d != model.d() || test.k != model.k()) throw InvalidInput("severity_sweep: test set dimensions do not match model");
  if (test.size() < 2) throw InvalidInput("severity_sweep: need at least two test records");
  std::optional<double> prev;
  for (const auto& l : levels) {
    if (!l) continue;
    if (prev && *l < *prev) throw InvalidInput("severity_sweep: levels must be sorted ascending");
    prev = l;
  }
  SweepReport report;
  report.axis = axis;
  for (const auto& level : levels) {
    std::vector<Vector> edited;
    edited.reserve(test.size());
    double sum = 0.0, sumsq = 0.0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const Vector a = model.attributes.normalize(test.attributes[i]);
      Vector e = level ? edit_single_axis(model, test.embeddings[i], a, axis, *level, diag)
                       : edit(model, test.embeddings[i], a, a, diag);
      const double pred = probe.predict(e)[axis];
      sum += pred;
      sumsq += pred * pred;
      edited.push_back(std::move(e));
    }
    const double n = static_cast<double>(test.size());
    const double mean = sum / n;
    const double var = std::max(0.0, sumsq / n - mean * mean);
    const auto trials = build_trials(test.embeddings, edited, test.embeddings, opt.imposters_per_trial, opt.seed);
    report.rows.push_back({level, mean, std::sqrt(var), compute_eer(trials).eer});
  }
  return report;
}

inline std::string sweep_level_name(const SweepLevel& l) { return l ? format_double(*l) : "identity"; }

inline void write_sweep_csv(std::ostream& os, const SweepReport& r) {
  os << "level,mean_pred,std_pred,eer\n";
  for (const auto& row : r.rows) {
    os << sweep_level_name(row.level) << ',' << format_double(row.mean_pred) << ','
       << format_double(row.std_pred) << ',' << format_double(row.eer) << '\n';
  }
}

inline void write_sweep_table(std::ostream& os, const SweepReport& r) {
  char buf[128];
  os << "axis " << r.axis << '\n';
  std::snprintf(buf, sizeof(buf), "%-10s %22s %9s\n", "level", "predicted attribute", "EER [%]");
  os << buf;
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof(buf), "%-10s %12.2f +- %7.2f %9.2f\n", sweep_level_name(row.level).c_str(),
                  row.mean_pred, row.std_pred, 100.0 * row.eer);
    os << buf;
  }
}

}  // namespace ccnf
