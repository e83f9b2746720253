#pragma once

// Maximum-likelihood training. Gradients come from differentiating the fixed-step
// RK4 solve (discretize-then-optimize); the optimizer is Adam with a stepped
// learning-rate decay lr0 * decay^floor(epoch / decay_every).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "ccnf/autodiff.hpp"
#include "ccnf/errors.hpp"
#include "ccnf/flow.hpp"
#include "ccnf/io.hpp"
#include "ccnf/ode.hpp"
#include "ccnf/vector_field.hpp"

namespace ccnf {

// Seed mixing for per-sample streams (probe draws) independent of thread layout.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Worker count: CCNF_THREADS if set, else hardware concurrency.
inline std::size_t default_thread_count() {
  if (const char* env = std::getenv("CCNF_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  const auto hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Runs fn(i, worker) for i in [0, n) over contiguous chunks.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, std::size_t{0});
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w * chunk; i < std::min(n, (w + 1) * chunk); ++i) fn(i, w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// Attribute normalization

struct NormalizedAttributes {
  std::vector<Vector> values;
  AttributeNormalizer stats;
};

// Per-axis min/max from the data, unless `declared` provides a range for that
// axis (e.g. a roughness-style axis declared as [0, 200]).
inline NormalizedAttributes normalize_attributes(
    std::span<const Vector> raw, const std::vector<std::optional<AxisRange>>& declared = {}) {
  if (raw.empty()) throw InvalidInput("normalize_attributes: empty attribute list");
  const std::size_t k = raw.front().size();
  if (!declared.empty() && declared.size() != k) {
    throw InvalidInput("normalize_attributes: declared ranges must cover all " + std::to_string(k) + " axes");
  }
  std::vector<AxisRange> ranges(k);
  for (std::size_t j = 0; j < k; ++j) {
    if (!declared.empty() && declared[j]) {
      ranges[j] = *declared[j];
      continue;
    }
    double lo = raw.front()[j], hi = raw.front()[j];
    for (const auto& r : raw) {
      if (r.size() != k) throw InvalidInput("normalize_attributes: ragged attribute vectors");
      lo = std::min(lo, r[j]);
      hi = std::max(hi, r[j]);
    }
    if (!(lo < hi)) {
      throw DegenerateDimension(j, "normalize_attributes: attribute axis " + std::to_string(j) +
                                       " is constant (" + format_double(lo) + ") and cannot be normalized");
    }
    ranges[j] = {lo, hi};
  }
  NormalizedAttributes out{{}, AttributeNormalizer(std::move(ranges))};
  out.values.reserve(raw.size());
  for (const auto& r : raw) out.values.push_back(out.stats.normalize(r));
  return out;
}

// ---------------------------------------------------------------------------
// Configuration and report

struct TrainConfig {
  std::size_t batch_size = 200;
  double lr0 = 1e-4;
  double decay = 0.98;
  std::size_t decay_every = 100;
  std::size_t epochs = 100;
  // nullopt: exact trace when d <= 16, Hutchinson with one probe otherwise.
  std::optional<TraceMethod> trace;
  std::size_t steps = 20;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0: default_thread_count()
  std::string checkpoint_path;

  void validate() const {
    if (!(lr0 > 0.0)) throw InvalidInput("train config: lr0 must be > 0");
    if (!(decay > 0.0 && decay <= 1.0)) throw InvalidInput("train config: decay must be in (0, 1]");
    if (batch_size < 1) throw InvalidInput("train config: batch_size must be >= 1");
    if (decay_every < 1) throw InvalidInput("train config: decay_every must be >= 1");
    if (steps < 1) throw InvalidInput("train config: steps must be >= 1");
    if (trace == TraceMethod::none) throw InvalidInput("train config: trace must be exact or hutchinson");
  }

  double learning_rate(std::size_t epoch) const {
    return lr0 * std::pow(decay, static_cast<double>(epoch / decay_every));
  }

  TraceMethod trace_for(std::size_t d) const {
    if (trace) return *trace;
    return d <= 16 ? TraceMethod::exact : TraceMethod::hutchinson;
  }
};

inline TrainConfig train_config_from_doc(const KeyValueDoc& doc, TrainConfig cfg = {}) {
  for (const auto& [key, value] : doc.entries()) {
    if (key == "batch_size") {
      cfg.batch_size = parse_count(value, key);
    } else if (key == "lr0") {
      cfg.lr0 = parse_double(value, key);
    } else if (key == "decay") {
      cfg.decay = parse_double(value, key);
    } else if (key == "decay_every") {
      cfg.decay_every = parse_count(value, key);
    } else if (key == "epochs") {
      cfg.epochs = parse_count(value, key);
    } else if (key == "trace_mode") {
      if (value == "exact") {
        cfg.trace = TraceMethod::exact;
      } else if (value == "hutchinson") {
        cfg.trace = TraceMethod::hutchinson;
      } else if (value == "auto") {
        cfg.trace.reset();
      } else {
        throw InvalidInput("train config: trace_mode must be exact, hutchinson or auto");
      }
    } else if (key == "steps") {
      cfg.steps = parse_count(value, key);
    } else if (key == "seed") {
      cfg.seed = parse_count(value, key);
    } else if (key == "threads") {
      cfg.threads = parse_count(value, key);
    }
    // Other keys (hidden, attr_bounds, ...) belong to the caller.
  }
  cfg.validate();
  return cfg;
}

struct TrainReport {
  std::vector<double> epoch_nll;
  std::vector<double> learning_rates;
  double wall_seconds = 0.0;
  FlowModel model;
};

inline void write_train_report(std::ostream& os, const TrainReport& r) {
  os << "epoch,lr,mean_nll\n";
  for (std::size_t e = 0; e < r.epoch_nll.size(); ++e) {
    os << e << ',' << format_double(r.learning_rates[e]) << ',' << format_double(r.epoch_nll[e]) << '\n';
  }
}

// Fresh model: near-identity field, default adaptive solver for inference.
inline FlowModel make_initial_model(std::size_t d, AttributeNormalizer stats, std::size_t hidden,
                                    std::uint64_t seed) {
  FlowModel m;
  m.field = ConditionedVectorField::initialized(d, stats.k(), hidden, seed);
  m.attributes = std::move(stats);
  return m;
}

// ---------------------------------------------------------------------------
// Loss and gradient

struct BatchLoss {
  double loss = 0.0;
  Vector gradient;  // flat parameter order of ConditionedVectorField
};

struct NllOptions {
  TraceMethod trace = TraceMethod::exact;
  std::size_t steps = 20;
  std::uint64_t probe_seed = 0;
  std::size_t threads = 1;
};

namespace detail {

inline void append_gradient(const ad::Tape& tape, const FieldParams<TapeOps>& p, double* out) {
  for (ad::Var v : {p.w_in, p.b_in, p.w_out, p.b_out}) {
    const auto g = tape.gradient(v);
    out = std::copy(g.begin(), g.end(), out);
  }
}

}  // namespace detail

// Negative log-likelihood of one sample and its parameter gradient, recorded on `tape`.
inline double sample_nll(ad::Tape& tape, const FlowModel& model, std::span<const double> s,
                         std::span<const double> a, const TraceMode& mode, std::size_t steps,
                         double* gradient_out) {
  tape.clear();
  const auto h = record_integration(tape, model.field, AugmentedState{Vector(s.begin(), s.end()), 0.0},
                                    kDataTime, kBaseTime, a, SolverConfig::rk4(steps), mode);
  // -log p = 0.5 |z0|^2 + (d/2) log(2 pi) + delta_logp
  const ad::Var nll = tape.axpy(h.delta_logp_out, 0.5, tape.sqnorm(h.z_out));
  tape.finalize();
  const double value =
      tape.scalar(nll) + 0.5 * static_cast<double>(model.d()) * std::log(2.0 * std::numbers::pi);
  if (gradient_out) {
    const double seed = 1.0;
    tape.backward(nll, std::span<const double>(&seed, 1));
    detail::append_gradient(tape, h.params, gradient_out);
  }
  return value;
}

// loss = -(1/|B|) sum log p(s_n | a_n); attributes must already be normalized.
inline BatchLoss nll_batch(const FlowModel& model, std::span<const Vector> embeddings,
                           std::span<const Vector> attributes, const NllOptions& opt = {}) {
  if (embeddings.empty()) throw InvalidInput("nll_batch: empty batch");
  if (embeddings.size() != attributes.size()) throw InvalidInput("nll_batch: misaligned batch");
  const std::size_t n = embeddings.size();
  const std::size_t p = model.field.parameter_count();
  Vector per_sample_grad(n * p, 0.0);
  Vector per_sample_loss(n, 0.0);
  const std::size_t workers = std::max<std::size_t>(1, std::min(opt.threads, n));
  std::vector<ad::Tape> tapes(workers);
  parallel_for(n, workers, [&](std::size_t i, std::size_t w) {
    TraceMode mode = TraceMode::exact();
    if (opt.trace == TraceMethod::hutchinson) {
      Rng rng(splitmix64(opt.probe_seed ^ splitmix64(i)));
      mode = TraceMode::hutchinson(model.d(), 1, rng);
    }
    per_sample_loss[i] = sample_nll(tapes[w], model, embeddings[i], attributes[i], mode, opt.steps,
                                    per_sample_grad.data() + i * p);
  });
  BatchLoss out;
  out.gradient.assign(p, 0.0);
  const double inv = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += per_sample_loss[i];
    const double* g = per_sample_grad.data() + i * p;
    for (std::size_t j = 0; j < p; ++j) out.gradient[j] += g[j];
  }
  out.loss = total * inv;
  for (double& g : out.gradient) g *= inv;
  if (!std::isfinite(out.loss) || !all_finite(out.gradient)) {
    throw InstabilityError("nll_batch: non-finite loss or gradient");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

class Adam {
 public:
  explicit Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<double> params, std::span<const double> grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      params[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }

 private:
  Vector m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop

// Batches are contiguous windows of a per-epoch permutation; the last window
// wraps around to the start of the permutation, so every batch has batch_size
// records (datasets smaller than one batch repeat records).
inline TrainReport train(FlowModel model, std::span<const Vector> embeddings,
                         std::span<const Vector> attributes, const TrainConfig& cfg) {
  cfg.validate();
  model.validate();
  if (embeddings.size() != attributes.size()) throw InvalidInput("train: misaligned dataset");
  TrainReport report;
  const auto start = std::chrono::steady_clock::now();
  if (cfg.epochs == 0) {
    report.model = std::move(model);
    return report;
  }
  if (embeddings.empty()) throw InvalidInput("train: empty dataset");

  const std::size_t n = embeddings.size();
  const std::size_t b = cfg.batch_size;
  const std::size_t batches = (n + b - 1) / b;
  NllOptions opt;
  opt.trace = cfg.trace_for(model.d());
  opt.steps = cfg.steps;
  opt.threads = cfg.threads ? cfg.threads : default_thread_count();

  Rng shuffle_rng(cfg.seed);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Adam adam(model.field.parameter_count());
  Vector params = model.field.flat_parameters();
  std::vector<Vector> bs(b), ba(b);
  FlowModel last_good = model;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate(epoch);
    std::shuffle(perm.begin(), perm.end(), shuffle_rng);
    double epoch_loss = 0.0;
    for (std::size_t j = 0; j < batches; ++j) {
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t idx = perm[(j * b + i) % n];
        bs[i] = embeddings[idx];
        ba[i] = attributes[idx];
      }
      opt.probe_seed = splitmix64(cfg.seed ^ splitmix64((epoch << 32) ^ j));
      BatchLoss bl;
      try {
        bl = nll_batch(model, bs, ba, opt);
      } catch (const Error& e) {
        if (!cfg.checkpoint_path.empty()) save_checkpoint_file(cfg.checkpoint_path, last_good);
        throw InstabilityError("train: epoch " + std::to_string(epoch) + ", batch " + std::to_string(j) +
                               ": " + e.what());
      }
      epoch_loss += bl.loss;
      adam.step(params, bl.gradient, lr);
      if (!all_finite(params)) {
        if (!cfg.checkpoint_path.empty()) save_checkpoint_file(cfg.checkpoint_path, last_good);
        throw InstabilityError("train: epoch " + std::to_string(epoch) + ", batch " + std::to_string(j) +
                               ": non-finite parameters after update");
      }
      model.field.set_flat_parameters(params);
    }
    report.epoch_nll.push_back(epoch_loss / static_cast<double>(batches));
    report.learning_rates.push_back(lr);
    last_good = model;
    if (!cfg.checkpoint_path.empty() && (epoch + 1) % cfg.decay_every == 0) {
      save_checkpoint_file(cfg.checkpoint_path, model);
    }
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  report.model = std::move(model);
  return report;
}

}  // namespace ccnf
