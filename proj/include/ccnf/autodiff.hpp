#pragma once

// Vector-level reverse-mode tape. Every node holds a contiguous slice of one
// value arena; backward() walks the nodes once in reverse recording order and
// jvp() propagates a tangent forward over the same nodes.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ccnf/errors.hpp"
#include "ccnf/tensor.hpp"

namespace ccnf::ad {

struct Var {
  std::uint32_t id = 0;
};

enum class Op : std::uint8_t {
  leaf,
  affine,
  matvec,
  tanh,
  one_minus_square,
  mul,
  add,
  axpy,
  scale,
  concat,
  dot,
  sum,
  sqnorm,
  diag_contract,
};

class Tape {
 public:
  Tape() = default;

  // Leaves. Matrix leaves remember their shape for matvec/affine.
  Var input(std::span<const double> x) { return push_leaf(x, x.size(), 1, false); }
  Var constant(std::span<const double> x) { return push_leaf(x, x.size(), 1, false); }
  Var constant(double x) { return push_leaf(std::span<const double>(&x, 1), 1, 1, false); }
  Var parameter(std::span<const double> x) { return push_leaf(x, x.size(), 1, true); }
  Var parameter(const DenseMatrix& m) { return push_leaf(m.data(), m.rows(), m.cols(), true); }

  Var affine(Var w, Var b, Var x) {
    const Node& nw = node(w);
    require(nw.cols == size_of(x) && nw.rows == size_of(b), "affine: dimension mismatch");
    return push(Op::affine, nw.rows, w, b, x);
  }
  Var matvec(Var w, Var x) {
    const Node& nw = node(w);
    require(nw.cols == size_of(x), "matvec: dimension mismatch");
    return push(Op::matvec, nw.rows, w, x);
  }
  Var tanh(Var x) { return push(Op::tanh, size_of(x), x); }
  Var one_minus_square(Var y) { return push(Op::one_minus_square, size_of(y), y); }
  Var mul(Var a, Var b) {
    require(size_of(a) == size_of(b), "mul: length mismatch");
    return push(Op::mul, size_of(a), a, b);
  }
  Var add(Var a, Var b) {
    require(size_of(a) == size_of(b), "add: length mismatch");
    return push(Op::add, size_of(a), a, b);
  }
  // x + alpha * y
  Var axpy(Var x, double alpha, Var y) {
    require(size_of(x) == size_of(y), "axpy: length mismatch");
    Var v = push(Op::axpy, size_of(x), x, y, Var{}, alpha);
    return v;
  }
  Var scale(Var x, double alpha) { return push(Op::scale, size_of(x), x, Var{}, Var{}, alpha); }
  Var concat(Var a, Var b) { return push(Op::concat, size_of(a) + size_of(b), a, b); }
  Var dot(Var a, Var b) {
    require(size_of(a) == size_of(b), "dot: length mismatch");
    return push(Op::dot, 1, a, b);
  }
  Var sum(Var x) { return push(Op::sum, 1, x); }
  Var sqnorm(Var x) { return push(Op::sqnorm, 1, x); }
  // c_j = sum_{i < prefix} w_out[i, j] * w_in[j, i]
  Var diag_contract(Var w_out, Var w_in, std::size_t prefix) {
    const Node& no = node(w_out);
    const Node& ni = node(w_in);
    require(no.cols == ni.rows && prefix <= ni.cols && prefix <= no.rows,
            "diag_contract: shape mismatch");
    return push(Op::diag_contract, no.cols, w_out, w_in, Var{}, 0.0, prefix);
  }

  void finalize() { finalized_ = true; }
  bool finalized() const noexcept { return finalized_; }

  // Drops every node; the tape can record again.
  void clear() {
    nodes_.clear();
    values_.clear();
    adjoints_.clear();
    finalized_ = false;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  std::span<const double> value(Var v) const {
    const Node& n = node(v);
    return {values_.data() + n.offset, n.size};
  }
  double scalar(Var v) const { return value(v)[0]; }

  std::span<const double> gradient(Var v) const {
    const Node& n = node(v);
    if (adjoints_.size() != values_.size()) throw StateError("gradient: backward() has not run");
    return {adjoints_.data() + n.offset, n.size};
  }

  // Reverse sweep seeded at `output`. Gradients of every node (parameters and
  // inputs included) are available through gradient() afterwards.
  void backward(Var output, std::span<const double> seed) {
    if (!finalized_) throw StateError("backward: tape is still recording; call finalize() first");
    const Node& out = node(output);
    require(seed.size() == out.size, "backward: seed length does not match output");
    adjoints_.assign(values_.size(), 0.0);
    std::copy(seed.begin(), seed.end(), adjoints_.begin() + static_cast<std::ptrdiff_t>(out.offset));
    for (std::size_t i = output.id + 1; i-- > 0;) backprop_node(i);
  }

  // Vector-Jacobian product of output w.r.t. input.
  Vector vjp(Var input, Var output, std::span<const double> seed) {
    backward(output, seed);
    auto g = gradient(input);
    return Vector(g.begin(), g.end());
  }

  // Forward-mode directional derivative of `output` w.r.t. `input` along `direction`.
  Vector jvp(Var input, std::span<const double> direction, Var output) const {
    const Node& in = node(input);
    require(direction.size() == in.size, "jvp: direction length does not match input");
    Vector tangent(values_.size(), 0.0);
    std::copy(direction.begin(), direction.end(), tangent.begin() + static_cast<std::ptrdiff_t>(in.offset));
    for (std::size_t i = input.id + 1; i <= output.id; ++i) tangent_node(i, tangent);
    const Node& out = node(output);
    return Vector(tangent.begin() + static_cast<std::ptrdiff_t>(out.offset),
                  tangent.begin() + static_cast<std::ptrdiff_t>(out.offset + out.size));
  }

  // Recomputes every non-leaf node from the stored leaves.
  void replay() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].op != Op::leaf) eval_node(i);
    }
  }

  // Overwrites a leaf's values in place (e.g. a perturbed parameter before replay()).
  void set_leaf(Var v, std::span<const double> x) {
    const Node& n = node(v);
    require(n.op == Op::leaf && x.size() == n.size, "set_leaf: not a leaf or wrong length");
    std::copy(x.begin(), x.end(), values_.begin() + static_cast<std::ptrdiff_t>(n.offset));
  }

 private:
  struct Node {
    Op op = Op::leaf;
    std::uint32_t a = 0, b = 0, c = 0;
    std::size_t offset = 0;
    std::size_t size = 0;
    std::size_t rows = 0, cols = 0;
    double alpha = 0.0;
    std::size_t prefix = 0;
    bool param = false;
  };

  static void require(bool ok, const char* what) {
    if (!ok) throw InvalidInput(what);
  }

  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw InvalidInput("tape: variable does not belong to this tape");
    return nodes_[v.id];
  }
  std::size_t size_of(Var v) const { return node(v).size; }

  void check_recording() const {
    if (finalized_) throw StateError("tape: cannot record on a finalized tape");
  }

  Var push_leaf(std::span<const double> x, std::size_t rows, std::size_t cols, bool param) {
    check_recording();
    Node n;
    n.op = Op::leaf;
    n.offset = values_.size();
    n.size = x.size();
    n.rows = rows;
    n.cols = cols;
    n.param = param;
    values_.insert(values_.end(), x.begin(), x.end());
    nodes_.push_back(n);
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var push(Op op, std::size_t size, Var a, Var b = {}, Var c = {}, double alpha = 0.0,
           std::size_t prefix = 0) {
    check_recording();
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.c = c.id;
    n.offset = values_.size();
    n.size = size;
    n.rows = size;
    n.cols = 1;
    n.alpha = alpha;
    n.prefix = prefix;
    values_.resize(values_.size() + size);
    nodes_.push_back(n);
    eval_node(nodes_.size() - 1);
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  const double* val(std::uint32_t id) const { return values_.data() + nodes_[id].offset; }

  void eval_node(std::size_t i) {
    const Node& n = nodes_[i];
    double* out = values_.data() + n.offset;
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::affine: {
        const Node& w = nodes_[n.a];
        kernels::affine(val(n.a), w.rows, w.cols, val(n.b), val(n.c), out);
        break;
      }
      case Op::matvec: {
        const Node& w = nodes_[n.a];
        kernels::affine(val(n.a), w.rows, w.cols, nullptr, val(n.b), out);
        break;
      }
      case Op::tanh:
        kernels::tanh(val(n.a), n.size, out);
        break;
      case Op::one_minus_square:
        kernels::one_minus_square(val(n.a), n.size, out);
        break;
      case Op::mul:
        kernels::mul(val(n.a), val(n.b), n.size, out);
        break;
      case Op::add:
        kernels::axpy(val(n.a), 1.0, val(n.b), n.size, out);
        break;
      case Op::axpy:
        kernels::axpy(val(n.a), n.alpha, val(n.b), n.size, out);
        break;
      case Op::scale:
        kernels::scale(val(n.a), n.alpha, n.size, out);
        break;
      case Op::concat: {
        const std::size_t na = nodes_[n.a].size;
        std::copy_n(val(n.a), na, out);
        std::copy_n(val(n.b), nodes_[n.b].size, out + na);
        break;
      }
      case Op::dot:
        out[0] = kernels::dot(val(n.a), val(n.b), nodes_[n.a].size);
        break;
      case Op::sum:
        out[0] = kernels::sum(val(n.a), nodes_[n.a].size);
        break;
      case Op::sqnorm:
        out[0] = kernels::dot(val(n.a), val(n.a), nodes_[n.a].size);
        break;
      case Op::diag_contract: {
        const Node& wo = nodes_[n.a];
        const Node& wi = nodes_[n.b];
        kernels::diag_contract(val(n.a), wo.rows, wo.cols, val(n.b), wi.cols, n.prefix, out);
        break;
      }
    }
  }

  void backprop_node(std::size_t i) {
    const Node& n = nodes_[i];
    const double* g = adjoints_.data() + n.offset;
    auto adj = [&](std::uint32_t id) { return adjoints_.data() + nodes_[id].offset; };
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::affine:
      case Op::matvec: {
        const Node& w = nodes_[n.a];
        const std::uint32_t xid = n.op == Op::affine ? n.c : n.b;
        const double* wv = val(n.a);
        const double* x = val(xid);
        double* gw = adj(n.a);
        double* gx = adj(xid);
        for (std::size_t r = 0; r < w.rows; ++r) {
          const double gr = g[r];
          if (gr == 0.0) continue;
          double* gwr = gw + r * w.cols;
          const double* wr = wv + r * w.cols;
          for (std::size_t c = 0; c < w.cols; ++c) {
            gwr[c] += gr * x[c];
            gx[c] += wr[c] * gr;
          }
        }
        if (n.op == Op::affine) {
          double* gb = adj(n.b);
          for (std::size_t r = 0; r < w.rows; ++r) gb[r] += g[r];
        }
        break;
      }
      case Op::tanh: {
        const double* y = values_.data() + n.offset;
        double* gx = adj(n.a);
        for (std::size_t k = 0; k < n.size; ++k) gx[k] += g[k] * (1.0 - y[k] * y[k]);
        break;
      }
      case Op::one_minus_square: {
        const double* y = val(n.a);
        double* gy = adj(n.a);
        for (std::size_t k = 0; k < n.size; ++k) gy[k] += -2.0 * y[k] * g[k];
        break;
      }
      case Op::mul: {
        const double* a = val(n.a);
        const double* b = val(n.b);
        double* ga = adj(n.a);
        double* gb = adj(n.b);
        for (std::size_t k = 0; k < n.size; ++k) {
          ga[k] += g[k] * b[k];
          gb[k] += g[k] * a[k];
        }
        break;
      }
      case Op::add:
      case Op::axpy: {
        const double alpha = n.op == Op::add ? 1.0 : n.alpha;
        double* ga = adj(n.a);
        double* gb = adj(n.b);
        for (std::size_t k = 0; k < n.size; ++k) {
          ga[k] += g[k];
          gb[k] += alpha * g[k];
        }
        break;
      }
      case Op::scale: {
        double* ga = adj(n.a);
        for (std::size_t k = 0; k < n.size; ++k) ga[k] += n.alpha * g[k];
        break;
      }
      case Op::concat: {
        const std::size_t na = nodes_[n.a].size;
        double* ga = adj(n.a);
        double* gb = adj(n.b);
        for (std::size_t k = 0; k < na; ++k) ga[k] += g[k];
        for (std::size_t k = na; k < n.size; ++k) gb[k - na] += g[k];
        break;
      }
      case Op::dot: {
        const std::size_t m = nodes_[n.a].size;
        const double* a = val(n.a);
        const double* b = val(n.b);
        double* ga = adj(n.a);
        double* gb = adj(n.b);
        for (std::size_t k = 0; k < m; ++k) {
          ga[k] += g[0] * b[k];
          gb[k] += g[0] * a[k];
        }
        break;
      }
      case Op::sum: {
        double* ga = adj(n.a);
        for (std::size_t k = 0; k < nodes_[n.a].size; ++k) ga[k] += g[0];
        break;
      }
      case Op::sqnorm: {
        const double* a = val(n.a);
        double* ga = adj(n.a);
        for (std::size_t k = 0; k < nodes_[n.a].size; ++k) ga[k] += 2.0 * a[k] * g[0];
        break;
      }
      case Op::diag_contract: {
        const Node& wo = nodes_[n.a];
        const Node& wi = nodes_[n.b];
        const double* vo = val(n.a);
        const double* vi = val(n.b);
        double* go = adj(n.a);
        double* gi = adj(n.b);
        for (std::size_t j = 0; j < n.size; ++j) {
          for (std::size_t r = 0; r < n.prefix; ++r) {
            go[r * wo.cols + j] += g[j] * vi[j * wi.cols + r];
            gi[j * wi.cols + r] += g[j] * vo[r * wo.cols + j];
          }
        }
        break;
      }
    }
  }

  void tangent_node(std::size_t i, Vector& t) const {
    const Node& n = nodes_[i];
    double* out = t.data() + n.offset;
    auto tan = [&](std::uint32_t id) { return t.data() + nodes_[id].offset; };
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::affine:
      case Op::matvec: {
        const Node& w = nodes_[n.a];
        const std::uint32_t xid = n.op == Op::affine ? n.c : n.b;
        const double* wv = val(n.a);
        const double* x = val(xid);
        const double* tw = tan(n.a);
        const double* tx = tan(xid);
        for (std::size_t r = 0; r < w.rows; ++r) {
          double acc = 0.0;
          for (std::size_t c = 0; c < w.cols; ++c) {
            acc += wv[r * w.cols + c] * tx[c] + tw[r * w.cols + c] * x[c];
          }
          if (n.op == Op::affine) acc += tan(n.b)[r];
          out[r] = acc;
        }
        break;
      }
      case Op::tanh: {
        const double* y = values_.data() + n.offset;
        const double* tx = tan(n.a);
        for (std::size_t k = 0; k < n.size; ++k) out[k] = (1.0 - y[k] * y[k]) * tx[k];
        break;
      }
      case Op::one_minus_square: {
        const double* y = val(n.a);
        const double* ty = tan(n.a);
        for (std::size_t k = 0; k < n.size; ++k) out[k] = -2.0 * y[k] * ty[k];
        break;
      }
      case Op::mul: {
        const double* a = val(n.a);
        const double* b = val(n.b);
        const double* ta = tan(n.a);
        const double* tb = tan(n.b);
        for (std::size_t k = 0; k < n.size; ++k) out[k] = ta[k] * b[k] + a[k] * tb[k];
        break;
      }
      case Op::add:
      case Op::axpy: {
        const double alpha = n.op == Op::add ? 1.0 : n.alpha;
        const double* ta = tan(n.a);
        const double* tb = tan(n.b);
        for (std::size_t k = 0; k < n.size; ++k) out[k] = ta[k] + alpha * tb[k];
        break;
      }
      case Op::scale: {
        const double* ta = tan(n.a);
        for (std::size_t k = 0; k < n.size; ++k) out[k] = n.alpha * ta[k];
        break;
      }
      case Op::concat: {
        const std::size_t na = nodes_[n.a].size;
        std::copy_n(tan(n.a), na, out);
        std::copy_n(tan(n.b), nodes_[n.b].size, out + na);
        break;
      }
      case Op::dot: {
        const std::size_t m = nodes_[n.a].size;
        out[0] = kernels::dot(tan(n.a), val(n.b), m) + kernels::dot(val(n.a), tan(n.b), m);
        break;
      }
      case Op::sum:
        out[0] = kernels::sum(tan(n.a), nodes_[n.a].size);
        break;
      case Op::sqnorm:
        out[0] = 2.0 * kernels::dot(val(n.a), tan(n.a), nodes_[n.a].size);
        break;
      case Op::diag_contract: {
        const Node& wo = nodes_[n.a];
        const Node& wi = nodes_[n.b];
        const double* vo = val(n.a);
        const double* vi = val(n.b);
        const double* to = tan(n.a);
        const double* ti = tan(n.b);
        for (std::size_t j = 0; j < n.size; ++j) {
          double acc = 0.0;
          for (std::size_t r = 0; r < n.prefix; ++r) {
            acc += to[r * wo.cols + j] * vi[j * wi.cols + r] + vo[r * wo.cols + j] * ti[j * wi.cols + r];
          }
          out[j] = acc;
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  Vector values_;
  Vector adjoints_;
  bool finalized_ = false;
};

}  // namespace ccnf::ad
