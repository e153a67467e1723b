#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/numerics.hpp"
#include "protoseg/tensor.hpp"

namespace protoseg {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Named learnable tensors. Iteration order is the lexicographic name order.
class ParamStore {
 public:
  void set(const std::string& name, Tensor value) { values_[name] = std::move(value); }
  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  const Tensor& get(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor& get(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) out.push_back(k);
    return out;
  }
  const std::map<std::string, Tensor>& all() const { return values_; }
  std::size_t size() const { return values_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : values_) n += v.size();
    return n;
  }
  bool operator==(const ParamStore&) const = default;

 private:
  std::map<std::string, Tensor> values_;
};

struct Gradients {
  std::map<std::string, Tensor> by_name;
  // Parameters that never reached the loss; their entry in by_name is zero.
  std::vector<std::string> missing;

  const Tensor& operator[](const std::string& name) const { return by_name.at(name); }
};

enum class OpKind {
  Constant,
  Parameter,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Relu,
  Transpose,
  Reshape,
  MatMul,
  Conv2d,
  NormalizeCols,
  SoftmaxRows,
  RowMax,
  RowMean,
  GatherCols,
  ConcatRows,
  LogFloor,
  Sum,
};

class Tape;

// Handle to a tape node. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::string param;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    if (!value.all_finite()) throw NumericError("non-finite constant");
    Node n{OpKind::Constant, {}, std::move(value), {}, false, {}, {}};
    return append(std::move(n));
  }

  // Leaf bound to a named parameter. Repeated requests reuse the same node.
  Var parameter(const ParamStore& store, const std::string& name, bool trainable = true) {
    if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return Var(this, it->second);
    if (!store.get(name).all_finite()) throw NumericError("non-finite parameter " + name);
    Node n{OpKind::Parameter, {}, store.get(name), {}, trainable, {}, name};
    Var v = append(std::move(n));
    param_nodes_[name] = v.id();
    return v;
  }

  Var push(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward) {
    if (!value.all_finite()) throw NumericError("non-finite value produced by op " + std::to_string(static_cast<int>(kind)));
    bool req = false;
    for (std::size_t i : inputs) req = req || nodes_.at(i).requires_grad;
    Node n{kind, std::move(inputs), std::move(value), {}, req, req ? std::move(backward) : BackwardFn{}, {}};
    return append(std::move(n));
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }

  Tensor& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  // Reverse sweep from a scalar loss. Returns one gradient per parameter in
  // `params`; parameters absent from the tape get zeros and are listed in
  // Gradients::missing.
  Gradients backward(Var loss, const ParamStore& params) {
    if (loss.value().size() != 1) throw std::invalid_argument("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    for (Node& n : nodes_) n.grad = Tensor();
    grad_slot(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
    Gradients out;
    for (const auto& [name, value] : params.all()) {
      auto it = param_nodes_.find(name);
      if (it == param_nodes_.end() || nodes_[it->second].grad.empty()) {
        out.by_name[name] = Tensor(value.shape(), 0.0);
        out.missing.push_back(name);
      } else {
        out.by_name[name] = nodes_[it->second].grad;
      }
    }
    return out;
  }

 private:
  Var append(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // deque: value() references survive later pushes
  std::map<std::string, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_matrix(const Var& a, const char* op) {
  if (a.value().rank() != 2) throw std::invalid_argument(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

inline void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("operands live on different tapes");
}

// out[m,n] += a[m,k] * b[k,n]
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

// out[m,k] += g[m,n] * b[k,n]^T
inline void gemm_nt(const double* g, const double* b, double* out, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double* grow = g + i * n;
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      out[i * k + p] += s;
    }
}

// out[k,n] += a[m,k]^T * g[m,n]
inline void gemm_tn(const double* a, const double* g, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* grow = g + i * n;
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(OpKind::Add, {ia, ib}, std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t in : {ia, ib}) {
      if (!t.requires_grad(in)) continue;
      Tensor& gi = t.grad_slot(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(OpKind::Sub, {ia, ib}, std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& gi = t.grad_slot(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gi = t.grad_slot(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] -= g[i];
    }
  });
}

// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(OpKind::Mul, {ia, ib}, std::move(out), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& gi = t.grad_slot(ia);
      const Tensor& bv = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gi = t.grad_slot(ib);
      const Tensor& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= c;
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::Scale, {ia}, std::move(out), [ia, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gi = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += c * g[i];
  });
}

inline Var add_scalar(const Var& a, double c) {
  Tensor out = a.value();
  for (double& v : out.values()) v += c;
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::AddScalar, {ia}, std::move(out), [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gi = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
  });
}

// Rectifier. `gate`, when given, records which entries passed; with
// `replay` set the recorded pattern is applied instead of the sign test.
inline Var relu(const Var& a, std::vector<char>* gate = nullptr, bool replay = false) {
  Tensor out = a.value();
  std::vector<char> pass(out.size());
  if (replay) {
    if (!gate || gate->size() != out.size()) throw std::invalid_argument("relu: no recorded gate to replay");
    pass = *gate;
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) pass[i] = out[i] > 0.0;
    if (gate) *gate = pass;
  }
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!pass[i]) out[i] = 0.0;
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::Relu, {ia}, std::move(out), [ia, pass = std::move(pass)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gi = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (pass[i]) gi[i] += g[i];
  });
}

inline Var transpose(const Var& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.value().at(i, j);
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::Transpose, {ia}, std::move(out), [ia, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gi = t.grad_slot(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gi.at(i, j) += g.at(j, i);
  });
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::Reshape, {ia}, std::move(out), [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gi = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
  });
}

inline Var matmul(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().cols();
  if (b.value().rows() != k)
    throw std::invalid_argument("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({m, n}, 0.0);
  detail::gemm_nn(a.value().values().data(), b.value().values().data(), out.values().data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(OpKind::MatMul, {ia, ib}, std::move(out), [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia))
      detail::gemm_nt(g.values().data(), t.value(ib).values().data(), t.grad_slot(ia).values().data(), m, n, k);
    if (t.requires_grad(ib))
      detail::gemm_tn(t.value(ia).values().data(), g.values().data(), t.grad_slot(ib).values().data(), m, k, n);
  });
}

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x: C x H x W, weight: O x C x K x K, bias: O.
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dGeometry geo) {
  detail::require_same_tape(x, weight);
  detail::require_same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(1) != xv.dim(0) || wv.dim(2) != wv.dim(3) ||
      bias.value().size() != wv.dim(0))
    throw std::invalid_argument("conv2d: incompatible shapes " + shape_str(xv.shape()) + ", " + shape_str(wv.shape()));
  const std::size_t c_in = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  const std::size_t c_out = wv.dim(0), ks = wv.dim(2);
  const std::size_t s = geo.stride, p = geo.padding;
  if (h + 2 * p < ks || w + 2 * p < ks) throw std::invalid_argument("conv2d: kernel larger than padded input");
  const std::size_t oh = (h + 2 * p - ks) / s + 1, ow = (w + 2 * p - ks) / s + 1;

  // Valid output range along one axis for kernel tap k: out index o reads
  // input o*s + k - p, which must lie in [0, len).
  auto range = [s, p](std::size_t k, std::size_t len, std::size_t olen) {
    std::size_t lo = 0;
    while (lo < olen && lo * s + k < p) ++lo;
    std::size_t hi = lo;
    while (hi < olen && hi * s + k - p < len) ++hi;
    return std::pair{lo, hi};
  };

  Tensor out({c_out, oh, ow});
  const double* xd = xv.values().data();
  const double* wd = wv.values().data();
  double* od = out.values().data();
  for (std::size_t o = 0; o < c_out; ++o) {
    const double b = bias.value()[o];
    for (std::size_t i = 0; i < oh * ow; ++i) od[o * oh * ow + i] = b;
  }
  for (std::size_t kh = 0; kh < ks; ++kh) {
    const auto [ylo, yhi] = range(kh, h, oh);
    for (std::size_t kw = 0; kw < ks; ++kw) {
      const auto [xlo, xhi] = range(kw, w, ow);
      for (std::size_t o = 0; o < c_out; ++o)
        for (std::size_t c = 0; c < c_in; ++c) {
          const double wk = wd[((o * c_in + c) * ks + kh) * ks + kw];
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const double* xrow = xd + (c * h + (oy * s + kh - p)) * w;
            double* orow = od + (o * oh + oy) * ow;
            for (std::size_t ox = xlo; ox < xhi; ++ox) orow[ox] += wk * xrow[ox * s + kw - p];
          }
        }
    }
  }

  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return x.tape().push(OpKind::Conv2d, {ix, iw, ib}, std::move(out),
                       [=](Tape& t, std::size_t self) {
                         const double* g = t.grad(self).values().data();
                         const double* xd = t.value(ix).values().data();
                         const double* wd = t.value(iw).values().data();
                         double* gx = t.requires_grad(ix) ? t.grad_slot(ix).values().data() : nullptr;
                         double* gw = t.requires_grad(iw) ? t.grad_slot(iw).values().data() : nullptr;
                         if (t.requires_grad(ib)) {
                           double* gb = t.grad_slot(ib).values().data();
                           for (std::size_t o = 0; o < c_out; ++o)
                             for (std::size_t i = 0; i < oh * ow; ++i) gb[o] += g[o * oh * ow + i];
                         }
                         for (std::size_t kh = 0; kh < ks; ++kh) {
                           const auto [ylo, yhi] = range(kh, h, oh);
                           for (std::size_t kw = 0; kw < ks; ++kw) {
                             const auto [xlo, xhi] = range(kw, w, ow);
                             for (std::size_t o = 0; o < c_out; ++o)
                               for (std::size_t c = 0; c < c_in; ++c) {
                                 const std::size_t widx = ((o * c_in + c) * ks + kh) * ks + kw;
                                 const double wk = wd[widx];
                                 double acc = 0.0;
                                 for (std::size_t oy = ylo; oy < yhi; ++oy) {
                                   const std::size_t xoff = (c * h + (oy * s + kh - p)) * w;
                                   const double* grow = g + (o * oh + oy) * ow;
                                   for (std::size_t ox = xlo; ox < xhi; ++ox) {
                                     const std::size_t xi = xoff + ox * s + kw - p;
                                     acc += grow[ox] * xd[xi];
                                     if (gx) gx[xi] += wk * grow[ox];
                                   }
                                 }
                                 if (gw) gw[widx] += acc;
                               }
                           }
                         }
                       });
}

// Divides every column by max(norm, floor).
inline Var normalize_cols(const Var& a, double floor = kNormFloor) {
  detail::require_matrix(a, "normalize_cols");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  std::vector<double> norms(n, 0.0);
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) norms[j] += x.at(i, j) * x.at(i, j);
  for (double& v : norms) v = std::sqrt(v);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) / std::max(norms[j], floor);
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::NormalizeCols, {ia}, std::move(out),
                       [ia, m, n, norms = std::move(norms), floor](Tape& t, std::size_t self) {
                         const Tensor& g = t.grad(self);
                         const Tensor& y = t.value(self);
                         Tensor& gi = t.grad_slot(ia);
                         for (std::size_t j = 0; j < n; ++j) {
                           if (norms[j] > floor) {
                             double yg = 0.0;
                             for (std::size_t i = 0; i < m; ++i) yg += y.at(i, j) * g.at(i, j);
                             for (std::size_t i = 0; i < m; ++i) gi.at(i, j) += (g.at(i, j) - y.at(i, j) * yg) / norms[j];
                           } else {
                             for (std::size_t i = 0; i < m; ++i) gi.at(i, j) += g.at(i, j) / floor;
                           }
                         }
                       });
}

inline Var softmax_rows(const Var& a) {
  detail::require_matrix(a, "softmax_rows");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = softmax(a.value().values().subspan(i * n, n));
    std::copy(row.begin(), row.end(), out.values().begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::SoftmaxRows, {ia}, std::move(out), [ia, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gi = t.grad_slot(ia);
    for (std::size_t i = 0; i < m; ++i) {
      double gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) gy += g.at(i, j) * y.at(i, j);
      for (std::size_t j = 0; j < n; ++j) gi.at(i, j) += y.at(i, j) * (g.at(i, j) - gy);
    }
  });
}

// Row-wise maximum (m x 1). The winning column is a constant for
// differentiation; `forced` replays a previous choice.
inline Var row_max(const Var& a, std::vector<std::size_t>* argmax = nullptr,
                   const std::vector<std::size_t>* forced = nullptr) {
  detail::require_matrix(a, "row_max");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  std::vector<std::size_t> idx(m, 0);
  Tensor out({m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    if (forced) {
      if (forced->size() != m || (*forced)[i] >= n) throw std::invalid_argument("row_max: bad forced indices");
      idx[i] = (*forced)[i];
    } else {
      for (std::size_t j = 1; j < n; ++j)
        if (a.value().at(i, j) > a.value().at(i, idx[i])) idx[i] = j;
    }
    out.at(i, 0) = a.value().at(i, idx[i]);
  }
  if (argmax) *argmax = idx;
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::RowMax, {ia}, std::move(out), [ia, m, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gi = t.grad_slot(ia);
    for (std::size_t i = 0; i < m; ++i) gi.at(i, idx[i]) += g[i];
  });
}

// Mean across columns (m x 1).
inline Var row_mean(const Var& a) {
  detail::require_matrix(a, "row_mean");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tensor out({m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a.value().at(i, j);
    out.at(i, 0) = s / static_cast<double>(n);
  }
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::RowMean, {ia}, std::move(out), [ia, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gi = t.grad_slot(ia);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gi.at(i, j) += g[i] * inv;
  });
}

inline Var gather_cols(const Var& a, const std::vector<std::size_t>& cols) {
  detail::require_matrix(a, "gather_cols");
  if (cols.empty()) throw std::invalid_argument("gather_cols: no columns selected");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  for (std::size_t c : cols)
    if (c >= n) throw std::out_of_range("gather_cols: column out of range");
  Tensor out({m, cols.size()});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) out.at(i, j) = a.value().at(i, cols[j]);
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::GatherCols, {ia}, std::move(out), [ia, m, cols](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gi = t.grad_slot(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < cols.size(); ++j) gi.at(i, cols[j]) += g.at(i, j);
  });
}

inline Var concat_rows(const Var& a, const Var& b) {
  detail::require_same_tape(a, b);
  detail::require_matrix(a, "concat_rows");
  detail::require_matrix(b, "concat_rows");
  if (a.value().cols() != b.value().cols()) throw std::invalid_argument("concat_rows: column counts differ");
  const std::size_t ma = a.value().rows(), mb = b.value().rows(), n = a.value().cols();
  std::vector<double> data(a.value().data());
  data.insert(data.end(), b.value().data().begin(), b.value().data().end());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(OpKind::ConcatRows, {ia, ib}, Tensor({ma + mb, n}, std::move(data)),
                       [ia, ib, ma, mb, n](Tape& t, std::size_t self) {
                         const Tensor& g = t.grad(self);
                         if (t.requires_grad(ia)) {
                           Tensor& gi = t.grad_slot(ia);
                           for (std::size_t i = 0; i < ma * n; ++i) gi[i] += g[i];
                         }
                         if (t.requires_grad(ib)) {
                           Tensor& gi = t.grad_slot(ib);
                           for (std::size_t i = 0; i < mb * n; ++i) gi[i] += g[ma * n + i];
                         }
                       });
}

// log(max(x, floor)); entries at or below the floor pass no gradient.
inline Var log_floor(const Var& a, double floor) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::log(std::max(v, floor));
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::LogFloor, {ia}, std::move(out), [ia, floor](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(ia);
    Tensor& gi = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > floor) gi[i] += g[i] / x[i];
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return a.tape().push(OpKind::Sum, {ia}, Tensor::scalar(s), [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor& gi = t.grad_slot(ia);
    for (double& v : gi.values()) v += g;
  });
}

}  // namespace protoseg
