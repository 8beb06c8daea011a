#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// Graphs are built dynamically: every builder returns a Value whose node
// stores the forward result, references to its inputs, a forward functor
// (so a graph can be re-evaluated in place after perturbing a leaf, which
// the finite-difference checker relies on) and a backward functor that
// accumulates gradients into the inputs. Gradients of multiply-used values
// accumulate by summation. Single-threaded per graph.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "xmc/rng.hpp"
#include "xmc/tensor.hpp"

namespace xmc::ad {

enum class OpKind {
  matmul,
  add,
  elementwise_mul,
  concat,
  sum_over_axis,
  mean_over_axis,
  sigmoid,
  tanh,
  relu,
  softmax_over_axis,
  embedding_lookup,
  conv1d_dilated,
  dropout,
  transpose,
};

struct Node;
using ValuePtr = std::shared_ptr<Node>;

struct Node {
  Tensor data;
  Tensor grad;            // allocated lazily; same shape as data when present
  bool has_grad = false;
  bool requires_grad = false;  // trainable leaf
  bool grad_needed = false;    // gradient must flow through this node
  std::vector<ValuePtr> parents;
  std::function<void()> forward_fn;   // recompute data from parents
  std::function<void()> backward_fn;  // accumulate grad into parents
  std::string name;

  void ensure_grad() {
    if (!has_grad) {
      grad = Tensor(data.dims);
      has_grad = true;
    }
  }
  void zero_grad() {
    if (has_grad) grad.fill(0.0);
  }
};

inline ValuePtr constant(Tensor t, std::string name = "") {
  auto n = std::make_shared<Node>();
  n->data = std::move(t);
  n->name = std::move(name);
  return n;
}

inline ValuePtr param(Tensor t, std::string name) {
  auto n = std::make_shared<Node>();
  n->data = std::move(t);
  n->name = std::move(name);
  n->requires_grad = true;
  n->grad_needed = true;
  n->ensure_grad();
  return n;
}

namespace detail {

inline ValuePtr make_op(std::vector<ValuePtr> parents) {
  auto n = std::make_shared<Node>();
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->grad_needed) n->grad_needed = true;
  return n;
}

[[noreturn]] inline void shape_error(const char* op, const Tensor& a) {
  throw std::invalid_argument(std::string(op) + ": bad shape " + a.shape_str());
}

[[noreturn]] inline void shape_error(const char* op, const Tensor& a,
                                     const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              a.shape_str() + " and " + b.shape_str());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// primitive ops

inline ValuePtr matmul(const ValuePtr& a, const ValuePtr& b) {
  if (a->data.rank() != 2 || b->data.rank() != 2 ||
      a->data.cols() != b->data.rows())
    detail::shape_error("matmul", a->data, b->data);
  auto out = detail::make_op({a, b});
  Node* A = a.get();
  Node* B = b.get();
  Node* O = out.get();
  auto forward = [A, B, O]() {
    const std::size_t m = A->data.rows(), k = A->data.cols(),
                      n = B->data.cols();
    O->data = Tensor({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = &A->data.v[i * k];
      double* orow = &O->data.v[i * n];
      for (std::size_t t = 0; t < k; ++t) {
        const double av = arow[t];
        if (av == 0.0) continue;
        const double* brow = &B->data.v[t * n];
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  };
  forward();
  out->forward_fn = forward;
  out->backward_fn = [A, B, O]() {
    const std::size_t m = A->data.rows(), k = A->data.cols(),
                      n = B->data.cols();
    if (A->grad_needed) {
      A->ensure_grad();
      // gA += g . B^T
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = &O->grad.v[i * n];
        double* garow = &A->grad.v[i * k];
        for (std::size_t t = 0; t < k; ++t) {
          const double* brow = &B->data.v[t * n];
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          garow[t] += acc;
        }
      }
    }
    if (B->grad_needed) {
      B->ensure_grad();
      // gB += A^T . g
      for (std::size_t t = 0; t < k; ++t) {
        double* gbrow = &B->grad.v[t * n];
        for (std::size_t i = 0; i < m; ++i) {
          const double av = A->data.v[i * k + t];
          if (av == 0.0) continue;
          const double* grow = &O->grad.v[i * n];
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  };
  return out;
}

inline ValuePtr add(const ValuePtr& a, const ValuePtr& b) {
  if (!a->data.same_shape(b->data)) detail::shape_error("add", a->data, b->data);
  auto out = detail::make_op({a, b});
  Node* A = a.get();
  Node* B = b.get();
  Node* O = out.get();
  auto forward = [A, B, O]() {
    O->data = A->data;
    for (std::size_t i = 0; i < O->data.size(); ++i) O->data.v[i] += B->data.v[i];
  };
  forward();
  out->forward_fn = forward;
  out->backward_fn = [A, B, O]() {
    for (Node* p : {A, B}) {
      if (!p->grad_needed) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < O->grad.size(); ++i)
        p->grad.v[i] += O->grad.v[i];
    }
  };
  return out;
}

inline ValuePtr elementwise_mul(const ValuePtr& a, const ValuePtr& b) {
  if (!a->data.same_shape(b->data))
    detail::shape_error("elementwise_mul", a->data, b->data);
  auto out = detail::make_op({a, b});
  Node* A = a.get();
  Node* B = b.get();
  Node* O = out.get();
  auto forward = [A, B, O]() {
    O->data = A->data;
    for (std::size_t i = 0; i < O->data.size(); ++i) O->data.v[i] *= B->data.v[i];
  };
  forward();
  out->forward_fn = forward;
  out->backward_fn = [A, B, O]() {
    if (A->grad_needed) {
      A->ensure_grad();
      for (std::size_t i = 0; i < O->grad.size(); ++i)
        A->grad.v[i] += O->grad.v[i] * B->data.v[i];
    }
    if (B->grad_needed) {
      B->ensure_grad();
      for (std::size_t i = 0; i < O->grad.size(); ++i)
        B->grad.v[i] += O->grad.v[i] * A->data.v[i];
    }
  };
  return out;
}

// Concatenate rank-2 inputs along axis 0 (stack rows) or axis 1 (widen rows).
inline ValuePtr concat(const std::vector<ValuePtr>& inputs, int axis) {
  if (inputs.empty()) throw std::invalid_argument("concat: no inputs");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  const std::size_t other = axis == 0 ? 1 : 0;
  for (const auto& in : inputs) {
    if (in->data.rank() != 2) detail::shape_error("concat", in->data);
    if (in->data.dims[other] != inputs[0]->data.dims[other])
      detail::shape_error("concat", inputs[0]->data, in->data);
  }
  auto out = detail::make_op(inputs);
  Node* O = out.get();
  std::vector<Node*> ps;
  for (const auto& in : inputs) ps.push_back(in.get());
  auto forward = [ps, O, axis]() {
    std::size_t total = 0;
    for (Node* p : ps) total += p->data.dims[axis == 0 ? 0 : 1];
    if (axis == 0) {
      const std::size_t c = ps[0]->data.cols();
      O->data = Tensor({total, c});
      std::size_t r0 = 0;
      for (Node* p : ps) {
        std::copy(p->data.v.begin(), p->data.v.end(),
                  O->data.v.begin() + r0 * c);
        r0 += p->data.rows();
      }
    } else {
      const std::size_t r = ps[0]->data.rows();
      O->data = Tensor({r, total});
      std::size_t c0 = 0;
      for (Node* p : ps) {
        const std::size_t pc = p->data.cols();
        for (std::size_t i = 0; i < r; ++i)
          std::copy(&p->data.v[i * pc], &p->data.v[i * pc] + pc,
                    &O->data.v[i * total + c0]);
        c0 += pc;
      }
    }
  };
  forward();
  out->forward_fn = forward;
  out->backward_fn = [ps, O, axis]() {
    if (axis == 0) {
      const std::size_t c = O->data.cols();
      std::size_t r0 = 0;
      for (Node* p : ps) {
        if (p->grad_needed) {
          p->ensure_grad();
          for (std::size_t i = 0; i < p->data.size(); ++i)
            p->grad.v[i] += O->grad.v[r0 * c + i];
        }
        r0 += p->data.rows();
      }
    } else {
      const std::size_t total = O->data.cols();
      const std::size_t r = O->data.rows();
      std::size_t c0 = 0;
      for (Node* p : ps) {
        const std::size_t pc = p->data.cols();
        if (p->grad_needed) {
          p->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j)
              p->grad.v[i * pc + j] += O->grad.v[i * total + c0 + j];
        }
        c0 += pc;
      }
    }
  };
  return out;
}

namespace detail {

// Shared by sum/mean. axis -1 reduces everything to a scalar; axis 0/1 apply
// to rank-2 inputs and return rank-1 results.
inline ValuePtr reduce_axis(const ValuePtr& a, int axis, bool mean,
                            const char* opname) {
  if (axis == -1) {
    auto out = make_op({a});
    Node* A = a.get();
    Node* O = out.get();
    const double scale = mean ? 1.0 / static_cast<double>(A->data.size()) : 1.0;
    auto forward = [A, O, scale]() {
      double acc = 0.0;
      for (double x : A->data.v) acc += x;
      O->data = Tensor::scalar(acc * scale);
    };
    forward();
    out->forward_fn = forward;
    out->backward_fn = [A, O, scale]() {
      if (!A->grad_needed) return;
      A->ensure_grad();
      const double g = O->grad.v[0] * scale;
      for (std::size_t i = 0; i < A->grad.size(); ++i) A->grad.v[i] += g;
    };
    return out;
  }
  if (a->data.rank() != 2 || (axis != 0 && axis != 1))
    shape_error(opname, a->data);
  auto out = make_op({a});
  Node* A = a.get();
  Node* O = out.get();
  const std::size_t n_over = a->data.dims[static_cast<std::size_t>(axis)];
  const double scale = mean ? 1.0 / static_cast<double>(n_over) : 1.0;
  auto forward = [A, O, axis, scale]() {
    const std::size_t r = A->data.rows(), c = A->data.cols();
    if (axis == 0) {
      O->data = Tensor({c});
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) O->data.v[j] += A->data(i, j);
    } else {
      O->data = Tensor({r});
      for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += A->data(i, j);
        O->data.v[i] = acc;
      }
    }
    if (scale != 1.0)
      for (double& x : O->data.v) x *= scale;
  };
  forward();
  out->forward_fn = forward;
  out->backward_fn = [A, O, axis, scale]() {
    if (!A->grad_needed) return;
    A->ensure_grad();
    const std::size_t r = A->data.rows(), c = A->data.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        A->grad(i, j) += O->grad.v[axis == 0 ? j : i] * scale;
  };
  return out;
}

inline ValuePtr unary_elementwise(const ValuePtr& a,
                                  double (*f)(double),
                                  double (*df_from_y)(double, double)) {
  auto out = make_op({a});
  Node* A = a.get();
  Node* O = out.get();
  auto forward = [A, O, f]() {
    O->data = A->data;
    for (double& x : O->data.v) x = f(x);
  };
  forward();
  out->forward_fn = forward;
  out->backward_fn = [A, O, df_from_y]() {
    if (!A->grad_needed) return;
    A->ensure_grad();
    for (std::size_t i = 0; i < O->grad.size(); ++i)
      A->grad.v[i] += O->grad.v[i] * df_from_y(O->data.v[i], A->data.v[i]);
  };
  return out;
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline ValuePtr sum_over_axis(const ValuePtr& a, int axis) {
  return detail::reduce_axis(a, axis, false, "sum_over_axis");
}
inline ValuePtr mean_over_axis(const ValuePtr& a, int axis) {
  return detail::reduce_axis(a, axis, true, "mean_over_axis");
}
inline ValuePtr sum_all(const ValuePtr& a) { return sum_over_axis(a, -1); }

inline ValuePtr sigmoid(const ValuePtr& a) {
  return detail::unary_elementwise(
      a, [](double x) { return detail::stable_sigmoid(x); },
      [](double y, double) { return y * (1.0 - y); });
}

inline ValuePtr tanh_(const ValuePtr& a) {
  return detail::unary_elementwise(
      a, [](double x) { return std::tanh(x); },
      [](double y, double) { return 1.0 - y * y; });
}

inline ValuePtr relu(const ValuePtr& a) {
  return detail::unary_elementwise(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double, double x) { return x > 0.0 ? 1.0 : 0.0; });
}

// Softmax along the given axis of a rank-2 tensor (each slice normalizes
// to 1). axis 0: down each column; axis 1: along each row.
inline ValuePtr softmax_over_axis(const ValuePtr& a, int axis) {
  if (a->data.rank() != 2 || (axis != 0 && axis != 1))
    detail::shape_error("softmax_over_axis", a->data);
  auto out = detail::make_op({a});
  Node* A = a.get();
  Node* O = out.get();
  auto forward = [A, O, axis]() {
    const std::size_t r = A->data.rows(), c = A->data.cols();
    O->data = Tensor({r, c});
    const std::size_t slices = axis == 0 ? c : r;
    const std::size_t len = axis == 0 ? r : c;
    for (std::size_t s = 0; s < slices; ++s) {
      auto idx = [&](std::size_t t) { return axis == 0 ? t * c + s : s * c + t; };
      double mx = -1e300;
      for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, A->data.v[idx(t)]);
      double z = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const double e = std::exp(A->data.v[idx(t)] - mx);
        O->data.v[idx(t)] = e;
        z += e;
      }
      for (std::size_t t = 0; t < len; ++t) O->data.v[idx(t)] /= z;
    }
  };
  forward();
  out->forward_fn = forward;
  out->backward_fn = [A, O, axis]() {
    if (!A->grad_needed) return;
    A->ensure_grad();
    const std::size_t r = A->data.rows(), c = A->data.cols();
    const std::size_t slices = axis == 0 ? c : r;
    const std::size_t len = axis == 0 ? r : c;
    for (std::size_t s = 0; s < slices; ++s) {
      auto idx = [&](std::size_t t) { return axis == 0 ? t * c + s : s * c + t; };
      double dot = 0.0;
      for (std::size_t t = 0; t < len; ++t)
        dot += O->grad.v[idx(t)] * O->data.v[idx(t)];
      for (std::size_t t = 0; t < len; ++t)
        A->grad.v[idx(t)] +=
            O->data.v[idx(t)] * (O->grad.v[idx(t)] - dot);
    }
  };
  return out;
}

// Gather rows of a rank-2 table. Also used as a row-slice: looking up row t
// of an activation matrix is the same operation.
inline ValuePtr embedding_lookup(const ValuePtr& table,
                                 std::vector<std::size_t> indices) {
  if (table->data.rank() != 2) detail::shape_error("embedding_lookup", table->data);
  for (auto i : indices)
    if (i >= table->data.rows())
      throw std::invalid_argument("embedding_lookup: index out of range");
  auto out = detail::make_op({table});
  Node* T = table.get();
  Node* O = out.get();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  auto forward = [T, O, idx]() {
    const std::size_t d = T->data.cols();
    O->data = Tensor({idx->size(), d});
    for (std::size_t i = 0; i < idx->size(); ++i)
      std::copy(&T->data.v[(*idx)[i] * d], &T->data.v[(*idx)[i] * d] + d,
                &O->data.v[i * d]);
  };
  forward();
  out->forward_fn = forward;
  out->backward_fn = [T, O, idx]() {
    if (!T->grad_needed) return;
    T->ensure_grad();
    const std::size_t d = T->data.cols();
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (std::size_t j = 0; j < d; ++j)
        T->grad.v[(*idx)[i] * d + j] += O->grad.v[i * d + j];
  };
  return out;
}

// 1-D convolution along the time axis (rows) of x (l x Cin) with an odd-width
// kernel (s x Cin x Cout), bias (Cout) and the given dilation. Symmetric zero
// padding keeps the output length equal to l.
inline ValuePtr conv1d_dilated(const ValuePtr& x, const ValuePtr& kernel,
                               const ValuePtr& bias, std::size_t dilation) {
  if (x->data.rank() != 2 || kernel->data.rank() != 3 ||
      bias->data.rank() != 1)
    detail::shape_error("conv1d_dilated", x->data, kernel->data);
  const std::size_t s = kernel->data.dims[0];
  if (s % 2 == 0)
    throw std::invalid_argument("conv1d_dilated: kernel width must be odd");
  if (kernel->data.dims[1] != x->data.cols() ||
      kernel->data.dims[2] != bias->data.dims[0])
    detail::shape_error("conv1d_dilated", x->data, kernel->data);
  if (dilation == 0)
    throw std::invalid_argument("conv1d_dilated: dilation must be positive");
  auto out = detail::make_op({x, kernel, bias});
  Node* X = x.get();
  Node* K = kernel.get();
  Node* B = bias.get();
  Node* O = out.get();
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(s / 2);
  const std::ptrdiff_t dil = static_cast<std::ptrdiff_t>(dilation);
  auto forward = [X, K, B, O, half, dil]() {
    const std::size_t l = X->data.rows(), cin = X->data.cols();
    const std::size_t s = K->data.dims[0], cout = K->data.dims[2];
    O->data = Tensor({l, cout});
    for (std::size_t t = 0; t < l; ++t) {
      double* orow = &O->data.v[t * cout];
      for (std::size_t o = 0; o < cout; ++o) orow[o] = B->data.v[o];
      for (std::size_t k = 0; k < s; ++k) {
        const std::ptrdiff_t src =
            static_cast<std::ptrdiff_t>(t) +
            (static_cast<std::ptrdiff_t>(k) - half) * dil;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(l)) continue;
        const double* xrow = &X->data.v[static_cast<std::size_t>(src) * cin];
        for (std::size_t c = 0; c < cin; ++c) {
          const double xv = xrow[c];
          if (xv == 0.0) continue;
          const double* krow = &K->data.v[(k * cin + c) * cout];
          for (std::size_t o = 0; o < cout; ++o) orow[o] += xv * krow[o];
        }
      }
    }
  };
  forward();
  out->forward_fn = forward;
  out->backward_fn = [X, K, B, O, half, dil]() {
    const std::size_t l = X->data.rows(), cin = X->data.cols();
    const std::size_t s = K->data.dims[0], cout = K->data.dims[2];
    if (B->grad_needed) {
      B->ensure_grad();
      for (std::size_t t = 0; t < l; ++t)
        for (std::size_t o = 0; o < cout; ++o)
          B->grad.v[o] += O->grad.v[t * cout + o];
    }
    const bool gx = X->grad_needed, gk = K->grad_needed;
    if (gx) X->ensure_grad();
    if (gk) K->ensure_grad();
    if (!gx && !gk) return;
    for (std::size_t t = 0; t < l; ++t) {
      const double* grow = &O->grad.v[t * cout];
      for (std::size_t k = 0; k < s; ++k) {
        const std::ptrdiff_t src =
            static_cast<std::ptrdiff_t>(t) +
            (static_cast<std::ptrdiff_t>(k) - half) * dil;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(l)) continue;
        const std::size_t si = static_cast<std::size_t>(src);
        for (std::size_t c = 0; c < cin; ++c) {
          const double* krow = &K->data.v[(k * cin + c) * cout];
          if (gx) {
            double acc = 0.0;
            for (std::size_t o = 0; o < cout; ++o) acc += grow[o] * krow[o];
            X->grad.v[si * cin + c] += acc;
          }
          if (gk) {
            const double xv = X->data.v[si * cin + c];
            if (xv != 0.0) {
              double* gkrow = &K->grad.v[(k * cin + c) * cout];
              for (std::size_t o = 0; o < cout; ++o) gkrow[o] += xv * grow[o];
            }
          }
        }
      }
    }
  };
  return out;
}

// Inverted dropout. The Bernoulli mask is drawn once at node construction
// from the given seed, so re-running the forward pass (finite differences)
// sees the identical mask. Inference returns the input unchanged.
inline ValuePtr dropout(const ValuePtr& x, double rate, std::uint64_t seed,
                        bool training) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout: rate must be in [0, 1)");
  auto out = detail::make_op({x});
  Node* X = x.get();
  Node* O = out.get();
  auto mask = std::make_shared<Tensor>(x->data.dims, 1.0);
  if (training && rate > 0.0) {
    Rng rng(seed);
    const double keep = 1.0 - rate;
    for (double& m : mask->v) m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  }
  auto forward = [X, O, mask]() {
    O->data = X->data;
    for (std::size_t i = 0; i < O->data.size(); ++i) O->data.v[i] *= mask->v[i];
  };
  forward();
  out->forward_fn = forward;
  out->backward_fn = [X, O, mask]() {
    if (!X->grad_needed) return;
    X->ensure_grad();
    for (std::size_t i = 0; i < O->grad.size(); ++i)
      X->grad.v[i] += O->grad.v[i] * mask->v[i];
  };
  return out;
}

inline ValuePtr transpose(const ValuePtr& a) {
  if (a->data.rank() != 2) detail::shape_error("transpose", a->data);
  auto out = detail::make_op({a});
  Node* A = a.get();
  Node* O = out.get();
  auto forward = [A, O]() {
    const std::size_t r = A->data.rows(), c = A->data.cols();
    O->data = Tensor({c, r});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) O->data(j, i) = A->data(i, j);
  };
  forward();
  out->forward_fn = forward;
  out->backward_fn = [A, O]() {
    if (!A->grad_needed) return;
    A->ensure_grad();
    const std::size_t r = A->data.rows(), c = A->data.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) A->grad(i, j) += O->grad(j, i);
  };
  return out;
}

// ---------------------------------------------------------------------------
// generic dispatcher

struct OpAttrs {
  int axis = 0;
  std::size_t dilation = 1;
  double rate = 0.0;
  std::uint64_t seed = 0;
  bool training = true;
  std::vector<std::size_t> indices;
};

inline ValuePtr apply(OpKind kind, const std::vector<ValuePtr>& inputs,
                      const OpAttrs& attrs = {}) {
  auto need = [&](std::size_t n, const char* op) {
    if (inputs.size() != n)
      throw std::invalid_argument(std::string(op) + ": expects " +
                                  std::to_string(n) + " inputs");
  };
  switch (kind) {
    case OpKind::matmul: need(2, "matmul"); return matmul(inputs[0], inputs[1]);
    case OpKind::add: need(2, "add"); return add(inputs[0], inputs[1]);
    case OpKind::elementwise_mul:
      need(2, "elementwise_mul");
      return elementwise_mul(inputs[0], inputs[1]);
    case OpKind::concat: return concat(inputs, attrs.axis);
    case OpKind::sum_over_axis:
      need(1, "sum_over_axis");
      return sum_over_axis(inputs[0], attrs.axis);
    case OpKind::mean_over_axis:
      need(1, "mean_over_axis");
      return mean_over_axis(inputs[0], attrs.axis);
    case OpKind::sigmoid: need(1, "sigmoid"); return sigmoid(inputs[0]);
    case OpKind::tanh: need(1, "tanh"); return tanh_(inputs[0]);
    case OpKind::relu: need(1, "relu"); return relu(inputs[0]);
    case OpKind::softmax_over_axis:
      need(1, "softmax_over_axis");
      return softmax_over_axis(inputs[0], attrs.axis);
    case OpKind::embedding_lookup:
      need(1, "embedding_lookup");
      return embedding_lookup(inputs[0], attrs.indices);
    case OpKind::conv1d_dilated:
      need(3, "conv1d_dilated");
      return conv1d_dilated(inputs[0], inputs[1], inputs[2], attrs.dilation);
    case OpKind::dropout:
      need(1, "dropout");
      return dropout(inputs[0], attrs.rate, attrs.seed, attrs.training);
    case OpKind::transpose: need(1, "transpose"); return transpose(inputs[0]);
  }
  throw std::invalid_argument("apply: unknown op kind");
}

// ---------------------------------------------------------------------------
// graph traversal

inline std::vector<Node*> topo_order(const ValuePtr& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

// Re-evaluate every interior node (ascending topological order).
inline void recompute(const std::vector<Node*>& topo) {
  for (Node* n : topo)
    if (n->forward_fn) n->forward_fn();
}

// Populate gradients of every grad-needing value reachable from loss.
inline void backward(const ValuePtr& loss) {
  if (loss->data.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                loss->data.shape_str());
  auto order = topo_order(loss);
  // interior grads start from zero for this pass; trainable leaves keep
  // whatever has already accumulated (callers zero them between steps)
  for (Node* n : order)
    if (!n->requires_grad && n->has_grad) n->zero_grad();
  loss->ensure_grad();
  loss->grad.v[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad && n->grad_needed) n->backward_fn();
  }
}

inline void zero_grads(const std::vector<ValuePtr>& params) {
  for (const auto& p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking

struct BuiltGraph {
  ValuePtr loss;
  std::vector<ValuePtr> params;
};

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t failures = 0;
  GradCheckEntry worst;  // largest relative error seen
  bool pass(double tol) const { return checked > 0 && worst.rel_err <= tol; }
};

// Central finite differences with step h against the analytic gradients of
// `graph.loss` w.r.t. each trainable parameter. Arrays larger than
// max_entries_per_param are subsampled (deterministically from rng).
// Relative error uses max(1, |analytic|, |numeric|) as denominator.
inline GradCheckReport check_gradients(const BuiltGraph& graph, double tol,
                                       Rng& rng,
                                       std::size_t max_entries_per_param = 64,
                                       double h = 1e-3) {
  auto topo = topo_order(graph.loss);
  recompute(topo);
  for (const auto& p : graph.params) p->zero_grad();
  backward(graph.loss);

  GradCheckReport report;
  for (const auto& p : graph.params) {
    if (!p->requires_grad) continue;
    const std::size_t n = p->data.size();
    std::vector<std::size_t> picks;
    if (n <= max_entries_per_param) {
      picks.resize(n);
      for (std::size_t i = 0; i < n; ++i) picks[i] = i;
    } else {
      for (std::size_t i = 0; i < max_entries_per_param; ++i)
        picks.push_back(rng.next_index(n));
    }
    for (std::size_t i : picks) {
      const double saved = p->data.v[i];
      p->data.v[i] = saved + h;
      recompute(topo);
      const double fp = graph.loss->data.v[0];
      p->data.v[i] = saved - h;
      recompute(topo);
      const double fm = graph.loss->data.v[0];
      p->data.v[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = p->grad.v[i];
      const double denom =
          std::max({1.0, std::abs(analytic), std::abs(numeric)});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.checked;
      if (rel > tol) ++report.failures;
      if (rel >= report.worst.rel_err)
        report.worst = {p->name, i, analytic, numeric, rel};
    }
  }
  recompute(topo);  // leave the graph in its unperturbed state
  return report;
}

inline GradCheckReport check_gradients(
    const std::function<BuiltGraph()>& builder, double tol, Rng& rng,
    std::size_t max_entries_per_param = 64, double h = 1e-3) {
  BuiltGraph g = builder();
  return check_gradients(g, tol, rng, max_entries_per_param, h);
}

}  // namespace xmc::ad
