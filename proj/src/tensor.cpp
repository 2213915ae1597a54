#include "triforecaster/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <cblas.h>

#include "triforecaster/errors.hpp"

namespace triforecaster {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Output shape of an elementwise binary op. Inputs are indexed as i % numel.
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return a;
  if (shape_numel(b) == 1) return a;
  if (shape_numel(a) == 1) return b;
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

int blas_int(std::size_t v) { return static_cast<int>(v); }

// c[M,N] += a[M,K] * b[K,N]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(m), blas_int(n), blas_int(k), 1.0, a, blas_int(k),
              b, blas_int(n), 1.0, c, blas_int(n));
}

// da[M,K] += dc[M,N] * b[K,N]^T
void gemm_acc_bt(const double* dc, const double* b, double* da, std::size_t m, std::size_t k, std::size_t n) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(m), blas_int(k), blas_int(n), 1.0, dc, blas_int(n),
              b, blas_int(n), 1.0, da, blas_int(k));
}

// db[K,N] += a[M,K]^T * dc[M,N]
void gemm_acc_at(const double* a, const double* dc, double* db, std::size_t m, std::size_t k, std::size_t n) {
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(k), blas_int(n), blas_int(m), 1.0, a, blas_int(k),
              dc, blas_int(n), 1.0, db, blas_int(n));
}

template <typename F>
void for_broadcast(std::size_t total, std::size_t na, std::size_t nb, F&& f) {
  // One operand always spans the full output; the other repeats with period n.
  if (na == total && nb == total) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
  } else if (na == total) {
    for (std::size_t o = 0; o < total; o += nb) {
      for (std::size_t j = 0; j < nb; ++j) f(o + j, o + j, j);
    }
  } else {
    for (std::size_t o = 0; o < total; o += na) {
      for (std::size_t j = 0; j < na; ++j) f(o + j, j, o + j);
    }
  }
}

template <typename Forward, typename Derivative>
Tensor unary_op(const Tensor& x, Forward f, Derivative df) {
  const auto in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [x, df](std::span<const double> y, std::span<const double> g, GradSink& sink) {
                           if (!sink.wants(0)) return;
                           auto gx = sink[0];
                           const auto xv = x.values();
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * df(xv[i], y[i]);
                         });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool GradSink::wants(std::size_t i) const { return inputs_.at(i)->requires_grad; }

std::span<double> GradSink::operator[](std::size_t i) {
  auto& node = *inputs_.at(i);
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
  node.grad_touched = true;
  return node.grad;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor: zero-sized dimension in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::from_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, BackwardFn backward) {
  assert(shape_numel(shape) == values.size());
#ifndef NDEBUG
  const bool inputs_finite = std::all_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
    return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
  });
  if (inputs_finite) {
    assert(std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); }));
  }
#endif
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  const bool track = t_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                                   [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw DimensionError("size: axis " + std::to_string(axis) + " out of range for " + shape_str(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }
std::span<const double> Tensor::values() const { return node_->value; }
std::span<double> Tensor::mutable_values() { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("at: index rank mismatch for " + shape_str(s));
  std::size_t off = 0;
  std::size_t d = 0;
  for (std::size_t i : index) {
    if (i >= s[d]) throw DimensionError("at: index out of range for " + shape_str(s));
    off = off * s[d] + i;
    ++d;
  }
  return node_->value[off];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return !node_->backward; }
std::span<const double> Tensor::grad() const { return node_->grad; }
bool Tensor::grad_touched() const { return node_->grad_touched; }

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  node_->grad_touched = false;
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }
Tensor Tensor::clone(bool requires_grad) const { return from(shape(), node_->value, requires_grad); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> pending{node_.get()};
  seen.insert(node_.get());
  while (!pending.empty()) {
    detail::Node* n = pending.back();
    pending.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) pending.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  for (detail::Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  if (node_->grad.empty()) node_->grad.assign(1, 0.0);
  node_->grad[0] += 1.0;
  node_->grad_touched = true;

  for (detail::Node* n : order) {
    if (!n->backward) continue;
    GradSink sink(n->parents);
    n->backward(n->value, n->grad, sink);
  }
  // Interior gradients are scratch space; only leaves keep theirs.
  for (detail::Node* n : order) {
    if (n->backward) std::vector<double>().swap(n->grad);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul: shapes " + shape_str(sa) + " and " + shape_str(sb) + " are incompatible");
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t kb = sb[sb.size() - 2];
  const std::size_t n = sb.back();
  if (k != kb) throw mismatch();

  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);

  if (batch_b.empty()) {
    // One GEMM with all leading dims of `a` folded into the row count.
    const std::size_t rows = shape_numel(batch_a) * m;
    Shape out_shape = batch_a;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(rows * n, 0.0);
    gemm_acc(a.values().data(), b.values().data(), out.data(), rows, k, n);
    return Tensor::from_op(std::move(out_shape), std::move(out), {a, b},
                           [a, b, rows, k, n](std::span<const double>, std::span<const double> g, GradSink& sink) {
                             if (sink.wants(0)) gemm_acc_bt(g.data(), b.values().data(), sink[0].data(), rows, k, n);
                             if (sink.wants(1)) gemm_acc_at(a.values().data(), g.data(), sink[1].data(), rows, k, n);
                           });
  }

  const bool broadcast_a = batch_a.empty();
  if (!broadcast_a && batch_a != batch_b) throw mismatch();
  const std::size_t batches = shape_numel(batch_b);
  Shape out_shape = batch_b;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batches * m * n, 0.0);
  const std::size_t stride_a = broadcast_a ? 0 : m * k;
  for (std::size_t bi = 0; bi < batches; ++bi) {
    gemm_acc(a.values().data() + bi * stride_a, b.values().data() + bi * k * n, out.data() + bi * m * n, m, k, n);
  }
  return Tensor::from_op(
      std::move(out_shape), std::move(out), {a, b},
      [a, b, batches, stride_a, m, k, n](std::span<const double>, std::span<const double> g, GradSink& sink) {
        for (std::size_t bi = 0; bi < batches; ++bi) {
          const double* gb = g.data() + bi * m * n;
          if (sink.wants(0)) {
            gemm_acc_bt(gb, b.values().data() + bi * k * n, sink[0].data() + bi * stride_a, m, k, n);
          }
          if (sink.wants(1)) {
            gemm_acc_at(a.values().data() + bi * stride_a, gb, sink[1].data() + bi * k * n, m, k, n);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape(a.shape(), b.shape(), "add");
  const std::size_t total = shape_numel(shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(total);
  for_broadcast(total, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] + bv[ib]; });
  return Tensor::from_op(std::move(shape), std::move(out), {a, b},
                         [na, nb](std::span<const double>, std::span<const double> g, GradSink& sink) {
                           if (sink.wants(0)) {
                             auto ga = sink[0];
                             for_broadcast(g.size(), na, nb, [&](std::size_t i, std::size_t ia, std::size_t /*ib*/) { ga[ia] += g[i]; });
                           }
                           if (sink.wants(1)) {
                             auto gb = sink[1];
                             for_broadcast(g.size(), na, nb, [&](std::size_t i, std::size_t /*ia*/, std::size_t ib) { gb[ib] += g[i]; });
                           }
                         });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape(a.shape(), b.shape(), "sub");
  const std::size_t total = shape_numel(shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(total);
  for_broadcast(total, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] - bv[ib]; });
  return Tensor::from_op(std::move(shape), std::move(out), {a, b},
                         [na, nb](std::span<const double>, std::span<const double> g, GradSink& sink) {
                           if (sink.wants(0)) {
                             auto ga = sink[0];
                             for_broadcast(g.size(), na, nb, [&](std::size_t i, std::size_t ia, std::size_t /*ib*/) { ga[ia] += g[i]; });
                           }
                           if (sink.wants(1)) {
                             auto gb = sink[1];
                             for_broadcast(g.size(), na, nb, [&](std::size_t i, std::size_t /*ia*/, std::size_t ib) { gb[ib] -= g[i]; });
                           }
                         });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape(a.shape(), b.shape(), "mul");
  const std::size_t total = shape_numel(shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(total);
  for_broadcast(total, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] * bv[ib]; });
  return Tensor::from_op(std::move(shape), std::move(out), {a, b},
                         [a, b, na, nb](std::span<const double>, std::span<const double> g, GradSink& sink) {
                           const auto av = a.values();
                           const auto bv = b.values();
                           if (sink.wants(0)) {
                             auto ga = sink[0];
                             for_broadcast(g.size(), na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] * bv[ib]; });
                           }
                           if (sink.wants(1)) {
                             auto gb = sink[1];
                             for_broadcast(g.size(), na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += g[i] * av[ia]; });
                           }
                         });
}

Tensor div(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape(a.shape(), b.shape(), "div");
  const std::size_t total = shape_numel(shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(total);
  for_broadcast(total, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] / bv[ib]; });
  return Tensor::from_op(std::move(shape), std::move(out), {a, b},
                         [a, b, na, nb](std::span<const double> y, std::span<const double> g, GradSink& sink) {
                           const auto bv = b.values();
                           if (sink.wants(0)) {
                             auto ga = sink[0];
                             for_broadcast(g.size(), na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] / bv[ib]; });
                           }
                           if (sink.wants(1)) {
                             auto gb = sink[1];
                             for_broadcast(g.size(), na, nb, [&](std::size_t i, std::size_t /*ia*/, std::size_t ib) { gb[ib] -= g[i] * y[i] / bv[ib]; });
                           }
                         });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary_op(
      x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary_op(
      x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.dim(), "softmax");
  const AxisSplit s = split_at(x.shape(), ax);
  const auto in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = in[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, in[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(in[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= total;
    }
  }
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [s](std::span<const double> y, std::span<const double> g, GradSink& sink) {
                           if (!sink.wants(0)) return;
                           auto gx = sink[0];
                           for (std::size_t o = 0; o < s.outer; ++o) {
                             for (std::size_t i = 0; i < s.inner; ++i) {
                               const std::size_t base = o * s.len * s.inner + i;
                               double dot = 0.0;
                               for (std::size_t l = 0; l < s.len; ++l) {
                                 dot += g[base + l * s.inner] * y[base + l * s.inner];
                               }
                               for (std::size_t l = 0; l < s.len; ++l) {
                                 const std::size_t idx = base + l * s.inner;
                                 gx[idx] += y[idx] * (g[idx] - dot);
                               }
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor transpose(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  if (axes.size() != rank) {
    throw DimensionError("transpose: permutation of length " + std::to_string(axes.size()) + " for shape " +
                         shape_str(in_shape));
  }
  std::vector<bool> used(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank || used[a]) throw DimensionError("transpose: invalid permutation for shape " + shape_str(in_shape));
    used[a] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    src_strides[i] = in_strides[axes[i]];
  }
  // gather[i] = source offset of output element i
  const std::size_t total = x.numel();
  std::vector<std::size_t> gather(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < total; ++i) {
    gather[i] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += src_strides[d];
        break;
      }
      src -= src_strides[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  const auto in = x.values();
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = in[gather[i]];
  return Tensor::from_op(std::move(out_shape), std::move(out), {x},
                         [gather = std::move(gather)](std::span<const double>, std::span<const double> g,
                                                      GradSink& sink) {
                           if (!sink.wants(0)) return;
                           auto gx = sink[0];
                           for (std::size_t i = 0; i < g.size(); ++i) gx[gather[i]] += g[i];
                         });
}

Tensor swap_last(const Tensor& x) {
  if (x.dim() < 2) throw DimensionError("swap_last: needs rank >= 2, got " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  const std::size_t rows = out_shape[out_shape.size() - 2];
  const std::size_t cols = out_shape.back();
  std::swap(out_shape[out_shape.size() - 2], out_shape.back());
  const std::size_t batches = x.numel() / (rows * cols);
  const auto in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t b = 0; b < batches; ++b) {
    const double* src = in.data() + b * rows * cols;
    double* dst = out.data() + b * rows * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
  return Tensor::from_op(std::move(out_shape), std::move(out), {x},
                         [batches, rows, cols](std::span<const double>, std::span<const double> g, GradSink& sink) {
                           if (!sink.wants(0)) return;
                           auto gx = sink[0];
                           for (std::size_t b = 0; b < batches; ++b) {
                             const double* src = g.data() + b * rows * cols;
                             double* dst = gx.data() + b * rows * cols;
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t c = 0; c < cols; ++c) dst[r * cols + c] += src[c * rows + r];
                             }
                           }
                         });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor::from_op(std::move(shape), std::move(out), {x},
                         [](std::span<const double>, std::span<const double> g, GradSink& sink) {
                           if (!sink.wants(0)) return;
                           auto gx = sink[0];
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                         });
}

Tensor flatten(const Tensor& x) { return reshape(x, {x.numel()}); }

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = xs.front().shape();
  const std::size_t ax = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == ax || s[d] == first[d];
    if (!ok) {
      throw DimensionError("concat: shapes " + shape_str(first) + " and " + shape_str(s) + " differ off axis " +
                           std::to_string(ax));
    }
    out_shape[ax] += s[ax];
  }
  const AxisSplit whole = split_at(out_shape, ax);
  std::vector<std::size_t> chunk(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) chunk[i] = xs[i].shape()[ax] * whole.inner;
  const std::size_t row = whole.len * whole.inner;
  std::vector<double> out(shape_numel(out_shape));
  for (std::size_t o = 0; o < whole.outer; ++o) {
    std::size_t off = o * row;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const auto v = xs[i].values();
      std::copy_n(v.data() + o * chunk[i], chunk[i], out.data() + off);
      off += chunk[i];
    }
  }
  return Tensor::from_op(std::move(out_shape), std::move(out), xs,
                         [chunk, row, outer = whole.outer](std::span<const double>, std::span<const double> g,
                                                           GradSink& sink) {
                           for (std::size_t o = 0; o < outer; ++o) {
                             std::size_t off = o * row;
                             for (std::size_t i = 0; i < chunk.size(); ++i) {
                               if (sink.wants(i)) {
                                 auto gi = sink[i];
                                 for (std::size_t j = 0; j < chunk[i]; ++j) gi[o * chunk[i] + j] += g[off + j];
                               }
                               off += chunk[i];
                             }
                           }
                         });
}

Tensor stack(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw DimensionError("stack: no inputs");
  const Shape& first = xs.front().shape();
  for (const auto& t : xs) {
    if (t.shape() != first) {
      throw DimensionError("stack: shapes " + shape_str(first) + " and " + shape_str(t.shape()) + " differ");
    }
  }
  const std::size_t n = shape_numel(first);
  Shape out_shape{xs.size()};
  out_shape.insert(out_shape.end(), first.begin(), first.end());
  std::vector<double> out(n * xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) std::copy_n(xs[i].values().data(), n, out.data() + i * n);
  return Tensor::from_op(std::move(out_shape), std::move(out), xs,
                         [n, count = xs.size()](std::span<const double>, std::span<const double> g, GradSink& sink) {
                           for (std::size_t i = 0; i < count; ++i) {
                             if (!sink.wants(i)) continue;
                             auto gi = sink[i];
                             for (std::size_t j = 0; j < n; ++j) gi[j] += g[i * n + j];
                           }
                         });
}

Tensor slice(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.dim() == 0 || begin >= end || end > x.shape()[0]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                         shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[0] = end - begin;
  const std::size_t row = x.numel() / x.shape()[0];
  const auto in = x.values();
  std::vector<double> out(in.begin() + static_cast<std::ptrdiff_t>(begin * row),
                          in.begin() + static_cast<std::ptrdiff_t>(end * row));
  return Tensor::from_op(std::move(out_shape), std::move(out), {x},
                         [offset = begin * row](std::span<const double>, std::span<const double> g, GradSink& sink) {
                           if (!sink.wants(0)) return;
                           auto gx = sink[0];
                           for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
                         });
}

Tensor select(const Tensor& x, std::size_t index) {
  if (x.dim() == 0 || index >= x.shape()[0]) {
    throw DimensionError("select: index " + std::to_string(index) + " out of range for " + shape_str(x.shape()));
  }
  Tensor s = slice(x, index, index + 1);
  Shape inner(x.shape().begin() + 1, x.shape().end());
  return reshape(s, std::move(inner));
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  const auto in = x.values();
  double total = 0.0;
  for (double v : in) total += v;
  return Tensor::from_op({}, {total}, {x}, [](std::span<const double>, std::span<const double> g, GradSink& sink) {
    if (!sink.wants(0)) return;
    auto gx = sink[0];
    for (double& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.dim(), "sum");
  const AxisSplit s = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  const auto in = x.values();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += in[(o * s.len + l) * s.inner + i];
    }
  }
  return Tensor::from_op(std::move(out_shape), std::move(out), {x},
                         [s](std::span<const double>, std::span<const double> g, GradSink& sink) {
                           if (!sink.wants(0)) return;
                           auto gx = sink[0];
                           for (std::size_t o = 0; o < s.outer; ++o) {
                             for (std::size_t l = 0; l < s.len; ++l) {
                               for (std::size_t i = 0; i < s.inner; ++i) {
                                 gx[(o * s.len + l) * s.inner + i] += g[o * s.inner + i];
                               }
                             }
                           }
                         });
}

Tensor mean(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.dim(), "mean");
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.shape()[ax]));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.dim() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t width = x.shape().back();
  if (gamma.shape() != Shape{width} || beta.shape() != Shape{width}) {
    throw DimensionError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match feature width of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / width;
  const auto in = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  std::vector<double> xhat(in.size());
  std::vector<double> rstd(rows);
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += row[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(width);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t idx = r * width + j;
      xhat[idx] = (row[j] - mu) * rstd[r];
      out[idx] = gv[j] * xhat[idx] + bv[j];
    }
  }
  return Tensor::from_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [gamma, xhat = std::move(xhat), rstd = std::move(rstd), rows, width](
          std::span<const double>, std::span<const double> g, GradSink& sink) {
        const auto gv = gamma.values();
        if (sink.wants(0)) {
          auto gx = sink[0];
          const double inv_w = 1.0 / static_cast<double>(width);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0;
            double mean_dx = 0.0;
            for (std::size_t j = 0; j < width; ++j) {
              const std::size_t idx = r * width + j;
              const double d = g[idx] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[idx];
            }
            mean_d *= inv_w;
            mean_dx *= inv_w;
            for (std::size_t j = 0; j < width; ++j) {
              const std::size_t idx = r * width + j;
              gx[idx] += rstd[r] * (g[idx] * gv[j] - mean_d - xhat[idx] * mean_dx);
            }
          }
        }
        if (sink.wants(1)) {
          auto gg = sink[1];
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % width] += g[i] * xhat[i];
        }
        if (sink.wants(2)) {
          auto gb = sink[2];
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % width] += g[i];
        }
      });
}

}  // namespace triforecaster
