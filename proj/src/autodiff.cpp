#include "pcqa/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <unordered_set>

#include "gemm.hpp"
#include "pcqa/error.hpp"

namespace pcqa::ad {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw UsageError(op + ": " + detail);
}

int normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) shape_error(op, "axis out of range for rank " + std::to_string(r));
  return axis;
}

std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// Output shape plus per-operand strides (0 on broadcast axes), aligned to
// the output rank.
struct Broadcast {
  Shape out;
  std::vector<std::int64_t> sa, sb;
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(r, 1);
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      shape_error(op, "cannot broadcast " + to_string(a) + " with " + to_string(b));
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  auto sa = strides_of(pa), sb = strides_of(pb);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] == 1) sa[i] = 0;
    if (pb[i] == 1) sb[i] = 0;
  }
  bc.sa = std::move(sa);
  bc.sb = std::move(sb);
  return bc;
}

// Calls f(out_index, a_offset, b_offset) for every output element in order.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t r = bc.out.size();
  const std::int64_t total = numel(bc.out);
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < total; ++i) {
    f(i, oa, ob);
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      if (++idx[d] < bc.out[d]) {
        oa += bc.sa[d];
        ob += bc.sb[d];
        break;
      }
      oa -= bc.sa[d] * (bc.out[d] - 1);
      ob -= bc.sb[d] * (bc.out[d] - 1);
      idx[d] = 0;
    }
  }
}

template <typename T>
void accumulate(Node<T>& target, std::span<const T> delta) {
  auto& g = target.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto e : shape)
    if (e <= 0) shape_error("Tensor", "non-positive extent in " + to_string(shape));
  if (static_cast<std::int64_t>(values.size()) != ad::numel(shape))
    shape_error("Tensor", std::to_string(values.size()) + " values for shape " + to_string(shape));
  node_ = std::make_shared<Node<T>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(ad::numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::int64_t Tensor<T>::dim(std::int64_t i) const {
  const auto r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) shape_error("dim", "axis out of range for " + to_string(shape()));
  return node_->shape[static_cast<std::size_t>(i)];
}

template <typename T>
T Tensor<T>::item() const {
  if (node_->value.size() != 1) shape_error("item", "tensor " + to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<NodePtr<T>> inputs,
                      std::function<void(Node<T>&)> backward, const char* op) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  const bool track = g_grad_enabled &&
                     std::any_of(inputs.begin(), inputs.end(),
                                 [](const NodePtr<T>& n) { return n && n->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw UsageError("backward: loss must be a scalar, got " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
  Node<T>* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child && child->requires_grad && !child->is_leaf() && visited.insert(child).second)
        stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) n->grad.clear();
  root->ensure_grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename T, typename Fwd, typename GradA, typename GradB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* op, Fwd fwd, GradA ga,
                    GradB gb) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) {
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    return make_result<T>(sa, std::move(out), {a.node_ptr(), b.node_ptr()},
                          [ga, gb](Node<T>& self) {
                            auto& x = *self.inputs[0];
                            auto& y = *self.inputs[1];
                            const auto& g = self.grad;
                            if (x.requires_grad) {
                              auto& dx = x.ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i)
                                dx[i] += ga(g[i], x.value[i], y.value[i]);
                            }
                            if (y.requires_grad) {
                              auto& dy = y.ensure_grad();
                              for (std::size_t i = 0; i < g.size(); ++i)
                                dy[i] += gb(g[i], x.value[i], y.value[i]);
                            }
                          },
                          op);
  }
  Broadcast bc = broadcast(sa, sb, op);
  std::vector<T> out(static_cast<std::size_t>(numel(bc.out)));
  const auto av = a.values();
  const auto bv = b.values();
  for_each_broadcast(bc, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
    out[i] = fwd(av[ia], bv[ib]);
  });
  Shape out_shape = bc.out;
  return make_result<T>(std::move(out_shape), std::move(out), {a.node_ptr(), b.node_ptr()},
                        [bc, ga, gb](Node<T>& self) {
                          auto& x = *self.inputs[0];
                          auto& y = *self.inputs[1];
                          const auto& g = self.grad;
                          T* dx = x.requires_grad ? x.ensure_grad().data() : nullptr;
                          T* dy = y.requires_grad ? y.ensure_grad().data() : nullptr;
                          for_each_broadcast(bc, [&](std::int64_t i, std::int64_t ia,
                                                     std::int64_t ib) {
                            if (dx) dx[ia] += ga(g[i], x.value[ia], y.value[ib]);
                            if (dy) dy[ib] += gb(g[i], x.value[ia], y.value[ib]);
                          });
                        },
                        op);
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(const Tensor<T>& x, const char* op, Fwd fwd, Deriv deriv) {
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_result<T>(x.shape(), std::move(out), {x.node_ptr()},
                        [deriv](Node<T>& self) {
                          auto& in = *self.inputs[0];
                          auto& d = in.ensure_grad();
                          for (std::size_t i = 0; i < d.size(); ++i)
                            d[i] += self.grad[i] * deriv(in.value[i], self.value[i]);
                        },
                        op);
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary_op(
      a, "scale", [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return unary_op(
      x, "gelu", [inv_sqrt2](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [inv_sqrt2, inv_sqrt2pi](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  return make_result<T>(Shape{}, {s}, {x.node_ptr()},
                        [](Node<T>& self) {
                          auto& d = self.inputs[0]->ensure_grad();
                          for (auto& v : d) v += self.grad[0];
                        },
                        "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Products

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto ra = a.rank(), rb = b.rank();
  if (ra < 2 || ra > 3 || rb < 2 || rb > 3)
    shape_error("matmul", "expects 2-D or 3-D operands, got " + to_string(a.shape()) + " and " +
                              to_string(b.shape()));
  const std::int64_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k)
    shape_error("matmul", "inner extents differ: " + to_string(a.shape()) + " x " +
                              to_string(b.shape()));
  const std::int64_t ba = ra == 3 ? a.dim(0) : 1;
  const std::int64_t bb = rb == 3 ? b.dim(0) : 1;
  if (ra == 3 && rb == 3 && ba != bb)
    shape_error("matmul", "batch extents differ: " + to_string(a.shape()) + " x " +
                              to_string(b.shape()));
  const std::int64_t batch = std::max(ba, bb);
  const bool batched = ra == 3 || rb == 3;
  const std::int64_t stride_a = ra == 3 ? m * k : 0;
  const std::int64_t stride_b = rb == 3 ? k * n : 0;

  std::vector<T> out(static_cast<std::size_t>(batch * m * n));
  for (std::int64_t i = 0; i < batch; ++i)
    detail::gemm(false, false, m, n, k, a.values().data() + i * stride_a,
                 b.values().data() + i * stride_b, out.data() + i * m * n, false);
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return make_result<T>(std::move(shape), std::move(out), {a.node_ptr(), b.node_ptr()},
                        [=](Node<T>& self) {
                          auto& x = *self.inputs[0];
                          auto& y = *self.inputs[1];
                          for (std::int64_t i = 0; i < batch; ++i) {
                            const T* g = self.grad.data() + i * m * n;
                            if (x.requires_grad)
                              detail::gemm(false, true, m, k, n, g, y.value.data() + i * stride_b,
                                           x.ensure_grad().data() + i * stride_a, true);
                            if (y.requires_grad)
                              detail::gemm(true, false, k, n, m, x.value.data() + i * stride_a, g,
                                           y.ensure_grad().data() + i * stride_b, true);
                          }
                        },
                        "matmul");
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2) shape_error("linear", "weight must be 2-D, got " + to_string(weight.shape()));
  const std::int64_t in = weight.dim(1), outf = weight.dim(0);
  if (x.rank() < 1 || x.dim(-1) != in)
    shape_error("linear", "input " + to_string(x.shape()) + " does not end in " +
                              std::to_string(in) + " features");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outf))
    shape_error("linear", "bias " + to_string(bias.shape()) + " does not match " +
                              std::to_string(outf) + " outputs");
  const std::int64_t rows = x.numel() / in;
  std::vector<T> out(static_cast<std::size_t>(rows * outf));
  detail::gemm(false, true, rows, outf, in, x.values().data(), weight.values().data(), out.data(),
               false);
  if (bias.defined()) {
    const auto bv = bias.values();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t o = 0; o < outf; ++o) out[r * outf + o] += bv[o];
  }
  Shape shape = x.shape();
  shape.back() = outf;
  std::vector<NodePtr<T>> inputs{x.node_ptr(), weight.node_ptr()};
  if (bias.defined()) inputs.push_back(bias.node_ptr());
  return make_result<T>(std::move(shape), std::move(out), std::move(inputs),
                        [=](Node<T>& self) {
                          auto& xn = *self.inputs[0];
                          auto& wn = *self.inputs[1];
                          const T* g = self.grad.data();
                          if (xn.requires_grad)
                            detail::gemm(false, false, rows, in, outf, g, wn.value.data(),
                                         xn.ensure_grad().data(), true);
                          if (wn.requires_grad)
                            detail::gemm(true, false, outf, in, rows, g, xn.value.data(),
                                         wn.ensure_grad().data(), true);
                          if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
                            auto& db = self.inputs[2]->ensure_grad();
                            for (std::int64_t r = 0; r < rows; ++r)
                              for (std::int64_t o = 0; o < outf; ++o) db[o] += g[r * outf + o];
                          }
                        },
                        "linear");
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) shape_error("reshape", "more than one inferred extent");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[infer] = x.numel() / known;
  if (numel(shape) != x.numel())
    shape_error("reshape", "cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  return make_result<T>(std::move(shape), std::move(out), {x.node_ptr()},
                        [](Node<T>& self) {
                          accumulate<T>(*self.inputs[0], self.grad);
                        },
                        "reshape");
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& order) {
  const std::size_t r = x.shape().size();
  if (order.size() != r) shape_error("permute", "order length differs from rank");
  std::vector<bool> seen(r, false);
  for (int o : order) {
    if (o < 0 || o >= static_cast<int>(r) || seen[o]) shape_error("permute", "invalid axis order");
    seen[o] = true;
  }
  const auto in_strides = strides_of(x.shape());
  Shape out_shape(r);
  std::vector<std::int64_t> src_strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[order[i]];
    src_strides[i] = in_strides[order[i]];
  }
  // map[i] = source offset of output element i
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.numel()));
  {
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t off = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      (*map)[i] = off;
      for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
        if (++idx[d] < out_shape[d]) {
          off += src_strides[d];
          break;
        }
        off -= src_strides[d] * (out_shape[d] - 1);
        idx[d] = 0;
      }
    }
  }
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*map)[i]];
  return make_result<T>(std::move(out_shape), std::move(out), {x.node_ptr()},
                        [map](Node<T>& self) {
                          auto& d = self.inputs[0]->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            d[(*map)[i]] += self.grad[i];
                        },
                        "permute");
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& first = parts[0].shape();
  axis = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (static_cast<int>(i) != axis && s[i] != first[i]) ok = false;
    if (!ok) shape_error("concat", "incompatible shapes " + to_string(first) + " and " + to_string(s));
    out_shape[axis] += s[axis];
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::int64_t> widths;
  for (const auto& p : parts) widths.push_back(p.shape()[axis] * inner);
  const std::int64_t row = out_shape[axis] * inner;

  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<NodePtr<T>> inputs;
  std::int64_t col = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto v = parts[pi].values();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(v.data() + o * widths[pi], widths[pi], out.data() + o * row + col);
    col += widths[pi];
    inputs.push_back(parts[pi].node_ptr());
  }
  return make_result<T>(std::move(out_shape), std::move(out), std::move(inputs),
                        [widths, outer, row](Node<T>& self) {
                          std::int64_t c = 0;
                          for (std::size_t pi = 0; pi < self.inputs.size(); ++pi) {
                            auto& in = *self.inputs[pi];
                            if (in.requires_grad) {
                              auto& d = in.ensure_grad();
                              for (std::int64_t o = 0; o < outer; ++o)
                                for (std::int64_t j = 0; j < widths[pi]; ++j)
                                  d[o * widths[pi] + j] += self.grad[o * row + c + j];
                            }
                            c += widths[pi];
                          }
                        },
                        "concat");
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t begin, std::int64_t end) {
  const Shape& s = x.shape();
  axis = normalize_axis(axis, s.size(), "slice");
  if (begin < 0 || end > s[axis] || begin >= end)
    shape_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") invalid for axis of extent " + std::to_string(s[axis]));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::int64_t src_row = s[axis] * inner;
  const std::int64_t width = (end - begin) * inner;
  const std::int64_t off = begin * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  std::vector<T> out(static_cast<std::size_t>(outer * width));
  const auto v = x.values();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(v.data() + o * src_row + off, width, out.data() + o * width);
  return make_result<T>(std::move(out_shape), std::move(out), {x.node_ptr()},
                        [=](Node<T>& self) {
                          auto& d = self.inputs[0]->ensure_grad();
                          for (std::int64_t o = 0; o < outer; ++o)
                            for (std::int64_t j = 0; j < width; ++j)
                              d[o * src_row + off + j] += self.grad[o * width + j];
                        },
                        "slice");
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, const std::vector<std::int64_t>& rows) {
  if (x.rank() < 1) shape_error("index_select", "scalar input");
  const std::int64_t n = x.dim(0);
  const std::int64_t inner = x.numel() / n;
  for (auto r : rows)
    if (r < 0 || r >= n) shape_error("index_select", "row " + std::to_string(r) + " out of range");
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<std::int64_t>(rows.size());
  std::vector<T> out(rows.size() * static_cast<std::size_t>(inner));
  const auto v = x.values();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(v.data() + rows[i] * inner, inner, out.data() + i * inner);
  return make_result<T>(std::move(out_shape), std::move(out), {x.node_ptr()},
                        [rows, inner](Node<T>& self) {
                          auto& d = self.inputs[0]->ensure_grad();
                          for (std::size_t i = 0; i < rows.size(); ++i)
                            for (std::int64_t j = 0; j < inner; ++j)
                              d[rows[i] * inner + j] += self.grad[i * inner + j];
                        },
                        "index_select");
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const Shape& s = x.shape();
  axis = normalize_axis(axis, s.size(), "softmax");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::int64_t len = s[axis];
  const auto v = x.values();
  std::vector<T> out(v.size());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      T mx = v[base];
      for (std::int64_t j = 1; j < len; ++j) mx = std::max(mx, v[base + j * inner]);
      T total = T(0);
      for (std::int64_t j = 0; j < len; ++j) {
        const T e = std::exp(v[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::int64_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  return make_result<T>(s, std::move(out), {x.node_ptr()},
                        [=](Node<T>& self) {
                          auto& d = self.inputs[0]->ensure_grad();
                          const auto& y = self.value;
                          const auto& g = self.grad;
                          for (std::int64_t o = 0; o < outer; ++o)
                            for (std::int64_t in = 0; in < inner; ++in) {
                              const std::int64_t base = o * len * inner + in;
                              T dot = T(0);
                              for (std::int64_t j = 0; j < len; ++j)
                                dot += g[base + j * inner] * y[base + j * inner];
                              for (std::int64_t j = 0; j < len; ++j) {
                                const std::int64_t p = base + j * inner;
                                d[p] += y[p] * (g[p] - dot);
                              }
                            }
                        },
                        "softmax");
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool training, T momentum, T eps) {
  if (x.rank() != 4) shape_error("batch_norm", "expects [B,C,H,W], got " + to_string(x.shape()));
  const std::int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c)
    shape_error("batch_norm", "affine parameters do not match " + std::to_string(c) + " channels");
  if (state.running_mean.empty()) {
    state.running_mean.assign(c, T(0));
    state.running_var.assign(c, T(1));
  }
  if (static_cast<std::int64_t>(state.running_mean.size()) != c)
    shape_error("batch_norm", "running statistics do not match channel count");
  const std::int64_t m = b * hw;
  if (training && m < 2)
    shape_error("batch_norm", "training mode needs more than one value per channel");

  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(c);
  std::vector<T> out(xv.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      T s = T(0);
      for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t p = 0; p < hw; ++p) s += xv[(i * c + ch) * hw + p];
      mu = s / static_cast<T>(m);
      T sq = T(0);
      for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t p = 0; p < hw; ++p) {
          const T dlt = xv[(i * c + ch) * hw + p] - mu;
          sq += dlt * dlt;
        }
      var = sq / static_cast<T>(m);
      state.running_mean[ch] = (T(1) - momentum) * state.running_mean[ch] + momentum * mu;
      state.running_var[ch] = (T(1) - momentum) * state.running_var[ch] +
                              momentum * var * static_cast<T>(m) / static_cast<T>(m - 1);
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const T r = T(1) / std::sqrt(var + eps);
    (*rstd)[ch] = r;
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t p = 0; p < hw; ++p) {
        const std::int64_t idx = (i * c + ch) * hw + p;
        const T xh = (xv[idx] - mu) * r;
        (*xhat)[idx] = xh;
        out[idx] = xh * gv[ch] + bv[ch];
      }
  }
  return make_result<T>(x.shape(), std::move(out), {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
                        [=](Node<T>& self) {
                          auto& xn = *self.inputs[0];
                          auto& gn = *self.inputs[1];
                          auto& bn = *self.inputs[2];
                          const auto& g = self.grad;
                          T* dx = xn.requires_grad ? xn.ensure_grad().data() : nullptr;
                          T* dg = gn.requires_grad ? gn.ensure_grad().data() : nullptr;
                          T* db = bn.requires_grad ? bn.ensure_grad().data() : nullptr;
#pragma omp parallel for schedule(static)
                          for (std::int64_t ch = 0; ch < c; ++ch) {
                            T sum_g = T(0), sum_gx = T(0);
                            for (std::int64_t i = 0; i < b; ++i)
                              for (std::int64_t p = 0; p < hw; ++p) {
                                const std::int64_t idx = (i * c + ch) * hw + p;
                                sum_g += g[idx];
                                sum_gx += g[idx] * (*xhat)[idx];
                              }
                            if (dg) dg[ch] += sum_gx;
                            if (db) db[ch] += sum_g;
                            if (!dx) continue;
                            const T scale_ch = gn.value[ch] * (*rstd)[ch];
                            if (training) {
                              const T mg = sum_g / static_cast<T>(m);
                              const T mgx = sum_gx / static_cast<T>(m);
                              for (std::int64_t i = 0; i < b; ++i)
                                for (std::int64_t p = 0; p < hw; ++p) {
                                  const std::int64_t idx = (i * c + ch) * hw + p;
                                  dx[idx] += scale_ch * (g[idx] - mg - (*xhat)[idx] * mgx);
                                }
                            } else {
                              for (std::int64_t i = 0; i < b; ++i)
                                for (std::int64_t p = 0; p < hw; ++p) {
                                  const std::int64_t idx = (i * c + ch) * hw + p;
                                  dx[idx] += scale_ch * g[idx];
                                }
                            }
                          }
                        },
                        "batch_norm");
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::int64_t c = x.dim(-1);
  if (gamma.numel() != c || beta.numel() != c)
    shape_error("layer_norm", "affine parameters do not match last extent " + std::to_string(c));
  const std::int64_t rows = x.numel() / c;
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(xv.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T s = T(0);
    for (std::int64_t j = 0; j < c; ++j) s += row[j];
    const T mu = s / static_cast<T>(c);
    T sq = T(0);
    for (std::int64_t j = 0; j < c; ++j) sq += (row[j] - mu) * (row[j] - mu);
    const T rs = T(1) / std::sqrt(sq / static_cast<T>(c) + eps);
    (*rstd)[r] = rs;
    for (std::int64_t j = 0; j < c; ++j) {
      const T xh = (row[j] - mu) * rs;
      (*xhat)[r * c + j] = xh;
      out[r * c + j] = xh * gv[j] + bv[j];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
                        [=](Node<T>& self) {
                          auto& xn = *self.inputs[0];
                          auto& gn = *self.inputs[1];
                          auto& bn = *self.inputs[2];
                          const auto& g = self.grad;
                          T* dx = xn.requires_grad ? xn.ensure_grad().data() : nullptr;
                          T* dg = gn.requires_grad ? gn.ensure_grad().data() : nullptr;
                          T* db = bn.requires_grad ? bn.ensure_grad().data() : nullptr;
                          std::vector<T> dxh(static_cast<std::size_t>(c));
                          for (std::int64_t r = 0; r < rows; ++r) {
                            T mdx = T(0), mdxx = T(0);
                            for (std::int64_t j = 0; j < c; ++j) {
                              const std::int64_t idx = r * c + j;
                              if (dg) dg[j] += g[idx] * (*xhat)[idx];
                              if (db) db[j] += g[idx];
                              dxh[j] = g[idx] * gn.value[j];
                              mdx += dxh[j];
                              mdxx += dxh[j] * (*xhat)[idx];
                            }
                            if (!dx) continue;
                            mdx /= static_cast<T>(c);
                            mdxx /= static_cast<T>(c);
                            for (std::int64_t j = 0; j < c; ++j) {
                              const std::int64_t idx = r * c + j;
                              dx[idx] += (*rstd)[r] * (dxh[j] - mdx - (*xhat)[idx] * mdxx);
                            }
                          }
                        },
                        "layer_norm");
}

#define PCQA_INSTANTIATE(T)                                                                    \
  template class Tensor<T>;                                                                    \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, std::vector<NodePtr<T>>,            \
                                    std::function<void(Node<T>&)>, const char*);              \
  template void backward<T>(const Tensor<T>&);                                                 \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                           \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                 \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                      \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);                   \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                           \
  template Tensor<T> slice<T>(const Tensor<T>&, int, std::int64_t, std::int64_t);             \
  template Tensor<T> index_select<T>(const Tensor<T>&, const std::vector<std::int64_t>&);     \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                                        \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                   BatchNormState<T>&, bool, T, T);                            \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);

PCQA_INSTANTIATE(float)
PCQA_INSTANTIATE(double)

#undef PCQA_INSTANTIATE

}  // namespace pcqa::ad
