#include <cmath>

#include "gemm.hpp"
#include "pcqa/autodiff.hpp"
#include "pcqa/error.hpp"

namespace pcqa::ad {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw UsageError(op + ": " + detail);
}

struct ConvGeometry {
  std::int64_t c, h, w, k, stride, pad, ho, wo;
  std::int64_t rows() const { return c * k * k; }
  std::int64_t cols() const { return ho * wo; }
  bool is_pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

ConvGeometry geometry(const Shape& x, std::int64_t k, int stride, int padding, const char* op) {
  if (stride < 1 || padding < 0) shape_error(op, "stride must be >= 1 and padding >= 0");
  if (k % 2 == 0) shape_error(op, "kernel size " + std::to_string(k) + " must be odd");
  ConvGeometry g{x[1], x[2], x[3], k, stride, padding, 0, 0};
  g.ho = (g.h + 2 * padding - k) / stride + 1;
  g.wo = (g.w + 2 * padding - k) / stride + 1;
  if (g.ho < 1 || g.wo < 1) shape_error(op, "input " + to_string(x) + " too small for kernel");
  return g;
}

template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < g.rows(); ++r) {
    const std::int64_t c = r / (g.k * g.k);
    const std::int64_t ki = (r / g.k) % g.k;
    const std::int64_t kj = r % g.k;
    T* dst = cols + r * g.cols();
    for (std::int64_t oh = 0; oh < g.ho; ++oh) {
      const std::int64_t ih = oh * g.stride - g.pad + ki;
      for (std::int64_t ow = 0; ow < g.wo; ++ow) {
        const std::int64_t iw = ow * g.stride - g.pad + kj;
        dst[oh * g.wo + ow] = (ih >= 0 && ih < g.h && iw >= 0 && iw < g.w)
                                  ? x[(c * g.h + ih) * g.w + iw]
                                  : T(0);
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* dx) {
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < g.c; ++c)
    for (std::int64_t ki = 0; ki < g.k; ++ki)
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const T* src = cols + ((c * g.k + ki) * g.k + kj) * g.cols();
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.h) continue;
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kj;
            if (iw >= 0 && iw < g.w) dx[(c * g.h + ih) * g.w + iw] += src[oh * g.wo + ow];
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
  if (x.rank() != 4) shape_error("conv2d", "input must be [B,C,H,W], got " + to_string(x.shape()));
  if (weight.rank() != 4 || weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3))
    shape_error("conv2d", "weight " + to_string(weight.shape()) + " does not match input " +
                              to_string(x.shape()));
  const std::int64_t co = weight.dim(0);
  if (bias.defined() && bias.numel() != co)
    shape_error("conv2d", "bias " + to_string(bias.shape()) + " does not match " +
                              std::to_string(co) + " output channels");
  const ConvGeometry g = geometry(x.shape(), weight.dim(2), stride, padding, "conv2d");
  const std::int64_t b = x.dim(0);
  const std::int64_t in_plane = g.c * g.h * g.w;
  const std::int64_t out_plane = co * g.cols();

  std::vector<T> out(static_cast<std::size_t>(b * out_plane));
  std::vector<T> cols(g.is_pointwise() ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
  for (std::int64_t i = 0; i < b; ++i) {
    const T* src = x.values().data() + i * in_plane;
    if (!g.is_pointwise()) {
      im2col(g, src, cols.data());
      src = cols.data();
    }
    detail::gemm(false, false, co, g.cols(), g.rows(), weight.values().data(), src,
                 out.data() + i * out_plane, false);
    if (bias.defined())
      for (std::int64_t o = 0; o < co; ++o) {
        T* row = out.data() + i * out_plane + o * g.cols();
        const T bo = bias.values()[o];
        for (std::int64_t p = 0; p < g.cols(); ++p) row[p] += bo;
      }
  }
  std::vector<NodePtr<T>> inputs{x.node_ptr(), weight.node_ptr()};
  if (bias.defined()) inputs.push_back(bias.node_ptr());
  return make_result<T>(
      Shape{b, co, g.ho, g.wo}, std::move(out), std::move(inputs),
      [=](Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        std::vector<T> cols_b(g.is_pointwise() ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
        std::vector<T> dcols(static_cast<std::size_t>(g.rows() * g.cols()));
        for (std::int64_t i = 0; i < b; ++i) {
          const T* gout = self.grad.data() + i * out_plane;
          const T* src = xn.value.data() + i * in_plane;
          if (wn.requires_grad) {
            if (!g.is_pointwise()) {
              im2col(g, src, cols_b.data());
              src = cols_b.data();
            }
            detail::gemm(false, true, co, g.rows(), g.cols(), gout, src, wn.ensure_grad().data(),
                         true);
          }
          if (xn.requires_grad) {
            T* dx = xn.ensure_grad().data() + i * in_plane;
            if (g.is_pointwise()) {
              detail::gemm(true, false, g.rows(), g.cols(), co, wn.value.data(), gout, dx, true);
            } else {
              detail::gemm(true, false, g.rows(), g.cols(), co, wn.value.data(), gout,
                           dcols.data(), false);
              col2im(g, dcols.data(), dx);
            }
          }
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
          auto& db = self.inputs[2]->ensure_grad();
          for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t o = 0; o < co; ++o) {
              const T* row = self.grad.data() + i * out_plane + o * g.cols();
              T s = T(0);
              for (std::int64_t p = 0; p < g.cols(); ++p) s += row[p];
              db[o] += s;
            }
        }
      },
      "conv2d");
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding) {
  if (x.rank() != 4)
    shape_error("depthwise_conv2d", "input must be [B,C,H,W], got " + to_string(x.shape()));
  if (weight.rank() != 4 || weight.dim(0) != x.dim(1) || weight.dim(1) != 1 ||
      weight.dim(2) != weight.dim(3))
    shape_error("depthwise_conv2d", "weight " + to_string(weight.shape()) +
                                        " does not match input " + to_string(x.shape()));
  if (bias.defined() && bias.numel() != x.dim(1))
    shape_error("depthwise_conv2d", "bias does not match channel count");
  const ConvGeometry g = geometry(x.shape(), weight.dim(2), stride, padding, "depthwise_conv2d");
  const std::int64_t b = x.dim(0);
  const std::int64_t k = g.k;
  const auto xv = x.values();
  const auto wv = weight.values();
  std::vector<T> out(static_cast<std::size_t>(b * g.c * g.cols()));
#pragma omp parallel for schedule(static)
  for (std::int64_t bc = 0; bc < b * g.c; ++bc) {
    const std::int64_t c = bc % g.c;
    const T* src = xv.data() + bc * g.h * g.w;
    const T* wc = wv.data() + c * k * k;
    const T bo = bias.defined() ? bias.values()[c] : T(0);
    T* dst = out.data() + bc * g.cols();
    for (std::int64_t oh = 0; oh < g.ho; ++oh)
      for (std::int64_t ow = 0; ow < g.wo; ++ow) {
        T acc = T(0);
        for (std::int64_t ki = 0; ki < k; ++ki) {
          const std::int64_t ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.h) continue;
          for (std::int64_t kj = 0; kj < k; ++kj) {
            const std::int64_t iw = ow * g.stride - g.pad + kj;
            if (iw >= 0 && iw < g.w) acc += wc[ki * k + kj] * src[ih * g.w + iw];
          }
        }
        dst[oh * g.wo + ow] = acc + bo;
      }
  }
  std::vector<NodePtr<T>> inputs{x.node_ptr(), weight.node_ptr()};
  if (bias.defined()) inputs.push_back(bias.node_ptr());
  return make_result<T>(
      Shape{b, g.c, g.ho, g.wo}, std::move(out), std::move(inputs),
      [=](Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        const T* gv = self.grad.data();
        if (xn.requires_grad) {
          T* dx = xn.ensure_grad().data();
#pragma omp parallel for schedule(static)
          for (std::int64_t bc = 0; bc < b * g.c; ++bc) {
            const std::int64_t c = bc % g.c;
            const T* wc = wn.value.data() + c * k * k;
            T* d = dx + bc * g.h * g.w;
            const T* go = gv + bc * g.cols();
            for (std::int64_t oh = 0; oh < g.ho; ++oh)
              for (std::int64_t ow = 0; ow < g.wo; ++ow) {
                const T gval = go[oh * g.wo + ow];
                for (std::int64_t ki = 0; ki < k; ++ki) {
                  const std::int64_t ih = oh * g.stride - g.pad + ki;
                  if (ih < 0 || ih >= g.h) continue;
                  for (std::int64_t kj = 0; kj < k; ++kj) {
                    const std::int64_t iw = ow * g.stride - g.pad + kj;
                    if (iw >= 0 && iw < g.w) d[ih * g.w + iw] += wc[ki * k + kj] * gval;
                  }
                }
              }
          }
        }
        if (wn.requires_grad) {
          T* dw = wn.ensure_grad().data();
#pragma omp parallel for schedule(static)
          for (std::int64_t c = 0; c < g.c; ++c)
            for (std::int64_t ki = 0; ki < k; ++ki)
              for (std::int64_t kj = 0; kj < k; ++kj) {
                T acc = T(0);
                for (std::int64_t i = 0; i < b; ++i) {
                  const T* src = xn.value.data() + (i * g.c + c) * g.h * g.w;
                  const T* go = gv + (i * g.c + c) * g.cols();
                  for (std::int64_t oh = 0; oh < g.ho; ++oh) {
                    const std::int64_t ih = oh * g.stride - g.pad + ki;
                    if (ih < 0 || ih >= g.h) continue;
                    for (std::int64_t ow = 0; ow < g.wo; ++ow) {
                      const std::int64_t iw = ow * g.stride - g.pad + kj;
                      if (iw >= 0 && iw < g.w) acc += go[oh * g.wo + ow] * src[ih * g.w + iw];
                    }
                  }
                }
                dw[(c * k + ki) * k + kj] += acc;
              }
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
          auto& db = self.inputs[2]->ensure_grad();
          for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t c = 0; c < g.c; ++c) {
              T s = T(0);
              const T* go = gv + (i * g.c + c) * g.cols();
              for (std::int64_t p = 0; p < g.cols(); ++p) s += go[p];
              db[c] += s;
            }
        }
      },
      "depthwise_conv2d");
}

namespace {

// Four bilinear taps of one sample location; index -1 marks an outside tap.
template <typename T>
struct Taps {
  std::int64_t idx[4];
  T w[4];
  T ly, lx;
};

template <typename T>
Taps<T> make_taps(T y, T x, std::int64_t h, std::int64_t w) {
  Taps<T> t;
  const T fy = std::floor(y), fx = std::floor(x);
  const auto y0 = static_cast<std::int64_t>(fy);
  const auto x0 = static_cast<std::int64_t>(fx);
  t.ly = y - fy;
  t.lx = x - fx;
  const std::int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const std::int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const T ws[4] = {(T(1) - t.ly) * (T(1) - t.lx), (T(1) - t.ly) * t.lx, t.ly * (T(1) - t.lx),
                   t.ly * t.lx};
  for (int q = 0; q < 4; ++q) {
    const bool inside = ys[q] >= 0 && ys[q] < h && xs[q] >= 0 && xs[q] < w;
    t.idx[q] = inside ? ys[q] * w + xs[q] : -1;
    t.w[q] = ws[q];
  }
  return t;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& x, const Tensor<T>& loc) {
  if (x.rank() != 4)
    shape_error("bilinear_sample", "feature map must be [B,C,H,W], got " + to_string(x.shape()));
  if (loc.rank() != 3 || loc.dim(0) != x.dim(0) || loc.dim(2) != 2)
    shape_error("bilinear_sample", "locations " + to_string(loc.shape()) +
                                       " must be [B,L,2] matching " + to_string(x.shape()));
  const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), l = loc.dim(1);
  const auto xv = x.values();
  const auto lv = loc.values();
  auto taps = std::make_shared<std::vector<Taps<T>>>(static_cast<std::size_t>(b * l));
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < b * l; ++i) (*taps)[i] = make_taps(lv[2 * i], lv[2 * i + 1], h, w);

  std::vector<T> out(static_cast<std::size_t>(b * c * l));
#pragma omp parallel for schedule(static)
  for (std::int64_t bc = 0; bc < b * c; ++bc) {
    const std::int64_t bi = bc / c;
    const T* plane = xv.data() + bc * h * w;
    const Taps<T>* tp = taps->data() + bi * l;
    T* dst = out.data() + bc * l;
    for (std::int64_t j = 0; j < l; ++j) {
      T acc = T(0);
      for (int q = 0; q < 4; ++q)
        if (tp[j].idx[q] >= 0) acc += tp[j].w[q] * plane[tp[j].idx[q]];
      dst[j] = acc;
    }
  }
  return make_result<T>(
      Shape{b, c, l}, std::move(out), {x.node_ptr(), loc.node_ptr()},
      [=](Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& ln = *self.inputs[1];
        const T* g = self.grad.data();
        if (xn.requires_grad) {
          T* dx = xn.ensure_grad().data();
#pragma omp parallel for schedule(static)
          for (std::int64_t bc = 0; bc < b * c; ++bc) {
            const Taps<T>* tp = taps->data() + (bc / c) * l;
            T* d = dx + bc * h * w;
            const T* go = g + bc * l;
            for (std::int64_t j = 0; j < l; ++j)
              for (int q = 0; q < 4; ++q)
                if (tp[j].idx[q] >= 0) d[tp[j].idx[q]] += tp[j].w[q] * go[j];
          }
        }
        if (ln.requires_grad) {
          T* dl = ln.ensure_grad().data();
#pragma omp parallel for schedule(static)
          for (std::int64_t i = 0; i < b * l; ++i) {
            const std::int64_t bi = i / l, j = i % l;
            const Taps<T>& t = (*taps)[i];
            T dy = T(0), dxl = T(0);
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const T* plane = xn.value.data() + (bi * c + ch) * h * w;
              T v[4];
              for (int q = 0; q < 4; ++q) v[q] = t.idx[q] >= 0 ? plane[t.idx[q]] : T(0);
              const T go = g[(bi * c + ch) * l + j];
              dy += go * ((T(1) - t.lx) * (v[2] - v[0]) + t.lx * (v[3] - v[1]));
              dxl += go * ((T(1) - t.ly) * (v[1] - v[0]) + t.ly * (v[3] - v[2]));
            }
            dl[2 * i] += dy;
            dl[2 * i + 1] += dxl;
          }
        }
      },
      "bilinear_sample");
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4)
    shape_error("global_avg_pool", "expects [B,C,H,W], got " + to_string(x.shape()));
  const std::int64_t bc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto v = x.values();
  std::vector<T> out(static_cast<std::size_t>(bc));
  for (std::int64_t i = 0; i < bc; ++i) {
    T s = T(0);
    for (std::int64_t p = 0; p < hw; ++p) s += v[i * hw + p];
    out[i] = s / static_cast<T>(hw);
  }
  return make_result<T>(Shape{x.dim(0), x.dim(1)}, std::move(out), {x.node_ptr()},
                        [bc, hw](Node<T>& self) {
                          auto& d = self.inputs[0]->ensure_grad();
                          for (std::int64_t i = 0; i < bc; ++i) {
                            const T gi = self.grad[i] / static_cast<T>(hw);
                            for (std::int64_t p = 0; p < hw; ++p) d[i * hw + p] += gi;
                          }
                        },
                        "global_avg_pool");
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int window) {
  if (x.rank() != 4) shape_error("avg_pool2d", "expects [B,C,H,W], got " + to_string(x.shape()));
  const std::int64_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window < 1 || h % window || w % window)
    shape_error("avg_pool2d", "window " + std::to_string(window) + " does not tile " +
                                  to_string(x.shape()));
  const std::int64_t ho = h / window, wo = w / window;
  const T inv = T(1) / static_cast<T>(window * window);
  const auto v = x.values();
  std::vector<T> out(static_cast<std::size_t>(bc * ho * wo));
  for (std::int64_t i = 0; i < bc; ++i)
    for (std::int64_t oh = 0; oh < ho; ++oh)
      for (std::int64_t ow = 0; ow < wo; ++ow) {
        T s = T(0);
        for (int a = 0; a < window; ++a)
          for (int c = 0; c < window; ++c)
            s += v[(i * h + oh * window + a) * w + ow * window + c];
        out[(i * ho + oh) * wo + ow] = s * inv;
      }
  return make_result<T>(Shape{x.dim(0), x.dim(1), ho, wo}, std::move(out), {x.node_ptr()},
                        [=](Node<T>& self) {
                          auto& d = self.inputs[0]->ensure_grad();
                          for (std::int64_t i = 0; i < bc; ++i)
                            for (std::int64_t oh = 0; oh < ho; ++oh)
                              for (std::int64_t ow = 0; ow < wo; ++ow) {
                                const T gi = self.grad[(i * ho + oh) * wo + ow] * inv;
                                for (int a = 0; a < window; ++a)
                                  for (int c = 0; c < window; ++c)
                                    d[(i * h + oh * window + a) * w + ow * window + c] += gi;
                              }
                        },
                        "avg_pool2d");
}

#define PCQA_INSTANTIATE(T)                                                                     \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int); \
  template Tensor<T> depthwise_conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                         int, int);                                             \
  template Tensor<T> bilinear_sample<T>(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                      \
  template Tensor<T> avg_pool2d<T>(const Tensor<T>&, int);

PCQA_INSTANTIATE(float)
PCQA_INSTANTIATE(double)

#undef PCQA_INSTANTIATE

}  // namespace pcqa::ad
