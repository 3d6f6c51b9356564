// SPDX-License-Identifier: Apache-2.0
#include "nfe/layers.hpp"

#include <Eigen/Core>

#include <cmath>

namespace nfe {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// cols: [C*k*k, Ho*Wo] for one image.
template <typename T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w, const ConvGeom& g, std::size_t ho,
            std::size_t wo, T* cols) {
  const std::size_t k = g.kernel;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          T* out = row + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(out, out + wo, T(0));
            continue;
          }
          const T* src = img + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, std::size_t c, std::size_t h, std::size_t w, const ConvGeom& g, std::size_t ho,
            std::size_t wo, T* img) {
  const std::size_t k = g.kernel;
  std::fill(img, img + c * h * w, T(0));
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = img + (ci * h + static_cast<std::size_t>(iy)) * w;
          const T* in = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += in[ox];
          }
        }
      }
}

bool is_pointwise(const ConvGeom& g) { return g.kernel == 1 && g.stride == 1 && g.pad == 0; }

void check_conv_input(const Shape& xs, const Shape& ws, const ConvGeom& g) {
  if (xs.size() != 4 || xs[1] != g.in_channels)
    fail(ErrorKind::shape_mismatch, "conv2d: input " + to_string(xs) + " does not have " +
                                        std::to_string(g.in_channels) + " channels");
  if (ws != g.weight_shape())
    fail(ErrorKind::shape_mismatch, "conv2d: weight " + to_string(ws) + " vs " + to_string(g.weight_shape()));
}

}  // namespace

template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const ConvGeom& g, Tensor<T>& y) {
  check_conv_input(x.shape(), w.shape(), g);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t ho = g.out_size(h), wo = g.out_size(wd);
  const std::size_t kk = c * g.kernel * g.kernel, p = ho * wo;
  if (y.shape() != Shape{n, g.out_channels, ho, wo}) y = Tensor<T>({n, g.out_channels, ho, wo});

  CMapMat<T> wm(w.data(), static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(kk));
  std::vector<T> cols(is_pointwise(g) ? 0 : kk * p);
  for (std::size_t i = 0; i < n; ++i) {
    const T* img = x.data() + i * c * h * wd;
    const T* src = img;
    if (!is_pointwise(g)) {
      im2col(img, c, h, wd, g, ho, wo, cols.data());
      src = cols.data();
    }
    CMapMat<T> cm(src, static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(p));
    MapMat<T> ym(y.data() + i * g.out_channels * p, static_cast<Eigen::Index>(g.out_channels),
                 static_cast<Eigen::Index>(p));
    ym.noalias() = wm * cm;
  }
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvGeom& g, const Tensor<T>& dy, Tensor<T>* dw,
                     Tensor<T>* dx) {
  check_conv_input(x.shape(), w.shape(), g);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t ho = g.out_size(h), wo = g.out_size(wd);
  const std::size_t kk = c * g.kernel * g.kernel, p = ho * wo;
  check_same_shape(dy, Shape{n, g.out_channels, ho, wo}, "conv2d_backward dy");
  if (dw) check_same_shape(*dw, g.weight_shape(), "conv2d_backward dw");
  if (dx && dx->shape() != x.shape()) *dx = Tensor<T>(x.shape());

  CMapMat<T> wm(w.data(), static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(kk));
  std::vector<T> cols(is_pointwise(g) ? 0 : kk * p);
  std::vector<T> dcols(dx && !is_pointwise(g) ? kk * p : 0);
  for (std::size_t i = 0; i < n; ++i) {
    const T* img = x.data() + i * c * h * wd;
    CMapMat<T> dym(dy.data() + i * g.out_channels * p, static_cast<Eigen::Index>(g.out_channels),
                   static_cast<Eigen::Index>(p));
    if (dw) {
      const T* src = img;
      if (!is_pointwise(g)) {
        im2col(img, c, h, wd, g, ho, wo, cols.data());
        src = cols.data();
      }
      CMapMat<T> cm(src, static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(p));
      MapMat<T> dwm(dw->data(), static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(kk));
      dwm.noalias() += dym * cm.transpose();
    }
    if (dx) {
      T* dimg = dx->data() + i * c * h * wd;
      if (is_pointwise(g)) {
        MapMat<T> dxm(dimg, static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(p));
        dxm.noalias() = wm.transpose() * dym;
      } else {
        MapMat<T> dcm(dcols.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(p));
        dcm.noalias() = wm.transpose() * dym;
        col2im(dcols.data(), c, h, wd, g, ho, wo, dimg);
      }
    }
  }
}

template <typename T>
void batchnorm_forward(const Tensor<T>& x, BatchNorm<T>& bn, Mode mode, bool update_stats, Tensor<T>& y,
                       BatchNormCache<T>* cache) {
  if (x.rank() != 4 || x.dim(1) != bn.channels())
    fail(ErrorKind::shape_mismatch, "batchnorm: input " + to_string(x.shape()) + " vs " +
                                        std::to_string(bn.channels()) + " channels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (y.shape() != x.shape()) y = Tensor<T>(x.shape());

  if (mode == Mode::eval) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T inv = T(1) / std::sqrt(bn.running_var[ch] + T(bn.eps));
      const T scale = bn.gamma.value[ch] * inv;
      const T shift = bn.beta.value[ch] - bn.running_mean[ch] * scale;
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = x.data() + (i * c + ch) * hw;
        T* dst = y.data() + (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) dst[k] = src[k] * scale + shift;
      }
    }
    return;
  }

  const double m = static_cast<double>(n * hw);
  if (cache) {
    if (cache->xhat.shape() != x.shape()) cache->xhat = Tensor<T>(x.shape());
    cache->inv_std.assign(c, T(0));
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = x.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) sum += static_cast<double>(src[k]);
    }
    const double mean = sum / m;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = x.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        const double d = static_cast<double>(src[k]) - mean;
        sq += d * d;
      }
    }
    const double var = sq / m;
    const T inv = static_cast<T>(1.0 / std::sqrt(var + bn.eps));
    const T tmean = static_cast<T>(mean);
    const T gam = bn.gamma.value[ch], bet = bn.beta.value[ch];
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = x.data() + (i * c + ch) * hw;
      T* dst = y.data() + (i * c + ch) * hw;
      T* xh = cache ? cache->xhat.data() + (i * c + ch) * hw : nullptr;
      for (std::size_t k = 0; k < hw; ++k) {
        const T v = (src[k] - tmean) * inv;
        if (xh) xh[k] = v;
        dst[k] = v * gam + bet;
      }
    }
    if (cache) cache->inv_std[ch] = inv;
    if (update_stats) {
      const double unbiased = m > 1 ? var * m / (m - 1) : var;
      bn.running_mean[ch] = static_cast<T>((1 - bn.momentum) * bn.running_mean[ch] + bn.momentum * mean);
      bn.running_var[ch] = static_cast<T>((1 - bn.momentum) * bn.running_var[ch] + bn.momentum * unbiased);
    }
  }
}

template <typename T>
void batchnorm_backward(const BatchNormCache<T>& cache, BatchNorm<T>& bn, const Tensor<T>& dy, Tensor<T>& dx) {
  check_same_shape(dy, cache.xhat.shape(), "batchnorm_backward dy");
  const std::size_t n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
  const double m = static_cast<double>(n * hw);
  if (dx.shape() != dy.shape()) dx = Tensor<T>(dy.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* g = dy.data() + (i * c + ch) * hw;
      const T* xh = cache.xhat.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        sum_dy += static_cast<double>(g[k]);
        sum_dy_xhat += static_cast<double>(g[k]) * static_cast<double>(xh[k]);
      }
    }
    bn.gamma.grad[ch] += static_cast<T>(sum_dy_xhat);
    bn.beta.grad[ch] += static_cast<T>(sum_dy);
    const T scale = bn.gamma.value[ch] * cache.inv_std[ch];
    const T mean_dy = static_cast<T>(sum_dy / m);
    const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / m);
    for (std::size_t i = 0; i < n; ++i) {
      const T* g = dy.data() + (i * c + ch) * hw;
      const T* xh = cache.xhat.data() + (i * c + ch) * hw;
      T* out = dx.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) out[k] = scale * (g[k] - mean_dy - xh[k] * mean_dy_xhat);
    }
  }
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (auto& v : x.values()) v = v > T(0) ? v : T(0);
}

template <typename T>
void relu_backward_inplace(const Tensor<T>& out, Tensor<T>& dy) {
  check_same_shape(dy, out.shape(), "relu_backward");
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (!(out[i] > T(0))) dy[i] = T(0);
}

template <typename T>
void global_avg_pool_forward(const Tensor<T>& x, Tensor<T>& y) {
  if (x.rank() != 4) fail(ErrorKind::shape_mismatch, "global_avg_pool: expected NCHW input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (y.shape() != Shape{n, c}) y = Tensor<T>({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    const T* src = x.data() + i * hw;
    T s = T(0);
    for (std::size_t k = 0; k < hw; ++k) s += src[k];
    y[i] = s / static_cast<T>(hw);
  }
}

template <typename T>
void global_avg_pool_backward(const Shape& x_shape, const Tensor<T>& dy, Tensor<T>& dx) {
  const std::size_t n = x_shape[0], c = x_shape[1], hw = x_shape[2] * x_shape[3];
  check_same_shape(dy, Shape{n, c}, "global_avg_pool_backward");
  if (dx.shape() != x_shape) dx = Tensor<T>(x_shape);
  for (std::size_t i = 0; i < n * c; ++i) {
    const T v = dy[i] / static_cast<T>(hw);
    std::fill(dx.data() + i * hw, dx.data() + (i + 1) * hw, v);
  }
}

template <typename T>
void linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Tensor<T>& y) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) || b.size() != w.dim(0))
    fail(ErrorKind::shape_mismatch, "linear: input " + to_string(x.shape()) + " weight " + to_string(w.shape()));
  const auto n = static_cast<Eigen::Index>(x.dim(0)), in = static_cast<Eigen::Index>(x.dim(1)),
             out = static_cast<Eigen::Index>(w.dim(0));
  if (y.shape() != Shape{x.dim(0), w.dim(0)}) y = Tensor<T>({x.dim(0), w.dim(0)});
  CMapMat<T> xm(x.data(), n, in), wm(w.data(), out, in);
  MapMat<T> ym(y.data(), n, out);
  ym.noalias() = xm * wm.transpose();
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(b.data(), out);
  ym.rowwise() += bv;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& db,
                     Tensor<T>* dx) {
  const auto n = static_cast<Eigen::Index>(x.dim(0)), in = static_cast<Eigen::Index>(x.dim(1)),
             out = static_cast<Eigen::Index>(w.dim(0));
  check_same_shape(dy, Shape{x.dim(0), w.dim(0)}, "linear_backward dy");
  CMapMat<T> xm(x.data(), n, in), wm(w.data(), out, in), dym(dy.data(), n, out);
  MapMat<T> dwm(dw.data(), out, in);
  dwm.noalias() += dym.transpose() * xm;
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> dbv(db.data(), out);
  dbv += dym.colwise().sum();
  if (dx) {
    if (dx->shape() != x.shape()) *dx = Tensor<T>(x.shape());
    MapMat<T> dxm(dx->data(), n, in);
    dxm.noalias() = dym * wm;
  }
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(b, a.shape(), "add_inplace");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

#define NFE_INSTANTIATE_LAYERS(T)                                                                                    \
  template void conv2d_forward<T>(const Tensor<T>&, const Tensor<T>&, const ConvGeom&, Tensor<T>&);                  \
  template void conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&, const ConvGeom&, const Tensor<T>&, Tensor<T>*, \
                                   Tensor<T>*);                                                                      \
  template void batchnorm_forward<T>(const Tensor<T>&, BatchNorm<T>&, Mode, bool, Tensor<T>&, BatchNormCache<T>*);   \
  template void batchnorm_backward<T>(const BatchNormCache<T>&, BatchNorm<T>&, const Tensor<T>&, Tensor<T>&);        \
  template void relu_inplace<T>(Tensor<T>&);                                                                         \
  template void relu_backward_inplace<T>(const Tensor<T>&, Tensor<T>&);                                              \
  template void global_avg_pool_forward<T>(const Tensor<T>&, Tensor<T>&);                                            \
  template void global_avg_pool_backward<T>(const Shape&, const Tensor<T>&, Tensor<T>&);                             \
  template void linear_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                 \
  template void linear_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&,      \
                                   Tensor<T>*);                                                                      \
  template void add_inplace<T>(Tensor<T>&, const Tensor<T>&);

NFE_INSTANTIATE_LAYERS(float)
NFE_INSTANTIATE_LAYERS(double)

}  // namespace nfe
