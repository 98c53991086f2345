#pragma once

// Forward/backward kernels for the layer kinds the architectures use. All
// feature maps are NCHW float tensors. Convolutions go through im2col and an
// Eigen GEMM; weight and bias gradients are accumulated into the given
// tensors so callers can sum over several passes.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "synthfeat/errors.hpp"
#include "synthfeat/tensor.hpp"

namespace synthfeat::nn {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline int conv_out_size(int in, int kernel, int stride, int pad, int dilation) {
  return (in + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1;
}

inline int deconv_out_size(int in, int kernel, int stride, int pad, int dilation) {
  return (in - 1) * stride - 2 * pad + dilation * (kernel - 1) + 1;
}

/// Sliding-window geometry over an image of (channels, height, width).
struct Window {
  int channels, height, width;
  int kernel, stride, pad, dilation;
  int out_h, out_w;

  int rows() const { return channels * kernel * kernel; }
  int cols() const { return out_h * out_w; }
};

inline void im2col(const float* img, const Window& g, float* col) {
  const int cols = g.cols();
  for (int c = 0; c < g.channels; ++c)
    for (int ky = 0; ky < g.kernel; ++ky)
      for (int kx = 0; kx < g.kernel; ++kx) {
        float* row = col + static_cast<std::size_t>((c * g.kernel + ky) * g.kernel + kx) * cols;
        const float* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          int iy = oy * g.stride - g.pad + ky * g.dilation;
          float* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0f);
            continue;
          }
          const float* src = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            int ix = ox * g.stride - g.pad + kx * g.dilation;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : 0.0f;
          }
        }
      }
}

/// Scatter-adds columns back onto the image; `img` must be pre-initialised.
inline void col2im(const float* col, const Window& g, float* img) {
  const int cols = g.cols();
  for (int c = 0; c < g.channels; ++c)
    for (int ky = 0; ky < g.kernel; ++ky)
      for (int kx = 0; kx < g.kernel; ++kx) {
        const float* row = col + static_cast<std::size_t>((c * g.kernel + ky) * g.kernel + kx) * cols;
        float* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          int iy = oy * g.stride - g.pad + ky * g.dilation;
          if (iy < 0 || iy >= g.height) continue;
          float* dst = plane + static_cast<std::size_t>(iy) * g.width;
          const float* src = row + oy * g.out_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            int ix = ox * g.stride - g.pad + kx * g.dilation;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
}

inline bool is_pointwise(const Window& g) {
  return g.kernel == 1 && g.stride == 1 && g.pad == 0 && g.out_h == g.height && g.out_w == g.width;
}

struct ConvParams {
  int stride = 1, pad = 0, dilation = 1;
};

/// x: (N, Cin, H, W); weight: (Cout, Cin, K, K); bias: (Cout).
inline Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvParams p) {
  const int cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != x.c()) throw ShapeError("conv2d: input has " + std::to_string(x.c()) + " channels, weight expects " + std::to_string(weight.dim(1)));
  Window g{x.c(), x.h(), x.w(), k, p.stride, p.pad, p.dilation,
           conv_out_size(x.h(), k, p.stride, p.pad, p.dilation), conv_out_size(x.w(), k, p.stride, p.pad, p.dilation)};
  if (g.out_h <= 0 || g.out_w <= 0) throw ShapeError("conv2d: non-positive output size");
  Tensor y(x.n(), cout, g.out_h, g.out_w);
  ConstMatMap w(weight.data(), cout, g.rows());
  Eigen::Map<const Eigen::VectorXf> b(bias.data(), cout);
  std::vector<float> col(is_pointwise(g) ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
  for (int n = 0; n < x.n(); ++n) {
    const float* src = x.item(n).data();
    if (!col.empty()) {
      im2col(src, g, col.data());
      src = col.data();
    }
    MatMap out(y.item(n).data(), cout, g.cols());
    out.noalias() = w * ConstMatMap(src, g.rows(), g.cols());
    out.colwise() += b;
  }
  return y;
}

/// Gradients of conv2d. dw/db accumulate; dx (if non-null) is overwritten.
inline void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, ConvParams p, Tensor* dx,
                            Tensor* dw, Tensor* db) {
  const int cout = weight.dim(0), k = weight.dim(2);
  Window g{x.c(), x.h(), x.w(), k, p.stride, p.pad, p.dilation, dy.h(), dy.w()};
  ConstMatMap w(weight.data(), cout, g.rows());
  std::vector<float> col(static_cast<std::size_t>(g.rows()) * g.cols());
  if (dx) *dx = Tensor(x.shape());
  const bool pw = is_pointwise(g);
  for (int n = 0; n < x.n(); ++n) {
    ConstMatMap gy(dy.item(n).data(), cout, g.cols());
    if (dw) {
      const float* src = x.item(n).data();
      if (!pw) {
        im2col(src, g, col.data());
        src = col.data();
      }
      MatMap(dw->data(), cout, g.rows()).noalias() += gy * ConstMatMap(src, g.rows(), g.cols()).transpose();
    }
    if (db) Eigen::Map<Eigen::VectorXf>(db->data(), cout) += gy.rowwise().sum();
    if (dx) {
      if (pw) {
        MatMap(dx->item(n).data(), g.rows(), g.cols()).noalias() = w.transpose() * gy;
      } else {
        MatMap(col.data(), g.rows(), g.cols()).noalias() = w.transpose() * gy;
        col2im(col.data(), g, dx->item(n).data());
      }
    }
  }
}

/// Transposed convolution. x: (N, Cin, H, W); weight: (Cin, Cout, K, K).
inline Tensor deconv2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvParams p) {
  const int cin = weight.dim(0), cout = weight.dim(1), k = weight.dim(2);
  if (cin != x.c()) throw ShapeError("deconv2d: input has " + std::to_string(x.c()) + " channels, weight expects " + std::to_string(cin));
  const int oh = deconv_out_size(x.h(), k, p.stride, p.pad, p.dilation);
  const int ow = deconv_out_size(x.w(), k, p.stride, p.pad, p.dilation);
  if (oh <= 0 || ow <= 0) throw ShapeError("deconv2d: non-positive output size");
  Window g{cout, oh, ow, k, p.stride, p.pad, p.dilation, x.h(), x.w()};
  Tensor y(x.n(), cout, oh, ow);
  ConstMatMap w(weight.data(), cin, g.rows());
  std::vector<float> col(static_cast<std::size_t>(g.rows()) * g.cols());
  for (int n = 0; n < x.n(); ++n) {
    MatMap(col.data(), g.rows(), g.cols()).noalias() = w.transpose() * ConstMatMap(x.item(n).data(), cin, g.cols());
    float* out = y.item(n).data();
    for (int c = 0; c < cout; ++c) std::fill(out + static_cast<std::size_t>(c) * oh * ow, out + static_cast<std::size_t>(c + 1) * oh * ow, bias[static_cast<std::size_t>(c)]);
    col2im(col.data(), g, out);
  }
  return y;
}

inline void deconv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, ConvParams p, Tensor* dx,
                              Tensor* dw, Tensor* db) {
  const int cin = weight.dim(0), cout = weight.dim(1), k = weight.dim(2);
  Window g{cout, dy.h(), dy.w(), k, p.stride, p.pad, p.dilation, x.h(), x.w()};
  ConstMatMap w(weight.data(), cin, g.rows());
  std::vector<float> col(static_cast<std::size_t>(g.rows()) * g.cols());
  if (dx) *dx = Tensor(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    im2col(dy.item(n).data(), g, col.data());
    ConstMatMap gc(col.data(), g.rows(), g.cols());
    if (dw) MatMap(dw->data(), cin, g.rows()).noalias() += ConstMatMap(x.item(n).data(), cin, g.cols()) * gc.transpose();
    if (dx) MatMap(dx->item(n).data(), cin, g.cols()).noalias() = w * gc;
    if (db) {
      const float* gy = dy.item(n).data();
      std::size_t plane = static_cast<std::size_t>(dy.h()) * dy.w();
      for (int c = 0; c < cout; ++c) {
        float s = 0;
        for (std::size_t i = 0; i < plane; ++i) s += gy[static_cast<std::size_t>(c) * plane + i];
        (*db)[static_cast<std::size_t>(c)] += s;
      }
    }
  }
}

/// Max pooling; out-of-frame taps never win. `argmax` receives flat input
/// indices per output element.
inline Tensor maxpool_forward(const Tensor& x, int kernel, int stride, int pad, std::vector<int>& argmax) {
  const int oh = conv_out_size(x.h(), kernel, stride, pad, 1), ow = conv_out_size(x.w(), kernel, stride, pad, 1);
  if (oh <= 0 || ow <= 0) throw ShapeError("maxpool: non-positive output size");
  Tensor y(x.n(), x.c(), oh, ow);
  argmax.assign(y.size(), -1);
  std::size_t o = 0;
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * x.c() + c) * x.plane();
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox, ++o) {
          float best = -std::numeric_limits<float>::infinity();
          int arg = -1;
          for (int ky = 0; ky < kernel; ++ky) {
            int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= x.h()) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= x.w()) continue;
              std::size_t idx = base + static_cast<std::size_t>(iy) * x.w() + ix;
              if (arg < 0 || x[idx] > best) {
                best = x[idx];
                arg = static_cast<int>(idx);
              }
            }
          }
          y[o] = best;
          argmax[o] = arg;
        }
    }
  return y;
}

inline Tensor maxpool_backward(const std::vector<int>& input_shape, const std::vector<int>& argmax, const Tensor& dy) {
  Tensor dx(input_shape);
  for (std::size_t o = 0; o < dy.size(); ++o) dx[static_cast<std::size_t>(argmax[o])] += dy[o];
  return dx;
}

inline constexpr float kBatchNormEps = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.1f;

struct BatchNormCache {
  Tensor xhat;
  std::vector<float> inv_std;
  bool batch_stats = true;
};

/// Normalises per channel. With batch statistics the running estimates are
/// updated only if `update_running` is set (unbiased variance, momentum 0.1).
inline Tensor batchnorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                                Tensor& running_var, bool batch_stats, bool update_running, BatchNormCache& cache) {
  const int C = x.c();
  const std::size_t plane = x.plane();
  const std::size_t m = static_cast<std::size_t>(x.n()) * plane;
  Tensor y(x.shape());
  cache.xhat = Tensor(x.shape());
  cache.inv_std.assign(static_cast<std::size_t>(C), 0.0f);
  cache.batch_stats = batch_stats;
  for (int c = 0; c < C; ++c) {
    float mean, var;
    if (batch_stats) {
      double s = 0, s2 = 0;
      for (int n = 0; n < x.n(); ++n) {
        const float* p = x.item(n).data() + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      double mu = s / static_cast<double>(m);
      for (int n = 0; n < x.n(); ++n) {
        const float* p = x.item(n).data() + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s2 += (p[i] - mu) * (p[i] - mu);
      }
      mean = static_cast<float>(mu);
      var = static_cast<float>(s2 / static_cast<double>(m));
      if (update_running) {
        float unbiased = m > 1 ? static_cast<float>(s2 / static_cast<double>(m - 1)) : var;
        running_mean[static_cast<std::size_t>(c)] =
            (1 - kBatchNormMomentum) * running_mean[static_cast<std::size_t>(c)] + kBatchNormMomentum * mean;
        running_var[static_cast<std::size_t>(c)] =
            (1 - kBatchNormMomentum) * running_var[static_cast<std::size_t>(c)] + kBatchNormMomentum * unbiased;
      }
    } else {
      mean = running_mean[static_cast<std::size_t>(c)];
      var = running_var[static_cast<std::size_t>(c)];
    }
    float inv = 1.0f / std::sqrt(var + kBatchNormEps);
    cache.inv_std[static_cast<std::size_t>(c)] = inv;
    float g = gamma[static_cast<std::size_t>(c)], b = beta[static_cast<std::size_t>(c)];
    for (int n = 0; n < x.n(); ++n) {
      std::size_t off = static_cast<std::size_t>(n) * x.item_size() + static_cast<std::size_t>(c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        float xh = (x[off + i] - mean) * inv;
        cache.xhat[off + i] = xh;
        y[off + i] = g * xh + b;
      }
    }
  }
  return y;
}

inline Tensor batchnorm_backward(const Tensor& dy, const Tensor& gamma, const BatchNormCache& cache, Tensor* dgamma,
                                 Tensor* dbeta) {
  const int C = dy.c();
  const std::size_t plane = dy.plane();
  const double m = static_cast<double>(dy.n()) * static_cast<double>(plane);
  Tensor dx(dy.shape());
  for (int c = 0; c < C; ++c) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (int n = 0; n < dy.n(); ++n) {
      std::size_t off = static_cast<std::size_t>(n) * dy.item_size() + static_cast<std::size_t>(c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += dy[off + i];
        sum_dy_xhat += static_cast<double>(dy[off + i]) * cache.xhat[off + i];
      }
    }
    if (dgamma) (*dgamma)[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy_xhat);
    if (dbeta) (*dbeta)[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy);
    const float scale = gamma[static_cast<std::size_t>(c)] * cache.inv_std[static_cast<std::size_t>(c)];
    const float mean_dy = static_cast<float>(sum_dy / m), mean_dy_xhat = static_cast<float>(sum_dy_xhat / m);
    for (int n = 0; n < dy.n(); ++n) {
      std::size_t off = static_cast<std::size_t>(n) * dy.item_size() + static_cast<std::size_t>(c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        if (cache.batch_stats)
          dx[off + i] = scale * (dy[off + i] - mean_dy - cache.xhat[off + i] * mean_dy_xhat);
        else
          dx[off + i] = scale * dy[off + i];
      }
    }
  }
  return dx;
}

enum class Activation { none, relu, leaky_relu };

inline constexpr float kLeakySlope = 0.2f;

inline void activate_inplace(Tensor& t, Activation a) {
  if (a == Activation::none) return;
  const float slope = a == Activation::relu ? 0.0f : kLeakySlope;
  for (auto& v : t.values())
    if (v < 0) v *= slope;
}

/// Backward through an activation given its output (sign of output equals
/// sign of input for both rectifiers).
inline void activation_backward_inplace(Tensor& grad, const Tensor& output, Activation a) {
  if (a == Activation::none) return;
  const float slope = a == Activation::relu ? 0.0f : kLeakySlope;
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (output[i] <= 0) grad[i] *= slope;
}

inline Tensor center_crop(const Tensor& x, int th, int tw, int& off_y, int& off_x) {
  if (th > x.h() || tw > x.w()) throw ShapeError("center_crop: target larger than input");
  off_y = (x.h() - th) / 2;
  off_x = (x.w() - tw) / 2;
  Tensor y(x.n(), x.c(), th, tw);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int yy = 0; yy < th; ++yy)
        for (int xx = 0; xx < tw; ++xx) y.at(n, c, yy, xx) = x.at(n, c, yy + off_y, xx + off_x);
  return y;
}

inline Tensor center_crop_backward(const std::vector<int>& input_shape, const Tensor& dy, int off_y, int off_x) {
  Tensor dx(input_shape);
  for (int n = 0; n < dy.n(); ++n)
    for (int c = 0; c < dy.c(); ++c)
      for (int yy = 0; yy < dy.h(); ++yy)
        for (int xx = 0; xx < dy.w(); ++xx) dx.at(n, c, yy + off_y, xx + off_x) = dy.at(n, c, yy, xx);
  return dx;
}

/// Bilinear resize of each channel to (th, tw) with half-pixel centres.
inline Tensor resize_bilinear(const Tensor& x, int th, int tw) {
  Tensor y(x.n(), x.c(), th, tw);
  const double sy = static_cast<double>(x.h()) / th, sx = static_cast<double>(x.w()) / tw;
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int oy = 0; oy < th; ++oy) {
        double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(x.h() - 1));
        int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, x.h() - 1);
        double wy = fy - y0;
        for (int ox = 0; ox < tw; ++ox) {
          double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(x.w() - 1));
          int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, x.w() - 1);
          double wx = fx - x0;
          double v = (1 - wy) * ((1 - wx) * x.at(n, c, y0, x0) + wx * x.at(n, c, y0, x1)) +
                     wy * ((1 - wx) * x.at(n, c, y1, x0) + wx * x.at(n, c, y1, x1));
          y.at(n, c, oy, ox) = static_cast<float>(v);
        }
      }
  return y;
}

}  // namespace synthfeat::nn
