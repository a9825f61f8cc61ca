#pragma once

// Differentiable building blocks. Spatial tensors are single-sample CHW,
// token sets are N x D. Batching happens one level up.

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "sal3sd/autograd.hpp"

namespace sal3sd::ops {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace detail {

inline void require_rank(const Var& v, int r, const char* op) {
  if (v.value().rank() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(v.shape()));
  }
}

inline void im2col(const double* x, int c, int h, int w, int k, double* col) {
  const int pad = k / 2;
  const int hw = h * w;
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * hw;
        const int dy = ky - pad, dx = kx - pad;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          double* out = row + y * w;
          if (sy < 0 || sy >= h) {
            std::fill(out, out + w, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(ci) * h + sy) * w;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int xx = 0; xx < x0; ++xx) out[xx] = 0.0;
          for (int xx = x0; xx < x1; ++xx) out[xx] = src[xx + dx];
          for (int xx = std::max(x1, x0); xx < w; ++xx) out[xx] = 0.0;
        }
      }
    }
  }
}

inline void col2im_add(const double* col, int c, int h, int w, int k, double* x) {
  const int pad = k / 2;
  const int hw = h * w;
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * hw;
        const int dy = ky - pad, dx = kx - pad;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const double* in = row + y * w;
          double* dst = x + (static_cast<std::size_t>(ci) * h + sy) * w;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int xx = x0; xx < x1; ++xx) dst[xx + dx] += in[xx];
        }
      }
    }
  }
}

/// Per-axis taps for align_corners=false bilinear resampling.
struct LinearTaps {
  std::vector<int> i0, i1;
  std::vector<double> w0, w1;
};

inline LinearTaps linear_taps(int in, int out) {
  LinearTaps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w0.resize(out);
  t.w1.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const double f = src - i0;
    t.i0[o] = i0;
    t.i1[o] = i1;
    t.w0[o] = 1.0 - f;
    t.w1[o] = f;
  }
  return t;
}

}  // namespace detail

/// Same-padded stride-1 convolution. x {C,H,W}, w {O,C,k,k}, b {O}.
inline Var conv2d(const Var& x, const Var& w, const Var& b) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(w, 4, "conv2d");
  const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int o = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c || w.dim(3) != k || k % 2 == 0) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  if (b.value().size() != static_cast<std::size_t>(o)) throw ShapeError("conv2d: bias size mismatch");
  const int hw = h * wd;
  const int ckk = c * k * k;

  Tensor out({o, h, wd});
  MapMat y(out.data(), o, hw);
  CMapMat wm(w.value().data(), o, ckk);
  if (k == 1) {
    y.noalias() = wm * CMapMat(x.value().data(), c, hw);
  } else {
    std::vector<double> col(static_cast<std::size_t>(ckk) * hw);
    detail::im2col(x.value().data(), c, h, wd, k, col.data());
    y.noalias() = wm * CMapMat(col.data(), ckk, hw);
  }
  const double* bias = b.value().data();
  for (int oc = 0; oc < o; ++oc) y.row(oc).array() += bias[oc];

  return make_op(std::move(out), {x, w, b}, [c, h, wd, o, k, hw, ckk](Node& self) {
    const Node& xn = *self.inputs[0];
    const Node& wn = *self.inputs[1];
    CMapMat g(self.grad.data(), o, hw);
    std::vector<double> col;
    const double* colp = xn.value.data();
    if (k != 1) {
      col.resize(static_cast<std::size_t>(ckk) * hw);
      detail::im2col(xn.value.data(), c, h, wd, k, col.data());
      colp = col.data();
    }
    CMapMat cm(colp, ckk, hw);
    if (self.inputs[1]->requires_grad) {
      MapMat(self.inputs[1]->grad_buffer().data(), o, ckk).noalias() += g * cm.transpose();
    }
    if (self.inputs[2]->requires_grad) {
      double* db = self.inputs[2]->grad_buffer().data();
      for (int oc = 0; oc < o; ++oc) db[oc] += g.row(oc).sum();
    }
    if (self.inputs[0]->requires_grad) {
      CMapMat wm(wn.value.data(), o, ckk);
      double* dx = self.inputs[0]->grad_buffer().data();
      if (k == 1) {
        MapMat(dx, c, hw).noalias() += wm.transpose() * g;
      } else {
        RowMat dcol = wm.transpose() * g;
        detail::col2im_add(dcol.data(), c, h, wd, k, dx);
      }
    }
  });
}

inline Var relu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0 ? v : 0.0;
  return make_op(std::move(out), {x}, [](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    const double* y = self.value.data();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += y[i] > 0 ? g[i] : 0.0;
  });
}

/// Exact (erf) GELU.
inline Var gelu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return make_op(std::move(out), {x}, [](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    const Tensor& xv = self.inputs[0]->value;
    const double* g = self.grad.data();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      dx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

/// Logistic sigmoid clamped to [eps, 1 - eps]; the clamp has zero slope.
inline Var sigmoid_clamped(const Var& x, double eps) {
  Tensor out = x.value();
  for (double& v : out.values()) {
    const double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    v = std::clamp(s, eps, 1.0 - eps);
  }
  return make_op(std::move(out), {x}, [eps](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    const double* y = self.value.data();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (y[i] > eps && y[i] < 1.0 - eps) dx[i] += g[i] * y[i] * (1.0 - y[i]);
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    accumulate(self, 0, self.grad);
    accumulate(self, 1, self.grad);
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return make_op(std::move(out), {a}, [s](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s * self.grad[i];
  });
}

/// 2x2 max pooling, stride 2. Ties resolve to the first element in scan order.
inline Var maxpool2(const Var& x) {
  detail::require_rank(x, 3, "maxpool2");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2) throw ShapeError("maxpool2: odd spatial size " + shape_str(x.shape()));
  const int oh = h / 2, ow = w / 2;
  Tensor out({c, oh, ow});
  std::vector<int> arg(out.size());
  const Tensor& xv = x.value();
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        int best = (ci * h + 2 * y) * w + 2 * xx;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = (ci * h + 2 * y + dy) * w + 2 * xx + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (static_cast<std::size_t>(ci) * oh + y) * ow + xx;
        out[o] = xv[best];
        arg[o] = best;
      }
  return make_op(std::move(out), {x}, [arg = std::move(arg)](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < arg.size(); ++i) dx[arg[i]] += self.grad[i];
  });
}

/// Bilinear resize (align_corners = false) of a CHW tensor.
inline Var upsample_bilinear(const Var& x, int out_h, int out_w) {
  detail::require_rank(x, 3, "upsample_bilinear");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto ty = detail::linear_taps(h, out_h);
  auto tx = detail::linear_taps(w, out_w);
  Tensor out({c, out_h, out_w});
  const Tensor& xv = x.value();
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < out_h; ++y) {
      const double* r0 = xv.data() + (static_cast<std::size_t>(ci) * h + ty.i0[y]) * w;
      const double* r1 = xv.data() + (static_cast<std::size_t>(ci) * h + ty.i1[y]) * w;
      for (int xx = 0; xx < out_w; ++xx) {
        const double top = tx.w0[xx] * r0[tx.i0[xx]] + tx.w1[xx] * r0[tx.i1[xx]];
        const double bot = tx.w0[xx] * r1[tx.i0[xx]] + tx.w1[xx] * r1[tx.i1[xx]];
        out.at(ci, y, xx) = ty.w0[y] * top + ty.w1[y] * bot;
      }
    }
  return make_op(std::move(out), {x}, [c, h, w, out_h, out_w, ty, tx](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < out_h; ++y) {
        double* r0 = dx.data() + (static_cast<std::size_t>(ci) * h + ty.i0[y]) * w;
        double* r1 = dx.data() + (static_cast<std::size_t>(ci) * h + ty.i1[y]) * w;
        for (int xx = 0; xx < out_w; ++xx) {
          const double g = self.grad.at(ci, y, xx);
          const double gt = g * ty.w0[y], gb = g * ty.w1[y];
          r0[tx.i0[xx]] += gt * tx.w0[xx];
          r0[tx.i1[xx]] += gt * tx.w1[xx];
          r1[tx.i0[xx]] += gb * tx.w0[xx];
          r1[tx.i1[xx]] += gb * tx.w1[xx];
        }
      }
  });
}

inline Var upsample_nearest(const Var& x, int factor_y, int factor_x) {
  detail::require_rank(x, 3, "upsample_nearest");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = h * factor_y, ow = w * factor_x;
  Tensor out({c, oh, ow});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) out.at(ci, y, xx) = x.value().at(ci, y / factor_y, xx / factor_x);
  return make_op(std::move(out), {x}, [c, oh, ow, factor_y, factor_x](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) dx.at(ci, y / factor_y, xx / factor_x) += self.grad.at(ci, y, xx);
  });
}

inline Var concat_channels(const Var& a, const Var& b) {
  detail::require_rank(a, 3, "concat_channels");
  detail::require_rank(b, 3, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw ShapeError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int ca = a.dim(0), cb = b.dim(0), h = a.dim(1), w = a.dim(2);
  Tensor out({ca + cb, h, w});
  std::copy(a.value().data(), a.value().data() + a.value().size(), out.data());
  std::copy(b.value().data(), b.value().data() + b.value().size(), out.data() + a.value().size());
  const std::size_t na = a.value().size();
  return make_op(std::move(out), {a, b}, [na](Node& self) {
    if (self.inputs[0]->requires_grad) {
      Tensor& da = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < na; ++i) da[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      Tensor& db = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += self.grad[na + i];
    }
  });
}

/// Non-overlapping by x bx average pooling of a CHW tensor.
inline Var block_mean(const Var& x, int by, int bx) {
  detail::require_rank(x, 3, "block_mean");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (by <= 0 || bx <= 0 || h % by || w % bx) {
    throw ShapeError("block_mean: block " + std::to_string(by) + "x" + std::to_string(bx) + " does not tile " +
                     shape_str(x.shape()));
  }
  const int oh = h / by, ow = w / bx;
  const double inv = 1.0 / (by * bx);
  Tensor out({c, oh, ow});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) out.at(ci, y / by, xx / bx) += x.value().at(ci, y, xx);
  for (double& v : out.values()) v *= inv;
  return make_op(std::move(out), {x}, [c, h, w, by, bx, inv](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) dx.at(ci, y, xx) += inv * self.grad.at(ci, y / by, xx / bx);
  });
}

/// {C,H,W} -> {H*W, C}, tokens in row-major grid order.
inline Var chw_to_tokens(const Var& x) {
  detail::require_rank(x, 3, "chw_to_tokens");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out({h * w, c});
  MapMat(out.data(), h * w, c) = CMapMat(x.value().data(), c, h * w).transpose();
  return make_op(std::move(out), {x}, [c, h, w](Node& self) {
    MapMat(self.inputs[0]->grad_buffer().data(), c, h * w) += CMapMat(self.grad.data(), h * w, c).transpose();
  });
}

/// {H*W, C} -> {C,H,W}.
inline Var tokens_to_chw(const Var& t, int h, int w) {
  detail::require_rank(t, 2, "tokens_to_chw");
  const int n = t.dim(0), c = t.dim(1);
  if (n != h * w) throw ShapeError("tokens_to_chw: " + std::to_string(n) + " tokens do not fill a " +
                                   std::to_string(h) + "x" + std::to_string(w) + " grid");
  Tensor out({c, h, w});
  MapMat(out.data(), c, n) = CMapMat(t.value().data(), n, c).transpose();
  return make_op(std::move(out), {t}, [c, n](Node& self) {
    MapMat(self.inputs[0]->grad_buffer().data(), n, c) += CMapMat(self.grad.data(), c, n).transpose();
  });
}

/// {C, Gh*s, Gw*s} -> {Gh*Gw, C*s*s}: one token per s x s cell, features ordered (c, dy, dx).
inline Var space_to_tokens(const Var& x, int s) {
  detail::require_rank(x, 3, "space_to_tokens");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % s || w % s) throw ShapeError("space_to_tokens: cell size does not tile " + shape_str(x.shape()));
  const int gh = h / s, gw = w / s, d = c * s * s;
  std::vector<std::size_t> src(static_cast<std::size_t>(gh) * gw * d);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx)
      for (int ci = 0; ci < c; ++ci)
        for (int dy = 0; dy < s; ++dy)
          for (int dx = 0; dx < s; ++dx) {
            const std::size_t o = (static_cast<std::size_t>(gy * gw + gx) * d) + (ci * s + dy) * s + dx;
            src[o] = (static_cast<std::size_t>(ci) * h + gy * s + dy) * w + gx * s + dx;
          }
  Tensor out({gh * gw, d});
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = x.value()[src[i]];
  return make_op(std::move(out), {x}, [src = std::move(src)](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < src.size(); ++i) dx[src[i]] += self.grad[i];
  });
}

/// Row-wise affine map: x {N,Din}, w {Dout,Din}, b {Dout} -> {N,Dout}.
inline Var linear(const Var& x, const Var& w, const Var& b) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  const int n = x.dim(0), din = x.dim(1), dout = w.dim(0);
  if (w.dim(1) != din || b.value().size() != static_cast<std::size_t>(dout)) {
    throw ShapeError("linear: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  Tensor out({n, dout});
  MapMat y(out.data(), n, dout);
  y.noalias() = CMapMat(x.value().data(), n, din) * CMapMat(w.value().data(), dout, din).transpose();
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < dout; ++j) y(r, j) += b.value()[j];
  return make_op(std::move(out), {x, w, b}, [n, din, dout](Node& self) {
    CMapMat g(self.grad.data(), n, dout);
    if (self.inputs[0]->requires_grad) {
      MapMat(self.inputs[0]->grad_buffer().data(), n, din).noalias() +=
          g * CMapMat(self.inputs[1]->value.data(), dout, din);
    }
    if (self.inputs[1]->requires_grad) {
      MapMat(self.inputs[1]->grad_buffer().data(), dout, din).noalias() +=
          g.transpose() * CMapMat(self.inputs[0]->value.data(), n, din);
    }
    if (self.inputs[2]->requires_grad) {
      double* db = self.inputs[2]->grad_buffer().data();
      for (int j = 0; j < dout; ++j) db[j] += g.col(j).sum();
    }
  });
}

/// Per-row layer normalization over the last dimension.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  detail::require_rank(x, 2, "layer_norm");
  const int n = x.dim(0), d = x.dim(1);
  if (gamma.value().size() != static_cast<std::size_t>(d) || beta.value().size() != static_cast<std::size_t>(d)) {
    throw ShapeError("layer_norm: affine size mismatch");
  }
  Tensor out({n, d});
  Tensor xhat({n, d});
  std::vector<double> inv_std(n);
  for (int r = 0; r < n; ++r) {
    const double* xr = x.value().data() + static_cast<std::size_t>(r) * d;
    double mu = 0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) {
      xhat.at(r, j) = (xr[j] - mu) * inv_std[r];
      out.at(r, j) = gamma.value()[j] * xhat.at(r, j) + beta.value()[j];
    }
  }
  return make_op(std::move(out), {x, gamma, beta},
                 [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                   const Tensor& g = self.grad;
                   const Tensor& gam = self.inputs[1]->value;
                   if (self.inputs[1]->requires_grad || self.inputs[2]->requires_grad) {
                     Tensor& dg = self.inputs[1]->grad_buffer();
                     Tensor& db = self.inputs[2]->grad_buffer();
                     for (int r = 0; r < n; ++r)
                       for (int j = 0; j < d; ++j) {
                         dg[j] += g.at(r, j) * xhat.at(r, j);
                         db[j] += g.at(r, j);
                       }
                   }
                   if (self.inputs[0]->requires_grad) {
                     Tensor& dx = self.inputs[0]->grad_buffer();
                     for (int r = 0; r < n; ++r) {
                       double m1 = 0, m2 = 0;
                       for (int j = 0; j < d; ++j) {
                         const double dxh = g.at(r, j) * gam[j];
                         m1 += dxh;
                         m2 += dxh * xhat.at(r, j);
                       }
                       m1 /= d;
                       m2 /= d;
                       for (int j = 0; j < d; ++j) {
                         const double dxh = g.at(r, j) * gam[j];
                         dx.at(r, j) += inv_std[r] * (dxh - m1 - xhat.at(r, j) * m2);
                       }
                     }
                   }
                 });
}

/// Scaled dot-product attention over `heads` equal slices of the feature dim.
inline Var multi_head_attention(const Var& q, const Var& k, const Var& v, int heads) {
  detail::require_rank(q, 2, "attention");
  require_same_shape(q.value(), k.value(), "attention");
  require_same_shape(q.value(), v.value(), "attention");
  const int n = q.dim(0), d = q.dim(1);
  if (heads <= 0 || d % heads) throw ConfigError("attention: token dim " + std::to_string(d) + " not divisible by heads");
  const int dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  using Stride = Eigen::OuterStride<>;
  using CSlice = Eigen::Map<const RowMat, 0, Stride>;
  using Slice = Eigen::Map<RowMat, 0, Stride>;

  Tensor out({n, d});
  std::vector<RowMat> attn(heads);
  for (int hd = 0; hd < heads; ++hd) {
    CSlice qh(q.value().data() + hd * dh, n, dh, Stride(d));
    CSlice kh(k.value().data() + hd * dh, n, dh, Stride(d));
    CSlice vh(v.value().data() + hd * dh, n, dh, Stride(d));
    RowMat s = (qh * kh.transpose()) * sc;
    for (int r = 0; r < n; ++r) {
      const double mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp();
      s.row(r) /= s.row(r).sum();
    }
    Slice(out.data() + hd * dh, n, dh, Stride(d)).noalias() = s * vh;
    attn[hd] = std::move(s);
  }
  return make_op(std::move(out), {q, k, v}, [n, d, dh, heads, sc, attn = std::move(attn)](Node& self) {
    const Node& qn = *self.inputs[0];
    const Node& kn = *self.inputs[1];
    const Node& vn = *self.inputs[2];
    double* dq = self.inputs[0]->requires_grad ? self.inputs[0]->grad_buffer().data() : nullptr;
    double* dk = self.inputs[1]->requires_grad ? self.inputs[1]->grad_buffer().data() : nullptr;
    double* dv = self.inputs[2]->requires_grad ? self.inputs[2]->grad_buffer().data() : nullptr;
    for (int hd = 0; hd < heads; ++hd) {
      const RowMat& a = attn[hd];
      CSlice go(self.grad.data() + hd * dh, n, dh, Stride(d));
      CSlice qh(qn.value.data() + hd * dh, n, dh, Stride(d));
      CSlice kh(kn.value.data() + hd * dh, n, dh, Stride(d));
      CSlice vh(vn.value.data() + hd * dh, n, dh, Stride(d));
      if (dv) Slice(dv + hd * dh, n, dh, Stride(d)).noalias() += a.transpose() * go;
      RowMat da = go * vh.transpose();
      RowMat ds(n, n);
      for (int r = 0; r < n; ++r) {
        const double dot = a.row(r).dot(da.row(r));
        ds.row(r) = a.row(r).array() * (da.row(r).array() - dot);
      }
      if (dq) Slice(dq + hd * dh, n, dh, Stride(d)).noalias() += (ds * kh) * sc;
      if (dk) Slice(dk + hd * dh, n, dh, Stride(d)).noalias() += (ds.transpose() * qh) * sc;
    }
  });
}

/// {G,K} -> {K}: column sums.
inline Var sum_rows(const Var& x) {
  detail::require_rank(x, 2, "sum_rows");
  const int g = x.dim(0), k = x.dim(1);
  Tensor out({k});
  for (int r = 0; r < g; ++r)
    for (int j = 0; j < k; ++j) out[j] += x.value().at(r, j);
  return make_op(std::move(out), {x}, [g, k](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (int r = 0; r < g; ++r)
      for (int j = 0; j < k; ++j) dx.at(r, j) += self.grad[j];
  });
}

/// Sum of all elements, returned as a {1} tensor.
inline Var sum_all(const Var& x) {
  double s = 0;
  for (double v : x.value().values()) s += v;
  return make_op(Tensor({1}, s), {x}, [](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    const double g = self.grad[0];
    for (double& v : dx.values()) v += g;
  });
}

/// Weighted sum of scalar vars.
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: size mismatch");
  double s = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().size() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    s += weights[i] * terms[i].value()[0];
  }
  return make_op(Tensor({1}, s), terms, [weights](Node& self) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (self.inputs[i]->requires_grad) self.inputs[i]->grad_buffer()[0] += weights[i] * self.grad[0];
    }
  });
}

}  // namespace sal3sd::ops
