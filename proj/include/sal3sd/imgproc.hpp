#pragma once

// Non-differentiable image operations used by augmentation and pseudo-labels.

#include <algorithm>
#include <array>
#include <cmath>
#include <tuple>
#include <vector>

#include "sal3sd/tensor.hpp"

namespace sal3sd::imgproc {

/// Keys cubic convolution kernel, a = -0.5.
inline double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

struct CubicTaps {
  std::vector<std::array<int, 4>> idx;
  std::vector<std::array<double, 4>> w;
};

/// Taps sampling [start, start+len) of a source axis onto `out` samples,
/// pixel-center aligned, clamped to the crop.
inline CubicTaps cubic_taps(int start, int len, int out) {
  CubicTaps t;
  t.idx.resize(out);
  t.w.resize(out);
  const double scale = static_cast<double>(len) / out;
  for (int o = 0; o < out; ++o) {
    const double src = (o + 0.5) * scale - 0.5;
    const int base = static_cast<int>(std::floor(src));
    for (int k = 0; k < 4; ++k) {
      const int i = base - 1 + k;
      t.idx[o][k] = start + std::clamp(i, 0, len - 1);
      t.w[o][k] = cubic_weight(src - i);
    }
  }
  return t;
}

/// Bicubic resample of the crop (y0, x0, ch, cw) to out_h x out_w. No clamping of values.
inline Image crop_resize_bicubic(const Image& img, int y0, int x0, int ch, int cw, int out_h, int out_w) {
  if (y0 < 0 || x0 < 0 || ch <= 0 || cw <= 0 || y0 + ch > img.height() || x0 + cw > img.width()) {
    throw ShapeError("crop_resize_bicubic: crop outside image");
  }
  const auto ty = cubic_taps(y0, ch, out_h);
  const auto tx = cubic_taps(x0, cw, out_w);
  Image out(out_h, out_w);
  std::vector<double> rows(static_cast<std::size_t>(img.height()) * out_w);
  for (int c = 0; c < 3; ++c) {
    // horizontal pass on the rows the vertical pass will touch
    for (int y = y0; y < y0 + ch; ++y)
      for (int x = 0; x < out_w; ++x) {
        double s = 0;
        for (int k = 0; k < 4; ++k) s += tx.w[x][k] * img.at(c, y, tx.idx[x][k]);
        rows[static_cast<std::size_t>(y) * out_w + x] = s;
      }
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) {
        double s = 0;
        for (int k = 0; k < 4; ++k) s += ty.w[y][k] * rows[static_cast<std::size_t>(ty.idx[y][k]) * out_w + x];
        out.at(c, y, x) = s;
      }
  }
  return out;
}

inline Image resize_bicubic(const Image& img, int out_h, int out_w) {
  return crop_resize_bicubic(img, 0, 0, img.height(), img.width(), out_h, out_w);
}

inline void clamp01(Image& img) {
  for (double& v : img.tensor().values()) v = std::clamp(v, 0.0, 1.0);
}

/// Separable Gaussian blur, replicate borders, radius ceil(3 sigma).
inline Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0) return img;
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  const int h = img.height(), w = img.width();
  Image tmp(h, w), out(h, w);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        for (int i = -r; i <= r; ++i) s += k[i + r] * img.at(c, y, std::clamp(x + i, 0, w - 1));
        tmp.at(c, y, x) = s;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        for (int i = -r; i <= r; ++i) s += k[i + r] * tmp.at(c, std::clamp(y + i, 0, h - 1), x);
        out.at(c, y, x) = s;
      }
  }
  return out;
}

/// Sobel gradient magnitude with replicate-padded borders (unnormalized).
inline SaliencyMap sobel_magnitude(const SaliencyMap& g) {
  const int h = g.height(), w = g.width();
  SaliencyMap out(h, w);
  auto px = [&](int y, int x) { return g.at(std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1)); };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      out.at(y, x) = std::sqrt(gx * gx + gy * gy);
    }
  return out;
}

/// Binary dilation with a (2r+1)^2 square, computed as two separable running-max passes.
inline SaliencyMap dilate_square(const SaliencyMap& m, int r) {
  if (r <= 0) return m;
  const int h = m.height(), w = m.width();
  SaliencyMap tmp(h, w), out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double v = 0;
      for (int i = std::max(0, x - r); i <= std::min(w - 1, x + r); ++i) v = std::max(v, m.at(y, i));
      tmp.at(y, x) = v;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double v = 0;
      for (int i = std::max(0, y - r); i <= std::min(h - 1, y + r); ++i) v = std::max(v, tmp.at(i, x));
      out.at(y, x) = v;
    }
  return out;
}

/// Bilinear resize (align_corners = false) of a single-channel map.
inline SaliencyMap resize_bilinear(const SaliencyMap& m, int out_h, int out_w) {
  auto taps = [](int in, int out) {
    std::vector<std::tuple<int, int, double>> t(out);
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      double src = std::max(0.0, (o + 0.5) * scale - 0.5);
      int i0 = std::min(static_cast<int>(std::floor(src)), in - 1);
      t[o] = {i0, std::min(i0 + 1, in - 1), src - i0};
    }
    return t;
  };
  const auto ty = taps(m.height(), out_h);
  const auto tx = taps(m.width(), out_w);
  SaliencyMap out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const auto [y0, y1, fy] = ty[y];
    for (int x = 0; x < out_w; ++x) {
      const auto [x0, x1, fx] = tx[x];
      const double top = (1 - fx) * m.at(y0, x0) + fx * m.at(y0, x1);
      const double bot = (1 - fx) * m.at(y1, x0) + fx * m.at(y1, x1);
      out.at(y, x) = (1 - fy) * top + fy * bot;
    }
  }
  return out;
}

}  // namespace sal3sd::imgproc
