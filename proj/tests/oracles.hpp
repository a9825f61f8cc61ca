#pragma once

// Reference implementations used by the tests. Each one is written from the
// definition, as plainly as possible, and shares no code with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

namespace oracle {

using Grid = std::vector<std::vector<double>>;  // [row][col]

inline Grid grid(int h, int w, double v = 0.0) { return Grid(h, std::vector<double>(w, v)); }

// --- random inputs ---------------------------------------------------------

struct Random {
  explicit Random(std::uint64_t seed) : gen(seed) {}
  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(gen); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(gen); }
  std::mt19937_64 gen;
};

// --- distillation ----------------------------------------------------------

inline std::vector<double> softmax(const std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - mx);
  for (double& v : p) v /= s;
  return p;
}

/// -sum target_k log max(pred_k, 1e-12)
inline double cross_entropy(const std::vector<double>& target_logits, const std::vector<double>& pred_logits) {
  const auto t = softmax(target_logits), p = softmax(pred_logits);
  double l = 0;
  for (std::size_t i = 0; i < t.size(); ++i) l -= t[i] * std::log(std::max(p[i], 1e-12));
  return l;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i], na += a[i] * a[i], nb += b[i] * b[i];
  return d / (std::max(std::sqrt(na), 1e-12) * std::max(std::sqrt(nb), 1e-12));
}

/// Full sort of (score desc, index asc); returns (top m, bottom m).
inline std::pair<std::vector<int>, std::vector<int>> mine(const std::vector<std::vector<double>>& cells,
                                                          const std::vector<double>& c, int m) {
  std::vector<std::pair<double, int>> s;
  for (int i = 0; i < static_cast<int>(cells.size()); ++i) s.emplace_back(cosine(cells[i], c), i);
  std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<int> pos, neg;
  for (int i = 0; i < m; ++i) pos.push_back(s[i].second);
  for (int i = static_cast<int>(s.size()) - m; i < static_cast<int>(s.size()); ++i) neg.push_back(s[i].second);
  return {pos, neg};
}

/// Contrastive loss written directly from its definition: anchors are student
/// positives, numerator uses teacher positives, denominator the teacher rows
/// at both negative index sets.
inline double rho(const std::vector<std::vector<double>>& cs, const std::vector<std::vector<double>>& ct,
                  const std::vector<int>& ps, const std::vector<int>& ns, const std::vector<int>& pt,
                  const std::vector<int>& nt, double tau) {
  double total = 0;
  for (int a : ps)
    for (int p : pt) {
      double den = 0;
      for (int n : nt) den += std::exp(cosine(cs[a], ct[n]) / tau);
      for (int n : ns) den += std::exp(cosine(cs[a], ct[n]) / tau);
      total += -std::log(std::exp(cosine(cs[a], ct[p]) / tau) / den);
    }
  return total / (static_cast<double>(ps.size()) * pt.size());
}

// --- image operators -------------------------------------------------------

/// Max over the clipped (2r+1)^2 window.
inline Grid dilate(const Grid& m, int r) {
  const int h = static_cast<int>(m.size()), w = static_cast<int>(m[0].size());
  Grid out = grid(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w) out[y][x] = std::max(out[y][x], m[yy][xx]);
        }
  return out;
}

/// Sobel magnitude by explicit 3x3 correlation on a replicate-padded copy.
inline Grid sobel(const Grid& g) {
  static const int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static const int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  const int h = static_cast<int>(g.size()), w = static_cast<int>(g[0].size());
  Grid pad = grid(h + 2, w + 2);
  for (int y = 0; y < h + 2; ++y)
    for (int x = 0; x < w + 2; ++x) pad[y][x] = g[std::clamp(y - 1, 0, h - 1)][std::clamp(x - 1, 0, w - 1)];
  Grid out = grid(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double gx = 0, gy = 0;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) gx += kx[i][j] * pad[y + i][x + j], gy += ky[i][j] * pad[y + i][x + j];
      out[y][x] = std::sqrt(gx * gx + gy * gy);
    }
  return out;
}

/// Half-pixel-centre bilinear resize with edge clamping.
inline Grid bilinear(const Grid& m, int oh, int ow) {
  const int h = static_cast<int>(m.size()), w = static_cast<int>(m[0].size());
  auto at = [&](int y, int x) { return m[std::clamp(y, 0, h - 1)][std::clamp(x, 0, w - 1)]; };
  Grid out = grid(oh, ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const double sy = std::max(0.0, (y + 0.5) * h / oh - 0.5), sx = std::max(0.0, (x + 0.5) * w / ow - 0.5);
      const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
      const double fy = sy - y0, fx = sx - x0;
      out[y][x] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                  fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
    }
  return out;
}

// --- losses ----------------------------------------------------------------

inline double bce(const std::vector<double>& t, const std::vector<double>& s) {
  double l = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double p = std::min(std::max(s[i], 1e-6), 1 - 1e-6);
    l += -(t[i] * std::log(p) + (1 - t[i]) * std::log(1 - p));
  }
  return l;
}

/// Structure loss on a gray image: both forward-difference directions.
inline double gs(const Grid& s, const Grid& gray, const Grid& gate, double c = 1e-6) {
  const int h = static_cast<int>(s.size()), w = static_cast<int>(s[0].size());
  auto gx = [&](int y, int x) { return gate[y][x] * gray[y][x]; };
  double l = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (x + 1 < w) {
        const double v = std::abs(s[y][x + 1] - s[y][x]) * std::exp(-0.5 * std::abs(gx(y, x + 1) - gx(y, x)));
        l += std::sqrt(v * v + c);
      }
      if (y + 1 < h) {
        const double v = std::abs(s[y + 1][x] - s[y][x]) * std::exp(-0.5 * std::abs(gx(y + 1, x) - gx(y, x)));
        l += std::sqrt(v * v + c);
      }
    }
  return l;
}

// --- metrics ---------------------------------------------------------------

inline double mae(const std::vector<double>& p, const std::vector<double>& g) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - g[i]);
  return s / static_cast<double>(p.size());
}

struct Counts {
  double tp = 0, fp = 0, fn = 0;
};

/// Binarization pred > t; gt >= 0.5 is foreground.
inline Counts counts(const std::vector<double>& p, const std::vector<double>& g, double t) {
  Counts c;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool a = p[i] > t, b = g[i] >= 0.5;
    if (a && b) c.tp += 1;
    if (a && !b) c.fp += 1;
    if (!a && b) c.fn += 1;
  }
  return c;
}

inline double f_measure(const Counts& c, double beta2) {
  if (c.tp + c.fp + c.fn == 0) return 1.0;
  const double prec = c.tp + c.fp > 0 ? c.tp / (c.tp + c.fp) : 0.0;
  const double rec = c.tp + c.fn > 0 ? c.tp / (c.tp + c.fn) : 0.0;
  if (prec + rec == 0) return 0.0;
  return (1 + beta2) * prec * rec / (beta2 * prec + rec);
}

inline double f_beta(const std::vector<double>& p, const std::vector<double>& g, double beta2) {
  double s = 0;
  for (int i = 0; i < 256; ++i) s += f_measure(counts(p, g, i / 256.0), beta2);
  return s / 256.0;
}

// --- finite differences ----------------------------------------------------

/// Central difference of f with respect to *x.
inline double central_difference(const std::function<double()>& f, double* x, double h = 1e-6) {
  const double x0 = *x;
  *x = x0 + h;
  const double up = f();
  *x = x0 - h;
  const double down = f();
  *x = x0;
  return (up - down) / (2 * h);
}

/// |a - n| / max(|a|, |n|), with absolute agreement below `floor` accepted.
inline bool grad_close(double analytic, double numeric, double rel = 1e-4, double floor = 1e-7) {
  const double diff = std::abs(analytic - numeric);
  if (diff <= floor) return true;
  return diff <= rel * std::max(std::abs(analytic), std::abs(numeric));
}

}  // namespace oracle
