#pragma once

// Student-teacher self-distillation on patch-wise class logits:
// augmented views, image-level distillation loss, patch mining, the
// patch contrastive loss and the EMA updates of teacher weights and center.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

#include "sal3sd/imgproc.hpp"
#include "sal3sd/model.hpp"
#include "sal3sd/rng.hpp"

namespace sal3sd {

/// Per-patch logits, one K-vector per grid cell in row-major order.
struct ClassLogitsMap {
  int grid_h = 0;
  int grid_w = 0;
  Tensor logits;  // {grid_h * grid_w, K}

  int cells() const { return grid_h * grid_w; }
  int classes() const { return logits.rank() == 2 ? logits.dim(1) : 0; }
  const double* cell(int i) const { return logits.data() + static_cast<std::size_t>(i) * classes(); }

  static ClassLogitsMap from(const ClassHead& h) { return {h.grid_h, h.grid_w, h.logits.value()}; }
};

/// Sum over grid cells; a K-vector.
using ImageLogits = Tensor;

struct TeacherCenter {
  Tensor center;  // {K}
  static TeacherCenter zeros(int k) { return {Tensor({k}, 0.0)}; }
};

struct PatchSelection {
  std::vector<int> positives;  // best-first
  std::vector<int> negatives;  // in descending score order, i.e. the worst is last
};

struct EmaSchedule {
  double lambda_start = 0.996;
  double lambda_end = 1.0;
  long total_steps = 1;
};

struct ViewPair {
  Image local_view;
  Image global_view;
};

enum class StOrder { TeacherTarget, Literal };
enum class CenterSign { Add, Subtract };
enum class RhoDenominator { NegativesOnly, WithPositive };
/// Which map supplies the vectors for the student negatives N^s: the teacher
/// map at those grid indices (as written) or the student map itself.
enum class RhoNegatives { TeacherMap, OwnMaps };

struct AugmentConfig {
  int global_size = 64;
  int local_size = 32;
  double global_scale_min = 0.4, global_scale_max = 1.0;
  double local_scale_min = 0.05, local_scale_max = 0.4;
  double jitter_prob = 0.8;
  double brightness = 0.4, contrast = 0.4, saturation = 0.2;
  double blur_prob = 0.5;
  double blur_sigma_min = 0.1, blur_sigma_max = 1.5;
  double solarize_prob = 0.2;

  void validate() const {
    auto scale_ok = [](double lo, double hi) { return lo > 0.0 && lo <= hi && hi <= 1.0; };
    if (!scale_ok(global_scale_min, global_scale_max) || !scale_ok(local_scale_min, local_scale_max)) {
      throw ConfigError("augment: crop scale ranges must satisfy 0 < min <= max <= 1 (crop cannot exceed the image)");
    }
    if (global_size <= 0 || local_size <= 0) throw ConfigError("augment: view sizes must be positive");
    if (local_size >= global_size) throw ConfigError("augment: local view must be smaller than the global view");
    for (double p : {jitter_prob, blur_prob, solarize_prob}) {
      if (p < 0.0 || p > 1.0) throw ConfigError("augment: probabilities must lie in [0,1]");
    }
  }
};

namespace detail {

inline void color_jitter(Image& img, Rng& rng, const AugmentConfig& cfg) {
  const double b = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness);
  const double c = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast);
  const double s = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation);
  for (double& v : img.tensor().values()) v = std::clamp(v * b, 0.0, 1.0);
  double mean = 0;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) mean += img.luma(y, x);
  mean /= static_cast<double>(img.height()) * img.width();
  for (double& v : img.tensor().values()) v = std::clamp((v - mean) * c + mean, 0.0, 1.0);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const double g = img.luma(y, x);
      for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = std::clamp(g + (img.at(ch, y, x) - g) * s, 0.0, 1.0);
    }
}

inline Image make_view(const Image& x, Rng& rng, int size, double scale_min, double scale_max,
                       const AugmentConfig& cfg) {
  const int side_max = std::min(x.height(), x.width());
  const double scale = rng.uniform(scale_min, scale_max);
  const int side = std::clamp(static_cast<int>(std::lround(std::sqrt(scale) * side_max)), 1, side_max);
  const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(x.height() - side + 1)));
  const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(x.width() - side + 1)));
  Image v = imgproc::crop_resize_bicubic(x, y0, x0, side, side, size, size);
  imgproc::clamp01(v);
  // Draw every decision so the stream layout does not depend on the probabilities.
  const bool jitter = rng.bernoulli(cfg.jitter_prob);
  const bool blur = rng.bernoulli(cfg.blur_prob);
  const bool solarize = rng.bernoulli(cfg.solarize_prob);
  const double sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max);
  if (jitter) color_jitter(v, rng, cfg);
  if (blur) v = imgproc::gaussian_blur(v, sigma);
  if (solarize) {
    for (double& p : v.tensor().values()) p = p >= 0.5 ? 1.0 - p : p;
  }
  imgproc::clamp01(v);
  return v;
}

}  // namespace detail

/// Two independently augmented square crops, resized bicubically. Pure in (x, seed, cfg).
inline ViewPair augment_views(const Image& x, std::uint64_t seed, const AugmentConfig& cfg) {
  cfg.validate();
  Rng global_rng(derive_seed(seed, {1}));
  Rng local_rng(derive_seed(seed, {2}));
  ViewPair v;
  v.global_view = detail::make_view(x, global_rng, cfg.global_size, cfg.global_scale_min, cfg.global_scale_max, cfg);
  v.local_view = detail::make_view(x, local_rng, cfg.local_size, cfg.local_scale_min, cfg.local_scale_max, cfg);
  return v;
}

inline ImageLogits image_logits(const ClassLogitsMap& c) {
  Tensor out({c.classes()}, 0.0);
  for (int i = 0; i < c.cells(); ++i) {
    const double* row = c.cell(i);
    for (int k = 0; k < c.classes(); ++k) out[k] += row[k];
  }
  return out;
}

inline ClassLogitsMap center_teacher(const ClassLogitsMap& ct, const TeacherCenter& tc,
                                     CenterSign sign = CenterSign::Add) {
  if (tc.center.size() != static_cast<std::size_t>(ct.classes())) {
    throw ShapeError("center_teacher: center has " + std::to_string(tc.center.size()) + " entries for K=" +
                     std::to_string(ct.classes()));
  }
  ClassLogitsMap out = ct;
  const double s = sign == CenterSign::Add ? 1.0 : -1.0;
  const int k = ct.classes();
  for (int i = 0; i < ct.cells(); ++i)
    for (int j = 0; j < k; ++j) out.logits.at(i, j) += s * tc.center[j];
  return out;
}

namespace detail {

inline std::vector<double> log_softmax(const double* c, int k) {
  double mx = c[0];
  for (int i = 1; i < k; ++i) mx = std::max(mx, c[i]);
  double s = 0;
  for (int i = 0; i < k; ++i) s += std::exp(c[i] - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(k);
  for (int i = 0; i < k; ++i) out[i] = c[i] - lse;
  return out;
}

inline void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw DivergenceError(what, std::string(what) + ": non-finite input");
}

/// Value and gradient w.r.t. the student logits of the image-level distillation loss.
inline double st_value_grad(const Tensor& cs, const Tensor& ct, StOrder order, std::vector<double>* grad) {
  const int k = static_cast<int>(cs.size());
  constexpr double kFloor = 1e-12;
  const double log_floor = std::log(kFloor);
  const auto lps = log_softmax(cs.data(), k);
  const auto lpt = log_softmax(ct.data(), k);
  double loss = 0;
  if (grad) grad->assign(k, 0.0);
  if (order == StOrder::TeacherTarget) {
    // -sum_k q_k log max(p_k, floor), q = P(c_t) constant
    double mass = 0;  // teacher mass on unclamped classes
    for (int i = 0; i < k; ++i) {
      const double q = std::exp(lpt[i]);
      const bool live = lps[i] >= log_floor;
      loss -= q * (live ? lps[i] : log_floor);
      if (live) mass += q;
    }
    if (grad) {
      for (int i = 0; i < k; ++i) {
        const double q = std::exp(lpt[i]);
        (*grad)[i] = std::exp(lps[i]) * mass - (lps[i] >= log_floor ? q : 0.0);
      }
    }
  } else {
    // -sum_k p_k log max(q_k, floor), p = P(c_s) carries the gradient
    std::vector<double> lq(k);
    double expect = 0;
    for (int i = 0; i < k; ++i) {
      lq[i] = std::max(lpt[i], log_floor);
      const double p = std::exp(lps[i]);
      loss -= p * lq[i];
      expect += p * lq[i];
    }
    if (grad) {
      for (int i = 0; i < k; ++i) (*grad)[i] = -std::exp(lps[i]) * (lq[i] - expect);
    }
  }
  return loss;
}

}  // namespace detail

/// Cross-entropy between softmax(c_s) and softmax(c_t). c_t is a constant (stop-gradient).
inline Var loss_st(const Var& cs, const Tensor& ct, StOrder order = StOrder::TeacherTarget) {
  if (cs.value().size() != ct.size() || cs.value().empty()) throw ShapeError("loss_st: logit sizes differ");
  detail::require_finite(cs.value(), "l_st");
  detail::require_finite(ct, "l_st");
  std::vector<double> g;
  const double v = detail::st_value_grad(cs.value(), ct, order, cs.requires_grad() ? &g : nullptr);
  return make_op(Tensor({1}, v), {cs}, [g = std::move(g)](Node& self) {
    Tensor& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += self.grad[0] * g[i];
  });
}

inline double loss_st(const Tensor& cs, const Tensor& ct, StOrder order = StOrder::TeacherTarget) {
  return loss_st(constant(cs), ct, order).value()[0];
}

namespace detail {

inline constexpr double kNormFloor = 1e-12;

inline double norm(const double* a, int k) {
  double s = 0;
  for (int i = 0; i < k; ++i) s += a[i] * a[i];
  return std::sqrt(s);
}

inline double cosine(const double* a, const double* b, int k) {
  double dot = 0;
  for (int i = 0; i < k; ++i) dot += a[i] * b[i];
  return dot / (std::max(norm(a, k), kNormFloor) * std::max(norm(b, k), kNormFloor));
}

/// d cos(a, b) / d a, scaled by `s` and accumulated into `out`.
inline void cosine_grad_add(const double* a, const double* b, int k, double s, double* out) {
  const double na = norm(a, k), nb = norm(b, k);
  const double fa = std::max(na, kNormFloor), fb = std::max(nb, kNormFloor);
  const double c = cosine(a, b, k);
  const bool floored = na < kNormFloor;
  for (int i = 0; i < k; ++i) {
    double g = b[i] / (fa * fb);
    if (!floored) g -= c * a[i] / (fa * fa);
    out[i] += s * g;
  }
}

}  // namespace detail

/// Ranks grid cells by cosine similarity to the image logits. Ties go to the
/// lower row-major index. Positives are the top `m`, negatives the bottom `m`.
inline PatchSelection mine_patches(const ClassLogitsMap& c, const ImageLogits& img, int m) {
  const int g = c.cells(), k = c.classes();
  if (img.size() != static_cast<std::size_t>(k)) throw ShapeError("mine_patches: image logits size mismatch");
  if (m < 1 || 2 * m > g) {
    throw ConfigError("mine_patches: M=" + std::to_string(m) + " needs 1 <= M <= cells/2 (cells=" + std::to_string(g) + ")");
  }
  if (detail::norm(img.data(), k) < detail::kNormFloor) throw DegenerateLogitsError("mine_patches: image logits are ~0");
  std::vector<double> score(g);
  for (int i = 0; i < g; ++i) score[i] = detail::cosine(c.cell(i), img.data(), k);
  std::vector<int> order(g);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return score[a] > score[b]; });
  PatchSelection sel;
  sel.positives.assign(order.begin(), order.begin() + m);
  sel.negatives.assign(order.end() - m, order.end());
  return sel;
}

/// Patch contrastive loss. For every (student positive, teacher positive) pair:
///   -log exp(sim(a, p)/tau) / sum_n exp(sim(a, C(n))/tau)
/// with n over N^t and N^s. By default C is the teacher map for both sets.
/// Averaged over the |P_s| * |P_t| pairs. Gradient reaches c_s only.
inline Var loss_rho(const Var& cs, const Tensor& ct, const PatchSelection& sel_s, const PatchSelection& sel_t,
                    double tau, RhoDenominator denom = RhoDenominator::NegativesOnly,
                    RhoNegatives source = RhoNegatives::TeacherMap) {
  if (!(tau > 0.0)) throw ConfigError("loss_rho: temperature must be > 0");
  const Tensor& s = cs.value();
  if (s.rank() != 2 || ct.rank() != 2 || s.dim(1) != ct.dim(1)) throw ShapeError("loss_rho: logit maps must be {G,K} with equal K");
  if (sel_s.positives.empty() || sel_t.positives.empty()) throw ConfigError("loss_rho: empty positive set");
  detail::require_finite(s, "l_rho");
  detail::require_finite(ct, "l_rho");
  const int k = s.dim(1);
  auto row_s = [&](int i) { return s.data() + static_cast<std::size_t>(i) * k; };
  auto row_t = [&](int i) { return ct.data() + static_cast<std::size_t>(i) * k; };
  for (int i : sel_s.positives) if (i < 0 || i >= s.dim(0)) throw ShapeError("loss_rho: student index out of range");
  const int neg_rows = source == RhoNegatives::TeacherMap ? ct.dim(0) : s.dim(0);
  for (int i : sel_s.negatives) if (i < 0 || i >= neg_rows) throw ShapeError("loss_rho: student negative index out of range");
  for (int i : sel_t.positives) if (i < 0 || i >= ct.dim(0)) throw ShapeError("loss_rho: teacher index out of range");
  for (int i : sel_t.negatives) if (i < 0 || i >= ct.dim(0)) throw ShapeError("loss_rho: teacher index out of range");

  // Denominator members: (is_student_row, index)
  std::vector<std::pair<bool, int>> negs;
  for (int i : sel_t.negatives) negs.emplace_back(false, i);
  for (int i : sel_s.negatives) negs.emplace_back(source == RhoNegatives::OwnMaps, i);

  const double inv_pairs = 1.0 / (static_cast<double>(sel_s.positives.size()) * sel_t.positives.size());
  const bool want_grad = cs.requires_grad();
  Tensor grad(want_grad ? s.shape() : Shape{0});
  double total = 0;
  std::vector<double> logits;
  for (int ps : sel_s.positives) {
    const double* a = row_s(ps);
    for (int pt : sel_t.positives) {
      const double* pos = row_t(pt);
      const double pos_logit = detail::cosine(a, pos, k) / tau;
      logits.clear();
      for (auto [student, i] : negs) logits.push_back(detail::cosine(a, student ? row_s(i) : row_t(i), k) / tau);
      if (denom == RhoDenominator::WithPositive) logits.push_back(pos_logit);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0;
      for (double l : logits) z += std::exp(l - mx);
      const double lse = mx + std::log(z);
      total += (lse - pos_logit) * inv_pairs;

      if (!want_grad) continue;
      double* ga = grad.data() + static_cast<std::size_t>(ps) * k;
      const double base = inv_pairs / tau;
      detail::cosine_grad_add(a, pos, k, -base, ga);
      for (std::size_t j = 0; j < negs.size(); ++j) {
        const double w = std::exp(logits[j] - lse) * base;
        const auto [student, i] = negs[j];
        const double* v = student ? row_s(i) : row_t(i);
        detail::cosine_grad_add(a, v, k, w, ga);
        if (student) detail::cosine_grad_add(v, a, k, w, grad.data() + static_cast<std::size_t>(i) * k);
      }
      if (denom == RhoDenominator::WithPositive) {
        const double w = std::exp(logits.back() - lse) * base;
        detail::cosine_grad_add(a, pos, k, w, ga);
      }
    }
  }
  return make_op(Tensor({1}, total), {cs}, [grad = std::move(grad)](Node& self) {
    Tensor& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[0] * grad[i];
  });
}

inline double loss_rho(const ClassLogitsMap& cs, const ClassLogitsMap& ct, const PatchSelection& sel_s,
                       const PatchSelection& sel_t, double tau, RhoDenominator denom = RhoDenominator::NegativesOnly,
                       RhoNegatives source = RhoNegatives::TeacherMap) {
  return loss_rho(constant(cs.logits), ct.logits, sel_s, sel_t, tau, denom, source).value()[0];
}

/// Cosine ramp from lambda_start (step 0) to lambda_end (step T).
inline double lambda_at(long step, const EmaSchedule& s) {
  if (s.total_steps <= 0) throw ConfigError("ema schedule: total_steps must be positive");
  if (!(0.0 < s.lambda_start && s.lambda_start <= s.lambda_end && s.lambda_end <= 1.0)) {
    throw ConfigError("ema schedule: need 0 < lambda_start <= lambda_end <= 1");
  }
  if (step < 0 || step > s.total_steps) {
    throw std::out_of_range("lambda_at: step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + "]");
  }
  const double t = static_cast<double>(step) / static_cast<double>(s.total_steps);
  return s.lambda_end - (s.lambda_end - s.lambda_start) * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

/// teacher <- lambda * teacher + (1 - lambda) * student, in place.
inline void ema_update(ModelState& teacher, const ModelState& student, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("ema_update: lambda must lie in [0,1]");
  if (!teacher.aligned_with(student)) throw ShapeError("ema_update: teacher and student parameters are not aligned");
  auto s = student.params.begin();
  for (auto& [name, t] : teacher.params) {
    const Tensor& sv = (s++)->second;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = lambda * t[i] + (1.0 - lambda) * sv[i];
  }
}

inline TeacherCenter ema_center(const TeacherCenter& tc, const Tensor& batch_center, double lambda) {
  if (tc.center.size() != batch_center.size()) throw ShapeError("ema_center: dimension mismatch");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("ema_center: lambda must lie in [0,1]");
  TeacherCenter out = tc;
  for (std::size_t i = 0; i < out.center.size(); ++i) {
    out.center[i] = lambda * tc.center[i] + (1.0 - lambda) * batch_center[i];
  }
  return out;
}

/// Mean over a batch of teacher maps and over their grid cells of the raw logits.
inline Tensor batch_center(const std::vector<ClassLogitsMap>& raw_teacher) {
  if (raw_teacher.empty()) throw ShapeError("batch_center: empty batch");
  const int k = raw_teacher.front().classes();
  Tensor c({k}, 0.0);
  std::size_t n = 0;
  for (const auto& m : raw_teacher) {
    if (m.classes() != k) throw ShapeError("batch_center: K differs across the batch");
    for (int i = 0; i < m.cells(); ++i, ++n)
      for (int j = 0; j < k; ++j) c[j] += m.cell(i)[j];
  }
  for (double& v : c.values()) v /= static_cast<double>(n);
  return c;
}

}  // namespace sal3sd
