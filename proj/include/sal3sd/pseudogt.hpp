#pragma once

// Pseudo-label generation (CAM, gate, gated edges, fusion) and the two
// saliency losses plus the total objective.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

#include "sal3sd/imageio.hpp"
#include "sal3sd/imgproc.hpp"
#include "sal3sd/model.hpp"
#include "sal3sd/selfsup.hpp"

namespace sal3sd {

using CamMap = SaliencyMap;
using Gate = SaliencyMap;
using GatedEdge = SaliencyMap;

struct PseudoGT {
  SaliencyMap soft;
  SaliencyMap hard;
};

enum class PgtMode { Fused, CamOnly, EdgeOnly };
enum class PgtTarget { Hard, Soft };
enum class PsiConstant { Epsilon, ExpMinusSix };
enum class GsGradient { Gray, Channelwise };

inline double psi_constant(PsiConstant c) { return c == PsiConstant::Epsilon ? 1e-6 : std::exp(-6.0); }

/// Min-max normalization; maps with max - min < 1e-8 become all zeros.
inline CamMap normalize_cam(SaliencyMap m) {
  const auto [lo, hi] = std::minmax_element(m.tensor().values().begin(), m.tensor().values().end());
  const double mn = *lo, mx = *hi;
  if (!(mx - mn >= 1e-8)) {
    for (double& v : m.tensor().values()) v = 0.0;
    return m;
  }
  for (double& v : m.tensor().values()) v = (v - mn) / (mx - mn);
  return m;
}

/// CAM from final spatial features {C,h,w} and the class-k weights {C}:
/// weighted channel sum, bilinear upsampling to out_h x out_w, min-max normalization.
inline CamMap cam_from_features(const Tensor& features, const double* weights, int out_h, int out_w) {
  if (features.rank() != 3) throw ShapeError("cam: features must be CxHxW");
  const int c = features.dim(0), h = features.dim(1), w = features.dim(2);
  SaliencyMap low(h, w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) low.at(y, x) += weights[ch] * features.at(ch, y, x);
  return normalize_cam(imgproc::resize_bilinear(low, out_h, out_w));
}

/// CAM for k* = argmax of the image logits of an existing class head.
inline CamMap compute_cam(const ClassHead& head, const Params& p, int out_h, int out_w) {
  const ImageLogits c = image_logits(ClassLogitsMap::from(head));
  const int k = static_cast<int>(std::max_element(c.values().begin(), c.values().end()) - c.values().begin());
  const Tensor& w = p("cls.head.w").value();  // {K, C}
  return cam_from_features(head.features.value(), w.data() + static_cast<std::size_t>(k) * w.dim(1), out_h, out_w);
}

inline CamMap compute_cam(const Image& x, const ModelState& st, int patch = 0) {
  const Params p = Params::bind(st, false);
  ForwardOptions opt;
  opt.patch = patch;
  opt.saliency = false;
  const auto r = forward(constant(x.tensor()), p, opt);
  return compute_cam(r.classes, p, x.height(), x.width());
}

/// Sobel magnitude of the luma image, divided by its maximum.
inline SaliencyMap detect_edges(const Image& x) {
  SaliencyMap e = imgproc::sobel_magnitude(grayscale(x));
  const double mx = *std::max_element(e.tensor().values().begin(), e.tensor().values().end());
  if (mx < 1e-8) {
    for (double& v : e.tensor().values()) v = 0.0;
    return e;
  }
  for (double& v : e.tensor().values()) v /= mx;
  return e;
}

/// Edge source: gets the image and its id (file stem) and returns a map in [0,1].
using EdgeProvider = std::function<SaliencyMap(const Image&, const std::string&)>;

inline EdgeProvider sobel_edges() {
  return [](const Image& x, const std::string&) { return detect_edges(x); };
}

/// Reads `<dir>/<id>.png` (8-bit gray scaled by 1/255); it must match the image size.
inline EdgeProvider file_edges(const std::filesystem::path& dir) {
  return [dir](const Image& x, const std::string& id) {
    const auto path = dir / (id + ".png");
    if (!std::filesystem::is_regular_file(path)) throw IoError("missing edge file for '" + id + "': " + path.string());
    SaliencyMap e = read_gray(path);
    if (e.height() != x.height() || e.width() != x.width()) {
      throw IoError("edge file size mismatch for '" + id + "': " + path.string());
    }
    return e;
  };
}

/// Default radius 3 at 64 px, scaled with the shorter image side.
inline int gate_radius(int side, int radius_at_64 = 3) {
  return static_cast<int>(std::lround(radius_at_64 * side / 64.0));
}

inline Gate make_gate(const CamMap& cm, double thr, int k) {
  if (!(thr > 0.0 && thr < 1.0)) throw ConfigError("make_gate: threshold must lie in (0,1)");
  if (k < 0) throw ConfigError("make_gate: radius must be >= 0");
  Gate g(cm.height(), cm.width());
  for (std::size_t i = 0; i < cm.size(); ++i) g[i] = cm[i] >= thr ? 1.0 : 0.0;
  return imgproc::dilate_square(g, k);
}

inline GatedEdge gate_edges(const SaliencyMap& e, const Gate& g, double edge_thr = 0.2) {
  require_same_size(e, g, "gate_edges");
  GatedEdge out(e.height(), e.width());
  for (std::size_t i = 0; i < e.size(); ++i) out[i] = (e[i] >= edge_thr ? 1.0 : 0.0) * g[i];
  return out;
}

inline PseudoGT fuse_pseudo_gt(const CamMap& cm, const GatedEdge& ge) {
  require_same_size(cm, ge, "fuse_pseudo_gt");
  PseudoGT p{SaliencyMap(cm.height(), cm.width()), SaliencyMap(cm.height(), cm.width())};
  for (std::size_t i = 0; i < cm.size(); ++i) {
    p.soft[i] = std::max(cm[i], ge[i]);
    p.hard[i] = p.soft[i] >= 0.5 ? 1.0 : 0.0;
  }
  return p;
}

struct PgtConfig {
  double cam_thr = 0.5;
  double edge_thr = 0.2;
  int dilate_radius = 3;  // at 64 px
  PgtMode mode = PgtMode::Fused;
};

/// Every intermediate of one pseudo-label construction.
struct PseudoLabel {
  CamMap cam;
  SaliencyMap edges;
  Gate gate;
  GatedEdge gated;
  PseudoGT pgt;
  bool degenerate_cam = false;
};

inline PseudoLabel build_pseudo_label(const CamMap& cam, const SaliencyMap& edges, const PgtConfig& cfg) {
  require_same_size(cam, edges, "pseudo label");
  PseudoLabel l;
  l.cam = cam;
  l.edges = edges;
  l.degenerate_cam = std::all_of(cam.tensor().values().begin(), cam.tensor().values().end(), [](double v) { return v == 0.0; });
  l.gate = make_gate(cam, cfg.cam_thr, gate_radius(std::min(cam.height(), cam.width()), cfg.dilate_radius));
  l.gated = gate_edges(edges, l.gate, cfg.edge_thr);
  const SaliencyMap zeros(cam.height(), cam.width());
  switch (cfg.mode) {
    case PgtMode::Fused: l.pgt = fuse_pseudo_gt(cam, l.gated); break;
    case PgtMode::CamOnly: l.pgt = fuse_pseudo_gt(cam, zeros); break;
    case PgtMode::EdgeOnly: l.pgt = fuse_pseudo_gt(zeros, l.gated); break;
  }
  return l;
}

namespace detail {

inline const SaliencyMap& pgt_target(const PseudoGT& t, PgtTarget which) {
  return which == PgtTarget::Hard ? t.hard : t.soft;
}

inline void check_prediction(const Var& s, int h, int w, const char* what) {
  const Shape& sh = s.shape();
  const bool ok = (sh.size() == 3 && sh[0] == 1 && sh[1] == h && sh[2] == w) || (sh.size() == 2 && sh[0] == h && sh[1] == w);
  if (!ok) throw ShapeError(std::string(what) + ": prediction " + shape_str(sh) + " vs target " + std::to_string(h) + "x" + std::to_string(w));
}

}  // namespace detail

/// Summed binary cross-entropy. The prediction is clamped to [1e-6, 1 - 1e-6];
/// the clamp passes no gradient where active.
inline Var loss_pgt(const PseudoGT& target, const Var& s_hat, PgtTarget which = PgtTarget::Hard) {
  const SaliencyMap& t = detail::pgt_target(target, which);
  detail::check_prediction(s_hat, t.height(), t.width(), "loss_pgt");
  detail::require_finite(s_hat.value(), "l_pgt");
  constexpr double eps = 1e-6;
  const Tensor& s = s_hat.value();
  double loss = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double p = std::clamp(s[i], eps, 1.0 - eps);
    loss -= t[i] * std::log(p) + (1.0 - t[i]) * std::log(1.0 - p);
  }
  return make_op(Tensor({1}, loss), {s_hat}, [t = t.tensor()](Node& self) {
    const Tensor& s = self.inputs[0]->value;
    Tensor& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] < eps || s[i] > 1.0 - eps) continue;
      d[i] += self.grad[0] * (-t[i] / s[i] + (1.0 - t[i]) / (1.0 - s[i]));
    }
  });
}

inline double loss_pgt(const PseudoGT& target, const SaliencyMap& s_hat, PgtTarget which = PgtTarget::Hard) {
  return loss_pgt(target, constant(s_hat.tensor()), which).value()[0];
}

/// Gated structure-aware loss:
///   sum over forward differences d of Psi(|d s| * exp(-0.5 |d (g x)|)),  Psi(v) = sqrt(v^2 + c).
/// With the channel-wise variant the gate term is the sum over RGB of |d (g x_c)|.
inline Var loss_gs(const Var& s_hat, const Image& x, const Gate& g, PsiConstant psi = PsiConstant::Epsilon,
                   GsGradient grad_mode = GsGradient::Gray) {
  const int h = g.height(), w = g.width();
  if (x.height() != h || x.width() != w) throw ShapeError("loss_gs: image and gate sizes differ");
  detail::check_prediction(s_hat, h, w, "loss_gs");
  detail::require_finite(s_hat.value(), "l_gs");
  const double c = psi_constant(psi);

  // Gated image planes.
  std::vector<SaliencyMap> planes;
  if (grad_mode == GsGradient::Gray) {
    planes.push_back(grayscale(x));
  } else {
    for (int ch = 0; ch < 3; ++ch) {
      SaliencyMap m(h, w);
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) m.at(y, xx) = x.at(ch, y, xx);
      planes.push_back(std::move(m));
    }
  }
  for (auto& m : planes)
    for (std::size_t i = 0; i < m.size(); ++i) m[i] *= g[i];
  auto weight = [&](int y0, int x0, int y1, int x1) {
    double d = 0;
    for (const auto& m : planes) d += std::abs(m.at(y1, x1) - m.at(y0, x0));
    return std::exp(-0.5 * d);
  };

  // Term list: (i0, i1, weight); derivative i1 - i0.
  struct Term { int i0, i1; double wgt; };
  std::vector<Term> terms;
  terms.reserve(static_cast<std::size_t>(h) * (w - 1) + static_cast<std::size_t>(h - 1) * w);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx + 1 < w; ++xx) terms.push_back({y * w + xx, y * w + xx + 1, weight(y, xx, y, xx + 1)});
  for (int y = 0; y + 1 < h; ++y)
    for (int xx = 0; xx < w; ++xx) terms.push_back({y * w + xx, (y + 1) * w + xx, weight(y, xx, y + 1, xx)});

  const Tensor& s = s_hat.value();
  double loss = 0;
  for (const auto& t : terms) {
    const double v = std::abs(s[t.i1] - s[t.i0]) * t.wgt;
    loss += std::sqrt(v * v + c);
  }
  return make_op(Tensor({1}, loss), {s_hat}, [terms = std::move(terms), c](Node& self) {
    const Tensor& s = self.inputs[0]->value;
    Tensor& d = self.inputs[0]->grad_buffer();
    for (const auto& t : terms) {
      // d/ds1 sqrt((w (s1 - s0))^2 + c) = w^2 (s1 - s0) / sqrt(...)
      const double diff = s[t.i1] - s[t.i0];
      const double v = diff * t.wgt;
      const double gv = self.grad[0] * t.wgt * t.wgt * diff / std::sqrt(v * v + c);
      d[t.i1] += gv;
      d[t.i0] -= gv;
    }
  });
}

inline double loss_gs(const SaliencyMap& s_hat, const Image& x, const Gate& g, PsiConstant psi = PsiConstant::Epsilon,
                      GsGradient grad_mode = GsGradient::Gray) {
  return loss_gs(constant(s_hat.tensor()), x, g, psi, grad_mode).value()[0];
}

struct LossParts {
  Var st, rho, pgt, gs;
};

/// L_st + L_rho + L_pgt + beta1 * L_gs. Undefined parts count as zero.
inline Var total_loss(const LossParts& parts, double beta1 = 0.3) {
  std::vector<Var> terms;
  std::vector<double> weights;
  const std::pair<const Var*, const char*> named[] = {{&parts.st, "l_st"}, {&parts.rho, "l_rho"}, {&parts.pgt, "l_pgt"}, {&parts.gs, "l_gs"}};
  for (const auto& [v, name] : named) {
    if (!v->defined()) continue;
    if (!v->value().all_finite()) throw DivergenceError(name, std::string("non-finite loss term ") + name);
    terms.push_back(*v);
    weights.push_back(v == &parts.gs ? beta1 : 1.0);
  }
  if (terms.empty()) return constant(Tensor({1}, 0.0));
  return ops::weighted_sum(terms, weights);
}

inline double total_loss(double st, double rho, double pgt, double gs, double beta1 = 0.3) {
  return total_loss({constant(Tensor({1}, st)), constant(Tensor({1}, rho)), constant(Tensor({1}, pgt)),
                     constant(Tensor({1}, gs))},
                    beta1)
      .value()[0];
}

}  // namespace sal3sd
