#pragma once

// MAE, F-beta and precision-recall evaluation against binary masks.
//
// A prediction is binarized at threshold t as (pred > t), with t_i = i / 256
// for i = 0..255.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sal3sd/error.hpp"
#include "sal3sd/tensor.hpp"

namespace sal3sd {

inline constexpr int kThresholds = 256;

inline double threshold_at(int i) { return static_cast<double>(i) / kThresholds; }

struct Confusion {
  double tp = 0, fp = 0, fn = 0, tn = 0;
  Confusion& operator+=(const Confusion& o) {
    tp += o.tp, fp += o.fp, fn += o.fn, tn += o.tn;
    return *this;
  }
};

using ConfusionCurve = std::array<Confusion, kThresholds>;

struct PrPoint {
  double threshold, precision, recall;
};

namespace detail {

inline void check_pair(const SaliencyMap& pred, const SaliencyMap& gt, const char* what) { require_same_size(pred, gt, what); }

/// Counts at every threshold in one pass: each pixel lands in a bucket by the
/// number of thresholds it exceeds.
inline ConfusionCurve confusion_curve(const SaliencyMap& pred, const SaliencyMap& gt) {
  check_pair(pred, gt, "confusion_curve");
  // bucket b holds pixels whose prediction exceeds exactly thresholds 0..b-1
  std::array<double, kThresholds + 1> pos{}, neg{};
  double npos = 0, nneg = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    int above = 0;
    const double p = pred[i];
    if (p > 0.0) above = std::min(kThresholds, static_cast<int>(std::ceil(p * kThresholds)));
    (gt[i] >= 0.5 ? pos : neg)[above] += 1;
    (gt[i] >= 0.5 ? npos : nneg) += 1;
  }
  ConfusionCurve out{};
  double tp = 0, fp = 0;  // cumulative from the top bucket down
  for (int j = kThresholds; j >= 1; --j) {
    tp += pos[j];
    fp += neg[j];
    out[j - 1] = {tp, fp, npos - tp, nneg - fp};
  }
  return out;
}

}  // namespace detail

/// F-beta from counts; a threshold with no positives predicted or present scores 1.
inline double f_from_counts(const Confusion& c, double beta2) {
  if (c.tp + c.fp + c.fn == 0) return 1.0;
  if (c.tp == 0) return 0.0;
  return (1.0 + beta2) * c.tp / ((1.0 + beta2) * c.tp + beta2 * c.fn + c.fp);
}

inline double mae(const SaliencyMap& pred, const SaliencyMap& gt) {
  detail::check_pair(pred, gt, "mae");
  if (pred.size() == 0) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - gt[i]);
  return s / static_cast<double>(pred.size());
}

/// Mean over the 256 thresholds of the per-threshold F-beta.
inline double f_beta(const SaliencyMap& pred, const SaliencyMap& gt, double beta2 = 0.3) {
  const auto curve = detail::confusion_curve(pred, gt);
  double s = 0;
  for (const auto& c : curve) s += f_from_counts(c, beta2);
  return s / kThresholds;
}

/// F-beta at a single threshold (pred > thr).
inline double f_beta_at(const SaliencyMap& pred, const SaliencyMap& gt, double thr, double beta2 = 0.3) {
  detail::check_pair(pred, gt, "f_beta_at");
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > thr, g = gt[i] >= 0.5;
    c.tp += p && g, c.fp += p && !g, c.fn += !p && g, c.tn += !p && !g;
  }
  return f_from_counts(c, beta2);
}

/// Intersection over union of (pred >= thr) and the mask; two empty sets give 1.
inline double iou(const SaliencyMap& pred, const SaliencyMap& gt, double thr = 0.5) {
  detail::check_pair(pred, gt, "iou");
  double inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= thr, g = gt[i] >= 0.5;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 1.0 : inter / uni;
}

inline ConfusionCurve corpus_confusion(const std::vector<SaliencyMap>& preds, const std::vector<SaliencyMap>& gts) {
  if (preds.size() != gts.size()) throw ShapeError("prediction and mask lists differ in length");
  ConfusionCurve total{};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto c = detail::confusion_curve(preds[i], gts[i]);
    for (int j = 0; j < kThresholds; ++j) total[j] += c[j];
  }
  return total;
}

/// Corpus-aggregated precision/recall per threshold. Precision with nothing
/// predicted is 1; recall with an empty ground truth is 1.
inline std::vector<PrPoint> pr_curve(const ConfusionCurve& curve) {
  std::vector<PrPoint> out;
  for (int j = 0; j < kThresholds; ++j) {
    const auto& c = curve[j];
    const double p = c.tp + c.fp > 0 ? c.tp / (c.tp + c.fp) : 1.0;
    const double r = c.tp + c.fn > 0 ? c.tp / (c.tp + c.fn) : 1.0;
    out.push_back({threshold_at(j), p, r});
  }
  return out;
}

inline std::vector<PrPoint> pr_curve(const std::vector<SaliencyMap>& preds, const std::vector<SaliencyMap>& gts) {
  return pr_curve(corpus_confusion(preds, gts));
}

struct ImageMetrics {
  std::string id;
  double mae = 0, f_beta = 0, iou = 0;
};

struct MetricsReport {
  std::vector<ImageMetrics> images;
  double mean_mae = 0, mean_f_beta = 0, mean_iou = 0;
  double corpus_f_beta = 0;  // mean F over the aggregated curve
  double beta2 = 0.3;
  std::vector<PrPoint> pr;
};

/// `fixed_threshold` < 0 selects the mean over thresholds.
inline MetricsReport evaluate(const std::vector<std::string>& ids, const std::vector<SaliencyMap>& preds,
                              const std::vector<SaliencyMap>& gts, double beta2 = 0.3, double fixed_threshold = -1.0) {
  if (ids.size() != preds.size() || preds.size() != gts.size()) throw ShapeError("evaluate: list lengths differ");
  MetricsReport r;
  r.beta2 = beta2;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ImageMetrics m{ids[i], mae(preds[i], gts[i]),
                   fixed_threshold < 0 ? f_beta(preds[i], gts[i], beta2) : f_beta_at(preds[i], gts[i], fixed_threshold, beta2),
                   iou(preds[i], gts[i])};
    r.mean_mae += m.mae;
    r.mean_f_beta += m.f_beta;
    r.mean_iou += m.iou;
    r.images.push_back(std::move(m));
  }
  if (!preds.empty()) {
    const double n = static_cast<double>(preds.size());
    r.mean_mae /= n, r.mean_f_beta /= n, r.mean_iou /= n;
  }
  const auto curve = corpus_confusion(preds, gts);
  if (fixed_threshold < 0) {
    for (const auto& c : curve) r.corpus_f_beta += f_from_counts(c, beta2);
    r.corpus_f_beta /= kThresholds;
  } else {
    r.corpus_f_beta = r.mean_f_beta;
  }
  r.pr = pr_curve(curve);
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["beta2"] = r.beta2;
  j["mean"] = {{"mae", r.mean_mae}, {"f_beta", r.mean_f_beta}, {"iou", r.mean_iou}, {"corpus_f_beta", r.corpus_f_beta}};
  j["images"] = nlohmann::json::array();
  for (const auto& m : r.images) j["images"].push_back({{"id", m.id}, {"mae", m.mae}, {"f_beta", m.f_beta}, {"iou", m.iou}});
  return j;
}

inline void write_metrics(const std::filesystem::path& dir, const MetricsReport& r) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "metrics.json");
    if (!os) throw IoError("cannot write " + (dir / "metrics.json").string());
    os << to_json(r).dump(2) << "\n";
  }
  std::ofstream csv(dir / "pr_curve.csv");
  if (!csv) throw IoError("cannot write " + (dir / "pr_curve.csv").string());
  csv << "threshold,precision,recall\n";
  csv.precision(17);
  for (const auto& p : r.pr) csv << p.threshold << "," << p.precision << "," << p.recall << "\n";
}

}  // namespace sal3sd
