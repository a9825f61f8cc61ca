#pragma once

// Training loop: classification warmup, then per batch the distillation
// step, pseudo-label construction and the saliency step.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sal3sd/checkpoint.hpp"
#include "sal3sd/config.hpp"
#include "sal3sd/data.hpp"
#include "sal3sd/pseudogt.hpp"
#include "sal3sd/selfsup.hpp"

namespace sal3sd {

struct TrainState {
  ModelState student;
  ModelState teacher;
  TeacherCenter center;
  ParamMap velocity;  // empty unless momentum > 0
  long step = 0;      // optimizer steps taken on the classification schedule
  int epoch = 0;      // completed epochs
};

struct ReportRow {
  long step = 0;
  int epoch = 0;
  double l_st = 0, l_rho = 0, l_pgt = 0, l_gs = 0, l_total = 0, lambda = 0;
  bool joint = false;
  int degenerate_cams = 0;
  int skipped_rho = 0;
};

struct TrainReport {
  std::vector<ReportRow> rows;
  std::vector<std::filesystem::path> checkpoints;
};

inline constexpr const char* kReportHeader = "step,epoch,l_st,l_rho,l_pgt,l_gs,l_total,lambda";

inline std::string report_line(const ReportRow& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.step << "," << r.epoch << "," << r.l_st << "," << r.l_rho << "," << r.l_pgt << ","
     << r.l_gs << "," << r.l_total << "," << r.lambda;
  return os.str();
}

/// Student from the config seed; the teacher starts as an exact copy.
inline TrainState init_train_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.student = init_model(cfg.arch, derive_seed(cfg.seed, {0x73747564ULL}));
  s.teacher = s.student;
  s.center = TeacherCenter::zeros(cfg.arch.classes);
  return s;
}

inline long batches_per_epoch(const TrainConfig& cfg, std::size_t n) {
  return static_cast<long>((n + cfg.batch - 1) / cfg.batch);
}

inline EmaSchedule ema_schedule(const TrainConfig& cfg, std::size_t n) {
  return {cfg.ema_start, cfg.ema_end, std::max<long>(1, cfg.epochs * batches_per_epoch(cfg, n))};
}

/// Sample order for one epoch (Fisher-Yates under a derived seed).
inline std::vector<int> epoch_order(const TrainConfig& cfg, int epoch, std::size_t n) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(cfg.seed, {0x6f726465ULL, static_cast<std::uint64_t>(epoch)}));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

/// Plain SGD with optional momentum and weight decay.
inline void sgd_step(ModelState& st, const ParamMap& grads, ParamMap& velocity, const TrainConfig& cfg, double lr) {
  for (auto& [name, t] : st.params) {
    const Tensor& g = grads.at(name);
    if (cfg.momentum > 0) {
      auto [it, _] = velocity.try_emplace(name, Tensor(t.shape(), 0.0));
      Tensor& v = it->second;
      for (std::size_t i = 0; i < t.size(); ++i) {
        v[i] = cfg.momentum * v[i] + g[i] + cfg.weight_decay * t[i];
        t[i] -= lr * v[i];
      }
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] -= lr * (g[i] + cfg.weight_decay * t[i]);
    }
  }
}

/// The unaugmented training crop of sample `index` at (epoch, batch slot).
inline Image training_crop(const Image& img, const TrainConfig& cfg, int epoch, int index) {
  return random_crop(img, cfg.crop, derive_seed(cfg.seed, {0x63726f70ULL, static_cast<std::uint64_t>(epoch),
                                                            static_cast<std::uint64_t>(index)}),
                     cfg.view_grid);
}

struct ClassificationTerms {
  double l_st = 0, l_rho = 0;
  int skipped_rho = 0;
};

/// One distillation update over a batch of crops: L_st + L_rho on the student,
/// then the EMA updates of teacher weights and center.
inline ClassificationTerms classification_step(TrainState& s, const std::vector<Image>& crops,
                                               const std::vector<std::uint64_t>& view_seeds, const TrainConfig& cfg,
                                               double lambda) {
  const Params ps = Params::bind(s.student, true);
  const Params pt = Params::bind(s.teacher, false);
  const double inv_b = 1.0 / static_cast<double>(crops.size());
  ClassificationTerms out;
  std::vector<ClassLogitsMap> raw_teacher;
  for (std::size_t b = 0; b < crops.size(); ++b) {
    const ViewPair v = augment_views(crops[b], view_seeds[b], cfg.augment);
    ForwardOptions so;
    so.patch = cfg.patch_for(cfg.augment.local_size);
    so.saliency = false;
    ForwardOptions to = so;
    to.patch = cfg.patch_for(cfg.augment.global_size);
    const ClassHead hs = forward(constant(v.local_view.tensor()), ps, so).classes;
    const ClassHead ht = forward(constant(v.global_view.tensor()), pt, to).classes;
    raw_teacher.push_back(ClassLogitsMap::from(ht));
    const ClassLogitsMap ct = center_teacher(raw_teacher.back(), s.center, cfg.center_sign);
    const ImageLogits c_t = image_logits(ct);

    Var c_s = ops::sum_rows(hs.logits);
    Var l_st = loss_st(c_s, c_t, cfg.st_order);
    LossParts parts{l_st, {}, {}, {}};
    const ClassLogitsMap cs_map = ClassLogitsMap::from(hs);
    try {
      const PatchSelection sel_s = mine_patches(cs_map, c_s.value(), cfg.m_rho);
      const PatchSelection sel_t = mine_patches(ct, c_t, cfg.m_rho);
      parts.rho = loss_rho(hs.logits, ct.logits, sel_s, sel_t, cfg.tau, cfg.rho_denominator, cfg.rho_negatives);
    } catch (const DegenerateLogitsError&) {
      ++out.skipped_rho;
    }
    Var total = total_loss(parts, cfg.beta1);
    out.l_st += l_st.value()[0] * inv_b;
    if (parts.rho.defined()) out.l_rho += parts.rho.value()[0] * inv_b;
    backward(total, inv_b);
  }
  sgd_step(s.student, ps.gradients(), s.velocity, cfg, cfg.lr);
  ema_update(s.teacher, s.student, lambda);
  s.center = ema_center(s.center, batch_center(raw_teacher), lambda);
  return out;
}

/// Pseudo label of `x` under `st`: CAM on the class grid P = side / view_grid.
inline PseudoLabel pseudo_label(const ModelState& st, const Image& x, const SaliencyMap& edges, const TrainConfig& cfg) {
  const CamMap cam = compute_cam(x, st, cfg.patch_for(cfg.crop));
  return build_pseudo_label(cam, edges, cfg.pgt);
}

struct SaliencyTerms {
  double l_pgt = 0, l_gs = 0;
  int degenerate_cams = 0;
};

/// Pseudo labels from the current student, then one update on L_pgt + beta1 L_gs.
/// A single forward serves both: the CAM reads detached class features, the loss
/// back-propagates through the saliency branch only.
inline SaliencyTerms saliency_step(TrainState& s, const std::vector<Image>& crops, const std::vector<std::string>& ids,
                                   const TrainConfig& cfg, const EdgeProvider& edges) {
  const Params ps = Params::bind(s.student, true);
  const double inv_b = 1.0 / static_cast<double>(crops.size());
  SaliencyTerms out;
  for (std::size_t b = 0; b < crops.size(); ++b) {
    const Image& x = crops[b];
    ForwardOptions fo;
    fo.patch = cfg.patch_for(cfg.crop);
    const ForwardResult r = forward(constant(x.tensor()), ps, fo);
    const CamMap cam = compute_cam(r.classes, ps, x.height(), x.width());
    const PseudoLabel label = build_pseudo_label(cam, edges(x, ids[b]), cfg.pgt);
    if (label.degenerate_cam) ++out.degenerate_cams;
    LossParts parts;
    parts.pgt = loss_pgt(label.pgt, r.saliency, cfg.pgt_target);
    if (cfg.use_gs) parts.gs = loss_gs(r.saliency, x, label.gate, cfg.psi, cfg.gs_gradient);
    Var total = total_loss(parts, cfg.beta1);
    out.l_pgt += parts.pgt.value()[0] * inv_b;
    if (parts.gs.defined()) out.l_gs += parts.gs.value()[0] * inv_b;
    backward(total, inv_b);
  }
  sgd_step(s.student, ps.gradients(), s.velocity, cfg, cfg.saliency_lr > 0 ? cfg.saliency_lr : cfg.lr);
  return out;
}

namespace detail {

inline void check_row(const ReportRow& r) {
  const std::pair<double, const char*> terms[] = {{r.l_st, "l_st"}, {r.l_rho, "l_rho"}, {r.l_pgt, "l_pgt"}, {r.l_gs, "l_gs"}};
  for (const auto& [v, name] : terms)
    if (!std::isfinite(v)) throw DivergenceError(name, std::string("non-finite ") + name + " at step " + std::to_string(r.step));
}

}  // namespace detail

/// One epoch. `joint` selects the full per-batch loop; otherwise classification only.
inline std::vector<ReportRow> run_epoch(TrainState& s, const Dataset& data, const TrainConfig& cfg, bool joint,
                                        const EdgeProvider& edges) {
  if (data.size() == 0) throw ConfigError("training set is empty");
  const EmaSchedule sched = ema_schedule(cfg, data.size());
  const int epoch = s.epoch;
  const auto order = epoch_order(cfg, epoch, data.size());
  std::vector<ReportRow> rows;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
    const std::size_t end = std::min(order.size(), start + cfg.batch);
    std::vector<Image> crops;
    std::vector<std::string> ids;
    std::vector<std::uint64_t> view_seeds;
    for (std::size_t i = start; i < end; ++i) {
      crops.push_back(training_crop(data.images[order[i]], cfg, epoch, static_cast<int>(i)));
      ids.push_back(data.ids[order[i]]);
      view_seeds.push_back(derive_seed(cfg.seed, {0x76696577ULL, static_cast<std::uint64_t>(epoch), i}));
    }
    ReportRow row;
    row.step = s.step;
    row.epoch = epoch;
    row.joint = joint;
    row.lambda = lambda_at(std::min(s.step, sched.total_steps), sched);
    const auto cls = classification_step(s, crops, view_seeds, cfg, row.lambda);
    row.l_st = cls.l_st;
    row.l_rho = cls.l_rho;
    row.skipped_rho = cls.skipped_rho;
    if (joint) {
      const auto sal = saliency_step(s, crops, ids, cfg, edges);
      row.l_pgt = sal.l_pgt;
      row.l_gs = sal.l_gs;
      row.degenerate_cams = sal.degenerate_cams;
    }
    row.l_total = row.l_st + row.l_rho + row.l_pgt + (cfg.use_gs ? cfg.beta1 * row.l_gs : 0.0);
    detail::check_row(row);
    rows.push_back(row);
    ++s.step;
  }
  ++s.epoch;
  return rows;
}

inline std::vector<ReportRow> warmup_epoch(TrainState& s, const Dataset& data, const TrainConfig& cfg) {
  return run_epoch(s, data, cfg, false, sobel_edges());
}

inline std::vector<ReportRow> train_epoch(TrainState& s, const Dataset& data, const TrainConfig& cfg,
                                          const EdgeProvider& edges = sobel_edges()) {
  return run_epoch(s, data, cfg, true, edges);
}

inline bool is_warmup_epoch(const TrainConfig& cfg, int epoch) { return !cfg.skip_warmup && epoch < cfg.warmup_epochs; }

// --- checkpoints -----------------------------------------------------------

inline void save_training_checkpoint(const std::filesystem::path& path, const TrainState& s, const TrainConfig& cfg) {
  Container c;
  std::string meta = arch_meta(s.student.arch);
  meta += "kind=training\nstep=" + std::to_string(s.step) + "\nepoch=" + std::to_string(s.epoch) + "\n";
  std::istringstream cfg_lines(config_to_text(cfg));
  for (std::string line; std::getline(cfg_lines, line);) meta += "cfg." + line + "\n";
  c.meta = meta;
  append_state(c, "student/", s.student);
  append_state(c, "teacher/", s.teacher);
  c.tensors.emplace_back("center", s.center.center);
  for (const auto& [name, v] : s.velocity) c.tensors.emplace_back("velocity/" + name, v);
  write_container(path, c);
}

inline TrainState load_training_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path);
  const auto kv = parse_meta(c.meta);
  if (!kv.count("kind") || kv.at("kind") != "training") throw IoError("not a training checkpoint: " + path.string());
  const Arch arch = arch_from_meta(kv);
  TrainState s;
  s.student = extract_state(c, "student/", arch);
  s.teacher = extract_state(c, "teacher/", arch);
  s.center.center = c.get("center");
  for (const auto& [name, t] : c.tensors)
    if (name.rfind("velocity/", 0) == 0) s.velocity.emplace(name.substr(9), t);
  s.step = std::stol(kv.at("step"));
  s.epoch = std::stoi(kv.at("epoch"));
  return s;
}

struct RunOptions {
  std::filesystem::path out_dir;                    // checkpoints and report; empty = keep in memory only
  std::optional<std::filesystem::path> resume;      // training checkpoint to continue from
  EdgeProvider edges = sobel_edges();
  std::function<void(const ReportRow&)> on_row;     // progress hook
  std::optional<TrainState> initial;                // start from this state instead of a fresh init
};

/// Warmup epochs, then joint epochs, with checkpoints every `checkpoint_every`
/// epochs and at the end. The report CSV is appended row by row.
inline TrainReport run_training(const TrainConfig& cfg, const Dataset& data, const RunOptions& opt = {},
                                TrainState* final_state = nullptr) {
  cfg.validate();
  for (const auto& img : data.images) {
    if (img.height() < cfg.crop || img.width() < cfg.crop) throw ConfigError("training image smaller than the crop side");
  }
  TrainState s = opt.resume ? load_training_checkpoint(*opt.resume) : opt.initial ? *opt.initial : init_train_state(cfg);
  if (!(s.student.arch == cfg.arch)) throw ConfigError("checkpoint architecture differs from the configuration");

  TrainReport report;
  std::ofstream csv;
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    const auto path = opt.out_dir / "report.csv";
    const bool fresh = !opt.resume || !std::filesystem::exists(path);
    csv.open(path, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw IoError("cannot open " + path.string());
    if (fresh) csv << kReportHeader << "\n";
  }
  auto checkpoint = [&](const std::string& name) {
    if (opt.out_dir.empty()) return;
    const auto p = opt.out_dir / name;
    save_training_checkpoint(p, s, cfg);
    report.checkpoints.push_back(p);
  };

  while (s.epoch < cfg.epochs) {
    std::vector<ReportRow> rows;
    const TrainState before = s;
    try {
      rows = run_epoch(s, data, cfg, !is_warmup_epoch(cfg, s.epoch), opt.edges);
    } catch (const DivergenceError&) {
      s = before;
      checkpoint("abort.ckpt");
      throw;
    }
    for (const auto& r : rows) {
      if (csv.is_open()) csv << report_line(r) << "\n";
      if (opt.on_row) opt.on_row(r);
      report.rows.push_back(r);
    }
    if (csv.is_open()) csv.flush();
    if (cfg.checkpoint_every > 0 && s.epoch % cfg.checkpoint_every == 0 && s.epoch < cfg.epochs) {
      checkpoint("epoch_" + std::to_string(s.epoch) + ".ckpt");
    }
  }
  checkpoint("final.ckpt");
  if (final_state) *final_state = std::move(s);
  return report;
}

}  // namespace sal3sd
