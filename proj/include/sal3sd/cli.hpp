#pragma once

// Command-line front end: train, pseudo-gt, infer, eval.
//
// Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
// Failures print one line, "error: <message>", on stderr.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sal3sd/checkpoint.hpp"
#include "sal3sd/config.hpp"
#include "sal3sd/data.hpp"
#include "sal3sd/imageio.hpp"
#include "sal3sd/metrics.hpp"
#include "sal3sd/trainer.hpp"

namespace sal3sd::cli {

namespace fs = std::filesystem;

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Invocation {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string data_dir, input_dir, out_dir, checkpoint, resume, edges_dir, pred_dir, masks_dir;
  std::string suffix = "_sal.png";
  long long seed = -1;
  double beta2 = 0.3;
  double threshold = -1.0;
  bool quiet = false;
};

inline void apply_overrides(TrainConfig& cfg, const Invocation& inv) {
  for (const auto& kv : inv.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("override '" + kv + "' is not key=value");
    set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  if (inv.seed >= 0) cfg.seed = static_cast<std::uint64_t>(inv.seed);
}

/// Config used by a subcommand: file (if any), then the training config
/// stored in the checkpoint (if any), then command-line overrides.
inline TrainConfig resolve_config(const Invocation& inv, const std::optional<Container>& ckpt = std::nullopt) {
  TrainConfig cfg;
  if (ckpt) {
    const auto kv = parse_meta(ckpt->meta);
    cfg.arch = arch_from_meta(kv);
    std::string text;
    for (const auto& [k, v] : kv)
      if (k.rfind("cfg.", 0) == 0) text += k.substr(4) + "=" + v + "\n";
    apply_config_text(cfg, text);
  }
  if (!inv.config_path.empty()) {
    const Arch from_ckpt = cfg.arch;
    TrainConfig file = load_config(inv.config_path);
    if (ckpt) file.arch = from_ckpt;
    cfg = file;
  }
  apply_overrides(cfg, inv);
  cfg.validate();
  return cfg;
}

inline std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("input directory not found: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& it : load_corpus(dir, false).items) out.push_back(it.image);
  return out;
}

inline ModelState load_student(const Container& c) {
  const Arch arch = arch_from_meta(parse_meta(c.meta));
  return extract_state(c, c.has("student/cls.head.w") ? "student/" : "", arch);
}

inline int cmd_train(const Invocation& inv) {
  TrainConfig cfg;
  if (!inv.config_path.empty()) cfg = load_config(inv.config_path);
  apply_overrides(cfg, inv);
  cfg.validate();
  const Dataset data = load_images(load_corpus(inv.data_dir, false));
  RunOptions opt;
  opt.out_dir = inv.out_dir;
  if (!inv.resume.empty()) opt.resume = inv.resume;
  if (!inv.edges_dir.empty()) opt.edges = file_edges(inv.edges_dir);
  if (!inv.quiet) {
    opt.on_row = [](const ReportRow& r) {
      std::fprintf(stderr, "step %ld epoch %d l_st %.4f l_rho %.4f l_pgt %.2f l_gs %.3f total %.3f lambda %.6f\n", r.step,
                   r.epoch, r.l_st, r.l_rho, r.l_pgt, r.l_gs, r.l_total, r.lambda);
    };
  }
  {
    fs::create_directories(inv.out_dir);
    std::ofstream os(fs::path(inv.out_dir) / "config.txt");
    os << config_to_text(cfg);
  }
  run_training(cfg, data, opt);
  return 0;
}

inline int cmd_pseudo_gt(const Invocation& inv) {
  const Container c = read_container(inv.checkpoint);
  const TrainConfig cfg = resolve_config(inv, c);
  const ModelState st = load_student(c);
  const EdgeProvider edges = inv.edges_dir.empty() ? sobel_edges() : file_edges(inv.edges_dir);
  const fs::path out(inv.out_dir);
  for (const auto& path : list_images(inv.input_dir)) {
    const Image x = read_image(path);
    const std::string id = path.stem().string();
    const PseudoLabel l = pseudo_label(st, x, edges(x, id), cfg);
    write_gray_png(out / (id + "_pgt.png"), l.pgt.soft);
    write_gray_png(out / (id + "_pgt_bin.png"), l.pgt.hard);
    write_gray_png(out / (id + "_cam.png"), l.cam);
    write_gray_png(out / (id + "_gate.png"), l.gate);
    write_gray_png(out / (id + "_gedge.png"), l.gated);
  }
  return 0;
}

inline int cmd_infer(const Invocation& inv) {
  const Container c = read_container(inv.checkpoint);
  const TrainConfig cfg = resolve_config(inv, c);
  const ModelState st = load_student(c);
  const Params p = Params::bind(st, false);
  for (const auto& path : list_images(inv.input_dir)) {
    const Image x = read_image(path);
    ForwardOptions fo;
    fo.patch = cfg.patch_for(cfg.crop);
    fo.classes = false;
    const Var s = forward(constant(x.tensor()), p, fo).saliency;
    write_gray_png(fs::path(inv.out_dir) / (path.stem().string() + "_sal.png"),
                   SaliencyMap(s.value().reshaped({x.height(), x.width()})));
  }
  return 0;
}

inline int cmd_eval(const Invocation& inv) {
  const Corpus corpus = load_corpus(inv.masks_dir, true);
  const auto gts = load_masks(corpus);
  std::vector<std::string> ids;
  std::vector<SaliencyMap> preds;
  for (const auto& it : corpus.items) {
    const fs::path p = fs::path(inv.pred_dir) / (it.id + inv.suffix);
    ids.push_back(it.id);
    preds.push_back(read_gray(p));
  }
  const MetricsReport r = evaluate(ids, preds, gts, inv.beta2, inv.threshold);
  write_metrics(inv.out_dir, r);
  if (!inv.quiet) {
    std::printf("mae %.6f f_beta %.6f iou %.6f (n=%zu)\n", r.mean_mae, r.mean_f_beta, r.mean_iou, r.images.size());
  }
  return 0;
}

/// Parses and runs one invocation; never throws.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"self-supervised salient object detection"};
  app.require_subcommand(1);
  Invocation inv;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", inv.config_path, "config file (key = value lines)")->check(CLI::ExistingFile);
    sub->add_option("-s,--set", inv.overrides, "config override key=value (repeatable)");
    sub->add_option("--seed", inv.seed, "random seed override");
    sub->add_flag("-q,--quiet", inv.quiet, "suppress progress output");
  };
  auto* train = app.add_subcommand("train", "train student and teacher on an image directory");
  common(train);
  train->add_option("--data", inv.data_dir, "image directory (images/ subfolder or flat)")->required();
  train->add_option("--out", inv.out_dir, "output directory for report.csv and checkpoints")->required();
  train->add_option("--resume", inv.resume, "training checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--edges", inv.edges_dir, "directory of precomputed <stem>.png edge maps");

  auto* pgt = app.add_subcommand("pseudo-gt", "write pseudo labels and their intermediates per image");
  common(pgt);
  pgt->add_option("--checkpoint", inv.checkpoint, "model or training checkpoint")->required()->check(CLI::ExistingFile);
  pgt->add_option("--input", inv.input_dir, "image directory")->required();
  pgt->add_option("--out", inv.out_dir, "output directory")->required();
  pgt->add_option("--edges", inv.edges_dir, "directory of precomputed <stem>.png edge maps");

  auto* infer = app.add_subcommand("infer", "write <stem>_sal.png saliency maps");
  common(infer);
  infer->add_option("--checkpoint", inv.checkpoint, "model or training checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--input", inv.input_dir, "image directory")->required();
  infer->add_option("--out", inv.out_dir, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "score predictions against masks");
  eval->add_option("--pred", inv.pred_dir, "directory of <stem><suffix> predictions")->required();
  eval->add_option("--masks", inv.masks_dir, "corpus directory with images/ and masks/")->required();
  eval->add_option("--out", inv.out_dir, "output directory for metrics.json and pr_curve.csv")->required();
  eval->add_option("--suffix", inv.suffix, "prediction file suffix (default _sal.png)");
  eval->add_option("--beta2", inv.beta2, "F-measure beta^2 (default 0.3)");
  eval->add_option("--threshold", inv.threshold, "fixed binarization threshold; default averages over 256 thresholds");
  eval->add_flag("-q,--quiet", inv.quiet, "suppress the summary line");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    for (char& ch : msg)
      if (ch == '\n') ch = ' ';
    std::cerr << "error: usage: " << msg << "\n";
    return 2;
  }

  try {
    if (*train) return cmd_train(inv);
    if (*pgt) return cmd_pseudo_gt(inv);
    if (*infer) return cmd_infer(inv);
    return cmd_eval(inv);
  } catch (const UsageError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "error: divergence: term=" << e.term() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace sal3sd::cli
