#pragma once

// Base network: local U-encoder, transformer global encoder, channel fusion,
// saliency decoder and patch-classification decoder.

#include <array>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sal3sd/autograd.hpp"
#include "sal3sd/ops.hpp"
#include "sal3sd/rng.hpp"

namespace sal3sd {

/// Architecture descriptor. Everything that fixes parameter shapes lives here.
struct Arch {
  int classes = 200;      // K
  int patch = 32;         // default classification / token patch size P
  int base_width = 16;    // local encoder widths are {b, b, 2b, 2b} at strides 1,2,4,8
  int token_dim = 64;     // D
  int heads = 4;
  int blocks = 2;
  int mlp_ratio = 2;
  int token_pool = 4;     // each patch is average-pooled to token_pool^2 cells before embedding
  int pos_grid = 4;       // learned positional table side, resampled to the actual token grid
  int cls_width = 64;

  static constexpr int kDepth = 4;
  static constexpr int kStride = 8;  // deepest local feature stride

  std::array<int, kDepth> local_widths() const {
    return {base_width, base_width, 2 * base_width, 2 * base_width};
  }

  void validate() const {
    if (classes < 1 || base_width < 2 || token_dim < 1 || heads < 1 || blocks < 0 || mlp_ratio < 1 ||
        token_pool < 1 || pos_grid < 1 || cls_width < 1) {
      throw ConfigError("arch: all sizes must be positive");
    }
    if (token_dim % heads) throw ConfigError("arch: token_dim must be divisible by heads");
    check_patch(patch);
  }

  void check_patch(int p) const {
    if (p <= 0 || p % kStride || p % token_pool) {
      throw ConfigError("arch: patch size " + std::to_string(p) + " must be a positive multiple of " +
                        std::to_string(kStride) + " and of token_pool=" + std::to_string(token_pool));
    }
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "classes=" << classes << "\npatch=" << patch << "\nbase_width=" << base_width
       << "\ntoken_dim=" << token_dim << "\nheads=" << heads << "\nblocks=" << blocks
       << "\nmlp_ratio=" << mlp_ratio << "\ntoken_pool=" << token_pool << "\npos_grid=" << pos_grid
       << "\ncls_width=" << cls_width << "\n";
    return os.str();
  }

  static Arch from_text(const std::string& text) {
    Arch a;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("arch: malformed line '" + line + "'");
      const std::string key = line.substr(0, eq);
      int v = 0;
      try {
        v = std::stoi(line.substr(eq + 1));
      } catch (const std::exception&) {
        throw ConfigError("arch: bad value for '" + key + "'");
      }
      if (key == "classes") a.classes = v;
      else if (key == "patch") a.patch = v;
      else if (key == "base_width") a.base_width = v;
      else if (key == "token_dim") a.token_dim = v;
      else if (key == "heads") a.heads = v;
      else if (key == "blocks") a.blocks = v;
      else if (key == "mlp_ratio") a.mlp_ratio = v;
      else if (key == "token_pool") a.token_pool = v;
      else if (key == "pos_grid") a.pos_grid = v;
      else if (key == "cls_width") a.cls_width = v;
      else throw ConfigError("arch: unknown key '" + key + "'");
    }
    a.validate();
    return a;
  }

  friend bool operator==(const Arch&, const Arch&) = default;
};

using ParamMap = std::map<std::string, Tensor>;

/// Named parameters plus the descriptor that produced their shapes.
struct ModelState {
  Arch arch;
  ParamMap params;

  bool aligned_with(const ModelState& o) const {
    if (params.size() != o.params.size()) return false;
    for (auto a = params.begin(), b = o.params.begin(); a != params.end(); ++a, ++b) {
      if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
    }
    return true;
  }

  bool all_finite() const {
    for (const auto& [_, t] : params)
      if (!t.all_finite()) return false;
    return true;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params) n += t.size();
    return n;
  }
};

namespace detail {

enum class Init { FanIn, Zero, One, Small };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
  int fan_in;
};

inline void conv_specs(std::vector<ParamSpec>& out, const std::string& name, int in, int o, int k) {
  out.push_back({name + ".w", {o, in, k, k}, Init::FanIn, in * k * k});
  out.push_back({name + ".b", {o}, Init::Zero, 0});
}

inline void linear_specs(std::vector<ParamSpec>& out, const std::string& name, int in, int o) {
  out.push_back({name + ".w", {o, in}, Init::FanIn, in});
  out.push_back({name + ".b", {o}, Init::Zero, 0});
}

inline void norm_specs(std::vector<ParamSpec>& out, const std::string& name, int d) {
  out.push_back({name + ".g", {d}, Init::One, 0});
  out.push_back({name + ".b", {d}, Init::Zero, 0});
}

inline void rsu_specs(std::vector<ParamSpec>& out, const std::string& name, int in, int mid, int o) {
  conv_specs(out, name + ".in", in, o, 3);
  conv_specs(out, name + ".enc", o, mid, 3);
  conv_specs(out, name + ".mid", mid, mid, 3);
  conv_specs(out, name + ".dec", 2 * mid, o, 3);
}

inline std::vector<ParamSpec> param_specs(const Arch& a) {
  std::vector<ParamSpec> s;
  const auto w = a.local_widths();
  int in = 3;
  for (int l = 0; l < Arch::kDepth; ++l) {
    rsu_specs(s, "local.l" + std::to_string(l), in, std::max(1, w[l] / 2), w[l]);
    in = w[l];
  }
  const int d = a.token_dim;
  linear_specs(s, "global.embed", 3 * a.token_pool * a.token_pool, d);
  s.push_back({"global.pos", {d, a.pos_grid, a.pos_grid}, Init::Small, 0});
  for (int b = 0; b < a.blocks; ++b) {
    const std::string p = "global.b" + std::to_string(b);
    norm_specs(s, p + ".ln1", d);
    linear_specs(s, p + ".q", d, d);
    linear_specs(s, p + ".k", d, d);
    linear_specs(s, p + ".v", d, d);
    linear_specs(s, p + ".proj", d, d);
    norm_specs(s, p + ".ln2", d);
    linear_specs(s, p + ".fc1", d, d * a.mlp_ratio);
    linear_specs(s, p + ".fc2", d * a.mlp_ratio, d);
  }
  norm_specs(s, "global.ln_f", d);

  const int fused = w[3] + d;
  const int b = a.base_width;
  rsu_specs(s, "sal.d3", fused, b, 2 * b);
  rsu_specs(s, "sal.d2", 2 * b + w[2], std::max(1, b / 2), b);
  rsu_specs(s, "sal.d1", b + w[1], std::max(1, b / 2), b);
  conv_specs(s, "sal.d0", b + w[0], std::max(1, b / 2), 3);
  conv_specs(s, "sal.out", std::max(1, b / 2), 1, 1);

  conv_specs(s, "cls.c1", fused, a.cls_width, 3);
  conv_specs(s, "cls.c2", a.cls_width, a.cls_width, 3);
  linear_specs(s, "cls.head", a.cls_width, a.classes);
  return s;
}

}  // namespace detail

/// Fresh parameters: fan-in-scaled uniform weights U(-sqrt(6/fan_in), +sqrt(6/fan_in)),
/// zero biases, unit norm gains, small uniform positional table.
inline ModelState init_model(const Arch& arch, std::uint64_t seed) {
  arch.validate();
  ModelState st;
  st.arch = arch;
  Rng rng(derive_seed(seed, {0x6d6f64656cULL}));
  for (const auto& spec : detail::param_specs(arch)) {
    Tensor t(spec.shape);
    switch (spec.init) {
      case detail::Init::FanIn: {
        const double bound = std::sqrt(6.0 / spec.fan_in);
        for (double& v : t.values()) v = rng.uniform(-bound, bound);
        break;
      }
      case detail::Init::Small:
        for (double& v : t.values()) v = rng.uniform(-0.035, 0.035);
        break;
      case detail::Init::One:
        t.fill(1.0);
        break;
      case detail::Init::Zero:
        break;
    }
    st.params.emplace(spec.name, std::move(t));
  }
  return st;
}

/// Parameters of one ModelState bound as graph leaves for a forward pass.
class Params {
 public:
  static Params bind(const ModelState& st, bool track_grad) {
    Params p;
    p.arch_ = st.arch;
    for (const auto& [name, t] : st.params) p.vars_.emplace(name, track_grad ? parameter(t) : constant(t));
    return p;
  }

  const Arch& arch() const { return arch_; }

  const Var& operator()(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("model state has no parameter '" + name + "'");
    return it->second;
  }

  /// Accumulated gradients, zero-filled for parameters nothing flowed into.
  ParamMap gradients() const {
    ParamMap g;
    for (const auto& [name, v] : vars_) g.emplace(name, v.grad().empty() ? Tensor(v.shape(), 0.0) : v.grad());
    return g;
  }

  const std::map<std::string, Var>& vars() const { return vars_; }

 private:
  Arch arch_;
  std::map<std::string, Var> vars_;
};

struct FeaturePyramid {
  std::vector<Var> levels;  // strides 1, 2, 4, 8
};

struct GlobalTokens {
  Var tokens;  // {grid_h * grid_w, D}
  int grid_h = 0;
  int grid_w = 0;
};

/// Per-patch logits plus the spatial features they were pooled from (kept for CAM).
struct ClassHead {
  Var features;  // {cls_width, H/8, W/8}
  Var logits;    // {grid_h * grid_w, K}
  int grid_h = 0;
  int grid_w = 0;
};

namespace detail {

inline Var conv_relu(const Params& p, const std::string& name, const Var& x) {
  return ops::relu(ops::conv2d(x, p(name + ".w"), p(name + ".b")));
}

/// Residual U-block with a nested two-level inner U: the inner path downsamples
/// once, processes, upsamples and merges with the skip before the residual add.
inline Var rsu(const Params& p, const std::string& name, const Var& x) {
  Var hin = conv_relu(p, name + ".in", x);
  Var a = conv_relu(p, name + ".enc", hin);
  const int h = a.dim(1), w = a.dim(2);
  Var b;
  if (h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0) {
    b = conv_relu(p, name + ".mid", ops::maxpool2(a));
    b = ops::upsample_bilinear(b, h, w);
  } else {
    b = conv_relu(p, name + ".mid", a);
  }
  Var d = conv_relu(p, name + ".dec", ops::concat_channels(b, a));
  return ops::add(d, hin);
}

inline void check_input(const Var& x, int patch, const Arch& arch) {
  if (x.value().rank() != 3 || x.dim(0) != 3) throw ShapeError("model input must be 3xHxW, got " + shape_str(x.shape()));
  arch.check_patch(patch);
  const int h = x.dim(1), w = x.dim(2);
  if (h <= 0 || w <= 0 || h % patch || w % patch) {
    throw ConfigError("input " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by patch size " +
                      std::to_string(patch));
  }
}

}  // namespace detail

inline FeaturePyramid forward_local_encoder(const Var& x, const Params& p) {
  if (x.value().rank() != 3 || x.dim(0) != 3) throw ShapeError("local encoder input must be 3xHxW");
  if (x.dim(1) % Arch::kStride || x.dim(2) % Arch::kStride) {
    throw ConfigError("local encoder input sides must be multiples of " + std::to_string(Arch::kStride));
  }
  FeaturePyramid out;
  Var h = x;
  for (int l = 0; l < Arch::kDepth; ++l) {
    if (l > 0) h = ops::maxpool2(h);
    h = detail::rsu(p, "local.l" + std::to_string(l), h);
    out.levels.push_back(h);
  }
  return out;
}

/// One token per patch x patch cell; attention spans the whole grid.
inline GlobalTokens forward_global_encoder(const Var& x, const Params& p, int patch) {
  const Arch& a = p.arch();
  detail::check_input(x, patch, a);
  const int gh = x.dim(1) / patch, gw = x.dim(2) / patch;
  const int cell = patch / a.token_pool;
  Var t = ops::space_to_tokens(ops::block_mean(x, cell, cell), a.token_pool);
  t = ops::linear(t, p("global.embed.w"), p("global.embed.b"));
  Var pos = ops::chw_to_tokens(ops::upsample_bilinear(p("global.pos"), gh, gw));
  t = ops::add(t, pos);
  for (int b = 0; b < a.blocks; ++b) {
    const std::string n = "global.b" + std::to_string(b);
    Var h = ops::layer_norm(t, p(n + ".ln1.g"), p(n + ".ln1.b"));
    Var q = ops::linear(h, p(n + ".q.w"), p(n + ".q.b"));
    Var k = ops::linear(h, p(n + ".k.w"), p(n + ".k.b"));
    Var v = ops::linear(h, p(n + ".v.w"), p(n + ".v.b"));
    Var att = ops::multi_head_attention(q, k, v, a.heads);
    t = ops::add(t, ops::linear(att, p(n + ".proj.w"), p(n + ".proj.b")));
    Var h2 = ops::layer_norm(t, p(n + ".ln2.g"), p(n + ".ln2.b"));
    Var m = ops::linear(ops::gelu(ops::linear(h2, p(n + ".fc1.w"), p(n + ".fc1.b"))), p(n + ".fc2.w"), p(n + ".fc2.b"));
    t = ops::add(t, m);
  }
  t = ops::layer_norm(t, p("global.ln_f.g"), p("global.ln_f.b"));
  return {t, gh, gw};
}

/// Channel concatenation of the deepest local features with the token grid
/// broadcast (nearest) to the same spatial size.
inline Var fuse_features(const FeaturePyramid& local, const GlobalTokens& g) {
  if (local.levels.empty()) throw ShapeError("fuse_features: empty pyramid");
  const Var& deep = local.levels.back();
  const int h = deep.dim(1), w = deep.dim(2);
  if (g.grid_h <= 0 || g.grid_w <= 0 || h % g.grid_h || w % g.grid_w) {
    throw ConfigError("fuse_features: token grid " + std::to_string(g.grid_h) + "x" + std::to_string(g.grid_w) +
                      " does not align with local grid " + std::to_string(h) + "x" + std::to_string(w));
  }
  Var grid = ops::tokens_to_chw(g.tokens, g.grid_h, g.grid_w);
  grid = ops::upsample_nearest(grid, h / g.grid_h, w / g.grid_w);
  return ops::concat_channels(deep, grid);
}

/// Returns the {1,H,W} sigmoid map clamped to [1e-6, 1-1e-6].
inline Var decode_saliency(const Var& fused, const FeaturePyramid& pyr, const Params& p) {
  const auto& L = pyr.levels;
  if (L.size() != Arch::kDepth) throw ShapeError("decode_saliency: pyramid must have 4 levels");
  Var d = detail::rsu(p, "sal.d3", fused);
  d = ops::upsample_bilinear(d, L[2].dim(1), L[2].dim(2));
  d = detail::rsu(p, "sal.d2", ops::concat_channels(d, L[2]));
  d = ops::upsample_bilinear(d, L[1].dim(1), L[1].dim(2));
  d = detail::rsu(p, "sal.d1", ops::concat_channels(d, L[1]));
  d = ops::upsample_bilinear(d, L[0].dim(1), L[0].dim(2));
  d = detail::conv_relu(p, "sal.d0", ops::concat_channels(d, L[0]));
  Var logit = ops::conv2d(d, p("sal.out.w"), p("sal.out.b"));
  return ops::sigmoid_clamped(logit, 1e-6);
}

inline ClassHead decode_classes(const Var& fused, const Params& p, int patch) {
  const Arch& a = p.arch();
  a.check_patch(patch);
  const int cell = patch / Arch::kStride;
  if (fused.dim(1) % cell || fused.dim(2) % cell) throw ConfigError("decode_classes: patch grid does not tile features");
  Var f = detail::conv_relu(p, "cls.c1", fused);
  f = detail::conv_relu(p, "cls.c2", f);
  Var pooled = ops::block_mean(f, cell, cell);
  const int gh = pooled.dim(1), gw = pooled.dim(2);
  Var logits = ops::linear(ops::chw_to_tokens(pooled), p("cls.head.w"), p("cls.head.b"));
  return {f, logits, gh, gw};
}

struct ForwardOptions {
  int patch = 0;            // 0: use arch.patch
  bool saliency = true;
  bool classes = true;
  bool zero_global = false;  // ablation probe: drop the global encoder's contribution
};

struct ForwardResult {
  FeaturePyramid pyramid;
  GlobalTokens global;
  Var fused;
  Var saliency;  // {1,H,W}, undefined if not requested
  ClassHead classes;
};

inline ForwardResult forward(const Var& x, const Params& p, const ForwardOptions& opt = {}) {
  const int patch = opt.patch > 0 ? opt.patch : p.arch().patch;
  detail::check_input(x, patch, p.arch());
  ForwardResult r;
  r.pyramid = forward_local_encoder(x, p);
  r.global = forward_global_encoder(x, p, patch);
  if (opt.zero_global) r.global.tokens = ops::scale(r.global.tokens, 0.0);
  r.fused = fuse_features(r.pyramid, r.global);
  if (opt.saliency) r.saliency = decode_saliency(r.fused, r.pyramid, p);
  if (opt.classes) r.classes = decode_classes(r.fused, p, patch);
  return r;
}

}  // namespace sal3sd
