#pragma once

// Corpus loading, train-time cropping and the synthetic shape corpus.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "sal3sd/imageio.hpp"
#include "sal3sd/rng.hpp"

namespace sal3sd {

struct CorpusItem {
  std::string id;  // file stem
  std::filesystem::path image;
  std::optional<std::filesystem::path> mask;
};

struct Corpus {
  std::vector<CorpusItem> items;
  bool with_masks = false;
  std::size_t size() const { return items.size(); }
};

/// Training view of a corpus: images only.
struct Dataset {
  std::vector<std::string> ids;
  std::vector<Image> images;
  std::size_t size() const { return images.size(); }
};

/// Images come from `dir/images` when it exists, else from `dir`. Masks are
/// `dir/masks/<stem>.png`. Ordering is lexicographic by file name.
inline Corpus load_corpus(const std::filesystem::path& dir, bool with_masks) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("corpus directory not found: " + dir.string());
  const fs::path img_dir = fs::is_directory(dir / "images") ? dir / "images" : dir;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(img_dir))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });

  Corpus c;
  c.with_masks = with_masks;
  for (const auto& f : files) {
    CorpusItem item{f.stem().string(), f, std::nullopt};
    for (const auto& other : c.items)
      if (other.id == item.id) throw IoError("duplicate image stem '" + item.id + "' in " + img_dir.string());
    if (with_masks) {
      const fs::path m = dir / "masks" / (item.id + ".png");
      if (!fs::is_regular_file(m)) throw IoError("missing mask for '" + item.id + "': " + m.string());
      const Image im = read_image(f);
      const SaliencyMap mk = read_gray(m);
      if (mk.height() != im.height() || mk.width() != im.width()) {
        throw IoError("mask size mismatch for '" + item.id + "': image " + std::to_string(im.height()) + "x" +
                      std::to_string(im.width()) + ", mask " + std::to_string(mk.height()) + "x" + std::to_string(mk.width()));
      }
      item.mask = m;
    }
    c.items.push_back(std::move(item));
  }
  return c;
}

inline Dataset load_images(const Corpus& c) {
  Dataset d;
  for (const auto& it : c.items) {
    d.ids.push_back(it.id);
    d.images.push_back(read_image(it.image));
  }
  return d;
}

/// Binary masks: gray >= 128 is foreground.
inline SaliencyMap binarize_mask(const SaliencyMap& gray) {
  SaliencyMap m = gray;
  for (double& v : m.tensor().values()) v = v >= 128.0 / 255.0 ? 1.0 : 0.0;
  return m;
}

inline std::vector<SaliencyMap> load_masks(const Corpus& c) {
  std::vector<SaliencyMap> out;
  for (const auto& it : c.items) {
    if (!it.mask) throw IoError("corpus item '" + it.id + "' has no mask");
    out.push_back(binarize_mask(read_gray(*it.mask)));
  }
  return out;
}

/// Uniform top-left corner under `seed`.
inline Image random_crop(const Image& x, int side, std::uint64_t seed, int patch = 1) {
  if (side <= 0 || side > std::min(x.height(), x.width())) {
    throw ConfigError("random_crop: side " + std::to_string(side) + " exceeds image " + std::to_string(x.height()) + "x" +
                      std::to_string(x.width()));
  }
  if (patch <= 0 || side % patch) throw ConfigError("random_crop: side must be divisible by " + std::to_string(patch));
  Rng rng(seed);
  const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(x.height() - side + 1)));
  const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(x.width() - side + 1)));
  Image out(side, side);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < side; ++y)
      for (int xx = 0; xx < side; ++xx) out.at(c, y, xx) = x.at(c, y0 + y, x0 + xx);
  return out;
}

enum class ShapeFamily { Disc, Rectangle, Blob, Mixed };

struct SyntheticSpec {
  int count = 8;
  int side = 64;
  ShapeFamily family = ShapeFamily::Mixed;
  double fg_min = 0.75, fg_max = 0.95;
  double bg_min = 0.10, bg_max = 0.35;
  double noise = 0.03;  // texture amplitude
  std::uint64_t seed = 7;
  int patch = 32;
};

struct SyntheticCorpus {
  std::vector<std::string> ids;
  std::vector<Image> images;
  std::vector<SaliencyMap> masks;

  Dataset dataset() const { return {ids, images}; }
};

namespace detail {

inline double shape_radius(ShapeFamily f, double r0, double dy, double dx, double hy, double hx, double amp, int lobes,
                           double phase) {
  switch (f) {
    case ShapeFamily::Disc: return std::hypot(dy, dx) <= r0 ? 1.0 : 0.0;
    case ShapeFamily::Rectangle: return std::abs(dy) <= hy && std::abs(dx) <= hx ? 1.0 : 0.0;
    default: {
      const double r = r0 * (1.0 + amp * std::sin(lobes * std::atan2(dy, dx) + phase));
      return std::hypot(dy, dx) <= r ? 1.0 : 0.0;
    }
  }
}

}  // namespace detail

/// One bright shape per image on a darker, smoothly textured background.
/// Masks are evaluated at pixel centers.
inline SyntheticCorpus make_synthetic(const SyntheticSpec& spec) {
  if (spec.count < 0 || spec.side <= 0) throw ConfigError("synthetic: count and side must be positive");
  if (spec.patch <= 0 || spec.side % spec.patch) throw ConfigError("synthetic: side must be divisible by the patch size");
  if (!(spec.fg_min <= spec.fg_max && spec.bg_min <= spec.bg_max)) throw ConfigError("synthetic: bad intensity ranges");
  SyntheticCorpus out;
  const int n = spec.side;
  for (int i = 0; i < spec.count; ++i) {
    Rng rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(i)}));
    ShapeFamily fam = spec.family;
    if (fam == ShapeFamily::Mixed) fam = static_cast<ShapeFamily>(i % 3);
    const double cy = rng.uniform(0.38, 0.62) * n, cx = rng.uniform(0.38, 0.62) * n;
    const double r0 = rng.uniform(0.2, 0.3) * n;
    const double hy = rng.uniform(0.17, 0.27) * n, hx = rng.uniform(0.17, 0.27) * n;
    const double amp = rng.uniform(0.08, 0.2);
    const int lobes = 3 + static_cast<int>(rng.below(3));
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double fg = rng.uniform(spec.fg_min, spec.fg_max), bg = rng.uniform(spec.bg_min, spec.bg_max);
    double fg_tint[3], bg_tint[3];
    for (int c = 0; c < 3; ++c) {
      fg_tint[c] = rng.uniform(-0.05, 0.05);
      bg_tint[c] = rng.uniform(-0.05, 0.05);
    }
    // Low-frequency texture: two random plane waves.
    double wave[2][3];
    for (auto& w : wave) {
      w[0] = rng.uniform(1.0, 4.0) * 2.0 * std::numbers::pi / n;
      w[1] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      w[2] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }

    Image img(n, n);
    SaliencyMap mask(n, n);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        const double m = detail::shape_radius(fam, r0, dy, dx, hy, hx, amp, lobes, phase);
        mask.at(y, x) = m;
        double tex = 0;
        for (const auto& w : wave) tex += 0.5 * std::sin(w[0] * (std::cos(w[1]) * x + std::sin(w[1]) * y) + w[2]);
        const double grain = spec.noise > 0 ? rng.normal() * 0.5 : 0.0;
        for (int c = 0; c < 3; ++c) {
          const double base = m > 0 ? fg + fg_tint[c] : bg + bg_tint[c];
          img.at(c, y, x) = std::clamp(base + spec.noise * (tex + grain), 0.0, 1.0);
        }
      }
    char id[32];
    std::snprintf(id, sizeof(id), "synth_%03d", i);
    out.ids.emplace_back(id);
    out.images.push_back(std::move(img));
    out.masks.push_back(std::move(mask));
  }
  return out;
}

/// Writes the `images/` + `masks/` layout read by load_corpus.
inline void write_synthetic(const SyntheticCorpus& c, const std::filesystem::path& dir) {
  for (std::size_t i = 0; i < c.images.size(); ++i) {
    write_rgb_png(dir / "images" / (c.ids[i] + ".png"), c.images[i]);
    write_gray_png(dir / "masks" / (c.ids[i] + ".png"), c.masks[i]);
  }
}

}  // namespace sal3sd
