#pragma once

// Training configuration and its flat `key = value` grammar.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sal3sd/model.hpp"
#include "sal3sd/pseudogt.hpp"
#include "sal3sd/selfsup.hpp"

namespace sal3sd {

struct TrainConfig {
  Arch arch;
  int m_rho = 4;  // 10 at 320 px; the 4x4 desk grid holds at most 8
  double tau = 0.1;
  double beta1 = 0.3;
  int crop = 64;       // unaugmented training crop side
  int view_grid = 4;   // classification grid side for views and crops: P = side / view_grid
  double lr = 0.001;
  double saliency_lr = 0.0;  // learning rate of the saliency update; 0 = lr
  double momentum = 0.0;
  double weight_decay = 0.0;
  int batch = 4;
  int epochs = 60;
  int warmup_epochs = 30;
  bool skip_warmup = false;
  double ema_start = 0.996;
  double ema_end = 1.0;
  PgtConfig pgt;
  AugmentConfig augment;
  StOrder st_order = StOrder::TeacherTarget;
  CenterSign center_sign = CenterSign::Add;
  RhoDenominator rho_denominator = RhoDenominator::NegativesOnly;
  RhoNegatives rho_negatives = RhoNegatives::TeacherMap;
  PsiConstant psi = PsiConstant::Epsilon;
  PgtTarget pgt_target = PgtTarget::Hard;
  GsGradient gs_gradient = GsGradient::Gray;
  bool use_gs = true;
  int checkpoint_every = 0;  // epochs; 0 = only at the end
  std::uint64_t seed = 0;

  int patch_for(int side) const { return side / view_grid; }

  void validate() const {
    arch.validate();
    augment.validate();
    if (m_rho < 1 || batch < 1 || epochs < 0 || warmup_epochs < 0 || checkpoint_every < 0) {
      throw ConfigError("config: m_rho and batch must be positive; epoch counts nonnegative");
    }
    if (!(tau > 0)) throw ConfigError("config: tau must be > 0");
    if (!(lr >= 0) || !(saliency_lr >= 0) || !(momentum >= 0 && momentum < 1) || !(weight_decay >= 0) || !(beta1 >= 0)) {
      throw ConfigError("config: lr, weight_decay, beta1 must be >= 0 and momentum in [0,1)");
    }
    if (!(0 < ema_start && ema_start <= ema_end && ema_end <= 1)) throw ConfigError("config: need 0 < ema_start <= ema_end <= 1");
    if (view_grid < 1) throw ConfigError("config: view_grid must be positive");
    if (2 * m_rho > view_grid * view_grid) {
      throw ConfigError("config: m_rho=" + std::to_string(m_rho) + " exceeds half of the " + std::to_string(view_grid) + "x" +
                        std::to_string(view_grid) + " view grid");
    }
    for (int side : {crop, augment.global_size, augment.local_size}) {
      if (side % view_grid) throw ConfigError("config: side " + std::to_string(side) + " is not divisible by view_grid");
      arch.check_patch(patch_for(side));
    }
    if (!(pgt.cam_thr > 0 && pgt.cam_thr < 1) || pgt.dilate_radius < 0) throw ConfigError("config: bad gate settings");
  }
};

namespace detail {

template <typename E>
struct EnumNames {
  std::vector<std::pair<std::string, E>> names;
  E parse(const std::string& key, const std::string& v) const {
    for (const auto& [n, e] : names)
      if (n == v) return e;
    std::string opts;
    for (const auto& [n, _] : names) opts += (opts.empty() ? "" : "|") + n;
    throw ConfigError("config: " + key + " must be one of " + opts + ", got '" + v + "'");
  }
  std::string name(E e) const {
    for (const auto& [n, x] : names)
      if (x == e) return n;
    return "?";
  }
};

inline const EnumNames<StOrder> kStOrder{{{"teacher", StOrder::TeacherTarget}, {"literal", StOrder::Literal}}};
inline const EnumNames<CenterSign> kCenterSign{{{"add", CenterSign::Add}, {"subtract", CenterSign::Subtract}}};
inline const EnumNames<RhoDenominator> kRhoDen{{{"negatives", RhoDenominator::NegativesOnly}, {"with_positive", RhoDenominator::WithPositive}}};
inline const EnumNames<RhoNegatives> kRhoNeg{{{"teacher", RhoNegatives::TeacherMap}, {"own", RhoNegatives::OwnMaps}}};
inline const EnumNames<PsiConstant> kPsi{{{"1e-6", PsiConstant::Epsilon}, {"exp-6", PsiConstant::ExpMinusSix}}};
inline const EnumNames<PgtTarget> kPgtTarget{{{"hard", PgtTarget::Hard}, {"soft", PgtTarget::Soft}}};
inline const EnumNames<GsGradient> kGsGrad{{{"gray", GsGradient::Gray}, {"rgb", GsGradient::Channelwise}}};
inline const EnumNames<PgtMode> kPgtMode{{{"fused", PgtMode::Fused}, {"cam", PgtMode::CamOnly}, {"edge", PgtMode::EdgeOnly}}};
inline const EnumNames<bool> kBool{{{"true", true}, {"false", false}, {"1", true}, {"0", false}}};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (!is || !is.eof()) throw ConfigError("config: bad numeric value for '" + key + "': '" + v + "'");
  return out;
}

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
Field number(T TrainConfig::*m) {
  return {[m](TrainConfig& c, const std::string& v) { c.*m = parse_number<T>("", v); },
          [m](const TrainConfig& c) {
            std::ostringstream os;
            os.precision(17);
            os << c.*m;
            return os.str();
          }};
}

template <typename T, typename Get>
Field number_at(Get ref) {
  return {[ref](TrainConfig& c, const std::string& v) { ref(c) = parse_number<T>("", v); },
          [ref](const TrainConfig& c) {
            std::ostringstream os;
            os.precision(17);
            os << ref(const_cast<TrainConfig&>(c));
            return os.str();
          }};
}

template <typename E, typename Get>
Field choice(const EnumNames<E>& names, Get ref) {
  return {[&names, ref](TrainConfig& c, const std::string& v) { ref(c) = names.parse("", v); },
          [&names, ref](const TrainConfig& c) { return names.name(ref(const_cast<TrainConfig&>(c))); }};
}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> f = [] {
    std::map<std::string, Field> m;
    m["classes"] = number_at<int>([](TrainConfig& c) -> int& { return c.arch.classes; });
    m["patch"] = number_at<int>([](TrainConfig& c) -> int& { return c.arch.patch; });
    m["base_width"] = number_at<int>([](TrainConfig& c) -> int& { return c.arch.base_width; });
    m["token_dim"] = number_at<int>([](TrainConfig& c) -> int& { return c.arch.token_dim; });
    m["heads"] = number_at<int>([](TrainConfig& c) -> int& { return c.arch.heads; });
    m["blocks"] = number_at<int>([](TrainConfig& c) -> int& { return c.arch.blocks; });
    m["mlp_ratio"] = number_at<int>([](TrainConfig& c) -> int& { return c.arch.mlp_ratio; });
    m["token_pool"] = number_at<int>([](TrainConfig& c) -> int& { return c.arch.token_pool; });
    m["pos_grid"] = number_at<int>([](TrainConfig& c) -> int& { return c.arch.pos_grid; });
    m["cls_width"] = number_at<int>([](TrainConfig& c) -> int& { return c.arch.cls_width; });
    m["m_rho"] = number(&TrainConfig::m_rho);
    m["tau"] = number(&TrainConfig::tau);
    m["beta1"] = number(&TrainConfig::beta1);
    m["crop"] = number(&TrainConfig::crop);
    m["view_grid"] = number(&TrainConfig::view_grid);
    m["lr"] = number(&TrainConfig::lr);
    m["saliency_lr"] = number(&TrainConfig::saliency_lr);
    m["momentum"] = number(&TrainConfig::momentum);
    m["weight_decay"] = number(&TrainConfig::weight_decay);
    m["batch"] = number(&TrainConfig::batch);
    m["epochs"] = number(&TrainConfig::epochs);
    m["warmup_epochs"] = number(&TrainConfig::warmup_epochs);
    m["ema_start"] = number(&TrainConfig::ema_start);
    m["ema_end"] = number(&TrainConfig::ema_end);
    m["checkpoint_every"] = number(&TrainConfig::checkpoint_every);
    m["seed"] = number(&TrainConfig::seed);
    m["skip_warmup"] = choice(kBool, [](TrainConfig& c) -> bool& { return c.skip_warmup; });
    m["use_gs"] = choice(kBool, [](TrainConfig& c) -> bool& { return c.use_gs; });
    m["cam_thr"] = number_at<double>([](TrainConfig& c) -> double& { return c.pgt.cam_thr; });
    m["edge_thr"] = number_at<double>([](TrainConfig& c) -> double& { return c.pgt.edge_thr; });
    m["dilate_radius"] = number_at<int>([](TrainConfig& c) -> int& { return c.pgt.dilate_radius; });
    m["pgt_mode"] = choice(kPgtMode, [](TrainConfig& c) -> PgtMode& { return c.pgt.mode; });
    m["global_size"] = number_at<int>([](TrainConfig& c) -> int& { return c.augment.global_size; });
    m["local_size"] = number_at<int>([](TrainConfig& c) -> int& { return c.augment.local_size; });
    m["global_scale_min"] = number_at<double>([](TrainConfig& c) -> double& { return c.augment.global_scale_min; });
    m["global_scale_max"] = number_at<double>([](TrainConfig& c) -> double& { return c.augment.global_scale_max; });
    m["local_scale_min"] = number_at<double>([](TrainConfig& c) -> double& { return c.augment.local_scale_min; });
    m["local_scale_max"] = number_at<double>([](TrainConfig& c) -> double& { return c.augment.local_scale_max; });
    m["jitter_prob"] = number_at<double>([](TrainConfig& c) -> double& { return c.augment.jitter_prob; });
    m["blur_prob"] = number_at<double>([](TrainConfig& c) -> double& { return c.augment.blur_prob; });
    m["solarize_prob"] = number_at<double>([](TrainConfig& c) -> double& { return c.augment.solarize_prob; });
    m["st_order"] = choice(kStOrder, [](TrainConfig& c) -> StOrder& { return c.st_order; });
    m["center_sign"] = choice(kCenterSign, [](TrainConfig& c) -> CenterSign& { return c.center_sign; });
    m["rho_denominator"] = choice(kRhoDen, [](TrainConfig& c) -> RhoDenominator& { return c.rho_denominator; });
    m["rho_negatives"] = choice(kRhoNeg, [](TrainConfig& c) -> RhoNegatives& { return c.rho_negatives; });
    m["psi_constant"] = choice(kPsi, [](TrainConfig& c) -> PsiConstant& { return c.psi; });
    m["pgt_target"] = choice(kPgtTarget, [](TrainConfig& c) -> PgtTarget& { return c.pgt_target; });
    m["gs_gradient"] = choice(kGsGrad, [](TrainConfig& c) -> GsGradient& { return c.gs_gradient; });
    return m;
  }();
  return f;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> k;
  for (const auto& [name, _] : detail::fields()) k.push_back(name);
  return k;
}

/// Sets one key. Unknown keys and malformed values raise ConfigError.
inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  const auto& f = detail::fields();
  const auto it = f.find(key);
  if (it == f.end()) throw ConfigError("config: unknown key '" + key + "'");
  try {
    it->second.set(c, value);
  } catch (const ConfigError& e) {
    throw ConfigError("config: bad value for '" + key + "': '" + value + "'");
  }
}

/// Applies `key = value` lines; `#` starts a comment.
inline void apply_config_text(TrainConfig& c, const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  TrainConfig c;
  apply_config_text(c, ss.str());
  return c;
}

/// Every key, one `key = value` per line, sorted; round-trips through apply_config_text.
inline std::string config_to_text(const TrainConfig& c) {
  std::string out;
  for (const auto& [name, f] : detail::fields()) out += name + " = " + f.get(c) + "\n";
  return out;
}

/// Desk-scale defaults for the synthetic corpus.
inline TrainConfig desk_config() {
  TrainConfig c;
  c.arch.classes = 20;
  c.m_rho = 4;
  c.lr = 1e-4;
  c.saliency_lr = 1e-6;
  c.epochs = 60;
  c.warmup_epochs = 20;
  c.seed = 1;
  return c;
}

}  // namespace sal3sd
