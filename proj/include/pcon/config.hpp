#pragma once

// Experiment configuration: a TOML-style key/value file with [sections].
// Keys are unique across sections, so `--set key=value` and
// `--set section.key=value` both address a key.
//
// Accepted value syntax: bare words, "quoted strings", true/false, numbers
// and simple fractions such as 8/255. `#` starts a comment outside quotes.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "adversarial.hpp"
#include "data.hpp"
#include "geometry.hpp"
#include "losses.hpp"
#include "nn.hpp"

namespace pcon {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Generic key/value text

struct ConfigEntry {
  std::string section;
  std::string key;
  std::string value;  // unquoted
  int line = 0;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string strip_comment(std::string_view line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return std::string(line.substr(0, i));
  }
  return std::string(line);
}

}  // namespace detail

inline std::vector<ConfigEntry> parse_config_text(std::string_view text, const std::string& origin = "<config>") {
  std::vector<ConfigEntry> out;
  std::string section;
  int lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    const std::string stripped = detail::strip_comment(raw);
    const auto line = detail::trim(stripped);
    if (line.empty()) continue;
    const auto where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = std::string(detail::trim(line.substr(1, line.size() - 2)));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    auto value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": missing key");
    if (!value.empty() && value.front() == '"') {
      if (value.size() < 2 || value.back() != '"') throw ConfigError(where + ": unterminated string");
      value = value.substr(1, value.size() - 2);
    }
    out.push_back({section, std::string(key), std::string(value), lineno});
  }
  return out;
}

inline double parse_real(std::string_view s, const std::string& what) {
  s = detail::trim(s);
  const auto slash = s.find('/');
  if (slash != std::string_view::npos) {
    const double num = parse_real(s.substr(0, slash), what);
    const double den = parse_real(s.substr(slash + 1), what);
    if (den == 0.0) throw ConfigError(what + ": division by zero in '" + std::string(s) + "'");
    return num / den;
  }
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError(what + ": expected a number, got '" + std::string(s) + "'");
  }
  return v;
}

inline long long parse_integer(std::string_view s, const std::string& what) {
  s = detail::trim(s);
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError(what + ": expected an integer, got '" + std::string(s) + "'");
  }
  return v;
}

inline bool parse_bool(std::string_view s, const std::string& what) {
  s = detail::trim(s);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(what + ": expected true or false, got '" + std::string(s) + "'");
}

inline std::vector<double> parse_real_list(std::string_view s, const std::string& what) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto comma = s.find(',', pos);
    const auto item = detail::trim(s.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    if (!item.empty()) out.push_back(parse_real(item, what));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

/// Shortest text that parses back to the same double.
inline std::string format_real(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, ptr) : std::to_string(v);
}

// ---------------------------------------------------------------------------
// Training configuration

enum class LossFamily { infonce_cos, hcl, supcon, shcl, rhcl };

inline const char* to_string(LossFamily f) {
  switch (f) {
    case LossFamily::infonce_cos: return "infonce-cos";
    case LossFamily::hcl: return "hcl";
    case LossFamily::supcon: return "supcon";
    case LossFamily::shcl: return "shcl";
    case LossFamily::rhcl: return "rhcl";
  }
  return "?";
}

inline LossFamily loss_family_from_string(const std::string& s) {
  for (auto f : {LossFamily::infonce_cos, LossFamily::hcl, LossFamily::supcon, LossFamily::shcl, LossFamily::rhcl})
    if (s == to_string(f)) return f;
  throw ConfigError("unknown loss '" + s + "' (expected infonce-cos, hcl, supcon, shcl or rhcl)");
}

inline bool is_supervised(LossFamily f) { return f == LossFamily::supcon || f == LossFamily::shcl; }
inline bool is_hyperbolic(LossFamily f) { return f == LossFamily::hcl || f == LossFamily::shcl || f == LossFamily::rhcl; }

struct TrainConfig {
  // run
  std::string run_id;  // empty: derived from time and seed
  std::uint64_t seed = 0;
  std::string precision = "f32";

  // data
  std::string dataset = "tree";  // tree | tree-images | cifar-desk | htree
  std::string data_path;         // CIFAR directory or HTREE1 file
  int tree_branching = 2;
  int tree_depth = 3;
  int tree_class_level = 1;
  std::size_t tree_feature_dim = 32;
  double tree_edge_noise = 1.0;
  double tree_edge_decay = 0.5;
  double tree_obs_noise = 0.1;
  std::size_t tree_train_per_leaf = 40;
  std::size_t tree_test_per_leaf = 20;
  double image_gain = 0.3;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  double vector_noise = 0.1;
  double vector_mask = 0.1;

  // encoder
  std::string encoder = "mlp";
  std::size_t input_dim = 0;  // 0: taken from the dataset
  std::string widths = "512,256";
  std::size_t conv_channels = 8;
  std::size_t embed_dim = 128;
  std::size_t proj_hidden = 0;

  // loss
  LossFamily loss = LossFamily::hcl;
  double curvature = 0.1;
  double boundary_eps = 1e-5;
  double temperature = 0.5;
  bool normalize_first = true;
  double lambda = 1.0;

  // optimizer
  std::size_t batch_size = 256;
  std::size_t epochs = 20;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  // probe
  std::size_t probe_epochs = 30;
  double probe_lr = 0.1;
  std::size_t probe_batch = 256;

  // attack
  double attack_eps = 8.0 / 255.0;
  double attack_alpha = 2.0 / 255.0;
  int attack_steps = 10;
  int train_attack_steps = 7;
  bool random_start = false;

  std::vector<std::size_t> width_list() const {
    std::vector<std::size_t> out;
    for (double w : parse_real_list(widths, "widths")) {
      if (w < 1 || w != std::floor(w)) throw ConfigError("widths: entries must be positive integers");
      out.push_back(std::size_t(w));
    }
    return out;
  }

  BallConfig ball() const { return {curvature, boundary_eps, embed_dim}; }

  EmbeddingSpace space() const {
    return is_hyperbolic(loss) ? EmbeddingSpace::poincare(ball()) : EmbeddingSpace::cosine();
  }

  EncoderSpec encoder_spec() const {
    EncoderSpec s;
    s.kind = encoder_kind_from_string(encoder);
    s.input_dim = input_dim;
    s.widths = width_list();
    s.conv_channels = conv_channels;
    s.embed_dim = embed_dim;
    s.proj_hidden = proj_hidden;
    return s;
  }

  AttackConfig attack(int steps) const {
    AttackConfig a;
    a.epsilon = attack_eps;
    a.alpha = attack_alpha;
    a.steps = steps;
    a.loss_space = space();
    a.temperature = temperature;
    a.normalize_first = normalize_first;
    a.random_start = random_start;
    a.seed = seed;
    return a;
  }

  TreeDatasetSpec tree_spec() const;

  void validate() const {
    if (precision != "f32" && precision != "f64") throw ConfigError("precision must be f32 or f64");
    if (dataset != "tree" && dataset != "tree-images" && dataset != "cifar-desk" && dataset != "htree") {
      throw ConfigError("unknown dataset '" + dataset + "' (expected tree, tree-images, cifar-desk or htree)");
    }
    if ((dataset == "htree" || dataset == "cifar-desk") && data_path.empty()) {
      throw ConfigError("dataset " + dataset + " needs data_path");
    }
    try {
      encoder_kind_from_string(encoder);
      ball().validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    (void)width_list();
    if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
    if (!(temperature > 0)) throw ConfigError("temperature must be > 0");
    if (!(lambda >= 0)) throw ConfigError("lambda must be >= 0");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (probe_batch < 1) throw ConfigError("probe_batch must be >= 1");
    if (!(lr >= 0) || !(probe_lr >= 0)) throw ConfigError("learning rates must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
    if (!(attack_eps >= 0) || !(attack_alpha >= 0)) throw ConfigError("attack_eps and attack_alpha must be >= 0");
    if (attack_steps < 0 || train_attack_steps < 0) throw ConfigError("attack step counts must be >= 0");
    if (tree_train_per_leaf == 0) throw ConfigError("tree_train_per_leaf must be positive");
  }
};

/// Schema entry: one config key with its section, help text and accessors.
struct ConfigKey {
  const char* section;
  const char* name;
  const char* help;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
  bool quoted = false;
};

namespace detail {

template <class Int>
Int checked_unsigned(const std::string& v, const std::string& key) {
  const long long x = parse_integer(v, key);
  if (x < 0) throw ConfigError(key + ": must be >= 0");
  return Int(x);
}

#define PCON_KEY_REAL(sec, field, help) \
  ConfigKey{sec, #field, help, [](TrainConfig& c, const std::string& v) { c.field = parse_real(v, #field); }, \
            [](const TrainConfig& c) { return format_real(c.field); }}
#define PCON_KEY_SIZE(sec, field, help)                                                                      \
  ConfigKey{sec, #field, help,                                                                               \
            [](TrainConfig& c, const std::string& v) { c.field = checked_unsigned<std::size_t>(v, #field); }, \
            [](const TrainConfig& c) { return std::to_string(c.field); }}
#define PCON_KEY_INT(sec, field, help)                                                                      \
  ConfigKey{sec, #field, help, [](TrainConfig& c, const std::string& v) { c.field = int(parse_integer(v, #field)); }, \
            [](const TrainConfig& c) { return std::to_string(c.field); }}
#define PCON_KEY_BOOL(sec, field, help)                                                                     \
  ConfigKey{sec, #field, help, [](TrainConfig& c, const std::string& v) { c.field = parse_bool(v, #field); }, \
            [](const TrainConfig& c) { return std::string(c.field ? "true" : "false"); }}
#define PCON_KEY_STR(sec, field, help)                                                                    \
  ConfigKey{sec, #field, help, [](TrainConfig& c, const std::string& v) { c.field = v; },                  \
            [](const TrainConfig& c) { return c.field; }, true}

inline const std::vector<ConfigKey>& build_schema() {
  static const std::vector<ConfigKey> keys = {
      PCON_KEY_STR("run", run_id, "run directory name; empty derives one from time and seed"),
      ConfigKey{"run", "seed", "seed for initialization, shuffling, augmentation and synthetic data",
                [](TrainConfig& c, const std::string& v) { c.seed = checked_unsigned<std::uint64_t>(v, "seed"); },
                [](const TrainConfig& c) { return std::to_string(c.seed); }},
      PCON_KEY_STR("run", precision, "f32 for training speed, f64 for exact reproducibility"),

      PCON_KEY_STR("data", dataset, "tree | tree-images | cifar-desk | htree"),
      PCON_KEY_STR("data", data_path, "CIFAR-10 binary directory (cifar-desk) or HTREE1 file (htree)"),
      PCON_KEY_INT("data", tree_branching, "tree branching factor b"),
      PCON_KEY_INT("data", tree_depth, "tree depth; leaves sit at this level"),
      PCON_KEY_INT("data", tree_class_level, "level whose subtrees define the classes"),
      PCON_KEY_SIZE("data", tree_feature_dim, "latent feature dimension of tree nodes"),
      PCON_KEY_REAL("data", tree_edge_noise, "edge noise scale at level 1"),
      PCON_KEY_REAL("data", tree_edge_decay, "edge noise multiplier per level"),
      PCON_KEY_REAL("data", tree_obs_noise, "observation noise added to every sample"),
      PCON_KEY_SIZE("data", tree_train_per_leaf, "training samples per leaf"),
      PCON_KEY_SIZE("data", tree_test_per_leaf, "test samples per leaf"),
      PCON_KEY_REAL("data", image_gain, "contrast of rendered tree images"),
      PCON_KEY_SIZE("data", train_per_class, "CIFAR desk subset: training images per class"),
      PCON_KEY_SIZE("data", test_per_class, "CIFAR desk subset: test images per class"),
      PCON_KEY_REAL("data", vector_noise, "Gaussian noise scale of vector views"),
      PCON_KEY_REAL("data", vector_mask, "masking probability of vector views"),

      PCON_KEY_STR("encoder", encoder, "mlp | conv-stem-mlp"),
      PCON_KEY_SIZE("encoder", input_dim, "input width; 0 takes it from the dataset"),
      PCON_KEY_STR("encoder", widths, "comma-separated hidden widths of the encoder"),
      PCON_KEY_SIZE("encoder", conv_channels, "output channels of the 3x3 stem"),
      PCON_KEY_SIZE("encoder", embed_dim, "projection output dimension"),
      PCON_KEY_SIZE("encoder", proj_hidden, "hidden width of the projection head; 0 for a single layer"),

      ConfigKey{"loss", "loss", "infonce-cos | hcl | supcon | shcl | rhcl",
                [](TrainConfig& c, const std::string& v) { c.loss = loss_family_from_string(v); },
                [](const TrainConfig& c) { return std::string(to_string(c.loss)); }, true},
      PCON_KEY_REAL("loss", curvature, "ball curvature c"),
      PCON_KEY_REAL("loss", boundary_eps, "safety margin inside the ball boundary"),
      PCON_KEY_REAL("loss", temperature, "softmax temperature"),
      PCON_KEY_BOOL("loss", normalize_first, "L2-normalize embeddings before the exponential map"),
      PCON_KEY_REAL("loss", lambda, "weight of the adversarial-anchor term (rhcl)"),

      PCON_KEY_SIZE("optim", batch_size, "source images per pretraining batch (two views each)"),
      PCON_KEY_SIZE("optim", epochs, "pretraining epochs"),
      PCON_KEY_REAL("optim", lr, "base learning rate, cosine-annealed to 0"),
      PCON_KEY_REAL("optim", momentum, "SGD momentum"),
      PCON_KEY_REAL("optim", weight_decay, "L2 weight decay"),

      PCON_KEY_SIZE("probe", probe_epochs, "linear probe epochs; lr x0.1 at 60% and 80%"),
      PCON_KEY_REAL("probe", probe_lr, "linear probe learning rate"),
      PCON_KEY_SIZE("probe", probe_batch, "linear probe batch size"),

      PCON_KEY_REAL("attack", attack_eps, "l_inf radius in [0,1] pixel units"),
      PCON_KEY_REAL("attack", attack_alpha, "PGD step size"),
      PCON_KEY_INT("attack", attack_steps, "PGD steps at evaluation"),
      PCON_KEY_INT("attack", train_attack_steps, "PGD steps inside rhcl training"),
      PCON_KEY_BOOL("attack", random_start, "start PGD at a random point of the l_inf ball"),
  };
  return keys;
}

#undef PCON_KEY_REAL
#undef PCON_KEY_SIZE
#undef PCON_KEY_INT
#undef PCON_KEY_BOOL
#undef PCON_KEY_STR

}  // namespace detail

inline const std::vector<ConfigKey>& config_schema() { return detail::build_schema(); }

inline const ConfigKey& find_config_key(std::string_view name) {
  const auto dot = name.find('.');
  const std::string_view section = dot == std::string_view::npos ? std::string_view{} : name.substr(0, dot);
  const std::string_view key = dot == std::string_view::npos ? name : name.substr(dot + 1);
  for (const auto& k : config_schema()) {
    if (key == k.name && (section.empty() || section == k.section)) return k;
  }
  throw ConfigError("unknown config key '" + std::string(name) + "'");
}

inline TreeDatasetSpec TrainConfig::tree_spec() const {
  TreeDatasetSpec t;
  t.branching = tree_branching;
  t.depth = tree_depth;
  t.class_level = tree_class_level;
  t.feature_dim = tree_feature_dim;
  t.edge_noise = tree_edge_noise;
  t.edge_decay = tree_edge_decay;
  t.obs_noise = tree_obs_noise;
  return t;
}

inline void apply_override(TrainConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  const auto key = detail::trim(assignment.substr(0, eq));
  auto value = detail::trim(assignment.substr(eq + 1));
  if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
  find_config_key(key).set(cfg, std::string(value));
}

/// Applies entries onto cfg. Sections named in `ignore_sections` are skipped.
inline void apply_entries(TrainConfig& cfg, const std::vector<ConfigEntry>& entries, const std::string& origin,
                          const std::vector<std::string>& ignore_sections = {}) {
  for (const auto& e : entries) {
    if (std::find(ignore_sections.begin(), ignore_sections.end(), e.section) != ignore_sections.end()) continue;
    try {
      const auto& key = find_config_key(e.key);
      if (!e.section.empty() && e.section != key.section) {
        throw ConfigError("key '" + e.key + "' belongs in [" + key.section + "], not [" + e.section + "]");
      }
      key.set(cfg, e.value);
    } catch (const ConfigError& err) {
      throw ConfigError(origin + ":" + std::to_string(e.line) + ": " + err.what());
    }
  }
}

inline TrainConfig parse_train_config(std::string_view text, const std::string& origin = "<config>") {
  TrainConfig cfg;
  apply_entries(cfg, parse_config_text(text, origin), origin);
  return cfg;
}

/// Full config as text; parse_train_config(to_text(c)) reproduces c.
inline std::string to_text(const TrainConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& k : config_schema()) {
    if (section != k.section) {
      if (!section.empty()) out << '\n';
      section = k.section;
      out << '[' << section << "]\n";
    }
    const std::string v = k.get(cfg);
    out << k.name << " = " << (k.quoted ? "\"" + v + "\"" : v) << '\n';
  }
  return out.str();
}

/// One line per key with its default, grouped by section.
inline std::string config_help() {
  const TrainConfig defaults;
  std::ostringstream out;
  std::string section;
  for (const auto& k : config_schema()) {
    if (section != k.section) {
      section = k.section;
      out << "  [" << section << "]\n";
    }
    std::string v = k.get(defaults);
    if (k.quoted) v = "\"" + v + "\"";
    std::string lhs = std::string("    ") + k.name + " = " + v;
    if (lhs.size() < 40) lhs.resize(40, ' ');
    out << lhs << "  " << k.help << '\n';
  }
  return out.str();
}

}  // namespace pcon
