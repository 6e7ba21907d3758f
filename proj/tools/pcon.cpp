// pcon: pretraining, probing, attacks, curvature sweeps, self-test and
// synthetic data generation from the command line.
//
// Exit codes: 0 ok, 1 config error, 2 data error, 3 divergence,
// 4 self-test failure, 5 run directory already exists.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pcon/checkpoint.hpp"
#include "pcon/config.hpp"
#include "pcon/data.hpp"
#include "pcon/metrics.hpp"
#include "pcon/selftest.hpp"
#include "pcon/svg.hpp"
#include "pcon/train.hpp"

namespace fs = std::filesystem;
using namespace pcon;

namespace {

enum ExitCode { kOk = 0, kConfig = 1, kData = 2, kDivergence = 3, kSelftest = 4, kRunExists = 5 };

struct RunExists : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "runs";
  std::string run_id;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "config file (TOML-style key = value with [sections])");
  cmd->add_option("--set", o.overrides, "override a config key, e.g. --set loss=shcl (repeatable)");
  cmd->add_option("--seed", o.seed, "shortcut for --set seed=N");
  cmd->add_option("--out-dir", o.out_dir, "directory that holds run directories")->capture_default_str();
  cmd->add_option("--run-id", o.run_id, "shortcut for --set run_id=NAME");
  cmd->add_flag("--force", o.force, "overwrite an existing run directory");
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read config file " + p.string());
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

/// defaults <- base (e.g. a checkpoint's config) <- --config <- --set <- --seed/--run-id
TrainConfig build_config(const CommonOptions& o, const TrainConfig& base = {}) {
  TrainConfig cfg = base;
  if (!o.config_path.empty()) apply_entries(cfg, parse_config_text(read_text(o.config_path), o.config_path), o.config_path);
  for (const auto& s : o.overrides) apply_override(cfg, s);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.run_id.empty()) cfg.run_id = o.run_id;
  if (cfg.dataset == "cifar-desk" && cfg.data_path.empty()) {
    if (const char* env = std::getenv("PCON_CIFAR_DIR")) cfg.data_path = env;
  }
  cfg.validate();
  return cfg;
}

std::string make_run_id(const std::string& command, const TrainConfig& cfg) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream s;
  s << command << '-' << std::put_time(&tm, "%Y%m%d-%H%M%S") << '-' << std::hex << std::setw(8) << std::setfill('0')
    << (mix64(cfg.seed ^ std::hash<std::string>{}(to_text(cfg))) & 0xffffffffULL);
  return s.str();
}

struct Run {
  std::string id;
  fs::path dir;
  std::vector<std::string> artifacts;

  fs::path file(const std::string& name) {
    artifacts.push_back(name);
    return dir / name;
  }
};

Run open_run(const std::string& command, TrainConfig& cfg, const CommonOptions& o) {
  if (cfg.run_id.empty()) cfg.run_id = make_run_id(command, cfg);
  Run run{cfg.run_id, fs::path(o.out_dir) / cfg.run_id, {}};
  if (fs::exists(run.dir)) {
    if (!o.force) throw RunExists("run directory " + run.dir.string() + " already exists (use --force to overwrite)");
    fs::remove_all(run.dir);
  }
  fs::create_directories(run.dir);
  return run;
}

void close_run(Run& run, const std::string& command, const TrainConfig& cfg) {
  append_manifest(run.dir, run.id, command, to_text(cfg), run.artifacts);
  std::cout << "run " << run.id << " -> " << run.dir.string() << '\n';
}

template <class F>
auto by_precision(const TrainConfig& cfg, F&& f) {
  return cfg.precision == "f64" ? f(double{}) : f(float{});
}

// ---------------------------------------------------------------------------
// Commands

int cmd_pretrain(const CommonOptions& o) {
  TrainConfig cfg = build_config(o);
  const auto data = load_dataset(cfg);
  cfg = resolve_config(cfg, data.train);
  Run run = open_run("pretrain", cfg, o);
  MetricsStream metrics(run.id);
  metrics.open(run.file("metrics.jsonl"));
  write_text(run.file("config.toml"), to_text(cfg));
  by_precision(cfg, [&](auto tag) {
    using T = decltype(tag);
    const auto result = pretrain<T>(cfg, data.train, metrics, [](std::size_t epoch, double loss) {
      std::cout << "epoch " << epoch << "  loss " << loss << '\n' << std::flush;
    });
    save_checkpoint(run.file("checkpoint.pcon"), result.checkpoint());
    write_text(run.file("loss.svg"), svg::line_chart(std::string(to_string(cfg.loss)) + " pretraining", "epoch",
                                                     "mean loss", {{to_string(cfg.loss), result.epoch_loss}}));
    return 0;
  });
  close_run(run, "pretrain", cfg);
  return kOk;
}

int cmd_probe(const CommonOptions& o, const std::string& checkpoint_path) {
  const auto ckpt = load_checkpoint(checkpoint_path);
  TrainConfig cfg = build_config(o, ckpt.config);
  cfg.run_id = o.run_id;
  const auto data = load_dataset(cfg);
  Run run = open_run("probe", cfg, o);
  MetricsStream metrics(run.id);
  metrics.open(run.file("metrics.jsonl"));
  by_precision(cfg, [&](auto tag) {
    using T = decltype(tag);
    const auto net = ckpt.restore<T>();
    const auto probe = linear_probe(cfg, net, data, metrics);
    std::cout << "probe top-1  train " << probe.train_accuracy << "  test " << probe.test_accuracy << '\n';
    return 0;
  });
  close_run(run, "probe", cfg);
  return kOk;
}

int cmd_attack(const CommonOptions& o, const std::string& checkpoint_path, std::optional<double> eps,
               std::optional<double> alpha, std::optional<int> steps) {
  const auto ckpt = load_checkpoint(checkpoint_path);
  TrainConfig cfg = build_config(o, ckpt.config);
  cfg.run_id = o.run_id;
  if (eps) cfg.attack_eps = *eps;
  if (alpha) cfg.attack_alpha = *alpha;
  if (steps) cfg.attack_steps = *steps;
  cfg.validate();
  const auto data = load_dataset(cfg);
  if (!data.test.image) throw ConfigError("attacks perturb pixels in [0,1]; choose an image dataset");
  const auto attack = cfg.attack(cfg.attack_steps);
  if (attack.step_exceeds_radius()) std::cerr << "warning: attack_alpha exceeds attack_eps\n";
  Run run = open_run("attack", cfg, o);
  MetricsStream metrics(run.id);
  metrics.open(run.file("metrics.jsonl"));
  by_precision(cfg, [&](auto tag) {
    using T = decltype(tag);
    const auto net = ckpt.restore<T>();
    const auto probe = linear_probe(cfg, net, data, metrics);
    const auto r = robust_eval(net, probe, data.test, attack);
    metrics.emit(-1, "test", "clean_top1", r.clean_accuracy);
    metrics.emit(-1, "test", "robust_top1", r.robust_accuracy);
    metrics.emit(-1, "test", "max_linf", r.max_linf);
    std::cout << "eps " << cfg.attack_eps << "  clean " << r.clean_accuracy << "  robust " << r.robust_accuracy
              << "  max |x_adv - x| " << r.max_linf << '\n';
    return 0;
  });
  close_run(run, "attack", cfg);
  return kOk;
}

int cmd_sweep(const CommonOptions& o, const std::string& values, const std::string& dataset) {
  TrainConfig cfg = build_config(o);
  if (!dataset.empty()) {
    apply_override(cfg, "dataset=" + dataset);
    if (cfg.dataset == "cifar-desk" && cfg.data_path.empty()) {
      if (const char* env = std::getenv("PCON_CIFAR_DIR")) cfg.data_path = env;
    }
    cfg.validate();
  }
  const auto curvatures = parse_real_list(values, "--c");
  if (curvatures.empty()) throw ConfigError("--c needs at least one curvature");
  for (double c : curvatures)
    if (!(c > 0)) throw ConfigError("--c values must be > 0");
  if (!is_hyperbolic(cfg.loss) || cfg.loss == LossFamily::rhcl) cfg.loss = LossFamily::hcl;
  const auto data = load_dataset(cfg);
  cfg = resolve_config(cfg, data.train);
  Run run = open_run("sweep", cfg, o);
  MetricsStream metrics(run.id);
  metrics.open(run.file("metrics.jsonl"));
  const auto rows = by_precision(cfg, [&](auto tag) {
    using T = decltype(tag);
    return curvature_sweep<T>(cfg, curvatures, data, metrics);
  });
  std::ostringstream table;
  table << "curvature\tfinal_loss\tprobe_top1\n";
  std::vector<std::pair<std::string, double>> bars;
  for (const auto& r : rows) {
    table << format_real(r.curvature) << '\t' << r.final_loss << '\t' << r.probe_accuracy << '\n';
    bars.push_back({"c=" + format_real(r.curvature), r.probe_accuracy});
  }
  std::cout << table.str();
  write_text(run.file("sweep.tsv"), table.str());
  write_text(run.file("sweep.svg"), svg::bar_chart("probe accuracy by curvature", "top-1", bars));
  close_run(run, "sweep", cfg);
  return kOk;
}

int cmd_selftest(std::size_t cases, std::size_t grad_configs) {
  std::vector<PropertyResult> all;
  for (auto suite : {geometry_properties(cases), primitive_gradient_properties(std::max<std::size_t>(cases / 5, 1)),
                     loss_gradient_properties(grad_configs)}) {
    all.insert(all.end(), suite.begin(), suite.end());
  }
  std::map<std::string, std::pair<int, int>> groups;
  for (const auto& r : all) {
    std::printf("%-4s %-16s %-58s worst %.3e  tol %.0e  (%zu cases)\n", r.passed() ? "ok" : "FAIL", r.group.c_str(),
                r.name.c_str(), r.worst, r.tolerance, r.cases);
    auto& g = groups[r.group];
    ++g.second;
    if (r.passed()) ++g.first;
  }
  bool ok = true;
  std::cout << "\nsummary\n";
  for (const auto& [name, counts] : groups) {
    std::cout << "  " << name << ": " << counts.first << "/" << counts.second << " passed\n";
    ok = ok && counts.first == counts.second;
  }
  std::cout << (ok ? "all property groups passed\n" : "property failures detected\n");
  return ok ? kOk : kSelftest;
}

int cmd_gen_data(const CommonOptions& o, const std::string& out, const std::string& format, bool unlabeled) {
  TrainConfig cfg = build_config(o);
  const auto spec = cfg.tree_spec();
  const std::size_t per_leaf = cfg.tree_train_per_leaf + cfg.tree_test_per_leaf;
  const auto tree = gen_tree_dataset(spec, per_leaf, cfg.seed);
  if (format == "htree") {
    Dataset d = tree.data;
    if (unlabeled) {
      d.classes = 0;
      std::fill(d.y.begin(), d.y.end(), -1);
    }
    write_bytes(out, encode_htree(d));
    std::cout << "wrote " << d.size() << " samples (" << d.dim << " features, " << d.classes << " classes) to " << out
              << '\n';
  } else if (format == "cifar") {
    if (tree.data.classes > 10) throw ConfigError("cifar format holds at most 10 classes");
    const auto images = render_tree_images(tree.data, mix64(cfg.seed + 1), cfg.image_gain);
    std::vector<ImageRecord> train, test;
    for (std::size_t i = 0; i < images.size(); ++i) (i % per_leaf < cfg.tree_train_per_leaf ? train : test).push_back(images[i]);
    fs::create_directories(out);
    write_bytes(fs::path(out) / "data_batch_1.bin", serialize_cifar(train));
    write_bytes(fs::path(out) / "test_batch.bin", serialize_cifar(test));
    std::cout << "wrote " << train.size() << " train and " << test.size() << " test images to " << out << '\n';
  } else {
    throw ConfigError("--format must be htree or cifar");
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  configure_threads();
  CLI::App app{"Hyperbolic contrastive learning toolkit"};
  app.require_subcommand(1);
  app.footer("Config keys (file sections in brackets, defaults shown):\n" + config_help() +
             "\nEnvironment: PCON_THREADS caps BLAS threads (default 1); PCON_CIFAR_DIR supplies data_path for "
             "cifar-desk.\nExit codes: 1 config, 2 data, 3 divergence, 4 self-test failure, 5 run exists.");

  CommonOptions common;
  auto* pre = app.add_subcommand("pretrain", "pretrain an encoder and write checkpoint, metrics and loss curve");
  add_common(pre, common);

  std::string checkpoint;
  auto* probe = app.add_subcommand("probe", "train a linear probe on a frozen checkpoint");
  add_common(probe, common);
  probe->add_option("--checkpoint", checkpoint, "checkpoint.pcon written by pretrain")->required();

  std::optional<double> eps, alpha;
  std::optional<int> steps;
  auto* attack = app.add_subcommand("attack", "probe a checkpoint, then measure PGD robust accuracy");
  add_common(attack, common);
  attack->add_option("--checkpoint", checkpoint, "checkpoint.pcon written by pretrain")->required();
  attack->add_option("--eps", eps, "l_inf radius (fractions like 8/255 via --set attack_eps=8/255)");
  attack->add_option("--alpha", alpha, "PGD step size");
  attack->add_option("--steps", steps, "PGD steps");

  std::string curvatures = "0.1,0.6", sweep_dataset;
  auto* sweep = app.add_subcommand("sweep", "pretrain and probe once per curvature value");
  add_common(sweep, common);
  sweep->add_option("--c", curvatures, "comma-separated curvature values")->capture_default_str();
  sweep->add_option("--dataset", sweep_dataset, "shortcut for --set dataset=NAME");

  std::size_t cases = 1000, grad_configs = 100;
  auto* self = app.add_subcommand("selftest", "run the geometry and gradient property suites");
  self->add_option("--cases", cases, "random cases per geometry property")->capture_default_str();
  self->add_option("--grad-configs", grad_configs, "random configurations per loss gradient check")->capture_default_str();

  std::string out, format = "htree";
  bool unlabeled = false;
  auto* gen = app.add_subcommand("gen-data", "write the synthetic tree dataset (HTREE1 or CIFAR binary layout)");
  add_common(gen, common);
  gen->add_option("--out", out, "output file (htree) or directory (cifar)")->required();
  gen->add_option("--format", format, "htree | cifar")->capture_default_str();
  gen->add_flag("--unlabeled", unlabeled, "store labels as -1 and zero classes (htree only)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*pre) return cmd_pretrain(common);
    if (*probe) return cmd_probe(common, checkpoint);
    if (*attack) return cmd_attack(common, checkpoint, eps, alpha, steps);
    if (*sweep) return cmd_sweep(common, curvatures, sweep_dataset);
    if (*self) return cmd_selftest(cases, grad_configs);
    if (*gen) return cmd_gen_data(common, out, format, unlabeled);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kData;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return kDivergence;
  } catch (const RunExists& e) {
    std::cerr << e.what() << '\n';
    return kRunExists;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  }
  return kOk;
}
