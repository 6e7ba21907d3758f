#include <gtest/gtest.h>

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include "pcon/checkpoint.hpp"
#include "pcon/train.hpp"

using namespace pcon;
namespace fs = std::filesystem;

namespace {

TrainConfig small_tree_config() {
  TrainConfig cfg;
  cfg.seed = 3;
  cfg.dataset = "tree";
  cfg.tree_depth = 2;
  cfg.tree_feature_dim = 16;
  cfg.tree_train_per_leaf = 16;
  cfg.tree_test_per_leaf = 8;
  cfg.widths = "32";
  cfg.embed_dim = 8;
  cfg.batch_size = 16;
  cfg.epochs = 2;
  cfg.probe_epochs = 5;
  return cfg;
}

fs::path scratch_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const auto dir = fs::temp_directory_path() /
                   ("pcon_train_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

template <class T>
std::vector<std::vector<T>> snapshot(const std::vector<Tensor<T>>& params) {
  std::vector<std::vector<T>> out;
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

Dataset random_dataset(std::size_t n, std::size_t dim, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g;
  std::uniform_int_distribution<int> label(0, classes - 1);
  Dataset d;
  d.dim = dim;
  d.classes = classes;
  for (std::size_t i = 0; i < n * dim; ++i) d.x.push_back(g(rng));
  for (std::size_t i = 0; i < n; ++i) d.y.push_back(label(rng));
  return d;
}

}  // namespace

TEST(Schedules, CosineEndpointsAndShape) {
  EXPECT_DOUBLE_EQ(cosine_lr(0.3, 0, 100), 0.3);
  EXPECT_NEAR(cosine_lr(0.3, 100, 100), 0.0, 1e-17);
  EXPECT_NEAR(cosine_lr(0.3, 50, 100), 0.15, 1e-15);
  EXPECT_DOUBLE_EQ(cosine_lr(0.3, 5, 0), 0.3);
  for (std::size_t t = 1; t <= 100; ++t) EXPECT_LE(cosine_lr(1.0, t, 100), cosine_lr(1.0, t - 1, 100));
  for (std::size_t t = 0; t <= 100; ++t)
    EXPECT_NEAR(cosine_lr(1.0, t, 100) + cosine_lr(1.0, 100 - t, 100), 1.0, 1e-15);
}

TEST(Schedules, StepDecay) {
  const std::vector<std::size_t> m{6, 8};
  EXPECT_DOUBLE_EQ(step_lr(1.0, 0, m), 1.0);
  EXPECT_DOUBLE_EQ(step_lr(1.0, 5, m), 1.0);
  EXPECT_DOUBLE_EQ(step_lr(1.0, 6, m), 0.1);
  EXPECT_DOUBLE_EQ(step_lr(1.0, 7, m), 0.1);
  EXPECT_NEAR(step_lr(1.0, 9, m), 0.01, 1e-15);
}

TEST(Sgd, MomentumAndDecayMatchHandComputation) {
  Tensor<double> w({1, 2}, {1.0, -2.0}, true);
  Sgd<double> opt({w}, 0.9, 0.1);
  const double lr = 0.5;
  // loss = sum(3 * w): gradient is 3 everywhere.
  std::vector<double> ref{1.0, -2.0}, buf{0.0, 0.0};
  for (int step = 0; step < 3; ++step) {
    opt.zero_grad();
    {
      Tape tape;
      tape.backward(sum(w * 3.0));
    }
    opt.step(lr);
    for (int k = 0; k < 2; ++k) {
      const double g = 3.0 + 0.1 * ref[k];
      buf[k] = 0.9 * buf[k] + g;
      ref[k] -= lr * buf[k];
    }
    EXPECT_DOUBLE_EQ(w.data()[0], ref[0]);
    EXPECT_DOUBLE_EQ(w.data()[1], ref[1]);
  }
}

TEST(Sgd, ParametersWithoutGradientStayPut) {
  Tensor<double> a({1, 1}, {1.0}, true), b({1, 1}, {2.0}, true);
  Sgd<double> opt({a, b}, 0.9, 0.5);
  {
    Tape tape;
    tape.backward(sum(a * a));
  }
  opt.step(0.1);
  EXPECT_NE(a.data()[0], 1.0);
  EXPECT_EQ(b.data()[0], 2.0);
}

TEST(Pretrain, ZeroEpochsKeepsInitialWeights) {
  auto cfg = small_tree_config();
  cfg.epochs = 0;
  const auto data = load_dataset(cfg);
  MetricsStream metrics;
  const auto run = pretrain<float>(cfg, data.train, metrics);
  EXPECT_TRUE(run.epoch_loss.empty());
  const ContrastiveNet<float> fresh(run.config.encoder_spec(), cfg.seed);
  EXPECT_EQ(snapshot(run.net.parameters()), snapshot(fresh.parameters()));
}

TEST(Pretrain, RecordsOneLossPerEpochAndLowersIt) {
  auto cfg = small_tree_config();
  cfg.epochs = 6;
  const auto data = load_dataset(cfg);
  MetricsStream metrics("r");
  std::vector<std::size_t> seen;
  const auto run = pretrain<float>(cfg, data.train, metrics, [&](std::size_t e, double) { seen.push_back(e); });
  ASSERT_EQ(run.epoch_loss.size(), 6u);
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(metrics.series("train", "loss"), run.epoch_loss);
  EXPECT_LT(run.epoch_loss.back(), run.epoch_loss.front());
  EXPECT_EQ(run.config.input_dim, 16u);
  EXPECT_FALSE(run.rng_state.empty());
}

TEST(Pretrain, EveryLossFamilyRuns) {
  for (auto loss : {LossFamily::infonce_cos, LossFamily::hcl, LossFamily::supcon, LossFamily::shcl}) {
    auto cfg = small_tree_config();
    cfg.loss = loss;
    cfg.epochs = 1;
    const auto data = load_dataset(cfg);
    MetricsStream metrics;
    const auto run = pretrain<float>(cfg, data.train, metrics);
    ASSERT_EQ(run.epoch_loss.size(), 1u) << to_string(loss);
    EXPECT_TRUE(std::isfinite(run.epoch_loss[0])) << to_string(loss);
  }
}

TEST(Pretrain, RobustFamilyOnTreeImages) {
  auto cfg = small_tree_config();
  cfg.dataset = "tree-images";
  cfg.loss = LossFamily::rhcl;
  cfg.epochs = 1;
  cfg.train_attack_steps = 1;
  cfg.tree_train_per_leaf = 4;
  const auto data = load_dataset(cfg);
  ASSERT_TRUE(data.train.image.has_value());
  MetricsStream metrics;
  const auto run = pretrain<float>(cfg, data.train, metrics);
  ASSERT_EQ(run.epoch_loss.size(), 1u);
  EXPECT_TRUE(std::isfinite(run.epoch_loss[0]));
}

TEST(Pretrain, F64RunsAreBitIdentical) {
  auto cfg = small_tree_config();
  cfg.precision = "f64";
  const auto data = load_dataset(cfg);
  MetricsStream m1, m2;
  const auto a = pretrain<double>(cfg, data.train, m1);
  const auto b = pretrain<double>(cfg, data.train, m2);
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  EXPECT_EQ(snapshot(a.net.parameters()), snapshot(b.net.parameters()));
  EXPECT_EQ(a.rng_state, b.rng_state);
}

TEST(Pretrain, DifferentSeedsDiffer) {
  auto cfg = small_tree_config();
  const auto data = load_dataset(cfg);
  MetricsStream m;
  const auto a = pretrain<float>(cfg, data.train, m);
  cfg.seed = 4;
  const auto b = pretrain<float>(cfg, data.train, m);
  EXPECT_NE(a.epoch_loss, b.epoch_loss);
}

TEST(Pretrain, NonFiniteInputIsADataError) {
  auto cfg = small_tree_config();
  auto data = load_dataset(cfg);
  data.train.x[5 * data.train.dim + 1] = std::numeric_limits<float>::quiet_NaN();
  MetricsStream metrics;
  try {
    pretrain<float>(cfg, data.train, metrics);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 5"), std::string::npos) << e.what();
  }
}

TEST(Pretrain, ExplodingStepRaisesDivergence) {
  auto cfg = small_tree_config();
  cfg.lr = 1e38;
  const auto data = load_dataset(cfg);
  MetricsStream metrics;
  try {
    pretrain<float>(cfg, data.train, metrics);
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
  }
}

TEST(Pretrain, IncompatibleDataIsRejected) {
  auto cfg = small_tree_config();
  auto data = load_dataset(cfg);
  MetricsStream metrics;

  Dataset unlabeled = data.train;
  unlabeled.classes = 0;
  cfg.loss = LossFamily::shcl;
  EXPECT_THROW(pretrain<float>(cfg, unlabeled, metrics), ConfigError);
  cfg.loss = LossFamily::supcon;
  EXPECT_THROW(pretrain<float>(cfg, unlabeled, metrics), ConfigError);

  cfg.loss = LossFamily::rhcl;
  EXPECT_THROW(pretrain<float>(cfg, data.train, metrics), ConfigError);

  cfg.loss = LossFamily::hcl;
  cfg.encoder = "conv-stem-mlp";
  EXPECT_THROW(pretrain<float>(cfg, data.train, metrics), ConfigError);

  cfg.encoder = "mlp";
  cfg.input_dim = 7;
  EXPECT_THROW(pretrain<float>(cfg, data.train, metrics), DataError);
}

TEST(Probe, EncoderIsFrozenAndAccuracyReported) {
  auto cfg = small_tree_config();
  const auto data = load_dataset(cfg);
  MetricsStream metrics;
  const auto run = pretrain<float>(cfg, data.train, metrics);
  const auto before = snapshot(run.net.parameters());
  const auto probe = linear_probe(run.config, run.net, data, metrics);
  EXPECT_EQ(snapshot(run.net.parameters()), before);
  for (const auto& p : run.net.encoder_parameters()) EXPECT_TRUE(p.requires_grad());
  EXPECT_GE(probe.test_accuracy, 0.0);
  EXPECT_LE(probe.test_accuracy, 1.0);
  EXPECT_EQ(metrics.series("test", "probe_top1"), std::vector<double>{probe.test_accuracy});
  EXPECT_EQ(metrics.series("probe", "loss").size(), cfg.probe_epochs);
}

TEST(Probe, RandomLabelsGiveChanceAccuracy) {
  TrainConfig cfg;
  cfg.widths = "32";
  cfg.embed_dim = 8;
  cfg.probe_epochs = 10;
  DataSplit data{random_dataset(500, 12, 10, 1), random_dataset(4000, 12, 10, 2)};
  cfg.input_dim = 12;
  const ContrastiveNet<float> net(cfg.encoder_spec(), 5);
  MetricsStream metrics;
  const auto probe = linear_probe(cfg, net, data, metrics);
  EXPECT_NEAR(probe.test_accuracy, 0.10, 0.05);
}

TEST(Probe, LabelsOutsideTheClassRangeAreRejected) {
  auto cfg = small_tree_config();
  auto data = load_dataset(cfg);
  MetricsStream metrics;
  const auto run = pretrain<float>(cfg, data.train, metrics);
  data.test.y[0] = data.train.classes;
  EXPECT_THROW(linear_probe(run.config, run.net, data, metrics), DataError);
}

TEST(FeatureScalerTest, StandardizesTrainingFeatures) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(3.0, 2.0);
  std::vector<double> x(600);
  for (double& v : x) v = g(rng);
  const auto s = FeatureScaler::fit(x, 3);
  const auto z = s(Tensor<double>({200, 3}, x));
  for (std::size_t k = 0; k < 3; ++k) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 200; ++i) m += z.at(i, k);
    m /= 200;
    for (std::size_t i = 0; i < 200; ++i) v += (z.at(i, k) - m) * (z.at(i, k) - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 200, 1.0, 1e-5);
  }
}

TEST(RobustEval, ZeroBudgetMatchesClean) {
  auto cfg = small_tree_config();
  cfg.dataset = "tree-images";
  cfg.tree_train_per_leaf = 8;
  cfg.tree_test_per_leaf = 4;
  cfg.epochs = 1;
  const auto data = load_dataset(cfg);
  MetricsStream metrics;
  const auto run = pretrain<float>(cfg, data.train, metrics);
  const auto probe = linear_probe(run.config, run.net, data, metrics);

  auto zero_eps = run.config.attack(5);
  zero_eps.epsilon = 0.0;
  const auto r0 = robust_eval(run.net, probe, data.test, zero_eps);
  EXPECT_EQ(r0.robust_accuracy, r0.clean_accuracy);
  EXPECT_EQ(r0.max_linf, 0.0);
  EXPECT_NEAR(r0.clean_accuracy, probe.test_accuracy, 1e-12);

  const auto rs = robust_eval(run.net, probe, data.test, run.config.attack(0));
  EXPECT_EQ(rs.robust_accuracy, rs.clean_accuracy);

  const auto before = snapshot(run.net.parameters());
  const auto attacked = robust_eval(run.net, probe, data.test, run.config.attack(3));
  EXPECT_LE(attacked.robust_accuracy, attacked.clean_accuracy);
  EXPECT_LE(attacked.max_linf, run.config.attack_eps);
  EXPECT_EQ(snapshot(run.net.parameters()), before);
}

TEST(Checkpoints, RoundTripThroughBytesAndFiles) {
  auto cfg = small_tree_config();
  const auto data = load_dataset(cfg);
  MetricsStream metrics;
  const auto run = pretrain<float>(cfg, data.train, metrics);
  const auto ckpt = run.checkpoint();
  EXPECT_EQ(ckpt.epoch, cfg.epochs);

  const auto bytes = encode_checkpoint(ckpt);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.epoch, ckpt.epoch);
  EXPECT_EQ(back.rng_state, ckpt.rng_state);
  EXPECT_EQ(to_text(back.config), to_text(ckpt.config));
  EXPECT_EQ(encode_checkpoint(back), bytes);
  const auto net = back.restore<float>();
  EXPECT_EQ(snapshot(net.parameters()), snapshot(run.net.parameters()));

  const auto dir = scratch_dir("ckpt");
  save_checkpoint(dir / "model.pcon", ckpt);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(dir / "model.pcon")), bytes);
  fs::remove_all(dir);
}

TEST(Checkpoints, EveryTruncationIsRejected) {
  auto cfg = small_tree_config();
  cfg.epochs = 0;
  const auto data = load_dataset(cfg);
  MetricsStream metrics;
  const auto bytes = encode_checkpoint(pretrain<float>(cfg, data.train, metrics).checkpoint());
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    EXPECT_THROW(decode_checkpoint(std::span<const std::uint8_t>(bytes.data(), len)), CheckpointError) << len;
  }
  auto corrupt = bytes;
  corrupt[0] = 'X';
  EXPECT_THROW(decode_checkpoint(corrupt), CheckpointError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), CheckpointError);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.pcon"), DataError);
}

TEST(Checkpoints, MismatchedArchitectureIsRejected) {
  auto cfg = small_tree_config();
  cfg.input_dim = 16;
  const ContrastiveNet<float> net(cfg.encoder_spec(), 1);
  auto ckpt = Checkpoint::capture(cfg, net, 0);
  ckpt.config.widths = "64";
  EXPECT_THROW(ckpt.restore<float>(), CheckpointError);
}

TEST(Metrics, JsonLinesRoundTrip) {
  const MetricRecord r{"run \"1\"", 4, "train", "loss", 0.1 + 1e-17};
  const auto line = to_json_line(r);
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_EQ(metric_from_json_line(line), r);
  EXPECT_EQ(line.rfind("{\"run_id\":", 0), 0u);

  const auto dir = scratch_dir("metrics");
  {
    MetricsStream m("abc");
    m.open(dir / "metrics.jsonl");
    m.emit(1, "train", "loss", 2.5);
    m.emit(-1, "test", "probe_top1", 0.75);
  }
  std::ifstream in(dir / "metrics.jsonl");
  std::vector<MetricRecord> got;
  for (std::string l; std::getline(in, l);) got.push_back(metric_from_json_line(l));
  ASSERT_EQ(got.size(), 2u);
  EXPECT_EQ(got[0], (MetricRecord{"abc", 1, "train", "loss", 2.5}));
  EXPECT_EQ(got[1], (MetricRecord{"abc", -1, "test", "probe_top1", 0.75}));

  append_manifest(dir, "abc", "pretrain", "[run]\n", {"metrics.jsonl"});
  std::ifstream man(dir / "manifest.jsonl");
  std::string l;
  ASSERT_TRUE(std::getline(man, l));
  const auto j = nlohmann::json::parse(l);
  EXPECT_EQ(j.at("command"), "pretrain");
  EXPECT_EQ(j.at("artifacts").size(), 1u);
  fs::remove_all(dir);
}

TEST(Sweep, SingleValueGivesOneRow) {
  auto cfg = small_tree_config();
  cfg.epochs = 1;
  cfg.probe_epochs = 2;
  const auto data = load_dataset(cfg);
  MetricsStream metrics("s");
  const auto rows = curvature_sweep<float>(cfg, {0.3}, data, metrics);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].curvature, 0.3);
  EXPECT_TRUE(std::isfinite(rows[0].final_loss));
  EXPECT_EQ(metrics.series("sweep", "probe_top1@c=0.3"), std::vector<double>{rows[0].probe_accuracy});

  // The sweep result at one curvature equals a plain run with that curvature.
  cfg.curvature = 0.3;
  MetricsStream m2;
  const auto run = pretrain<float>(cfg, data.train, m2);
  EXPECT_EQ(run.epoch_loss.back(), rows[0].final_loss);
}

TEST(Datasets, HtreeSplitHoldsOutEveryThirdRow) {
  TreeDatasetSpec spec;
  spec.depth = 2;
  spec.feature_dim = 4;
  const auto tree = gen_tree_dataset(spec, 3, 1);
  const auto dir = scratch_dir("htree");
  const auto path = dir / "t.htree";
  write_bytes(path, encode_htree(tree.data));
  TrainConfig cfg;
  cfg.dataset = "htree";
  cfg.data_path = path.string();
  const auto split = load_dataset(cfg);
  EXPECT_EQ(split.test.size(), tree.data.size() / 3);
  EXPECT_EQ(split.train.size() + split.test.size(), tree.data.size());
  for (std::size_t i = 0, t = 0; i < tree.data.size(); ++i) {
    if (i % 3 != 2) continue;
    const auto a = split.test.row(t), b = tree.data.row(i);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
    ++t;
  }
  cfg.data_path = (dir / "missing.htree").string();
  EXPECT_THROW(load_dataset(cfg), DataError);
  fs::remove_all(dir);
}
