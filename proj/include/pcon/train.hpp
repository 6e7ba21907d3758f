#pragma once

// Pretraining loops for every loss family, the frozen-encoder linear probe,
// PGD robustness evaluation and the curvature sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <cblas.h>

#include "adversarial.hpp"
#include "autograd.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "nn.hpp"
#include "optim.hpp"

namespace pcon {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caps BLAS worker threads at PCON_THREADS (default 1, which also keeps
/// reductions in a fixed order).
inline int configure_threads() {
  int n = 1;
  if (const char* env = std::getenv("PCON_THREADS")) {
    try {
      n = std::max(1, std::stoi(env));
    } catch (const std::exception&) {
      n = 1;
    }
  }
  openblas_set_num_threads(n);
  return n;
}

// ---------------------------------------------------------------------------
// Data

/// Builds the train/test split named by cfg.dataset.
///   tree         latent tree vectors, first tree_train_per_leaf rows of each leaf train
///   tree-images  the same latent samples rendered as 32x32 RGB images
///   cifar-desk   first-k-per-class subset of CIFAR-10 binary batches in data_path
///   htree        HTREE1 file; every third row (index % 3 == 2) is held out
inline DataSplit load_dataset(const TrainConfig& cfg) {
  if (cfg.dataset == "tree" || cfg.dataset == "tree-images") {
    const auto spec = cfg.tree_spec();
    const std::size_t per_leaf = cfg.tree_train_per_leaf + cfg.tree_test_per_leaf;
    const auto tree = gen_tree_dataset(spec, per_leaf, cfg.seed);
    if (cfg.dataset == "tree") return split_per_leaf(tree, per_leaf, cfg.tree_train_per_leaf);
    if (tree.data.classes > 10) throw DataError("tree-images supports at most 10 classes");
    const auto images = render_tree_images(tree.data, mix64(cfg.seed + 1), cfg.image_gain);
    TreeDataset rendered{records_to_dataset(images, tree.data.classes), tree.leaf};
    return split_per_leaf(rendered, per_leaf, cfg.tree_train_per_leaf);
  }
  if (cfg.dataset == "cifar-desk") return load_cifar_desk(cfg.data_path, cfg.train_per_class, cfg.test_per_class);
  if (cfg.dataset == "htree") {
    if (!std::filesystem::exists(cfg.data_path)) throw DataError("missing dataset file " + cfg.data_path);
    const auto all = decode_htree(read_file_bytes(cfg.data_path), cfg.data_path);
    DataSplit s;
    for (Dataset* d : {&s.train, &s.test}) {
      d->dim = all.dim;
      d->classes = all.classes;
    }
    for (std::size_t i = 0; i < all.size(); ++i) {
      Dataset& d = i % 3 == 2 ? s.test : s.train;
      const auto r = all.row(i);
      d.x.insert(d.x.end(), r.begin(), r.end());
      d.y.push_back(all.y[i]);
    }
    return s;
  }
  throw ConfigError("unknown dataset '" + cfg.dataset + "'");
}

/// Fills cfg.input_dim from the data and checks the pairing of loss family,
/// encoder and dataset.
inline TrainConfig resolve_config(TrainConfig cfg, const Dataset& train) {
  cfg.validate();
  if (cfg.input_dim == 0) cfg.input_dim = train.dim;
  if (cfg.input_dim != train.dim) {
    throw DataError("dataset rows have " + std::to_string(train.dim) + " features, encoder expects " +
                    std::to_string(cfg.input_dim));
  }
  if (is_supervised(cfg.loss) && !train.labeled()) {
    throw ConfigError(std::string("loss ") + to_string(cfg.loss) + " needs a labeled dataset");
  }
  if (cfg.loss == LossFamily::rhcl && !train.image) {
    throw ConfigError("rhcl attacks pixel inputs in [0,1]; choose an image dataset");
  }
  if (cfg.encoder_spec().kind == EncoderKind::conv_stem_mlp && !train.image) {
    throw ConfigError("conv-stem-mlp needs an image dataset");
  }
  return cfg;
}

template <class T>
Tensor<T> rows_tensor(const Dataset& d, std::span<const std::size_t> idx) {
  std::vector<T> buf;
  buf.reserve(idx.size() * d.dim);
  for (std::size_t i : idx)
    for (float v : d.row(i)) buf.push_back(T(v));
  return Tensor<T>({idx.size(), d.dim}, std::move(buf));
}

/// Produces augmented views; the draw counter makes every view reproducible.
struct ViewSampler {
  const Dataset& data;
  AugmentationPolicy image_policy;
  VectorAugmentation vector_policy;

  ViewSampler(const Dataset& d, const TrainConfig& cfg) : data(d) {
    image_policy.seed = mix64(cfg.seed ^ 0xa5a5a5a5ULL);
    vector_policy = {cfg.vector_noise, cfg.vector_mask, mix64(cfg.seed ^ 0x5a5a5a5aULL)};
  }

  std::vector<float> view(std::size_t row, std::uint64_t draw) const {
    return data.image ? augment(data.row(row), *data.image, image_policy, draw)
                      : augment_vector(data.row(row), vector_policy, draw);
  }
};

template <class T>
void append_row(std::vector<T>& buf, const std::vector<float>& v) {
  for (float x : v) buf.push_back(T(x));
}

// ---------------------------------------------------------------------------
// Pretraining

template <class T>
struct PretrainResult {
  TrainConfig config;  // resolved
  ContrastiveNet<T> net;
  std::vector<double> epoch_loss;
  std::string rng_state;

  Checkpoint checkpoint() const { return Checkpoint::capture(config, net, epoch_loss.size(), rng_state); }
};

/// Mean training loss of one batch; the loss family decides the layout.
template <class T>
LossReport<double> batch_loss(const TrainConfig& cfg, const ContrastiveNet<T>& net, const Tensor<T>& views,
                              const std::vector<int>& labels) {
  const auto raw = cast<double>(net.embed(views));
  auto batch = project_embeddings(raw, cfg.space(), cfg.normalize_first, cfg.temperature);
  switch (cfg.loss) {
    case LossFamily::infonce_cos: return info_nce_cosine(batch);
    case LossFamily::hcl: return hcl_loss(batch);
    case LossFamily::supcon:
    case LossFamily::shcl: {
      batch.labels = labels;
      const auto positives = positives_from_batch(batch);
      return cfg.loss == LossFamily::supcon ? supcon_cosine(batch, positives) : shcl_loss(batch, positives);
    }
    case LossFamily::rhcl: break;
  }
  throw std::logic_error("batch_loss: rhcl batches go through rhcl_loss");
}

/// SGD with momentum and a per-iteration cosine-annealed learning rate.
/// Records the epoch mean of the per-batch mean loss as (epoch, "train", "loss").
template <class T>
PretrainResult<T> pretrain(const TrainConfig& cfg_in, const Dataset& train, MetricsStream& metrics,
                           const std::function<void(std::size_t, double)>& on_epoch = {}) {
  const TrainConfig cfg = resolve_config(cfg_in, train);
  PretrainResult<T> out{cfg, ContrastiveNet<T>(cfg.encoder_spec(), cfg.seed), {}, {}};
  auto& net = out.net;
  Sgd<T> opt(net.parameters(), cfg.momentum, cfg.weight_decay);
  std::mt19937_64 rng(mix64(cfg.seed ^ 0x7261696eULL));
  const ViewSampler sampler(train, cfg);

  const std::size_t n = train.size();
  if (n < 2) throw DataError("pretraining needs at least two samples");
  for (std::size_t i = 0; i < train.x.size(); ++i) {
    if (!std::isfinite(train.x[i])) {
      throw DataError("training row " + std::to_string(i / train.dim) + " holds a non-finite value");
    }
  }
  const std::size_t bsz = std::min(cfg.batch_size, n);
  const std::size_t iters = n / bsz;
  const std::size_t total_steps = cfg.epochs * iters;
  const AttackConfig train_attack = cfg.attack(cfg.train_attack_steps);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t draw = 0;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (std::size_t it = 0; it < iters; ++it) {
      std::vector<T> first, second, stacked;
      std::vector<int> labels;
      for (std::size_t k = 0; k < bsz; ++k) {
        const std::size_t row = order[it * bsz + k];
        const auto v1 = sampler.view(row, draw++);
        const auto v2 = sampler.view(row, draw++);
        if (cfg.loss == LossFamily::rhcl) {
          append_row(first, v1);
          append_row(second, v2);
        } else {
          append_row(stacked, v1);
          append_row(stacked, v2);
          labels.push_back(train.y[row]);
          labels.push_back(train.y[row]);
        }
      }
      opt.zero_grad();
      double batch_mean = 0.0;
      {
        Tape tape;
        LossReport<double> report;
        try {
          if (cfg.loss == LossFamily::rhcl) {
            const Tensor<T> a({bsz, train.dim}, std::move(first)), p({bsz, train.dim}, std::move(second));
            report = rhcl_loss(net, a, p, cfg.lambda, train_attack);
          } else {
            report = batch_loss(cfg, net, Tensor<T>({2 * bsz, train.dim}, std::move(stacked)), labels);
          }
        } catch (const NonFiniteEmbedding&) {
          throw DivergenceError("non-finite embedding at epoch " + std::to_string(epoch) + ", iteration " +
                                std::to_string(it));
        }
        const Tensor<double> mean_loss = report.total * (1.0 / double(report.per_anchor.rows()));
        batch_mean = mean_loss.item();
        if (!std::isfinite(batch_mean)) {
          throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", iteration " +
                                std::to_string(it));
        }
        tape.backward(mean_loss);
      }
      opt.step(cosine_lr(cfg.lr, step, total_steps));
      for (const auto& p : net.parameters()) {
        for (T v : p.data()) {
          if (!std::isfinite(double(v))) {
            throw DivergenceError("non-finite parameter after epoch " + std::to_string(epoch) + ", iteration " +
                                  std::to_string(it));
          }
        }
      }
      ++step;
      epoch_sum += batch_mean;
    }
    const double epoch_mean = epoch_sum / double(iters);
    out.epoch_loss.push_back(epoch_mean);
    metrics.emit((long long)epoch, "train", "loss", epoch_mean);
    metrics.emit((long long)epoch, "train", "lr", cosine_lr(cfg.lr, step, total_steps));
    if (on_epoch) on_epoch(epoch, epoch_mean);
  }
  std::ostringstream state;
  state << rng;
  out.rng_state = state.str();
  return out;
}

// ---------------------------------------------------------------------------
// Linear probe

/// Per-feature standardization fitted on the probe's training features.
struct FeatureScaler {
  std::vector<double> mean, inv_std;

  static FeatureScaler fit(std::span<const double> x, std::size_t dim) {
    FeatureScaler s{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
    const std::size_t n = x.size() / dim;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < dim; ++k) s.mean[k] += x[i * dim + k];
    for (double& m : s.mean) m /= double(n);
    std::vector<double> var(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < dim; ++k) var[k] += (x[i * dim + k] - s.mean[k]) * (x[i * dim + k] - s.mean[k]);
    for (std::size_t k = 0; k < dim; ++k) s.inv_std[k] = 1.0 / std::sqrt(var[k] / double(n) + 1e-6);
    return s;
  }

  template <class T>
  Tensor<T> operator()(const Tensor<T>& f) const {
    const std::size_t d = mean.size();
    std::vector<T> m(d), s(d);
    for (std::size_t k = 0; k < d; ++k) m[k] = T(mean[k]), s[k] = T(inv_std[k]);
    return (f - Tensor<T>({1, d}, std::move(m))) * Tensor<T>({1, d}, std::move(s));
  }
};

template <class T>
struct ProbeResult {
  LinearProbe<T> probe;
  FeatureScaler scaler;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;

  Tensor<T> logits(const ContrastiveNet<T>& net, const Tensor<T>& x) const { return probe(scaler(net.features(x))); }
};

template <class T>
std::vector<double> encoder_features(const ContrastiveNet<T>& net, const Dataset& d, std::size_t chunk = 512) {
  NoGradGuard no_grad;
  std::vector<double> out;
  out.reserve(d.size() * net.spec().feature_dim());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < d.size(); start += chunk) {
    idx.resize(std::min(chunk, d.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto f = net.features(rows_tensor<T>(d, idx));
    for (T v : f.data()) out.push_back(double(v));
  }
  return out;
}

template <class T>
double accuracy(const Tensor<T>& logits, std::span<const int> labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.cols(); ++k)
      if (logits.at(i, k) > logits.at(i, best)) best = k;
    hits += int(best) == labels[i];
  }
  return double(hits) / double(labels.size());
}

inline void check_labels(const Dataset& d, int classes, const char* split) {
  if (!d.labeled()) throw DataError(std::string(split) + " split has no labels");
  for (int y : d.y) {
    if (y < 0 || y >= classes) {
      throw DataError(std::string(split) + " label " + std::to_string(y) + " outside the probe's " +
                      std::to_string(classes) + " classes");
    }
  }
}

/// Trains one affine layer with softmax cross-entropy on frozen, standardized
/// encoder features (projection head dropped). SGD momentum 0.9, learning
/// rate x0.1 at 60% and 80% of the epochs. Throws std::logic_error if any
/// encoder parameter changed while the probe trained.
template <class T>
ProbeResult<T> linear_probe(const TrainConfig& cfg, const ContrastiveNet<T>& net, const DataSplit& data,
                            MetricsStream& metrics) {
  const int classes = data.train.classes;
  check_labels(data.train, classes, "train");
  check_labels(data.test, classes, "test");

  std::vector<std::vector<T>> before;
  for (const auto& p : net.encoder_parameters()) before.emplace_back(p.data().begin(), p.data().end());

  const std::size_t dim = net.spec().feature_dim();
  const auto train_f = encoder_features(net, data.train);
  const auto test_f = encoder_features(net, data.test);
  ProbeResult<T> out{LinearProbe<T>(dim, std::size_t(classes), mix64(cfg.seed ^ 0x70726f62ULL)),
                     FeatureScaler::fit(train_f, dim), 0.0, 0.0};

  auto to_tensor = [&](const std::vector<double>& f, std::span<const std::size_t> idx) {
    std::vector<T> buf;
    buf.reserve(idx.size() * dim);
    for (std::size_t i : idx)
      for (std::size_t k = 0; k < dim; ++k) buf.push_back(T(f[i * dim + k]));
    return out.scaler(Tensor<T>({idx.size(), dim}, std::move(buf)));
  };

  std::vector<Tensor<T>> params{out.probe.layer.weight, out.probe.layer.bias};
  Sgd<T> opt(params, 0.9, 0.0);
  std::mt19937_64 rng(mix64(cfg.seed ^ 0x73687566ULL));
  const std::size_t n = data.train.size();
  const std::size_t bsz = std::min(cfg.probe_batch, n);
  const std::vector<std::size_t> milestones{std::size_t(std::lround(0.6 * double(cfg.probe_epochs))),
                                            std::size_t(std::lround(0.8 * double(cfg.probe_epochs)))};
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.probe_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = step_lr(cfg.probe_lr, epoch, milestones);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += bsz) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(bsz, n - start));
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(data.train.y[i]);
      opt.zero_grad();
      Tape tape;
      const auto loss = cross_entropy(out.probe(to_tensor(train_f, idx)), std::span<const int>(labels));
      loss_sum += double(loss.item());
      ++batches;
      tape.backward(loss);
      opt.step(lr);
    }
    metrics.emit((long long)epoch + 1, "probe", "loss", loss_sum / double(batches));
  }

  {
    NoGradGuard no_grad;
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    out.train_accuracy = accuracy(out.probe(to_tensor(train_f, all)), std::span<const int>(data.train.y));
    std::vector<std::size_t> all_test(data.test.size());
    std::iota(all_test.begin(), all_test.end(), 0);
    out.test_accuracy = accuracy(out.probe(to_tensor(test_f, all_test)), std::span<const int>(data.test.y));
  }
  metrics.emit(-1, "train", "probe_top1", out.train_accuracy);
  metrics.emit(-1, "test", "probe_top1", out.test_accuracy);

  const auto after = net.encoder_parameters();
  for (std::size_t i = 0; i < after.size(); ++i) {
    const auto now = after[i].data();
    if (!std::equal(now.begin(), now.end(), before[i].begin(), before[i].end())) {
      throw std::logic_error("linear probe modified an encoder parameter");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Robust evaluation

struct RobustResult {
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
  double max_linf = 0.0;  // largest |x_adv - x| seen over the test set
};

/// PGD on the probe's cross-entropy through the frozen encoder. Every
/// adversarial batch is checked for exact l_inf and [0,1] feasibility.
template <class T>
RobustResult robust_eval(const ContrastiveNet<T>& net, const ProbeResult<T>& probe, const Dataset& test,
                         const AttackConfig& attack, std::size_t batch = 256) {
  attack.validate();
  check_labels(test, int(probe.probe.classes()), "test");
  RobustResult out;
  std::size_t clean_hits = 0, robust_hits = 0;
  std::mt19937_64 rng(attack.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (std::size_t start = 0; start < test.size(); start += batch) {
    std::vector<std::size_t> idx(std::min(batch, test.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    std::vector<int> labels;
    for (std::size_t i : idx) labels.push_back(test.y[i]);
    const Tensor<T> x = rows_tensor<T>(test, idx);
    Tensor<T> adv = x.detach();
    const bool attacking = attack.steps > 0 && attack.epsilon > 0.0;
    if (attacking) {
      detail::MaybeFrozen<ContrastiveNet<T>> frozen_net(net);
      detail::MaybeFrozen<LinearProbe<T>> frozen_probe(probe.probe);
      auto a = adv.data();
      if (attack.random_start) {
        for (T& v : a) v = T(double(v) + attack.epsilon * unit(rng));
        project_linf<T>(a, x.data(), attack.epsilon);
      }
      for (int s = 0; s < attack.steps; ++s) {
        Tensor<T> in = adv.leaf();
        {
          Tape tape;
          tape.backward(cross_entropy(probe.logits(net, in), std::span<const int>(labels)));
        }
        if (!in.has_grad()) throw AttackError("probe loss does not depend on the input");
        const auto g = in.grad();
        for (std::size_t k = 0; k < a.size(); ++k) {
          if (!std::isfinite(double(g[k]))) throw AttackError("non-finite input gradient during evaluation attack");
          const double sgn = g[k] > T(0) ? 1.0 : (g[k] < T(0) ? -1.0 : 0.0);
          a[k] = T(double(a[k]) + attack.alpha * sgn);
        }
        project_linf<T>(a, x.data(), attack.epsilon);
      }
      for (std::size_t k = 0; k < a.size(); ++k) {
        if (!(a[k] >= T(0) && a[k] <= T(1))) throw AttackError("adversarial pixel outside [0,1]");
      }
      const double dist = linf_distance(adv, x);
      if (dist > attack.epsilon) throw AttackError("adversarial example outside the l_inf ball");
      out.max_linf = std::max(out.max_linf, dist);
    }
    NoGradGuard no_grad;
    clean_hits += std::size_t(std::lround(accuracy(probe.logits(net, x), labels) * double(idx.size())));
    robust_hits += attacking ? std::size_t(std::lround(accuracy(probe.logits(net, adv), labels) * double(idx.size())))
                             : 0;
  }
  out.clean_accuracy = double(clean_hits) / double(test.size());
  out.robust_accuracy = attack.steps > 0 && attack.epsilon > 0.0 ? double(robust_hits) / double(test.size())
                                                                 : out.clean_accuracy;
  return out;
}

// ---------------------------------------------------------------------------
// Curvature sweep

struct SweepRow {
  double curvature = 0.0;
  double final_loss = 0.0;
  double probe_accuracy = 0.0;
};

/// Pretrains and probes once per curvature value with everything else fixed.
template <class T>
std::vector<SweepRow> curvature_sweep(const TrainConfig& base, const std::vector<double>& curvatures,
                                      const DataSplit& data, MetricsStream& metrics) {
  std::vector<SweepRow> rows;
  for (double c : curvatures) {
    TrainConfig cfg = base;
    cfg.curvature = c;
    MetricsStream inner(metrics.run_id());
    const auto run = pretrain<T>(cfg, data.train, inner);
    const auto probe = linear_probe(run.config, run.net, data, inner);
    const SweepRow row{c, run.epoch_loss.empty() ? NAN : run.epoch_loss.back(), probe.test_accuracy};
    rows.push_back(row);
    const std::string tag = "@c=" + format_real(c);
    metrics.emit(-1, "sweep", "final_loss" + tag, row.final_loss);
    metrics.emit(-1, "sweep", "probe_top1" + tag, row.probe_accuracy);
  }
  return rows;
}

}  // namespace pcon
