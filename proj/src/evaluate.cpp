#include "hpd/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hpd/errors.hpp"
#include "hpd/objectives.hpp"

namespace hpd::eval {

AccuracyStats AccuracyStats::from_repeats(const std::string& arch,
                                          std::vector<double> repeats,
                                          int train_epochs) {
  if (repeats.empty()) throw ConfigError("AccuracyStats: repeats must be >= 1");
  AccuracyStats s;
  s.arch = arch;
  s.per_repeat = std::move(repeats);
  s.train_epochs = train_epochs;
  for (double a : s.per_repeat) s.mean += a;
  s.mean /= double(s.per_repeat.size());
  for (double a : s.per_repeat) s.stddev += (a - s.mean) * (a - s.mean);
  s.stddev = std::sqrt(s.stddev / double(s.per_repeat.size()));
  return s;
}

io::json AccuracyStats::to_json() const {
  return io::json{{"arch", arch},
                  {"per_repeat", per_repeat},
                  {"mean", mean},
                  {"stddev", stddev},
                  {"train_epochs", train_epochs}};
}

namespace {

double test_accuracy(const nn::ModelSpec& spec,
                     const std::vector<Tensor>& params,
                     const data::LabeledImageSet& test_set, int cap) {
  GradMode off(false);
  size_t n = test_set.test_count();
  if (cap > 0) n = std::min(n, size_t(cap));
  size_t chunk = 512;
  size_t hits = 0;
  for (size_t lo = 0; lo < n; lo += chunk) {
    size_t hi = std::min(n, lo + chunk);
    std::vector<int> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), int(lo));
    Tensor x = test_set.test_batch(idx);
    auto pred = nn::argmax_rows(nn::forward_logits(spec, params, x));
    for (size_t i = 0; i < idx.size(); ++i)
      if (pred[i] == test_set.test_labels[lo + i]) ++hits;
  }
  return n == 0 ? 0.0 : double(hits) / double(n);
}

}  // namespace

AccuracyStats evaluate_synthetic(const Tensor& images,
                                 std::span<const int> labels, nn::ArchId arch,
                                 int repeats, const EvalTrainConfig& cfg,
                                 const data::LabeledImageSet& test_set,
                                 uint64_t seed) {
  if (images.dim(0) == 0) throw ConfigError("evaluate_synthetic: empty set");
  if (size_t(images.dim(0)) != labels.size())
    throw ConfigError("evaluate_synthetic: label count mismatch");
  if (repeats < 1) throw ConfigError("evaluate_synthetic: repeats must be >= 1");

  nn::ModelSpec spec{arch,          images.dim(1),    images.dim(2),
                     images.dim(3), test_set.classes, cfg.width,
                     cfg.depth};
  int n = images.dim(0);
  int batch = std::min(cfg.batch, n);

  std::vector<double> accs;
  for (int r = 0; r < repeats; ++r) {
    Rng rng(seed + uint64_t(r) * 0x9e3779b97f4a7c15ull);
    auto params = nn::init_params(spec, rng);
    nn::Sgd opt{cfg.lr, cfg.momentum, cfg.weight_decay, {}};

    std::vector<int> order(size_t(n), 0);
    std::iota(order.begin(), order.end(), 0);
    int step = 0;
    int total_steps = cfg.epochs * std::max(1, n / batch);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      shuffle(order, rng);
      for (int lo = 0; lo + batch <= n || lo == 0; lo += batch) {
        int hi = std::min(n, lo + batch);
        std::vector<int> rows(order.begin() + lo, order.begin() + hi);
        Tensor x = obj::gather_rows(images, rows);
        std::vector<int> y;
        for (int i : rows) y.push_back(labels[size_t(i)]);
        if (cfg.augment)
          x = data::augment(x, cfg.policy, rng.next_u64());
        opt.lr = cfg.cosine ? nn::cosine_lr(cfg.lr, step, total_steps) : cfg.lr;
        Tensor loss = nn::cross_entropy(nn::forward_logits(spec, params, x), y);
        if (!std::isfinite(loss.item()))
          throw TrainError("evaluate_synthetic: training loss diverged");
        auto grads = grad(loss, params);
        opt.step(params, grads);
        ++step;
        if (hi == n) break;
      }
    }
    accs.push_back(test_accuracy(spec, params, test_set, cfg.test_cap));
  }
  return AccuracyStats::from_repeats(nn::arch_to_string(arch),
                                     std::move(accs), cfg.epochs);
}

std::vector<AccuracyStats> cross_architecture_eval(
    const Tensor& images, std::span<const int> labels,
    const std::vector<nn::ArchId>& archs, int repeats,
    const EvalTrainConfig& cfg, const data::LabeledImageSet& test_set,
    uint64_t seed) {
  std::vector<AccuracyStats> out;
  for (auto arch : archs)
    out.push_back(evaluate_synthetic(images, labels, arch, repeats, cfg,
                                     test_set, seed));
  return out;
}

double cross_arch_mean_excluding(const std::vector<AccuracyStats>& table,
                                 nn::ArchId backbone) {
  std::string skip = nn::arch_to_string(backbone);
  double acc = 0.0;
  int n = 0;
  for (const auto& s : table) {
    if (s.arch == skip) continue;
    acc += s.mean;
    ++n;
  }
  if (n == 0) throw ConfigError("cross_arch_mean_excluding: nothing left");
  return acc / double(n);
}

Tensor random_real_coreset(const data::LabeledImageSet& dataset, int ipc,
                           Rng& rng, std::vector<int>* labels_out) {
  std::vector<int> indices;
  std::vector<int> labels;
  for (int c = 0; c < dataset.classes; ++c) {
    auto idx = data::sample_class_batch_indices(dataset, c, ipc, rng);
    indices.insert(indices.end(), idx.begin(), idx.end());
    labels.insert(labels.end(), size_t(ipc), c);
  }
  if (labels_out) *labels_out = labels;
  return dataset.train_batch(indices);
}

// ---- diagnostics ----

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    double r = (double(i) + double(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

std::vector<double> normalize01(std::span<const double> v) {
  double lo = *std::min_element(v.begin(), v.end());
  double hi = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  if (hi == lo) {
    std::fill(out.begin(), out.end(), 0.5);
  } else {
    for (size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - lo) / (hi - lo);
  }
  return out;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b,
                bool* defined) {
  if (a.size() != b.size() || a.size() < 2)
    throw ConfigError("spearman: need two series of equal length >= 2");
  auto ra = average_ranks(a);
  auto rb = average_ranks(b);
  double ma = 0, mb = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= double(ra.size());
  mb /= double(rb.size());
  double cov = 0, va = 0, vb = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) {
    if (defined) *defined = false;
    return 0.0;
  }
  if (defined) *defined = true;
  return cov / std::sqrt(va * vb);
}

CorrelationReport correlation_report(
    const std::vector<CorrCheckpoint>& checkpoints) {
  if (checkpoints.size() < 5)
    throw ConfigError("correlation_report: need at least 5 checkpoints");
  std::vector<double> d, l, a;
  for (const auto& c : checkpoints) {
    d.push_back(c.distance);
    l.push_back(c.loss);
    a.push_back(c.accuracy);
  }
  CorrelationReport rep;
  rep.rho_distance_acc = spearman(d, a, &rep.rho_distance_defined);
  rep.rho_loss_acc = spearman(l, a, &rep.rho_loss_defined);
  rep.norm_distance = normalize01(d);
  rep.norm_loss = normalize01(l);
  rep.norm_accuracy = normalize01(a);
  return rep;
}

}  // namespace hpd::eval
