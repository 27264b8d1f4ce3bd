#include "hpd/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "hpd/errors.hpp"
#include "hpd/serialize.hpp"

namespace hpd::obj {

ObjectiveKind objective_from_string(const std::string& s) {
  if (s == "dc" || s == "gradient-match") return ObjectiveKind::GradientMatch;
  if (s == "dsa" || s == "gradient-match-dsa")
    return ObjectiveKind::GradientMatchDsa;
  if (s == "dm" || s == "distribution-match")
    return ObjectiveKind::DistributionMatch;
  if (s == "mtt" || s == "trajectory-match")
    return ObjectiveKind::TrajectoryMatch;
  throw ConfigError("unknown objective kind: " + s);
}

std::string objective_to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::GradientMatch: return "gradient-match";
    case ObjectiveKind::GradientMatchDsa: return "gradient-match-dsa";
    case ObjectiveKind::DistributionMatch: return "distribution-match";
    case ObjectiveKind::TrajectoryMatch: return "trajectory-match";
  }
  return "?";
}

Tensor gather_rows(const Tensor& images, std::span<const int> rows) {
  std::vector<Tensor> slices;
  slices.reserve(rows.size());
  for (int r : rows) slices.push_back(slice(images, 0, r, 1));
  return slices.size() == 1 ? slices[0] : concat(slices, 0);
}

Tensor cosine_layer_loss(const std::vector<Tensor>& grads_syn,
                         const std::vector<Tensor>& grads_real, LayerAgg agg,
                         int* zero_norm_layers) {
  if (grads_syn.size() != grads_real.size() || grads_syn.empty())
    throw ConfigError("cosine_layer_loss: layer lists mismatch");
  int zeros = 0;
  Tensor total = Tensor::scalar(0.0);
  for (size_t l = 0; l < grads_syn.size(); ++l) {
    const Tensor& gs = grads_syn[l];
    const Tensor& gt = grads_real[l];
    if (gs.numel() != gt.numel())
      throw ConfigError("cosine_layer_loss: layer size mismatch");
    double ns = 0.0, nt = 0.0;
    for (double v : gs.data()) ns += v * v;
    for (double v : gt.data()) nt += v * v;
    if (ns == 0.0 || nt == 0.0) {
      // a vanished gradient carries no direction; count it orthogonal
      ++zeros;
      total = add(total, Tensor::scalar(1.0));
      continue;
    }
    Tensor gsf = reshape(gs, {1, int(gs.numel())});
    Tensor gtf = reshape(gt, {int(gt.numel()), 1});
    Tensor dot = reshape(matmul(gsf, gtf), {1});
    Tensor norm = sqrt(mul(sum(mul(gs, gs)), sum(mul(gt, gt))));
    total = add(total, sub(Tensor::scalar(1.0), div(dot, norm)));
  }
  if (zero_norm_layers) *zero_norm_layers = zeros;
  if (agg == LayerAgg::Mean)
    total = mul_scalar(total, 1.0 / double(grads_syn.size()));
  return total;
}

namespace {

std::vector<size_t> matchable_layers(const std::vector<Tensor>& params) {
  // only >=2-d parameter tensors carry a matching direction (weights);
  // 1-d params (biases, norm affine) are skipped
  std::vector<size_t> out;
  for (size_t i = 0; i < params.size(); ++i)
    if (params[i].ndim() >= 2) out.push_back(i);
  return out;
}

Tensor embed_flat(const std::function<Tensor(const Tensor&)>& embed,
                  const Tensor& x) {
  Tensor e = embed(x);
  return e.ndim() == 2 ? e : reshape(e, {e.dim(0), -1});
}

}  // namespace

Tensor gradient_match_loss(const Tensor& syn_x, std::span<const int> syn_y,
                           const Tensor& real_x, std::span<const int> real_y,
                           const nn::ModelSpec& spec,
                           const std::vector<Tensor>& params, LayerAgg agg,
                           int* zero_norm_layers) {
  if (syn_x.dim(0) == 0 || real_x.dim(0) == 0)
    throw ConfigError("gradient_match_loss: empty batch");
  for (const auto& p : params)
    if (!all_finite(p))
      throw TrainError("gradient_match_loss: non-finite model parameters");

  auto layers = matchable_layers(params);
  std::vector<Tensor> wanted;
  for (size_t i : layers) wanted.push_back(params[i]);

  Tensor loss_syn = nn::cross_entropy(nn::forward_logits(spec, params, syn_x),
                                      syn_y);
  auto grads_syn = grad(loss_syn, wanted, {.create_graph = true});

  std::vector<Tensor> grads_real;
  {
    Tensor loss_real = nn::cross_entropy(
        nn::forward_logits(spec, params, real_x), real_y);
    auto g = grad(loss_real, wanted);
    for (auto& t : g) grads_real.push_back(t.detach());
  }
  return cosine_layer_loss(grads_syn, grads_real, agg, zero_norm_layers);
}

Tensor dsa_loss(const Tensor& syn_x, std::span<const int> syn_y,
                const Tensor& real_x, std::span<const int> real_y,
                const nn::ModelSpec& spec, const std::vector<Tensor>& params,
                const data::AugmentationPolicy& policy, uint64_t seed,
                LayerAgg agg, int* zero_norm_layers) {
  auto [real_aug, syn_aug] = data::paired_augment(real_x, syn_x, policy, seed);
  return gradient_match_loss(syn_aug, syn_y, real_aug, real_y, spec, params,
                             agg, zero_norm_layers);
}

Tensor distribution_match_loss(
    const Tensor& syn_images, std::span<const int> syn_labels,
    const std::vector<Tensor>& real_per_class,
    const std::function<Tensor(const Tensor&)>& embed) {
  int classes = int(real_per_class.size());
  std::vector<std::vector<int>> rows(size_t(classes), std::vector<int>{});
  for (size_t i = 0; i < syn_labels.size(); ++i) {
    int c = syn_labels[i];
    if (c < 0 || c >= classes)
      throw ConfigError("distribution_match_loss: label out of range");
    rows[size_t(c)].push_back(int(i));
  }
  Tensor total = Tensor::scalar(0.0);
  for (int c = 0; c < classes; ++c) {
    if (rows[size_t(c)].empty())
      throw ConfigError("distribution_match_loss: class " +
                        std::to_string(c) + " missing from synthetic set");
    if (real_per_class[size_t(c)].dim(0) == 0)
      throw ConfigError("distribution_match_loss: class " +
                        std::to_string(c) + " missing from real batches");
    Tensor syn_c = gather_rows(syn_images, rows[size_t(c)]);
    Tensor mean_syn = mean(embed_flat(embed, syn_c), {0}, false);
    Tensor mean_real;
    {
      GradMode off(false);
      mean_real = mean(embed_flat(embed, real_per_class[size_t(c)]), {0},
                       false).detach();
    }
    Tensor d = sub(mean_real, mean_syn);
    total = add(total, sum(mul(d, d)));
  }
  return total;
}

Tensor trajectory_match_loss(const std::vector<Tensor>& student,
                             const std::vector<Tensor>& expert_start,
                             const std::vector<Tensor>& expert_target) {
  if (student.size() != expert_start.size() ||
      student.size() != expert_target.size())
    throw ConfigError("trajectory_match_loss: parameter layout mismatch");
  double denom = 0.0;
  for (size_t i = 0; i < expert_start.size(); ++i) {
    auto a = expert_start[i].data();
    auto b = expert_target[i].data();
    for (size_t j = 0; j < a.size(); ++j) {
      double d = a[j] - b[j];
      denom += d * d;
    }
  }
  if (denom <= 0.0)
    throw ConfigError(
        "trajectory_match_loss: degenerate expert segment (start == target)");
  Tensor num = Tensor::scalar(0.0);
  for (size_t i = 0; i < student.size(); ++i) {
    Tensor d = sub(student[i], expert_target[i].detach());
    num = add(num, sum(mul(d, d)));
  }
  return mul_scalar(num, 1.0 / denom);
}

std::vector<Tensor> inner_train_student(const std::vector<Tensor>& init,
                                        const Tensor& syn_images,
                                        std::span<const int> syn_labels,
                                        int steps, double lr,
                                        const nn::ModelSpec& spec) {
  if (steps < 1) throw ConfigError("inner_train_student: steps must be >= 1");
  std::vector<Tensor> theta = init;
  for (int s = 0; s < steps; ++s) {
    Tensor loss =
        nn::cross_entropy(nn::forward_logits(spec, theta, syn_images),
                          syn_labels);
    if (!std::isfinite(loss.item()))
      throw TrainError("inner_train_student: loss became non-finite at step " +
                       std::to_string(s));
    auto g = grad(loss, theta, {.create_graph = true});
    for (size_t i = 0; i < theta.size(); ++i)
      theta[i] = sub(theta[i], mul_scalar(g[i], lr));
    for (const auto& t : theta)
      if (!all_finite(t))
        throw TrainError(
            "inner_train_student: parameters became non-finite at step " +
            std::to_string(s));
  }
  return theta;
}

// ---- expert trajectories ----

namespace fs = std::filesystem;

std::vector<ExpertTrajectory> record_expert_trajectories(
    const data::LabeledImageSet& dataset, const nn::ModelSpec& spec,
    const TrajectoryRecordConfig& cfg, const fs::path& store_dir) {
  if (dataset.train_count() == 0)
    throw ConfigError("record_expert_trajectories: empty train split");
  fs::create_directories(store_dir);

  std::vector<int> all(dataset.train_count());
  for (size_t i = 0; i < all.size(); ++i) all[i] = int(i);

  int probe_n = int(std::min<size_t>(all.size(), size_t(cfg.probe_images)));
  std::vector<int> probe_idx(all.begin(), all.begin() + probe_n);
  Tensor probe_x = dataset.train_batch(probe_idx);
  std::vector<int> probe_y;
  for (int i : probe_idx) probe_y.push_back(dataset.train_labels[size_t(i)]);

  std::vector<ExpertTrajectory> out;
  io::json index = {{"arch", nn::arch_to_string(spec.id)},
                    {"stride", cfg.snapshot_stride},
                    {"epochs", cfg.epochs},
                    {"seed", cfg.seed},
                    {"width", spec.width},
                    {"depth", spec.depth},
                    {"files", io::json::array()}};

  for (int t = 0; t < cfg.count; ++t) {
    Rng rng(Rng(cfg.seed).split(uint64_t(t)).next_u64());
    auto params = nn::init_params(spec, rng);

    ExpertTrajectory traj;
    traj.arch = nn::arch_to_string(spec.id);
    traj.snapshot_stride = cfg.snapshot_stride;
    traj.seed = cfg.seed;

    auto probe_loss = [&]() {
      GradMode off(false);
      return nn::cross_entropy(nn::forward_logits(spec, params, probe_x),
                               probe_y).item();
    };
    auto snap = [&]() {
      std::vector<Tensor> s;
      for (const auto& p : params) s.push_back(p.detach());
      traj.snapshots.push_back(std::move(s));
      traj.probe_losses.push_back(probe_loss());
    };
    snap();  // theta*_0

    std::vector<int> indices = all;
    if (cfg.max_train_images > 0 &&
        indices.size() > size_t(cfg.max_train_images)) {
      shuffle(indices, rng);
      indices.resize(size_t(cfg.max_train_images));
    }
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      shuffle(indices, rng);
      size_t nb = (indices.size() + size_t(cfg.batch) - 1) / size_t(cfg.batch);
      for (size_t b = 0; b < nb; ++b) {
        size_t lo = b * size_t(cfg.batch);
        size_t hi = std::min(indices.size(), lo + size_t(cfg.batch));
        std::span<const int> bidx(indices.data() + lo, hi - lo);
        Tensor x = dataset.train_batch(bidx);
        std::vector<int> y;
        for (int idx : bidx) y.push_back(dataset.train_labels[size_t(idx)]);
        Tensor loss =
            nn::cross_entropy(nn::forward_logits(spec, params, x), y);
        if (!std::isfinite(loss.item()))
          throw TrainError("record_expert_trajectories: diverged in traj " +
                           std::to_string(t));
        auto grads = grad(loss, params);
        for (size_t i = 0; i < params.size(); ++i) {
          auto pd = params[i].mutable_data();
          auto gd = grads[i].data();
          for (size_t j = 0; j < pd.size(); ++j) pd[j] -= cfg.lr * gd[j];
        }
      }
      if (epoch % cfg.snapshot_stride == 0) snap();
    }

    // persist: snapshots flattened in order, params_per_snapshot in header
    std::string fname = "trajectory_" + std::to_string(t) + ".bin";
    std::vector<Tensor> flat;
    for (const auto& s : traj.snapshots)
      for (const auto& p : s) flat.push_back(p);
    io::json hdr = {{"kind", "trajectory"},
                    {"arch", traj.arch},
                    {"index", t},
                    {"stride", cfg.snapshot_stride},
                    {"seed", cfg.seed},
                    {"snapshots", traj.snapshots.size()},
                    {"params_per_snapshot", params.size()},
                    {"probe_losses", traj.probe_losses}};
    io::write_checkpoint(store_dir / fname, hdr, flat);
    index["files"].push_back(fname);
    out.push_back(std::move(traj));
  }
  io::save_json(store_dir / "index.json", index);
  return out;
}

std::vector<ExpertTrajectory> load_trajectory_store(const fs::path& store_dir) {
  io::json index = io::load_json(store_dir / "index.json");
  std::vector<ExpertTrajectory> out;
  for (const auto& f : index.at("files")) {
    auto ckpt = io::read_checkpoint(store_dir / f.get<std::string>());
    if (ckpt.header.value("kind", "") != "trajectory")
      throw DataError("not a trajectory file in store: " + store_dir.string());
    ExpertTrajectory traj;
    traj.arch = ckpt.header.at("arch");
    traj.snapshot_stride = ckpt.header.at("stride");
    traj.seed = ckpt.header.at("seed");
    traj.probe_losses =
        ckpt.header.at("probe_losses").get<std::vector<double>>();
    size_t n_snap = ckpt.header.at("snapshots");
    size_t pps = ckpt.header.at("params_per_snapshot");
    if (ckpt.params.size() != n_snap * pps)
      throw DataError("trajectory payload layout mismatch");
    for (size_t s = 0; s < n_snap; ++s)
      traj.snapshots.emplace_back(ckpt.params.begin() + long(s * pps),
                                  ckpt.params.begin() + long((s + 1) * pps));
    out.push_back(std::move(traj));
  }
  return out;
}

// ---- engine-facing objectives ----

namespace {

class GradientMatchObjective final : public MatchingObjective {
 public:
  GradientMatchObjective(const ObjectiveConfig& cfg,
                         const data::LabeledImageSet& dataset, bool dsa)
      : cfg_(cfg), data_(dataset), dsa_(dsa) {
    sampler_.spec = nn::ModelSpec{nn::ArchId::ConvNet, dataset.channels,
                                  dataset.height,      dataset.width,
                                  dataset.classes,     cfg.proxy_width,
                                  cfg.proxy_depth};
  }

  std::string name() const override {
    return dsa_ ? "gradient-match-dsa" : "gradient-match";
  }

  Tensor loss(const Tensor& syn_images, std::span<const int> syn_labels,
              Rng& rng) override {
    auto params = sampler_.sample(rng.next_u64());
    std::vector<std::vector<int>> rows(size_t(data_.classes), std::vector<int>{});
    for (size_t i = 0; i < syn_labels.size(); ++i)
      rows[size_t(syn_labels[i])].push_back(int(i));
    Tensor total = Tensor::scalar(0.0);
    for (int c = 0; c < data_.classes; ++c) {
      if (rows[size_t(c)].empty()) continue;
      int n = std::min<int>(cfg_.real_batch_per_class,
                            int(data_.train_by_class[size_t(c)].size()));
      Tensor real = data::sample_class_batch(data_, c, n, rng);
      std::vector<int> real_y(size_t(n), c);
      Tensor syn_c = gather_rows(syn_images, rows[size_t(c)]);
      std::vector<int> syn_y(rows[size_t(c)].size(), c);
      Tensor l = dsa_ ? dsa_loss(syn_c, syn_y, real, real_y, sampler_.spec,
                                 params, cfg_.dsa_policy, rng.next_u64(),
                                 cfg_.layer_agg)
                      : gradient_match_loss(syn_c, syn_y, real, real_y,
                                            sampler_.spec, params,
                                            cfg_.layer_agg);
      total = add(total, l);
    }
    return total;
  }

 private:
  ObjectiveConfig cfg_;
  const data::LabeledImageSet& data_;
  bool dsa_;
  ProxyModelSampler sampler_;
};

class DistributionMatchObjective final : public MatchingObjective {
 public:
  DistributionMatchObjective(const ObjectiveConfig& cfg,
                             const data::LabeledImageSet& dataset)
      : cfg_(cfg), data_(dataset) {
    sampler_.spec = nn::ModelSpec{nn::ArchId::ConvNet, dataset.channels,
                                  dataset.height,      dataset.width,
                                  dataset.classes,     cfg.proxy_width,
                                  cfg.proxy_depth};
  }

  std::string name() const override { return "distribution-match"; }

  Tensor loss(const Tensor& syn_images, std::span<const int> syn_labels,
              Rng& rng) override {
    auto params = sampler_.sample(rng.next_u64());
    std::vector<Tensor> real_per_class;
    for (int c = 0; c < data_.classes; ++c) {
      int n = std::min<int>(cfg_.real_batch_per_class,
                            int(data_.train_by_class[size_t(c)].size()));
      real_per_class.push_back(data::sample_class_batch(data_, c, n, rng));
    }
    auto embed = [&](const Tensor& x) {
      return nn::forward_features(sampler_.spec, params, x);
    };
    return distribution_match_loss(syn_images, syn_labels, real_per_class,
                                   embed);
  }

 private:
  ObjectiveConfig cfg_;
  const data::LabeledImageSet& data_;
  ProxyModelSampler sampler_;
};

class TrajectoryMatchObjective final : public MatchingObjective {
 public:
  TrajectoryMatchObjective(const ObjectiveConfig& cfg,
                           const data::LabeledImageSet& dataset,
                           std::vector<ExpertTrajectory> trajectories)
      : cfg_(cfg), trajectories_(std::move(trajectories)) {
    if (trajectories_.empty())
      throw ConfigError("trajectory matching needs a non-empty store");
    spec_ = nn::ModelSpec{nn::ArchId::ConvNet, dataset.channels,
                          dataset.height,      dataset.width,
                          dataset.classes,     cfg.proxy_width,
                          cfg.proxy_depth};
    for (const auto& t : trajectories_)
      if (int(t.horizon()) < cfg_.expert_horizon)
        throw ConfigError("trajectory shorter than expert horizon M");
  }

  std::string name() const override { return "trajectory-match"; }

  Tensor loss(const Tensor& syn_images, std::span<const int> syn_labels,
              Rng& rng) override {
    const auto& traj = trajectories_[size_t(
        rng.uniform_int(0, int64_t(trajectories_.size()) - 1))];
    int max_t = int(traj.horizon()) - cfg_.expert_horizon;
    if (cfg_.max_start_snapshot >= 0)
      max_t = std::min(max_t, cfg_.max_start_snapshot);
    int t = int(rng.uniform_int(0, max_t));
    const auto& start = traj.snapshots[size_t(t)];
    const auto& target = traj.snapshots[size_t(t + cfg_.expert_horizon)];
    std::vector<Tensor> init;
    for (const auto& p : start) init.push_back(p.detach());
    auto student = inner_train_student(init, syn_images, syn_labels,
                                       cfg_.student_steps, cfg_.student_lr,
                                       spec_);
    return trajectory_match_loss(student, start, target);
  }

 private:
  ObjectiveConfig cfg_;
  std::vector<ExpertTrajectory> trajectories_;
  nn::ModelSpec spec_;
};

}  // namespace

std::unique_ptr<MatchingObjective> make_objective(
    const ObjectiveConfig& cfg, const data::LabeledImageSet& dataset,
    std::vector<ExpertTrajectory> trajectories) {
  switch (cfg.kind) {
    case ObjectiveKind::GradientMatch:
      return std::make_unique<GradientMatchObjective>(cfg, dataset, false);
    case ObjectiveKind::GradientMatchDsa:
      return std::make_unique<GradientMatchObjective>(cfg, dataset, true);
    case ObjectiveKind::DistributionMatch:
      return std::make_unique<DistributionMatchObjective>(cfg, dataset);
    case ObjectiveKind::TrajectoryMatch:
      return std::make_unique<TrajectoryMatchObjective>(
          cfg, dataset, std::move(trajectories));
  }
  throw ConfigError("make_objective: bad kind");
}

}  // namespace hpd::obj
