#include "hpd/cam.hpp"

#include <algorithm>
#include <cmath>

#include "hpd/errors.hpp"

namespace hpd::cam {

FrozenClassifier::FrozenClassifier(nn::ModelSpec spec,
                                   std::vector<Tensor> params,
                                   io::json provenance)
    : spec_(spec), params_(std::move(params)), prov_(std::move(provenance)) {
  for (auto& p : params_) p.set_requires_grad(false);
}

Tensor FrozenClassifier::features(const Tensor& images) const {
  return nn::forward_features(spec_, params_, images);
}

Tensor FrozenClassifier::head_logits(const Tensor& feature_maps) const {
  return nn::forward_head(spec_, params_, feature_maps);
}

Tensor FrozenClassifier::logits(const Tensor& images) const {
  return nn::forward_logits(spec_, params_, images);
}

void FrozenClassifier::save(const std::filesystem::path& path) const {
  io::json hdr = {{"kind", "classifier"},
                  {"version", 1},
                  {"arch", nn::arch_to_string(spec_.id)},
                  {"in_ch", spec_.in_ch},
                  {"img_h", spec_.img_h},
                  {"img_w", spec_.img_w},
                  {"classes", spec_.classes},
                  {"width", spec_.width},
                  {"depth", spec_.depth},
                  {"provenance", prov_}};
  io::write_checkpoint(path, hdr, params_);
}

FrozenClassifier FrozenClassifier::load(const std::filesystem::path& path) {
  auto ckpt = io::read_checkpoint(path);
  if (ckpt.header.value("kind", "") != "classifier")
    throw DataError("not a classifier checkpoint: " + path.string());
  nn::ModelSpec spec;
  spec.id = nn::arch_from_string(ckpt.header.at("arch"));
  spec.in_ch = ckpt.header.at("in_ch");
  spec.img_h = ckpt.header.at("img_h");
  spec.img_w = ckpt.header.at("img_w");
  spec.classes = ckpt.header.at("classes");
  spec.width = ckpt.header.at("width");
  spec.depth = ckpt.header.at("depth");
  return FrozenClassifier(spec, std::move(ckpt.params),
                          ckpt.header.value("provenance", io::json{}));
}

FrozenClassifier train_extractor(const data::LabeledImageSet& dataset,
                                 const ExtractorTrainConfig& cfg,
                                 double* reached_accuracy) {
  if (dataset.train_count() == 0)
    throw ConfigError("train_extractor: empty train split");
  nn::ModelSpec spec{nn::ArchId::ConvNet, dataset.channels, dataset.height,
                     dataset.width,        dataset.classes, cfg.width,
                     cfg.depth};
  Rng rng(cfg.seed);
  auto params = nn::init_params(spec, rng);
  nn::Adam opt{cfg.lr, 0.9, 0.999};

  std::vector<int> indices(dataset.train_count());
  for (size_t i = 0; i < indices.size(); ++i) indices[i] = int(i);
  if (cfg.max_train_images > 0 &&
      indices.size() > size_t(cfg.max_train_images)) {
    shuffle(indices, rng);
    indices.resize(size_t(cfg.max_train_images));
  }

  int eval_n = int(std::min<size_t>(
      dataset.test_count(), cfg.eval_cap > 0 ? size_t(cfg.eval_cap)
                                             : dataset.test_count()));
  std::vector<int> eval_idx(size_t(eval_n), 0);
  for (int i = 0; i < eval_n; ++i) eval_idx[size_t(i)] = i;
  Tensor eval_images = dataset.test_batch(eval_idx);
  std::vector<int> eval_labels(dataset.test_labels.begin(),
                               dataset.test_labels.begin() + eval_n);

  auto test_accuracy = [&]() {
    GradMode off(false);
    return nn::accuracy(nn::forward_logits(spec, params, eval_images),
                        eval_labels);
  };

  double best = 0.0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle(indices, rng);
    size_t nb = (indices.size() + size_t(cfg.batch) - 1) / size_t(cfg.batch);
    for (size_t b = 0; b < nb; ++b) {
      size_t lo = b * size_t(cfg.batch);
      size_t hi = std::min(indices.size(), lo + size_t(cfg.batch));
      std::span<const int> bidx(indices.data() + lo, hi - lo);
      Tensor x = dataset.train_batch(bidx);
      std::vector<int> y;
      for (int idx : bidx) y.push_back(dataset.train_labels[size_t(idx)]);
      Tensor loss = nn::cross_entropy(nn::forward_logits(spec, params, x), y);
      if (!std::isfinite(loss.item()))
        throw TrainError("train_extractor: loss diverged");
      auto grads = grad(loss, params);
      opt.step(params, grads);
    }
    best = std::max(best, test_accuracy());
    if (best >= cfg.accuracy_floor) break;
  }
  if (reached_accuracy) *reached_accuracy = best;
  if (best < cfg.accuracy_floor)
    throw TrainError("train_extractor: accuracy floor not reached (" +
                     std::to_string(best) + " < " +
                     std::to_string(cfg.accuracy_floor) + " after " +
                     std::to_string(cfg.max_epochs) + " epochs)");

  io::json prov = {{"dataset", dataset.name},
                   {"accuracy", best},
                   {"seed", cfg.seed},
                   {"train_images", int(indices.size())}};
  return FrozenClassifier(spec, std::move(params), prov);
}

Tensor cam_gradients_from_features(const FrozenClassifier& clf,
                                   const Tensor& feature_maps,
                                   std::span<const int> labels) {
  if (size_t(feature_maps.dim(0)) != labels.size())
    throw ConfigError("cam_gradients: label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= clf.spec().classes)
      throw ConfigError("cam_gradients: label out of range");
  // needs its own grad scope: callers often sit inside no-grad regions
  GradMode on(true);
  Tensor z = feature_maps.detach(true);
  Tensor logits = clf.head_logits(z);
  // per-sample rows are independent, so one backward of the picked-logit sum
  // yields every per-sample gradient
  Tensor picked = sum(mul(logits, nn::onehot(labels, clf.spec().classes)));
  auto g = grad(picked, {z});
  return g[0];
}

Tensor cam_gradients(const FrozenClassifier& clf, const Tensor& images,
                     std::span<const int> labels) {
  GradMode off(false);
  Tensor feats = clf.features(images);
  return cam_gradients_from_features(clf, feats, labels);
}

std::vector<double> masked_mean_features(const FrozenClassifier& clf,
                                         const Tensor& images,
                                         std::span<const int> labels) {
  GradMode off(false);
  Tensor feats = clf.features(images);
  Tensor g = cam_gradients_from_features(clf, feats, labels);
  Tensor masked = mul(feats, relu(g));
  Tensor m = mean(masked, {0}, false);  // [C',h,w]
  return std::vector<double>(m.data().begin(), m.data().end());
}

RealSideCache build_real_cache(const FrozenClassifier& clf,
                               const std::vector<Tensor>& per_class_batches) {
  RealSideCache cache;
  for (size_t c = 0; c < per_class_batches.size(); ++c) {
    std::vector<int> labels(size_t(per_class_batches[c].dim(0)), int(c));
    cache.per_class[int(c)] =
        masked_mean_features(clf, per_class_batches[c], labels);
  }
  return cache;
}

namespace {

std::map<int, std::vector<double>> per_class_masked_means(
    const FrozenClassifier& clf, const Tensor& images,
    std::span<const int> labels) {
  std::map<int, std::vector<int>> rows;
  for (size_t i = 0; i < labels.size(); ++i)
    rows[labels[i]].push_back(int(i));
  std::map<int, std::vector<double>> out;
  for (auto& [cls, idx] : rows) {
    // gather the class's rows into a contiguous batch
    std::vector<Tensor> slices;
    for (int r : idx) slices.push_back(slice(images, 0, r, 1));
    Tensor batch = slices.size() == 1 ? slices[0] : concat(slices, 0);
    std::vector<int> lbl(idx.size(), cls);
    out[cls] = masked_mean_features(clf, batch, lbl);
  }
  return out;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

double distance_between(const std::map<int, std::vector<double>>& a,
                        const std::map<int, std::vector<double>>& b,
                        DistanceMode mode) {
  if (a.size() != b.size())
    throw ConfigError("class_relevant_distance: class sets differ");
  for (const auto& [cls, _] : a)
    if (!b.count(cls))
      throw ConfigError("class_relevant_distance: class " +
                        std::to_string(cls) + " missing on one side");
  if (mode == DistanceMode::PerClassSum) {
    double acc = 0.0;
    for (const auto& [cls, va] : a) acc += sq_dist(va, b.at(cls));
    return acc;
  }
  // pooled: average the per-class means on each side, then one distance
  std::vector<double> ma, mb;
  for (const auto& [cls, va] : a) {
    if (ma.empty()) ma.assign(va.size(), 0.0);
    for (size_t i = 0; i < va.size(); ++i) ma[i] += va[i] / double(a.size());
  }
  for (const auto& [cls, vb] : b) {
    if (mb.empty()) mb.assign(vb.size(), 0.0);
    for (size_t i = 0; i < vb.size(); ++i) mb[i] += vb[i] / double(b.size());
  }
  return sq_dist(ma, mb);
}

}  // namespace

double class_relevant_distance(const FrozenClassifier& clf,
                               const Tensor& syn_images,
                               std::span<const int> syn_labels,
                               const RealSideCache& real, DistanceMode mode) {
  auto syn = per_class_masked_means(clf, syn_images, syn_labels);
  return distance_between(real.per_class, syn, mode);
}

double class_relevant_distance(const FrozenClassifier& clf,
                               const Tensor& a_images,
                               std::span<const int> a_labels,
                               const Tensor& b_images,
                               std::span<const int> b_labels,
                               DistanceMode mode) {
  auto a = per_class_masked_means(clf, a_images, a_labels);
  auto b = per_class_masked_means(clf, b_images, b_labels);
  return distance_between(a, b, mode);
}

}  // namespace hpd::cam
