#pragma once

// Frozen proxy classifier and the class-relevant feature distance used as
// the implicit search criterion: masked per-class mean features, where the
// mask is the positive part of the class-logit gradient w.r.t. the feature
// maps (Grad-CAM style, taken at the extractor output).

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "hpd/dataset.hpp"
#include "hpd/nn.hpp"
#include "hpd/serialize.hpp"
#include "hpd/tensor.hpp"

namespace hpd::cam {

class FrozenClassifier {
 public:
  FrozenClassifier() = default;
  FrozenClassifier(nn::ModelSpec spec, std::vector<Tensor> params,
                   io::json provenance = {});

  const nn::ModelSpec& spec() const { return spec_; }
  const io::json& provenance() const { return prov_; }
  std::span<const Tensor> params() const { return params_; }

  Tensor features(const Tensor& images) const;          // w^e(x)
  Tensor head_logits(const Tensor& feature_maps) const; // f^d(w^d; z)
  Tensor logits(const Tensor& images) const;

  void save(const std::filesystem::path& path) const;
  static FrozenClassifier load(const std::filesystem::path& path);

 private:
  nn::ModelSpec spec_;
  std::vector<Tensor> params_;
  io::json prov_;
};

struct ExtractorTrainConfig {
  int max_epochs = 30;
  int batch = 128;
  double lr = 1e-3;  // Adam
  double accuracy_floor = 0.85;
  int width = 32;
  int depth = 3;
  uint64_t seed = 0;
  int max_train_images = 0;  // 0 = all
  int eval_cap = 2000;       // test images used for the floor check
};

FrozenClassifier train_extractor(const data::LabeledImageSet& dataset,
                                 const ExtractorTrainConfig& cfg,
                                 double* reached_accuracy = nullptr);

// per-sample gradient of the labeled-class logit w.r.t. the feature maps;
// same shape as features(images)
Tensor cam_gradients(const FrozenClassifier& clf, const Tensor& images,
                     std::span<const int> labels);
// variant when feature maps are already computed
Tensor cam_gradients_from_features(const FrozenClassifier& clf,
                                   const Tensor& feature_maps,
                                   std::span<const int> labels);

enum class DistanceMode { PerClassSum, Pooled };

// masked per-class mean feature vector: mean_i( w^e(x_i) * relu(g_i) )
std::vector<double> masked_mean_features(const FrozenClassifier& clf,
                                         const Tensor& images,
                                         std::span<const int> labels);

struct RealSideCache {
  // per class -> masked mean feature vector
  std::map<int, std::vector<double>> per_class;
};

RealSideCache build_real_cache(const FrozenClassifier& clf,
                               const std::vector<Tensor>& per_class_batches);

double class_relevant_distance(const FrozenClassifier& clf,
                               const Tensor& syn_images,
                               std::span<const int> syn_labels,
                               const RealSideCache& real,
                               DistanceMode mode = DistanceMode::PerClassSum);

// symmetric two-set form (used by tests and the acceptance suite)
double class_relevant_distance(const FrozenClassifier& clf,
                               const Tensor& a_images,
                               std::span<const int> a_labels,
                               const Tensor& b_images,
                               std::span<const int> b_labels,
                               DistanceMode mode = DistanceMode::PerClassSum);

}  // namespace hpd::cam
