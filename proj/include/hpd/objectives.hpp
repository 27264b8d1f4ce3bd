#pragma once

// Distillation matching objectives: gradient matching (with optional siamese
// augmentation), distribution matching, and trajectory matching with its
// expert-trajectory store. Every loss is differentiable w.r.t. the synthetic
// images; gradient and trajectory matching differentiate through a gradient
// computation (second-order graphs).

#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hpd/augment.hpp"
#include "hpd/dataset.hpp"
#include "hpd/nn.hpp"
#include "hpd/tensor.hpp"

namespace hpd::obj {

enum class ObjectiveKind {
  GradientMatch,
  GradientMatchDsa,
  DistributionMatch,
  TrajectoryMatch
};

ObjectiveKind objective_from_string(const std::string& s);
std::string objective_to_string(ObjectiveKind k);

enum class LayerAgg { Mean, Sum };

struct ProxyModelSampler {
  nn::ModelSpec spec;
  std::vector<Tensor> sample(uint64_t seed) const {
    Rng rng(seed);
    return nn::init_params(spec, rng);
  }
};

// 1 - cosine similarity per layer over injected gradient lists; every entry
// is one layer. Zero-norm layers contribute 1 (orthogonality convention).
Tensor cosine_layer_loss(const std::vector<Tensor>& grads_syn,
                         const std::vector<Tensor>& grads_real,
                         LayerAgg agg = LayerAgg::Mean,
                         int* zero_norm_layers = nullptr);

// gradient-matching loss between two labeled batches under one proxy model;
// layers are the >=2-d parameter tensors
Tensor gradient_match_loss(const Tensor& syn_x, std::span<const int> syn_y,
                           const Tensor& real_x, std::span<const int> real_y,
                           const nn::ModelSpec& spec,
                           const std::vector<Tensor>& params,
                           LayerAgg agg = LayerAgg::Mean,
                           int* zero_norm_layers = nullptr);

// gradient matching on paired-augmented batches
Tensor dsa_loss(const Tensor& syn_x, std::span<const int> syn_y,
                const Tensor& real_x, std::span<const int> real_y,
                const nn::ModelSpec& spec, const std::vector<Tensor>& params,
                const data::AugmentationPolicy& policy, uint64_t seed,
                LayerAgg agg = LayerAgg::Mean,
                int* zero_norm_layers = nullptr);

// sum_c || mean_embed(real_c) - mean_embed(syn_c) ||^2 ; real side constant
Tensor distribution_match_loss(
    const Tensor& syn_images, std::span<const int> syn_labels,
    const std::vector<Tensor>& real_per_class,
    const std::function<Tensor(const Tensor&)>& embed);

// || student - expert_target ||^2 / || expert_start - expert_target ||^2
Tensor trajectory_match_loss(const std::vector<Tensor>& student,
                             const std::vector<Tensor>& expert_start,
                             const std::vector<Tensor>& expert_target);

// `steps` differentiable SGD updates of the model on the synthetic set;
// gradients flow back into syn_images through the returned parameters
std::vector<Tensor> inner_train_student(const std::vector<Tensor>& init,
                                        const Tensor& syn_images,
                                        std::span<const int> syn_labels,
                                        int steps, double lr,
                                        const nn::ModelSpec& spec);

// ---- expert trajectories ----

struct ExpertTrajectory {
  std::string arch;
  int snapshot_stride = 1;
  uint64_t seed = 0;
  std::vector<std::vector<Tensor>> snapshots;  // theta*_0 ... theta*_T
  std::vector<double> probe_losses;            // train-probe loss per snapshot

  size_t horizon() const { return snapshots.empty() ? 0 : snapshots.size() - 1; }
};

struct TrajectoryRecordConfig {
  int epochs = 15;
  int count = 10;
  int snapshot_stride = 1;
  double lr = 1e-2;  // SGD, no momentum
  int batch = 256;
  uint64_t seed = 0;
  int max_train_images = 0;
  int probe_images = 512;
};

std::vector<ExpertTrajectory> record_expert_trajectories(
    const data::LabeledImageSet& dataset, const nn::ModelSpec& spec,
    const TrajectoryRecordConfig& cfg, const std::filesystem::path& store_dir);

std::vector<ExpertTrajectory> load_trajectory_store(
    const std::filesystem::path& store_dir);

// ---- engine-facing objective ----

class MatchingObjective {
 public:
  virtual ~MatchingObjective() = default;
  virtual std::string name() const = 0;
  // loss of the decoded synthetic set against the real data; rng drives the
  // per-step stochasticity (proxy re-init, batch sampling, augmentation)
  virtual Tensor loss(const Tensor& syn_images,
                      std::span<const int> syn_labels, Rng& rng) = 0;
};

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::DistributionMatch;
  int proxy_width = 32;
  int proxy_depth = 3;
  int real_batch_per_class = 32;
  LayerAgg layer_agg = LayerAgg::Mean;
  data::AugmentationPolicy dsa_policy = data::AugmentationPolicy::dsa_default();
  // trajectory matching
  int student_steps = 20;
  int expert_horizon = 2;  // M, in snapshots
  double student_lr = 1e-2;
  int max_start_snapshot = -1;  // -1: horizon - M
};

std::unique_ptr<MatchingObjective> make_objective(
    const ObjectiveConfig& cfg, const data::LabeledImageSet& dataset,
    std::vector<ExpertTrajectory> trajectories = {});

// contiguous batch from selected rows
Tensor gather_rows(const Tensor& images, std::span<const int> rows);

}  // namespace hpd::obj
