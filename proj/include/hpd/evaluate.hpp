#pragma once

// Synthetic-set evaluation: train fresh models on the synthetic images,
// measure real test accuracy, repeat and aggregate. Plus cross-architecture
// grids and the searching-basis rank-correlation diagnostics.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hpd/augment.hpp"
#include "hpd/dataset.hpp"
#include "hpd/nn.hpp"
#include "hpd/serialize.hpp"

namespace hpd::eval {

struct EvalTrainConfig {
  int epochs = 300;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool cosine = true;
  int batch = 256;
  bool augment = true;
  data::AugmentationPolicy policy = data::AugmentationPolicy::dsa_default();
  int width = 32;
  int depth = 3;
  int test_cap = 0;  // 0 = whole test split
};

struct AccuracyStats {
  std::string arch;
  std::vector<double> per_repeat;
  double mean = 0.0;
  double stddev = 0.0;
  int train_epochs = 0;

  static AccuracyStats from_repeats(const std::string& arch,
                                    std::vector<double> repeats,
                                    int train_epochs);
  io::json to_json() const;
};

// trains `repeats` fresh models of `arch` on the synthetic set and tests on
// the real test split
AccuracyStats evaluate_synthetic(const Tensor& images,
                                 std::span<const int> labels, nn::ArchId arch,
                                 int repeats, const EvalTrainConfig& cfg,
                                 const data::LabeledImageSet& test_set,
                                 uint64_t seed);

std::vector<AccuracyStats> cross_architecture_eval(
    const Tensor& images, std::span<const int> labels,
    const std::vector<nn::ArchId>& archs, int repeats,
    const EvalTrainConfig& cfg, const data::LabeledImageSet& test_set,
    uint64_t seed);

// mean over entries excluding the distillation backbone architecture
double cross_arch_mean_excluding(const std::vector<AccuracyStats>& table,
                                 nn::ArchId backbone);

// IPC-matched random real images, the coreset control arm
Tensor random_real_coreset(const data::LabeledImageSet& dataset, int ipc,
                           Rng& rng, std::vector<int>* labels_out);

// ---- searching-basis diagnostics ----

struct CorrCheckpoint {
  double distance;
  double loss;
  double accuracy;
};

struct CorrelationReport {
  bool rho_distance_defined = false;
  bool rho_loss_defined = false;
  double rho_distance_acc = 0.0;  // Spearman rho(distance, accuracy)
  double rho_loss_acc = 0.0;      // Spearman rho(loss, accuracy)
  // series normalized to [0,1] for plotting
  std::vector<double> norm_distance, norm_loss, norm_accuracy;
};

// Spearman rank correlation with average ranks for ties; defined=false when
// either series is constant
double spearman(std::span<const double> a, std::span<const double> b,
                bool* defined = nullptr);

CorrelationReport correlation_report(
    const std::vector<CorrCheckpoint>& checkpoints);

}  // namespace hpd::eval
