#pragma once

// Progressive distillation engine: per-space SGD on latents, best tracking by
// the class-relevant distance (tie to latest), latent hand-off to the next
// space, and global best-set selection. Also provides the fixed-space
// baseline that spends the whole step budget in one space.

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hpd/cam.hpp"
#include "hpd/generator.hpp"
#include "hpd/objectives.hpp"
#include "hpd/runio.hpp"

namespace hpd::engine {

enum class SelectionMode { None, Distance, Accuracy };

SelectionMode selection_from_string(const std::string& s);
std::string selection_to_string(SelectionMode m);

struct DistillConfig {
  std::string objective = "distribution-match";
  int ipc = 10;
  int blocks_per_space = 1;
  bool include_pixel_space = true;
  int steps_per_space = 20;  // N
  double lr_w = 1e-2;
  double lr_f = 1e1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int n_noise = 64;
  bool average_init = true;
  std::string selection = "distance";  // none | distance | accuracy
  int metric_real_per_class = 128;     // real images cached per class
  std::string distance_mode = "per-class-sum";  // or "pooled"
  int snapshot_every = 0;  // persist decoded sets every n steps (0 = off)
  uint64_t seed = 0;
  obj::ObjectiveConfig objective_cfg;

  io::json to_json() const;
  static DistillConfig from_json(const io::json& j);
  void validate() const;  // throws ConfigError with a field path
};

struct StepRecord {
  int step;
  double loss;
  double distance;  // NaN when no scorer is attached
};

struct SpaceResult {
  int ordinal = 0;       // position in the space schedule
  int boundary = 0;      // physical block boundary of the optimized latent
  std::vector<StepRecord> history;
  gen::LatentState best_latent;   // z*: best candidate by distance
  Tensor best_images;             // decoded best candidate
  double best_distance = 0.0;
  int best_step = -1;
  gen::LatentState final_latent;  // z after the last step
  double lr_used = 0.0;
  bool aborted = false;
  double wall_ms = 0.0;
};

struct DistillRun {
  DistillConfig config;
  std::vector<SpaceResult> spaces;
  std::vector<int> labels;
  Tensor global_images;
  int global_space = -1;     // schedule ordinal of the selected set
  double global_score = 0.0; // distance (min) or accuracy (max)
  int64_t total_steps = 0;
  double wall_ms = 0.0;
};

// selection criterion seen by the engine; the production implementation is
// the class-relevant feature distance with a cached real side
class CandidateScorer {
 public:
  virtual ~CandidateScorer() = default;
  virtual double distance(const Tensor& images,
                          std::span<const int> labels) = 0;
};

class ClassRelevantScorer final : public CandidateScorer {
 public:
  ClassRelevantScorer(const cam::FrozenClassifier& clf,
                      cam::RealSideCache cache, cam::DistanceMode mode)
      : clf_(&clf), cache_(std::move(cache)), mode_(mode) {}
  double distance(const Tensor& images, std::span<const int> labels) override {
    return cam::class_relevant_distance(*clf_, images, labels, cache_, mode_);
  }

 private:
  const cam::FrozenClassifier* clf_;
  cam::RealSideCache cache_;
  cam::DistanceMode mode_;
};

// builds the per-class real cache from the dataset with the config's budget
ClassRelevantScorer make_class_relevant_scorer(
    const cam::FrozenClassifier& clf, const data::LabeledImageSet& dataset,
    int real_per_class, cam::DistanceMode mode, uint64_t seed);

// reduced-budget Acc(.) hook for SelectionMode::Accuracy
using AccuracyFn =
    std::function<double(const Tensor& images, std::span<const int> labels)>;

// optional sink receiving decoded sets during optimization (diagnostics)
using SnapshotSink = std::function<void(int ordinal, int step,
                                        const Tensor& images, double loss,
                                        double distance)>;

SpaceResult optimize_in_space(const gen::GeneratorStack& stack,
                              const gen::LatentState& init,
                              obj::MatchingObjective& objective,
                              CandidateScorer* scorer, int steps, double lr,
                              double momentum, double weight_decay, Rng& rng,
                              runio::MetricsLog* log = nullptr,
                              int ordinal = 0,
                              const SnapshotSink& snapshot = {},
                              int snapshot_every = 0);

DistillRun distill(const DistillConfig& cfg, const gen::GeneratorStack& stack,
                   obj::MatchingObjective& objective, CandidateScorer* scorer,
                   const std::filesystem::path& run_dir,
                   const AccuracyFn& accuracy_fn = {});

// space_index is a physical block boundary in [0, K]
DistillRun fixed_space_baseline(const DistillConfig& cfg,
                                const gen::GeneratorStack& stack,
                                obj::MatchingObjective& objective,
                                CandidateScorer* scorer, int space_index,
                                const std::filesystem::path& run_dir);

// the boundary schedule distill() walks (group starts, plus the pixel domain)
std::vector<int> space_schedule(const DistillConfig& cfg,
                                const gen::GeneratorStack& stack);

// class-major initial latent for the whole synthetic set (ipc per class)
gen::LatentState initial_latent(const DistillConfig& cfg,
                                const gen::GeneratorStack& stack, Rng& rng);

}  // namespace hpd::engine
