#pragma once

// Class-conditional DCGAN-style generator decomposed into K ordered blocks.
// Latents can live at any block boundary: boundary 0 is the style vector w
// produced by the mapping network, boundaries 1..K-1 are intermediate feature
// tensors, boundary K is the pixel domain (identity decode). partial_forward
// and advance let the distillation engine walk latents down the stack.

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hpd/dataset.hpp"
#include "hpd/rng.hpp"
#include "hpd/serialize.hpp"
#include "hpd/tensor.hpp"

namespace hpd::gen {

struct GeneratorArch {
  int img_h = 16;
  int img_w = 16;
  int channels = 1;
  int classes = 10;
  int noise_dim = 64;
  int w_dim = 32;
  int embed_dim = 16;
  int map_hidden = 128;
  int base_channels = 32;
  int blocks = 4;

  // derived geometry
  int canvas() const;            // power-of-two render size before crop
  int start_size() const;        // spatial size of the projected seed
  bool block_upsamples(int i) const;
  int block_in_spatial(int i) const;
  int block_out_spatial(int i) const;  // post-crop for the final block
  int block_in_channels(int i) const;
  int block_out_channels(int i) const;
  // per-sample latent shape at boundary i in [0, blocks]
  Shape latent_shape(int boundary) const;
};

enum class SpaceKind { StyleW, FeatureF, Pixel };

struct LatentState {
  int layer_index = 0;
  Tensor values;  // [n, ...latent_shape(layer_index)]
  std::vector<int> labels;
  SpaceKind kind = SpaceKind::StyleW;
};

SpaceKind space_kind_at(const GeneratorArch& arch, int boundary);

class GeneratorStack {
 public:
  GeneratorStack() = default;
  GeneratorStack(GeneratorArch arch, data::NormStats norm, Rng& rng);

  const GeneratorArch& arch() const { return arch_; }
  const data::NormStats& data_norm() const { return norm_; }
  int block_count() const { return arch_.blocks; }

  Tensor mapping_forward(const Tensor& noise, std::span<const int> labels) const;
  Tensor block_forward(int i, const Tensor& x) const;
  // apply blocks [state.layer_index, K); identity at the pixel boundary
  Tensor partial_forward(const LatentState& state) const;
  // push the latent through exactly one block
  LatentState advance(const LatentState& state) const;

  void freeze();
  bool frozen() const { return frozen_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }

  void save(const std::filesystem::path& path,
            const io::json& provenance = {}) const;
  static GeneratorStack load(const std::filesystem::path& path);

 private:
  GeneratorArch arch_;
  data::NormStats norm_;
  std::vector<Tensor> params_;
  bool frozen_ = false;

  // param index bookkeeping
  struct Slices;
  Tensor p(size_t i) const { return params_[i]; }
};

// mean of n_noise standard normal draws per sample, mapped through the
// mapping network; noise_fn overrides the sampler (tests inject sequences)
LatentState average_latent_init(const GeneratorStack& stack, int cls,
                                int n_noise, Rng& rng, int n_samples = 1,
                                const std::function<double()>& noise_fn = {});

// grouping of the K raw blocks into optimization spaces: returns the start
// boundary of each group; the last group absorbs any remainder
std::vector<int> decompose(const GeneratorStack& stack, int blocks_per_space);

struct GanTrainConfig {
  int epochs = 12;
  int batch = 64;
  double lr = 2e-4;
  double beta1 = 0.5;
  int max_train_images = 0;  // 0 = all
  uint64_t seed = 0;
  int disc_base_channels = 32;
  // sanity gate: mean softmax confidence of a pretrained classifier on
  // class-conditioned samples; skipped when no classifier is supplied
  double sanity_min_confidence = 0.6;
  int sanity_samples_per_class = 10;
  bool sanity_required = true;
  // when set, divergence aborts save the last stable state here
  std::filesystem::path abort_checkpoint;
};

struct GanTrainReport {
  double final_d_loss = 0.0;
  double final_g_loss = 0.0;
  double sanity_confidence = -1.0;  // -1 when gate skipped
  int epochs_run = 0;
};

GeneratorStack train_generator(
    const data::LabeledImageSet& dataset, const GeneratorArch& arch,
    const GanTrainConfig& cfg,
    const std::function<Tensor(const Tensor&)>& classifier_logits = {},
    GanTrainReport* report = nullptr);

}  // namespace hpd::gen
