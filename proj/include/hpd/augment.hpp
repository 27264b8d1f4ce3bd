#pragma once

// Differentiable siamese augmentations. Each call samples one parameter set
// per transform (batch-level) from the seed and applies it identically to the
// real and synthetic branches, so matching losses see the same deformation on
// both sides. All transforms are differentiable w.r.t. input pixels.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hpd/tensor.hpp"

namespace hpd::data {

enum class TransformKind { Color, Crop, Cutout, Flip, Scale, Rotate };

TransformKind transform_from_string(const std::string& s);
std::string transform_to_string(TransformKind k);

struct AugmentationPolicy {
  std::vector<TransformKind> kinds;
  double brightness = 0.3;      // additive, in std units of normalized data
  double contrast = 0.5;        // scale factor range [1-c/2, 1+c/2]
  double saturation = 1.0;      // channel-mean mixing range [0, s] (+0.5)
  double crop_frac = 0.125;     // max shift as fraction of image size
  double cutout_frac = 0.3;     // square side as fraction of image size
  double scale_frac = 0.2;      // zoom range [1-s, 1+s]
  double rotate_deg = 15.0;
  bool seed_sharing = true;

  bool empty() const { return kinds.empty(); }
  static AugmentationPolicy identity() { return {}; }
  static AugmentationPolicy dsa_default();  // color, crop, cutout, flip, scale, rotate
};

// one sampled transform instance, recorded for parameter-sharing assertions
struct SampledTransform {
  TransformKind kind;
  std::vector<double> params;
};

using SampledParams = std::vector<SampledTransform>;

// Applies the policy with parameters drawn from `seed` to a single batch.
Tensor augment(const Tensor& batch, const AugmentationPolicy& policy,
               uint64_t seed, SampledParams* recorded = nullptr);

// Applies the policy with one shared parameter draw to both batches.
std::pair<Tensor, Tensor> paired_augment(const Tensor& real,
                                         const Tensor& synthetic,
                                         const AugmentationPolicy& policy,
                                         uint64_t seed,
                                         SampledParams* recorded_real = nullptr,
                                         SampledParams* recorded_syn = nullptr);

}  // namespace hpd::data
