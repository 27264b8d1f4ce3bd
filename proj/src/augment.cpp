#include "hpd/augment.hpp"

#include <cmath>

#include "hpd/errors.hpp"

namespace hpd::data {

TransformKind transform_from_string(const std::string& s) {
  if (s == "color") return TransformKind::Color;
  if (s == "crop") return TransformKind::Crop;
  if (s == "cutout") return TransformKind::Cutout;
  if (s == "flip") return TransformKind::Flip;
  if (s == "scale") return TransformKind::Scale;
  if (s == "rotate") return TransformKind::Rotate;
  throw ConfigError("unknown transform kind: " + s);
}

std::string transform_to_string(TransformKind k) {
  switch (k) {
    case TransformKind::Color: return "color";
    case TransformKind::Crop: return "crop";
    case TransformKind::Cutout: return "cutout";
    case TransformKind::Flip: return "flip";
    case TransformKind::Scale: return "scale";
    case TransformKind::Rotate: return "rotate";
  }
  return "?";
}

AugmentationPolicy AugmentationPolicy::dsa_default() {
  AugmentationPolicy p;
  p.kinds = {TransformKind::Color, TransformKind::Crop, TransformKind::Cutout,
             TransformKind::Flip,  TransformKind::Scale, TransformKind::Rotate};
  return p;
}

namespace {

std::vector<double> repeat_theta(const std::array<double, 6>& t, int n) {
  std::vector<double> out;
  out.reserve(size_t(n) * 6);
  for (int i = 0; i < n; ++i) out.insert(out.end(), t.begin(), t.end());
  return out;
}

// sample parameters for one transform; pure function of rng state
SampledTransform sample_params(TransformKind kind,
                               const AugmentationPolicy& p, int H, int W,
                               Rng& rng) {
  SampledTransform st{kind, {}};
  switch (kind) {
    case TransformKind::Color:
      st.params = {rng.uniform(-p.brightness, p.brightness),
                   rng.uniform(1.0 - p.contrast / 2, 1.0 + p.contrast / 2),
                   rng.uniform(0.5, 0.5 + p.saturation)};
      break;
    case TransformKind::Crop: {
      int max_dy = int(std::floor(p.crop_frac * H));
      int max_dx = int(std::floor(p.crop_frac * W));
      st.params = {double(rng.uniform_int(-max_dy, max_dy)),
                   double(rng.uniform_int(-max_dx, max_dx))};
      break;
    }
    case TransformKind::Cutout: {
      int side = std::max(1, int(std::lround(p.cutout_frac * std::min(H, W))));
      st.params = {double(rng.uniform_int(0, H - 1)),
                   double(rng.uniform_int(0, W - 1)), double(side)};
      break;
    }
    case TransformKind::Flip:
      st.params = {rng.bernoulli(0.5) ? 1.0 : 0.0};
      break;
    case TransformKind::Scale:
      st.params = {rng.uniform(1.0 - p.scale_frac, 1.0 + p.scale_frac)};
      break;
    case TransformKind::Rotate:
      st.params = {rng.uniform(-p.rotate_deg, p.rotate_deg) * M_PI / 180.0};
      break;
  }
  return st;
}

Tensor apply_one(const Tensor& x, const SampledTransform& st) {
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  switch (st.kind) {
    case TransformKind::Color: {
      double bright = st.params[0], contrast = st.params[1],
             sat = st.params[2];
      // saturation mixes towards the per-pixel channel mean, then contrast
      // scales around the per-image mean, then brightness shifts
      Tensor xm = mean(x, {1}, true);
      Tensor t = add(xm, mul_scalar(sub(x, xm), sat));
      Tensor im = mean(t, {1, 2, 3}, true);
      t = add(im, mul_scalar(sub(t, im), contrast));
      return add_scalar(t, bright);
    }
    case TransformKind::Crop: {
      double dy = st.params[0], dx = st.params[1];
      std::array<double, 6> t = {1.0, 0.0, W > 1 ? 2.0 * dx / (W - 1) : 0.0,
                                 0.0, 1.0, H > 1 ? 2.0 * dy / (H - 1) : 0.0};
      return affine_resample(x, repeat_theta(t, N), H, W);
    }
    case TransformKind::Cutout: {
      int cy = int(st.params[0]), cx = int(st.params[1]),
          side = int(st.params[2]);
      std::vector<double> m(size_t(H) * W, 1.0);
      for (int i = std::max(0, cy - side / 2);
           i < std::min(H, cy - side / 2 + side); ++i)
        for (int j = std::max(0, cx - side / 2);
             j < std::min(W, cx - side / 2 + side); ++j)
          m[size_t(i) * W + j] = 0.0;
      Tensor mask = Tensor::from_data({1, 1, H, W}, std::move(m));
      return mul(x, mask);
    }
    case TransformKind::Flip: {
      if (st.params[0] < 0.5) return x;
      std::array<double, 6> t = {-1.0, 0.0, 0.0, 0.0, 1.0, 0.0};
      return affine_resample(x, repeat_theta(t, N), H, W);
    }
    case TransformKind::Scale: {
      double s = st.params[0];
      std::array<double, 6> t = {1.0 / s, 0.0, 0.0, 0.0, 1.0 / s, 0.0};
      return affine_resample(x, repeat_theta(t, N), H, W);
    }
    case TransformKind::Rotate: {
      double a = st.params[0];
      std::array<double, 6> t = {std::cos(a), -std::sin(a), 0.0,
                                 std::sin(a), std::cos(a),  0.0};
      return affine_resample(x, repeat_theta(t, N), H, W);
    }
  }
  (void)C;
  return x;
}

SampledParams sample_all(const AugmentationPolicy& policy, int H, int W,
                         uint64_t seed) {
  Rng rng(seed);
  SampledParams out;
  for (auto kind : policy.kinds)
    out.push_back(sample_params(kind, policy, H, W, rng));
  return out;
}

Tensor apply_all(const Tensor& x, const SampledParams& params) {
  Tensor t = x;
  for (const auto& st : params) t = apply_one(t, st);
  return t;
}

}  // namespace

Tensor augment(const Tensor& batch, const AugmentationPolicy& policy,
               uint64_t seed, SampledParams* recorded) {
  if (batch.ndim() != 4) throw ConfigError("augment: need [N,C,H,W]");
  if (policy.empty()) {
    if (recorded) recorded->clear();
    return batch;
  }
  auto params = sample_all(policy, batch.dim(2), batch.dim(3), seed);
  if (recorded) *recorded = params;
  return apply_all(batch, params);
}

std::pair<Tensor, Tensor> paired_augment(const Tensor& real,
                                         const Tensor& synthetic,
                                         const AugmentationPolicy& policy,
                                         uint64_t seed,
                                         SampledParams* recorded_real,
                                         SampledParams* recorded_syn) {
  if (real.ndim() != 4 || synthetic.ndim() != 4)
    throw ConfigError("paired_augment: need [N,C,H,W] batches");
  if (real.dim(2) != synthetic.dim(2) || real.dim(3) != synthetic.dim(3) ||
      real.dim(1) != synthetic.dim(1))
    throw ConfigError("paired_augment: mismatched image shapes " +
                      shape_str(real.shape()) + " vs " +
                      shape_str(synthetic.shape()));
  if (policy.empty()) {
    if (recorded_real) recorded_real->clear();
    if (recorded_syn) recorded_syn->clear();
    return {real, synthetic};
  }
  auto params = sample_all(policy, real.dim(2), real.dim(3), seed);
  if (recorded_real) *recorded_real = params;
  if (recorded_syn) *recorded_syn = params;
  return {apply_all(real, params), apply_all(synthetic, params)};
}

}  // namespace hpd::data
