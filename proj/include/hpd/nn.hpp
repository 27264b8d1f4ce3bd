#pragma once

// Functional neural-network layers and small reference architectures.
//
// Models are pure functions of (params, input); parameters live in flat
// vectors owned by the caller. This keeps re-initialization trivial (the
// distillation objectives resample proxy models constantly) and lets
// parameters be non-leaf graph nodes, which unrolled trajectory matching
// needs.

#include <span>
#include <string>
#include <vector>

#include "hpd/tensor.hpp"

namespace hpd::nn {

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              int stride = 1, int pad = 1);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// per-sample, per-channel normalization over spatial dims; affine
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     double eps = 1e-5);
// avg pool 2x2 that drops an odd trailing row/column
Tensor avg_pool_floor2(const Tensor& x);
Tensor flatten(const Tensor& x);

Tensor onehot(std::span<const int> labels, int classes);
Tensor softmax_rows(const Tensor& logits);
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
double accuracy(const Tensor& logits, std::span<const int> labels);
std::vector<int> argmax_rows(const Tensor& logits);

// ---- architectures ----

enum class ArchId { ConvNet, Mlp, VggS, ResNetS };

ArchId arch_from_string(const std::string& s);
std::string arch_to_string(ArchId a);

struct ModelSpec {
  ArchId id = ArchId::ConvNet;
  int in_ch = 1;
  int img_h = 28;
  int img_w = 28;
  int classes = 10;
  int width = 64;
  int depth = 3;  // ConvNet only
};

struct ParamInfo {
  std::string name;
  Shape shape;
  double init_std;  // 0 => zeros, -1 => ones
};

std::vector<ParamInfo> param_infos(const ModelSpec& spec);
std::vector<Tensor> init_params(const ModelSpec& spec, Rng& rng,
                                bool requires_grad = true);

// Feature extractor part (everything but the classifier head). For conv
// architectures the result keeps its spatial layout [N, C', h, w].
Tensor forward_features(const ModelSpec& spec, std::span<const Tensor> params,
                        const Tensor& x);
Tensor forward_head(const ModelSpec& spec, std::span<const Tensor> params,
                    const Tensor& features);
Tensor forward_logits(const ModelSpec& spec, std::span<const Tensor> params,
                      const Tensor& x);
// number of leading params consumed by forward_features
size_t feature_param_count(const ModelSpec& spec);
Shape feature_shape(const ModelSpec& spec);  // per-sample, no batch dim

// ---- optimizers (mutate leaf parameter data in place) ----

struct Sgd {
  double lr = 0.01;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::vector<std::vector<double>> velocity;

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads);
};

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;
  std::vector<std::vector<double>> m, v;

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads);
};

double cosine_lr(double base_lr, int step, int total_steps);

}  // namespace hpd::nn
