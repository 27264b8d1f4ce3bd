#include "hpd/nn.hpp"

#include <algorithm>
#include <cmath>

#include "hpd/errors.hpp"

namespace hpd::nn {

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw ConfigError("conv2d: need [N,C,H,W] input and [OC,IC,kh,kw] weight");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int OC = w.dim(0), IC = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (IC != C)
    throw ConfigError("conv2d: channel mismatch " + shape_str(x.shape()) +
                      " vs " + shape_str(w.shape()));
  int OH = (H + 2 * pad - kh) / stride + 1;
  int OW = (W + 2 * pad - kw) / stride + 1;
  Tensor cols = im2col(x, kh, kw, stride, pad);           // [N, CKK, L]
  Tensor w2 = reshape(w, {OC, C * kh * kw});
  Tensor out = bmm_shared_left(w2, cols);                 // [N, OC, L]
  out = reshape(out, {N, OC, OH, OW});
  if (b.defined()) out = add(out, reshape(b, {1, OC, 1, 1}));
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor out = matmul(x, transpose2d(w));  // [N,in] x [in,out]
  if (b.defined()) out = add(out, reshape(b, {1, w.dim(0)}));
  return out;
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     double eps) {
  if (x.ndim() != 4) throw ConfigError("instance_norm: need [N,C,H,W]");
  int C = x.dim(1);
  Tensor mu = mean(x, {2, 3}, true);
  Tensor xc = sub(x, mu);
  Tensor var = mean(mul(xc, xc), {2, 3}, true);
  Tensor y = div(xc, sqrt(add_scalar(var, eps)));
  y = mul(y, reshape(gamma, {1, C, 1, 1}));
  y = add(y, reshape(beta, {1, C, 1, 1}));
  return y;
}

Tensor avg_pool_floor2(const Tensor& x) {
  Tensor t = x;
  int H = t.dim(2), W = t.dim(3);
  if (H % 2) t = slice(t, 2, 0, H - 1);
  if (W % 2) t = slice(t, 3, 0, W - 1);
  return avg_pool2d(t, 2);
}

Tensor flatten(const Tensor& x) { return reshape(x, {x.dim(0), -1}); }

Tensor onehot(std::span<const int> labels, int classes) {
  std::vector<double> v(labels.size() * static_cast<size_t>(classes), 0.0);
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes)
      throw ConfigError("onehot: label out of range");
    v[i * classes + static_cast<size_t>(labels[i])] = 1.0;
  }
  return Tensor::from_data({static_cast<int>(labels.size()), classes},
                           std::move(v));
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor shifted = sub(logits, row_max_detached(logits));
  Tensor e = exp(shifted);
  return div(e, sum(e, {logits.ndim() - 1}, true));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.ndim() != 2) throw ConfigError("cross_entropy: need [N,C]");
  int N = logits.dim(0), C = logits.dim(1);
  if (static_cast<size_t>(N) != labels.size())
    throw ConfigError("cross_entropy: label count mismatch");
  Tensor m = row_max_detached(logits);
  Tensor shifted = sub(logits, m);
  Tensor lse = add(log(sum(exp(shifted), {1}, true)), m);  // [N,1]
  Tensor picked = sum(mul(logits, onehot(labels, C)), {1}, true);
  return mean(sub(lse, picked));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  int N = logits.dim(0), C = logits.dim(1);
  std::vector<int> out(static_cast<size_t>(N));
  auto d = logits.data();
  for (int i = 0; i < N; ++i) {
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (d[static_cast<size_t>(i) * C + c] > d[static_cast<size_t>(i) * C + best]) best = c;
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  auto pred = argmax_rows(logits);
  size_t hits = 0;
  for (size_t i = 0; i < labels.size(); ++i)
    if (pred[i] == labels[i]) ++hits;
  return labels.empty() ? 0.0 : static_cast<double>(hits) / labels.size();
}

// ---- architectures ----

ArchId arch_from_string(const std::string& s) {
  if (s == "convnet3" || s == "convnet") return ArchId::ConvNet;
  if (s == "mlp") return ArchId::Mlp;
  if (s == "vgg-s" || s == "vggs") return ArchId::VggS;
  if (s == "resnet-s" || s == "resnets") return ArchId::ResNetS;
  throw ConfigError("unknown architecture id: " + s);
}

std::string arch_to_string(ArchId a) {
  switch (a) {
    case ArchId::ConvNet: return "convnet3";
    case ArchId::Mlp: return "mlp";
    case ArchId::VggS: return "vgg-s";
    case ArchId::ResNetS: return "resnet-s";
  }
  return "?";
}

namespace {

double kaiming_std(const Shape& w) {
  // fan_in: conv [OC,IC,kh,kw] -> IC*kh*kw; linear [OUT,IN] -> IN
  size_t fan = 1;
  for (size_t i = 1; i < w.size(); ++i) fan *= static_cast<size_t>(w[i]);
  return std::sqrt(2.0 / static_cast<double>(fan));
}

void push_conv(std::vector<ParamInfo>& ps, const std::string& base, int oc,
               int ic, int k) {
  Shape w{oc, ic, k, k};
  ps.push_back({base + ".w", w, kaiming_std(w)});
  ps.push_back({base + ".b", {oc}, 0.0});
}

void push_norm(std::vector<ParamInfo>& ps, const std::string& base, int c) {
  ps.push_back({base + ".gamma", {c}, -1.0});
  ps.push_back({base + ".beta", {c}, 0.0});
}

void push_linear(std::vector<ParamInfo>& ps, const std::string& base, int out,
                 int in) {
  Shape w{out, in};
  ps.push_back({base + ".w", w, kaiming_std(w)});
  ps.push_back({base + ".b", {out}, 0.0});
}

struct ConvNetDims {
  int h, w;  // spatial size after all blocks
};

ConvNetDims convnet_dims(const ModelSpec& s) {
  int h = s.img_h, w = s.img_w;
  for (int d = 0; d < s.depth; ++d) {
    h = (h - h % 2) / 2;
    w = (w - w % 2) / 2;
  }
  return {h, w};
}

int vgg_blocks() { return 3; }

struct VggDims {
  int h, w, c;
};

VggDims vgg_dims(const ModelSpec& s) {
  int h = s.img_h, w = s.img_w;
  for (int d = 0; d < vgg_blocks(); ++d) {
    h = (h - h % 2) / 2;
    w = (w - w % 2) / 2;
  }
  return {h, w, s.width * 2};
}

struct ResDims {
  int h, w;
};

ResDims res_dims(const ModelSpec& s) {
  // stem, block1, pool, block2, pool
  int h = s.img_h, w = s.img_w;
  for (int d = 0; d < 2; ++d) {
    h = (h - h % 2) / 2;
    w = (w - w % 2) / 2;
  }
  return {h, w};
}

}  // namespace

std::vector<ParamInfo> param_infos(const ModelSpec& s) {
  std::vector<ParamInfo> ps;
  switch (s.id) {
    case ArchId::ConvNet: {
      int ic = s.in_ch;
      for (int d = 0; d < s.depth; ++d) {
        push_conv(ps, "block" + std::to_string(d), s.width, ic, 3);
        push_norm(ps, "norm" + std::to_string(d), s.width);
        ic = s.width;
      }
      auto dims = convnet_dims(s);
      push_linear(ps, "head", s.classes, s.width * dims.h * dims.w);
      break;
    }
    case ArchId::Mlp: {
      push_linear(ps, "fc1", s.width * 4, s.in_ch * s.img_h * s.img_w);
      push_linear(ps, "fc2", s.width * 2, s.width * 4);
      push_linear(ps, "head", s.classes, s.width * 2);
      break;
    }
    case ArchId::VggS: {
      push_conv(ps, "conv1", s.width, s.in_ch, 3);
      push_norm(ps, "norm1", s.width);
      push_conv(ps, "conv2", s.width * 2, s.width, 3);
      push_norm(ps, "norm2", s.width * 2);
      push_conv(ps, "conv3", s.width * 2, s.width * 2, 3);
      push_norm(ps, "norm3", s.width * 2);
      auto dims = vgg_dims(s);
      push_linear(ps, "head", s.classes, dims.c * dims.h * dims.w);
      break;
    }
    case ArchId::ResNetS: {
      push_conv(ps, "stem", s.width, s.in_ch, 3);
      push_norm(ps, "stemn", s.width);
      for (int b = 0; b < 2; ++b) {
        std::string p = "res" + std::to_string(b);
        push_conv(ps, p + "a", s.width, s.width, 3);
        push_norm(ps, p + "an", s.width);
        push_conv(ps, p + "b", s.width, s.width, 3);
        push_norm(ps, p + "bn", s.width);
      }
      auto dims = res_dims(s);
      push_linear(ps, "head", s.classes, s.width * dims.h * dims.w);
      break;
    }
  }
  return ps;
}

std::vector<Tensor> init_params(const ModelSpec& spec, Rng& rng,
                                bool requires_grad) {
  std::vector<Tensor> out;
  for (const auto& info : param_infos(spec)) {
    if (info.init_std == 0.0) {
      out.push_back(Tensor::zeros(info.shape, requires_grad));
    } else if (info.init_std < 0.0) {
      out.push_back(Tensor::full(info.shape, 1.0, requires_grad));
    } else {
      out.push_back(Tensor::randn(info.shape, rng, info.init_std, requires_grad));
    }
  }
  return out;
}

size_t feature_param_count(const ModelSpec& s) {
  // every arch ends with one linear head (w, b)
  return param_infos(s).size() - 2;
}

Shape feature_shape(const ModelSpec& s) {
  switch (s.id) {
    case ArchId::ConvNet: {
      auto d = convnet_dims(s);
      return {s.width, d.h, d.w};
    }
    case ArchId::Mlp: return {s.width * 2, 1, 1};
    case ArchId::VggS: {
      auto d = vgg_dims(s);
      return {d.c, d.h, d.w};
    }
    case ArchId::ResNetS: {
      auto d = res_dims(s);
      return {s.width, d.h, d.w};
    }
  }
  return {};
}

Tensor forward_features(const ModelSpec& s, std::span<const Tensor> params,
                        const Tensor& x) {
  size_t p = 0;
  auto next = [&]() -> const Tensor& { return params[p++]; };
  switch (s.id) {
    case ArchId::ConvNet: {
      Tensor h = x;
      for (int d = 0; d < s.depth; ++d) {
        const Tensor& w = next();
        const Tensor& b = next();
        const Tensor& g = next();
        const Tensor& bt = next();
        h = conv2d(h, w, b, 1, 1);
        h = instance_norm(h, g, bt);
        h = relu(h);
        h = avg_pool_floor2(h);
      }
      return h;
    }
    case ArchId::Mlp: {
      Tensor h = flatten(x);
      h = relu(linear(h, next(), next()));
      h = relu(linear(h, next(), next()));
      return reshape(h, {h.dim(0), s.width * 2, 1, 1});
    }
    case ArchId::VggS: {
      Tensor h = x;
      for (int blk = 0; blk < 3; ++blk) {
        const Tensor& w = next();
        const Tensor& b = next();
        const Tensor& g = next();
        const Tensor& bt = next();
        h = relu(instance_norm(conv2d(h, w, b, 1, 1), g, bt));
        h = avg_pool_floor2(h);
      }
      return h;
    }
    case ArchId::ResNetS: {
      Tensor h = x;
      h = relu(instance_norm(conv2d(h, next(), next(), 1, 1), next(), next()));
      for (int blk = 0; blk < 2; ++blk) {
        Tensor skip = h;
        Tensor t = relu(instance_norm(conv2d(h, next(), next(), 1, 1), next(), next()));
        t = instance_norm(conv2d(t, next(), next(), 1, 1), next(), next());
        h = relu(add(t, skip));
        h = avg_pool_floor2(h);
      }
      return h;
    }
  }
  throw ConfigError("forward_features: bad arch");
}

Tensor forward_head(const ModelSpec& s, std::span<const Tensor> params,
                    const Tensor& features) {
  size_t base = feature_param_count(s);
  return linear(flatten(features), params[base], params[base + 1]);
}

Tensor forward_logits(const ModelSpec& s, std::span<const Tensor> params,
                      const Tensor& x) {
  return forward_head(s, params, forward_features(s, params, x));
}

// ---- optimizers ----

void Sgd::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (velocity.empty()) {
    velocity.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i)
      velocity[i].assign(params[i].numel(), 0.0);
  }
  for (size_t i = 0; i < params.size(); ++i) {
    auto pd = params[i].mutable_data();
    auto gd = grads[i].data();
    auto& vel = velocity[i];
    for (size_t j = 0; j < pd.size(); ++j) {
      double g = gd[j] + weight_decay * pd[j];
      vel[j] = momentum * vel[j] + g;
      pd[j] -= lr * vel[j];
    }
  }
}

void Adam::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (m.empty()) {
    m.resize(params.size());
    v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params[i].numel(), 0.0);
      v[i].assign(params[i].numel(), 0.0);
    }
  }
  ++t;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto pd = params[i].mutable_data();
    auto gd = grads[i].data();
    for (size_t j = 0; j < pd.size(); ++j) {
      m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * gd[j];
      v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * gd[j] * gd[j];
      double mh = m[i][j] / bc1;
      double vh = v[i][j] / bc2;
      pd[j] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
}

double cosine_lr(double base_lr, int step, int total_steps) {
  if (total_steps <= 1) return base_lr;
  double frac = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return 0.5 * base_lr * (1.0 + std::cos(M_PI * frac));
}

}  // namespace hpd::nn
