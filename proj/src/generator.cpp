#include "hpd/generator.hpp"

#include <algorithm>
#include <cmath>

#include "hpd/errors.hpp"
#include "hpd/nn.hpp"
#include "hpd/serialize.hpp"

namespace hpd::gen {

using nn::conv2d;
using nn::instance_norm;
using nn::linear;

// ---- geometry ----

int GeneratorArch::canvas() const {
  int side = std::max(img_h, img_w);
  int c = 1;
  while (c < side) c <<= 1;
  return c;
}

int GeneratorArch::start_size() const {
  // 32px: seed 2x2 so every block upsamples; 28px: seed 4x4 (3 upsamples,
  // crop from the 32 canvas); otherwise as many upsamples as blocks allow
  if (img_h == 28 && img_w == 28) return 4;
  int c = canvas();
  int s = c >> blocks;
  return std::max(2, s);
}

namespace {
int ups_total(const GeneratorArch& a) {
  int u = 0;
  for (int s = a.start_size(); s < a.canvas(); s <<= 1) ++u;
  return u;
}
}  // namespace

bool GeneratorArch::block_upsamples(int i) const {
  // the last `ups` blocks upsample
  int skip = blocks - ups_total(*this);
  return i >= skip;
}

int GeneratorArch::block_in_spatial(int i) const {
  int s = start_size();
  for (int b = 0; b < i; ++b)
    if (block_upsamples(b)) s <<= 1;
  return s;
}

int GeneratorArch::block_out_spatial(int i) const {
  int s = block_in_spatial(i);
  if (block_upsamples(i)) s <<= 1;
  if (i == blocks - 1) s = img_h;  // final block crops the canvas
  return s;
}

int GeneratorArch::block_in_channels(int i) const {
  if (i == 0) return 0;  // style vector, not a feature map
  return block_out_channels(i - 1);
}

int GeneratorArch::block_out_channels(int i) const {
  if (i == blocks - 1) return channels;
  return base_channels << (blocks - 2 - i);
}

Shape GeneratorArch::latent_shape(int boundary) const {
  if (boundary < 0 || boundary > blocks)
    throw ConfigError("latent boundary out of range: " +
                      std::to_string(boundary));
  if (boundary == 0) return {w_dim};
  if (boundary == blocks) return {channels, img_h, img_w};
  return {block_out_channels(boundary - 1), block_out_spatial(boundary - 1),
          block_out_spatial(boundary - 1)};
}

SpaceKind space_kind_at(const GeneratorArch& arch, int boundary) {
  if (boundary == 0) return SpaceKind::StyleW;
  if (boundary == arch.blocks) return SpaceKind::Pixel;
  return SpaceKind::FeatureF;
}

// ---- parameter layout ----
// [0] embed [classes, embed_dim]
// [1,2] map1 w/b, [3,4] map2 w/b
// [5,6] proj w/b (w_dim -> ch0*s0*s0)
// per block i: conv w/b (+ gamma/beta except final block)

struct GeneratorStack::Slices {
  static constexpr size_t embed = 0;
  static constexpr size_t map1 = 1;
  static constexpr size_t map2 = 3;
  static constexpr size_t proj = 5;
  static constexpr size_t blocks0 = 7;

  static size_t block_base(const GeneratorArch& a, int i) {
    size_t base = blocks0;
    for (int b = 0; b < i; ++b) base += (b == a.blocks - 1) ? 2 : 4;
    return base;
  }
};

GeneratorStack::GeneratorStack(GeneratorArch arch, data::NormStats norm,
                               Rng& rng)
    : arch_(arch), norm_(std::move(norm)) {
  auto kstd = [](int fan_in) { return std::sqrt(2.0 / double(fan_in)); };
  int min_dim = std::min(arch_.noise_dim, std::min(arch_.w_dim, arch_.embed_dim));
  if (min_dim < 1 || arch_.blocks < 2 || arch_.base_channels < 1)
    throw ConfigError("generator arch: bad dimensions");
  if (arch_.start_size() << ups_total(arch_) != arch_.canvas())
    throw ConfigError("generator arch: canvas not reachable from seed size");

  params_.push_back(Tensor::randn({arch_.classes, arch_.embed_dim}, rng, 0.5, true));
  int map_in = arch_.noise_dim + arch_.embed_dim;
  params_.push_back(Tensor::randn({arch_.map_hidden, map_in}, rng, kstd(map_in), true));
  params_.push_back(Tensor::zeros({arch_.map_hidden}, true));
  params_.push_back(Tensor::randn({arch_.w_dim, arch_.map_hidden}, rng,
                                  kstd(arch_.map_hidden), true));
  params_.push_back(Tensor::zeros({arch_.w_dim}, true));

  int s0 = arch_.start_size();
  int ch0 = arch_.base_channels << (arch_.blocks - 2);
  params_.push_back(Tensor::randn({ch0 * s0 * s0, arch_.w_dim}, rng,
                                  kstd(arch_.w_dim), true));
  params_.push_back(Tensor::zeros({ch0 * s0 * s0}, true));

  int in_ch = ch0;
  for (int i = 0; i < arch_.blocks; ++i) {
    int out_ch = arch_.block_out_channels(i);
    params_.push_back(
        Tensor::randn({out_ch, in_ch, 3, 3}, rng, kstd(in_ch * 9), true));
    params_.push_back(Tensor::zeros({out_ch}, true));
    if (i != arch_.blocks - 1) {
      params_.push_back(Tensor::full({out_ch}, 1.0, true));
      params_.push_back(Tensor::zeros({out_ch}, true));
    }
    in_ch = out_ch;
  }
}

Tensor GeneratorStack::mapping_forward(const Tensor& noise,
                                       std::span<const int> labels) const {
  if (noise.ndim() != 2 || noise.dim(1) != arch_.noise_dim)
    throw ConfigError("mapping_forward: noise must be [N," +
                      std::to_string(arch_.noise_dim) + "]");
  if (size_t(noise.dim(0)) != labels.size())
    throw ConfigError("mapping_forward: label count mismatch");
  Tensor emb = matmul(nn::onehot(labels, arch_.classes), p(Slices::embed));
  Tensor h = concat({noise, emb}, 1);
  h = relu(linear(h, p(Slices::map1), p(Slices::map1 + 1)));
  return linear(h, p(Slices::map2), p(Slices::map2 + 1));
}

Tensor GeneratorStack::block_forward(int i, const Tensor& x) const {
  if (i < 0 || i >= arch_.blocks)
    throw ConfigError("block_forward: bad block " + std::to_string(i));
  Tensor h = x;
  size_t base = Slices::block_base(arch_, i);
  if (i == 0) {
    if (h.ndim() != 2 || h.dim(1) != arch_.w_dim)
      throw ConfigError("block 0 expects style latent [N," +
                        std::to_string(arch_.w_dim) + "], got " +
                        shape_str(h.shape()));
    int s0 = arch_.start_size();
    int ch0 = arch_.base_channels << (arch_.blocks - 2);
    h = linear(h, p(Slices::proj), p(Slices::proj + 1));
    h = reshape(h, {h.dim(0), ch0, s0, s0});
  } else {
    Shape want = arch_.latent_shape(i);
    if (h.ndim() != 4 || h.dim(1) != want[0] || h.dim(2) != want[1] ||
        h.dim(3) != want[2])
      throw ConfigError("block " + std::to_string(i) + " expects [N," +
                        std::to_string(want[0]) + "," +
                        std::to_string(want[1]) + "," +
                        std::to_string(want[2]) + "], got " +
                        shape_str(h.shape()));
  }
  if (arch_.block_upsamples(i)) h = upsample_nearest(h, 2);
  h = conv2d(h, p(base), p(base + 1), 1, 1);
  if (i != arch_.blocks - 1) {
    h = instance_norm(h, p(base + 2), p(base + 3));
    h = relu(h);
  } else {
    h = tanh(h);
    // center-crop canvas to image size, then map [-1,1] into the dataset's
    // normalized value range channel by channel
    int canvas = h.dim(2);
    if (canvas != arch_.img_h) {
      int off_h = (canvas - arch_.img_h) / 2;
      int off_w = (canvas - arch_.img_w) / 2;
      h = slice(h, 2, off_h, arch_.img_h);
      h = slice(h, 3, off_w, arch_.img_w);
    }
    std::vector<double> scale(size_t(arch_.channels)), shift(size_t(arch_.channels));
    for (int c = 0; c < arch_.channels; ++c) {
      // pixel01 = (t+1)/2; normalized = (pixel01 - mean)/std
      scale[size_t(c)] = 0.5 / norm_.stddev[size_t(c)];
      shift[size_t(c)] = (0.5 - norm_.mean[size_t(c)]) / norm_.stddev[size_t(c)];
    }
    Tensor sc = Tensor::from_data({1, arch_.channels, 1, 1}, std::move(scale));
    Tensor sh = Tensor::from_data({1, arch_.channels, 1, 1}, std::move(shift));
    h = add(mul(h, sc), sh);
  }
  return h;
}

Tensor GeneratorStack::partial_forward(const LatentState& state) const {
  if (state.layer_index < 0 || state.layer_index > arch_.blocks)
    throw ConfigError("partial_forward: layer_index out of range");
  Shape want = arch_.latent_shape(state.layer_index);
  Shape got(state.values.shape().begin() + 1, state.values.shape().end());
  if (got != want)
    throw ConfigError("partial_forward: latent shape " + shape_str(got) +
                      " does not match boundary shape " + shape_str(want));
  Tensor h = state.values;
  for (int i = state.layer_index; i < arch_.blocks; ++i) h = block_forward(i, h);
  return h;
}

LatentState GeneratorStack::advance(const LatentState& state) const {
  if (state.layer_index >= arch_.blocks)
    throw ConfigError("advance: already at the pixel boundary");
  LatentState out;
  out.layer_index = state.layer_index + 1;
  out.values = block_forward(state.layer_index, state.values);
  out.labels = state.labels;
  out.kind = space_kind_at(arch_, out.layer_index);
  return out;
}

void GeneratorStack::freeze() {
  for (auto& t : params_) t.set_requires_grad(false);
  frozen_ = true;
}

void GeneratorStack::save(const std::filesystem::path& path,
                          const io::json& provenance) const {
  io::json hdr = {{"kind", "generator"},
                  {"version", 1},
                  {"arch",
                   {{"img_h", arch_.img_h},
                    {"img_w", arch_.img_w},
                    {"channels", arch_.channels},
                    {"classes", arch_.classes},
                    {"noise_dim", arch_.noise_dim},
                    {"w_dim", arch_.w_dim},
                    {"embed_dim", arch_.embed_dim},
                    {"map_hidden", arch_.map_hidden},
                    {"base_channels", arch_.base_channels},
                    {"blocks", arch_.blocks}}},
                  {"norm_mean", norm_.mean},
                  {"norm_std", norm_.stddev},
                  {"provenance", provenance}};
  io::write_checkpoint(path, hdr, params_);
}

GeneratorStack GeneratorStack::load(const std::filesystem::path& path) {
  auto ckpt = io::read_checkpoint(path);
  if (ckpt.header.value("kind", "") != "generator")
    throw DataError("not a generator checkpoint: " + path.string());
  const auto& a = ckpt.header.at("arch");
  GeneratorArch arch;
  arch.img_h = a.at("img_h");
  arch.img_w = a.at("img_w");
  arch.channels = a.at("channels");
  arch.classes = a.at("classes");
  arch.noise_dim = a.at("noise_dim");
  arch.w_dim = a.at("w_dim");
  arch.embed_dim = a.at("embed_dim");
  arch.map_hidden = a.at("map_hidden");
  arch.base_channels = a.at("base_channels");
  arch.blocks = a.at("blocks");
  GeneratorStack stack;
  stack.arch_ = arch;
  stack.norm_.mean = ckpt.header.at("norm_mean").get<std::vector<double>>();
  stack.norm_.stddev = ckpt.header.at("norm_std").get<std::vector<double>>();
  stack.params_ = std::move(ckpt.params);
  stack.freeze();
  return stack;
}

// ---- initialization and decomposition ----

LatentState average_latent_init(const GeneratorStack& stack, int cls,
                                int n_noise, Rng& rng, int n_samples,
                                const std::function<double()>& noise_fn) {
  if (n_noise < 1)
    throw ConfigError("average_latent_init: n_noise must be >= 1");
  const auto& arch = stack.arch();
  if (cls < 0 || cls >= arch.classes)
    throw ConfigError("average_latent_init: bad class");
  std::vector<double> avg(size_t(n_samples) * arch.noise_dim, 0.0);
  for (int s = 0; s < n_samples; ++s)
    for (int k = 0; k < n_noise; ++k)
      for (int d = 0; d < arch.noise_dim; ++d)
        avg[size_t(s) * arch.noise_dim + d] +=
            (noise_fn ? noise_fn() : rng.normal()) / double(n_noise);
  Tensor noise =
      Tensor::from_data({n_samples, arch.noise_dim}, std::move(avg));
  std::vector<int> labels(size_t(n_samples), cls);
  LatentState out;
  out.layer_index = 0;
  out.kind = SpaceKind::StyleW;
  out.labels = labels;
  {
    GradMode off(false);
    out.values = stack.mapping_forward(noise, labels).detach();
  }
  return out;
}

std::vector<int> decompose(const GeneratorStack& stack, int blocks_per_space) {
  int k = stack.block_count();
  if (blocks_per_space <= 0 || blocks_per_space > k)
    throw ConfigError("decompose: blocks_per_space must be in [1," +
                      std::to_string(k) + "]");
  std::vector<int> starts;
  for (int b = 0; b + blocks_per_space <= k; b += blocks_per_space)
    starts.push_back(b);
  // remainder blocks fold into a trailing group of their own
  if (k % blocks_per_space != 0) starts.push_back(k - k % blocks_per_space);
  return starts;
}

// ---- adversarial training ----

namespace {

// discriminator with an auxiliary class head: column 0 is the adversarial
// logit, columns 1..C are class logits (AC-GAN style conditioning)
struct Discriminator {
  std::vector<Tensor> params;
  int classes, base;

  Discriminator(const GeneratorArch& a, int base_ch, Rng& rng)
      : classes(a.classes), base(base_ch) {
    auto kstd = [](int fan) { return std::sqrt(2.0 / double(fan)); };
    int in_ch = a.channels;
    int chs[3] = {base, base * 2, base * 4};
    int h = a.img_h, w = a.img_w;
    for (int i = 0; i < 3; ++i) {
      params.push_back(
          Tensor::randn({chs[i], in_ch, 3, 3}, rng, kstd(in_ch * 9), true));
      params.push_back(Tensor::zeros({chs[i]}, true));
      if (i > 0) {
        params.push_back(Tensor::full({chs[i]}, 1.0, true));
        params.push_back(Tensor::zeros({chs[i]}, true));
      }
      in_ch = chs[i];
      h = (h - h % 2) / 2;
      w = (w - w % 2) / 2;
    }
    params.push_back(Tensor::randn({1 + a.classes, chs[2] * h * w}, rng,
                                   kstd(chs[2] * h * w), true));
    params.push_back(Tensor::zeros({1 + a.classes}, true));
  }

  struct Out {
    Tensor adv;        // [N,1]
    Tensor class_logits;  // [N,C]
  };

  Out forward(const Tensor& images) const {
    Tensor h = images;
    size_t pidx = 0;
    for (int i = 0; i < 3; ++i) {
      h = conv2d(h, params[pidx], params[pidx + 1], 1, 1);
      pidx += 2;
      if (i > 0) {
        h = instance_norm(h, params[pidx], params[pidx + 1]);
        pidx += 2;
      }
      h = leaky_relu(h, 0.2);
      h = nn::avg_pool_floor2(h);
    }
    Tensor out = linear(nn::flatten(h), params[pidx], params[pidx + 1]);
    return {slice(out, 1, 0, 1), slice(out, 1, 1, classes)};
  }
};

bool params_finite(const std::vector<Tensor>& ps) {
  for (const auto& p : ps)
    if (!all_finite(p)) return false;
  return true;
}

std::vector<Tensor> snapshot(const std::vector<Tensor>& ps) {
  std::vector<Tensor> out;
  out.reserve(ps.size());
  for (const auto& p : ps) out.push_back(p.detach());
  return out;
}

void restore(std::vector<Tensor>& ps, const std::vector<Tensor>& snap) {
  for (size_t i = 0; i < ps.size(); ++i) {
    auto dst = ps[i].mutable_data();
    auto src = snap[i].data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace

GeneratorStack train_generator(
    const data::LabeledImageSet& dataset, const GeneratorArch& arch0,
    const GanTrainConfig& cfg,
    const std::function<Tensor(const Tensor&)>& classifier_logits,
    GanTrainReport* report) {
  if (dataset.train_count() == 0)
    throw ConfigError("train_generator: empty train split");
  GeneratorArch arch = arch0;
  arch.img_h = dataset.height;
  arch.img_w = dataset.width;
  arch.channels = dataset.channels;
  arch.classes = dataset.classes;

  Rng rng(cfg.seed);
  GeneratorStack g(arch, dataset.norm, rng);
  Discriminator d(arch, cfg.disc_base_channels, rng);

  nn::Adam g_opt{cfg.lr, cfg.beta1, 0.999};
  nn::Adam d_opt{cfg.lr, cfg.beta1, 0.999};

  std::vector<int> indices(dataset.train_count());
  for (size_t i = 0; i < indices.size(); ++i) indices[i] = int(i);
  if (cfg.max_train_images > 0 &&
      indices.size() > size_t(cfg.max_train_images)) {
    shuffle(indices, rng);
    indices.resize(size_t(cfg.max_train_images));
  }

  auto g_stable = snapshot(g.params());
  auto d_stable = snapshot(d.params);
  double d_loss_avg = 0.0, g_loss_avg = 0.0;
  int epochs_done = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(indices, rng);
    size_t nb = indices.size() / size_t(cfg.batch);
    for (size_t b = 0; b < nb; ++b) {
      std::span<const int> batch_idx(indices.data() + b * size_t(cfg.batch),
                                     size_t(cfg.batch));
      Tensor real = dataset.train_batch(batch_idx);
      std::vector<int> labels;
      for (int idx : batch_idx)
        labels.push_back(dataset.train_labels[size_t(idx)]);

      Tensor noise = Tensor::randn({cfg.batch, arch.noise_dim}, rng);
      Tensor w = g.mapping_forward(noise, labels);
      LatentState ls{0, w, labels, SpaceKind::StyleW};
      Tensor fake = g.partial_forward(ls);

      // discriminator update: adversarial + class head on real images
      auto d_real = d.forward(real);
      auto d_fake = d.forward(fake.detach());
      Tensor d_loss = add(mean(softplus(neg(d_real.adv))),
                          mean(softplus(d_fake.adv)));
      d_loss = add(d_loss, nn::cross_entropy(d_real.class_logits, labels));
      auto d_grads = grad(d_loss, d.params);
      d_opt.step(d.params, d_grads);

      // generator update: non-saturating + make fakes classifiable
      auto d_fake2 = d.forward(fake);
      Tensor g_loss = mean(softplus(neg(d_fake2.adv)));
      g_loss = add(g_loss, nn::cross_entropy(d_fake2.class_logits, labels));
      auto g_grads = grad(g_loss, g.params());
      g_opt.step(g.params(), g_grads);

      double dl = d_loss.item(), gl = g_loss.item();
      if (!std::isfinite(dl) || !std::isfinite(gl) ||
          !params_finite(g.params()) || !params_finite(d.params)) {
        restore(g.params(), g_stable);
        g.freeze();
        if (!cfg.abort_checkpoint.empty())
          g.save(cfg.abort_checkpoint,
                 {{"aborted", true}, {"epoch", epoch}});
        throw TrainError(
            "train_generator: adversarial training diverged (NaN) at epoch " +
            std::to_string(epoch) + "; last stable state " +
            (cfg.abort_checkpoint.empty()
                 ? std::string("discarded")
                 : "saved to " + cfg.abort_checkpoint.string()));
      }
      d_loss_avg = 0.9 * d_loss_avg + 0.1 * dl;
      g_loss_avg = 0.9 * g_loss_avg + 0.1 * gl;
    }
    g_stable = snapshot(g.params());
    d_stable = snapshot(d.params);
    epochs_done = epoch + 1;
  }
  (void)d_stable;

  g.freeze();

  double confidence = -1.0;
  if (classifier_logits) {
    GradMode off(false);
    int per = cfg.sanity_samples_per_class;
    std::vector<int> labels;
    for (int c = 0; c < arch.classes; ++c)
      for (int i = 0; i < per; ++i) labels.push_back(c);
    Tensor noise =
        Tensor::randn({int(labels.size()), arch.noise_dim}, rng);
    Tensor w = g.mapping_forward(noise, labels);
    Tensor samples = g.partial_forward({0, w, labels, SpaceKind::StyleW});
    Tensor probs = nn::softmax_rows(classifier_logits(samples));
    double acc = 0.0;
    for (size_t i = 0; i < labels.size(); ++i)
      acc += probs.at(i * size_t(arch.classes) + size_t(labels[i]));
    confidence = acc / double(labels.size());
    if (cfg.sanity_required && confidence < cfg.sanity_min_confidence)
      throw TrainError("train_generator: sanity gate failed, mean class "
                       "confidence " +
                       std::to_string(confidence) + " < " +
                       std::to_string(cfg.sanity_min_confidence));
  }

  if (report) {
    report->final_d_loss = d_loss_avg;
    report->final_g_loss = g_loss_avg;
    report->sanity_confidence = confidence;
    report->epochs_run = epochs_done;
  }
  return g;
}

}  // namespace hpd::gen
