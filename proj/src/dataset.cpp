#include "hpd/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include "hpd/errors.hpp"
#include "hpd/serialize.hpp"

namespace hpd::data {

namespace fs = std::filesystem;
using io::json;

namespace {

uint32_t read_be32(std::istream& is) {
  uint8_t b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("idx: truncated header");
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) |
         (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_be32(std::ostream& os, uint32_t v) {
  uint8_t b[4] = {uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8),
                  uint8_t(v)};
  os.write(reinterpret_cast<char*>(b), 4);
}

struct IdxImages {
  int n = 0, h = 0, w = 0;
  std::vector<uint8_t> pixels;
};

IdxImages read_idx_images(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing dataset file: " + path.string());
  if (read_be32(is) != 0x00000803)
    throw DataError("bad idx image magic in " + path.string());
  IdxImages out;
  out.n = static_cast<int>(read_be32(is));
  out.h = static_cast<int>(read_be32(is));
  out.w = static_cast<int>(read_be32(is));
  size_t count = size_t(out.n) * out.h * out.w;
  out.pixels.resize(count);
  is.read(reinterpret_cast<char*>(out.pixels.data()),
          static_cast<std::streamsize>(count));
  if (!is) throw DataError("idx: truncated image payload in " + path.string());
  return out;
}

std::vector<uint8_t> read_idx_labels(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing dataset file: " + path.string());
  if (read_be32(is) != 0x00000801)
    throw DataError("bad idx label magic in " + path.string());
  auto n = read_be32(is);
  std::vector<uint8_t> labels(n);
  is.read(reinterpret_cast<char*>(labels.data()), n);
  if (!is) throw DataError("idx: truncated label payload in " + path.string());
  return labels;
}

void load_idx_pair(LabeledImageSet& set, const fs::path& dir) {
  auto tri = read_idx_images(dir / "train-images-idx3-ubyte");
  auto trl = read_idx_labels(dir / "train-labels-idx1-ubyte");
  auto tei = read_idx_images(dir / "t10k-images-idx3-ubyte");
  auto tel = read_idx_labels(dir / "t10k-labels-idx1-ubyte");
  if (size_t(tri.n) != trl.size() || size_t(tei.n) != tel.size())
    throw DataError("idx: image/label count mismatch");
  set.channels = 1;
  set.height = tri.h;
  set.width = tri.w;
  auto to_float = [](const std::vector<uint8_t>& px) {
    std::vector<float> out(px.size());
    for (size_t i = 0; i < px.size(); ++i) out[i] = px[i] / 255.0f;
    return out;
  };
  set.train_images = to_float(tri.pixels);
  set.test_images = to_float(tei.pixels);
  set.train_labels.assign(trl.begin(), trl.end());
  set.test_labels.assign(tel.begin(), tel.end());
}

void load_cifar10(LabeledImageSet& set, const fs::path& dir0) {
  fs::path dir = dir0;
  if (fs::exists(dir / "cifar-10-batches-bin"))
    dir = dir / "cifar-10-batches-bin";
  set.channels = 3;
  set.height = 32;
  set.width = 32;
  const size_t rec = 1 + 3072;
  auto load_file = [&](const fs::path& p, std::vector<float>& imgs,
                       std::vector<int>& labels) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw DataError("missing dataset file: " + p.string());
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(is)),
                             std::istreambuf_iterator<char>());
    if (buf.empty() || buf.size() % rec != 0)
      throw DataError("cifar10: corrupt batch file " + p.string());
    size_t n = buf.size() / rec;
    for (size_t i = 0; i < n; ++i) {
      labels.push_back(buf[i * rec]);
      for (size_t j = 0; j < 3072; ++j)
        imgs.push_back(buf[i * rec + 1 + j] / 255.0f);
    }
  };
  for (int b = 1; b <= 5; ++b)
    load_file(dir / ("data_batch_" + std::to_string(b) + ".bin"),
              set.train_images, set.train_labels);
  load_file(dir / "test_batch.bin", set.test_images, set.test_labels);
}

NormStats compute_norm(const LabeledImageSet& set) {
  NormStats norm;
  size_t per = size_t(set.height) * set.width;
  size_t n = set.train_count();
  norm.mean.assign(size_t(set.channels), 0.0);
  norm.stddev.assign(size_t(set.channels), 0.0);
  for (size_t i = 0; i < n; ++i)
    for (int c = 0; c < set.channels; ++c) {
      const float* p =
          set.train_images.data() + (i * set.channels + size_t(c)) * per;
      for (size_t j = 0; j < per; ++j) norm.mean[size_t(c)] += p[j];
    }
  for (int c = 0; c < set.channels; ++c)
    norm.mean[size_t(c)] /= double(n) * double(per);
  for (size_t i = 0; i < n; ++i)
    for (int c = 0; c < set.channels; ++c) {
      const float* p =
          set.train_images.data() + (i * set.channels + size_t(c)) * per;
      for (size_t j = 0; j < per; ++j) {
        double d = p[j] - norm.mean[size_t(c)];
        norm.stddev[size_t(c)] += d * d;
      }
    }
  for (int c = 0; c < set.channels; ++c) {
    norm.stddev[size_t(c)] =
        std::sqrt(norm.stddev[size_t(c)] / (double(n) * double(per)));
    if (norm.stddev[size_t(c)] < 1e-6) norm.stddev[size_t(c)] = 1e-6;
  }
  return norm;
}

uint64_t image_checksum(const LabeledImageSet& set) {
  uint64_t h = io::fnv1a(set.train_images.data(),
                         set.train_images.size() * sizeof(float));
  h = io::fnv1a(set.test_images.data(), set.test_images.size() * sizeof(float),
                h);
  h = io::fnv1a(set.train_labels.data(), set.train_labels.size() * sizeof(int),
                h);
  return h;
}

void verify_or_write_manifest(LabeledImageSet& set, const fs::path& dir) {
  fs::path mpath = dir / "manifest.json";
  uint64_t checksum = image_checksum(set);
  if (fs::exists(mpath)) {
    json m = io::load_json(mpath);
    if (m.value("name", "") != set.name ||
        m.value("train_count", size_t(0)) != set.train_count() ||
        m.value("test_count", size_t(0)) != set.test_count())
      throw DataError("manifest mismatch for " + set.name +
                      " (counts differ from ingested files)");
    if (m.value("checksum", uint64_t(0)) != checksum)
      throw DataError("manifest checksum mismatch for " + set.name);
    set.norm.mean = m.at("mean").get<std::vector<double>>();
    set.norm.stddev = m.at("stddev").get<std::vector<double>>();
  } else {
    set.norm = compute_norm(set);
    json m = {{"name", set.name},
              {"train_count", set.train_count()},
              {"test_count", set.test_count()},
              {"classes", set.classes},
              {"channels", set.channels},
              {"height", set.height},
              {"width", set.width},
              {"checksum", checksum},
              {"raw_range", {0.0, 1.0}},
              {"mean", set.norm.mean},
              {"stddev", set.norm.stddev}};
    io::save_json(mpath, m);
  }
}

// 5x7 digit glyph bitmaps
const std::array<std::array<const char*, 7>, 10> kGlyphs = {{
    {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},
    {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},
    {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},
    {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},
    {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},
    {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},
    {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},
    {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},
    {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},
    {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},
}};

double glyph_sample(int digit, double gy, double gx) {
  const auto& rows = kGlyphs[size_t(digit)];
  auto at = [&](int r, int c) -> double {
    if (r < 0 || r >= 7 || c < 0 || c >= 5) return 0.0;
    return rows[size_t(r)][c] == '1' ? 1.0 : 0.0;
  };
  int r0 = int(std::floor(gy)), c0 = int(std::floor(gx));
  double fy = gy - r0, fx = gx - c0;
  return (1 - fy) * ((1 - fx) * at(r0, c0) + fx * at(r0, c0 + 1)) +
         fy * ((1 - fx) * at(r0 + 1, c0) + fx * at(r0 + 1, c0 + 1));
}

void render_digit(std::vector<uint8_t>& out, int img, int digit, Rng& rng) {
  double angle = rng.uniform(-0.45, 0.45);
  double scale = rng.uniform(0.65, 1.15);
  double tx = rng.uniform(-0.18, 0.18) * img;
  double ty = rng.uniform(-0.18, 0.18) * img;
  double stroke = rng.uniform(0.55, 1.0);
  double bg_noise = rng.uniform(0.05, 0.22);
  double ca = std::cos(angle), sa = std::sin(angle);
  bool distract = rng.bernoulli(0.5);
  double bar_pos = rng.uniform(0.1, 0.9) * img;
  bool bar_horiz = rng.bernoulli(0.5);
  double bar_strength = rng.uniform(0.2, 0.5);

  size_t base = out.size();
  out.resize(base + size_t(img) * img);
  for (int i = 0; i < img; ++i) {
    for (int j = 0; j < img; ++j) {
      double yc = (i - img / 2.0 - ty) / scale;
      double xc = (j - img / 2.0 - tx) / scale;
      double ry = ca * yc - sa * xc;
      double rx = sa * yc + ca * xc;
      // map rotated coords onto the 7x5 glyph grid (~80% of the canvas)
      double gy = ry / (img * 0.105) + 3.0;
      double gx = rx / (img * 0.135) + 2.0;
      double v = stroke * glyph_sample(digit, gy, gx);
      if (distract) {
        double d = bar_horiz ? std::fabs(i - bar_pos) : std::fabs(j - bar_pos);
        if (d < 0.8) v = std::min(1.0, v + bar_strength);
      }
      v += rng.normal(0.0, bg_noise);
      v = std::clamp(v, 0.0, 1.0);
      out[base + size_t(i) * img + j] = uint8_t(std::lround(v * 255.0));
    }
  }
}

}  // namespace

void write_idx_images(const fs::path& path, const std::vector<uint8_t>& pixels,
                      int n, int h, int w) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  write_be32(os, 0x00000803);
  write_be32(os, uint32_t(n));
  write_be32(os, uint32_t(h));
  write_be32(os, uint32_t(w));
  os.write(reinterpret_cast<const char*>(pixels.data()),
           static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const fs::path& path,
                      const std::vector<uint8_t>& labels) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  write_be32(os, 0x00000801);
  write_be32(os, uint32_t(labels.size()));
  os.write(reinterpret_cast<const char*>(labels.data()),
           static_cast<std::streamsize>(labels.size()));
}

void synthesize_digits(const fs::path& root, int train_n, int test_n,
                       uint64_t seed, int img_size) {
  fs::path dir = root / "synthdigits";
  fs::create_directories(dir);
  Rng rng(seed);
  auto make_split = [&](int n, const char* img_name, const char* lbl_name) {
    std::vector<uint8_t> pixels;
    pixels.reserve(size_t(n) * img_size * img_size);
    std::vector<uint8_t> labels(size_t(n), 0);
    for (int i = 0; i < n; ++i) {
      int digit = i % 10;  // balanced classes
      labels[size_t(i)] = uint8_t(digit);
      render_digit(pixels, img_size, digit, rng);
    }
    write_idx_images(dir / img_name, pixels, n, img_size, img_size);
    write_idx_labels(dir / lbl_name, labels);
  };
  make_split(train_n, "train-images-idx3-ubyte", "train-labels-idx1-ubyte");
  make_split(test_n, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");
  fs::remove(dir / "manifest.json");
  load_dataset("synthdigits", root);
}

LabeledImageSet load_dataset(const std::string& name, const fs::path& root) {
  LabeledImageSet set;
  set.name = name;
  set.classes = 10;
  fs::path dir = root / name;
  if (name == "cifar10") {
    load_cifar10(set, dir);
  } else if (name == "mnist" || name == "fashion-mnist" ||
             name == "synthdigits") {
    load_idx_pair(set, dir);
  } else {
    throw ConfigError(
        "unknown dataset id: " + name +
        " (supported: cifar10, mnist, fashion-mnist, synthdigits)");
  }
  for (int l : set.train_labels)
    if (l < 0 || l >= set.classes)
      throw DataError("label out of range in " + name);
  set.train_by_class.assign(size_t(set.classes), {});
  for (size_t i = 0; i < set.train_labels.size(); ++i)
    set.train_by_class[size_t(set.train_labels[i])].push_back(int(i));
  for (int c = 0; c < set.classes; ++c)
    if (set.train_by_class[size_t(c)].empty())
      throw DataError("class " + std::to_string(c) +
                      " missing from train split");
  verify_or_write_manifest(set, dir);
  return set;
}

namespace {

Tensor make_batch(const LabeledImageSet& set, const std::vector<float>& pool,
                  size_t pool_count, std::span<const int> indices) {
  size_t per = set.image_numel();
  size_t spatial = size_t(set.height) * set.width;
  std::vector<double> out(indices.size() * per);
  for (size_t k = 0; k < indices.size(); ++k) {
    int idx = indices[k];
    if (idx < 0 || size_t(idx) >= pool_count)
      throw ConfigError("batch index out of range");
    const float* src = pool.data() + size_t(idx) * per;
    for (int c = 0; c < set.channels; ++c) {
      double m = set.norm.mean[size_t(c)], s = set.norm.stddev[size_t(c)];
      for (size_t j = 0; j < spatial; ++j)
        out[k * per + size_t(c) * spatial + j] =
            (double(src[size_t(c) * spatial + j]) - m) / s;
    }
  }
  return Tensor::from_data(
      {int(indices.size()), set.channels, set.height, set.width},
      std::move(out));
}

}  // namespace

Tensor LabeledImageSet::train_batch(std::span<const int> indices) const {
  return make_batch(*this, train_images, train_count(), indices);
}

Tensor LabeledImageSet::test_batch(std::span<const int> indices) const {
  return make_batch(*this, test_images, test_count(), indices);
}

std::vector<int> sample_class_batch_indices(const LabeledImageSet& set,
                                            int cls, int n, Rng& rng) {
  if (cls < 0 || cls >= set.classes)
    throw ConfigError("sample_class_batch: invalid class " +
                      std::to_string(cls));
  const auto& pool = set.train_by_class[size_t(cls)];
  if (pool.empty())
    throw DataError("sample_class_batch: empty class " + std::to_string(cls));
  if (n > int(pool.size()))
    throw ConfigError("sample_class_batch: n=" + std::to_string(n) +
                      " exceeds class population " +
                      std::to_string(pool.size()));
  std::vector<int> idx = pool;
  shuffle(idx, rng);
  idx.resize(size_t(n));
  return idx;
}

Tensor sample_class_batch(const LabeledImageSet& set, int cls, int n,
                          Rng& rng) {
  auto idx = sample_class_batch_indices(set, cls, n, rng);
  return set.train_batch(idx);
}

std::vector<float> denormalize(const NormStats& norm, const Tensor& images) {
  int C = images.dim(1);
  size_t spatial = size_t(images.dim(2)) * images.dim(3);
  std::vector<float> out(images.numel());
  auto d = images.data();
  size_t per = size_t(C) * spatial;
  for (size_t n = 0; n < size_t(images.dim(0)); ++n)
    for (int c = 0; c < C; ++c)
      for (size_t j = 0; j < spatial; ++j) {
        size_t i = n * per + size_t(c) * spatial + j;
        double v = d[i] * norm.stddev[size_t(c)] + norm.mean[size_t(c)];
        out[i] = float(std::clamp(v, 0.0, 1.0));
      }
  return out;
}

}  // namespace hpd::data
