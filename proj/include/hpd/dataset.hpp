#pragma once

// Dataset ingestion and class-wise batch sampling.
//
// Supported ids: cifar10 (binary batches), mnist / fashion-mnist (idx files)
// and synthdigits, a self-contained procedurally rendered 10-class glyph
// corpus written in idx format. synthdigits exists so the full pipeline can
// run on machines without the real datasets; it is deliberately noisy enough
// that a 10-image-per-class coreset leaves clear headroom.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hpd/rng.hpp"
#include "hpd/tensor.hpp"

namespace hpd::data {

struct NormStats {
  std::vector<double> mean;    // per channel, of raw [0,1] pixels
  std::vector<double> stddev;  // per channel
};

struct LabeledImageSet {
  std::string name;
  int classes = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> train_images;  // [n][c][h][w], raw values in [0,1]
  std::vector<int> train_labels;
  std::vector<float> test_images;
  std::vector<int> test_labels;
  NormStats norm;
  std::vector<std::vector<int>> train_by_class;

  size_t train_count() const { return train_labels.size(); }
  size_t test_count() const { return test_labels.size(); }
  size_t image_numel() const {
    return static_cast<size_t>(channels) * height * width;
  }

  // normalized ((x - mean) / std) double batch [n, C, H, W]
  Tensor train_batch(std::span<const int> indices) const;
  Tensor test_batch(std::span<const int> indices) const;

  // normalized range implied by raw range [0,1]
  double norm_lo(int c) const { return (0.0 - norm.mean[size_t(c)]) / norm.stddev[size_t(c)]; }
  double norm_hi(int c) const { return (1.0 - norm.mean[size_t(c)]) / norm.stddev[size_t(c)]; }
};

// ids: cifar10, mnist, fashion-mnist, synthdigits
LabeledImageSet load_dataset(const std::string& name,
                             const std::filesystem::path& root);

// writes idx image/label files + manifest under root/synthdigits
void synthesize_digits(const std::filesystem::path& root, int train_n,
                       int test_n, uint64_t seed, int img_size = 16);

// deterministic sample of n distinct images from one class
std::vector<int> sample_class_batch_indices(const LabeledImageSet& set,
                                            int cls, int n, Rng& rng);
Tensor sample_class_batch(const LabeledImageSet& set, int cls, int n,
                          Rng& rng);

// map normalized values back to raw [0,1] (clamped), for image export
std::vector<float> denormalize(const NormStats& norm, const Tensor& images);

// raw idx (MNIST-format) file helpers, exposed for tests and synthesis
void write_idx_images(const std::filesystem::path& path,
                      const std::vector<uint8_t>& pixels, int n, int h, int w);
void write_idx_labels(const std::filesystem::path& path,
                      const std::vector<uint8_t>& labels);

}  // namespace hpd::data
