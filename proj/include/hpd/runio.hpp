#pragma once

// Run-directory plumbing: lock files, append-only NDJSON metrics, manifests,
// and lossless image-grid export (PGM/PPM).

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hpd/dataset.hpp"
#include "hpd/serialize.hpp"
#include "hpd/tensor.hpp"

namespace hpd::runio {

using io::json;

constexpr const char* kCodeVersion = "hpd-0.1.0";

// exclusive advisory lock; throws if another command holds the directory
class LockFile {
 public:
  explicit LockFile(const std::filesystem::path& run_dir);
  ~LockFile();
  LockFile(const LockFile&) = delete;
  LockFile& operator=(const LockFile&) = delete;

 private:
  std::filesystem::path path_;
  bool held_ = false;
};

class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& file);
  void append(const json& record);
  static std::vector<json> read_all(const std::filesystem::path& file);

 private:
  std::ofstream os_;
};

// normalized images -> de-normalized 8-bit grid; grayscale => PGM, RGB => PPM
void write_image_grid(const std::filesystem::path& path, const Tensor& images,
                      const data::NormStats& norm, int cols);

uint64_t config_hash(const json& config);

json make_manifest(const std::string& run_id, const std::string& command,
                   const json& config);

}  // namespace hpd::runio
