#pragma once

// Checkpoint files: magic + JSON header + raw float64 parameter payload +
// FNV-1a footer. One format for generators, classifiers and trajectory
// snapshots; the header carries the type-specific descriptor.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "hpd/tensor.hpp"

namespace hpd::io {

using json = nlohmann::json;

uint64_t fnv1a(const void* data, size_t len, uint64_t seed = 14695981039346656037ull);
uint64_t fnv1a_str(const std::string& s);

void write_checkpoint(const std::filesystem::path& path, const json& header,
                      const std::vector<Tensor>& params);

struct Checkpoint {
  json header;
  std::vector<Tensor> params;
  uint64_t hash = 0;  // payload hash as verified on read
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

// hash of the whole file content (used for manifest references)
uint64_t file_hash(const std::filesystem::path& path);

json load_json(const std::filesystem::path& path);
void save_json(const std::filesystem::path& path, const json& j);

}  // namespace hpd::io
