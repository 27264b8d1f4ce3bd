#include "hpd/serialize.hpp"

#include <cstring>
#include <fstream>

#include "hpd/errors.hpp"

namespace hpd::io {

namespace {

constexpr char kMagic[8] = {'H', 'P', 'D', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("checkpoint: truncated file");
  return v;
}

}  // namespace

uint64_t fnv1a(const void* data, size_t len, uint64_t seed) {
  uint64_t h = seed;
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t fnv1a_str(const std::string& s) { return fnv1a(s.data(), s.size()); }

void write_checkpoint(const std::filesystem::path& path, const json& header,
                      const std::vector<Tensor>& params) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open for write: " + path.string());

  std::string hdr = header.dump();
  uint64_t hash = fnv1a(kMagic, sizeof(kMagic));
  hash = fnv1a(hdr.data(), hdr.size(), hash);

  os.write(kMagic, sizeof(kMagic));
  write_pod<uint64_t>(os, hdr.size());
  os.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  write_pod<uint32_t>(os, static_cast<uint32_t>(params.size()));
  for (const auto& p : params) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(p.ndim()));
    for (int d : p.shape()) write_pod<int32_t>(os, d);
    write_pod<uint64_t>(os, p.numel());
    os.write(reinterpret_cast<const char*>(p.data().data()),
             static_cast<std::streamsize>(p.numel() * sizeof(double)));
    hash = fnv1a(p.data().data(), p.numel() * sizeof(double), hash);
  }
  write_pod<uint64_t>(os, hash);
  if (!os) throw DataError("checkpoint write failed: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint not found: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw DataError("bad checkpoint magic: " + path.string());

  uint64_t hash = fnv1a(kMagic, sizeof(kMagic));
  auto hdr_len = read_pod<uint64_t>(is);
  std::string hdr(hdr_len, '\0');
  is.read(hdr.data(), static_cast<std::streamsize>(hdr_len));
  if (!is) throw DataError("checkpoint: truncated header");
  hash = fnv1a(hdr.data(), hdr.size(), hash);

  Checkpoint ckpt;
  try {
    ckpt.header = json::parse(hdr);
  } catch (const json::exception& e) {
    throw DataError("checkpoint header parse error: " + std::string(e.what()));
  }

  auto count = read_pod<uint32_t>(is);
  ckpt.params.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    auto nd = read_pod<uint32_t>(is);
    Shape shape(nd);
    for (auto& d : shape) d = read_pod<int32_t>(is);
    auto numel = read_pod<uint64_t>(is);
    if (numel != shape_numel(shape))
      throw DataError("checkpoint: shape/count mismatch");
    std::vector<double> data(numel);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (!is) throw DataError("checkpoint: truncated tensor payload");
    hash = fnv1a(data.data(), numel * sizeof(double), hash);
    ckpt.params.push_back(Tensor::from_data(shape, std::move(data)));
  }
  auto stored = read_pod<uint64_t>(is);
  if (stored != hash)
    throw DataError("checkpoint hash mismatch (corrupt file): " +
                    path.string());
  ckpt.hash = hash;
  return ckpt;
}

uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path.string());
  uint64_t h = 14695981039346656037ull;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof(buf));
    h = fnv1a(buf, static_cast<size_t>(is.gcount()), h);
  }
  return h;
}

json load_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open: " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("json parse error in " + path.string() + ": " + e.what());
  }
}

void save_json(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open for write: " + path.string());
  os << j.dump(2) << "\n";
}

}  // namespace hpd::io
