#include "hpd/runio.hpp"

#include <chrono>
#include <cmath>

#include "hpd/errors.hpp"

namespace hpd::runio {

namespace fs = std::filesystem;

LockFile::LockFile(const fs::path& run_dir) {
  fs::create_directories(run_dir);
  path_ = run_dir / ".lock";
  if (fs::exists(path_))
    throw ConfigError("run directory is locked by another command: " +
                      run_dir.string() + " (remove " + path_.string() +
                      " if stale)");
  std::ofstream os(path_);
  if (!os) throw DataError("cannot create lock file: " + path_.string());
  os << "held\n";
  held_ = true;
}

LockFile::~LockFile() {
  if (held_) {
    std::error_code ec;
    fs::remove(path_, ec);
  }
}

MetricsLog::MetricsLog(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  os_.open(file, std::ios::app);
  if (!os_) throw DataError("cannot open metrics log: " + file.string());
}

void MetricsLog::append(const json& record) {
  os_ << record.dump() << "\n";
  os_.flush();
}

std::vector<json> MetricsLog::read_all(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot open metrics log: " + file.string());
  std::vector<json> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(json::parse(line));
  }
  return out;
}

void write_image_grid(const fs::path& path, const Tensor& images,
                      const data::NormStats& norm, int cols) {
  if (images.ndim() != 4) throw ConfigError("image grid: need [N,C,H,W]");
  int N = images.dim(0), C = images.dim(1), H = images.dim(2),
      W = images.dim(3);
  if (C != 1 && C != 3)
    throw ConfigError("image grid: only 1 or 3 channels supported");
  if (cols < 1) cols = 1;
  int rows = (N + cols - 1) / cols;
  auto raw = data::denormalize(norm, images);

  int gw = cols * W, gh = rows * H;
  std::vector<uint8_t> canvas(size_t(gh) * gw * C, 0);
  for (int n = 0; n < N; ++n) {
    int r = n / cols, c = n % cols;
    for (int ch = 0; ch < C; ++ch)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          float v = raw[((size_t(n) * C + size_t(ch)) * H + size_t(i)) * W +
                        size_t(j)];
          size_t dst =
              (size_t(r * H + i) * gw + size_t(c * W + j)) * C + size_t(ch);
          canvas[dst] = uint8_t(std::lround(v * 255.0f));
        }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write image grid: " + path.string());
  os << (C == 1 ? "P5" : "P6") << "\n" << gw << " " << gh << "\n255\n";
  os.write(reinterpret_cast<const char*>(canvas.data()),
           std::streamsize(canvas.size()));
}

uint64_t config_hash(const json& config) {
  return io::fnv1a_str(config.dump());
}

json make_manifest(const std::string& run_id, const std::string& command,
                   const json& config) {
  auto now = std::chrono::system_clock::now();
  auto secs =
      std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch())
          .count();
  return json{{"run_id", run_id},
              {"command", command},
              {"config_hash", config_hash(config)},
              {"created_unix", secs},
              {"code_version", kCodeVersion},
              {"checkpoints", json::object()}};
}

}  // namespace hpd::runio
