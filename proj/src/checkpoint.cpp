#include "sdssl/rng.hpp"
#include "sdssl/train.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace sdssl {

namespace {

constexpr char kMagic[8] = {'S', 'D', 'S', 'S', 'L', 'C', 'K', 'P'};
// guards against absurd lengths in a corrupted file before allocating
constexpr std::uint64_t kMaxString = 1ULL << 24;
constexpr std::uint64_t kMaxArrays = 1ULL << 20;

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_.append(s);
  }
  void matrix(const Matrix& m) {
    pod<std::int64_t>(m.rows());
    pod<std::int64_t>(m.cols());
    buf_.append(reinterpret_cast<const char*>(m.data()),
                static_cast<std::size_t>(m.size()) * sizeof(Real));
  }
  [[nodiscard]] const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end, std::string path)
      : buf_(buf), end_(end), path_(std::move(path)) {}

  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > kMaxString) fail("string length out of range");
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Matrix matrix() {
    const auto rows = pod<std::int64_t>();
    const auto cols = pod<std::int64_t>();
    if (rows < 0 || cols < 0) fail("negative array shape");
    const auto count = static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(cols);
    if (count > (end_ - pos_) / sizeof(Real)) fail("array exceeds file size");
    Matrix m(rows, cols);
    std::memcpy(m.data(), buf_.data() + pos_, count * sizeof(Real));
    pos_ += count * sizeof(Real);
    return m;
  }
  [[nodiscard]] bool at_end() const { return pos_ == end_; }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("checkpoint " + path_ + ": " + what);
  }

 private:
  void need(std::size_t n) const {
    if (end_ - pos_ < n) fail("truncated");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string path_;
};

std::uint64_t checksum(const char* data, std::size_t n) {
  return fnv1a(std::string_view(data, n));
}

}  // namespace

void write_checkpoint(const CheckpointData& data, const std::filesystem::path& path) {
  Writer w;
  for (char c : kMagic) w.pod(c);
  w.pod<std::uint32_t>(data.version);
  w.str(data.framework);
  w.pod<std::int64_t>(data.step);
  w.pod<std::int64_t>(data.optimizer_steps);
  w.str(data.config_text);
  w.pod<std::uint64_t>(data.arrays.size());
  for (const auto& [name, m] : data.arrays) {
    w.str(name);
    w.matrix(m);
  }
  const std::string& body = w.bytes();
  const std::uint64_t sum = checksum(body.data(), body.size());

  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  // write to a sibling file, then rename, so readers never see a partial file
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    out.write(reinterpret_cast<const char*>(&sum), sizeof(sum));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();

  const std::string name = path.string();
  if (buf.size() < sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t) ||
      std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint " + name + ": not a checkpoint file (bad magic)");
  }
  std::uint32_t version;
  std::memcpy(&version, buf.data() + sizeof(kMagic), sizeof(version));
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint " + name + ": format version " + std::to_string(version) +
                      ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  const std::size_t body_end = buf.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + body_end, sizeof(stored));
  if (stored != checksum(buf.data(), body_end)) {
    throw FormatError("checkpoint " + name + ": checksum mismatch (file corrupted)");
  }

  Reader r(buf, body_end, name);
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.pod<char>();
  CheckpointData out;
  out.version = r.pod<std::uint32_t>();
  out.framework = r.str();
  out.step = r.pod<std::int64_t>();
  out.optimizer_steps = r.pod<std::int64_t>();
  out.config_text = r.str();
  const auto count = r.pod<std::uint64_t>();
  if (count > kMaxArrays) r.fail("array count out of range");
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string key = r.str();
    out.arrays.emplace(std::move(key), r.matrix());
  }
  if (!r.at_end()) r.fail("trailing bytes");
  return out;
}

CheckpointData snapshot(Trainer& trainer, const std::string& config_text) {
  CheckpointData d;
  d.framework = std::string(to_string(trainer.config().framework));
  d.step = trainer.step();
  d.optimizer_steps = trainer.optimizer().steps_taken();
  d.config_text = config_text;
  d.arrays = trainer.state_arrays();
  return d;
}

void restore(Trainer& trainer, const CheckpointData& data) {
  if (data.framework != to_string(trainer.config().framework)) {
    throw FormatError("checkpoint framework " + data.framework + " does not match configured " +
                      std::string(to_string(trainer.config().framework)));
  }
  trainer.load_state_arrays(data.arrays, data.step, data.optimizer_steps);
}

}  // namespace sdssl
