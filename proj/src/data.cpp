#include "sdssl/data.hpp"

#include "sdssl/rng.hpp"

#include <curl/curl.h>
#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace sdssl {

namespace fs = std::filesystem;

const std::uint8_t* Dataset::sample(Index i) const {
  if (i < 0 || i >= size()) {
    throw DataError("dataset " + name + ": sample " + std::to_string(i) + " out of range");
  }
  return pixels.data() + static_cast<std::size_t>(i) * sample_bytes();
}

Dataset Dataset::subset(const std::vector<std::int64_t>& indices) const {
  Dataset out = *this;
  out.pixels.clear();
  out.labels.clear();
  out.pixels.reserve(indices.size() * sample_bytes());
  out.labels.reserve(indices.size());
  for (auto i : indices) {
    const std::uint8_t* p = sample(i);
    out.pixels.insert(out.pixels.end(), p, p + sample_bytes());
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

fs::path cache_root() {
  if (const char* env = std::getenv("SDSSL_CACHE_DIR"); env && *env) return fs::path(env);
  if (const char* home = std::getenv("HOME"); home && *home) {
    return fs::path(home) / ".cache" / "sdssl";
  }
  return fs::path(".sdssl_cache");
}

fs::path output_root() {
  if (const char* env = std::getenv("SDSSL_OUTPUT_DIR"); env && *env) return fs::path(env);
  return fs::path("runs");
}

const std::vector<std::string>& known_datasets() {
  static const std::vector<std::string> names{"cifar10", "cifar100", "synthetic"};
  return names;
}

namespace {

constexpr char kShardMagic[8] = {'S', 'D', 'S', 'S', 'L', 'I', 'M', 'G'};
constexpr std::uint32_t kShardVersion = 1;

struct ArchiveSpec {
  std::string url;
  std::string archive_name;
  std::vector<std::pair<std::string, std::string>> split_files;  // split, member suffix
  int label_bytes;
  int label_offset;
  int num_classes;
};

const ArchiveSpec& archive_spec(const std::string& name) {
  static const std::map<std::string, ArchiveSpec> specs{
      {"cifar10",
       {"https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
        "cifar-10-binary.tar.gz",
        {{"train", "data_batch_1.bin"},
         {"train", "data_batch_2.bin"},
         {"train", "data_batch_3.bin"},
         {"train", "data_batch_4.bin"},
         {"train", "data_batch_5.bin"},
         {"test", "test_batch.bin"}},
        1,
        0,
        10}},
      {"cifar100",
       {"https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
        "cifar-100-binary.tar.gz",
        {{"train", "train.bin"}, {"test", "test.bin"}},
        2,
        1,
        100}},
  };
  auto it = specs.find(name);
  if (it == specs.end()) throw ConfigError("no download source for dataset '" + name + "'");
  return it->second;
}

void require_known(const std::string& name) {
  const auto& names = known_datasets();
  if (std::find(names.begin(), names.end(), name) == names.end()) {
    throw ConfigError("unknown dataset '" + name + "' (expected cifar10|cifar100|synthetic)");
  }
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

size_t curl_write(char* data, size_t size, size_t count, void* user) {
  auto* out = static_cast<std::ofstream*>(user);
  out->write(data, static_cast<std::streamsize>(size * count));
  return out->good() ? size * count : 0;
}

void download(const std::string& url, const fs::path& dest) {
  const fs::path tmp = dest.string() + ".part";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    std::unique_ptr<CURL, decltype(&curl_easy_cleanup)> curl(curl_easy_init(), curl_easy_cleanup);
    if (!curl) throw IoError("libcurl initialization failed");
    char errbuf[CURL_ERROR_SIZE] = {0};
    curl_easy_setopt(curl.get(), CURLOPT_URL, url.c_str());
    curl_easy_setopt(curl.get(), CURLOPT_FOLLOWLOCATION, 1L);
    curl_easy_setopt(curl.get(), CURLOPT_FAILONERROR, 1L);
    curl_easy_setopt(curl.get(), CURLOPT_CONNECTTIMEOUT, 30L);
    curl_easy_setopt(curl.get(), CURLOPT_WRITEFUNCTION, curl_write);
    curl_easy_setopt(curl.get(), CURLOPT_WRITEDATA, &out);
    curl_easy_setopt(curl.get(), CURLOPT_ERRORBUFFER, errbuf);
    const CURLcode rc = curl_easy_perform(curl.get());
    if (rc != CURLE_OK) {
      out.close();
      fs::remove(tmp);
      throw IoError("download of " + url + " failed: " +
                    (errbuf[0] ? std::string(errbuf) : curl_easy_strerror(rc)));
    }
  }
  fs::rename(tmp, dest);
}

std::uint64_t parse_octal(const char* field, std::size_t len) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < len && field[i]; ++i) {
    if (field[i] == ' ') continue;
    if (field[i] < '0' || field[i] > '7') break;
    v = v * 8 + static_cast<std::uint64_t>(field[i] - '0');
  }
  return v;
}

void write_manifest(const fs::path& dir, const std::vector<std::string>& rel_paths) {
  std::ostringstream ss;
  for (const auto& rel : rel_paths) ss << sha256_file(dir / rel) << "  " << rel << "\n";
  const fs::path path = dir / "manifest.sha256";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << ss.str();
}

std::map<std::string, std::string> read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.sha256";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<std::string, std::string> out;
  std::string digest, rel;
  while (in >> digest >> rel) out[rel] = digest;
  return out;
}

std::string shard_rel(const std::string& split) { return "shards/" + split + ".bin"; }

std::vector<DatasetHandle> handles_for(const std::string& name, const fs::path& dir) {
  std::vector<DatasetHandle> out;
  for (const auto& [rel, digest] : read_manifest(dir)) {
    const fs::path path = dir / rel;
    Dataset d = read_shard(path);
    out.push_back({name, d.split, d.size(), d.num_classes, path, digest});
  }
  return out;
}

bool cache_complete(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.sha256")) return false;
  for (const auto& [rel, digest] : read_manifest(dir)) {
    if (!fs::exists(dir / rel)) return false;
  }
  return true;
}

}  // namespace

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 initialization failed");
  }
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

void write_shard(const Dataset& d, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    auto u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
    auto str = [&](const std::string& s) {
      u32(static_cast<std::uint32_t>(s.size()));
      out.write(s.data(), static_cast<std::streamsize>(s.size()));
    };
    out.write(kShardMagic, sizeof(kShardMagic));
    u32(kShardVersion);
    str(d.name);
    str(d.split);
    u32(static_cast<std::uint32_t>(d.num_classes));
    u32(static_cast<std::uint32_t>(d.channels));
    u32(static_cast<std::uint32_t>(d.height));
    u32(static_cast<std::uint32_t>(d.width));
    const std::uint64_t n = d.labels.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    std::vector<std::int32_t> labels(d.labels.begin(), d.labels.end());
    out.write(reinterpret_cast<const char*>(labels.data()),
              static_cast<std::streamsize>(labels.size() * sizeof(std::int32_t)));
    out.write(reinterpret_cast<const char*>(d.pixels.data()),
              static_cast<std::streamsize>(d.pixels.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

Dataset read_shard(const fs::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> void {
    throw FormatError("shard " + path.string() + ": " + what);
  };
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) fail("truncated");
  };
  auto u32 = [&] {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  };
  auto str = [&] {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  };
  need(sizeof(kShardMagic));
  if (std::memcmp(bytes.data(), kShardMagic, sizeof(kShardMagic)) != 0) fail("bad magic");
  pos += sizeof(kShardMagic);
  if (const auto v = u32(); v != kShardVersion) fail("unsupported version " + std::to_string(v));
  Dataset d;
  d.name = str();
  d.split = str();
  d.num_classes = static_cast<int>(u32());
  d.channels = static_cast<int>(u32());
  d.height = static_cast<int>(u32());
  d.width = static_cast<int>(u32());
  need(8);
  std::uint64_t n;
  std::memcpy(&n, bytes.data() + pos, 8);
  pos += 8;
  if (n > bytes.size()) fail("sample count out of range");
  need(n * sizeof(std::int32_t));
  std::vector<std::int32_t> labels(n);
  std::memcpy(labels.data(), bytes.data() + pos, n * sizeof(std::int32_t));
  pos += n * sizeof(std::int32_t);
  d.labels.assign(labels.begin(), labels.end());
  const std::size_t pix = n * d.sample_bytes();
  if (bytes.size() - pos != pix) fail("pixel payload size mismatch");
  d.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  for (int l : d.labels) {
    if (l < 0 || l >= d.num_classes) fail("label out of range");
  }
  return d;
}

Dataset parse_cifar_records(const std::vector<std::uint8_t>& bytes, int label_bytes,
                            int label_offset, int num_classes, const std::string& name,
                            const std::string& split) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  const std::size_t record = static_cast<std::size_t>(label_bytes) + kPixels;
  if (bytes.empty() || bytes.size() % record != 0) {
    throw DataError(name + ": record stream of " + std::to_string(bytes.size()) +
                    " bytes is not a multiple of " + std::to_string(record));
  }
  Dataset d;
  d.name = name;
  d.split = split;
  d.num_classes = num_classes;
  d.channels = 3;
  d.height = d.width = 32;
  const std::size_t n = bytes.size() / record;
  d.labels.reserve(n);
  d.pixels.reserve(n * kPixels);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* r = bytes.data() + i * record;
    const int label = r[label_offset];
    if (label >= num_classes) {
      throw DataError(name + ": sample " + std::to_string(i) + " has label " +
                      std::to_string(label));
    }
    d.labels.push_back(label);
    d.pixels.insert(d.pixels.end(), r + label_bytes, r + record);
  }
  return d;
}

std::vector<std::pair<std::string, std::vector<std::uint8_t>>> extract_tar_gz(
    const fs::path& archive, const std::vector<std::string>& wanted_suffixes) {
  gzFile gz = gzopen(archive.string().c_str(), "rb");
  if (!gz) throw IoError("cannot open archive " + archive.string());
  std::unique_ptr<gzFile_s, decltype(&gzclose)> guard(gz, gzclose);
  auto read_exact = [&](char* dst, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      const int r = gzread(gz, dst + got, static_cast<unsigned>(std::min<std::size_t>(n - got, 1 << 30)));
      if (r <= 0) return false;
      got += static_cast<std::size_t>(r);
    }
    return true;
  };
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> out;
  char header[512];
  while (read_exact(header, 512)) {
    if (std::all_of(header, header + 512, [](char c) { return c == 0; })) break;
    std::string name(header, strnlen(header, 100));
    const std::string prefix(header + 345, strnlen(header + 345, 155));
    if (!prefix.empty()) name = prefix + "/" + name;
    const std::uint64_t size = parse_octal(header + 124, 12);
    const char type = header[156];
    const std::uint64_t padded = (size + 511) / 512 * 512;
    std::vector<std::uint8_t> data(padded);
    if (padded && !read_exact(reinterpret_cast<char*>(data.data()), padded)) {
      throw DataError("archive " + archive.string() + " is truncated inside " + name);
    }
    const bool regular = type == '0' || type == '\0';
    const bool wanted = std::any_of(wanted_suffixes.begin(), wanted_suffixes.end(),
                                    [&](const std::string& s) { return name.ends_with(s); });
    if (regular && wanted) {
      data.resize(size);
      out.emplace_back(name, std::move(data));
    }
  }
  return out;
}

Dataset make_synthetic(Index num_samples, int image_size, std::uint64_t seed,
                       const std::string& split) {
  if (num_samples <= 0 || image_size <= 0) throw ConfigError("synthetic: sizes must be positive");
  Dataset d;
  d.name = "synthetic";
  d.split = split;
  d.num_classes = 10;
  d.channels = 3;
  d.height = d.width = image_size;
  d.pixels.resize(static_cast<std::size_t>(num_samples) * d.sample_bytes());
  d.labels.resize(static_cast<std::size_t>(num_samples));
  const std::uint64_t split_key = fnv1a(split);
  const Real s = static_cast<Real>(image_size);
  for (Index i = 0; i < num_samples; ++i) {
    Rng rng = make_rng(seed, "synthetic", {split_key, static_cast<std::uint64_t>(i)});
    std::uniform_real_distribution<Real> u(0.0, 1.0);
    std::normal_distribution<Real> noise(0.0, 0.08);
    const int label = static_cast<int>(i % 10);
    // Orientation is drawn from the class's 9-degree band in [0, 90); a
    // horizontal flip maps it into (90, 180], which no class uses. Frequency,
    // phase and tint are nuisances that crops and colour jitter disturb.
    const Real theta = (label + u(rng)) * (std::numbers::pi / 20.0);
    const Real cycles = 2.0 + 2.0 * u(rng);
    const Real phase = 2.0 * std::numbers::pi * u(rng);
    const Real contrast = 0.6 + 0.4 * u(rng);
    // weaker class-independent grating at any orientation
    const Real theta2 = std::numbers::pi * u(rng);
    const Real cycles2 = 1.5 + 3.0 * u(rng);
    const Real phase2 = 2.0 * std::numbers::pi * u(rng);
    const Real weight2 = 0.4 + 0.4 * u(rng);
    const Real lo = 0.1 + 0.3 * u(rng), hi = 0.6 + 0.3 * u(rng);
    Real fg[3], bg[3];
    for (int c = 0; c < 3; ++c) {
      const Real tint = 0.08 * (2.0 * u(rng) - 1.0);
      fg[c] = std::clamp(hi + tint, 0.0, 1.0);
      bg[c] = std::clamp(lo - tint, 0.0, 1.0);
    }
    d.labels[static_cast<std::size_t>(i)] = label;
    std::uint8_t* px = d.pixels.data() + static_cast<std::size_t>(i) * d.sample_bytes();
    for (int y = 0; y < image_size; ++y) {
      for (int x = 0; x < image_size; ++x) {
        const Real t = (x * std::cos(theta) + y * std::sin(theta)) / s;
        const Real t2 = (x * std::cos(theta2) + y * std::sin(theta2)) / s;
        const Real wave = std::sin(2.0 * std::numbers::pi * cycles * t + phase) +
                          weight2 * std::sin(2.0 * std::numbers::pi * cycles2 * t2 + phase2);
        const Real g = 0.5 + 0.5 * contrast * wave / (1.0 + weight2);
        for (int c = 0; c < 3; ++c) {
          const Real v = std::clamp(bg[c] + (fg[c] - bg[c]) * g + noise(rng), 0.0, 1.0);
          px[(static_cast<std::size_t>(c) * image_size + y) * image_size + x] =
              static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
      }
    }
  }
  return d;
}

std::vector<DatasetHandle> fetch_dataset(const std::string& name, const FetchOptions& opt,
                                         const fs::path& root) {
  require_known(name);
  const fs::path dir = root / name;
  if (!opt.force && cache_complete(dir)) {
    verify_cache(name, root);
    return handles_for(name, dir);
  }
  fs::create_directories(dir / "shards");
  std::vector<std::string> rels;

  if (name == "synthetic") {
    for (const auto& [split, count] :
         {std::pair<std::string, Index>{"train", opt.synthetic_train}, {"test", opt.synthetic_test}}) {
      write_shard(make_synthetic(count, opt.image_size, opt.seed, split), dir / shard_rel(split));
      rels.push_back(shard_rel(split));
    }
  } else {
    const ArchiveSpec& spec = archive_spec(name);
    fs::create_directories(dir / "raw");
    fs::path archive = dir / "raw" / spec.archive_name;
    if (!opt.archive.empty()) {
      if (!fs::exists(opt.archive)) throw IoError("archive not found: " + opt.archive.string());
      if (fs::absolute(opt.archive) != fs::absolute(archive)) {
        fs::copy_file(opt.archive, archive, fs::copy_options::overwrite_existing);
      }
    } else if (opt.force || !fs::exists(archive)) {
      download(opt.url.empty() ? spec.url : opt.url, archive);
    }
    std::vector<std::string> suffixes;
    for (const auto& [split, member] : spec.split_files) suffixes.push_back("/" + member);
    const auto members = extract_tar_gz(archive, suffixes);
    std::map<std::string, Dataset> splits;
    for (const auto& [split, member] : spec.split_files) {
      auto it = std::find_if(members.begin(), members.end(),
                             [&](const auto& m) { return m.first.ends_with("/" + member); });
      if (it == members.end()) {
        throw DataError("archive " + archive.string() + " has no member " + member);
      }
      Dataset part = parse_cifar_records(it->second, spec.label_bytes, spec.label_offset,
                                         spec.num_classes, name, split);
      auto [slot, inserted] = splits.emplace(split, part);
      if (!inserted) {
        slot->second.pixels.insert(slot->second.pixels.end(), part.pixels.begin(), part.pixels.end());
        slot->second.labels.insert(slot->second.labels.end(), part.labels.begin(), part.labels.end());
      }
    }
    for (const auto& [split, data] : splits) {
      write_shard(data, dir / shard_rel(split));
      rels.push_back(shard_rel(split));
    }
  }
  write_manifest(dir, rels);
  return handles_for(name, dir);
}

void verify_cache(const std::string& name, const fs::path& root) {
  const fs::path dir = root / name;
  for (const auto& [rel, digest] : read_manifest(dir)) {
    const std::string actual = sha256_file(dir / rel);
    if (actual != digest) {
      throw DataError("checksum mismatch for " + (dir / rel).string() + ": expected " + digest +
                      ", found " + actual);
    }
  }
}

Dataset open_dataset(const std::string& name, const std::string& split, DatasetHandle* handle,
                     const fs::path& root) {
  require_known(name);
  const fs::path dir = root / name;
  if (!fs::exists(dir / "manifest.sha256")) {
    throw IoError("dataset '" + name + "' is not in the cache at " + dir.string() +
                  " (run: sdssl dataset-fetch " + name + ")");
  }
  const auto manifest = read_manifest(dir);
  auto it = manifest.find(shard_rel(split));
  if (it == manifest.end()) {
    throw IoError("dataset '" + name + "' has no split '" + split + "' in " + dir.string());
  }
  const fs::path path = dir / it->first;
  const std::string actual = sha256_file(path);
  if (actual != it->second) {
    throw DataError("checksum mismatch for " + path.string() + ": expected " + it->second +
                    ", found " + actual);
  }
  Dataset d = read_shard(path);
  if (handle) *handle = {name, split, d.size(), d.num_classes, path, actual};
  return d;
}

Dataset balanced_subset(const Dataset& data, Index count, std::uint64_t seed) {
  if (count <= 0 || count >= data.size()) return data;
  std::vector<std::int64_t> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "subset");
  shuffle_in_place(order, rng);
  const Index per_class = count / data.num_classes;
  std::vector<Index> taken(static_cast<std::size_t>(data.num_classes), 0);
  std::vector<std::int64_t> picked;
  for (auto i : order) {
    const int label = data.labels[static_cast<std::size_t>(i)];
    if (taken[static_cast<std::size_t>(label)] < per_class) {
      ++taken[static_cast<std::size_t>(label)];
      picked.push_back(i);
    }
  }
  std::sort(picked.begin(), picked.end());
  return data.subset(picked);
}

}  // namespace sdssl
