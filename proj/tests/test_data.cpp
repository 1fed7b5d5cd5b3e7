#include "support.hpp"

#include "sdssl/augment.hpp"
#include "sdssl/data.hpp"

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

using namespace sdssl;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sdssl_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> cifar_records(int count, int label_bytes, int first_label,
                                        std::uint8_t fill) {
  std::vector<std::uint8_t> out;
  for (int i = 0; i < count; ++i) {
    for (int b = 0; b < label_bytes; ++b) out.push_back(static_cast<std::uint8_t>((first_label + i) % 10));
    for (int k = 0; k < 3072; ++k) out.push_back(static_cast<std::uint8_t>((fill + i + k) % 256));
  }
  return out;
}

void tar_member(std::string& tar, const std::string& name, const std::vector<std::uint8_t>& data) {
  char header[512] = {0};
  std::strncpy(header, name.c_str(), 99);
  std::snprintf(header + 100, 8, "%07o", 0644);
  std::snprintf(header + 124, 12, "%011o", static_cast<unsigned>(data.size()));
  header[156] = '0';
  std::memcpy(header + 257, "ustar", 5);
  std::memset(header + 148, ' ', 8);
  unsigned sum = 0;
  for (unsigned char c : header) sum += c;
  std::snprintf(header + 148, 8, "%06o", sum);
  tar.append(header, 512);
  tar.append(reinterpret_cast<const char*>(data.data()), data.size());
  tar.append((512 - data.size() % 512) % 512, '\0');
}

void write_gz(const fs::path& path, const std::string& bytes) {
  gzFile gz = gzopen(path.string().c_str(), "wb");
  REQUIRE(gz != nullptr);
  gzwrite(gz, bytes.data(), static_cast<unsigned>(bytes.size()));
  gzclose(gz);
}

fs::path fake_cifar10_archive(const fs::path& dir) {
  std::string tar;
  for (int b = 1; b <= 5; ++b) {
    tar_member(tar, "cifar-10-batches-bin/data_batch_" + std::to_string(b) + ".bin",
               cifar_records(20, 1, b, static_cast<std::uint8_t>(b)));
  }
  tar_member(tar, "cifar-10-batches-bin/test_batch.bin", cifar_records(10, 1, 0, 99));
  tar_member(tar, "cifar-10-batches-bin/readme.html", {'h', 'i'});
  tar.append(1024, '\0');
  const fs::path archive = dir / "fake-cifar-10-binary.tar.gz";
  write_gz(archive, tar);
  return archive;
}

Dataset tiny_synthetic(Index n = 20) { return make_synthetic(n, 32, 5, "train"); }

}  // namespace

TEST_CASE("same seed, step and index give bit-identical view pairs") {
  const Dataset d = tiny_synthetic();
  PipelineConfig cfg;
  cfg.norm = ChannelNorm::from_dataset(d);
  const std::vector<std::int64_t> idx{3, 7, 11};
  const ViewPair a = make_view_pair(d, idx, cfg, 42, 9);
  const ViewPair b = make_view_pair(d, idx, cfg, 42, 9);
  CHECK(a.first.pixels == b.first.pixels);
  CHECK(a.second.pixels == b.second.pixels);
  CHECK(a.first.source_indices == idx);
  CHECK(a.second.source_indices == idx);
  CHECK(a.first.pixels != a.second.pixels);
  const ViewPair later = make_view_pair(d, idx, cfg, 42, 10);
  CHECK(later.first.pixels != a.first.pixels);
}

TEST_CASE("view output does not depend on the worker count") {
  const Dataset d = tiny_synthetic();
  PipelineConfig one;
  one.norm = ChannelNorm::from_dataset(d);
  PipelineConfig many = one;
  many.workers = 4;
  std::vector<std::int64_t> idx(16);
  std::iota(idx.begin(), idx.end(), 2);
  const ViewPair a = make_view_pair(d, idx, one, 1, 0);
  const ViewPair b = make_view_pair(d, idx, many, 1, 0);
  CHECK(a.first.pixels == b.first.pixels);
  CHECK(a.second.pixels == b.second.pixels);
}

TEST_CASE("identity recipe reproduces the source image in both views") {
  const Dataset d = tiny_synthetic();
  PipelineConfig cfg;
  cfg.recipe = AugmentationRecipe::identity();
  cfg.norm = ChannelNorm::none(3);
  const std::vector<std::int64_t> idx{0, 5};
  const ViewPair v = make_view_pair(d, idx, cfg, 3, 4);
  CHECK(v.first.pixels == v.second.pixels);
  for (Index i = 0; i < 2; ++i) {
    const std::uint8_t* src = d.sample(idx[static_cast<std::size_t>(i)]);
    for (Index k = 0; k < v.first.pixels.cols(); ++k) {
      CHECK(v.first.pixels(i, k) == static_cast<Real>(static_cast<float>(src[k]) / 255.0f));
    }
  }
}

TEST_CASE("default recipe stays in range before normalization") {
  const Dataset d = tiny_synthetic();
  AugmentationRecipe r;
  r.solarize_p = {1.0, 1.0};
  r.grayscale_p = 0.5;
  for (std::int64_t i = 0; i < 10; ++i) {
    for (int view : {0, 1}) {
      const auto px = augment_sample(d, i, r, 32, view, 7, 1);
      CHECK(px.size() == 3u * 32 * 32);
      CHECK(*std::min_element(px.begin(), px.end()) >= 0.0);
      CHECK(*std::max_element(px.begin(), px.end()) <= 1.0);
    }
  }
}

TEST_CASE("eval transform is deterministic, sized and in range") {
  const Dataset d = tiny_synthetic();
  const auto a = eval_transform(d, 4, 32);
  CHECK(a == eval_transform(d, 4, 32));
  CHECK(a.size() == 3u * 32 * 32);
  const auto small = eval_transform(d, 4, 16);
  CHECK(small.size() == 3u * 16 * 16);
  for (Real v : small) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  PipelineConfig cfg;
  cfg.norm = ChannelNorm::from_dataset(d);
  const ImageBatch all = make_eval_batch(d, {}, cfg);
  CHECK(all.size() == d.size());
}

TEST_CASE("recipe validation") {
  AugmentationRecipe r;
  CHECK_NOTHROW(r.validate());
  r.flip_p = 1.5;
  CHECK_THROWS_AS(r.validate(), ConfigError);
  r = AugmentationRecipe{};
  r.crop_scale_min = 0.0;
  CHECK_THROWS_AS(r.validate(), ConfigError);
}

TEST_CASE("epoch iterator order, drops and reshuffles") {
  const auto a = epoch_iterator(1000, 256, 7, 0);
  CHECK(a.size() == 3);
  CHECK(a == epoch_iterator(1000, 256, 7, 0));
  CHECK(a != epoch_iterator(1000, 256, 7, 1));
  std::set<std::int64_t> seen;
  for (const auto& b : a) {
    CHECK(b.size() == 256);
    seen.insert(b.begin(), b.end());
  }
  CHECK(seen.size() == 768);
  CHECK(*seen.rbegin() < 1000);
  CHECK_THROWS_AS(epoch_iterator(10, 0, 1, 0), ConfigError);
}

TEST_CASE("synthetic dataset is balanced and deterministic") {
  const Dataset a = make_synthetic(50, 32, 1, "train");
  const Dataset b = make_synthetic(50, 32, 1, "train");
  const Dataset t = make_synthetic(50, 32, 1, "test");
  CHECK(a.pixels == b.pixels);
  CHECK(a.pixels != t.pixels);
  std::vector<int> counts(10, 0);
  for (int l : a.labels) ++counts[static_cast<std::size_t>(l)];
  for (int c : counts) CHECK(c == 5);
}

TEST_CASE("balanced subset takes an equal share per class") {
  const Dataset d = make_synthetic(200, 8, 2, "train");
  const Dataset s = balanced_subset(d, 50, 3);
  CHECK(s.size() == 50);
  std::vector<int> counts(10, 0);
  for (int l : s.labels) ++counts[static_cast<std::size_t>(l)];
  for (int c : counts) CHECK(c == 5);
  CHECK(balanced_subset(d, 0, 3).size() == 200);
}

TEST_CASE("shard round trip and corruption") {
  const fs::path dir = fresh_dir("shard");
  const Dataset d = make_synthetic(12, 8, 4, "train");
  write_shard(d, dir / "x.bin");
  const Dataset r = read_shard(dir / "x.bin");
  CHECK(r.pixels == d.pixels);
  CHECK(r.labels == d.labels);
  CHECK(r.split == "train");
  fs::resize_file(dir / "x.bin", fs::file_size(dir / "x.bin") - 5);
  CHECK_THROWS_AS(read_shard(dir / "x.bin"), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("cifar records parse labels and pixels") {
  const auto bytes = cifar_records(3, 1, 4, 0);
  const Dataset d = parse_cifar_records(bytes, 1, 0, 10, "cifar10", "train");
  CHECK(d.size() == 3);
  CHECK(d.labels == std::vector<int>{4, 5, 6});
  CHECK(d.sample(1)[0] == 1);
  std::vector<std::uint8_t> broken(bytes.begin(), bytes.end() - 1);
  CHECK_THROWS_AS(parse_cifar_records(broken, 1, 0, 10, "cifar10", "train"), DataError);
  const auto coarse_fine = cifar_records(2, 2, 3, 0);
  CHECK(parse_cifar_records(coarse_fine, 2, 1, 100, "cifar100", "test").labels ==
        std::vector<int>{3, 4});
}

TEST_CASE("fetch from a local archive builds verified shards") {
  const fs::path root = fresh_dir("cache");
  const fs::path archive = fake_cifar10_archive(fresh_dir("archive"));
  FetchOptions opt;
  opt.archive = archive;
  const auto handles = fetch_dataset("cifar10", opt, root);
  REQUIRE(handles.size() == 2);
  CHECK(fs::exists(root / "cifar10" / "raw" / "cifar-10-binary.tar.gz"));
  CHECK(fs::exists(root / "cifar10" / "manifest.sha256"));

  DatasetHandle h;
  const Dataset train = open_dataset("cifar10", "train", &h, root);
  CHECK(train.size() == 100);
  CHECK(h.num_samples == 100);
  CHECK(h.checksum.size() == 64);
  const Dataset test = open_dataset("cifar10", "test", nullptr, root);
  CHECK(test.size() == 10);
  CHECK(train.labels[20] == 2);  // first record of data_batch_2

  // a second fetch reuses the cache; tampering is caught on open
  CHECK(fetch_dataset("cifar10", FetchOptions{}, root).size() == 2);
  {
    std::fstream f(root / "cifar10" / "shards" / "test.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(open_dataset("cifar10", "test", nullptr, root), DataError);
  CHECK_THROWS_AS(verify_cache("cifar10", root), DataError);
  fs::remove_all(root);
}

TEST_CASE("missing datasets and names are reported") {
  const fs::path root = fresh_dir("empty");
  CHECK_THROWS_WITH_AS(open_dataset("cifar10", "train", nullptr, root),
                       doctest::Contains("dataset-fetch"), IoError);
  CHECK_THROWS_AS(open_dataset("imagenet", "train", nullptr, root), ConfigError);
  FetchOptions opt;
  opt.archive = root / "nope.tar.gz";
  CHECK_THROWS_AS(fetch_dataset("cifar10", opt, root), IoError);
  fs::remove_all(root);
}

TEST_CASE("synthetic fetch writes both splits") {
  const fs::path root = fresh_dir("synthetic");
  FetchOptions opt;
  opt.synthetic_train = 40;
  opt.synthetic_test = 20;
  opt.image_size = 16;
  fetch_dataset("synthetic", opt, root);
  CHECK(open_dataset("synthetic", "train", nullptr, root).size() == 40);
  CHECK(open_dataset("synthetic", "test", nullptr, root).height == 16);
  fs::remove_all(root);
}
