#pragma once

// Dataset cache, download/extraction and decoded image shards.
//
// Cache layout under the cache root (SDSSL_CACHE_DIR, default
// ~/.cache/sdssl):
//   <name>/raw/<archive>          downloaded archive, kept for re-extraction
//   <name>/shards/<split>.bin     decoded images (see write_shard)
//   <name>/manifest.sha256        "<hex digest>  <relative path>" per shard

#include "sdssl/common.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace sdssl {

/// Decoded uint8 images, channel planes per sample (C x H x W).
struct Dataset {
  std::string name;
  std::string split;
  int num_classes = 0;
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;

  [[nodiscard]] Index size() const { return static_cast<Index>(labels.size()); }
  [[nodiscard]] std::size_t sample_bytes() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  [[nodiscard]] const std::uint8_t* sample(Index i) const;
  /// Rows `indices` of this dataset, in order.
  [[nodiscard]] Dataset subset(const std::vector<std::int64_t>& indices) const;
};

struct DatasetHandle {
  std::string name;
  std::string split;
  Index num_samples = 0;
  int num_classes = 0;
  std::filesystem::path cache_path;
  std::string checksum;  // SHA-256 hex of the shard file
};

std::filesystem::path cache_root();
std::filesystem::path output_root();

/// Names accepted by fetch_dataset / open_dataset.
const std::vector<std::string>& known_datasets();

struct FetchOptions {
  /// Overrides the default download URL.
  std::string url;
  /// Use a local archive instead of downloading.
  std::filesystem::path archive;
  /// Re-download and re-extract even if the cache is complete.
  bool force = false;
  /// Sample counts for the procedural dataset.
  Index synthetic_train = 10000;
  Index synthetic_test = 2000;
  int image_size = 32;
  std::uint64_t seed = 0;
};

/// Populates the cache for `name` and returns handles for its splits.
std::vector<DatasetHandle> fetch_dataset(const std::string& name, const FetchOptions& options,
                                         const std::filesystem::path& root = cache_root());

/// Re-hashes every shard against the manifest. Throws DataError on mismatch.
void verify_cache(const std::string& name, const std::filesystem::path& root = cache_root());

/// Loads a split after verifying its checksum against the manifest. Throws
/// IoError (with the expected path) when the dataset has not been fetched.
Dataset open_dataset(const std::string& name, const std::string& split,
                     DatasetHandle* handle = nullptr,
                     const std::filesystem::path& root = cache_root());

/// Class-balanced subset: the first count/num_classes samples of each class
/// in a seeded order. count == 0 returns the full dataset.
Dataset balanced_subset(const Dataset& data, Index count, std::uint64_t seed);

/// Two superposed sinusoidal gratings. Class c fixes the stronger one's
/// orientation to [9c, 9c + 9) degrees; the weaker one, frequencies,
/// phases, contrast, tint and pixel noise vary per image.
Dataset make_synthetic(Index num_samples, int image_size, std::uint64_t seed,
                       const std::string& split);

// shard and archive plumbing, exposed for tests
void write_shard(const Dataset& data, const std::filesystem::path& path);
Dataset read_shard(const std::filesystem::path& path);
std::string sha256_file(const std::filesystem::path& path);
/// Parses CIFAR binary records (label bytes followed by 3072 pixel bytes).
Dataset parse_cifar_records(const std::vector<std::uint8_t>& bytes, int label_bytes,
                            int label_offset, int num_classes, const std::string& name,
                            const std::string& split);
/// Extracts regular files from a .tar.gz, returning (path, contents) pairs
/// whose path ends with one of `wanted_suffixes`.
std::vector<std::pair<std::string, std::vector<std::uint8_t>>> extract_tar_gz(
    const std::filesystem::path& archive, const std::vector<std::string>& wanted_suffixes);

}  // namespace sdssl
