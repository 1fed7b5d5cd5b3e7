#pragma once

// Seeded two-view augmentation, evaluation transform and batch ordering.

#include "sdssl/data.hpp"
#include "sdssl/vit.hpp"

#include <array>
#include <functional>
#include <cstdint>
#include <vector>

namespace sdssl {

struct ColorJitter {
  Real brightness = 0.4;
  Real contrast = 0.4;
  Real saturation = 0.2;
  Real hue = 0.1;
  Real p = 0.8;
};

/// Transforms applied in this order: random resized crop, horizontal flip,
/// color jitter, grayscale, gaussian blur, solarize. Blur and solarize have
/// one probability per view.
struct AugmentationRecipe {
  Real crop_scale_min = 0.2;
  Real crop_scale_max = 1.0;
  Real crop_ratio_min = 3.0 / 4.0;
  Real crop_ratio_max = 4.0 / 3.0;
  Real flip_p = 0.5;
  ColorJitter jitter;
  Real grayscale_p = 0.2;
  std::array<Real, 2> blur_p{1.0, 0.1};
  Real blur_sigma_min = 0.1;
  Real blur_sigma_max = 2.0;
  std::array<Real, 2> solarize_p{0.0, 0.2};

  /// No randomness: full-image crop and every probability zero.
  static AugmentationRecipe identity();
  void validate() const;
};

/// Per-channel normalization applied after augmentation.
struct ChannelNorm {
  std::vector<Real> mean;
  std::vector<Real> std;

  static ChannelNorm none(int channels);
  /// Statistics of the dataset's pixels in [0, 1].
  static ChannelNorm from_dataset(const Dataset& data);
};

/// One augmented sample as C*S*S values in [0, 1] (channel planes).
/// Determined by (seed, step, index, view_id) only.
std::vector<Real> augment_sample(const Dataset& data, std::int64_t index,
                                 const AugmentationRecipe& recipe, int image_size, int view_id,
                                 std::uint64_t seed, std::int64_t step);

/// Deterministic resize/center-crop to image_size, values in [0, 1].
std::vector<Real> eval_transform(const Dataset& data, std::int64_t index, int image_size);

struct PipelineConfig {
  AugmentationRecipe recipe;
  ChannelNorm norm;
  int image_size = 32;
  /// Worker threads for per-sample work; the output never depends on it.
  int workers = 1;
};

/// Two augmented views of `indices`, normalized, rows in index order.
ViewPair make_view_pair(const Dataset& data, const std::vector<std::int64_t>& indices,
                        const PipelineConfig& config, std::uint64_t seed, std::int64_t step);

/// Evaluation batch for `indices` (all samples when empty), normalized.
ImageBatch make_eval_batch(const Dataset& data, const std::vector<std::int64_t>& indices,
                           const PipelineConfig& config);

/// Batches of a seeded permutation of [0, num_samples); the trailing partial
/// batch is dropped.
std::vector<std::vector<std::int64_t>> epoch_iterator(Index num_samples, Index batch_size,
                                                      std::uint64_t seed, std::int64_t epoch);

/// Runs fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(Index n, int workers, const std::function<void(Index)>& fn);

}  // namespace sdssl
