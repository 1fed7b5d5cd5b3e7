#include "sdssl/augment.hpp"

#include "sdssl/rng.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <atomic>
#include <mutex>
#include <cmath>
#include <numeric>
#include <thread>

namespace sdssl {

AugmentationRecipe AugmentationRecipe::identity() {
  AugmentationRecipe r;
  r.crop_scale_min = r.crop_scale_max = 1.0;
  r.crop_ratio_min = r.crop_ratio_max = 1.0;
  r.flip_p = 0.0;
  r.jitter.p = 0.0;
  r.grayscale_p = 0.0;
  r.blur_p = {0.0, 0.0};
  r.solarize_p = {0.0, 0.0};
  return r;
}

void AugmentationRecipe::validate() const {
  auto prob = [](Real p, const char* field) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw ConfigError(std::string("augmentation.") + field + " must be a probability in [0, 1]");
    }
  };
  prob(flip_p, "flip_p");
  prob(jitter.p, "jitter_p");
  prob(grayscale_p, "grayscale_p");
  prob(blur_p[0], "blur_p1");
  prob(blur_p[1], "blur_p2");
  prob(solarize_p[0], "solarize_p1");
  prob(solarize_p[1], "solarize_p2");
  if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
    throw ConfigError("augmentation.crop_scale must satisfy 0 < min <= max <= 1");
  }
  if (!(crop_ratio_min > 0.0 && crop_ratio_min <= crop_ratio_max)) {
    throw ConfigError("augmentation.crop_ratio must satisfy 0 < min <= max");
  }
  if (jitter.brightness < 0 || jitter.contrast < 0 || jitter.saturation < 0 || jitter.hue < 0 ||
      jitter.hue > 0.5) {
    throw ConfigError("augmentation jitter strengths must be non-negative (hue <= 0.5)");
  }
  if (!(blur_sigma_min > 0.0 && blur_sigma_min <= blur_sigma_max)) {
    throw ConfigError("augmentation.blur_sigma must satisfy 0 < min <= max");
  }
}

ChannelNorm ChannelNorm::none(int channels) {
  return {std::vector<Real>(static_cast<std::size_t>(channels), 0.0),
          std::vector<Real>(static_cast<std::size_t>(channels), 1.0)};
}

ChannelNorm ChannelNorm::from_dataset(const Dataset& data) {
  ChannelNorm n;
  const std::size_t plane = static_cast<std::size_t>(data.height) * data.width;
  for (int c = 0; c < data.channels; ++c) {
    long double sum = 0, sq = 0;
    for (Index i = 0; i < data.size(); ++i) {
      const std::uint8_t* p = data.sample(i) + static_cast<std::size_t>(c) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const long double v = p[k] / 255.0L;
        sum += v;
        sq += v * v;
      }
    }
    const long double count = static_cast<long double>(plane) * data.size();
    const long double mean = sum / count;
    const long double var = sq / count - mean * mean;
    n.mean.push_back(static_cast<Real>(mean));
    n.std.push_back(std::max<Real>(static_cast<Real>(std::sqrt(std::max(var, 0.0L))), 1e-6));
  }
  return n;
}

namespace {

cv::Mat to_mat(const Dataset& data, std::int64_t index) {
  const std::uint8_t* src = data.sample(index);
  const int h = data.height, w = data.width, ch = data.channels;
  cv::Mat m(h, w, CV_MAKETYPE(CV_32F, ch));
  for (int y = 0; y < h; ++y) {
    float* row = m.ptr<float>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        row[x * ch + c] = static_cast<float>(src[(static_cast<std::size_t>(c) * h + y) * w + x]) / 255.0f;
      }
    }
  }
  return m;
}

std::vector<Real> to_planes(const cv::Mat& m) {
  const int h = m.rows, w = m.cols, ch = m.channels();
  std::vector<Real> out(static_cast<std::size_t>(ch) * h * w);
  for (int y = 0; y < h; ++y) {
    const float* row = m.ptr<float>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        out[(static_cast<std::size_t>(c) * h + y) * w + x] = row[x * ch + c];
      }
    }
  }
  return out;
}

cv::Mat resize_to(const cv::Mat& src, int size) {
  if (src.rows == size && src.cols == size) return src;
  cv::Mat out;
  const int interp = (src.rows > size && src.cols > size) ? cv::INTER_AREA : cv::INTER_LINEAR;
  cv::resize(src, out, cv::Size(size, size), 0, 0, interp);
  return out;
}

cv::Mat random_resized_crop(const cv::Mat& img, const AugmentationRecipe& r, int size, Rng& rng) {
  const int h = img.rows, w = img.cols;
  const Real area = static_cast<Real>(h) * w;
  std::uniform_real_distribution<Real> scale(r.crop_scale_min, r.crop_scale_max);
  std::uniform_real_distribution<Real> log_ratio(std::log(r.crop_ratio_min), std::log(r.crop_ratio_max));
  for (int attempt = 0; attempt < 10; ++attempt) {
    const Real target = area * scale(rng);
    const Real ratio = std::exp(log_ratio(rng));
    const int cw = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int chh = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (cw > 0 && chh > 0 && cw <= w && chh <= h) {
      std::uniform_int_distribution<int> top(0, h - chh);
      std::uniform_int_distribution<int> left(0, w - cw);
      const int y = top(rng);
      const int x = left(rng);
      return resize_to(img(cv::Rect(x, y, cw, chh)), size);
    }
  }
  // fallback: central crop at the clamped aspect ratio
  const Real in_ratio = static_cast<Real>(w) / h;
  int cw = w, chh = h;
  if (in_ratio < r.crop_ratio_min) {
    chh = static_cast<int>(std::lround(w / r.crop_ratio_min));
  } else if (in_ratio > r.crop_ratio_max) {
    cw = static_cast<int>(std::lround(h * r.crop_ratio_max));
  }
  return resize_to(img(cv::Rect((w - cw) / 2, (h - chh) / 2, cw, chh)), size);
}

cv::Mat grayscale3(const cv::Mat& img) {
  cv::Mat gray, out;
  cv::cvtColor(img, gray, cv::COLOR_RGB2GRAY);
  cv::cvtColor(gray, out, cv::COLOR_GRAY2RGB);
  return out;
}

void clamp01(cv::Mat& m) {
  cv::min(m, 1.0, m);
  cv::max(m, 0.0, m);
}

void color_jitter(cv::Mat& img, const ColorJitter& j, Rng& rng) {
  std::vector<int> order{0, 1, 2, 3};
  shuffle_in_place(order, rng);
  auto factor = [&](Real strength) {
    std::uniform_real_distribution<Real> d(std::max(0.0, 1.0 - strength), 1.0 + strength);
    return d(rng);
  };
  for (int op : order) {
    switch (op) {
      case 0: {
        if (j.brightness <= 0) break;
        img *= factor(j.brightness);
        clamp01(img);
        break;
      }
      case 1: {
        if (j.contrast <= 0) break;
        const Real f = factor(j.contrast);
        cv::Mat gray;
        cv::cvtColor(img, gray, cv::COLOR_RGB2GRAY);
        const Real mean = cv::mean(gray)[0];
        img = img * f + cv::Scalar::all((1.0 - f) * mean);
        clamp01(img);
        break;
      }
      case 2: {
        if (j.saturation <= 0) break;
        const Real f = factor(j.saturation);
        cv::Mat gray = grayscale3(img);
        cv::addWeighted(img, f, gray, 1.0 - f, 0.0, img);
        clamp01(img);
        break;
      }
      default: {
        if (j.hue <= 0) break;
        std::uniform_real_distribution<Real> d(-j.hue, j.hue);
        const float shift = static_cast<float>(d(rng) * 360.0);
        cv::Mat hsv;
        cv::cvtColor(img, hsv, cv::COLOR_RGB2HSV);
        for (int y = 0; y < hsv.rows; ++y) {
          float* row = hsv.ptr<float>(y);
          for (int x = 0; x < hsv.cols; ++x) {
            float hval = std::fmod(row[3 * x] + shift, 360.0f);
            if (hval < 0) hval += 360.0f;
            row[3 * x] = hval;
          }
        }
        cv::cvtColor(hsv, img, cv::COLOR_HSV2RGB);
        clamp01(img);
        break;
      }
    }
  }
}

}  // namespace

std::vector<Real> augment_sample(const Dataset& data, std::int64_t index,
                                 const AugmentationRecipe& recipe, int image_size, int view_id,
                                 std::uint64_t seed, std::int64_t step) {
  if (view_id != 0 && view_id != 1) throw ConfigError("augment_sample: view_id must be 0 or 1");
  Rng rng = make_rng(seed, "augment",
                     {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(index),
                      static_cast<std::uint64_t>(view_id)});
  std::uniform_real_distribution<Real> coin(0.0, 1.0);
  const bool color = data.channels == 3;

  cv::Mat img = random_resized_crop(to_mat(data, index), recipe, image_size, rng);
  if (coin(rng) < recipe.flip_p) cv::flip(img, img, 1);
  if (color && coin(rng) < recipe.jitter.p) color_jitter(img, recipe.jitter, rng);
  if (color && coin(rng) < recipe.grayscale_p) img = grayscale3(img);
  if (coin(rng) < recipe.blur_p[static_cast<std::size_t>(view_id)]) {
    std::uniform_real_distribution<Real> sigma(recipe.blur_sigma_min, recipe.blur_sigma_max);
    // kernel spans about a tenth of the image, as in the usual 23px-at-224px recipe
    const int k = std::max(3, (image_size / 10) | 1);
    cv::GaussianBlur(img, img, cv::Size(k, k), sigma(rng), 0.0, cv::BORDER_REFLECT_101);
  }
  if (coin(rng) < recipe.solarize_p[static_cast<std::size_t>(view_id)]) {
    std::vector<cv::Mat> planes;
    cv::split(img, planes);
    for (auto& p : planes) {
      cv::Mat bright = p >= 0.5f;
      cv::Mat inverted = 1.0f - p;
      inverted.copyTo(p, bright);
    }
    cv::merge(planes, img);
  }
  return to_planes(img);
}

std::vector<Real> eval_transform(const Dataset& data, std::int64_t index, int image_size) {
  cv::Mat img = to_mat(data, index);
  if (img.rows != image_size || img.cols != image_size) {
    // resize the shorter side, then center crop
    const Real s = static_cast<Real>(image_size) / std::min(img.rows, img.cols);
    const int nh = std::max(image_size, static_cast<int>(std::lround(img.rows * s)));
    const int nw = std::max(image_size, static_cast<int>(std::lround(img.cols * s)));
    cv::Mat resized;
    cv::resize(img, resized, cv::Size(nw, nh), 0, 0, s < 1.0 ? cv::INTER_AREA : cv::INTER_LINEAR);
    img = resized(cv::Rect((nw - image_size) / 2, (nh - image_size) / 2, image_size, image_size)).clone();
    clamp01(img);
  }
  return to_planes(img);
}

void parallel_for(Index n, int workers, const std::function<void(Index)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const int count = static_cast<int>(std::min<Index>(workers, n));
  for (int t = 0; t < count; ++t) {
    pool.emplace_back([&] {
      for (Index i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

namespace {

ImageBatch empty_batch(const Dataset& data, Index n, int image_size) {
  ImageBatch b;
  b.channels = data.channels;
  b.height = b.width = image_size;
  b.pixels.resize(n, static_cast<Index>(data.channels) * image_size * image_size);
  b.source_indices.resize(static_cast<std::size_t>(n));
  return b;
}

void store_row(ImageBatch& b, Index row, const std::vector<Real>& values, const ChannelNorm& norm) {
  const std::size_t plane = static_cast<std::size_t>(b.height) * b.width;
  for (int c = 0; c < b.channels; ++c) {
    const Real m = norm.mean[static_cast<std::size_t>(c)];
    const Real s = norm.std[static_cast<std::size_t>(c)];
    for (std::size_t k = 0; k < plane; ++k) {
      const std::size_t at = static_cast<std::size_t>(c) * plane + k;
      b.pixels(row, static_cast<Index>(at)) = (values[at] - m) / s;
    }
  }
}

void check_norm(const ChannelNorm& norm, const Dataset& data) {
  if (norm.mean.size() != static_cast<std::size_t>(data.channels) ||
      norm.std.size() != static_cast<std::size_t>(data.channels)) {
    throw ConfigError("channel normalization does not match the dataset's channel count");
  }
}

}  // namespace

ViewPair make_view_pair(const Dataset& data, const std::vector<std::int64_t>& indices,
                        const PipelineConfig& config, std::uint64_t seed, std::int64_t step) {
  check_norm(config.norm, data);
  const Index n = static_cast<Index>(indices.size());
  ViewPair v{empty_batch(data, n, config.image_size), empty_batch(data, n, config.image_size)};
  parallel_for(n, config.workers, [&](Index i) {
    const std::int64_t idx = indices[static_cast<std::size_t>(i)];
    store_row(v.first, i, augment_sample(data, idx, config.recipe, config.image_size, 0, seed, step),
              config.norm);
    store_row(v.second, i, augment_sample(data, idx, config.recipe, config.image_size, 1, seed, step),
              config.norm);
    v.first.source_indices[static_cast<std::size_t>(i)] = idx;
    v.second.source_indices[static_cast<std::size_t>(i)] = idx;
  });
  return v;
}

ImageBatch make_eval_batch(const Dataset& data, const std::vector<std::int64_t>& indices,
                           const PipelineConfig& config) {
  check_norm(config.norm, data);
  std::vector<std::int64_t> all;
  const std::vector<std::int64_t>* idx = &indices;
  if (indices.empty()) {
    all.resize(static_cast<std::size_t>(data.size()));
    std::iota(all.begin(), all.end(), 0);
    idx = &all;
  }
  const Index n = static_cast<Index>(idx->size());
  ImageBatch b = empty_batch(data, n, config.image_size);
  parallel_for(n, config.workers, [&](Index i) {
    const std::int64_t s = (*idx)[static_cast<std::size_t>(i)];
    store_row(b, i, eval_transform(data, s, config.image_size), config.norm);
    b.source_indices[static_cast<std::size_t>(i)] = s;
  });
  return b;
}

std::vector<std::vector<std::int64_t>> epoch_iterator(Index num_samples, Index batch_size,
                                                      std::uint64_t seed, std::int64_t epoch) {
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  std::vector<std::int64_t> order(static_cast<std::size_t>(num_samples));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "epoch", {static_cast<std::uint64_t>(epoch)});
  shuffle_in_place(order, rng);
  std::vector<std::vector<std::int64_t>> batches;
  for (Index start = 0; start + batch_size <= num_samples; start += batch_size) {
    batches.emplace_back(order.begin() + start, order.begin() + start + batch_size);
  }
  return batches;
}

}  // namespace sdssl
