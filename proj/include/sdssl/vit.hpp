#pragma once

// Small Vision Transformer that exposes the [CLS] token of every block.

#include "sdssl/autograd.hpp"
#include "sdssl/params.hpp"

#include <cstdint>
#include <vector>

namespace sdssl {

struct EncoderConfig {
  int num_layers = 6;
  int embed_dim = 96;
  int num_heads = 3;
  int patch_size = 4;
  int image_size = 32;
  int channels = 3;
  double mlp_ratio = 4.0;

  [[nodiscard]] int grid() const { return image_size / patch_size; }
  [[nodiscard]] int num_patches() const { return grid() * grid(); }
  [[nodiscard]] int num_tokens() const { return num_patches() + 1; }
  [[nodiscard]] int mlp_hidden() const;
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// N images stored as rows of length channels*H*W (channel planes, then
/// rows, then columns).
struct ImageBatch {
  Matrix pixels;
  std::vector<std::int64_t> source_indices;
  int channels = 3;
  int height = 0;
  int width = 0;

  [[nodiscard]] Index size() const { return pixels.rows(); }
};

/// Two augmentations of the same source images, row-aligned.
struct ViewPair {
  ImageBatch first;
  ImageBatch second;
};

/// L entries of N x D: entry l holds the normalized [CLS] output of block l+1.
struct LayerFeatureStack {
  std::vector<Matrix> layers;

  [[nodiscard]] int num_layers() const { return static_cast<int>(layers.size()); }
  [[nodiscard]] Index num_samples() const { return layers.empty() ? 0 : layers.front().rows(); }
  [[nodiscard]] Index dim() const { return layers.empty() ? 0 : layers.front().cols(); }
};

/// Fixed 2-D sine-cosine table, one row per grid position in row-major
/// order: [sin(x w), cos(x w), sin(y w), cos(y w)] with w_k = 10000^(-k/(dim/4)).
Matrix positional_embedding_2d(int grid_h, int grid_w, int dim);

class ViTEncoder {
 public:
  ViTEncoder(const EncoderConfig& config, std::uint64_t seed);
  ViTEncoder(ViTEncoder&&) = default;
  ViTEncoder& operator=(ViTEncoder&&) = default;

  /// Deep copy with fresh parameter nodes (copying would alias them).
  [[nodiscard]] ViTEncoder clone() const;

  [[nodiscard]] const EncoderConfig& config() const { return config_; }

  /// Token sequence (N*(1+T)) x D: frozen patch projection, [CLS] at
  /// position 0 of each sample, positional embeddings added.
  [[nodiscard]] ag::Var patch_embed(const ImageBatch& batch) const;

  /// Normalized [CLS] representation after every block (L vars, N x D).
  [[nodiscard]] std::vector<ag::Var> forward_all_layers(const ImageBatch& batch) const;
  /// Conventional encoder output: normalized [CLS] of the last block.
  [[nodiscard]] ag::Var forward(const ImageBatch& batch) const;
  /// Gradient-free feature extraction.
  [[nodiscard]] LayerFeatureStack extract(const ImageBatch& batch) const;

  void collect_parameters(ParamList& out, const std::string& prefix = "encoder.") const;
  /// Non-trainable state (the frozen patch projector).
  void collect_buffers(BufferList& out, const std::string& prefix = "encoder.");

  [[nodiscard]] const Matrix& patch_weight() const { return patch_weight_; }
  /// FNV-1a over the frozen projector's bytes.
  [[nodiscard]] std::uint64_t patch_projector_hash() const;

 private:
  struct Block {
    ag::Var ln1_gamma, ln1_beta;
    ag::Var qkv_weight, qkv_bias;
    ag::Var proj_weight, proj_bias;
    ag::Var ln2_gamma, ln2_beta;
    ag::Var fc1_weight, fc1_bias;
    ag::Var fc2_weight, fc2_bias;
  };

  ViTEncoder(const ViTEncoder&) = default;

  [[nodiscard]] ag::Var run_block(const Block& block, const ag::Var& x, Index batch) const;
  void check_batch(const ImageBatch& batch) const;

  EncoderConfig config_;
  // frozen: never exposed as a trainable parameter
  Matrix patch_weight_;
  Matrix patch_bias_;
  ag::Var pos_embed_;
  ag::Var cls_token_;
  std::vector<Block> blocks_;
  ag::Var norm_gamma_, norm_beta_;
};

}  // namespace sdssl
