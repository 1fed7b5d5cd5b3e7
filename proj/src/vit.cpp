#include "sdssl/vit.hpp"

#include "sdssl/rng.hpp"

#include <cmath>
#include <string>

namespace sdssl {

namespace {

constexpr Real kLayerNormEps = 1e-6;
constexpr Real kInitStd = 0.02;

Matrix ones_row(Index d) { return Matrix::Ones(1, d); }
Matrix zeros_row(Index d) { return Matrix::Zero(1, d); }

}  // namespace

int EncoderConfig::mlp_hidden() const {
  return static_cast<int>(std::lround(mlp_ratio * embed_dim));
}

void EncoderConfig::validate() const {
  if (num_layers < 2) {
    throw ConfigError("encoder.num_layers must be >= 2 (got " + std::to_string(num_layers) + ")");
  }
  if (embed_dim <= 0) throw ConfigError("encoder.embed_dim must be positive");
  if (num_heads <= 0) throw ConfigError("encoder.num_heads must be positive");
  if (patch_size <= 0) throw ConfigError("encoder.patch_size must be positive");
  if (image_size <= 0) throw ConfigError("encoder.image_size must be positive");
  if (channels <= 0) throw ConfigError("encoder.channels must be positive");
  if (!(mlp_ratio > 0.0)) throw ConfigError("encoder.mlp_ratio must be positive");
  if (image_size % patch_size != 0) {
    throw ConfigError("encoder.image_size (" + std::to_string(image_size) +
                      ") must be divisible by encoder.patch_size (" + std::to_string(patch_size) +
                      ")");
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("encoder.embed_dim (" + std::to_string(embed_dim) +
                      ") must be divisible by encoder.num_heads (" + std::to_string(num_heads) +
                      ")");
  }
  if (embed_dim % 4 != 0) {
    throw ConfigError("encoder.embed_dim must be divisible by 4 for the 2-D sine-cosine embedding");
  }
}

Matrix positional_embedding_2d(int grid_h, int grid_w, int dim) {
  if (dim % 4 != 0) {
    throw ConfigError("positional_embedding_2d: dim (" + std::to_string(dim) +
                      ") must be divisible by 4");
  }
  if (grid_h <= 0 || grid_w <= 0) throw ConfigError("positional_embedding_2d: empty grid");
  const int quarter = dim / 4;
  Matrix table(static_cast<Index>(grid_h) * grid_w, dim);
  for (int y = 0; y < grid_h; ++y) {
    for (int x = 0; x < grid_w; ++x) {
      const Index row = static_cast<Index>(y) * grid_w + x;
      for (int k = 0; k < quarter; ++k) {
        const Real omega = 1.0 / std::pow(10000.0, static_cast<Real>(k) / quarter);
        table(row, k) = std::sin(x * omega);
        table(row, quarter + k) = std::cos(x * omega);
        table(row, 2 * quarter + k) = std::sin(y * omega);
        table(row, 3 * quarter + k) = std::cos(y * omega);
      }
    }
  }
  return table;
}

ViTEncoder::ViTEncoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const Index d = config_.embed_dim;
  const Index patch_dim =
      static_cast<Index>(config_.channels) * config_.patch_size * config_.patch_size;

  Rng patch_rng = make_rng(seed, "encoder.patch_projector");
  patch_weight_ = xavier_uniform(patch_dim, d, patch_rng);
  patch_bias_ = zeros_row(d);

  Matrix pos(config_.num_tokens(), d);
  pos.row(0).setZero();
  pos.bottomRows(config_.num_patches()) = positional_embedding_2d(config_.grid(), config_.grid(), config_.embed_dim);
  pos_embed_ = ag::constant(std::move(pos));

  Rng rng = make_rng(seed, "encoder.blocks");
  cls_token_ = ag::parameter(trunc_normal(1, d, kInitStd, rng));
  const Index hidden = config_.mlp_hidden();
  blocks_.reserve(static_cast<std::size_t>(config_.num_layers));
  for (int l = 0; l < config_.num_layers; ++l) {
    Block b;
    b.ln1_gamma = ag::parameter(ones_row(d));
    b.ln1_beta = ag::parameter(zeros_row(d));
    b.qkv_weight = ag::parameter(trunc_normal(d, 3 * d, kInitStd, rng));
    b.qkv_bias = ag::parameter(zeros_row(3 * d));
    b.proj_weight = ag::parameter(trunc_normal(d, d, kInitStd, rng));
    b.proj_bias = ag::parameter(zeros_row(d));
    b.ln2_gamma = ag::parameter(ones_row(d));
    b.ln2_beta = ag::parameter(zeros_row(d));
    b.fc1_weight = ag::parameter(trunc_normal(d, hidden, kInitStd, rng));
    b.fc1_bias = ag::parameter(zeros_row(hidden));
    b.fc2_weight = ag::parameter(trunc_normal(hidden, d, kInitStd, rng));
    b.fc2_bias = ag::parameter(zeros_row(d));
    blocks_.push_back(std::move(b));
  }
  norm_gamma_ = ag::parameter(ones_row(d));
  norm_beta_ = ag::parameter(zeros_row(d));
}

ViTEncoder ViTEncoder::clone() const {
  ViTEncoder copy(*this);
  auto fresh = [](ag::Var& v) { v = ag::Var(v.value(), v.requires_grad()); };
  fresh(copy.cls_token_);
  for (auto& b : copy.blocks_) {
    for (ag::Var* v : {&b.ln1_gamma, &b.ln1_beta, &b.qkv_weight, &b.qkv_bias, &b.proj_weight,
                       &b.proj_bias, &b.ln2_gamma, &b.ln2_beta, &b.fc1_weight, &b.fc1_bias,
                       &b.fc2_weight, &b.fc2_bias}) {
      fresh(*v);
    }
  }
  fresh(copy.norm_gamma_);
  fresh(copy.norm_beta_);
  return copy;
}

void ViTEncoder::check_batch(const ImageBatch& batch) const {
  if (batch.size() < 1) throw ConfigError("image batch is empty");
  if (batch.channels != config_.channels) {
    throw ConfigError("image batch channels (" + std::to_string(batch.channels) +
                      ") != encoder.channels (" + std::to_string(config_.channels) + ")");
  }
  if (batch.height != config_.image_size || batch.width != config_.image_size) {
    throw ConfigError("image batch size " + std::to_string(batch.height) + "x" +
                      std::to_string(batch.width) + " != encoder.image_size " +
                      std::to_string(config_.image_size));
  }
  if (batch.pixels.cols() !=
      static_cast<Index>(batch.channels) * batch.height * batch.width) {
    throw ConfigError("image batch pixel row length does not match channels*height*width");
  }
}

ag::Var ViTEncoder::patch_embed(const ImageBatch& batch) const {
  check_batch(batch);
  const Index n = batch.size();
  const int p = config_.patch_size;
  const int grid = config_.grid();
  const int hw = config_.image_size;
  const Index t = config_.num_patches();
  const Index patch_dim = static_cast<Index>(config_.channels) * p * p;

  Matrix patches(n * t, patch_dim);
  for (Index s = 0; s < n; ++s) {
    const Real* img = batch.pixels.row(s).data();
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx) {
        Real* dst = patches.row(s * t + gy * grid + gx).data();
        for (int c = 0; c < config_.channels; ++c) {
          const Real* plane = img + static_cast<Index>(c) * hw * hw;
          for (int dy = 0; dy < p; ++dy) {
            const Real* src = plane + static_cast<Index>(gy * p + dy) * hw + gx * p;
            for (int dx = 0; dx < p; ++dx) *dst++ = src[dx];
          }
        }
      }
    }
  }
  Matrix projected;
  projected.noalias() = patches * patch_weight_;
  projected.rowwise() += patch_bias_.row(0);
  return ag::assemble_tokens(ag::constant(std::move(projected)), cls_token_, pos_embed_, n, t);
}

ag::Var ViTEncoder::run_block(const Block& b, const ag::Var& x, Index batch) const {
  using namespace ag;
  Var h = layer_norm(x, b.ln1_gamma, b.ln1_beta, kLayerNormEps);
  h = linear(h, b.qkv_weight, b.qkv_bias);
  h = multi_head_attention(h, batch, config_.num_tokens(), config_.num_heads);
  h = linear(h, b.proj_weight, b.proj_bias);
  Var y = add(x, h);
  h = layer_norm(y, b.ln2_gamma, b.ln2_beta, kLayerNormEps);
  h = gelu(linear(h, b.fc1_weight, b.fc1_bias));
  h = linear(h, b.fc2_weight, b.fc2_bias);
  return add(y, h);
}

std::vector<ag::Var> ViTEncoder::forward_all_layers(const ImageBatch& batch) const {
  const Index n = batch.size();
  ag::Var x = patch_embed(batch);
  std::vector<Index> cls_rows(static_cast<std::size_t>(n));
  for (Index s = 0; s < n; ++s) cls_rows[static_cast<std::size_t>(s)] = s * config_.num_tokens();

  std::vector<ag::Var> features;
  features.reserve(blocks_.size());
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    x = run_block(blocks_[l], x, n);
    if (!x.value().allFinite()) {
      throw NumericError("non-finite activation in encoder block " + std::to_string(l + 1));
    }
    // One shared final norm applied to every tapped [CLS] row.
    features.push_back(
        ag::layer_norm(ag::gather_rows(x, cls_rows), norm_gamma_, norm_beta_, kLayerNormEps));
  }
  return features;
}

ag::Var ViTEncoder::forward(const ImageBatch& batch) const {
  return forward_all_layers(batch).back();
}

LayerFeatureStack ViTEncoder::extract(const ImageBatch& batch) const {
  ag::NoGradGuard guard;
  LayerFeatureStack stack;
  for (auto& v : forward_all_layers(batch)) stack.layers.push_back(v.value());
  return stack;
}

void ViTEncoder::collect_parameters(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + "cls_token", cls_token_, false});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = prefix + "blocks." + std::to_string(l) + ".";
    out.push_back({p + "ln1.gamma", b.ln1_gamma, false});
    out.push_back({p + "ln1.beta", b.ln1_beta, false});
    out.push_back({p + "attn.qkv.weight", b.qkv_weight, true});
    out.push_back({p + "attn.qkv.bias", b.qkv_bias, false});
    out.push_back({p + "attn.proj.weight", b.proj_weight, true});
    out.push_back({p + "attn.proj.bias", b.proj_bias, false});
    out.push_back({p + "ln2.gamma", b.ln2_gamma, false});
    out.push_back({p + "ln2.beta", b.ln2_beta, false});
    out.push_back({p + "mlp.fc1.weight", b.fc1_weight, true});
    out.push_back({p + "mlp.fc1.bias", b.fc1_bias, false});
    out.push_back({p + "mlp.fc2.weight", b.fc2_weight, true});
    out.push_back({p + "mlp.fc2.bias", b.fc2_bias, false});
  }
  out.push_back({prefix + "norm.gamma", norm_gamma_, false});
  out.push_back({prefix + "norm.beta", norm_beta_, false});
}

void ViTEncoder::collect_buffers(BufferList& out, const std::string& prefix) {
  out.push_back({prefix + "patch_embed.weight", &patch_weight_});
  out.push_back({prefix + "patch_embed.bias", &patch_bias_});
}

std::uint64_t ViTEncoder::patch_projector_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const Matrix& m) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(Real); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  feed(patch_weight_);
  feed(patch_bias_);
  return h;
}

}  // namespace sdssl
