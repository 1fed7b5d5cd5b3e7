#pragma once

// Per-layer projector and predictor MLPs.

#include "sdssl/autograd.hpp"
#include "sdssl/params.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace sdssl {

enum class Framework { simclr, byol, mocov3 };

std::string_view to_string(Framework f);
Framework parse_framework(std::string_view s);
[[nodiscard]] inline bool has_teacher(Framework f) { return f != Framework::simclr; }
[[nodiscard]] inline bool has_predictor(Framework f) { return f != Framework::simclr; }

struct HeadConfig {
  int out_dim = 256;
  int hidden_last_projector = 4096;
  int hidden_intermediate_projector = 2048;
  int hidden_predictor = 4096;
  Framework framework = Framework::mocov3;
  /// One predictor shared by every layer instead of one per layer.
  bool shared_predictor = false;

  [[nodiscard]] bool bn_on_output() const { return framework != Framework::byol; }
  void validate() const;
};

enum class BnMode {
  train,         // batch statistics, running statistics updated
  train_frozen,  // batch statistics, running statistics untouched
  eval,          // running statistics
};

class BatchNorm1d {
 public:
  BatchNorm1d(Index dim, bool affine);

  [[nodiscard]] ag::Var forward(const ag::Var& x, BnMode mode);
  void collect_parameters(ParamList& out, const std::string& prefix) const;
  void collect_buffers(BufferList& out, const std::string& prefix);
  [[nodiscard]] BatchNorm1d clone() const;

 private:
  ag::Var gamma_, beta_;
  Matrix running_mean_, running_var_;
  static constexpr Real kMomentum = 0.1;
  static constexpr Real kEps = 1e-5;
};

/// Linear layers with optional batch normalization and ReLU between them.
/// Linear layers directly followed by batch normalization carry no bias.
class Mlp {
 public:
  struct LayerSpec {
    Index in = 0;
    Index out = 0;
    bool batch_norm = false;
    bool bn_affine = true;
    bool relu = false;
  };

  Mlp(const std::vector<LayerSpec>& layers, std::uint64_t seed);

  [[nodiscard]] ag::Var forward(const ag::Var& x, BnMode mode);
  [[nodiscard]] Index in_dim() const { return layers_.front().spec.in; }
  [[nodiscard]] Index out_dim() const { return layers_.back().spec.out; }
  [[nodiscard]] Index hidden_dim() const { return layers_.front().spec.out; }
  [[nodiscard]] std::size_t depth() const { return layers_.size(); }
  [[nodiscard]] bool has_output_bn() const { return layers_.back().spec.batch_norm; }

  void collect_parameters(ParamList& out, const std::string& prefix) const;
  void collect_buffers(BufferList& out, const std::string& prefix);
  [[nodiscard]] Mlp clone() const;

 private:
  struct Layer {
    LayerSpec spec;
    ag::Var weight;
    ag::Var bias;  // undefined when followed by batch normalization
    std::optional<BatchNorm1d> bn;
  };
  std::vector<Layer> layers_;
};

/// 3-layer projector: D -> hidden -> hidden -> out.
Mlp make_projector(Index in_dim, Index hidden, Index out_dim, bool bn_on_output,
                   std::uint64_t seed);
/// 2-layer predictor: out -> hidden -> out.
Mlp make_predictor(Index dim, Index hidden, bool bn_on_output, std::uint64_t seed);

/// Projectors (and predictors for byol/mocov3) for the tapped layers.
/// Layers are 1-based. A bank built without intermediate heads holds only
/// layer L (the baseline and the EMA teacher).
class HeadBank {
 public:
  enum class Role { student, teacher };

  HeadBank(const HeadConfig& config, Index embed_dim, int num_layers, bool intermediate_heads,
           std::uint64_t seed);

  /// Teacher copy: the last projector only, with fresh parameter nodes.
  [[nodiscard]] HeadBank make_teacher() const;

  [[nodiscard]] ag::Var project(int layer, const ag::Var& features, BnMode mode);
  [[nodiscard]] ag::Var predict(int layer, const ag::Var& projected, BnMode mode);

  [[nodiscard]] bool has_projector(int layer) const;
  [[nodiscard]] bool has_predictors() const { return !predictors_.empty(); }
  [[nodiscard]] int num_layers() const { return num_layers_; }
  [[nodiscard]] Role role() const { return role_; }
  [[nodiscard]] const HeadConfig& config() const { return config_; }
  [[nodiscard]] const Mlp& projector(int layer) const;
  [[nodiscard]] const Mlp& predictor(int layer) const;

  void collect_parameters(ParamList& out, const std::string& prefix = "heads.") const;
  void collect_buffers(BufferList& out, const std::string& prefix = "heads.");

 private:
  HeadBank() = default;
  [[nodiscard]] std::size_t projector_slot(int layer) const;
  [[nodiscard]] std::size_t predictor_slot(int layer) const;

  HeadConfig config_;
  int num_layers_ = 0;
  bool intermediate_ = false;
  Role role_ = Role::student;
  std::vector<Mlp> projectors_;  // slot 0..L-1, or a single slot for layer L
  std::vector<Mlp> predictors_;
};

}  // namespace sdssl
