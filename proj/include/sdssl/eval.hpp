#pragma once

// Frozen-feature evaluation: weighted k-NN, linear probe, per-layer
// (multi-exit) evaluation and representation geometry metrics.

#include "sdssl/augment.hpp"
#include "sdssl/vit.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace sdssl {

struct FeatureBank {
  Matrix features;
  std::vector<int> labels;
  int num_classes = 0;
  int layer = 0;
  std::string split = "train";
  bool normalized = false;

  [[nodiscard]] Index size() const { return features.rows(); }
  /// Throws DataError for non-finite rows, bad labels or a size mismatch.
  void validate() const;
  /// Copy with l2-normalized rows.
  [[nodiscard]] FeatureBank normalized_copy() const;
};

struct KnnConfig {
  int k = 20;
  Real temperature = 0.07;
};

/// Cosine-similarity k-NN with votes weighted by exp(sim / temperature).
/// Returns top-1 accuracy. Banks are normalized here if not already.
Real knn_classify(const FeatureBank& train, const FeatureBank& test, const KnnConfig& config);

struct ProbeConfig {
  int epochs = 100;
  Index batch_size = 256;
  Real lr = 0.1;
  Real momentum = 0.9;
  Real weight_decay = 0.0;
  std::uint64_t seed = 0;
};

/// Softmax regression on standardized features (train statistics), SGD with
/// momentum and cosine decay. Returns test top-1 accuracy.
Real linear_probe(const FeatureBank& train, const FeatureBank& test, const ProbeConfig& config);

enum class EvalKind { knn, linear };
EvalKind parse_eval_kind(const std::string& s);
std::string to_string(EvalKind k);

/// Encoder features for every sample of a dataset, computed in chunks.
LayerFeatureStack extract_features(const ViTEncoder& encoder, const Dataset& data,
                                   const PipelineConfig& pipeline, Index chunk = 256);

/// Evaluates each layer independently; result has one entry per layer.
std::vector<Real> multi_exit_eval(const LayerFeatureStack& train, const std::vector<int>& train_labels,
                                  const LayerFeatureStack& test, const std::vector<int>& test_labels,
                                  int num_classes, EvalKind kind, const KnnConfig& knn,
                                  const ProbeConfig& probe);

// ---- geometry metrics ----

struct PairSampling {
  enum class Mode { all_pairs, subsample };
  Mode mode = Mode::all_pairs;
  Index count = 0;  // number of sampled pairs in subsample mode

  static PairSampling parse(const std::string& s);  // "all_pairs" | "subsample:<k>"
  [[nodiscard]] std::string to_string() const;
};

struct MetricConfig {
  Real gamma = 2.0;
  Real t = 2.0;
  PairSampling pair_sampling;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Mean over rows of ||x_i - y_i||^gamma.
Real alignment(const Matrix& x, const Matrix& y, Real gamma);
/// log of the mean over ordered pairs i != j of exp(-t ||f_i - f_j||^2).
Real uniformity(const Matrix& features, Real t);
/// Mean of ||f_i - f_j||^gamma over distinct pairs chosen by `sampling`.
Real negative_alignment(const Matrix& features, Real gamma, const PairSampling& sampling,
                        std::uint64_t seed);

Matrix normalize_rows(const Matrix& m);

struct LayerMetrics {
  int layer = 0;
  Real alignment = 0.0;
  Real uniformity = 0.0;
  Real negative_alignment = 0.0;
  Real difference = 0.0;  // negative_alignment - alignment
};

/// Geometry of every layer: positive pairs are one fixed augmentation pair
/// per image; uniformity and negative pairs use the evaluation transform.
std::vector<LayerMetrics> layer_metrics(const ViTEncoder& encoder, const Dataset& data,
                                        const PipelineConfig& pipeline, const MetricConfig& config);

struct MetricsReport {
  std::vector<LayerMetrics> metrics;
  std::string accuracy_kind;  // "knn" or "linear"; empty when absent
  std::vector<Real> accuracy;  // per layer

  void write_csv(const std::filesystem::path& wide, const std::filesystem::path& long_form) const;
  void write_accuracy_csv(const std::filesystem::path& path) const;
  void write_json(const std::filesystem::path& path) const;
  /// One SVG per quantity: accuracy, -L_uni, L_ali, D (those available).
  void write_plots(const std::filesystem::path& dir, const std::string& label) const;
};

}  // namespace sdssl
