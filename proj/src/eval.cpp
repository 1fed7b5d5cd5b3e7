#include "sdssl/eval.hpp"

#include "sdssl/autograd.hpp"
#include "sdssl/plot.hpp"
#include "sdssl/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace sdssl {

namespace {

constexpr Index kChunk = 512;

Real accuracy_of(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (truth.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<Real>(hits) / static_cast<Real>(truth.size());
}

void check_compatible(const FeatureBank& train, const FeatureBank& test) {
  train.validate();
  test.validate();
  if (train.size() == 0) throw ConfigError("empty training feature bank");
  if (train.features.cols() != test.features.cols())
    throw ConfigError("feature dimension mismatch between train (" + std::to_string(train.features.cols()) +
                      ") and test (" + std::to_string(test.features.cols()) + ")");
  if (train.num_classes != test.num_classes) throw ConfigError("train and test banks disagree on class count");
}

/// Squared distances between rows of a (block) and rows of b.
Matrix squared_distances(const Matrix& a, const Matrix& b) {
  const ColVector na = a.rowwise().squaredNorm();
  const RowVector nb = b.rowwise().squaredNorm().transpose();
  Matrix d = -2.0 * (a * b.transpose());
  d.colwise() += na;
  d.rowwise() += nb;
  return d.cwiseMax(0.0);
}

std::string real_str(Real v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

Matrix normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (Index i = 0; i < out.rows(); ++i) {
    const Real n = out.row(i).norm();
    if (n > 1e-12) out.row(i) /= n;
  }
  return out;
}

void FeatureBank::validate() const {
  if (static_cast<Index>(labels.size()) != features.rows())
    throw DataError("feature bank has " + std::to_string(features.rows()) + " rows but " +
                    std::to_string(labels.size()) + " labels");
  if (num_classes < 1) throw ConfigError("feature bank needs at least one class");
  for (int y : labels)
    if (y < 0 || y >= num_classes) throw DataError("label " + std::to_string(y) + " out of range");
  if (!features.allFinite()) throw NumericError("non-finite features in layer " + std::to_string(layer));
}

FeatureBank FeatureBank::normalized_copy() const {
  FeatureBank b = *this;
  b.features = normalize_rows(features);
  b.normalized = true;
  return b;
}

Real knn_classify(const FeatureBank& train_in, const FeatureBank& test_in, const KnnConfig& config) {
  if (config.k < 1) throw ConfigError("knn k must be >= 1");
  if (!(config.temperature > 0.0)) throw ConfigError("knn temperature must be > 0");
  check_compatible(train_in, test_in);
  const FeatureBank train = train_in.normalized ? train_in : train_in.normalized_copy();
  const FeatureBank test = test_in.normalized ? test_in : test_in.normalized_copy();

  const Index n_train = train.size();
  const Index k = std::min<Index>(config.k, n_train);
  std::vector<int> predicted(static_cast<std::size_t>(test.size()));
  std::vector<Index> order(static_cast<std::size_t>(n_train));
  std::vector<Real> votes(static_cast<std::size_t>(train.num_classes));

  for (Index start = 0; start < test.size(); start += kChunk) {
    const Index rows = std::min(kChunk, test.size() - start);
    const Matrix sim = test.features.middleRows(start, rows) * train.features.transpose();
    for (Index r = 0; r < rows; ++r) {
      std::iota(order.begin(), order.end(), Index{0});
      // ties broken by bank index so results do not depend on the sort
      std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
        const Real sa = sim(r, a), sb = sim(r, b);
        return sa > sb || (sa == sb && a < b);
      });
      std::fill(votes.begin(), votes.end(), 0.0);
      for (Index j = 0; j < k; ++j) {
        const Index idx = order[static_cast<std::size_t>(j)];
        votes[static_cast<std::size_t>(train.labels[static_cast<std::size_t>(idx)])] +=
            std::exp(sim(r, idx) / config.temperature);
      }
      predicted[static_cast<std::size_t>(start + r)] =
          static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    }
  }
  return accuracy_of(predicted, test.labels);
}

Real linear_probe(const FeatureBank& train, const FeatureBank& test, const ProbeConfig& config) {
  if (config.epochs < 1) throw ConfigError("probe epochs must be >= 1");
  if (config.batch_size < 1) throw ConfigError("probe batch size must be >= 1");
  if (!(config.lr > 0.0)) throw ConfigError("probe lr must be > 0");
  check_compatible(train, test);

  const Index n = train.size();
  const Index d = train.features.cols();
  const int c = train.num_classes;

  const RowVector mean = train.features.colwise().mean();
  RowVector stdev = ((train.features.rowwise() - mean).array().square().colwise().sum() /
                     static_cast<Real>(n))
                        .sqrt()
                        .matrix();
  for (Index j = 0; j < d; ++j)
    if (stdev(j) < 1e-8) stdev(j) = 1.0;
  auto standardize = [&](const Matrix& x) -> Matrix {
    Matrix z = x.rowwise() - mean;
    return z.array().rowwise() / stdev.array();
  };
  const Matrix xtr = standardize(train.features);
  const Matrix xte = standardize(test.features);

  Matrix w = Matrix::Zero(d, c);
  RowVector b = RowVector::Zero(c);
  Matrix vw = Matrix::Zero(d, c);
  RowVector vb = RowVector::Zero(c);

  const Index steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const Real total = static_cast<Real>(steps_per_epoch * config.epochs);
  std::int64_t t = 0;
  std::vector<Index> perm(static_cast<std::size_t>(n));

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(perm.begin(), perm.end(), Index{0});
    Rng rng = make_rng(config.seed, "probe", {static_cast<std::uint64_t>(epoch)});
    shuffle_in_place(perm, rng);
    for (Index start = 0; start < n; start += config.batch_size, ++t) {
      const Index rows = std::min(config.batch_size, n - start);
      Matrix xb(rows, d);
      Matrix onehot = Matrix::Zero(rows, c);
      for (Index r = 0; r < rows; ++r) {
        const Index src = perm[static_cast<std::size_t>(start + r)];
        xb.row(r) = xtr.row(src);
        onehot(r, train.labels[static_cast<std::size_t>(src)]) = 1.0;
      }
      Matrix logits = (xb * w).rowwise() + b;
      const ColVector mx = logits.rowwise().maxCoeff();
      logits.colwise() -= mx;
      Matrix p = logits.array().exp().matrix();
      const ColVector z = p.rowwise().sum();
      p.array().colwise() /= z.array();

      const Matrix g = (p - onehot) / static_cast<Real>(rows);
      Matrix gw = xb.transpose() * g;
      if (config.weight_decay > 0.0) gw += config.weight_decay * w;
      const RowVector gb = g.colwise().sum();
      if (!gw.allFinite() || !gb.allFinite())
        throw NumericError("linear probe diverged at step " + std::to_string(t));

      const Real lr = config.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<Real>(t) / total));
      vw = config.momentum * vw + gw;
      vb = config.momentum * vb + gb;
      w -= lr * vw;
      b -= lr * vb;
    }
  }

  std::vector<int> predicted(static_cast<std::size_t>(test.size()));
  for (Index start = 0; start < test.size(); start += kChunk) {
    const Index rows = std::min(kChunk, test.size() - start);
    const Matrix logits = (xte.middleRows(start, rows) * w).rowwise() + b;
    if (!logits.allFinite()) throw NumericError("linear probe produced non-finite logits");
    for (Index r = 0; r < rows; ++r) {
      Index arg = 0;
      logits.row(r).maxCoeff(&arg);
      predicted[static_cast<std::size_t>(start + r)] = static_cast<int>(arg);
    }
  }
  return accuracy_of(predicted, test.labels);
}

EvalKind parse_eval_kind(const std::string& s) {
  if (s == "knn") return EvalKind::knn;
  if (s == "linear") return EvalKind::linear;
  throw ConfigError("unknown evaluation kind '" + s + "' (expected knn or linear)");
}

std::string to_string(EvalKind k) { return k == EvalKind::knn ? "knn" : "linear"; }

LayerFeatureStack extract_features(const ViTEncoder& encoder, const Dataset& data,
                                   const PipelineConfig& pipeline, Index chunk) {
  if (chunk < 1) throw ConfigError("feature extraction chunk must be >= 1");
  const Index n = data.size();
  const int layers = encoder.config().num_layers;
  const Index dim = encoder.config().embed_dim;
  LayerFeatureStack out;
  out.layers.assign(static_cast<std::size_t>(layers), Matrix(n, dim));
  ag::NoGradGuard guard;
  for (Index start = 0; start < n; start += chunk) {
    const Index rows = std::min(chunk, n - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rows));
    std::iota(idx.begin(), idx.end(), static_cast<std::int64_t>(start));
    const LayerFeatureStack part = encoder.extract(make_eval_batch(data, idx, pipeline));
    for (int l = 0; l < layers; ++l)
      out.layers[static_cast<std::size_t>(l)].middleRows(start, rows) = part.layers[static_cast<std::size_t>(l)];
  }
  return out;
}

std::vector<Real> multi_exit_eval(const LayerFeatureStack& train, const std::vector<int>& train_labels,
                                  const LayerFeatureStack& test, const std::vector<int>& test_labels,
                                  int num_classes, EvalKind kind, const KnnConfig& knn,
                                  const ProbeConfig& probe) {
  if (train.num_layers() != test.num_layers())
    throw ConfigError("train and test feature stacks have different depths");
  std::vector<Real> acc;
  for (int l = 0; l < train.num_layers(); ++l) {
    FeatureBank tr{train.layers[static_cast<std::size_t>(l)], train_labels, num_classes, l + 1, "train", false};
    FeatureBank te{test.layers[static_cast<std::size_t>(l)], test_labels, num_classes, l + 1, "test", false};
    acc.push_back(kind == EvalKind::knn ? knn_classify(tr, te, knn) : linear_probe(tr, te, probe));
  }
  return acc;
}

// ---- geometry metrics ----

PairSampling PairSampling::parse(const std::string& s) {
  PairSampling p;
  if (s == "all_pairs") return p;
  const std::string prefix = "subsample:";
  if (s.rfind(prefix, 0) == 0) {
    try {
      std::size_t used = 0;
      const long long k = std::stoll(s.substr(prefix.size()), &used);
      if (used != s.size() - prefix.size() || k < 1) throw std::invalid_argument("k");
      p.mode = Mode::subsample;
      p.count = static_cast<Index>(k);
      return p;
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("invalid pair sampling '" + s + "' (expected all_pairs or subsample:<k>)");
}

std::string PairSampling::to_string() const {
  return mode == Mode::all_pairs ? "all_pairs" : "subsample:" + std::to_string(count);
}

void MetricConfig::validate() const {
  if (!(gamma > 0.0)) throw ConfigError("metric gamma must be > 0");
  if (!(t > 0.0)) throw ConfigError("uniformity t must be > 0");
  if (pair_sampling.mode == PairSampling::Mode::subsample && pair_sampling.count < 1)
    throw ConfigError("subsample pair count must be >= 1");
}

Real alignment(const Matrix& x, const Matrix& y, Real gamma) {
  if (!(gamma > 0.0)) throw ConfigError("alignment gamma must be > 0");
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw ConfigError("alignment inputs differ in shape");
  if (x.rows() == 0) throw ConfigError("alignment needs at least one pair");
  Real sum = 0.0;
  for (Index i = 0; i < x.rows(); ++i) sum += std::pow((x.row(i) - y.row(i)).norm(), gamma);
  return sum / static_cast<Real>(x.rows());
}

Real uniformity(const Matrix& f, Real t) {
  if (!(t > 0.0)) throw ConfigError("uniformity t must be > 0");
  const Index m = f.rows();
  if (m < 2) throw ConfigError("uniformity needs at least two samples");
  // streaming log-sum-exp over all ordered pairs i != j
  Real running_max = -std::numeric_limits<Real>::infinity();
  Real acc = 0.0;
  for (Index start = 0; start < m; start += kChunk) {
    const Index rows = std::min(kChunk, m - start);
    const Matrix d2 = squared_distances(f.middleRows(start, rows), f);
    for (Index r = 0; r < rows; ++r) {
      for (Index j = 0; j < m; ++j) {
        if (j == start + r) continue;
        const Real v = -t * d2(r, j);
        if (v > running_max) {
          acc = acc * std::exp(running_max - v) + 1.0;
          running_max = v;
        } else {
          acc += std::exp(v - running_max);
        }
      }
    }
  }
  const Real pairs = static_cast<Real>(m) * static_cast<Real>(m - 1);
  return running_max + std::log(acc) - std::log(pairs);
}

Real negative_alignment(const Matrix& f, Real gamma, const PairSampling& sampling, std::uint64_t seed) {
  if (!(gamma > 0.0)) throw ConfigError("negative alignment gamma must be > 0");
  const Index m = f.rows();
  if (m < 2) throw ConfigError("negative alignment needs at least two samples");
  if (sampling.mode == PairSampling::Mode::subsample) {
    if (sampling.count < 1) throw ConfigError("subsample pair count must be >= 1");
    Rng rng = make_rng(seed, "negative_pairs");
    Real sum = 0.0;
    for (Index p = 0; p < sampling.count; ++p) {
      const auto i = static_cast<Index>(rng() % static_cast<std::uint64_t>(m));
      auto j = static_cast<Index>(rng() % static_cast<std::uint64_t>(m - 1));
      if (j >= i) ++j;
      sum += std::pow((f.row(i) - f.row(j)).norm(), gamma);
    }
    return sum / static_cast<Real>(sampling.count);
  }
  Real sum = 0.0;
  for (Index start = 0; start < m; start += kChunk) {
    const Index rows = std::min(kChunk, m - start);
    const Matrix d2 = squared_distances(f.middleRows(start, rows), f);
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < m; ++j)
        if (j != start + r) sum += std::pow(d2(r, j), gamma / 2.0);
  }
  return sum / (static_cast<Real>(m) * static_cast<Real>(m - 1));
}

std::vector<LayerMetrics> layer_metrics(const ViTEncoder& encoder, const Dataset& data,
                                        const PipelineConfig& pipeline, const MetricConfig& config) {
  config.validate();
  const Index n = data.size();
  if (n < 2) throw ConfigError("geometry metrics need at least two samples");
  const int layers = encoder.config().num_layers;
  const Index dim = encoder.config().embed_dim;

  std::vector<Matrix> first(static_cast<std::size_t>(layers), Matrix(n, dim));
  std::vector<Matrix> second = first;
  {
    ag::NoGradGuard guard;
    for (Index start = 0; start < n; start += 256) {
      const Index rows = std::min<Index>(256, n - start);
      std::vector<std::int64_t> idx(static_cast<std::size_t>(rows));
      std::iota(idx.begin(), idx.end(), static_cast<std::int64_t>(start));
      // step 0 of the metric seed: one fixed positive pair per image
      const ViewPair views = make_view_pair(data, idx, pipeline, config.seed, 0);
      const LayerFeatureStack a = encoder.extract(views.first);
      const LayerFeatureStack b = encoder.extract(views.second);
      for (int l = 0; l < layers; ++l) {
        first[static_cast<std::size_t>(l)].middleRows(start, rows) = a.layers[static_cast<std::size_t>(l)];
        second[static_cast<std::size_t>(l)].middleRows(start, rows) = b.layers[static_cast<std::size_t>(l)];
      }
    }
  }
  const LayerFeatureStack clean = extract_features(encoder, data, pipeline);

  std::vector<LayerMetrics> out;
  for (int l = 0; l < layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    const Matrix x = normalize_rows(first[li]);
    const Matrix y = normalize_rows(second[li]);
    const Matrix f = normalize_rows(clean.layers[li]);
    LayerMetrics m;
    m.layer = l + 1;
    m.alignment = alignment(x, y, config.gamma);
    m.uniformity = uniformity(f, config.t);
    m.negative_alignment = negative_alignment(f, config.gamma, config.pair_sampling, config.seed);
    m.difference = m.negative_alignment - m.alignment;
    if (!std::isfinite(m.alignment) || !std::isfinite(m.uniformity) || !std::isfinite(m.negative_alignment))
      throw NumericError("non-finite geometry metric at layer " + std::to_string(m.layer));
    out.push_back(m);
  }
  return out;
}

void MetricsReport::write_csv(const std::filesystem::path& wide, const std::filesystem::path& long_form) const {
  std::ostringstream w, l;
  w << "layer,L_ali,L_uni,L_ali_n,D\n";
  l << "layer,metric,value\n";
  for (const auto& m : metrics) {
    w << m.layer << ',' << real_str(m.alignment) << ',' << real_str(m.uniformity) << ','
      << real_str(m.negative_alignment) << ',' << real_str(m.difference) << '\n';
    l << m.layer << ",L_ali," << real_str(m.alignment) << '\n'
      << m.layer << ",L_uni," << real_str(m.uniformity) << '\n'
      << m.layer << ",L_ali_n," << real_str(m.negative_alignment) << '\n'
      << m.layer << ",D," << real_str(m.difference) << '\n';
  }
  write_text_file(wide, w.str());
  write_text_file(long_form, l.str());
}

void MetricsReport::write_accuracy_csv(const std::filesystem::path& path) const {
  std::ostringstream os;
  os << "layer,kind,accuracy\n";
  for (std::size_t i = 0; i < accuracy.size(); ++i)
    os << i + 1 << ',' << accuracy_kind << ',' << real_str(accuracy[i]) << '\n';
  write_text_file(path, os.str());
}

void MetricsReport::write_json(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["layers"] = nlohmann::json::array();
  for (const auto& m : metrics)
    j["layers"].push_back({{"layer", m.layer},
                           {"L_ali", m.alignment},
                           {"L_uni", m.uniformity},
                           {"L_ali_n", m.negative_alignment},
                           {"D", m.difference}});
  if (!accuracy.empty()) {
    j["accuracy_kind"] = accuracy_kind;
    j["accuracy"] = accuracy;
  }
  write_text_file(path, j.dump(2) + "\n");
}

void MetricsReport::write_plots(const std::filesystem::path& dir, const std::string& label) const {
  auto layer_axis = [](std::size_t n) {
    std::vector<Real> x(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<Real>(i + 1);
    return x;
  };
  if (!accuracy.empty()) {
    Series s{label, layer_axis(accuracy.size()), accuracy};
    for (auto& v : s.y) v *= 100.0;
    write_text_file(dir / "accuracy.svg",
                    line_chart_svg(accuracy_kind + " accuracy per layer", "layer", "top-1 (%)", {s}));
  }
  if (metrics.empty()) return;
  Series uni{label, {}, {}}, ali{label, {}, {}}, diff{label, {}, {}};
  for (const auto& m : metrics) {
    const auto x = static_cast<Real>(m.layer);
    uni.x.push_back(x);
    uni.y.push_back(-m.uniformity);
    ali.x.push_back(x);
    ali.y.push_back(m.alignment);
    diff.x.push_back(x);
    diff.y.push_back(m.difference);
  }
  write_text_file(dir / "uniformity.svg", line_chart_svg("-L_uni per layer", "layer", "-L_uni", {uni}));
  write_text_file(dir / "alignment.svg", line_chart_svg("L_ali per layer", "layer", "L_ali", {ali}));
  write_text_file(dir / "difference.svg", line_chart_svg("D = L_ali_n - L_ali per layer", "layer", "D", {diff}));
}

}  // namespace sdssl
