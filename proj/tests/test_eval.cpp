#include "support.hpp"

#include "sdssl/data.hpp"
#include "sdssl/eval.hpp"

#include "json.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

using namespace sdssl;
using sdssl::testing::random_matrix;
using sdssl::testing::random_unit_rows;
namespace fs = std::filesystem;

namespace {

// Brute-force reference for the weighted vote: full sort of every row.
Real knn_oracle(const Matrix& train, const std::vector<int>& ytr, const Matrix& test,
                const std::vector<int>& yte, int classes, int k, Real tau) {
  int hits = 0;
  for (Index i = 0; i < test.rows(); ++i) {
    const RowVector q = test.row(i) / test.row(i).norm();
    std::vector<std::pair<Real, Index>> sims;
    for (Index j = 0; j < train.rows(); ++j)
      sims.emplace_back(q.dot(train.row(j) / train.row(j).norm()), j);
    std::sort(sims.begin(), sims.end(), [](auto a, auto b) {
      return a.first > b.first || (a.first == b.first && a.second < b.second);
    });
    std::vector<Real> votes(static_cast<std::size_t>(classes), 0.0);
    for (int n = 0; n < std::min<int>(k, static_cast<int>(sims.size())); ++n)
      votes[static_cast<std::size_t>(ytr[static_cast<std::size_t>(sims[static_cast<std::size_t>(n)].second)])] +=
          std::exp(sims[static_cast<std::size_t>(n)].first / tau);
    const int pred = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    hits += pred == yte[static_cast<std::size_t>(i)];
  }
  return static_cast<Real>(hits) / static_cast<Real>(test.rows());
}

std::vector<int> random_labels(Index n, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> y(static_cast<std::size_t>(n));
  for (auto& v : y) v = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
  return y;
}

// Gaussian clusters around random centres, separated by `spread`.
std::pair<Matrix, std::vector<int>> clusters(Index n, Index dim, int classes, Real spread,
                                             std::uint64_t seed) {
  const Matrix centres = random_matrix(classes, dim, 99, spread);
  const std::vector<int> y = random_labels(n, classes, seed);
  Matrix x = random_matrix(n, dim, seed + 1);
  for (Index i = 0; i < n; ++i) x.row(i) += centres.row(y[static_cast<std::size_t>(i)]);
  return {x, y};
}

Real uniformity_oracle(const Matrix& f, Real t) {
  Real s = 0.0;
  const Index m = f.rows();
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < m; ++j)
      if (i != j) s += std::exp(-t * (f.row(i) - f.row(j)).squaredNorm());
  return std::log(s / static_cast<Real>(m * (m - 1)));
}

Real negative_alignment_oracle(const Matrix& f, Real gamma) {
  Real s = 0.0;
  const Index m = f.rows();
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < m; ++j)
      if (i != j) s += std::pow((f.row(i) - f.row(j)).norm(), gamma);
  return s / static_cast<Real>(m * (m - 1));
}

Matrix random_orthogonal(Index d, std::uint64_t seed) {
  Eigen::HouseholderQR<Matrix> qr(random_matrix(d, d, seed));
  return qr.householderQ() * Matrix::Identity(d, d);
}

FeatureBank bank(const Matrix& x, const std::vector<int>& y, int classes) {
  return FeatureBank{x, y, classes, 1, "train", false};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.num_layers = 3;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.patch_size = 4;
  c.image_size = 8;
  return c;
}

}  // namespace

TEST_CASE("knn matches a brute-force reference on random data") {
  const Matrix tr = random_matrix(300, 12, 1);
  const Matrix te = random_matrix(120, 12, 2);
  const auto ytr = random_labels(300, 5, 3);
  const auto yte = random_labels(120, 5, 4);
  for (int k : {1, 5, 20}) {
    for (Real tau : {0.07, 0.5}) {
      const Real got = knn_classify(bank(tr, ytr, 5), bank(te, yte, 5), {k, tau});
      CHECK(got == knn_oracle(tr, ytr, te, yte, 5, k, tau));
    }
  }
}

TEST_CASE("knn weighted vote beats the majority on a hand example") {
  // query along +x; one very close neighbour of class 1, two far ones of class 0
  Matrix tr(3, 2);
  tr << 1.0, 0.01, 0.2, 1.0, 0.2, -1.0;
  const std::vector<int> ytr = {1, 0, 0};
  Matrix te(1, 2);
  te << 1.0, 0.0;
  // sim ~ 1.0 vs ~0.196 each: exp(1/0.07) dwarfs 2 exp(0.196/0.07)
  CHECK(knn_classify(bank(tr, ytr, 2), bank(te, {1}, 2), {3, 0.07}) == 1.0);
  // with a huge temperature all weights are ~1 and the majority wins
  CHECK(knn_classify(bank(tr, ytr, 2), bank(te, {1}, 2), {3, 1e6}) == 0.0);
}

TEST_CASE("knn rejects bad inputs") {
  const Matrix te = random_matrix(4, 3, 1);
  const FeatureBank empty{Matrix(0, 3), {}, 2, 1, "train", false};
  CHECK_THROWS_AS(knn_classify(empty, bank(te, {0, 1, 0, 1}, 2), {}), ConfigError);
  CHECK_THROWS_AS(knn_classify(bank(te, {0, 1, 0, 1}, 2), bank(te, {0, 1, 0, 1}, 2), {0, 0.1}), ConfigError);
  CHECK_THROWS_AS(knn_classify(bank(te, {0, 1, 0, 1}, 2), bank(te, {0, 1, 0, 1}, 2), {3, 0.0}), ConfigError);
  CHECK_THROWS_AS(knn_classify(bank(te, {0, 1, 0, 1}, 2), bank(random_matrix(4, 5, 2), {0, 1, 0, 1}, 2), {}),
                  ConfigError);
  CHECK_THROWS_AS(knn_classify(bank(te, {0, 1, 0, 7}, 2), bank(te, {0, 1, 0, 1}, 2), {}), DataError);
  // k larger than the bank is clamped
  CHECK_NOTHROW(knn_classify(bank(te, {0, 1, 0, 1}, 2), bank(te, {0, 1, 0, 1}, 2), {50, 0.1}));
}

TEST_CASE("well separated clusters are classified almost perfectly") {
  auto [xtr, ytr] = clusters(600, 16, 6, 8.0, 10);
  auto [xte, yte] = clusters(300, 16, 6, 8.0, 20);
  CHECK(knn_classify(bank(xtr, ytr, 6), bank(xte, yte, 6), {}) > 0.97);
  ProbeConfig pc;
  pc.epochs = 30;
  pc.batch_size = 64;
  CHECK(linear_probe(bank(xtr, ytr, 6), bank(xte, yte, 6), pc) > 0.97);
}

TEST_CASE("random labels give chance accuracy") {
  // C = 10, 4000 test rows: chance is 10% with a standard error near 0.5pp
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Matrix xtr = random_matrix(2000, 16, seed * 10);
    const Matrix xte = random_matrix(4000, 16, seed * 10 + 1);
    const auto ytr = random_labels(2000, 10, seed * 10 + 2);
    const auto yte = random_labels(4000, 10, seed * 10 + 3);
    CHECK(std::abs(knn_classify(bank(xtr, ytr, 10), bank(xte, yte, 10), {}) - 0.1) < 0.03);
    ProbeConfig pc;
    pc.epochs = 5;
    pc.seed = seed;
    CHECK(std::abs(linear_probe(bank(xtr, ytr, 10), bank(xte, yte, 10), pc) - 0.1) < 0.03);
  }
}

TEST_CASE("knn and geometry metrics are invariant to rotations of feature space") {
  auto [xtr, ytr] = clusters(200, 10, 4, 2.0, 5);
  auto [xte, yte] = clusters(100, 10, 4, 2.0, 6);
  const Matrix q = random_orthogonal(10, 77);
  CHECK(knn_classify(bank(xtr, ytr, 4), bank(xte, yte, 4), {}) ==
        knn_classify(bank(xtr * q, ytr, 4), bank(xte * q, yte, 4), {}));

  const Matrix f = normalize_rows(xtr);
  const Matrix g = normalize_rows(xte.topRows(100));
  CHECK(uniformity(f * q, 2.0) == doctest::Approx(uniformity(f, 2.0)).epsilon(1e-10));
  CHECK(alignment(f.topRows(100) * q, g * q, 2.0) == doctest::Approx(alignment(f.topRows(100), g, 2.0)).epsilon(1e-10));
  CHECK(negative_alignment(f * q, 2.0, {}, 0) ==
        doctest::Approx(negative_alignment(f, 2.0, {}, 0)).epsilon(1e-10));
}

TEST_CASE("linear probe is deterministic and rejects non-finite features") {
  auto [xtr, ytr] = clusters(200, 8, 3, 1.5, 7);
  auto [xte, yte] = clusters(100, 8, 3, 1.5, 8);
  ProbeConfig pc;
  pc.epochs = 5;
  pc.seed = 4;
  CHECK(linear_probe(bank(xtr, ytr, 3), bank(xte, yte, 3), pc) ==
        linear_probe(bank(xtr, ytr, 3), bank(xte, yte, 3), pc));
  Matrix bad = xtr;
  bad(3, 2) = std::numeric_limits<Real>::quiet_NaN();
  CHECK_THROWS_AS(linear_probe(bank(bad, ytr, 3), bank(xte, yte, 3), pc), NumericError);
  pc.epochs = 0;
  CHECK_THROWS_AS(linear_probe(bank(xtr, ytr, 3), bank(xte, yte, 3), pc), ConfigError);
}

TEST_CASE("geometry metrics match direct double loops") {
  const Matrix f = random_unit_rows(40, 6, 3);
  const Matrix g = random_unit_rows(40, 6, 4);
  for (Real t : {0.5, 2.0, 5.0}) CHECK(uniformity(f, t) == doctest::Approx(uniformity_oracle(f, t)).epsilon(1e-10));
  for (Real gamma : {1.0, 2.0, 3.0}) {
    CHECK(negative_alignment(f, gamma, {}, 0) ==
          doctest::Approx(negative_alignment_oracle(f, gamma)).epsilon(1e-10));
    Real s = 0.0;
    for (Index i = 0; i < 40; ++i) s += std::pow((f.row(i) - g.row(i)).norm(), gamma);
    CHECK(alignment(f, g, gamma) == doctest::Approx(s / 40.0).epsilon(1e-12));
  }
}

TEST_CASE("geometry metrics on hand-built configurations") {
  Matrix antipodal(2, 3);
  antipodal << 1, 0, 0, -1, 0, 0;
  CHECK(uniformity(antipodal, 2.0) == doctest::Approx(-8.0));
  CHECK(negative_alignment(antipodal, 2.0, {}, 0) == doctest::Approx(4.0));
  CHECK(alignment(antipodal, antipodal, 2.0) == 0.0);

  // collapsed features: every pair coincides
  const Matrix collapsed = Matrix::Ones(10, 4) * 0.5;
  CHECK(uniformity(collapsed, 2.0) == doctest::Approx(0.0));
  CHECK(negative_alignment(collapsed, 2.0, {}, 0) == doctest::Approx(0.0));

  // unit-norm features keep uniformity in [-4t, 0]
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Real u = uniformity(random_unit_rows(30, 5, s), 2.0);
    CHECK(u <= 0.0);
    CHECK(u >= -8.0);
  }
}

TEST_CASE("uniformity stays finite when every pair is far apart") {
  // exp(-t d^2) underflows to zero for these distances without log-sum-exp
  Matrix f(3, 1);
  f << 0.0, 100.0, 250.0;
  const Real got = uniformity(f, 2.0);
  CHECK(std::isfinite(got));
  const Real expected = -2.0 * 100.0 * 100.0 + std::log(2.0 / 6.0 * (1.0 + std::exp(-2.0 * (150.0 * 150.0 - 100.0 * 100.0))));
  CHECK(got == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("geometry metrics reject invalid arguments") {
  const Matrix one = random_unit_rows(1, 4, 1);
  const Matrix f = random_unit_rows(5, 4, 1);
  CHECK_THROWS_AS(uniformity(one, 2.0), ConfigError);
  CHECK_THROWS_AS(negative_alignment(one, 2.0, {}, 0), ConfigError);
  CHECK_THROWS_AS(alignment(f, f, 0.0), ConfigError);
  CHECK_THROWS_AS(alignment(f, f, -1.0), ConfigError);
  CHECK_THROWS_AS(negative_alignment(f, 0.0, {}, 0), ConfigError);
  CHECK_THROWS_AS(uniformity(f, 0.0), ConfigError);
  CHECK_THROWS_AS(alignment(f, one, 2.0), ConfigError);
  MetricConfig mc;
  mc.gamma = -2.0;
  CHECK_THROWS_AS(mc.validate(), ConfigError);
}

TEST_CASE("subsampled negative pairs approach the exhaustive mean") {
  const Matrix f = random_unit_rows(60, 5, 9);
  const Real exact = negative_alignment(f, 2.0, {}, 0);
  const PairSampling s = PairSampling::parse("subsample:200000");
  const Real approx = negative_alignment(f, 2.0, s, 3);
  CHECK(approx == doctest::Approx(exact).epsilon(0.01));
  CHECK(negative_alignment(f, 2.0, s, 3) == approx);
  CHECK(negative_alignment(f, 2.0, PairSampling::parse("subsample:50"), 3) !=
        negative_alignment(f, 2.0, PairSampling::parse("subsample:50"), 4));
}

TEST_CASE("pair sampling strings round-trip") {
  CHECK(PairSampling::parse("all_pairs").mode == PairSampling::Mode::all_pairs);
  const auto s = PairSampling::parse("subsample:1000");
  CHECK(s.mode == PairSampling::Mode::subsample);
  CHECK(s.count == 1000);
  CHECK(PairSampling::parse(s.to_string()).count == 1000);
  for (const char* bad : {"", "some", "subsample:", "subsample:0", "subsample:-3", "subsample:5x"})
    CHECK_THROWS_AS(PairSampling::parse(bad), ConfigError);
  CHECK(parse_eval_kind("knn") == EvalKind::knn);
  CHECK(parse_eval_kind("linear") == EvalKind::linear);
  CHECK_THROWS_AS(parse_eval_kind("svm"), ConfigError);
}

TEST_CASE("multi-exit evaluation scores each layer independently") {
  auto [good, ytr] = clusters(200, 8, 4, 6.0, 11);
  auto [good_te, yte] = clusters(100, 8, 4, 6.0, 12);
  LayerFeatureStack tr, te;
  tr.layers = {random_matrix(200, 8, 1), good};
  te.layers = {random_matrix(100, 8, 2), good_te};
  const auto acc = multi_exit_eval(tr, ytr, te, yte, 4, EvalKind::knn, {}, {});
  REQUIRE(acc.size() == 2);
  CHECK(acc[1] > 0.95);
  CHECK(acc[0] < 0.6);
  CHECK(acc[1] == knn_classify(bank(good, ytr, 4), bank(good_te, yte, 4), {}));
  LayerFeatureStack shallow;
  shallow.layers = {good_te};
  CHECK_THROWS_AS(multi_exit_eval(tr, ytr, shallow, yte, 4, EvalKind::knn, {}, {}), ConfigError);
}

TEST_CASE("encoder features and layer metrics on a synthetic dataset") {
  const Dataset data = make_synthetic(48, 8, 5, "test");
  const ViTEncoder enc(tiny_encoder(), 3);
  PipelineConfig pc;
  pc.image_size = 8;
  pc.norm = ChannelNorm::from_dataset(data);

  const LayerFeatureStack all = extract_features(enc, data, pc, 256);
  const LayerFeatureStack chunked = extract_features(enc, data, pc, 7);
  REQUIRE(all.num_layers() == 3);
  CHECK(all.num_samples() == 48);
  for (int l = 0; l < 3; ++l)
    CHECK((all.layers[static_cast<std::size_t>(l)] - chunked.layers[static_cast<std::size_t>(l)]).norm() < 1e-10);

  MetricConfig mc;
  mc.seed = 1;
  const auto m = layer_metrics(enc, data, pc, mc);
  REQUIRE(m.size() == 3);
  for (const auto& x : m) {
    CHECK(x.difference == doctest::Approx(x.negative_alignment - x.alignment));
    CHECK(x.alignment >= 0.0);
    CHECK(x.alignment <= 4.0);
    CHECK(x.uniformity <= 0.0);
  }
  const auto again = layer_metrics(enc, data, pc, mc);
  CHECK(again[2].alignment == m[2].alignment);
  CHECK(again[2].uniformity == m[2].uniformity);
}

TEST_CASE("report writers emit CSV, JSON and SVG") {
  const fs::path dir = fs::temp_directory_path() / "sdssl_eval_report";
  fs::remove_all(dir);
  MetricsReport r;
  r.metrics = {{1, 0.5, -2.0, 1.5, 1.0}, {2, 0.4, -2.5, 1.7, 1.3}};
  r.accuracy_kind = "knn";
  r.accuracy = {0.3, 0.45};
  r.write_csv(dir / "wide.csv", dir / "long.csv");
  r.write_accuracy_csv(dir / "acc.csv");
  r.write_json(dir / "report.json");
  r.write_plots(dir, "run");

  const std::string wide = slurp(dir / "wide.csv");
  CHECK(wide.rfind("layer,L_ali,L_uni,L_ali_n,D\n", 0) == 0);
  CHECK(wide.find("2,0.4,-2.5,1.7,1.3") != std::string::npos);
  const std::string lng = slurp(dir / "long.csv");
  CHECK(std::count(lng.begin(), lng.end(), '\n') == 9);
  CHECK(lng.find("1,D,1\n") != std::string::npos);

  const auto j = nlohmann::json::parse(slurp(dir / "report.json"));
  CHECK(j["layers"].size() == 2);
  CHECK(j["layers"][1]["D"].get<double>() == 1.3);
  CHECK(j["accuracy"][0].get<double>() == 0.3);

  for (const char* f : {"accuracy.svg", "uniformity.svg", "alignment.svg", "difference.svg"}) {
    const std::string svg = slurp(dir / f);
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("<polyline") != std::string::npos);
  }
  CHECK_THROWS_AS(r.write_json("/proc/definitely/not/writable.json"), IoError);
}
