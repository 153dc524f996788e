#include <cmath>

#include <gtest/gtest.h>

#include "pfrouter/geometry.hpp"
#include "pfrouter/synth.hpp"
#include "test_util.hpp"

using namespace pfrouter;
using pfrouter::testing::error_message;
using pfrouter::testing::random_matrix;

namespace {

double brute_anisotropy(const Matrix& X) {
  double sum = 0.0;
  std::size_t pairs = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < X.rows(); ++j) {
      sum += X.row(i).dot(X.row(j)) / (X.row(i).norm() * X.row(j).norm());
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

double direct_fisher(const Matrix& X, const std::vector<std::uint8_t>& y) {
  Eigen::RowVectorXd m[2] = {Eigen::RowVectorXd::Zero(X.cols()), Eigen::RowVectorXd::Zero(X.cols())};
  double n[2] = {0, 0};
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    m[y[static_cast<std::size_t>(i)]] += X.row(i);
    n[y[static_cast<std::size_t>(i)]] += 1;
  }
  m[0] /= n[0];
  m[1] /= n[1];
  double tr[2] = {0, 0};
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const int c = y[static_cast<std::size_t>(i)];
    tr[c] += (X.row(i) - m[c]).squaredNorm() / (n[c] - 1);
  }
  return (m[1] - m[0]).squaredNorm() / (tr[0] + tr[1]);
}

std::vector<std::uint8_t> alternating(std::size_t n) {
  std::vector<std::uint8_t> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<std::uint8_t>(i % 2);
  return y;
}

Matrix orthogonal(Eigen::Index d, std::uint64_t seed) {
  Eigen::HouseholderQR<Matrix> qr(random_matrix(d, d, seed));
  return qr.householderQ() * Matrix::Identity(d, d);
}

LayerDiagnostics diag(int layer, double j, Pooling p = Pooling::kLastToken, const std::string& enc = "e") {
  LayerDiagnostics d;
  d.encoder_id = enc;
  d.num_layers = 8;
  d.layer = layer;
  d.pooling = p;
  d.fisher["t"].j = j;
  return d;
}

}  // namespace

TEST(EffectiveDimensionality, EqualEigenvalues) {
  // columns with equal variance and zero covariance
  Matrix x(4, 5);
  x << 1, 1, 1, 0, 0,  //
      -1, -1, 1, 0, 0,  //
      1, -1, -1, 0, 0,  //
      -1, 1, -1, 0, 0;
  EXPECT_NEAR(effective_dimensionality(x), 3.0, 1e-12);
}

TEST(EffectiveDimensionality, RankOne) {
  Matrix x(6, 4);
  const Eigen::RowVector4d dir(1, -2, 0.5, 3);
  for (int i = 0; i < 6; ++i) x.row(i) = Eigen::RowVector4d(5, 5, 5, 5) + (i * i - 3.0) * dir;
  EXPECT_NEAR(effective_dimensionality(x), 1.0, 1e-9);
}

TEST(EffectiveDimensionality, IsotropicGaussian) {
  const Matrix x = random_matrix(5000, 10, 17);
  const double d = effective_dimensionality(x);
  EXPECT_GE(d, 9.0);
  EXPECT_LE(d, 10.0);
  const Matrix c = x.rowwise() - x.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Matrix> es(c.transpose() * c / 4999.0);
  const auto ev = es.eigenvalues();
  EXPECT_NEAR(d, ev.sum() * ev.sum() / ev.squaredNorm(), 1e-9);
}

TEST(EffectiveDimensionality, InvariantUnderScalingAndColumnDuplication) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Matrix x = random_matrix(60, 6, seed) * random_matrix(6, 6, seed + 50);
    const double d = effective_dimensionality(x);
    EXPECT_GE(d, 1.0);
    EXPECT_LE(d, 6.0);
    EXPECT_NEAR(effective_dimensionality(-3.7 * x), d, 1e-9);
    Matrix doubled(x.rows(), 2 * x.cols());
    doubled << x, x;
    EXPECT_NEAR(effective_dimensionality(doubled), d, 1e-9);
  }
}

TEST(EffectiveDimensionality, DegenerateSample) {
  const Matrix x = Matrix::Constant(5, 3, 2.0);
  EXPECT_NE(error_message([&] { effective_dimensionality(x); }).find("degenerate sample"), std::string::npos);
  EXPECT_THROW(effective_dimensionality(Matrix::Ones(1, 3)), DataError);
}

TEST(Anisotropy, HandCases) {
  EXPECT_NEAR(anisotropy(Matrix::Constant(7, 3, 0.5)), 1.0, 1e-12);
  Matrix orth(2, 3);
  orth << 1, 0, 0, 0, 2, 0;
  EXPECT_NEAR(anisotropy(orth), 0.0, 1e-12);
  Matrix zero = Matrix::Ones(3, 2);
  zero.row(2).setZero();
  EXPECT_NE(error_message([&] { anisotropy(zero); }).find("row 2"), std::string::npos);
}

TEST(Anisotropy, GramIdentityMatchesBruteForce) {
  for (Eigen::Index n : {2, 10, 50, 64, 65, 120, 200}) {
    Matrix x = random_matrix(n, 8, static_cast<std::uint64_t>(n));
    x.array() += 0.3;
    EXPECT_NEAR(anisotropy(x), brute_anisotropy(x), 1e-6) << "n=" << n;
  }
}

TEST(Anisotropy, InvariantUnderPositiveRowScaling) {
  Matrix x = random_matrix(90, 5, 3);
  const double a = anisotropy(x);
  Rng rng(1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) x.row(i) *= 0.1 + 10 * rng.uniform();
  EXPECT_NEAR(anisotropy(x), a, 1e-9);
  EXPECT_GE(a, -1.0);
  EXPECT_LE(a, 1.0);
}

TEST(Fisher, HandCase) {
  // unbiased per-dimension variance 1 in each class, means (0,0) and (2,0)
  const double a = std::sqrt(1.5);
  Matrix x(8, 2);
  x << a, 0, -a, 0, 0, a, 0, -a,  //
      2 + a, 0, 2 - a, 0, 2, a, 2, -a;
  const std::vector<std::uint8_t> y{0, 0, 0, 0, 1, 1, 1, 1};
  const auto t = fisher_terms(x, y);
  EXPECT_NEAR(t.trace0, 2.0, 1e-12);
  EXPECT_NEAR(t.trace1, 2.0, 1e-12);
  EXPECT_NEAR(t.j, 1.0, 1e-12);
  EXPECT_EQ(t.n0, 4u);
  EXPECT_NEAR(t.mean1(0), 2.0, 1e-12);
}

TEST(Fisher, MatchesDirectFormulaAndInvariances) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Matrix x = random_matrix(120, 6, seed);
    const auto y = alternating(120);
    for (Eigen::Index i = 1; i < 120; i += 2) x(i, 0) += 1.0;
    const double j = fisher_j(x, y);
    EXPECT_NEAR(j, direct_fisher(x, y), 1e-12);
    EXPECT_GE(j, 0.0);
    EXPECT_NEAR(fisher_j(x * orthogonal(6, seed), y), j, 1e-9);
    EXPECT_NEAR(fisher_j(4.5 * x, y), j, 1e-9);
  }
}

TEST(Fisher, DoublingSeparationQuadruplesJ) {
  Matrix x = random_matrix(200, 4, 8);
  const auto y = alternating(200);
  // center each class, then place class means at ±s/2 along a fixed direction
  Eigen::RowVectorXd m[2] = {Eigen::RowVectorXd::Zero(4), Eigen::RowVectorXd::Zero(4)};
  for (Eigen::Index i = 0; i < 200; ++i) m[y[static_cast<std::size_t>(i)]] += x.row(i) / 100.0;
  for (Eigen::Index i = 0; i < 200; ++i) x.row(i) -= m[y[static_cast<std::size_t>(i)]];
  const Eigen::RowVectorXd dir = Eigen::RowVectorXd::LinSpaced(4, 1, 2);
  auto shifted = [&](double s) {
    Matrix out = x;
    for (Eigen::Index i = 0; i < 200; ++i) out.row(i) += (y[static_cast<std::size_t>(i)] ? 0.5 : -0.5) * s * dir;
    return out;
  };
  EXPECT_NEAR(fisher_j(shifted(2.0), y), 4.0 * fisher_j(shifted(1.0), y), 1e-9);
}

TEST(Fisher, IdenticalClassDistributionsGiveSmallJ) {
  // mean of J under the null is about d/n_per_class; this bound is far above it
  const Matrix x = random_matrix(2000, 5, 21);
  EXPECT_LT(fisher_j(x, alternating(2000)), 0.02);
}

TEST(Fisher, Errors) {
  const Matrix x = random_matrix(4, 2, 1);
  EXPECT_NE(error_message([&] { fisher_j(x, std::vector<std::uint8_t>{1, 1, 1, 1}); }).find("both classes"),
            std::string::npos);
  Matrix c(4, 2);
  c << 0, 0, 0, 0, 1, 1, 1, 1;
  EXPECT_NE(error_message([&] { fisher_j(c, std::vector<std::uint8_t>{0, 0, 1, 1}); }).find("degenerate classes"),
            std::string::npos);
}

TEST(SelectLayers, TieGoesToDeeperLayer) {
  std::vector<LayerDiagnostics> d{diag(5, 0.1), diag(6, 0.3), diag(7, 0.3)};
  const auto sel = select_layers(d, {"t"}, LayerCriterion::kFisherJ);
  EXPECT_EQ(sel.at("t").layer, 7);
  EXPECT_DOUBLE_EQ(sel.at("t").score, 0.3);
}

TEST(SelectLayers, TieGoesToLastTokenThenEncoderOrder) {
  std::vector<LayerDiagnostics> d{diag(6, 0.3, Pooling::kMean), diag(6, 0.3, Pooling::kLastToken)};
  EXPECT_EQ(select_layers(d, {"t"}, LayerCriterion::kFisherJ).at("t").pooling, Pooling::kLastToken);
  std::vector<LayerDiagnostics> e{diag(6, 0.3, Pooling::kLastToken, "b"), diag(6, 0.3, Pooling::kLastToken, "a")};
  EXPECT_EQ(select_layers(e, {"t"}, LayerCriterion::kFisherJ).at("t").encoder_id, "a");
}

TEST(SelectLayers, SingleCandidateAndWindow) {
  std::vector<LayerDiagnostics> one{diag(4, 0.0)};
  EXPECT_EQ(select_layers(one, {"t"}, LayerCriterion::kFisherJ).at("t").layer, 4);
  // layers below the upper half are never chosen, whatever their score
  std::vector<LayerDiagnostics> d{diag(2, 9.0), diag(4, 0.1)};
  const auto sel = select_layers(d, {"t"}, LayerCriterion::kFisherJ);
  EXPECT_GE(sel.at("t").layer, upper_half_start(8));
  std::vector<LayerDiagnostics> low{diag(1, 1.0)};
  EXPECT_THROW(select_layers(low, {"t"}, LayerCriterion::kFisherJ), DataError);
}

TEST(SelectLayers, CvAucNeedsInputs) {
  std::vector<LayerDiagnostics> d{diag(6, 0.3)};
  EXPECT_THROW(select_layers(d, {"t"}, LayerCriterion::kCvAuc), ConfigError);
}

TEST(SelectLayers, Constraints) {
  std::vector<LayerDiagnostics> d{diag(6, 0.9, Pooling::kLastToken, "a"), diag(6, 0.1, Pooling::kLastToken, "b")};
  SelectionConstraints c;
  c.encoder_for_target["t"] = "b";
  EXPECT_EQ(select_layers(d, {"t"}, LayerCriterion::kFisherJ, nullptr, c).at("t").encoder_id, "b");
  SelectionConstraints s;
  s.single_encoder = "b";
  EXPECT_EQ(select_layers(d, {"t"}, LayerCriterion::kFisherJ, nullptr, s).at("t").encoder_id, "b");
}

TEST(ProbeLayers, PlantedLayerWinsUnderBothCriteria) {
  SynthSpec spec;
  spec.n_queries = 1200;
  spec.hidden_dim = 16;
  spec.num_layers = 6;
  spec.signal_layer = 4;
  spec.num_targets = 2;
  spec.base_rates = {0.5, 0.6};
  spec.seed = 3;
  const auto data = generate(spec);
  const auto& store = data.stores.begin()->second;
  const std::vector<double> f{0.85, 0.15};
  const auto split = stratified_split(data.labels, f, 1);
  ProbeOptions opt;
  opt.pca_dim = 8;
  auto diags = probe_layers(store, data.labels, data.pool, split, opt);
  // layers 3..6, two poolings each
  EXPECT_EQ(diags.size(), 8u);
  for (const auto& d : diags) {
    EXPECT_GE(d.layer, 3);
    EXPECT_GE(d.d_eff, 1.0);
    EXPECT_LE(d.d_eff, 16.0);
    EXPECT_EQ(d.sample_count, split.train_ids.size());
    for (const auto& [t, terms] : d.fisher) EXPECT_GE(terms.j, 0.0);
  }
  const auto targets = data.pool.model_ids();
  const auto by_fisher = select_layers(diags, targets, LayerCriterion::kFisherJ);
  CvInputs cv;
  cv.stores = &data.stores;
  cv.labels = &data.labels;
  cv.split = &split;
  cv.options.pca_dim = 8;
  const auto by_cv = select_layers(diags, targets, LayerCriterion::kCvAuc, &cv);
  for (const auto& t : targets) {
    EXPECT_EQ(by_fisher.at(t).layer, 4) << t;
    EXPECT_EQ(by_fisher.at(t).pooling, Pooling::kLastToken);
    EXPECT_EQ(by_cv.at(t).layer, 4) << t;
  }
}

TEST(ProbeLayers, SingleLayerStoreYieldsOneEntryPerPooling) {
  ActivationManifest m;
  m.encoder_id = "one";
  m.num_layers = 1;
  m.hidden_dim = 4;
  std::map<MatrixKey, MatrixF> mats;
  for (int i = 0; i < 40; ++i) m.query_ids.push_back("q" + std::to_string(i));
  for (Pooling p : {Pooling::kLastToken, Pooling::kMean}) {
    MatrixKey key{1, p};
    m.matrices.push_back({key, canonical_matrix_name(key)});
    mats[key] = random_matrix(40, 4, static_cast<std::uint64_t>(p) + 1).cast<float>();
  }
  const auto store = ActivationStore::from_matrices(m, mats);
  std::vector<std::uint8_t> cells;
  for (int i = 0; i < 40; ++i) {
    cells.push_back(static_cast<std::uint8_t>(i % 2));
    cells.push_back(static_cast<std::uint8_t>(i % 3 == 0));
  }
  const LabelTable labels({"a", "b"}, m.query_ids, std::vector<std::string>(40, "x"),
                          std::vector<std::int64_t>(40, 1), cells);
  ModelPool pool;
  pool.models = {{"a", 1, 1, 1}, {"b", 1, 1, 1}};
  SplitAssignment split;
  split.train_ids = m.query_ids;
  ProbeOptions opt;
  opt.pca_dim = 3;
  EXPECT_EQ(probe_layers(store, labels, pool, split, opt).size(), 2u);
  opt.pca_dim = 10;
  EXPECT_THROW(probe_layers(store, labels, pool, split, opt), DataError);
}
