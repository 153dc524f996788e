#include <algorithm>
#include <cmath>

#include <Eigen/Cholesky>

#include "pfrouter/features.hpp"
#include "pfrouter/metrics.hpp"
#include "pfrouter/predictors.hpp"

namespace pfrouter {

namespace {

double log1pexp(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double objective(const Matrix& X, std::span<const std::uint8_t> y, double lambda, const Vector& w, double b) {
  const Vector z = (X * w).array() + b;
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) total += log1pexp(z(i)) - y[static_cast<std::size_t>(i)] * z(i);
  return total / static_cast<double>(z.size()) + 0.5 * lambda * w.squaredNorm();
}

void check_inputs(const Matrix& X, std::span<const std::uint8_t> y) {
  if (static_cast<std::size_t>(X.rows()) != y.size()) throw DataError("logistic: row/label count mismatch");
  std::size_t positives = 0;
  for (auto v : y) positives += v;
  if (positives == 0 || positives == y.size()) throw DataError("logistic regression requires both classes");
}

}  // namespace

Vector LogisticModel::decision(const Matrix& X) const { return (X * weights).array() + bias; }

Vector logistic_l2_gradient(const Matrix& X, std::span<const std::uint8_t> y, double lambda_l2, const Vector& weights,
                            double bias) {
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  Vector residual(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    residual(i) = stable_sigmoid(X.row(i).dot(weights) + bias) - y[static_cast<std::size_t>(i)];
  }
  Vector g(d + 1);
  g.head(d) = X.transpose() * residual / static_cast<double>(n) + lambda_l2 * weights;
  g(d) = residual.mean();
  return g;
}

LogisticModel fit_logistic_l2(const Matrix& X, std::span<const std::uint8_t> y, double lambda_l2, double tolerance,
                              int max_iterations) {
  if (!(lambda_l2 > 0)) throw ConfigError("lambda_l2 must be positive");
  check_inputs(X, y);
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();

  LogisticModel model;
  model.weights = Vector::Zero(d);
  double base_rate = 0.0;
  for (auto v : y) base_rate += v;
  base_rate /= static_cast<double>(n);
  model.bias = std::log(base_rate / (1.0 - base_rate));

  double f = objective(X, y, lambda_l2, model.weights, model.bias);
  for (int iter = 0; iter <= max_iterations; ++iter) {
    const Vector g = logistic_l2_gradient(X, y, lambda_l2, model.weights, model.bias);
    model.gradient_norm = g.norm();
    model.iterations = iter;
    if (model.gradient_norm <= tolerance) return model;
    if (iter == max_iterations) break;

    // Hessian of the objective in (w, b).
    Vector curvature(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double p = stable_sigmoid(X.row(i).dot(model.weights) + model.bias);
      curvature(i) = p * (1.0 - p) / static_cast<double>(n);
    }
    Matrix H(d + 1, d + 1);
    H.topLeftCorner(d, d) = X.transpose() * curvature.asDiagonal() * X;
    H.topLeftCorner(d, d).diagonal().array() += lambda_l2;
    H.topRightCorner(d, 1) = X.transpose() * curvature;
    H.bottomLeftCorner(1, d) = H.topRightCorner(d, 1).transpose();
    H(d, d) = curvature.sum() + 1e-12;
    const Vector step = H.ldlt().solve(g);

    double t = 1.0;
    const double slope = g.dot(step);
    Vector w_new;
    double b_new = 0.0;
    double f_new = f;
    for (int ls = 0; ls < 60; ++ls) {
      w_new = model.weights - t * step.head(d);
      b_new = model.bias - t * step(d);
      f_new = objective(X, y, lambda_l2, w_new, b_new);
      if (f_new <= f - 1e-4 * t * slope) break;
      t *= 0.5;
    }
    model.weights = w_new;
    model.bias = b_new;
    f = f_new;
  }
  throw NumericError("logistic regression did not converge; final gradient norm " +
                     std::to_string(model.gradient_norm));
}

std::vector<int> stratified_folds(std::span<const std::uint8_t> y, int folds, std::uint64_t seed) {
  if (folds < 2) throw ConfigError("need at least 2 folds");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < y.size(); ++i) by_class[y[i] ? 1 : 0].push_back(i);
  const std::size_t minority = std::min(by_class[0].size(), by_class[1].size());
  if (minority < static_cast<std::size_t>(folds)) {
    throw DataError("minority class count " + std::to_string(minority) + " is below the fold count " +
                    std::to_string(folds));
  }
  std::vector<int> assignment(y.size(), 0);
  for (int c = 0; c < 2; ++c) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    rng.shuffle(by_class[c]);
    for (std::size_t i = 0; i < by_class[c].size(); ++i) {
      assignment[by_class[c][i]] = static_cast<int>(i % static_cast<std::size_t>(folds));
    }
  }
  return assignment;
}

double cv_auc_for_layer(const Matrix& X, std::span<const std::uint8_t> y, const CvOptions& options) {
  if (static_cast<std::size_t>(X.rows()) != y.size()) throw DataError("cv_auc: row/label count mismatch");
  const auto fold_of = stratified_folds(y, options.folds, options.seed);
  double total = 0.0;
  for (int fold = 0; fold < options.folds; ++fold) {
    std::vector<Eigen::Index> train_rows, test_rows;
    std::vector<std::uint8_t> y_train, y_test;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (fold_of[i] == fold) {
        test_rows.push_back(static_cast<Eigen::Index>(i));
        y_test.push_back(y[i]);
      } else {
        train_rows.push_back(static_cast<Eigen::Index>(i));
        y_train.push_back(y[i]);
      }
    }
    Matrix x_train = X(train_rows, Eigen::all);
    Matrix x_test = X(test_rows, Eigen::all);
    if (options.pca_dim > 0) {
      const auto bound = std::min<Eigen::Index>(x_train.rows() - 1, x_train.cols());
      const int dim = static_cast<int>(std::min<Eigen::Index>(options.pca_dim, bound));
      const PcaModel pca = fit_pca(x_train, dim, options.seed);
      x_train = project(pca, x_train);
      x_test = project(pca, x_test);
    }
    const Eigen::RowVectorXd mean = x_train.colwise().mean();
    Eigen::RowVectorXd scale =
        ((x_train.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(x_train.rows() - 1))
            .sqrt();
    for (Eigen::Index c = 0; c < scale.size(); ++c) {
      if (!(scale(c) > 0)) scale(c) = 1.0;
    }
    x_train = (x_train.rowwise() - mean).array().rowwise() / scale.array();
    x_test = (x_test.rowwise() - mean).array().rowwise() / scale.array();
    const LogisticModel model = fit_logistic_l2(x_train, y_train, options.lambda_l2);
    const Vector scores = model.decision(x_test);
    total += roc_auc(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())), y_test);
  }
  return total / static_cast<double>(options.folds);
}

}  // namespace pfrouter
