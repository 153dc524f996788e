#include <algorithm>
#include <utility>

#include "pfrouter/predictors.hpp"

namespace pfrouter {

PredictionMatrix knn_predict(const KnnIndex& index, const Matrix& X_query, int k, KnnMode mode,
                             std::vector<std::string> query_ids) {
  const Eigen::Index n = index.vectors.rows();
  if (n == 0) throw DataError("knn: empty index");
  if (k < 1 || k > n) throw ConfigError("knn: k must lie in [1, " + std::to_string(n) + "]");
  if (index.labels.rows() != n) throw DataError("knn: label rows do not match index vectors");
  if (X_query.cols() != index.vectors.cols()) throw DataError("knn: query dimension mismatch");

  PredictionMatrix out;
  out.query_ids = std::move(query_ids);
  out.target_order = index.target_order;
  out.p_hat.resize(X_query.rows(), index.labels.cols());

  std::vector<std::pair<double, Eigen::Index>> dist(static_cast<std::size_t>(n));
  for (Eigen::Index q = 0; q < X_query.rows(); ++q) {
    for (Eigen::Index i = 0; i < n; ++i) {
      dist[static_cast<std::size_t>(i)] = {(index.vectors.row(i) - X_query.row(q)).squaredNorm(), i};
    }
    // pair ordering breaks distance ties by insertion index
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (Eigen::Index t = 0; t < index.labels.cols(); ++t) {
      double num = 0.0;
      double den = 0.0;
      for (int j = 0; j < k; ++j) {
        const auto [d, i] = dist[static_cast<std::size_t>(j)];
        const double w = mode == KnnMode::kMajority ? 1.0 : 1.0 / (d + kKnnEpsilon);
        num += w * index.labels(i, t);
        den += w;
      }
      out.p_hat(q, t) = num / den;
    }
  }
  return out;
}

}  // namespace pfrouter
