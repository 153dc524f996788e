#include "pfrouter/routing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

namespace pfrouter {

Vector estimate_cost(const ModelPool& pool, std::int64_t input_tokens) {
  if (input_tokens < 0) throw DataError("input token count must be nonnegative");
  Vector c(static_cast<Eigen::Index>(pool.size()));
  for (std::size_t k = 0; k < pool.size(); ++k) {
    const auto& m = pool.models[k];
    c(static_cast<Eigen::Index>(k)) = static_cast<double>(input_tokens) / 1e6 * m.rate_in +
                                      static_cast<double>(m.median_out_tokens) / 1e6 * m.rate_out;
  }
  return c;
}

double CostMatrix::normalized(Eigen::Index row, Eigen::Index model) const {
  if (!(c_max > c_min)) return 0.0;
  return std::clamp((c(row, model) - c_min) / (c_max - c_min), 0.0, 1.0);
}

CostMatrix build_cost_matrix(const ModelPool& pool, const LabelTable& labels, std::span<const std::string> ids,
                             std::span<const std::string> train_ids) {
  CostMatrix out;
  out.query_ids.assign(ids.begin(), ids.end());
  out.c.resize(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(pool.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out.c.row(static_cast<Eigen::Index>(i)) =
        estimate_cost(pool, labels.input_tokens(labels.row_of(ids[i]))).transpose();
  }
  const auto anchor_ids = train_ids.empty() ? ids : train_ids;
  if (anchor_ids.empty()) throw DataError("cost anchors need at least one query");
  out.c_min = std::numeric_limits<double>::infinity();
  out.c_max = -std::numeric_limits<double>::infinity();
  for (const auto& id : anchor_ids) {
    const Vector c = estimate_cost(pool, labels.input_tokens(labels.row_of(id)));
    out.c_min = std::min(out.c_min, c.minCoeff());
    out.c_max = std::max(out.c_max, c.maxCoeff());
  }
  return out;
}

namespace {

void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
}

void check_shapes(const Matrix& p_hat, const CostMatrix& costs) {
  if (p_hat.rows() != costs.c.rows() || p_hat.cols() != costs.c.cols()) {
    throw DataError("prediction and cost matrices differ in shape");
  }
}

std::size_t choose(const Matrix& p_hat, const CostMatrix& costs, Eigen::Index row, double lambda, double* scores) {
  std::size_t best = 0;
  double best_score = 0.0;
  for (Eigen::Index k = 0; k < p_hat.cols(); ++k) {
    const double s = lambda * p_hat(row, k) - (1.0 - lambda) * costs.normalized(row, k);
    if (scores != nullptr) scores[k] = s;
    if (k == 0 || s > best_score ||
        (s == best_score && costs.c(row, k) < costs.c(row, static_cast<Eigen::Index>(best)))) {
      best = static_cast<std::size_t>(k);
      best_score = s;
    }
  }
  return best;
}

}  // namespace

std::vector<std::size_t> route_choices(const Matrix& p_hat, const CostMatrix& costs, double lambda) {
  check_lambda(lambda);
  check_shapes(p_hat, costs);
  std::vector<std::size_t> out(static_cast<std::size_t>(p_hat.rows()));
  for (Eigen::Index r = 0; r < p_hat.rows(); ++r) out[static_cast<std::size_t>(r)] = choose(p_hat, costs, r, lambda, nullptr);
  return out;
}

std::vector<RoutingDecision> route(const PredictionMatrix& predictions, const CostMatrix& costs, double lambda) {
  check_lambda(lambda);
  check_shapes(predictions.p_hat, costs);
  std::vector<RoutingDecision> out(static_cast<std::size_t>(predictions.p_hat.rows()));
  for (Eigen::Index r = 0; r < predictions.p_hat.rows(); ++r) {
    auto& d = out[static_cast<std::size_t>(r)];
    if (static_cast<std::size_t>(r) < predictions.query_ids.size()) d.query_id = predictions.query_ids[static_cast<std::size_t>(r)];
    d.scores.resize(static_cast<std::size_t>(predictions.p_hat.cols()));
    d.chosen = choose(predictions.p_hat, costs, r, lambda, d.scores.data());
    d.lambda = lambda;
  }
  return out;
}

std::size_t lambda_grid_intervals(double step) {
  if (!(step > 0.0 && step <= 1.0)) throw ConfigError("lambda grid step must lie in (0, 1]");
  const double intervals = std::round(1.0 / step);
  if (std::abs(intervals * step - 1.0) > 1e-9) {
    throw ConfigError("lambda grid step must divide 1 evenly");
  }
  return static_cast<std::size_t>(intervals);
}

SweepResult sweep_lambda(const Matrix& p_hat, const CostMatrix& costs, const Matrix& outcomes, double step,
                         int threads) {
  check_shapes(p_hat, costs);
  if (outcomes.rows() != p_hat.rows() || outcomes.cols() != p_hat.cols()) {
    throw DataError("outcome matrix does not match predictions");
  }
  if (p_hat.rows() == 0) throw DataError("sweep needs at least one query");
  const std::size_t intervals = lambda_grid_intervals(step);
  SweepResult result;
  result.step = step;
  result.raw.resize(intervals + 1);
  parallel_for(intervals + 1, threads, [&](std::size_t i) {
    const double lambda = static_cast<double>(i) / static_cast<double>(intervals);
    double cost = 0.0;
    double correct = 0.0;
    for (Eigen::Index r = 0; r < p_hat.rows(); ++r) {
      const auto k = static_cast<Eigen::Index>(choose(p_hat, costs, r, lambda, nullptr));
      cost += costs.c(r, k);
      correct += outcomes(r, k);
    }
    const double n = static_cast<double>(p_hat.rows());
    result.raw[i] = OperatingPoint{lambda, cost / n, correct / n};
  });
  for (const auto& p : result.raw) {
    if (!result.points.empty() && result.points.back().mean_cost == p.mean_cost &&
        result.points.back().accuracy == p.accuracy) {
      continue;
    }
    result.points.push_back(p);
  }
  return result;
}

std::string format_decisions_jsonl(const std::vector<RoutingDecision>& decisions,
                                   const std::vector<std::string>& model_ids) {
  std::ostringstream out;
  for (const auto& d : decisions) {
    nlohmann::ordered_json j;
    j["query_id"] = d.query_id;
    j["chosen_model"] = model_ids.at(d.chosen);
    j["lambda"] = d.lambda;
    j["scores"] = d.scores;
    out << j.dump() << '\n';
  }
  return out.str();
}

std::string format_operating_points_tsv(const std::vector<OperatingPoint>& points) {
  std::ostringstream out;
  out << "lambda\tmean_cost\taccuracy\n";
  char buf[96];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%.10g\t%.17g\t%.17g\n", p.lambda, p.mean_cost, p.accuracy);
    out << buf;
  }
  return out.str();
}

}  // namespace pfrouter
