#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfrouter/common.hpp"
#include "pfrouter/ingest.hpp"
#include "pfrouter/routing.hpp"

namespace pfrouter {

struct RegimeCounts {
  std::size_t all_correct = 0;
  std::size_t all_incorrect = 0;
  std::size_t disagreement = 0;

  std::size_t total() const { return all_correct + all_incorrect + disagreement; }
};

/// Partition of the rows of a 0/1 outcome matrix by pool-wide agreement.
RegimeCounts count_regimes(const Matrix& outcomes);

/// Fraction of rows where at least one model is correct.
double oracle_accuracy(const Matrix& outcomes);
double oracle_accuracy(const LabelTable& labels);

/// Accuracy and cost of model k on the queries routed to it and away from it.
/// Fields are empty when the corresponding set of queries is empty.
struct RoutingDelta {
  std::string model_id;
  std::size_t n_to = 0;
  std::optional<double> acc_to;
  std::optional<double> acc_away;
  std::optional<double> cost_to;
  std::optional<double> cost_away;
};

struct RoutingDeltaSummary {
  std::vector<RoutingDelta> per_model;
  /// Σ n_to·acc_to / Σ n_to over models that received traffic.
  double weighted_acc_to = 0.0;
  /// Σ n_away·acc_away / Σ n_away over models that lost traffic.
  double weighted_acc_away = 0.0;
};

RoutingDeltaSummary routing_delta(std::span<const std::size_t> choices, const Matrix& outcomes, const Matrix& costs,
                                  const std::vector<std::string>& model_ids);

struct NormalizationAnchors {
  double c_min = 0.0;
  double c_max = 0.0;
  double acc_floor = 0.0;
  double acc_ceil = 0.0;

  void validate() const;
};

/// Cheapest and most expensive model mean cost; worst model accuracy and
/// oracle accuracy unless overridden.
NormalizationAnchors default_anchors(std::span<const OperatingPoint> model_points, double oracle_acc,
                                     std::optional<double> acc_floor = std::nullopt,
                                     std::optional<double> acc_ceil = std::nullopt);

struct CurvePoint {
  double invcost_norm = 0.0;
  double acc_norm = 0.0;
  double mean_cost = 0.0;
  double accuracy = 0.0;
  double lambda = 0.0;
};

/// invcost = (1/C̄ − 1/C_max)/(1/C_min − 1/C_max), acc = (acc − floor)/(ceil − floor);
/// result sorted by invcost_norm (stable).
std::vector<CurvePoint> normalize_points(std::span<const OperatingPoint> points, const NormalizationAnchors& anchors);

/// Area under the left-padded upper envelope, clamped to [0, 1].
double p_auccc(std::span<const CurvePoint> points);

/// Drops every point weakly dominated by another (≥ on both axes, > on one).
/// Exact duplicates keep their first occurrence.
std::vector<CurvePoint> pareto_filter(std::span<const CurvePoint> points);

/// One (mean cost, accuracy) point per model, in pool order. λ is NaN.
std::vector<OperatingPoint> model_operating_points(const Matrix& outcomes, const Matrix& costs);

/// P-AUCCC(router) − P-AUCCC(Pareto-filtered models).
double mdp_auccc(std::span<const CurvePoint> router_points, std::span<const CurvePoint> model_points);

double oracle_distance(std::span<const CurvePoint> points, double corner_invcost = 1.0, double corner_acc = 1.0);

struct HeadroomSummary {
  double router_accuracy = 0.0;
  double router_cost = 0.0;
  double router_lambda = 0.0;
  std::string best_model_id;
  double best_model_accuracy = 0.0;
  std::string most_expensive_model_id;
  double most_expensive_cost = 0.0;
  double oracle_accuracy = 0.0;
  double acc_gain_pp = 0.0;
  double headroom_captured = 0.0;
  double cost_savings = 0.0;
};

HeadroomSummary headroom_and_savings(const OperatingPoint& router, std::span<const OperatingPoint> model_points,
                                     const std::vector<std::string>& model_ids, double oracle_acc);

enum class RouterPointRule { kLambdaOne, kMaxAccuracy };
std::string_view to_string(RouterPointRule rule);
RouterPointRule parse_router_point_rule(std::string_view text);

struct EvalOptions {
  double lambda_step = 1e-2;
  RouterPointRule router_point = RouterPointRule::kLambdaOne;
  /// Oracle distance over the raw grid instead of the deduplicated sweep.
  bool oracle_distance_raw = false;
  std::optional<double> acc_floor;
  std::optional<double> acc_ceil;
  double corner_invcost = 1.0;
  double corner_acc = 1.0;
  int threads = 1;
};

struct TargetMetrics {
  std::string model_id;
  std::optional<double> auc;  // absent when the test labels are single-class
  double brier = 0.0;
  double base_rate = 0.0;
};

struct EvalReport {
  std::size_t num_queries = 0;
  std::vector<std::string> model_ids;
  std::vector<TargetMetrics> targets;
  std::optional<double> mean_auc;
  double mean_brier = 0.0;
  RoutingDeltaSummary routing;
  RegimeCounts regimes;
  NormalizationAnchors anchors;
  double lambda_step = 0.0;
  std::size_t sweep_raw_points = 0;
  std::vector<CurvePoint> router_curve;
  std::vector<CurvePoint> model_curve;
  std::vector<CurvePoint> model_pareto;
  double p_auccc_router = 0.0;
  double p_auccc_models = 0.0;
  double mdp_auccc = 0.0;
  double oracle_distance_router = 0.0;
  double oracle_distance_models = 0.0;
  RouterPointRule router_point_rule = RouterPointRule::kLambdaOne;
  HeadroomSummary headroom;

  nlohmann::ordered_json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Full metric suite for one router on one evaluation set. `p_hat`,
/// `outcomes` and `costs.c` share rows (queries) and columns (pool models).
EvalReport evaluate_router(const Matrix& p_hat, const Matrix& outcomes, const CostMatrix& costs,
                           const std::vector<std::string>& model_ids, const EvalOptions& options = {});

/// Table-shaped plain text: per-target AUC/Brier with routing delta, regime
/// counts, headroom summary and global curve metrics.
std::string render_report(const EvalReport& report);

}  // namespace pfrouter
