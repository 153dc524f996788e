#pragma once

#include <span>
#include <string>
#include <vector>

#include "pfrouter/common.hpp"
#include "pfrouter/ingest.hpp"
#include "pfrouter/predictors.hpp"

namespace pfrouter {

/// C_k = (n_in / 1e6)·r_in,k + (ñ_out,k / 1e6)·r_out,k for every pool model.
Vector estimate_cost(const ModelPool& pool, std::int64_t input_tokens);

/// Estimated cost per (query, model) plus the normalization anchors taken
/// from the training rows.
struct CostMatrix {
  std::vector<std::string> query_ids;
  Matrix c;  // [queries × K]
  double c_min = 0.0;
  double c_max = 0.0;

  /// (C − C_min)/(C_max − C_min) clipped to [0, 1]; all zeros when C_max == C_min.
  double normalized(Eigen::Index row, Eigen::Index model) const;
};

/// Costs for `ids`; anchors are min/max over `train_ids` (over `ids` when empty).
CostMatrix build_cost_matrix(const ModelPool& pool, const LabelTable& labels, std::span<const std::string> ids,
                             std::span<const std::string> train_ids);

struct RoutingDecision {
  std::string query_id;
  std::vector<double> scores;
  std::size_t chosen = 0;
  double lambda = 0.0;
};

/// s = λ·p̂ − (1−λ)·C̃, argmax per query. Ties go to the lower raw cost, then
/// to the earlier pool model.
std::vector<RoutingDecision> route(const PredictionMatrix& predictions, const CostMatrix& costs, double lambda);

/// The model chosen for every row, without materializing score vectors.
std::vector<std::size_t> route_choices(const Matrix& p_hat, const CostMatrix& costs, double lambda);

struct OperatingPoint {
  double lambda = 0.0;
  double mean_cost = 0.0;
  double accuracy = 0.0;
};

struct SweepResult {
  double step = 0.0;
  std::vector<OperatingPoint> raw;     // one per grid λ
  std::vector<OperatingPoint> points;  // consecutive duplicates collapsed

  std::size_t raw_count() const { return raw.size(); }
};

/// Number of grid intervals for a step, i.e. the grid is {i/N : i = 0..N}.
std::size_t lambda_grid_intervals(double step);

/// Routes at every λ on the inclusive grid and records realized accuracy and
/// mean cost. `outcomes` is the 0/1 correctness matrix aligned with p_hat.
SweepResult sweep_lambda(const Matrix& p_hat, const CostMatrix& costs, const Matrix& outcomes, double step,
                         int threads = 1);

std::string format_decisions_jsonl(const std::vector<RoutingDecision>& decisions,
                                   const std::vector<std::string>& model_ids);
std::string format_operating_points_tsv(const std::vector<OperatingPoint>& points);

}  // namespace pfrouter
