#include <set>

#include <gtest/gtest.h>

#include "pfrouter/routing.hpp"
#include "test_util.hpp"

using namespace pfrouter;

namespace {

struct Instance {
  Matrix p;
  CostMatrix costs;
  Matrix outcomes;
};

/// Random instance with coarse values so that ties in p̂ and cost occur.
Instance random_instance(Eigen::Index n, Eigen::Index k, std::uint64_t seed) {
  Rng rng(seed);
  Instance in;
  in.p.resize(n, k);
  in.costs.c.resize(n, k);
  in.outcomes.resize(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    in.costs.query_ids.push_back("q" + std::to_string(i));
    for (Eigen::Index j = 0; j < k; ++j) {
      in.p(i, j) = static_cast<double>(rng.below(5)) / 4.0;
      in.costs.c(i, j) = 0.5 + static_cast<double>(rng.below(6)) * 0.25;
      in.outcomes(i, j) = rng.uniform() < in.p(i, j);
    }
  }
  // anchors from a sub-range so that clipping is exercised
  in.costs.c_min = 0.75;
  in.costs.c_max = 1.5;
  return in;
}

std::size_t argmax_with_tiebreak(const Matrix& p, const Matrix& c, Eigen::Index row) {
  std::size_t best = 0;
  for (Eigen::Index k = 1; k < p.cols(); ++k) {
    const auto b = static_cast<Eigen::Index>(best);
    if (p(row, k) > p(row, b) || (p(row, k) == p(row, b) && c(row, k) < c(row, b))) best = static_cast<std::size_t>(k);
  }
  return best;
}

std::size_t argmin_cost(const Matrix& c, Eigen::Index row) {
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < c.cols(); ++k) {
    if (c(row, k) < c(row, best)) best = k;
  }
  return static_cast<std::size_t>(best);
}

}  // namespace

TEST(EstimateCost, Arithmetic) {
  ModelPool pool;
  pool.models = {{"a", 3, 15, 500000}, {"b", 0, 0, 0}};
  const Vector c = estimate_cost(pool, 1000000);
  EXPECT_DOUBLE_EQ(c(0), 10.5);
  EXPECT_DOUBLE_EQ(c(1), 0.0);
  pool.models[0].rate_in *= 2;
  pool.models[0].rate_out *= 2;
  EXPECT_DOUBLE_EQ(estimate_cost(pool, 1000000)(0), 21.0);
  EXPECT_THROW(estimate_cost(pool, -1), DataError);
}

TEST(CostMatrix, AnchorsComeFromTrainRows) {
  ModelPool pool;
  pool.models = {{"a", 1, 0, 0}, {"b", 2, 0, 0}};
  const auto labels = parse_label_csv("query_id,benchmark,input_tokens,a,b\nq1,x,1000000,1,0\nq2,x,3000000,0,1\n");
  const std::vector<std::string> all{"q1", "q2"};
  const std::vector<std::string> train{"q1"};
  const auto c = build_cost_matrix(pool, labels, all, train);
  EXPECT_DOUBLE_EQ(c.c_min, 1.0);
  EXPECT_DOUBLE_EQ(c.c_max, 2.0);
  EXPECT_DOUBLE_EQ(c.normalized(0, 1), 1.0);
  // q2 costs 3 and 6, beyond the train range
  EXPECT_DOUBLE_EQ(c.normalized(1, 0), 1.0);
  const auto all_anchor = build_cost_matrix(pool, labels, all, {});
  EXPECT_DOUBLE_EQ(all_anchor.c_max, 6.0);
  CostMatrix flat = c;
  flat.c_max = flat.c_min;
  EXPECT_EQ(flat.normalized(1, 1), 0.0);
}

TEST(Route, HandArithmetic) {
  PredictionMatrix p;
  p.query_ids = {"q"};
  p.target_order = {"m1", "m2"};
  p.p_hat.resize(1, 2);
  p.p_hat << 0.9, 0.8;
  CostMatrix c;
  c.c.resize(1, 2);
  c.c << 1.0, 0.0;
  c.c_min = 0.0;
  c.c_max = 1.0;
  const auto d = route(p, c, 0.5);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_NEAR(d[0].scores[0], -0.05, 1e-15);
  EXPECT_NEAR(d[0].scores[1], 0.4, 1e-15);
  EXPECT_EQ(d[0].chosen, 1u);
  EXPECT_EQ(d[0].query_id, "q");
  EXPECT_THROW(route(p, c, 1.01), ConfigError);
  EXPECT_THROW(route(p, c, -0.01), ConfigError);
}

TEST(Route, TieBreaksOnCostThenPoolOrder) {
  Matrix p(2, 3);
  p << 0.5, 0.5, 0.5,  //
      0.7, 0.7, 0.1;
  CostMatrix c;
  c.c.resize(2, 3);
  c.c << 0.3, 0.2, 0.2,  //
      0.4, 0.4, 0.1;
  c.c_min = c.c_max = 0.2;  // degenerate range: scores reduce to λ·p̂
  EXPECT_EQ(route_choices(p, c, 1.0), (std::vector<std::size_t>{1, 0}));
}

TEST(Route, LambdaEndpointsOverRandomInstances) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto in = random_instance(8, 2 + static_cast<Eigen::Index>(seed % 4), seed);
    const auto at1 = route_choices(in.p, in.costs, 1.0);
    const auto at0 = route_choices(in.p, in.costs, 0.0);
    for (Eigen::Index r = 0; r < in.p.rows(); ++r) {
      ASSERT_EQ(at1[static_cast<std::size_t>(r)], argmax_with_tiebreak(in.p, in.costs.c, r)) << seed;
      ASSERT_EQ(at0[static_cast<std::size_t>(r)], argmin_cost(in.costs.c, r)) << seed;
    }
  }
}

TEST(Route, RaisingOneModelsConfidenceNeverLosesItTheQuery) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto in = random_instance(10, 3, seed);
    const double lambda = static_cast<double>(seed % 11) / 10.0;
    const auto before = route_choices(in.p, in.costs, lambda);
    Matrix bumped = in.p;
    bumped.col(1).array() += 0.2;
    const auto after = route_choices(bumped, in.costs, lambda);
    for (std::size_t r = 0; r < before.size(); ++r) {
      if (before[r] == 1) EXPECT_EQ(after[r], 1u);
    }
  }
}

TEST(Route, ConstantCostShiftKeepsCheapestChoice) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto in = random_instance(10, 3, seed);
    const auto before = route_choices(in.p, in.costs, 0.0);
    in.costs.c.array() += 0.37;
    in.costs.c_min = in.costs.c.minCoeff();
    in.costs.c_max = in.costs.c.maxCoeff();
    EXPECT_EQ(route_choices(in.p, in.costs, 0.0), before);
  }
}

TEST(LambdaGrid, SizesAndErrors) {
  EXPECT_EQ(lambda_grid_intervals(1e-2) + 1, 101u);
  EXPECT_EQ(lambda_grid_intervals(1e-3) + 1, 1001u);
  EXPECT_EQ(lambda_grid_intervals(1e-5) + 1, 100001u);
  EXPECT_EQ(lambda_grid_intervals(0.25), 4u);
  EXPECT_THROW(lambda_grid_intervals(0.3), ConfigError);
  EXPECT_THROW(lambda_grid_intervals(0.0), ConfigError);
  EXPECT_THROW(lambda_grid_intervals(1.5), ConfigError);
}

TEST(Sweep, GridAndLambdaOneAccuracy) {
  const auto in = random_instance(50, 3, 4);
  const auto s = sweep_lambda(in.p, in.costs, in.outcomes, 1e-2);
  ASSERT_EQ(s.raw_count(), 101u);
  EXPECT_DOUBLE_EQ(s.raw.front().lambda, 0.0);
  EXPECT_DOUBLE_EQ(s.raw.back().lambda, 1.0);
  EXPECT_NEAR(s.raw[37].lambda, 0.37, 1e-15);
  double acc = 0.0;
  for (Eigen::Index r = 0; r < 50; ++r) acc += in.outcomes(r, static_cast<Eigen::Index>(argmax_with_tiebreak(in.p, in.costs.c, r)));
  EXPECT_DOUBLE_EQ(s.raw.back().accuracy, acc / 50.0);
  const double cmax = in.costs.c.rowwise().maxCoeff().mean();
  for (const auto& p : s.raw) {
    EXPECT_GE(p.accuracy, 0.0);
    EXPECT_LE(p.accuracy, 1.0);
    EXPECT_LE(p.mean_cost, cmax + 1e-12);
  }
  for (std::size_t i = 1; i < s.points.size(); ++i) {
    EXPECT_FALSE(s.points[i].mean_cost == s.points[i - 1].mean_cost &&
                 s.points[i].accuracy == s.points[i - 1].accuracy);
  }
  const auto threaded = sweep_lambda(in.p, in.costs, in.outcomes, 1e-2, 4);
  ASSERT_EQ(threaded.points.size(), s.points.size());
  for (std::size_t i = 0; i < s.points.size(); ++i) EXPECT_EQ(threaded.points[i].mean_cost, s.points[i].mean_cost);
}

TEST(Sweep, SingleModelCollapsesToOnePoint) {
  auto in = random_instance(20, 1, 2);
  const auto s = sweep_lambda(in.p, in.costs, in.outcomes, 1e-2);
  EXPECT_EQ(s.raw_count(), 101u);
  EXPECT_EQ(s.points.size(), 1u);
}

TEST(Formats, DecisionsAndOperatingPoints) {
  RoutingDecision d{"q1", {0.25, -0.5}, 1, 0.5};
  const auto line = format_decisions_jsonl({d}, {"a", "b"});
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.at("query_id"), "q1");
  EXPECT_EQ(j.at("chosen_model"), "b");
  EXPECT_EQ(j.at("scores").size(), 2u);
  const auto tsv = format_operating_points_tsv({OperatingPoint{0.5, 1.25, 0.75}});
  EXPECT_EQ(tsv.substr(0, tsv.find('\n')), "lambda\tmean_cost\taccuracy");
}
