#include "pfrouter/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pfrouter/metrics.hpp"

namespace pfrouter {

RegimeCounts count_regimes(const Matrix& outcomes) {
  RegimeCounts counts;
  for (Eigen::Index r = 0; r < outcomes.rows(); ++r) {
    switch (consensus_regime_of_outcomes(outcomes.row(r))) {
      case Regime::kAllCorrect: ++counts.all_correct; break;
      case Regime::kAllIncorrect: ++counts.all_incorrect; break;
      case Regime::kDisagreement: ++counts.disagreement; break;
    }
  }
  return counts;
}

double oracle_accuracy(const Matrix& outcomes) {
  if (outcomes.rows() == 0) throw DataError("oracle accuracy of an empty table");
  std::size_t hit = 0;
  for (Eigen::Index r = 0; r < outcomes.rows(); ++r) {
    if (outcomes.row(r).maxCoeff() > 0.5) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(outcomes.rows());
}

double oracle_accuracy(const LabelTable& labels) { return oracle_accuracy(labels.outcomes(labels.query_ids())); }

RoutingDeltaSummary routing_delta(std::span<const std::size_t> choices, const Matrix& outcomes, const Matrix& costs,
                                  const std::vector<std::string>& model_ids) {
  const auto n = static_cast<Eigen::Index>(choices.size());
  if (outcomes.rows() != n || costs.rows() != n) throw DataError("routing delta: decisions do not cover all queries");
  if (outcomes.cols() != static_cast<Eigen::Index>(model_ids.size()) || costs.cols() != outcomes.cols()) {
    throw DataError("routing delta: model count mismatch");
  }
  RoutingDeltaSummary out;
  double to_num = 0.0;
  double to_den = 0.0;
  double away_num = 0.0;
  double away_den = 0.0;
  for (Eigen::Index k = 0; k < outcomes.cols(); ++k) {
    RoutingDelta d;
    d.model_id = model_ids[static_cast<std::size_t>(k)];
    double acc_to = 0.0, acc_away = 0.0, cost_to = 0.0, cost_away = 0.0;
    for (Eigen::Index r = 0; r < n; ++r) {
      if (choices[static_cast<std::size_t>(r)] == static_cast<std::size_t>(k)) {
        ++d.n_to;
        acc_to += outcomes(r, k);
        cost_to += costs(r, k);
      } else {
        acc_away += outcomes(r, k);
        cost_away += costs(r, k);
      }
    }
    const std::size_t n_away = static_cast<std::size_t>(n) - d.n_to;
    if (d.n_to > 0) {
      d.acc_to = acc_to / static_cast<double>(d.n_to);
      d.cost_to = cost_to / static_cast<double>(d.n_to);
      to_num += acc_to;
      to_den += static_cast<double>(d.n_to);
    }
    if (n_away > 0) {
      d.acc_away = acc_away / static_cast<double>(n_away);
      d.cost_away = cost_away / static_cast<double>(n_away);
      away_num += acc_away;
      away_den += static_cast<double>(n_away);
    }
    out.per_model.push_back(std::move(d));
  }
  out.weighted_acc_to = to_den > 0.0 ? to_num / to_den : 0.0;
  out.weighted_acc_away = away_den > 0.0 ? away_num / away_den : 0.0;
  return out;
}

void NormalizationAnchors::validate() const {
  if (!(c_min > 0.0)) throw DataError("normalization anchors: C_min must be positive");
  if (!(c_min < c_max)) throw DataError("normalization anchors: C_min must be below C_max");
  if (!(acc_floor < acc_ceil)) throw DataError("normalization anchors: accuracy floor must be below ceiling");
}

NormalizationAnchors default_anchors(std::span<const OperatingPoint> model_points, double oracle_acc,
                                     std::optional<double> acc_floor, std::optional<double> acc_ceil) {
  if (model_points.empty()) throw DataError("normalization anchors need at least one model");
  NormalizationAnchors a;
  a.c_min = std::numeric_limits<double>::infinity();
  a.c_max = -std::numeric_limits<double>::infinity();
  double worst = std::numeric_limits<double>::infinity();
  for (const auto& p : model_points) {
    a.c_min = std::min(a.c_min, p.mean_cost);
    a.c_max = std::max(a.c_max, p.mean_cost);
    worst = std::min(worst, p.accuracy);
  }
  a.acc_floor = acc_floor.value_or(worst);
  a.acc_ceil = acc_ceil.value_or(oracle_acc);
  a.validate();
  return a;
}

std::vector<CurvePoint> normalize_points(std::span<const OperatingPoint> points, const NormalizationAnchors& anchors) {
  anchors.validate();
  const double inv_span = 1.0 / anchors.c_min - 1.0 / anchors.c_max;
  const double acc_span = anchors.acc_ceil - anchors.acc_floor;
  std::vector<CurvePoint> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    if (!(p.mean_cost > 0.0)) throw DataError("normalize: mean cost must be positive");
    out.push_back(CurvePoint{(1.0 / p.mean_cost - 1.0 / anchors.c_max) / inv_span,
                             (p.accuracy - anchors.acc_floor) / acc_span, p.mean_cost, p.accuracy, p.lambda});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const CurvePoint& a, const CurvePoint& b) { return a.invcost_norm < b.invcost_norm; });
  return out;
}

double p_auccc(std::span<const CurvePoint> points) {
  if (points.empty()) throw DataError("p_auccc: empty curve");
  std::vector<std::pair<double, double>> curve;
  curve.reserve(points.size() + 1);
  for (const auto& p : points) curve.emplace_back(p.invcost_norm, p.acc_norm);
  std::sort(curve.begin(), curve.end());
  // upper envelope: one point per distinct invcost, keeping the best accuracy
  std::vector<std::pair<double, double>> env;
  for (const auto& [x, y] : curve) {
    if (!env.empty() && env.back().first == x) {
      env.back().second = std::max(env.back().second, y);
    } else {
      env.emplace_back(x, y);
    }
  }
  if (env.back().first <= 0.0) return 0.0;
  // restrict to x ≥ 0, interpolating across the origin or padding to it
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < env.size(); ++i) {
    const auto [x, y] = env[i];
    if (x < 0.0) continue;
    if (pts.empty()) {
      if (i > 0) {
        const auto [x0, y0] = env[i - 1];
        pts.emplace_back(0.0, y0 + (y - y0) * (0.0 - x0) / (x - x0));
      } else {
        pts.emplace_back(0.0, y);
      }
    }
    pts.emplace_back(x, y);
  }
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    area += 0.5 * (pts[i].second + pts[i - 1].second) * (pts[i].first - pts[i - 1].first);
  }
  return std::clamp(area, 0.0, 1.0);
}

std::vector<CurvePoint> pareto_filter(std::span<const CurvePoint> points) {
  std::vector<CurvePoint> out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    bool dominated = false;
    for (std::size_t j = 0; j < points.size() && !dominated; ++j) {
      if (i == j) continue;
      const auto& q = points[j];
      const bool weakly = q.invcost_norm >= p.invcost_norm && q.acc_norm >= p.acc_norm;
      const bool strictly = q.invcost_norm > p.invcost_norm || q.acc_norm > p.acc_norm;
      dominated = weakly && (strictly || j < i);
    }
    if (!dominated) out.push_back(p);
  }
  return out;
}

std::vector<OperatingPoint> model_operating_points(const Matrix& outcomes, const Matrix& costs) {
  if (outcomes.rows() == 0) throw DataError("model operating points: no queries");
  if (outcomes.rows() != costs.rows() || outcomes.cols() != costs.cols()) {
    throw DataError("model operating points: outcome and cost shapes differ");
  }
  std::vector<OperatingPoint> out;
  for (Eigen::Index k = 0; k < outcomes.cols(); ++k) {
    out.push_back(OperatingPoint{std::numeric_limits<double>::quiet_NaN(), costs.col(k).mean(), outcomes.col(k).mean()});
  }
  return out;
}

double mdp_auccc(std::span<const CurvePoint> router_points, std::span<const CurvePoint> model_points) {
  const auto frontier = pareto_filter(model_points);
  return p_auccc(router_points) - p_auccc(frontier);
}

double oracle_distance(std::span<const CurvePoint> points, double corner_invcost, double corner_acc) {
  if (points.empty()) throw DataError("oracle distance: empty curve");
  double total = 0.0;
  for (const auto& p : points) total += std::hypot(p.invcost_norm - corner_invcost, p.acc_norm - corner_acc);
  return total / static_cast<double>(points.size());
}

HeadroomSummary headroom_and_savings(const OperatingPoint& router, std::span<const OperatingPoint> model_points,
                                     const std::vector<std::string>& model_ids, double oracle_acc) {
  if (model_points.empty() || model_points.size() != model_ids.size()) {
    throw DataError("headroom: model points and ids disagree");
  }
  HeadroomSummary h;
  h.router_accuracy = router.accuracy;
  h.router_cost = router.mean_cost;
  h.router_lambda = router.lambda;
  h.oracle_accuracy = oracle_acc;
  std::size_t best = 0;
  std::size_t priciest = 0;
  for (std::size_t k = 1; k < model_points.size(); ++k) {
    if (model_points[k].accuracy > model_points[best].accuracy) best = k;
    if (model_points[k].mean_cost > model_points[priciest].mean_cost) priciest = k;
  }
  h.best_model_id = model_ids[best];
  h.best_model_accuracy = model_points[best].accuracy;
  h.most_expensive_model_id = model_ids[priciest];
  h.most_expensive_cost = model_points[priciest].mean_cost;
  const double gap = oracle_acc - h.best_model_accuracy;
  if (!(gap > 0.0)) throw DataError("headroom: oracle accuracy does not exceed the best single model");
  if (!(h.most_expensive_cost > 0.0)) throw DataError("headroom: most expensive model has zero cost");
  h.acc_gain_pp = (router.accuracy - h.best_model_accuracy) * 100.0;
  h.headroom_captured = (router.accuracy - h.best_model_accuracy) / gap;
  h.cost_savings = 1.0 - router.mean_cost / h.most_expensive_cost;
  return h;
}

std::string_view to_string(RouterPointRule rule) {
  return rule == RouterPointRule::kLambdaOne ? "lambda_one" : "max_accuracy";
}

RouterPointRule parse_router_point_rule(std::string_view text) {
  if (text == "lambda_one") return RouterPointRule::kLambdaOne;
  if (text == "max_accuracy") return RouterPointRule::kMaxAccuracy;
  throw ConfigError("unknown router point rule '" + std::string(text) + "'");
}

EvalReport evaluate_router(const Matrix& p_hat, const Matrix& outcomes, const CostMatrix& costs,
                           const std::vector<std::string>& model_ids, const EvalOptions& options) {
  if (p_hat.rows() != outcomes.rows() || p_hat.cols() != outcomes.cols()) {
    throw DataError("evaluate: predictions and outcomes differ in shape");
  }
  if (static_cast<std::size_t>(p_hat.cols()) != model_ids.size()) throw DataError("evaluate: model count mismatch");
  EvalReport rep;
  rep.num_queries = static_cast<std::size_t>(p_hat.rows());
  rep.model_ids = model_ids;

  rep.targets.resize(model_ids.size());
  parallel_for(model_ids.size(), options.threads, [&](std::size_t k) {
    const auto col = static_cast<Eigen::Index>(k);
    std::vector<double> scores(p_hat.col(col).data(), p_hat.col(col).data() + p_hat.rows());
    std::vector<std::uint8_t> y(scores.size());
    for (std::size_t r = 0; r < y.size(); ++r) y[r] = outcomes(static_cast<Eigen::Index>(r), col) > 0.5 ? 1 : 0;
    TargetMetrics& t = rep.targets[k];
    t.model_id = model_ids[k];
    t.brier = brier(scores, y);
    t.base_rate = outcomes.col(col).mean();
    if (t.base_rate > 0.0 && t.base_rate < 1.0) t.auc = roc_auc(scores, y);
  });
  double auc_sum = 0.0;
  std::size_t auc_n = 0;
  for (const auto& t : rep.targets) {
    rep.mean_brier += t.brier / static_cast<double>(rep.targets.size());
    if (t.auc) {
      auc_sum += *t.auc;
      ++auc_n;
    }
  }
  if (auc_n > 0) rep.mean_auc = auc_sum / static_cast<double>(auc_n);

  rep.routing = routing_delta(route_choices(p_hat, costs, 1.0), outcomes, costs.c, model_ids);
  rep.regimes = count_regimes(outcomes);

  const SweepResult sweep = sweep_lambda(p_hat, costs, outcomes, options.lambda_step, options.threads);
  rep.lambda_step = options.lambda_step;
  rep.sweep_raw_points = sweep.raw_count();
  const auto models = model_operating_points(outcomes, costs.c);
  const double oracle = oracle_accuracy(outcomes);
  rep.anchors = default_anchors(models, oracle, options.acc_floor, options.acc_ceil);
  rep.router_curve = normalize_points(sweep.points, rep.anchors);
  rep.model_curve = normalize_points(models, rep.anchors);
  rep.model_pareto = pareto_filter(rep.model_curve);
  rep.p_auccc_router = p_auccc(rep.router_curve);
  rep.p_auccc_models = p_auccc(rep.model_pareto);
  rep.mdp_auccc = rep.p_auccc_router - rep.p_auccc_models;
  rep.oracle_distance_router =
      options.oracle_distance_raw
          ? oracle_distance(normalize_points(sweep.raw, rep.anchors), options.corner_invcost, options.corner_acc)
          : oracle_distance(rep.router_curve, options.corner_invcost, options.corner_acc);
  rep.oracle_distance_models = oracle_distance(rep.model_pareto, options.corner_invcost, options.corner_acc);

  rep.router_point_rule = options.router_point;
  OperatingPoint chosen = sweep.raw.back();
  if (options.router_point == RouterPointRule::kMaxAccuracy) {
    for (const auto& p : sweep.raw) {
      if (p.accuracy > chosen.accuracy || (p.accuracy == chosen.accuracy && p.mean_cost < chosen.mean_cost)) {
        chosen = p;
      }
    }
  }
  rep.headroom = headroom_and_savings(chosen, models, model_ids, oracle);
  return rep;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

ordered_json opt(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

std::optional<double> opt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

ordered_json curve_json(const std::vector<CurvePoint>& points) {
  ordered_json arr = ordered_json::array();
  for (const auto& p : points) {
    ordered_json j;
    j["lambda"] = std::isnan(p.lambda) ? ordered_json(nullptr) : ordered_json(p.lambda);
    j["mean_cost"] = p.mean_cost;
    j["accuracy"] = p.accuracy;
    j["invcost_norm"] = p.invcost_norm;
    j["acc_norm"] = p.acc_norm;
    arr.push_back(std::move(j));
  }
  return arr;
}

std::vector<CurvePoint> curve_from(const json& arr) {
  std::vector<CurvePoint> out;
  for (const auto& j : arr) {
    CurvePoint p;
    p.lambda = j.at("lambda").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("lambda").get<double>();
    p.mean_cost = j.at("mean_cost").get<double>();
    p.accuracy = j.at("accuracy").get<double>();
    p.invcost_norm = j.at("invcost_norm").get<double>();
    p.acc_norm = j.at("acc_norm").get<double>();
    out.push_back(p);
  }
  return out;
}

}  // namespace

ordered_json EvalReport::to_json() const {
  ordered_json j;
  j["num_queries"] = num_queries;
  j["model_ids"] = model_ids;
  ordered_json per_target = ordered_json::array();
  for (const auto& t : targets) {
    per_target.push_back({{"model_id", t.model_id}, {"auc", opt(t.auc)}, {"brier", t.brier}, {"base_rate", t.base_rate}});
  }
  j["targets"] = per_target;
  j["mean_auc"] = opt(mean_auc);
  j["mean_brier"] = mean_brier;
  ordered_json rd = ordered_json::array();
  for (const auto& d : routing.per_model) {
    rd.push_back({{"model_id", d.model_id},
                  {"n_to", d.n_to},
                  {"acc_to", opt(d.acc_to)},
                  {"acc_away", opt(d.acc_away)},
                  {"cost_to", opt(d.cost_to)},
                  {"cost_away", opt(d.cost_away)}});
  }
  j["routing_delta"] = {{"per_model", rd},
                        {"weighted_acc_to", routing.weighted_acc_to},
                        {"weighted_acc_away", routing.weighted_acc_away}};
  j["regimes"] = {{"all_correct", regimes.all_correct},
                  {"all_incorrect", regimes.all_incorrect},
                  {"disagreement", regimes.disagreement}};
  j["anchors"] = {{"c_min", anchors.c_min},
                  {"c_max", anchors.c_max},
                  {"acc_floor", anchors.acc_floor},
                  {"acc_ceil", anchors.acc_ceil}};
  j["lambda_step"] = lambda_step;
  j["sweep_raw_points"] = sweep_raw_points;
  j["p_auccc_router"] = p_auccc_router;
  j["p_auccc_models"] = p_auccc_models;
  j["mdp_auccc"] = mdp_auccc;
  j["oracle_distance_router"] = oracle_distance_router;
  j["oracle_distance_models"] = oracle_distance_models;
  j["router_point_rule"] = std::string(to_string(router_point_rule));
  j["headroom"] = {{"router_lambda", headroom.router_lambda},
                   {"router_accuracy", headroom.router_accuracy},
                   {"router_cost", headroom.router_cost},
                   {"best_model_id", headroom.best_model_id},
                   {"best_model_accuracy", headroom.best_model_accuracy},
                   {"most_expensive_model_id", headroom.most_expensive_model_id},
                   {"most_expensive_cost", headroom.most_expensive_cost},
                   {"oracle_accuracy", headroom.oracle_accuracy},
                   {"acc_gain_pp", headroom.acc_gain_pp},
                   {"headroom_captured", headroom.headroom_captured},
                   {"cost_savings", headroom.cost_savings}};
  j["router_curve"] = curve_json(router_curve);
  j["model_curve"] = curve_json(model_curve);
  j["model_pareto"] = curve_json(model_pareto);
  return j;
}

EvalReport EvalReport::from_json(const json& j) {
  try {
    EvalReport r;
    r.num_queries = j.at("num_queries").get<std::size_t>();
    r.model_ids = j.at("model_ids").get<std::vector<std::string>>();
    for (const auto& t : j.at("targets")) {
      r.targets.push_back(TargetMetrics{t.at("model_id").get<std::string>(), opt_from(t.at("auc")),
                                        t.at("brier").get<double>(), t.at("base_rate").get<double>()});
    }
    r.mean_auc = opt_from(j.at("mean_auc"));
    r.mean_brier = j.at("mean_brier").get<double>();
    const auto& rd = j.at("routing_delta");
    for (const auto& d : rd.at("per_model")) {
      r.routing.per_model.push_back(RoutingDelta{d.at("model_id").get<std::string>(), d.at("n_to").get<std::size_t>(),
                                                 opt_from(d.at("acc_to")), opt_from(d.at("acc_away")),
                                                 opt_from(d.at("cost_to")), opt_from(d.at("cost_away"))});
    }
    r.routing.weighted_acc_to = rd.at("weighted_acc_to").get<double>();
    r.routing.weighted_acc_away = rd.at("weighted_acc_away").get<double>();
    const auto& g = j.at("regimes");
    r.regimes = RegimeCounts{g.at("all_correct").get<std::size_t>(), g.at("all_incorrect").get<std::size_t>(),
                             g.at("disagreement").get<std::size_t>()};
    const auto& a = j.at("anchors");
    r.anchors = NormalizationAnchors{a.at("c_min").get<double>(), a.at("c_max").get<double>(),
                                     a.at("acc_floor").get<double>(), a.at("acc_ceil").get<double>()};
    r.lambda_step = j.at("lambda_step").get<double>();
    r.sweep_raw_points = j.at("sweep_raw_points").get<std::size_t>();
    r.p_auccc_router = j.at("p_auccc_router").get<double>();
    r.p_auccc_models = j.at("p_auccc_models").get<double>();
    r.mdp_auccc = j.at("mdp_auccc").get<double>();
    r.oracle_distance_router = j.at("oracle_distance_router").get<double>();
    r.oracle_distance_models = j.at("oracle_distance_models").get<double>();
    r.router_point_rule = parse_router_point_rule(j.at("router_point_rule").get<std::string>());
    const auto& h = j.at("headroom");
    r.headroom.router_lambda = h.at("router_lambda").get<double>();
    r.headroom.router_accuracy = h.at("router_accuracy").get<double>();
    r.headroom.router_cost = h.at("router_cost").get<double>();
    r.headroom.best_model_id = h.at("best_model_id").get<std::string>();
    r.headroom.best_model_accuracy = h.at("best_model_accuracy").get<double>();
    r.headroom.most_expensive_model_id = h.at("most_expensive_model_id").get<std::string>();
    r.headroom.most_expensive_cost = h.at("most_expensive_cost").get<double>();
    r.headroom.oracle_accuracy = h.at("oracle_accuracy").get<double>();
    r.headroom.acc_gain_pp = h.at("acc_gain_pp").get<double>();
    r.headroom.headroom_captured = h.at("headroom_captured").get<double>();
    r.headroom.cost_savings = h.at("cost_savings").get<double>();
    r.router_curve = curve_from(j.at("router_curve"));
    r.model_curve = curve_from(j.at("model_curve"));
    r.model_pareto = curve_from(j.at("model_pareto"));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed evaluation report: ") + e.what());
  }
}

}  // namespace pfrouter
