#include <cstdio>
#include <sstream>

#include "pfrouter/evaluation.hpp"

namespace pfrouter {

namespace {

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, v);
  return buf;
}

std::string fmt_opt(const char* pattern, const std::optional<double>& v) { return v ? fmt(pattern, *v) : "-"; }

std::string pct(std::size_t part, std::size_t total) {
  return total == 0 ? "-" : fmt("%.2f", 100.0 * static_cast<double>(part) / static_cast<double>(total));
}

}  // namespace

std::string render_report(const EvalReport& r) {
  std::ostringstream out;

  out << "## Consensus regimes (n=" << r.num_queries << ")\n";
  out << "regime\tcount\tshare_pct\n";
  const std::size_t n = r.regimes.total();
  out << "all_correct\t" << r.regimes.all_correct << '\t' << pct(r.regimes.all_correct, n) << '\n';
  out << "all_incorrect\t" << r.regimes.all_incorrect << '\t' << pct(r.regimes.all_incorrect, n) << '\n';
  out << "disagreement\t" << r.regimes.disagreement << '\t' << pct(r.regimes.disagreement, n) << '\n';
  out << "oracle_accuracy\t" << fmt("%.4f", r.headroom.oracle_accuracy) << '\n';
  out << '\n';

  out << "## Per-target metrics (routing delta at lambda=1)\n";
  out << "model\tbase_rate\tauc\tbrier\tn_to\tacc_to\tacc_away\tcost_to\tcost_away\n";
  for (std::size_t k = 0; k < r.targets.size(); ++k) {
    const auto& t = r.targets[k];
    out << t.model_id << '\t' << fmt("%.4f", t.base_rate) << '\t' << fmt_opt("%.4f", t.auc) << '\t'
        << fmt("%.4f", t.brier);
    if (k < r.routing.per_model.size()) {
      const auto& d = r.routing.per_model[k];
      out << '\t' << d.n_to << '\t' << fmt_opt("%.4f", d.acc_to) << '\t' << fmt_opt("%.4f", d.acc_away) << '\t'
          << fmt_opt("%.6g", d.cost_to) << '\t' << fmt_opt("%.6g", d.cost_away);
    }
    out << '\n';
  }
  out << "mean\t-\t" << fmt_opt("%.4f", r.mean_auc) << '\t' << fmt("%.4f", r.mean_brier) << "\t-\t"
      << fmt("%.4f", r.routing.weighted_acc_to) << '\t' << fmt("%.4f", r.routing.weighted_acc_away) << "\t-\t-\n";
  out << '\n';

  const auto& h = r.headroom;
  out << "## Headroom (router point: " << to_string(r.router_point_rule) << ", lambda=" << fmt("%.4g", h.router_lambda)
      << ")\n";
  out << "best_model\tbest_acc\trouter_acc\toracle_acc\tacc_gain_pp\theadroom_pct\tcost_savings_pct\n";
  out << h.best_model_id << '\t' << fmt("%.4f", h.best_model_accuracy) << '\t' << fmt("%.4f", h.router_accuracy)
      << '\t' << fmt("%.4f", h.oracle_accuracy) << '\t' << fmt("%.2f", h.acc_gain_pp) << '\t'
      << fmt("%.2f", 100.0 * h.headroom_captured) << '\t' << fmt("%.2f", 100.0 * h.cost_savings) << '\n';
  out << '\n';

  out << "## Global routing metrics (lambda step " << fmt("%g", r.lambda_step) << ", " << r.sweep_raw_points
      << " grid points, " << r.router_curve.size() << " distinct)\n";
  out << "curve\tp_auccc\tmdp_auccc\toracle_distance\tdelta_oracle_distance_pct\n";
  out << "model_only_pareto\t" << fmt("%.4f", r.p_auccc_models) << "\t-\t" << fmt("%.4f", r.oracle_distance_models)
      << "\t-\n";
  const std::string delta =
      r.oracle_distance_models > 0.0
          ? fmt("%.2f", 100.0 * (r.oracle_distance_models - r.oracle_distance_router) / r.oracle_distance_models)
          : "-";
  out << "router\t" << fmt("%.4f", r.p_auccc_router) << '\t' << fmt("%+.4f", r.mdp_auccc) << '\t'
      << fmt("%.4f", r.oracle_distance_router) << '\t' << delta << '\n';
  return out.str();
}

}  // namespace pfrouter
