// Acceptance suite: one PASS/FAIL line per criterion, detail lines indented.
// Exit status is nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pfrouter/binary_io.hpp"
#include "pfrouter/evaluation.hpp"
#include "pfrouter/geometry.hpp"
#include "pfrouter/metrics.hpp"
#include "pfrouter/pipeline.hpp"
#include "pfrouter/synth.hpp"

namespace fs = std::filesystem;
using namespace pfrouter;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> details;

  void check(bool ok, const std::string& what) {
    details.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
    pass = pass && ok;
  }
  void note(const std::string& what) { details.push_back("     " + what); }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// --- oracles ---------------------------------------------------------------

double pair_count_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      den += 1;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return num / den;
}

double pairwise_cosine(const Matrix& X) {
  double sum = 0.0;
  double pairs = 0.0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < X.rows(); ++j) {
      sum += X.row(i).dot(X.row(j)) / (X.row(i).norm() * X.row(j).norm());
      pairs += 1;
    }
  }
  return sum / pairs;
}

double dense_riemann(std::vector<CurvePoint> pts) {
  std::sort(pts.begin(), pts.end(), [](auto a, auto b) { return a.invcost_norm < b.invcost_norm; });
  std::vector<double> xs{0.0}, ys{pts.front().acc_norm};
  for (const auto& p : pts) {
    xs.push_back(p.invcost_norm);
    ys.push_back(p.acc_norm);
  }
  const int n = 1'000'000;
  const double h = xs.back() / n;
  double area = 0.0;
  std::size_t seg = 1;
  for (int i = 0; i < n; ++i) {
    const double x = (i + 0.5) * h;
    while (xs[seg] < x) ++seg;
    const double t = (x - xs[seg - 1]) / (xs[seg] - xs[seg - 1]);
    area += h * (ys[seg - 1] + t * (ys[seg] - ys[seg - 1]));
  }
  return area;
}

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// --- criteria ----------------------------------------------------------------

Outcome metric_oracles() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(2024);
  std::size_t auc_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    const std::uint64_t levels = 2 + rng.below(30);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(levels)) / static_cast<double>(levels);
      y[i] = rng.uniform() < 0.5;
    }
    y[0] = 1;
    y[1] = 0;
    if (roc_auc(s, y) != pair_count_auc(s, y)) ++auc_mismatch;
  }
  o.check(auc_mismatch == 0, "roc_auc == pair counting on 1000 instances (n <= 200): " +
                                 std::to_string(auc_mismatch) + " mismatches");

  double worst_aniso = 0.0;
  for (Eigen::Index n : {2, 3, 17, 64, 65, 100, 150, 200}) {
    Matrix x = gaussian(n, 8, rng);
    x.array() += 0.25;
    worst_aniso = std::max(worst_aniso, std::abs(anisotropy(x) - pairwise_cosine(x)));
  }
  o.check(worst_aniso <= 1e-6, "anisotropy vs pairwise loop, max |diff| = " + fmt("%.3g", worst_aniso));

  double worst_area = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<CurvePoint> pts;
    for (int i = 0; i < 5; ++i) pts.push_back(CurvePoint{0.02 + 0.96 * rng.uniform(), rng.uniform(), 0, 0, 0});
    worst_area = std::max(worst_area, std::abs(p_auccc(pts) - dense_riemann(pts)));
  }
  o.check(worst_area <= 1e-9, "p_auccc vs dense Riemann sum, max |diff| = " + fmt("%.3g", worst_area));
  const double secs = seconds_since(t0);
  o.check(secs < 10.0, "runtime " + fmt("%.2f", secs) + " s < 10 s");
  return o;
}

Outcome trivial_anchors() {
  Outcome o;
  const std::vector<std::uint8_t> y{1, 0, 1, 1, 0};
  o.check(brier(std::vector<double>(5, 0.5), y) == 0.25, "Brier of constant 0.5 == 0.25");
  o.check(roc_auc(std::vector<double>(5, 0.3), y) == 0.5, "AUC of tied scores == 0.5");
  const std::vector<CurvePoint> one{CurvePoint{1.0, 0.37, 0, 0, 0}};
  o.check(p_auccc(one) == 0.37, "single-point P-AUCCC == acc_norm");
  const NormalizationAnchors a{0.5, 2.0, 0.3, 0.8};
  const auto n = normalize_points(std::vector<OperatingPoint>{{0, 0.5, 0.8}, {0, 2.0, 0.3}}, a);
  o.check(n[1].invcost_norm == 1.0 && n[0].invcost_norm == 0.0, "C_min -> 1 and C_max -> 0");
  return o;
}

Outcome gradient() {
  Outcome o;
  const auto t0 = Clock::now();
  TrunkNetConfig cfg;
  cfg.trunk_hidden_sizes = {8};
  double worst = 0.0;
  std::size_t params = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto r = gradient_check(cfg, seed);
    worst = std::max(worst, r.max_relative_error);
    params = r.parameters_checked;
  }
  o.check(worst <= 1e-3, "max relative error " + fmt("%.3g", worst) + " over " + std::to_string(params) +
                             " parameters x 5 seeds");
  const double secs = seconds_since(t0);
  o.check(secs < 5.0, "runtime " + fmt("%.2f", secs) + " s < 5 s");
  return o;
}

RunConfig config_for(const fs::path& data, const SynthDataset& d, const fs::path& out) {
  RunConfig c;
  for (const auto& [id, store] : d.stores) c.activations[id] = data / "activations" / id;
  c.labels = data / "labels.csv";
  c.pool = data / "pool.json";
  c.output_dir = out;
  c.pca_dim = std::min(kDefaultPcaDim, d.metadata.spec.hidden_dim);
  c.seed = d.metadata.spec.seed;
  c.threads = 1;
  c.trunk.threads = 1;
  return c;
}

double max_numeric_diff(const nlohmann::json& a, const nlohmann::json& b, bool& structure_ok) {
  if (a.is_number() && b.is_number()) return std::abs(a.get<double>() - b.get<double>());
  if (a.type() != b.type() || a.size() != b.size()) {
    structure_ok = false;
    return 0.0;
  }
  double worst = 0.0;
  if (a.is_object()) {
    for (auto it = a.begin(); it != a.end(); ++it) {
      if (!b.contains(it.key())) {
        structure_ok = false;
        continue;
      }
      worst = std::max(worst, max_numeric_diff(*it, b.at(it.key()), structure_ok));
    }
  } else if (a.is_array()) {
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, max_numeric_diff(a[i], b[i], structure_ok));
  } else if (a != b) {
    structure_ok = false;
  }
  return worst;
}

struct PlantedRun {
  fs::path data_dir;
  SynthDataset data;
  RunConfig config;
  PipelineResult result;
};

Outcome planted(const fs::path& work, PlantedRun& run) {
  Outcome o;
  SynthSpec spec;  // n 4000, d 64, L 8, signal layer 6, K 3, strength 4, noise 1
  o.note("spec: n=" + std::to_string(spec.n_queries) + " d=" + std::to_string(spec.hidden_dim) +
         " L=" + std::to_string(spec.num_layers) + " signal_layer=" + std::to_string(spec.signal_layer) +
         " K=" + std::to_string(spec.num_targets) + " strength=" + fmt("%.1f", spec.strength(0)) +
         " noise=" + fmt("%.1f", spec.noise_std));
  run.data_dir = work / "planted";
  fs::remove_all(run.data_dir);
  run.data = generate(spec);
  write_dataset(run.data, run.data_dir);
  run.config = config_for(run.data_dir, run.data, run.data_dir / "run1");
  const auto t0 = Clock::now();
  run.result = run_pipeline(run.config);
  const double secs = seconds_since(t0);

  bool all_six = true;
  for (const auto& [t, c] : run.result.selection.choices) {
    o.note("fisher selection " + t + ": layer " + std::to_string(c.layer) + " " + std::string(to_string(c.pooling)) +
           " J=" + fmt("%.4f", c.score));
    all_six = all_six && c.layer == spec.signal_layer;
  }
  o.check(all_six, "(a) Fisher J selects layer " + std::to_string(spec.signal_layer) + " for every target");

  const auto& rep = run.result.report;
  double bayes = 0.0;
  for (const auto& t : run.data.metadata.targets) {
    const double b = bayes_optimal_auc(t.strength, t.bias, spec.noise_std, 100000, derive_seed(spec.seed, 77));
    o.note("bayes-optimal AUC " + t.model_id + " = " + fmt("%.4f", b));
    bayes += b;
  }
  bayes /= static_cast<double>(run.data.metadata.targets.size());
  const double auc = rep.mean_auc.value_or(0.0);
  o.check(auc >= 0.85, "(b) mean test AUC " + fmt("%.4f", auc) + " >= 0.85");
  o.check(std::abs(auc - bayes) <= 0.05,
          "(b) |mean AUC - Bayes AUC " + fmt("%.4f", bayes) + "| = " + fmt("%.4f", std::abs(auc - bayes)) + " <= 0.05");

  // cv_auc criterion on the same split and diagnostics
  const auto ctx = RunContext::open(run.config);
  const auto split = load_split(ctx);
  auto diags = run.result.diagnostics;
  CvInputs cv;
  cv.stores = &ctx.stores();
  cv.labels = &ctx.labels();
  cv.split = &split;
  cv.options.folds = run.config.cv_folds;
  cv.options.lambda_l2 = run.config.cv_lambda_l2;
  cv.options.pca_dim = run.config.pca_dim;
  cv.options.seed = run.config.seed;
  const auto by_cv = select_layers(diags, ctx.pool().model_ids(), LayerCriterion::kCvAuc, &cv);
  bool same = true;
  for (const auto& [t, c] : by_cv.choices) {
    const auto& f = run.result.selection.at(t);
    o.note("cv_auc selection " + t + ": layer " + std::to_string(c.layer) + " " + std::string(to_string(c.pooling)) +
           " auc=" + fmt("%.4f", c.score));
    same = same && c.layer == f.layer;
  }
  o.check(same, "(c) 5-fold cv_auc selects the same layer as Fisher J");
  o.check(secs < 180.0, "pipeline runtime " + fmt("%.1f", secs) + " s < 180 s single-threaded");
  o.note("p_auccc router " + fmt("%.4f", rep.p_auccc_router) + ", models " + fmt("%.4f", rep.p_auccc_models) +
         ", mdp " + fmt("%+.4f", rep.mdp_auccc) + ", headroom " + fmt("%.4f", rep.headroom.headroom_captured));
  return o;
}

Outcome null_control(const fs::path& work) {
  Outcome o;
  SynthSpec spec;
  spec.signal_strength = {0.0};
  const fs::path dir = work / "null";
  fs::remove_all(dir);
  const auto data = generate(spec);
  write_dataset(data, dir);
  const auto result = run_pipeline(config_for(dir, data, dir / "run"));
  const auto& rep = result.report;
  const double auc = rep.mean_auc.value_or(0.0);
  o.check(auc >= 0.45 && auc <= 0.55, "mean test AUC " + fmt("%.4f", auc) + " in [0.45, 0.55]");
  o.check(std::abs(rep.mdp_auccc) <= 0.03, "|MDP-AUCCC| = " + fmt("%.4f", std::abs(rep.mdp_auccc)) + " <= 0.03");
  o.note("p_auccc router " + fmt("%.4f", rep.p_auccc_router) + ", models " + fmt("%.4f", rep.p_auccc_models));
  return o;
}

Outcome routing_semantics() {
  Outcome o;
  Rng rng(99);
  std::size_t bad1 = 0, bad0 = 0, rows = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(20));
    const Eigen::Index k = 2 + static_cast<Eigen::Index>(rng.below(5));
    Matrix p(n, k);
    CostMatrix c;
    c.c.resize(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < k; ++j) {
        p(i, j) = static_cast<double>(rng.below(6)) / 5.0;
        c.c(i, j) = static_cast<double>(rng.below(8)) * 0.1;
      }
    }
    c.c_min = 0.1 * static_cast<double>(rng.below(3));
    c.c_max = c.c_min + 0.1 * static_cast<double>(rng.below(6));
    const auto at1 = route_choices(p, c, 1.0);
    const auto at0 = route_choices(p, c, 0.0);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index amax = 0, amin = 0;
      for (Eigen::Index j = 1; j < k; ++j) {
        if (p(i, j) > p(i, amax) || (p(i, j) == p(i, amax) && c.c(i, j) < c.c(i, amax))) amax = j;
        if (c.c(i, j) < c.c(i, amin)) amin = j;
      }
      bad1 += at1[static_cast<std::size_t>(i)] != static_cast<std::size_t>(amax);
      bad0 += at0[static_cast<std::size_t>(i)] != static_cast<std::size_t>(amin);
      ++rows;
    }
  }
  o.check(bad1 == 0, "lambda=1 == argmax p_hat on " + std::to_string(rows) + " rows of 1000 instances");
  o.check(bad0 == 0, "lambda=0 == argmin cost on the same rows");
  return o;
}

Outcome sweep_grid() {
  Outcome o;
  Matrix p(3, 2);
  p << 0.9, 0.2, 0.1, 0.8, 0.5, 0.5;
  CostMatrix c;
  c.c.resize(3, 2);
  c.c << 1, 2, 1, 2, 1, 2;
  c.c_min = 1;
  c.c_max = 2;
  const auto s = sweep_lambda(p, c, Matrix::Ones(3, 2), 1e-2);
  o.check(s.raw_count() == 101, "step 1e-2 -> " + std::to_string(s.raw_count()) + " raw grid points");
  return o;
}

Outcome dominating_router() {
  Outcome o;
  // three models on a convex-ish frontier; the router improves on each
  const std::vector<OperatingPoint> models{{NAN, 1.0, 0.55}, {NAN, 2.0, 0.62}, {NAN, 4.0, 0.70}};
  const double oracle = 0.85;
  const auto anchors = default_anchors(models, oracle);
  std::vector<OperatingPoint> router;
  for (const auto& m : models) router.push_back({0.5, m.mean_cost * 0.9, m.accuracy + 0.05});
  const auto rc = normalize_points(router, anchors);
  const auto mc = normalize_points(models, anchors);
  bool strict = true;
  for (std::size_t i = 0; i < rc.size(); ++i) {
    strict = strict && rc[i].invcost_norm > mc[i].invcost_norm && rc[i].acc_norm > mc[i].acc_norm;
  }
  o.check(strict, "each router point strictly dominates its model point");
  const double mdp = mdp_auccc(rc, mc);
  o.check(mdp > 0.0, "MDP-AUCCC " + fmt("%.4f", mdp) + " > 0");
  const auto h = headroom_and_savings(router.back(), models, {"a", "b", "c"}, oracle);
  o.check(h.headroom_captured > 0.0 && h.headroom_captured <= 1.0,
          "headroom_captured " + fmt("%.4f", h.headroom_captured) + " in (0, 1]");

  // oracle replay: p_hat equals the true outcomes
  Rng rng(5);
  const Eigen::Index n = 500;
  Matrix outcomes(n, 3);
  CostMatrix costs;
  costs.c.resize(n, 3);
  const double acc[3] = {0.5, 0.6, 0.7};
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < 3; ++k) {
      outcomes(i, k) = rng.uniform() < acc[k];
      costs.c(i, k) = (1.0 + static_cast<double>(k)) * (1.0 + rng.uniform());
    }
  }
  costs.c_min = costs.c.minCoeff();
  costs.c_max = costs.c.maxCoeff();
  const auto rep = evaluate_router(outcomes, outcomes, costs, {"a", "b", "c"});
  o.check(rep.headroom.headroom_captured == 1.0,
          "oracle-replay headroom_captured = " + fmt("%.17g", rep.headroom.headroom_captured) + " (exactly 1)");
  return o;
}

Outcome determinism(const PlantedRun& run) {
  Outcome o;
  RunConfig second = run.config;
  second.output_dir = run.data_dir / "run2";
  const auto again = run_pipeline(second);
  bool structure_ok = true;
  const double diff = max_numeric_diff(run.result.report.to_json(), again.report.to_json(), structure_ok);
  o.check(structure_ok, "reports have identical structure and non-numeric fields");
  o.check(diff <= 1e-7, "max numeric difference between two runs " + fmt("%.3g", diff) + " <= 1e-7");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pfrouter acceptance suite"};
  std::string workdir = (fs::temp_directory_path() / "pfrouter_acceptance").string();
  app.add_option("--workdir", workdir, "scratch directory for generated datasets and runs");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  fs::create_directories(workdir);

  PlantedRun planted_run;
  bool planted_ok = false;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"metric oracles", metric_oracles},
      {"trivial anchors", trivial_anchors},
      {"gradient check", gradient},
      {"planted-signal end-to-end",
       [&] {
         auto o = planted(workdir, planted_run);
         planted_ok = true;
         return o;
       }},
      {"null control", [&] { return null_control(workdir); }},
      {"routing semantics", routing_semantics},
      {"sweep grid count", sweep_grid},
      {"dominating and oracle-replay routers", dominating_router},
      {"determinism",
       [&] {
         if (!planted_ok) {
           Outcome o;
           o.check(false, "planted run did not complete");
           return o;
         }
         return determinism(planted_run);
       }},
  };

  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.check(false, std::string("threw: ") + e.what());
    }
    const double secs = seconds_since(t0);
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << name << "  (" << fmt("%.1f", secs) << " s)\n";
    for (const auto& d : o.details) std::cout << "        " << d << '\n';
    std::cout.flush();
    failures += o.pass ? 0 : 1;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criterion/criteria failed")
            << '\n';
  return failures == 0 ? 0 : 1;
}
