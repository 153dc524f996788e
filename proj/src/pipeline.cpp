#include "pfrouter/pipeline.hpp"

#include <algorithm>

#include "pfrouter/binary_io.hpp"
#include "pfrouter/hash.hpp"

namespace pfrouter {

namespace fs = std::filesystem;

namespace {

nlohmann::ordered_json diagnostics_json(const std::vector<LayerDiagnostics>& diags) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& d : diags) {
    nlohmann::ordered_json j;
    j["encoder_id"] = d.encoder_id;
    j["layer"] = d.layer;
    j["pooling"] = std::string(to_string(d.pooling));
    j["sample_count"] = d.sample_count;
    j["dim"] = d.dim;
    j["pca_dim"] = d.pca_dim;
    j["d_eff"] = d.d_eff;
    j["anisotropy"] = d.anisotropy;
    auto fisher = nlohmann::ordered_json::object();
    for (const auto& [target, t] : d.fisher) {
      fisher[target] = {{"j", t.j}, {"trace0", t.trace0}, {"trace1", t.trace1}, {"n0", t.n0}, {"n1", t.n1},
                        {"mean_gap_sq", (t.mean1 - t.mean0).squaredNorm()}};
    }
    j["fisher"] = fisher;
    if (!d.cv_auc.empty()) j["cv_auc"] = d.cv_auc;
    arr.push_back(std::move(j));
  }
  return arr;
}

std::vector<std::string> probe_encoders(const RunContext& ctx) {
  const auto& cfg = ctx.config();
  std::vector<std::string> out;
  switch (cfg.encoder_mode) {
    case EncoderMode::kPerModel:
      for (const auto& model : ctx.pool().models) {
        auto it = cfg.encoder_for_target.find(model.model_id);
        if (it == cfg.encoder_for_target.end()) {
          throw ConfigError("per_model mode: no encoder assigned to target '" + model.model_id + "'");
        }
        if (std::find(out.begin(), out.end(), it->second) == out.end()) out.push_back(it->second);
      }
      break;
    case EncoderMode::kSingle:
      out.push_back(cfg.single_encoder ? *cfg.single_encoder : ctx.stores().begin()->first);
      break;
    case EncoderMode::kAuto:
      for (const auto& [id, store] : ctx.stores()) out.push_back(id);
      break;
  }
  return out;
}

Matrix test_outcomes(const RunContext& ctx, const PredictionMatrix& predictions) {
  if (predictions.target_order != ctx.pool().model_ids()) {
    throw DataError("prediction columns do not follow the pool order");
  }
  return ctx.labels().outcomes(predictions.query_ids);
}

CostMatrix test_costs(const RunContext& ctx, const SplitAssignment& split, const PredictionMatrix& predictions) {
  return build_cost_matrix(ctx.pool(), ctx.labels(), predictions.query_ids, split.train_ids);
}

}  // namespace

RunContext RunContext::open(const RunConfig& config, std::ostream* log) {
  config.validate();
  RunContext ctx;
  ctx.config_ = config;
  ctx.log_ = log;
  ctx.pool_ = load_model_pool(config.pool);
  ctx.labels_ = load_label_table(config.labels).aligned_to(ctx.pool_.model_ids());
  for (const auto& [id, path] : config.activations) {
    ActivationStore store = ActivationStore::open(path);
    const std::string key = id.empty() ? store.encoder_id() : id;
    if (!id.empty() && id != store.encoder_id()) {
      throw DataError("activation dump " + path.string() + " holds encoder '" + store.encoder_id() +
                      "', configured as '" + id + "'");
    }
    for (const auto& q : ctx.labels_.query_ids()) store.row_of(q);
    ctx.stores_.emplace(key, std::move(store));
  }
  if (config.single_encoder && !ctx.stores_.contains(*config.single_encoder)) {
    throw ConfigError("unknown single_encoder '" + *config.single_encoder + "'");
  }
  fs::create_directories(config.output_dir);
  return ctx;
}

void RunContext::log(const std::string& line) const {
  if (log_ != nullptr) *log_ << line << std::endl;
}

SplitAssignment stage_split(const RunContext& ctx) {
  SplitAssignment split = stratified_split(ctx.labels(), ctx.config().split_fractions, ctx.config().seed);
  for (const auto& w : split.warnings) ctx.log("warning: " + w);
  io::write_text(ctx.artifact(artifacts::kSplit), split.to_json().dump(2) + "\n");
  ctx.log("split: " + std::to_string(split.train_ids.size()) + " train, " + std::to_string(split.cal_ids.size()) +
          " cal, " + std::to_string(split.test_ids.size()) + " test");
  return split;
}

ProbeResult stage_probe(const RunContext& ctx, const SplitAssignment& split) {
  const auto& cfg = ctx.config();
  ProbeResult result;
  for (const auto& encoder : probe_encoders(ctx)) {
    auto it = ctx.stores().find(encoder);
    if (it == ctx.stores().end()) throw ConfigError("unknown encoder '" + encoder + "'");
    auto diags = probe_layers(it->second, ctx.labels(), ctx.pool(), split,
                              ProbeOptions{cfg.pca_dim, cfg.seed, cfg.threads});
    result.diagnostics.insert(result.diagnostics.end(), diags.begin(), diags.end());
  }
  SelectionConstraints constraints;
  if (cfg.encoder_mode == EncoderMode::kPerModel) constraints.encoder_for_target = cfg.encoder_for_target;
  if (cfg.encoder_mode == EncoderMode::kSingle) constraints.single_encoder = probe_encoders(ctx).front();
  CvInputs cv{&ctx.stores(), &ctx.labels(), &split, CvOptions{cfg.cv_folds, cfg.cv_lambda_l2, cfg.seed, cfg.pca_dim},
              cfg.threads};
  result.selection = select_layers(result.diagnostics, ctx.pool().model_ids(), cfg.layer_criterion, &cv, constraints);
  io::write_text(ctx.artifact(artifacts::kDiagnosticsTable),
                 format_diagnostics_table(result.diagnostics, ctx.pool().model_ids()));
  io::write_text(ctx.artifact(artifacts::kDiagnostics), diagnostics_json(result.diagnostics).dump(2) + "\n");
  io::write_text(ctx.artifact(artifacts::kSelection), result.selection.to_json().dump(2) + "\n");
  for (const auto& [target, c] : result.selection.choices) {
    ctx.log("selected " + target + ": " + c.encoder_id + " layer " + std::to_string(c.layer) + " " +
            std::string(to_string(c.pooling)));
  }
  return result;
}

std::map<std::string, PcaModel> stage_fit_pca(const RunContext& ctx, const SplitAssignment& split,
                                              const LayerSelection& selection) {
  const auto& cfg = ctx.config();
  auto pcas = fit_target_pcas(ctx.stores(), selection, ctx.pool(), split.train_ids, cfg.pca_dim, cfg.seed, cfg.threads);
  fs::create_directories(ctx.artifact(artifacts::kPcaDir));
  for (const auto& [target, pca] : pcas) save_pca(pca, ctx.artifact(artifacts::kPcaDir) / (target + ".pca"));
  return pcas;
}

std::pair<FeatureMatrix, FeatureMatrix> stage_features(const RunContext& ctx, const SplitAssignment& split,
                                                       const LayerSelection& selection,
                                                       const std::map<std::string, PcaModel>& pcas) {
  auto train = build_features(ctx.stores(), selection, pcas, ctx.pool(), split.train_ids);
  auto test = build_features(ctx.stores(), selection, pcas, ctx.pool(), split.test_ids);
  save_features(train, ctx.artifact(artifacts::kFeaturesTrain));
  save_features(test, ctx.artifact(artifacts::kFeaturesTest));
  return {std::move(train), std::move(test)};
}

TrunkNetEnsemble stage_train(const RunContext& ctx, const FeatureMatrix& train) {
  const auto& cfg = ctx.config();
  if (cfg.predictor != PredictorKind::kTrunkNet) return {};
  TrunkNetConfig trunk = cfg.trunk;
  trunk.threads = cfg.threads;
  auto ensemble = train_shared_trunk(train.values, ctx.labels().outcomes(train.query_ids), ctx.pool().model_ids(),
                                     trunk, cfg.seed);
  save_ensemble(ensemble, ctx.artifact(artifacts::kEnsemble));
  for (std::size_t idx : ensemble.selected) {
    const auto& m = ensemble.members[idx];
    ctx.log("member seed " + std::to_string(m.seed) + ": val_loss " + std::to_string(m.val_loss) + " at epoch " +
            std::to_string(m.best_epoch));
  }
  return ensemble;
}

PredictionMatrix stage_predict(const RunContext& ctx, const TrunkNetEnsemble& ensemble, const FeatureMatrix& train,
                               const FeatureMatrix& test) {
  const auto& cfg = ctx.config();
  PredictionMatrix predictions;
  if (cfg.predictor == PredictorKind::kTrunkNet) {
    predictions = predict(ensemble, test.values, test.query_ids);
  } else {
    KnnIndex index{train.values, ctx.labels().outcomes(train.query_ids), ctx.pool().model_ids()};
    const auto mode = cfg.predictor == PredictorKind::kKnnMajority ? KnnMode::kMajority : KnnMode::kInverseDistance;
    predictions = knn_predict(index, test.values, cfg.knn_k, mode, test.query_ids);
  }
  io::write_text(ctx.artifact(artifacts::kPredictions), format_predictions_tsv(predictions));
  return predictions;
}

std::vector<RoutingDecision> stage_route(const RunContext& ctx, const SplitAssignment& split,
                                         const PredictionMatrix& predictions, double lambda) {
  auto decisions = route(predictions, test_costs(ctx, split, predictions), lambda);
  io::write_text(ctx.artifact(artifacts::kDecisions), format_decisions_jsonl(decisions, ctx.pool().model_ids()));
  return decisions;
}

SweepResult stage_sweep(const RunContext& ctx, const SplitAssignment& split, const PredictionMatrix& predictions,
                        double step) {
  auto sweep = sweep_lambda(predictions.p_hat, test_costs(ctx, split, predictions), test_outcomes(ctx, predictions),
                            step, ctx.config().threads);
  io::write_text(ctx.artifact(artifacts::kOperatingPoints), format_operating_points_tsv(sweep.raw));
  ctx.log("sweep: " + std::to_string(sweep.raw_count()) + " grid points, " + std::to_string(sweep.points.size()) +
          " distinct");
  return sweep;
}

EvalReport stage_evaluate(const RunContext& ctx, const SplitAssignment& split, const PredictionMatrix& predictions) {
  const auto& cfg = ctx.config();
  EvalOptions options;
  options.lambda_step = cfg.lambda_step;
  options.router_point = cfg.router_point;
  options.oracle_distance_raw = cfg.oracle_distance_raw;
  options.acc_floor = cfg.acc_floor;
  options.acc_ceil = cfg.acc_ceil;
  options.threads = cfg.threads;
  auto report = evaluate_router(predictions.p_hat, test_outcomes(ctx, predictions), test_costs(ctx, split, predictions),
                                ctx.pool().model_ids(), options);
  io::write_text(ctx.artifact(artifacts::kReport), report.to_json().dump(2) + "\n");
  io::write_text(ctx.artifact(artifacts::kReportText), render_report(report));
  return report;
}

namespace {

nlohmann::json read_json_artifact(const RunContext& ctx, const char* name) {
  const fs::path path = ctx.artifact(name);
  if (!fs::exists(path)) throw DataError("missing artifact " + path.string() + " (run the earlier stage first)");
  try {
    return nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace

SplitAssignment load_split(const RunContext& ctx) {
  return SplitAssignment::from_json(read_json_artifact(ctx, artifacts::kSplit));
}

LayerSelection load_selection(const RunContext& ctx) {
  return LayerSelection::from_json(read_json_artifact(ctx, artifacts::kSelection));
}

std::map<std::string, PcaModel> load_pcas(const RunContext& ctx) {
  std::map<std::string, PcaModel> out;
  for (const auto& model : ctx.pool().models) {
    const fs::path path = ctx.artifact(artifacts::kPcaDir) / (model.model_id + ".pca");
    if (!fs::exists(path)) throw DataError("missing artifact " + path.string() + " (run fit-pca first)");
    out.emplace(model.model_id, load_pca(path));
  }
  return out;
}

FeatureMatrix load_feature_artifact(const RunContext& ctx, const std::string& name) {
  const fs::path path = ctx.artifact(name);
  if (!fs::exists(path)) throw DataError("missing artifact " + path.string() + " (run features first)");
  return load_features(path);
}

TrunkNetEnsemble load_ensemble_artifact(const RunContext& ctx) {
  if (ctx.config().predictor != PredictorKind::kTrunkNet) return {};
  const fs::path path = ctx.artifact(artifacts::kEnsemble);
  if (!fs::exists(path)) throw DataError("missing artifact " + path.string() + " (run train first)");
  return load_ensemble(path);
}

PredictionMatrix load_predictions(const RunContext& ctx) {
  const fs::path path = ctx.artifact(artifacts::kPredictions);
  if (!fs::exists(path)) throw DataError("missing artifact " + path.string() + " (run predict first)");
  return parse_predictions_tsv(io::read_text(path), path.string());
}

void write_run_manifest(const RunContext& ctx) {
  const auto& cfg = ctx.config();
  nlohmann::ordered_json j;
  j["config"] = cfg.to_json();
  nlohmann::ordered_json inputs = nlohmann::ordered_json::object();
  inputs[cfg.labels.string()] = sha256_file(cfg.labels);
  inputs[cfg.pool.string()] = sha256_file(cfg.pool);
  for (const auto& [id, store] : ctx.stores()) {
    fs::path dir = cfg.activations.contains(id) ? cfg.activations.at(id) : cfg.activations.at("");
    if (!fs::is_directory(dir)) dir = dir.parent_path();
    inputs[(dir / "manifest.json").string()] = sha256_file(dir / "manifest.json");
    for (const auto& m : store.manifest().matrices) inputs[(dir / m.path).string()] = sha256_file(dir / m.path);
  }
  j["inputs"] = inputs;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(cfg.output_dir)) {
    if (entry.is_regular_file() && entry.path().filename() != artifacts::kRunManifest) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  nlohmann::ordered_json outputs = nlohmann::ordered_json::object();
  for (const auto& f : files) outputs[fs::relative(f, cfg.output_dir).generic_string()] = sha256_file(f);
  j["artifacts"] = outputs;
  io::write_text(ctx.artifact(artifacts::kRunManifest), j.dump(2) + "\n");
}

PipelineResult run_pipeline(const RunConfig& config, std::ostream* log) {
  const RunContext ctx = run_stage("load", [&] { return RunContext::open(config, log); });
  PipelineResult result;
  const auto split = run_stage("split", [&] { return stage_split(ctx); });
  auto probe = run_stage("probe", [&] { return stage_probe(ctx, split); });
  const auto pcas = run_stage("fit-pca", [&] { return stage_fit_pca(ctx, split, probe.selection); });
  const auto [train, test] = run_stage("features", [&] { return stage_features(ctx, split, probe.selection, pcas); });
  const auto ensemble = run_stage("train", [&] { return stage_train(ctx, train); });
  const auto predictions = run_stage("predict", [&] { return stage_predict(ctx, ensemble, train, test); });
  run_stage("route", [&] { return stage_route(ctx, split, predictions, 1.0); });
  run_stage("sweep", [&] { return stage_sweep(ctx, split, predictions, config.lambda_step); });
  result.report = run_stage("evaluate", [&] { return stage_evaluate(ctx, split, predictions); });
  run_stage("manifest", [&] {
    write_run_manifest(ctx);
    return 0;
  });
  result.selection = std::move(probe.selection);
  result.diagnostics = std::move(probe.diagnostics);
  return result;
}

}  // namespace pfrouter
