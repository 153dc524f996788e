// pfrouter: build and evaluate a prefill-activation router.
//
//   pfrouter synth --out data/            write a planted-signal dataset
//   pfrouter run --config data/run_config.json
//
// Stages can also run one at a time (probe, fit-pca, features, train,
// predict, route, sweep, evaluate); each reads the artifacts of the stages
// before it from the configured output directory.

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "pfrouter/binary_io.hpp"
#include "pfrouter/pipeline.hpp"
#include "pfrouter/synth.hpp"

namespace fs = std::filesystem;
using namespace pfrouter;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct CommonOptions {
  std::string config;
  int threads = 0;
  bool quiet = false;
};

RunConfig load_config(const CommonOptions& o) {
  RunConfig cfg = load_run_config(o.config);
  if (o.threads > 0) {
    cfg.threads = o.threads;
    cfg.trunk.threads = o.threads;
  }
  return cfg;
}

std::ostream* log_stream(const CommonOptions& o) { return o.quiet ? nullptr : &std::cerr; }

void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("-c,--config", o.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("-t,--threads", o.threads, "worker threads (overrides the config)")->check(CLI::PositiveNumber);
  sub->add_flag("-q,--quiet", o.quiet, "no progress output");
}

void write_config_template(const fs::path& dir, const SynthDataset& data) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json acts = nlohmann::ordered_json::object();
  for (const auto& [id, store] : data.stores) acts[id] = "activations/" + id;
  j["activations"] = acts;
  j["labels"] = "labels.csv";
  j["pool"] = "pool.json";
  j["output_dir"] = "run";
  j["encoder_mode"] = "auto";
  j["pca_dim"] = std::min(kDefaultPcaDim, data.metadata.spec.hidden_dim);
  j["layer_criterion"] = "fisher_j";
  j["split_fractions"] = {0.85, 0.15};
  j["lambda_step"] = 0.01;
  j["seed"] = data.metadata.spec.seed;
  io::write_text(dir / "run_config.json", j.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prefill-activation LLM router: layer probing, correctness prediction, cost-aware routing"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset with a planted correctness signal");
  std::string spec_path, synth_out;
  std::optional<std::uint64_t> synth_seed;
  std::optional<std::size_t> synth_n;
  std::optional<double> synth_strength;
  std::optional<int> synth_decoys;
  synth->add_option("--spec", spec_path, "generator spec (JSON); defaults otherwise")->check(CLI::ExistingFile);
  synth->add_option("-o,--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("-n,--queries", synth_n, "number of queries");
  synth->add_option("--strength", synth_strength, "signal strength for every target");
  synth->add_option("--decoys", synth_decoys, "number of pure-noise encoders");

  CommonOptions common;
  auto* probe = app.add_subcommand("probe", "split the data, probe layer geometry and select layers");
  auto* fitpca = app.add_subcommand("fit-pca", "fit per-target PCA on the selected layers");
  auto* features = app.add_subcommand("features", "project train and test queries to concatenated features");
  auto* train = app.add_subcommand("train", "train the correctness predictor");
  auto* predict_cmd = app.add_subcommand("predict", "predict correctness probabilities on the test split");
  auto* route_cmd = app.add_subcommand("route", "route test queries at one lambda");
  auto* sweep = app.add_subcommand("sweep", "sweep lambda and record operating points");
  auto* evaluate = app.add_subcommand("evaluate", "compute the metric suite and render the report");
  auto* run = app.add_subcommand("run", "all stages in order");
  for (auto* sub : {probe, fitpca, features, train, predict_cmd, route_cmd, sweep, evaluate, run}) {
    add_common(sub, common);
  }
  double lambda = 1.0;
  route_cmd->add_option("-l,--lambda", lambda, "accuracy weight in [0, 1]");
  std::optional<double> step;
  sweep->add_option("--step", step, "lambda grid step (default from config)");
  std::optional<std::string> router_point;
  evaluate->add_option("--router-point", router_point, "lambda_one or max_accuracy");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and --version exit cleanly; usage errors count as config errors
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    if (synth->parsed()) {
      SynthSpec spec;
      if (!spec_path.empty()) spec = SynthSpec::from_json(nlohmann::json::parse(io::read_text(spec_path)));
      if (synth_seed) spec.seed = *synth_seed;
      if (synth_n) spec.n_queries = *synth_n;
      if (synth_strength) spec.signal_strength = {*synth_strength};
      if (synth_decoys) spec.decoy_encoders = *synth_decoys;
      const SynthDataset data = generate(spec);
      write_dataset(data, synth_out);
      write_config_template(synth_out, data);
      std::cout << "wrote " << data.labels.size() << " queries, " << data.stores.size() << " encoder(s), "
                << data.pool.size() << " targets to " << synth_out << '\n';
      return kOk;
    }

    const RunConfig cfg = load_config(common);
    if (run->parsed()) {
      const auto result = run_pipeline(cfg, log_stream(common));
      std::cout << render_report(result.report);
      return kOk;
    }

    const RunContext ctx = run_stage("load", [&] { return RunContext::open(cfg, log_stream(common)); });
    if (probe->parsed()) {
      const auto split = run_stage("split", [&] { return stage_split(ctx); });
      const auto res = run_stage("probe", [&] { return stage_probe(ctx, split); });
      std::cout << format_diagnostics_table(res.diagnostics, ctx.pool().model_ids());
    } else if (fitpca->parsed()) {
      run_stage("fit-pca", [&] { return stage_fit_pca(ctx, load_split(ctx), load_selection(ctx)); });
    } else if (features->parsed()) {
      run_stage("features", [&] { return stage_features(ctx, load_split(ctx), load_selection(ctx), load_pcas(ctx)); });
    } else if (train->parsed()) {
      run_stage("train", [&] { return stage_train(ctx, load_feature_artifact(ctx, artifacts::kFeaturesTrain)); });
    } else if (predict_cmd->parsed()) {
      run_stage("predict", [&] {
        return stage_predict(ctx, load_ensemble_artifact(ctx), load_feature_artifact(ctx, artifacts::kFeaturesTrain),
                             load_feature_artifact(ctx, artifacts::kFeaturesTest));
      });
    } else if (route_cmd->parsed()) {
      const auto decisions =
          run_stage("route", [&] { return stage_route(ctx, load_split(ctx), load_predictions(ctx), lambda); });
      std::cout << "routed " << decisions.size() << " queries to " << ctx.artifact(artifacts::kDecisions).string()
                << '\n';
    } else if (sweep->parsed()) {
      const auto result = run_stage("sweep", [&] {
        return stage_sweep(ctx, load_split(ctx), load_predictions(ctx), step.value_or(cfg.lambda_step));
      });
      std::cout << format_operating_points_tsv(result.points);
    } else if (evaluate->parsed()) {
      RunConfig eval_cfg = cfg;
      if (router_point) eval_cfg.router_point = parse_router_point_rule(*router_point);
      const RunContext eval_ctx = RunContext::open(eval_cfg, log_stream(common));
      const auto report =
          run_stage("evaluate", [&] { return stage_evaluate(eval_ctx, load_split(eval_ctx), load_predictions(eval_ctx)); });
      write_run_manifest(eval_ctx);
      std::cout << render_report(report);
    }
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
}
