#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "pfrouter/config.hpp"
#include "pfrouter/evaluation.hpp"
#include "pfrouter/features.hpp"
#include "pfrouter/geometry.hpp"
#include "pfrouter/ingest.hpp"
#include "pfrouter/predictors.hpp"
#include "pfrouter/routing.hpp"

namespace pfrouter {

/// Artifact file names inside the output directory.
namespace artifacts {
inline constexpr const char* kSplit = "split.json";
inline constexpr const char* kDiagnosticsTable = "diagnostics.tsv";
inline constexpr const char* kDiagnostics = "diagnostics.json";
inline constexpr const char* kSelection = "layer_selection.json";
inline constexpr const char* kPcaDir = "pca";
inline constexpr const char* kFeaturesTrain = "features_train.bin";
inline constexpr const char* kFeaturesTest = "features_test.bin";
inline constexpr const char* kEnsemble = "ensemble.bin";
inline constexpr const char* kPredictions = "predictions_test.tsv";
inline constexpr const char* kDecisions = "decisions.jsonl";
inline constexpr const char* kOperatingPoints = "operating_points.tsv";
inline constexpr const char* kReport = "report.json";
inline constexpr const char* kReportText = "report.txt";
inline constexpr const char* kRunManifest = "run_manifest.json";
}  // namespace artifacts

/// Opened inputs of one run. Label columns follow pool order.
class RunContext {
 public:
  static RunContext open(const RunConfig& config, std::ostream* log = nullptr);

  const RunConfig& config() const { return config_; }
  const std::map<std::string, ActivationStore>& stores() const { return stores_; }
  const LabelTable& labels() const { return labels_; }
  const ModelPool& pool() const { return pool_; }
  std::filesystem::path artifact(const std::string& name) const { return config_.output_dir / name; }
  void log(const std::string& line) const;

 private:
  RunConfig config_;
  std::map<std::string, ActivationStore> stores_;
  LabelTable labels_;
  ModelPool pool_;
  std::ostream* log_ = nullptr;
};

struct ProbeResult {
  std::vector<LayerDiagnostics> diagnostics;
  LayerSelection selection;
};

// Each stage persists its artifacts; the load_* helpers read them back so
// stages can also run one at a time.
SplitAssignment stage_split(const RunContext& ctx);
ProbeResult stage_probe(const RunContext& ctx, const SplitAssignment& split);
std::map<std::string, PcaModel> stage_fit_pca(const RunContext& ctx, const SplitAssignment& split,
                                              const LayerSelection& selection);
/// Train and test feature matrices.
std::pair<FeatureMatrix, FeatureMatrix> stage_features(const RunContext& ctx, const SplitAssignment& split,
                                                       const LayerSelection& selection,
                                                       const std::map<std::string, PcaModel>& pcas);
/// Trains the ensemble; kNN predictors have nothing to fit and return an empty ensemble.
TrunkNetEnsemble stage_train(const RunContext& ctx, const FeatureMatrix& train);
PredictionMatrix stage_predict(const RunContext& ctx, const TrunkNetEnsemble& ensemble, const FeatureMatrix& train,
                               const FeatureMatrix& test);
std::vector<RoutingDecision> stage_route(const RunContext& ctx, const SplitAssignment& split,
                                         const PredictionMatrix& predictions, double lambda);
SweepResult stage_sweep(const RunContext& ctx, const SplitAssignment& split, const PredictionMatrix& predictions,
                        double step);
EvalReport stage_evaluate(const RunContext& ctx, const SplitAssignment& split, const PredictionMatrix& predictions);

SplitAssignment load_split(const RunContext& ctx);
LayerSelection load_selection(const RunContext& ctx);
std::map<std::string, PcaModel> load_pcas(const RunContext& ctx);
FeatureMatrix load_feature_artifact(const RunContext& ctx, const std::string& name);
TrunkNetEnsemble load_ensemble_artifact(const RunContext& ctx);
PredictionMatrix load_predictions(const RunContext& ctx);

/// Hashes every regular file under the output directory plus the inputs and
/// writes run_manifest.json next to them.
void write_run_manifest(const RunContext& ctx);

struct PipelineResult {
  EvalReport report;
  LayerSelection selection;
  std::vector<LayerDiagnostics> diagnostics;
};

/// All stages in order. A failure is rethrown with the failing stage named;
/// artifacts written so far are kept.
PipelineResult run_pipeline(const RunConfig& config, std::ostream* log = nullptr);

/// Runs `fn`, prefixing any pfrouter error with the stage name while keeping
/// its category.
template <class Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError("stage '" + stage + "': " + e.what());
  } catch (const DataError& e) {
    throw DataError("stage '" + stage + "': " + e.what());
  } catch (const NumericError& e) {
    throw NumericError("stage '" + stage + "': " + e.what());
  } catch (const Error& e) {
    throw Error("stage '" + stage + "': " + e.what());
  }
}

}  // namespace pfrouter
