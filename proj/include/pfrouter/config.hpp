#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfrouter/evaluation.hpp"
#include "pfrouter/features.hpp"
#include "pfrouter/predictors.hpp"

namespace pfrouter {

enum class EncoderMode { kPerModel, kSingle, kAuto };
std::string_view to_string(EncoderMode mode);
EncoderMode parse_encoder_mode(std::string_view text);

enum class PredictorKind { kTrunkNet, kKnnMajority, kKnnInverseDistance };
std::string_view to_string(PredictorKind kind);
PredictorKind parse_predictor_kind(std::string_view text);

struct RunConfig {
  std::map<std::string, std::filesystem::path> activations;  // encoder id -> dump
  std::filesystem::path labels;
  std::filesystem::path pool;
  std::filesystem::path output_dir = "pfrouter-out";

  EncoderMode encoder_mode = EncoderMode::kAuto;
  std::map<std::string, std::string> encoder_for_target;  // per_model
  std::optional<std::string> single_encoder;               // single

  int pca_dim = kDefaultPcaDim;
  LayerCriterion layer_criterion = LayerCriterion::kFisherJ;
  int cv_folds = 5;
  double cv_lambda_l2 = 1e-3;

  PredictorKind predictor = PredictorKind::kTrunkNet;
  int knn_k = 10;
  TrunkNetConfig trunk;

  std::vector<double> split_fractions{0.85, 0.15};
  double lambda_step = 1e-2;
  RouterPointRule router_point = RouterPointRule::kLambdaOne;
  bool oracle_distance_raw = false;
  std::optional<double> acc_floor;
  std::optional<double> acc_ceil;

  std::uint64_t seed = 0;
  int threads = 1;

  /// Field-level checks; path existence is checked when inputs are opened.
  void validate() const;

  nlohmann::ordered_json to_json() const;
  /// Relative paths resolve against `base_dir`.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
};

/// Overrides top-level scalar fields from PFROUTER_<FIELD> and trunk fields
/// from PFROUTER_TRUNK_<FIELD>. Values are parsed as JSON, falling back to a
/// plain string.
void apply_env_overrides(nlohmann::json& j);

/// Reads a JSON config file, applies environment overrides, validates.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace pfrouter
