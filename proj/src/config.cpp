#include "pfrouter/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <numeric>
#include <set>

#include "pfrouter/binary_io.hpp"

namespace pfrouter {

namespace fs = std::filesystem;

std::string_view to_string(EncoderMode mode) {
  switch (mode) {
    case EncoderMode::kPerModel: return "per_model";
    case EncoderMode::kSingle: return "single";
    case EncoderMode::kAuto: return "auto";
  }
  return "auto";
}

EncoderMode parse_encoder_mode(std::string_view text) {
  if (text == "per_model") return EncoderMode::kPerModel;
  if (text == "single") return EncoderMode::kSingle;
  if (text == "auto") return EncoderMode::kAuto;
  throw ConfigError("unknown encoder mode '" + std::string(text) + "' (expected per_model, single or auto)");
}

std::string_view to_string(PredictorKind kind) {
  switch (kind) {
    case PredictorKind::kTrunkNet: return "trunk_net";
    case PredictorKind::kKnnMajority: return "knn_majority";
    case PredictorKind::kKnnInverseDistance: return "knn_inverse_distance";
  }
  return "trunk_net";
}

PredictorKind parse_predictor_kind(std::string_view text) {
  if (text == "trunk_net") return PredictorKind::kTrunkNet;
  if (text == "knn_majority") return PredictorKind::kKnnMajority;
  if (text == "knn_inverse_distance") return PredictorKind::kKnnInverseDistance;
  throw ConfigError("unknown predictor '" + std::string(text) + "'");
}

void RunConfig::validate() const {
  if (activations.empty()) throw ConfigError("config: no activation dumps given");
  if (labels.empty()) throw ConfigError("config: labels path is required");
  if (pool.empty()) throw ConfigError("config: pool path is required");
  if (output_dir.empty()) throw ConfigError("config: output_dir is required");
  switch (encoder_mode) {
    case EncoderMode::kPerModel:
      if (encoder_for_target.empty()) throw ConfigError("config: per_model mode needs encoder_for_target");
      for (const auto& [target, encoder] : encoder_for_target) {
        if (!activations.contains(encoder)) {
          throw ConfigError("config: target '" + target + "' uses unknown encoder '" + encoder + "'");
        }
      }
      break;
    case EncoderMode::kSingle:
      if (!single_encoder && activations.size() != 1) {
        throw ConfigError("config: single mode needs single_encoder when several dumps are given");
      }
      if (single_encoder && !activations.contains(*single_encoder)) {
        throw ConfigError("config: unknown single_encoder '" + *single_encoder + "'");
      }
      break;
    case EncoderMode::kAuto: break;
  }
  if (pca_dim < 1) throw ConfigError("config: pca_dim must be positive");
  if (cv_folds < 2) throw ConfigError("config: cv_folds must be at least 2");
  if (!(cv_lambda_l2 >= 0.0)) throw ConfigError("config: cv_lambda_l2 must be nonnegative");
  if (knn_k < 1) throw ConfigError("config: knn_k must be positive");
  trunk.validate();
  if (split_fractions.size() != 2 && split_fractions.size() != 3) {
    throw ConfigError("config: split_fractions needs {train, test} or {train, cal, test}");
  }
  double total = 0.0;
  for (double f : split_fractions) {
    if (!(f > 0.0)) throw ConfigError("config: split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("config: split fractions must sum to 1");
  lambda_grid_intervals(lambda_step);
  if (threads < 1) throw ConfigError("config: threads must be positive");
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  nlohmann::ordered_json acts = nlohmann::ordered_json::object();
  for (const auto& [id, path] : activations) acts[id] = path.string();
  j["activations"] = acts;
  j["labels"] = labels.string();
  j["pool"] = pool.string();
  j["output_dir"] = output_dir.string();
  j["encoder_mode"] = std::string(to_string(encoder_mode));
  if (!encoder_for_target.empty()) j["encoder_for_target"] = encoder_for_target;
  if (single_encoder) j["single_encoder"] = *single_encoder;
  j["pca_dim"] = pca_dim;
  j["layer_criterion"] = std::string(to_string(layer_criterion));
  j["cv_folds"] = cv_folds;
  j["cv_lambda_l2"] = cv_lambda_l2;
  j["predictor"] = std::string(to_string(predictor));
  j["knn_k"] = knn_k;
  j["trunk"] = trunk.to_json();
  j["split_fractions"] = split_fractions;
  j["lambda_step"] = lambda_step;
  j["router_point"] = std::string(to_string(router_point));
  j["oracle_distance_raw"] = oracle_distance_raw;
  if (acc_floor) j["acc_floor"] = *acc_floor;
  if (acc_ceil) j["acc_ceil"] = *acc_ceil;
  j["seed"] = seed;
  j["threads"] = threads;
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known{
      "activations",   "labels",        "pool",        "output_dir",   "encoder_mode",       "encoder_for_target",
      "single_encoder", "pca_dim",      "layer_criterion", "cv_folds", "cv_lambda_l2",       "predictor",
      "knn_k",         "trunk",         "split_fractions", "lambda_step", "router_point",    "oracle_distance_raw",
      "acc_floor",     "acc_ceil",      "seed",        "threads"};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("config: unknown field '" + key + "'");
  }
  const auto resolve = [&](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  RunConfig c;
  try {
    if (j.contains("activations")) {
      const auto& a = j.at("activations");
      if (a.is_string()) {
        // a single dump; the encoder id comes from its manifest when opened
        c.activations.emplace("", resolve(a.get<std::string>()));
      } else {
        for (const auto& [id, path] : a.items()) c.activations.emplace(id, resolve(path.get<std::string>()));
      }
    }
    if (j.contains("labels")) c.labels = resolve(j.at("labels").get<std::string>());
    if (j.contains("pool")) c.pool = resolve(j.at("pool").get<std::string>());
    if (j.contains("output_dir")) c.output_dir = resolve(j.at("output_dir").get<std::string>());
    if (j.contains("encoder_mode")) c.encoder_mode = parse_encoder_mode(j.at("encoder_mode").get<std::string>());
    if (j.contains("encoder_for_target")) {
      c.encoder_for_target = j.at("encoder_for_target").get<std::map<std::string, std::string>>();
    }
    if (j.contains("single_encoder")) c.single_encoder = j.at("single_encoder").get<std::string>();
    c.pca_dim = j.value("pca_dim", c.pca_dim);
    if (j.contains("layer_criterion")) {
      c.layer_criterion = parse_layer_criterion(j.at("layer_criterion").get<std::string>());
    }
    c.cv_folds = j.value("cv_folds", c.cv_folds);
    c.cv_lambda_l2 = j.value("cv_lambda_l2", c.cv_lambda_l2);
    if (j.contains("predictor")) c.predictor = parse_predictor_kind(j.at("predictor").get<std::string>());
    c.knn_k = j.value("knn_k", c.knn_k);
    if (j.contains("trunk")) c.trunk = TrunkNetConfig::from_json(j.at("trunk"));
    c.split_fractions = j.value("split_fractions", c.split_fractions);
    c.lambda_step = j.value("lambda_step", c.lambda_step);
    if (j.contains("router_point")) c.router_point = parse_router_point_rule(j.at("router_point").get<std::string>());
    c.oracle_distance_raw = j.value("oracle_distance_raw", c.oracle_distance_raw);
    if (j.contains("acc_floor") && !j.at("acc_floor").is_null()) c.acc_floor = j.at("acc_floor").get<double>();
    if (j.contains("acc_ceil") && !j.at("acc_ceil").is_null()) c.acc_ceil = j.at("acc_ceil").get<double>();
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.trunk.threads = c.threads;
  return c;
}

namespace {

std::string env_name(std::string_view prefix, std::string_view key) {
  std::string out(prefix);
  for (char ch : key) out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
  return out;
}

nlohmann::json parse_env_value(const char* raw) {
  try {
    return nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    return std::string(raw);
  }
}

}  // namespace

void apply_env_overrides(nlohmann::json& j) {
  static const std::vector<std::string> top{"labels",          "pool",         "output_dir",  "encoder_mode",
                                            "single_encoder",  "pca_dim",      "layer_criterion", "cv_folds",
                                            "cv_lambda_l2",    "predictor",    "knn_k",       "split_fractions",
                                            "lambda_step",     "router_point", "oracle_distance_raw", "acc_floor",
                                            "acc_ceil",        "seed",         "threads",     "activations"};
  static const std::vector<std::string> trunk{"trunk_hidden_sizes", "learning_rate", "batch_size", "max_epochs",
                                              "early_stop_patience", "val_fraction", "num_seeds", "ensemble_top",
                                              "weight_decay"};
  for (const auto& key : top) {
    if (const char* v = std::getenv(env_name("PFROUTER_", key).c_str())) j[key] = parse_env_value(v);
  }
  for (const auto& key : trunk) {
    if (const char* v = std::getenv(env_name("PFROUTER_TRUNK_", key).c_str())) j["trunk"][key] = parse_env_value(v);
  }
}

RunConfig load_run_config(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  apply_env_overrides(j);
  RunConfig c = RunConfig::from_json(j, path.parent_path());
  c.validate();
  return c;
}

}  // namespace pfrouter
