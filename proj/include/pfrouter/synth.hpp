#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfrouter/common.hpp"
#include "pfrouter/ingest.hpp"

namespace pfrouter {

/// Knobs of the planted-signal generator. Vectors indexed by target may hold a
/// single value, which is broadcast to every target.
struct SynthSpec {
  std::size_t n_queries = 4000;
  int hidden_dim = 64;
  int num_layers = 8;
  int num_targets = 3;
  int signal_layer = 6;
  std::vector<double> signal_strength{4.0};
  double noise_std = 1.0;
  std::vector<double> base_rates{0.55, 0.65, 0.75};
  /// Extra isotropic noise on the mean-pooled copy of the signal layer.
  double mean_pool_noise_std = 1.0;
  /// Norm of a constant offset added to every hidden state (0 keeps states centred).
  double anisotropy_shift = 0.0;
  std::map<std::string, double> benchmark_weights{{"bench_a", 0.5}, {"bench_b", 0.3}, {"bench_c", 0.2}};
  std::int64_t input_tokens_min = 50;
  std::int64_t input_tokens_max = 600;
  /// Explicit pricing; when empty, target k is priced at 1 + k/(K−1) times
  /// (0.2 in, 1.0 out) per million tokens with 800 median output tokens.
  std::vector<ModelSpec> pricing;
  std::string encoder_id = "synth-encoder";
  /// Additional encoders holding pure noise at every layer.
  int decoy_encoders = 0;
  std::uint64_t seed = 0;

  double strength(int target) const;
  double base_rate(int target) const;
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static SynthSpec from_json(const nlohmann::json& j);
};

struct SynthTargetTruth {
  std::string model_id;
  Vector direction;  // unit w_k
  double strength = 0.0;
  double bias = 0.0;
  double requested_base_rate = 0.0;
  double realized_base_rate = 0.0;
};

struct SynthMetadata {
  SynthSpec spec;
  std::string signal_encoder;
  int signal_layer = 0;
  std::vector<SynthTargetTruth> targets;

  nlohmann::ordered_json to_json() const;
  static SynthMetadata from_json(const nlohmann::json& j);
};

struct SynthDataset {
  std::map<std::string, ActivationStore> stores;
  LabelTable labels;
  ModelPool pool;
  SynthMetadata metadata;
  /// True correctness probability per (query, target), for oracle checks.
  Matrix true_probability;
};

/// Hidden states are N(0, noise²·I) at every layer; at the signal layer,
/// y_k ~ Bernoulli(σ(strength_k·⟨w_k, h⟩ + b_k)) with b_k set so that the
/// realized base rate matches the request.
SynthDataset generate(const SynthSpec& spec);

/// Layout: activations/<encoder>/{manifest.json,*.bin}, labels.csv, pool.json,
/// metadata.json.
void write_dataset(const SynthDataset& dataset, const std::filesystem::path& directory);

/// Monte-Carlo AUC of the Bayes score σ(s·⟨w,h⟩ + b) under the generator,
/// using soft labels so that no label draws are needed.
double bayes_optimal_auc(double strength, double bias, double noise_std, std::size_t draws, std::uint64_t seed);

/// AUC of probabilistic scores against soft labels p: Σ p_i(1−p_j)[s_i>s_j]
/// with half credit for ties, normalized by the same sum without the indicator.
double soft_label_auc(std::span<const double> scores, std::span<const double> p);

}  // namespace pfrouter
