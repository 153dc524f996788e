#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfrouter/common.hpp"

namespace pfrouter {

/// Correctness probabilities, rows keyed by query id, columns by target model.
struct PredictionMatrix {
  std::vector<std::string> query_ids;
  std::vector<std::string> target_order;
  Matrix p_hat;  // [queries × K], entries in [0, 1]
};

std::string format_predictions_tsv(const PredictionMatrix& predictions);
PredictionMatrix parse_predictions_tsv(const std::string& text, const std::string& origin = "predictions");

// ---------------------------------------------------------------------------
// SharedTrunkNet
// ---------------------------------------------------------------------------

struct TrunkNetConfig {
  std::vector<int> trunk_hidden_sizes{256, 128};
  double learning_rate = 1e-3;
  int batch_size = 256;
  int max_epochs = 200;
  int early_stop_patience = 10;
  double val_fraction = 0.15;
  int num_seeds = 10;
  int ensemble_top = 5;
  double weight_decay = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Workers used to train seed members concurrently.
  int threads = 1;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TrunkNetConfig from_json(const nlohmann::json& j);
};

/// Multi-output MLP: rectifier trunk followed by one logit per target.
/// Layer l maps activations a to W_l a + b_l; the last layer is the stacked
/// per-target heads.
class TrunkNet {
 public:
  TrunkNet() = default;
  TrunkNet(int input_dim, const std::vector<int>& trunk_sizes, int num_targets);

  /// Fan-in scaled uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  void initialize(std::uint64_t seed);

  int input_dim() const;
  int num_targets() const;
  std::size_t num_layers() const { return weights_.size(); }
  const std::vector<Matrix>& weights() const { return weights_; }
  const std::vector<Vector>& biases() const { return biases_; }
  std::vector<Matrix>& weights() { return weights_; }
  std::vector<Vector>& biases() { return biases_; }

  /// Logits [n × K].
  Matrix forward(const Matrix& X) const;
  /// Mean over samples and targets of binary cross-entropy on logits.
  double loss(const Matrix& X, const Matrix& Y) const;
  /// Loss and its gradient flattened in parameter order.
  double loss_and_gradient(const Matrix& X, const Matrix& Y, Vector& gradient) const;

  std::size_t parameter_count() const;
  Vector flat_parameters() const;
  void set_flat_parameters(const Vector& params);

 private:
  std::vector<Matrix> weights_;  // [out × in]
  std::vector<Vector> biases_;
};

struct TrunkNetMember {
  TrunkNet net;
  std::uint64_t seed = 0;
  double val_loss = 0.0;
  int epochs_run = 0;
  int best_epoch = 0;
};

struct TrunkNetEnsemble {
  TrunkNetConfig config;
  std::vector<TrunkNetMember> members;
  std::vector<std::size_t> selected;
  std::vector<std::string> target_order;
  std::uint64_t master_seed = 0;

  int input_dim() const;
};

/// Trains cfg.num_seeds members with Adam on a regime-stratified internal
/// train/validation split, early-stopping on mean validation BCE, and keeps the
/// cfg.ensemble_top members with the lowest validation loss.
TrunkNetEnsemble train_shared_trunk(const Matrix& X_train, const Matrix& Y_train,
                                    const std::vector<std::string>& target_order, const TrunkNetConfig& cfg,
                                    std::uint64_t master_seed);

/// Mean of the selected members' sigmoid outputs.
Matrix predict_probabilities(const TrunkNetEnsemble& ensemble, const Matrix& X);
PredictionMatrix predict(const TrunkNetEnsemble& ensemble, const Matrix& X, std::vector<std::string> query_ids);

void save_ensemble(const TrunkNetEnsemble& ensemble, const std::filesystem::path& path);
TrunkNetEnsemble load_ensemble(const std::filesystem::path& path);

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t parameters_checked = 0;
};

/// Analytic gradient vs central differences on a tiny network built from the
/// trunk sizes in `cfg` (input dim 5, two targets, random batch of 16).
GradientCheckResult gradient_check(const TrunkNetConfig& cfg, std::uint64_t seed, double step = 1e-4);

// ---------------------------------------------------------------------------
// Logistic probe
// ---------------------------------------------------------------------------

struct LogisticModel {
  Vector weights;
  double bias = 0.0;
  int iterations = 0;
  double gradient_norm = 0.0;

  Vector decision(const Matrix& X) const;
};

/// Minimizes mean BCE + (lambda/2)·‖w‖² by damped Newton iteration until the
/// gradient norm is at most `tolerance`.
LogisticModel fit_logistic_l2(const Matrix& X, std::span<const std::uint8_t> y, double lambda_l2,
                              double tolerance = 1e-6, int max_iterations = 100);

/// Objective gradient (weights then bias) at the given parameters.
Vector logistic_l2_gradient(const Matrix& X, std::span<const std::uint8_t> y, double lambda_l2,
                            const Vector& weights, double bias);

/// Fold id per sample; each class is shuffled and dealt round-robin.
std::vector<int> stratified_folds(std::span<const std::uint8_t> y, int folds, std::uint64_t seed);

struct CvOptions {
  int folds = 5;
  double lambda_l2 = 1e-3;
  std::uint64_t seed = 0;
  /// PCA width fitted inside each training fold; 0 disables the projection.
  int pca_dim = 0;
};

/// Mean test-fold ROC-AUC of a standardized L2 logistic probe.
double cv_auc_for_layer(const Matrix& X, std::span<const std::uint8_t> y, const CvOptions& options);

// ---------------------------------------------------------------------------
// kNN baselines
// ---------------------------------------------------------------------------

enum class KnnMode { kMajority, kInverseDistance };

struct KnnIndex {
  Matrix vectors;  // [n × d]
  Matrix labels;   // [n × K], 0/1
  std::vector<std::string> target_order;
};

inline constexpr double kKnnEpsilon = 1e-8;

/// Exact flat search on squared Euclidean distance; ties resolve to the lower
/// index. Inverse-distance weights are 1/(dist + 1e-8).
PredictionMatrix knn_predict(const KnnIndex& index, const Matrix& X_query, int k, KnnMode mode,
                             std::vector<std::string> query_ids = {});

}  // namespace pfrouter
