#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfrouter/common.hpp"
#include "pfrouter/ingest.hpp"

namespace pfrouter {

/// Principal axes fitted on a training block of hidden states.
struct PcaModel {
  Vector mean;                 // [d]
  Matrix components;           // [d_pca × d], orthonormal rows
  Vector explained_variance;   // [d_pca], nonincreasing

  int input_dim() const { return static_cast<int>(mean.size()); }
  int output_dim() const { return static_cast<int>(components.rows()); }
};

inline constexpr int kDefaultPcaDim = 100;
/// Above this input width the covariance route gives way to a randomized range finder.
inline constexpr int kExactPcaMaxDim = 4096;

/// Top-`d_pca` principal directions of `X` (rows are samples). The entry of
/// largest magnitude in every component is made nonnegative so that fits are
/// reproducible.
PcaModel fit_pca(const Matrix& X, int d_pca, std::uint64_t seed = 0);
/// (X − mean) · componentsᵀ
Matrix project(const PcaModel& model, const Matrix& X);

void save_pca(const PcaModel& model, const std::filesystem::path& path);
PcaModel load_pca(const std::filesystem::path& path);

enum class LayerCriterion { kFisherJ, kCvAuc };
std::string_view to_string(LayerCriterion criterion);
LayerCriterion parse_layer_criterion(std::string_view text);

/// Where one target's features come from.
struct LayerChoice {
  std::string encoder_id;
  int layer = 0;
  Pooling pooling = Pooling::kLastToken;
  double score = 0.0;
  LayerCriterion criterion = LayerCriterion::kFisherJ;

  MatrixKey key() const { return MatrixKey{layer, pooling}; }
};

/// Per-target layer choice, keyed by target model id.
struct LayerSelection {
  std::map<std::string, LayerChoice> choices;

  const LayerChoice& at(const std::string& model_id) const;
  nlohmann::ordered_json to_json() const;
  static LayerSelection from_json(const nlohmann::json& j);
};

struct FeatureSegment {
  std::string model_id;
  std::size_t offset = 0;
  std::size_t length = 0;
};

/// Concatenated per-target PCA features, one row per query.
struct FeatureMatrix {
  std::vector<std::string> query_ids;
  std::vector<FeatureSegment> segments;
  Matrix values;

  std::size_t dim() const { return static_cast<std::size_t>(values.cols()); }
};

/// x = [f_1 | f_2 | ... | f_K] with segments in pool order.
FeatureMatrix build_features(const std::map<std::string, ActivationStore>& stores, const LayerSelection& selection,
                             const std::map<std::string, PcaModel>& pcas, const ModelPool& pool,
                             std::span<const std::string> ids);

/// Fits one PCA per target on the `train_ids` rows of its selected matrix.
std::map<std::string, PcaModel> fit_target_pcas(const std::map<std::string, ActivationStore>& stores,
                                                const LayerSelection& selection, const ModelPool& pool,
                                                std::span<const std::string> train_ids, int d_pca,
                                                std::uint64_t seed, int threads = 1);

void save_features(const FeatureMatrix& features, const std::filesystem::path& path);
FeatureMatrix load_features(const std::filesystem::path& path);

}  // namespace pfrouter
