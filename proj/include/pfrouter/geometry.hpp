#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pfrouter/common.hpp"
#include "pfrouter/features.hpp"
#include "pfrouter/ingest.hpp"
#include "pfrouter/predictors.hpp"

namespace pfrouter {

/// Eigenvalues below this fraction of the largest are treated as zero.
inline constexpr double kEigenvalueFloor = 1e-12;
/// Row count above which anisotropy is computed on a seeded subsample.
inline constexpr std::size_t kAnisotropyMaxRows = 20000;
/// Row count above which anisotropy switches from the pairwise loop to the
/// Gram identity. Both are exact.
inline constexpr std::size_t kAnisotropyPairwiseMaxRows = 64;

/// Participation ratio (Σσ)² / Σσ² of the sample-covariance eigenvalues.
double effective_dimensionality(const Matrix& X);

/// Mean pairwise cosine similarity over i < j.
double anisotropy(const Matrix& X, std::uint64_t seed = 0);

struct FisherTerms {
  double j = 0.0;
  Vector mean0;  // class 0 = incorrect
  Vector mean1;  // class 1 = correct
  double trace0 = 0.0;
  double trace1 = 0.0;
  std::size_t n0 = 0;
  std::size_t n1 = 0;
};

/// ‖μ1 − μ0‖² / (tr Σ0 + tr Σ1) with unbiased class covariances.
FisherTerms fisher_terms(const Matrix& X, std::span<const std::uint8_t> y);
double fisher_j(const Matrix& X, std::span<const std::uint8_t> y);

struct LayerDiagnostics {
  std::string encoder_id;
  int num_layers = 0;
  int layer = 0;
  Pooling pooling = Pooling::kLastToken;
  double d_eff = 0.0;
  double anisotropy = 0.0;
  std::size_t sample_count = 0;
  std::size_t dim = 0;
  int pca_dim = 0;
  std::map<std::string, FisherTerms> fisher;  // keyed by target model id
  std::map<std::string, double> cv_auc;       // filled only for the cv_auc criterion

  MatrixKey key() const { return MatrixKey{layer, pooling}; }
};

/// First layer of the probed window [⌈L/2⌉, L].
int upper_half_start(int num_layers);

struct ProbeOptions {
  int pca_dim = kDefaultPcaDim;
  std::uint64_t seed = 0;
  int threads = 1;
};

/// Geometry of every (layer, pooling) in the upper half of the encoder,
/// computed on the train split only. Fisher J uses a PCA fitted on the same rows.
std::vector<LayerDiagnostics> probe_layers(const ActivationStore& store, const LabelTable& labels,
                                           const ModelPool& pool, const SplitAssignment& split,
                                           const ProbeOptions& options);

/// Data needed to score candidates by cross-validated logistic AUC.
struct CvInputs {
  const std::map<std::string, ActivationStore>* stores = nullptr;
  const LabelTable* labels = nullptr;
  const SplitAssignment* split = nullptr;
  CvOptions options;
  int threads = 1;
};

/// Restricts the candidates each target may draw from; empty means any.
struct SelectionConstraints {
  std::map<std::string, std::string> encoder_for_target;
  std::optional<std::string> single_encoder;
};

/// Per target, the (encoder, layer, pooling) maximizing the criterion. Ties go to
/// the deeper layer, then to last-token pooling, then to the earlier encoder id.
LayerSelection select_layers(std::vector<LayerDiagnostics>& diags, const std::vector<std::string>& targets,
                             LayerCriterion criterion, const CvInputs* cv = nullptr,
                             const SelectionConstraints& constraints = {});

std::string format_diagnostics_table(const std::vector<LayerDiagnostics>& diags,
                                     const std::vector<std::string>& targets);

}  // namespace pfrouter
