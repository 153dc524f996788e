#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pfrouter/common.hpp"

namespace pfrouter {

// ---------------------------------------------------------------------------
// Activation dumps
// ---------------------------------------------------------------------------

struct MatrixKey {
  int layer = 0;
  Pooling pooling = Pooling::kLastToken;

  auto operator<=>(const MatrixKey&) const = default;
};

struct MatrixEntry {
  MatrixKey key;
  std::string path;  // relative to the manifest directory
};

/// Sidecar description of an activation dump: one encoder, a set of
/// (layer, pooling) matrices sharing the row order of `query_ids`.
struct ActivationManifest {
  std::string encoder_id;
  int num_layers = 0;  // L; valid layer indices are [0, L]
  int hidden_dim = 0;
  std::vector<std::string> query_ids;
  std::vector<MatrixEntry> matrices;
  std::string dtype = "f32le";

  std::set<Pooling> pooling_modes() const;
  /// Throws DataError when an invariant is violated.
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static ActivationManifest from_json(const nlohmann::json& j);
};

/// Immutable view of one encoder's activation dump. Matrices are materialized
/// on first access; concurrent access from several threads is safe.
class ActivationStore {
 public:
  /// Opens a dump lazily. `path` is either the manifest file or its directory.
  static ActivationStore open(const std::filesystem::path& path);
  /// Builds an in-memory store; every manifest entry must have a matrix.
  static ActivationStore from_matrices(ActivationManifest manifest, std::map<MatrixKey, MatrixF> matrices);

  const ActivationManifest& manifest() const;
  const std::string& encoder_id() const { return manifest().encoder_id; }
  std::size_t num_queries() const { return manifest().query_ids.size(); }
  std::vector<MatrixKey> keys() const;
  bool has(MatrixKey key) const;

  const MatrixF& matrix(MatrixKey key) const;
  const MatrixF& matrix(int layer, Pooling pooling) const { return matrix(MatrixKey{layer, pooling}); }

  std::size_t row_of(const std::string& query_id) const;
  std::vector<std::size_t> rows_of(std::span<const std::string> query_ids) const;
  /// Selected rows of one matrix, converted to double.
  Matrix gather(MatrixKey key, std::span<const std::string> query_ids) const;

  /// Forces every matrix to load, surfacing format errors eagerly.
  void validate_all() const;

 private:
  struct State;
  std::shared_ptr<State> state_;
};

/// Reads and validates the binary matrix file for one manifest entry.
MatrixF read_activation_matrix(const std::filesystem::path& file, const ActivationManifest& manifest,
                               MatrixKey expected);
void write_activation_matrix(const std::filesystem::path& file, const MatrixF& values, MatrixKey key);

/// layerNN_<pooling>.bin
std::string canonical_matrix_name(MatrixKey key);

ActivationStore load_activation_store(const std::filesystem::path& path);
/// Writes manifest.json plus one .bin file per matrix into `directory`.
void write_activation_store(const ActivationStore& store, const std::filesystem::path& directory);

// ---------------------------------------------------------------------------
// Labels and pool
// ---------------------------------------------------------------------------

enum class Regime { kAllCorrect, kAllIncorrect, kDisagreement };
std::string_view to_string(Regime regime);

/// Binary correctness per (query, target model) plus per-query metadata.
class LabelTable {
 public:
  LabelTable() = default;
  LabelTable(std::vector<std::string> model_ids, std::vector<std::string> query_ids,
             std::vector<std::string> benchmarks, std::vector<std::int64_t> input_tokens,
             std::vector<std::uint8_t> correctness);

  std::size_t size() const { return query_ids_.size(); }
  std::size_t num_models() const { return model_ids_.size(); }
  const std::vector<std::string>& model_ids() const { return model_ids_; }
  const std::vector<std::string>& query_ids() const { return query_ids_; }
  const std::string& benchmark(std::size_t row) const { return benchmarks_[row]; }
  std::int64_t input_tokens(std::size_t row) const { return input_tokens_[row]; }
  std::uint8_t correct(std::size_t row, std::size_t model) const {
    return correctness_[row * model_ids_.size() + model];
  }

  bool contains(const std::string& query_id) const { return index_.contains(query_id); }
  std::size_t row_of(const std::string& query_id) const;
  std::size_t model_index(const std::string& model_id) const;

  /// Correctness matrix [ids × models] as 0/1 doubles.
  Matrix outcomes(std::span<const std::string> query_ids) const;
  std::vector<std::uint8_t> column(std::size_t model, std::span<const std::string> query_ids) const;

  /// Reorders model columns to `model_ids`; any missing model is a DataError.
  LabelTable aligned_to(const std::vector<std::string>& model_ids) const;

 private:
  std::vector<std::string> model_ids_;
  std::vector<std::string> query_ids_;
  std::vector<std::string> benchmarks_;
  std::vector<std::int64_t> input_tokens_;
  std::vector<std::uint8_t> correctness_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Loads `query_id,benchmark,input_tokens,<model_id>...` CSV, or line-delimited
/// JSON records {query_id, benchmark, input_tokens, correct: {model: 0|1}}
/// when the extension is .jsonl / .ndjson.
LabelTable load_label_table(const std::filesystem::path& path);
LabelTable parse_label_csv(const std::string& text, const std::string& origin = "labels");
LabelTable parse_label_jsonl(const std::string& text, const std::string& origin = "labels");
std::string format_label_csv(const LabelTable& labels);

Regime consensus_regime(const LabelTable& labels, const std::string& query_id);
Regime consensus_regime_of_row(const LabelTable& labels, std::size_t row);
Regime consensus_regime_of_outcomes(const Eigen::Ref<const Eigen::RowVectorXd>& outcomes);

struct ModelSpec {
  std::string model_id;
  double rate_in = 0.0;   // currency per million input tokens
  double rate_out = 0.0;  // currency per million output tokens
  std::int64_t median_out_tokens = 0;
};

struct ModelPool {
  std::vector<ModelSpec> models;

  std::size_t size() const { return models.size(); }
  std::vector<std::string> model_ids() const;
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static ModelPool from_json(const nlohmann::json& j);
};

ModelPool load_model_pool(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

struct SplitAssignment {
  std::vector<std::string> train_ids;
  std::vector<std::string> cal_ids;
  std::vector<std::string> test_ids;
  /// query_id -> (consensus regime, benchmark tag)
  std::map<std::string, std::pair<Regime, std::string>> strata;
  std::vector<std::string> warnings;

  nlohmann::ordered_json to_json() const;
  static SplitAssignment from_json(const nlohmann::json& j);
};

/// Stratifies by (consensus regime, benchmark) and allocates each stratum with
/// largest-remainder rounding. `fractions` is {train, test} or
/// {train, cal, test}. Strata with fewer members than splits go to train.
SplitAssignment stratified_split(const LabelTable& labels, std::span<const double> fractions,
                                 std::uint64_t seed);

/// Largest-remainder apportionment of `total` items over `fractions`; ties on
/// the remainder go to the earlier fraction.
std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const double> fractions);

}  // namespace pfrouter
