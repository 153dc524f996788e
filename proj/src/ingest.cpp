#include "pfrouter/ingest.hpp"

#include <cmath>
#include <cstdio>
#include <mutex>
#include <unordered_set>

#include "pfrouter/binary_io.hpp"

namespace pfrouter {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kActivationHeaderBytes = 8 + 4 + 4 + 2 + 1 + 1;

}  // namespace

std::set<Pooling> ActivationManifest::pooling_modes() const {
  std::set<Pooling> modes;
  for (const auto& m : matrices) modes.insert(m.key.pooling);
  return modes;
}

void ActivationManifest::validate() const {
  if (encoder_id.empty()) throw DataError("manifest: encoder_id is empty");
  if (num_layers <= 0) throw DataError("manifest: num_layers must be positive");
  if (hidden_dim <= 0) throw DataError("manifest: hidden_dim must be positive");
  if (dtype != "f32le") throw DataError("manifest: unsupported dtype '" + dtype + "'");
  if (query_ids.empty()) throw DataError("empty store");
  std::unordered_set<std::string> seen;
  for (const auto& id : query_ids) {
    if (!seen.insert(id).second) throw DataError("manifest: duplicate query id '" + id + "'");
  }
  std::set<MatrixKey> keys;
  for (const auto& m : matrices) {
    if (m.key.layer < 0 || m.key.layer > num_layers) {
      throw DataError("manifest: layer index " + std::to_string(m.key.layer) + " outside [0, " +
                      std::to_string(num_layers) + "]");
    }
    if (!keys.insert(m.key).second) {
      throw DataError("manifest: duplicate matrix for layer " + std::to_string(m.key.layer));
    }
  }
}

nlohmann::ordered_json ActivationManifest::to_json() const {
  nlohmann::ordered_json j;
  j["encoder_id"] = encoder_id;
  j["num_layers"] = num_layers;
  j["hidden_dim"] = hidden_dim;
  j["dtype"] = dtype;
  j["query_ids"] = query_ids;
  auto list = nlohmann::ordered_json::array();
  for (const auto& m : matrices) {
    list.push_back({{"layer", m.key.layer}, {"pooling", std::string(to_string(m.key.pooling))}, {"path", m.path}});
  }
  j["matrices"] = std::move(list);
  return j;
}

ActivationManifest ActivationManifest::from_json(const nlohmann::json& j) {
  ActivationManifest m;
  try {
    m.encoder_id = j.at("encoder_id").get<std::string>();
    m.num_layers = j.at("num_layers").get<int>();
    m.hidden_dim = j.at("hidden_dim").get<int>();
    m.dtype = j.value("dtype", std::string("f32le"));
    m.query_ids = j.at("query_ids").get<std::vector<std::string>>();
    for (const auto& e : j.at("matrices")) {
      m.matrices.push_back(MatrixEntry{
          MatrixKey{e.at("layer").get<int>(), parse_pooling(e.at("pooling").get<std::string>())},
          e.at("path").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  return m;
}

struct ActivationStore::State {
  ActivationManifest manifest;
  fs::path directory;
  std::unordered_map<std::string, std::size_t> row_index;
  std::mutex mutex;
  std::map<MatrixKey, std::unique_ptr<const MatrixF>> loaded;
};

std::string canonical_matrix_name(MatrixKey key) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "layer%02d_%s.bin", key.layer, std::string(to_string(key.pooling)).c_str());
  return buf;
}

const ActivationManifest& ActivationStore::manifest() const { return state_->manifest; }

ActivationStore ActivationStore::open(const fs::path& path) {
  fs::path manifest_path = fs::is_directory(path) ? path / "manifest.json" : path;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  ActivationStore store;
  store.state_ = std::make_shared<State>();
  store.state_->manifest = ActivationManifest::from_json(j);
  store.state_->manifest.validate();
  store.state_->directory = manifest_path.parent_path();
  for (const auto& m : store.state_->manifest.matrices) {
    const fs::path file = store.state_->directory / m.path;
    if (!fs::exists(file)) throw DataError("missing matrix file " + file.string());
  }
  const auto& ids = store.state_->manifest.query_ids;
  for (std::size_t i = 0; i < ids.size(); ++i) store.state_->row_index.emplace(ids[i], i);
  return store;
}

ActivationStore ActivationStore::from_matrices(ActivationManifest manifest, std::map<MatrixKey, MatrixF> matrices) {
  manifest.validate();
  ActivationStore store;
  store.state_ = std::make_shared<State>();
  for (const auto& entry : manifest.matrices) {
    auto it = matrices.find(entry.key);
    if (it == matrices.end()) {
      throw DataError("no matrix supplied for layer " + std::to_string(entry.key.layer) + " " +
                      std::string(to_string(entry.key.pooling)));
    }
    const MatrixF& values = it->second;
    if (static_cast<std::size_t>(values.rows()) != manifest.query_ids.size()) throw DataError("row count mismatch");
    if (values.cols() != manifest.hidden_dim) throw DataError("column count mismatch");
    for (Eigen::Index r = 0; r < values.rows(); ++r) {
      if (!values.row(r).allFinite()) {
        throw DataError("non-finite value at layer " + std::to_string(entry.key.layer) + " row " + std::to_string(r));
      }
    }
    store.state_->loaded.emplace(entry.key, std::make_unique<const MatrixF>(std::move(it->second)));
  }
  store.state_->manifest = std::move(manifest);
  const auto& ids = store.state_->manifest.query_ids;
  for (std::size_t i = 0; i < ids.size(); ++i) store.state_->row_index.emplace(ids[i], i);
  return store;
}

std::vector<MatrixKey> ActivationStore::keys() const {
  std::vector<MatrixKey> out;
  for (const auto& m : state_->manifest.matrices) out.push_back(m.key);
  std::sort(out.begin(), out.end());
  return out;
}

bool ActivationStore::has(MatrixKey key) const {
  for (const auto& m : state_->manifest.matrices) {
    if (m.key == key) return true;
  }
  return false;
}

const MatrixF& ActivationStore::matrix(MatrixKey key) const {
  std::lock_guard lock(state_->mutex);
  if (auto it = state_->loaded.find(key); it != state_->loaded.end()) return *it->second;
  const MatrixEntry* entry = nullptr;
  for (const auto& m : state_->manifest.matrices) {
    if (m.key == key) entry = &m;
  }
  if (entry == nullptr) {
    throw DataError("encoder '" + state_->manifest.encoder_id + "' has no matrix for layer " +
                    std::to_string(key.layer) + " " + std::string(to_string(key.pooling)));
  }
  auto values = read_activation_matrix(state_->directory / entry->path, state_->manifest, key);
  auto [it, inserted] = state_->loaded.emplace(key, std::make_unique<const MatrixF>(std::move(values)));
  return *it->second;
}

std::size_t ActivationStore::row_of(const std::string& query_id) const {
  auto it = state_->row_index.find(query_id);
  if (it == state_->row_index.end()) {
    throw DataError("query id '" + query_id + "' missing from encoder '" + state_->manifest.encoder_id + "'");
  }
  return it->second;
}

std::vector<std::size_t> ActivationStore::rows_of(std::span<const std::string> query_ids) const {
  std::vector<std::size_t> rows;
  rows.reserve(query_ids.size());
  for (const auto& id : query_ids) rows.push_back(row_of(id));
  return rows;
}

Matrix ActivationStore::gather(MatrixKey key, std::span<const std::string> query_ids) const {
  const MatrixF& values = matrix(key);
  const auto rows = rows_of(query_ids);
  Matrix out(static_cast<Eigen::Index>(rows.size()), values.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = values.row(static_cast<Eigen::Index>(rows[i])).cast<double>();
  }
  return out;
}

void ActivationStore::validate_all() const {
  for (const auto& key : keys()) matrix(key);
}

MatrixF read_activation_matrix(const fs::path& file, const ActivationManifest& manifest, MatrixKey expected) {
  io::ByteReader reader = io::ByteReader::load(file);
  reader.expect_magic(io::kActivationMagic);
  const std::uint32_t rows = reader.u32();
  const std::uint32_t cols = reader.u32();
  const std::uint16_t layer = reader.u16();
  const std::uint8_t pooling = reader.u8();
  const std::uint8_t reserved = reader.u8();
  const std::string where = file.string() + " (layer " + std::to_string(expected.layer) + ")";
  if (rows != manifest.query_ids.size()) {
    throw DataError(where + ": row count mismatch (file " + std::to_string(rows) + ", manifest " +
                    std::to_string(manifest.query_ids.size()) + ")");
  }
  if (cols != static_cast<std::uint32_t>(manifest.hidden_dim)) {
    throw DataError(where + ": column count mismatch (file " + std::to_string(cols) + ", manifest " +
                    std::to_string(manifest.hidden_dim) + ")");
  }
  if (layer != expected.layer || pooling > 1 || static_cast<Pooling>(pooling) != expected.pooling) {
    throw DataError(where + ": header layer/pooling disagrees with manifest");
  }
  if (reserved != 0) throw DataError(where + ": reserved header byte must be 0");
  const std::size_t payload = static_cast<std::size_t>(rows) * cols * 4;
  if (reader.remaining() != payload) {
    throw DataError(where + ": payload size " + std::to_string(reader.remaining()) + " != expected " +
                    std::to_string(payload));
  }
  MatrixF values(rows, cols);
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) {
      const float v = reader.f32();
      if (!std::isfinite(v)) {
        throw DataError(where + ": non-finite value at layer " + std::to_string(layer) + " row " + std::to_string(r));
      }
      values(r, c) = v;
    }
  }
  return values;
}

void write_activation_matrix(const fs::path& file, const MatrixF& values, MatrixKey key) {
  io::ByteWriter writer;
  writer.magic(io::kActivationMagic);
  writer.u32(static_cast<std::uint32_t>(values.rows()));
  writer.u32(static_cast<std::uint32_t>(values.cols()));
  writer.u16(static_cast<std::uint16_t>(key.layer));
  writer.u8(static_cast<std::uint8_t>(key.pooling));
  writer.u8(0);
  static_assert(kActivationHeaderBytes == 20);
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    for (Eigen::Index c = 0; c < values.cols(); ++c) writer.f32(values(r, c));
  }
  writer.save(file);
}

ActivationStore load_activation_store(const fs::path& path) { return ActivationStore::open(path); }

void write_activation_store(const ActivationStore& store, const fs::path& directory) {
  ActivationManifest manifest = store.manifest();
  if (manifest.query_ids.empty()) throw DataError("empty store");
  fs::create_directories(directory);
  std::sort(manifest.matrices.begin(), manifest.matrices.end(),
            [](const MatrixEntry& a, const MatrixEntry& b) { return a.key < b.key; });
  for (auto& entry : manifest.matrices) {
    entry.path = canonical_matrix_name(entry.key);
    write_activation_matrix(directory / entry.path, store.matrix(entry.key), entry.key);
  }
  io::write_text(directory / "manifest.json", manifest.to_json().dump(2) + "\n");
}

}  // namespace pfrouter
