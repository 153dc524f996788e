#include <charconv>
#include <sstream>
#include <unordered_set>

#include "pfrouter/binary_io.hpp"
#include "pfrouter/ingest.hpp"

namespace pfrouter {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else {
      cell += c;
    }
  }
  cells.push_back(std::move(cell));
  return cells;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::int64_t parse_tokens(const std::string& text, const std::string& where) {
  std::int64_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size() || value < 0) {
    throw DataError(where + ": input_tokens must be a nonnegative integer, got '" + text + "'");
  }
  return value;
}

std::uint8_t parse_bit(const std::string& text, const std::string& where) {
  if (text == "0") return 0;
  if (text == "1") return 1;
  if (text.empty()) throw DataError(where + ": missing correctness entry");
  throw DataError(where + ": correctness must be 0 or 1, got '" + text + "'");
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

std::string_view to_string(Regime regime) {
  switch (regime) {
    case Regime::kAllCorrect:
      return "all_correct";
    case Regime::kAllIncorrect:
      return "all_incorrect";
    case Regime::kDisagreement:
      return "disagreement";
  }
  return "unknown";
}

LabelTable::LabelTable(std::vector<std::string> model_ids, std::vector<std::string> query_ids,
                       std::vector<std::string> benchmarks, std::vector<std::int64_t> input_tokens,
                       std::vector<std::uint8_t> correctness)
    : model_ids_(std::move(model_ids)),
      query_ids_(std::move(query_ids)),
      benchmarks_(std::move(benchmarks)),
      input_tokens_(std::move(input_tokens)),
      correctness_(std::move(correctness)) {
  const std::size_t n = query_ids_.size();
  if (benchmarks_.size() != n || input_tokens_.size() != n || correctness_.size() != n * model_ids_.size()) {
    throw DataError("label table: inconsistent column lengths");
  }
  std::unordered_set<std::string> models(model_ids_.begin(), model_ids_.end());
  if (models.size() != model_ids_.size()) throw DataError("label table: duplicate model id");
  for (std::size_t i = 0; i < n; ++i) {
    if (!index_.emplace(query_ids_[i], i).second) {
      throw DataError("label table: duplicate query id '" + query_ids_[i] + "'");
    }
    if (input_tokens_[i] < 0) throw DataError("label table: negative input_tokens for '" + query_ids_[i] + "'");
  }
  for (auto v : correctness_) {
    if (v > 1) throw DataError("label table: correctness must be 0 or 1");
  }
}

std::size_t LabelTable::row_of(const std::string& query_id) const {
  auto it = index_.find(query_id);
  if (it == index_.end()) throw DataError("unknown query id '" + query_id + "'");
  return it->second;
}

std::size_t LabelTable::model_index(const std::string& model_id) const {
  for (std::size_t k = 0; k < model_ids_.size(); ++k) {
    if (model_ids_[k] == model_id) return k;
  }
  throw DataError("label table has no correctness column for model '" + model_id + "'");
}

Matrix LabelTable::outcomes(std::span<const std::string> query_ids) const {
  Matrix out(static_cast<Eigen::Index>(query_ids.size()), static_cast<Eigen::Index>(num_models()));
  for (std::size_t i = 0; i < query_ids.size(); ++i) {
    const std::size_t row = row_of(query_ids[i]);
    for (std::size_t k = 0; k < num_models(); ++k) out(i, k) = correct(row, k);
  }
  return out;
}

std::vector<std::uint8_t> LabelTable::column(std::size_t model, std::span<const std::string> query_ids) const {
  std::vector<std::uint8_t> out;
  out.reserve(query_ids.size());
  for (const auto& id : query_ids) out.push_back(correct(row_of(id), model));
  return out;
}

LabelTable LabelTable::aligned_to(const std::vector<std::string>& model_ids) const {
  std::vector<std::size_t> source;
  for (const auto& id : model_ids) source.push_back(model_index(id));
  std::vector<std::uint8_t> cells(size() * model_ids.size());
  for (std::size_t i = 0; i < size(); ++i) {
    for (std::size_t k = 0; k < source.size(); ++k) cells[i * source.size() + k] = correct(i, source[k]);
  }
  return LabelTable(model_ids, query_ids_, benchmarks_, input_tokens_, std::move(cells));
}

LabelTable parse_label_csv(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError(origin + ": empty label table");
  strip_cr(line);
  auto header = split_csv_line(line);
  if (header.size() < 4 || header[0] != "query_id" || header[1] != "benchmark" || header[2] != "input_tokens") {
    throw DataError(origin + ": header must be query_id,benchmark,input_tokens,<model_id>...");
  }
  std::vector<std::string> models(header.begin() + 3, header.end());
  std::vector<std::string> ids, benches;
  std::vector<std::int64_t> tokens;
  std::vector<std::uint8_t> cells;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    auto row = split_csv_line(line);
    const std::string where = origin + ":" + std::to_string(line_no);
    if (row.size() != header.size()) {
      throw DataError(where + ": expected " + std::to_string(header.size()) + " cells, got " +
                      std::to_string(row.size()) + " (missing correctness entry?)");
    }
    ids.push_back(row[0]);
    benches.push_back(row[1]);
    tokens.push_back(parse_tokens(row[2], where));
    for (std::size_t k = 0; k < models.size(); ++k) cells.push_back(parse_bit(row[3 + k], where));
  }
  return LabelTable(std::move(models), std::move(ids), std::move(benches), std::move(tokens), std::move(cells));
}

LabelTable parse_label_jsonl(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> models;
  std::vector<std::string> ids, benches;
  std::vector<std::int64_t> tokens;
  std::vector<std::uint8_t> cells;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = origin + ":" + std::to_string(line_no);
    try {
      auto rec = nlohmann::ordered_json::parse(line);
      const auto& correct = rec.at("correct");
      if (models.empty()) {
        for (const auto& [model, _] : correct.items()) models.push_back(model);
        if (models.empty()) throw DataError(where + ": record has no correctness entries");
      }
      if (correct.size() != models.size()) throw DataError(where + ": missing correctness entry");
      ids.push_back(rec.at("query_id").get<std::string>());
      benches.push_back(rec.value("benchmark", std::string("default")));
      const auto n_in = rec.at("input_tokens").get<std::int64_t>();
      if (n_in < 0) throw DataError(where + ": negative input_tokens");
      tokens.push_back(n_in);
      for (const auto& model : models) {
        if (!correct.contains(model)) throw DataError(where + ": missing correctness entry for '" + model + "'");
        const auto& v = correct.at(model);
        const int bit = v.is_boolean() ? static_cast<int>(v.get<bool>()) : v.get<int>();
        if (bit != 0 && bit != 1) throw DataError(where + ": correctness must be 0 or 1");
        cells.push_back(static_cast<std::uint8_t>(bit));
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  if (ids.empty()) throw DataError(origin + ": empty label table");
  return LabelTable(std::move(models), std::move(ids), std::move(benches), std::move(tokens), std::move(cells));
}

LabelTable load_label_table(const fs::path& path) {
  const std::string text = io::read_text(path);
  const auto ext = path.extension().string();
  if (ext == ".jsonl" || ext == ".ndjson") return parse_label_jsonl(text, path.string());
  return parse_label_csv(text, path.string());
}

std::string format_label_csv(const LabelTable& labels) {
  std::ostringstream out;
  out << "query_id,benchmark,input_tokens";
  for (const auto& m : labels.model_ids()) out << ',' << csv_escape(m);
  out << '\n';
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out << csv_escape(labels.query_ids()[i]) << ',' << csv_escape(labels.benchmark(i)) << ','
        << labels.input_tokens(i);
    for (std::size_t k = 0; k < labels.num_models(); ++k) out << ',' << int(labels.correct(i, k));
    out << '\n';
  }
  return out.str();
}

Regime consensus_regime_of_row(const LabelTable& labels, std::size_t row) {
  std::size_t hits = 0;
  for (std::size_t k = 0; k < labels.num_models(); ++k) hits += labels.correct(row, k);
  if (hits == labels.num_models()) return Regime::kAllCorrect;
  if (hits == 0) return Regime::kAllIncorrect;
  return Regime::kDisagreement;
}

Regime consensus_regime(const LabelTable& labels, const std::string& query_id) {
  return consensus_regime_of_row(labels, labels.row_of(query_id));
}

Regime consensus_regime_of_outcomes(const Eigen::Ref<const Eigen::RowVectorXd>& outcomes) {
  const double hits = outcomes.sum();
  if (hits == static_cast<double>(outcomes.size())) return Regime::kAllCorrect;
  if (hits == 0.0) return Regime::kAllIncorrect;
  return Regime::kDisagreement;
}

std::vector<std::string> ModelPool::model_ids() const {
  std::vector<std::string> ids;
  for (const auto& m : models) ids.push_back(m.model_id);
  return ids;
}

void ModelPool::validate() const {
  if (models.size() < 2) throw DataError("model pool needs at least 2 models");
  std::unordered_set<std::string> seen;
  bool any_positive = false;
  for (const auto& m : models) {
    if (m.model_id.empty()) throw DataError("model pool: empty model_id");
    if (!seen.insert(m.model_id).second) throw DataError("model pool: duplicate model_id '" + m.model_id + "'");
    if (m.rate_in < 0 || m.rate_out < 0) throw DataError("model pool: negative rate for '" + m.model_id + "'");
    if (m.median_out_tokens < 0) throw DataError("model pool: negative median_out_tokens for '" + m.model_id + "'");
    if (m.rate_in + m.rate_out > 0) any_positive = true;
  }
  if (!any_positive) throw DataError("model pool: every model has zero total rate");
}

nlohmann::ordered_json ModelPool::to_json() const {
  auto list = nlohmann::ordered_json::array();
  for (const auto& m : models) {
    list.push_back({{"model_id", m.model_id},
                    {"rate_in", m.rate_in},
                    {"rate_out", m.rate_out},
                    {"median_out_tokens", m.median_out_tokens}});
  }
  return nlohmann::ordered_json{{"models", list}};
}

ModelPool ModelPool::from_json(const nlohmann::json& j) {
  ModelPool pool;
  try {
    for (const auto& e : j.at("models")) {
      pool.models.push_back(ModelSpec{e.at("model_id").get<std::string>(), e.at("rate_in").get<double>(),
                                      e.at("rate_out").get<double>(), e.at("median_out_tokens").get<std::int64_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model pool: ") + e.what());
  }
  pool.validate();
  return pool;
}

ModelPool load_model_pool(const fs::path& path) {
  try {
    return ModelPool::from_json(nlohmann::json::parse(io::read_text(path)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace pfrouter
